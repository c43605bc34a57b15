#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "gem/tensor.hpp"

namespace gem {

/// Standard normal samples from mt19937_64 via Box-Muller. std::normal_distribution is
/// implementation-defined, this is not, so seeded streams match across toolchains.
class GaussianRng {
 public:
  static constexpr const char* kName = "mt19937_64+box-muller";

  explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    // 53-bit mantissa in [0, 1).
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Tensor normal_tensor(Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.storage()) x = static_cast<float>(scale * normal());
    return t;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gem
