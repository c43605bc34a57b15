#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gem/image_io.hpp"
#include "gem/model_io.hpp"
#include "oracles.hpp"

namespace fixture {

namespace fs = std::filesystem;

/// Tiny model on disk: patch 4, trained grid 2 (8×8 input), shorter side 8.
inline gem::WeightBundle write_tiny_model(const fs::path& dir, std::uint64_t seed = 1, std::size_t layers = 2) {
  gem::WeightBundle b = oracle::random_bundle(oracle::tiny_config(layers), seed);
  b.preprocess = oracle::tiny_preprocess(8);
  gem::write_bundle(dir, b, "tiny-test");
  return b;
}

inline gem::TextEmbeddingSet write_text(const fs::path& dir, const std::vector<std::string>& names,
                                        std::size_t joint_dim = 6, std::uint64_t seed = 2) {
  auto t = oracle::random_text(names, joint_dim, seed);
  gem::write_text_embeddings(dir, t);
  return t;
}

inline gem::Tensor random_pixels(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, 255);
  gem::Tensor t({h, w, 3});
  for (auto& v : t.storage()) v = static_cast<float>(dist(rng)) / 255.0f;
  return t;
}

inline void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << "\n";
}

/// images/, labels/ and classes.txt with `count` random 8×12 images and random labels
/// (including background and ignore pixels).
inline void write_seg_dataset(const fs::path& dir, const std::vector<std::string>& classes, std::size_t count,
                              std::uint64_t seed = 3) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  write_lines(dir / "classes.txt", classes);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = "img" + std::to_string(i);
    gem::write_pixmap(dir / "images" / (id + ".ppm"), random_pixels(8, 12, seed * 100 + i));
    gem::LabelImage lab{8, 12, std::vector<std::uint16_t>(96)};
    std::uniform_int_distribution<int> dist(0, static_cast<int>(classes.size()) + 1);
    for (auto& v : lab.values) {
      const int r = dist(rng);
      v = r == static_cast<int>(classes.size()) + 1 ? 65535 : static_cast<std::uint16_t>(r);
    }
    gem::write_pgm16(dir / "labels" / (id + ".pgm16"), lab);
  }
}

}  // namespace fixture
