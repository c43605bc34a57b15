#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gem/tensor.hpp"

namespace gem {

inline constexpr float kNormalizeEps = 1e-12f;
inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr double kCatmullRomA = -0.5;

// Matrix product with float64 accumulation. Row i of the result depends only on
// row i of `a`, so row-partitioned parallel callers get identical bits.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = &a.storage()[i * k];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const float* brow = &b.storage()[p * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(brow[j]);
    }
    float* orow = &out.storage()[i * n];
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

/// a · bᵀ. Same reduction order as `matmul(a, transpose(b))`, so results agree bitwise;
/// when `a` and `b` are the same tensor the result is exactly symmetric.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_transposed lhs");
  require_rank(b, 2, "matmul_transposed rhs");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: inner extents differ for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ar[p]) * static_cast<double>(br[p]);
      out(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// Adds a length-n vector to every row of an m×n matrix, in place.
inline void add_row_vector(Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_row_vector");
  if (bias.size() != a.cols()) {
    throw DimensionError("bias of length " + std::to_string(bias.size()) + " cannot be added to " +
                         shape_string(a.shape()));
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

/// x·W + b.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  add_row_vector(y, bias);
  return y;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("elementwise add of " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

/// Columns [begin, begin + count) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  if (begin + count > a.cols()) {
    throw DimensionError("column slice [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceeds " + shape_string(a.shape()));
  }
  Tensor out({a.rows(), count});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  return out;
}

inline void assign_cols(Tensor& dst, std::size_t begin, const Tensor& src) {
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    throw DimensionError("cannot place " + shape_string(src.shape()) + " into " +
                         shape_string(dst.shape()) + " at column " + std::to_string(begin));
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

/// Row-wise softmax of a/tau with per-row max subtraction.
inline Tensor row_softmax(const Tensor& a, double tau) {
  require_rank(a, 2, "row_softmax");
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError("row_softmax: temperature must be positive and finite, got " +
                         std::to_string(tau));
  }
  Tensor out(a.shape());
  std::vector<double> e(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    double mx = -INFINITY;
    for (float v : r) {
      if (!std::isfinite(v)) throw NumericError("row_softmax: non-finite input in row " + std::to_string(i));
      mx = std::max(mx, static_cast<double>(v));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      e[j] = std::exp((static_cast<double>(r[j]) - mx) / tau);
      sum += e[j];
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = static_cast<float>(e[j] / sum);
  }
  return out;
}

inline Tensor l2_normalize_rows(const Tensor& a, double eps = kNormalizeEps) {
  require_rank(a, 2, "l2_normalize_rows");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    double ss = 0.0;
    for (float v : r) ss += static_cast<double>(v) * v;
    const double denom = std::max(std::sqrt(ss), eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = static_cast<float>(r[j] / denom);
  }
  return out;
}

inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps) {
  require_rank(a, 2, "layer_norm");
  const std::size_t d = a.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma/beta lengths " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " do not match width " + std::to_string(d));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    double mean = 0.0;
    for (float v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j)
      o[j] = static_cast<float>((r[j] - mean) * inv * gamma[j] + beta[j]);
  }
  return out;
}

namespace detail {

struct LinearTap {
  std::size_t i0, i1;
  double w1;
};

// Half-pixel (align_corners=false) source coordinate, clamped below at zero.
inline LinearTap linear_tap(std::size_t dst, std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  auto i0 = static_cast<std::size_t>(std::floor(src));
  if (i0 > in - 1) i0 = in - 1;
  const std::size_t i1 = std::min(i0 + 1, in - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

struct CubicTaps {
  std::size_t idx[4];
  double w[4];
};

inline double cubic_kernel(double x, double a) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

inline CubicTaps cubic_taps(std::size_t dst, std::size_t in, std::size_t out, double a) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  const double base = std::floor(src);
  const double t = src - base;
  CubicTaps taps{};
  for (int k = 0; k < 4; ++k) {
    const long long i = static_cast<long long>(base) + k - 1;
    taps.idx[k] = static_cast<std::size_t>(std::clamp<long long>(i, 0, static_cast<long long>(in) - 1));
  }
  taps.w[0] = cubic_kernel(t + 1.0, a);
  taps.w[1] = cubic_kernel(t, a);
  taps.w[2] = cubic_kernel(1.0 - t, a);
  taps.w[3] = cubic_kernel(2.0 - t, a);
  return taps;
}

}  // namespace detail

/// Bilinear resampling of an h×w×c field with half-pixel centres. Interpolation runs in
/// float64, so a constant field stays exactly constant.
inline Tensor bilinear_resize(const Tensor& a, std::size_t out_h, std::size_t out_w) {
  require_rank(a, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ParameterError("bilinear_resize: target extent must be >= 1");
  const std::size_t h = a.extent(0), w = a.extent(1), c = a.extent(2);
  if (out_h == h && out_w == w) return a;
  Tensor out({out_h, out_w, c});
  std::vector<detail::LinearTap> xs(out_w);
  for (std::size_t x = 0; x < out_w; ++x) xs[x] = detail::linear_tap(x, w, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto ty = detail::linear_tap(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& tx = xs[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1.0 - tx.w1) * a(ty.i0, tx.i0, ch) + tx.w1 * a(ty.i0, tx.i1, ch);
        const double bot = (1.0 - tx.w1) * a(ty.i1, tx.i0, ch) + tx.w1 * a(ty.i1, tx.i1, ch);
        out(y, x, ch) = static_cast<float>((1.0 - ty.w1) * top + ty.w1 * bot);
      }
    }
  }
  return out;
}

/// Separable cubic-convolution resampling (Keys kernel, Catmull-Rom by default) with
/// half-pixel centres and edge-clamped taps.
inline Tensor bicubic_resize(const Tensor& a, std::size_t out_h, std::size_t out_w,
                             double kernel_a = kCatmullRomA) {
  require_rank(a, 3, "bicubic_resize");
  if (out_h == 0 || out_w == 0) throw ParameterError("bicubic_resize: target extent must be >= 1");
  const std::size_t h = a.extent(0), w = a.extent(1), c = a.extent(2);
  if (out_h == h && out_w == w) return a;
  std::vector<detail::CubicTaps> xs(out_w);
  for (std::size_t x = 0; x < out_w; ++x) xs[x] = detail::cubic_taps(x, w, out_w, kernel_a);
  Tensor out({out_h, out_w, c});
  std::vector<double> acc(c);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto ty = detail::cubic_taps(y, h, out_h, kernel_a);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& tx = xs[x];
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int ky = 0; ky < 4; ++ky) {
        for (int kx = 0; kx < 4; ++kx) {
          const double wgt = ty.w[ky] * tx.w[kx];
          for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += wgt * a(ty.idx[ky], tx.idx[kx], ch);
        }
      }
      for (std::size_t ch = 0; ch < c; ++ch) out(y, x, ch) = static_cast<float>(acc[ch]);
    }
  }
  return out;
}

inline Tensor bicubic_resize_grid(const Tensor& a, std::size_t out_g) {
  require_rank(a, 3, "bicubic_resize_grid");
  if (a.extent(0) != a.extent(1)) {
    throw DimensionError("bicubic_resize_grid expects a square grid, got " + shape_string(a.shape()));
  }
  if (a.extent(0) < 2) throw ParameterError("bicubic_resize_grid: grid side must be >= 2");
  if (out_g < 1) throw ParameterError("bicubic_resize_grid: target side must be >= 1");
  return bicubic_resize(a, out_g, out_g);
}

namespace detail {

inline std::vector<double> start_vector(std::size_t n) {
  std::mt19937_64 gen(0x5eed5eedULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

inline double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Largest singular value of `w` by power iteration on WᵀW.
inline double spectral_norm(const Tensor& w, int iters = 1000, double tol = 1e-12) {
  require_rank(w, 2, "spectral_norm");
  const std::size_t m = w.rows(), n = w.cols();
  std::vector<double> v = detail::start_vector(n), u(m);
  double nv = detail::norm2(v);
  for (auto& x : v) x /= nv;
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(w(i, j)) * v[j];
      u[i] = acc;
    }
    const double next = detail::norm2(u);
    if (next == 0.0) return 0.0;
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) v[j] += static_cast<double>(w(i, j)) * u[i];
    nv = detail::norm2(v);
    if (nv == 0.0) return next;
    for (auto& x : v) x /= nv;
    const bool done = std::abs(next - sigma) <= tol * next;
    sigma = next;
    if (done) break;
  }
  return sigma;
}

struct PcaResult {
  Tensor coords;                    // n×2
  std::vector<double> components;   // 2×d, row-major
  std::vector<double> variances;    // per component
};

/// Projection onto the top two principal directions, found by power iteration on the
/// covariance with deflation. Each direction is signed so its first nonzero loading is positive.
inline PcaResult pca_2d_detail(const Tensor& points) {
  require_rank(points, 2, "pca_2d");
  const std::size_t n = points.rows(), d = points.cols();
  if (n < 2) throw ParameterError("pca_2d: need at least 2 points");
  if (d < 2) throw ParameterError("pca_2d: need at least 2 dimensions");

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<double> centered(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = points(i, j) - mean[j];

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += centered[i * d + a] * centered[i * d + b];
  for (auto& c : cov) c /= static_cast<double>(n - 1);

  PcaResult result{Tensor({n, 2}), std::vector<double>(2 * d, 0.0), {0.0, 0.0}};
  std::vector<double> v, w(d);
  for (std::size_t comp = 0; comp < 2; ++comp) {
    v = detail::start_vector(d);
    // Two Gram-Schmidt passes: with a rank-deficient covariance the iterate is mostly rounding
    // noise along earlier directions, which one pass does not remove.
    auto orthogonalize = [&](std::vector<double>& x) {
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t prev = 0; prev < comp; ++prev) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += x[j] * result.components[prev * d + j];
          for (std::size_t j = 0; j < d; ++j) x[j] -= dot * result.components[prev * d + j];
        }
    };
    orthogonalize(v);
    double nv = detail::norm2(v);
    for (auto& x : v) x /= nv;
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < d; ++b) acc += cov[a * d + b] * v[b];
        w[a] = acc;
      }
      orthogonalize(w);
      double next = 0.0;
      for (std::size_t a = 0; a < d; ++a) next += w[a] * v[a];
      const double nw = detail::norm2(w);
      if (nw == 0.0) {
        lambda = 0.0;
        break;
      }
      double change = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double x = w[a] / nw;
        change = std::max(change, std::abs(x - v[a]));
        v[a] = x;
      }
      lambda = next;
      if (change < 1e-15) break;
    }
    orthogonalize(v);
    nv = detail::norm2(v);
    for (auto& x : v) x /= nv;
    for (std::size_t j = 0; j < d; ++j) {
      if (std::abs(v[j]) > 1e-12) {
        if (v[j] < 0) for (auto& x : v) x = -x;
        break;
      }
    }
    for (std::size_t j = 0; j < d; ++j) result.components[comp * d + j] = v[j];
    result.variances[comp] = std::max(lambda, 0.0);
  }

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t comp = 0; comp < 2; ++comp) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += centered[i * d + j] * result.components[comp * d + j];
      result.coords(i, comp) = static_cast<float>(acc);
    }
  }
  return result;
}

inline Tensor pca_2d(const Tensor& points) { return pca_2d_detail(points).coords; }

}  // namespace gem
