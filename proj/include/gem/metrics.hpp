#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gem/gem.hpp"
#include "gem/image_io.hpp"
#include "gem/kernels.hpp"
#include "gem/localization.hpp"
#include "gem/model_io.hpp"

namespace gem {

// ---------------------------------------------------------------------------
// mIoU

struct IoUStats {
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> union_;
  std::vector<double> iou;  // NaN for classes absent from both prediction and ground truth
  double mean_iou = 0.0;
  std::size_t classes_counted = 0;
};

/// Dataset-level accumulation of per-class intersection and union pixel counts. Counts are
/// integers, so the result does not depend on the order images are added.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(std::size_t num_classes)
      : intersection_(num_classes, 0), union_(num_classes, 0) {}

  /// Labels in [0, num_classes) are classes; `ignore_index` in the ground truth skips the
  /// pixel; any other prediction value (e.g. -1) is "no class".
  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::int32_t ignore_index) {
    if (pred.size() != gt.size()) {
      throw DimensionError("miou: prediction has " + std::to_string(pred.size()) +
                           " pixels, ground truth " + std::to_string(gt.size()));
    }
    const auto k = static_cast<std::int32_t>(intersection_.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::int32_t g = gt[i], p = pred[i];
      if (g == ignore_index) continue;
      if (g < 0 || g >= k) {
        throw ParameterError("miou: ground-truth label " + std::to_string(g) + " outside [0, " +
                             std::to_string(k) + ")");
      }
      const bool p_valid = p >= 0 && p < k;
      if (p_valid && p == g) {
        ++intersection_[g];
        ++union_[g];
      } else {
        ++union_[g];
        if (p_valid) ++union_[p];
      }
    }
  }

  IoUStats stats() const {
    IoUStats s{intersection_, union_, std::vector<double>(union_.size()), 0.0, 0};
    double sum = 0.0;
    for (std::size_t c = 0; c < union_.size(); ++c) {
      if (union_[c] == 0) {
        s.iou[c] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      s.iou[c] = static_cast<double>(intersection_[c]) / static_cast<double>(union_[c]);
      sum += s.iou[c];
      ++s.classes_counted;
    }
    s.mean_iou = s.classes_counted ? sum / static_cast<double>(s.classes_counted) : 0.0;
    return s;
  }

 private:
  std::vector<std::uint64_t> intersection_, union_;
};

inline IoUStats miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
                     std::size_t num_classes, std::int32_t ignore_index) {
  IoUAccumulator acc(num_classes);
  acc.add(pred, gt, ignore_index);
  return acc.stats();
}

// ---------------------------------------------------------------------------
// Point-level IoU

struct PointPairIoU {
  std::string image_id, class_name;
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou = 0.0;
};

struct PointMiouReport {
  double mean_iou = 0.0;
  std::vector<PointPairIoU> pairs;  // sorted by (image_id, class_name)
  std::vector<std::pair<std::string, std::string>> excluded_no_positive;
};

using PointKey = std::pair<std::string, std::string>;  // (image_id, class_name)

inline std::pair<std::size_t, std::size_t> point_pixel(const PointAnnotation& p, std::size_t h, std::size_t w) {
  const auto px = std::min(static_cast<std::size_t>(std::floor(p.x_rel * static_cast<double>(w))), w - 1);
  const auto py = std::min(static_cast<std::size_t>(std::floor(p.y_rel * static_cast<double>(h))), h - 1);
  return {py, px};
}

/// Per (image, class): IoU = TP / (TP + FP + FN) over the annotated points only; pairs with
/// no positive point are excluded and listed.
inline PointMiouReport point_miou(const std::map<PointKey, PointPrediction>& predictions,
                                  const std::vector<PointAnnotation>& points) {
  std::map<PointKey, std::vector<const PointAnnotation*>> groups;
  for (const auto& p : points) groups[{p.image_id, p.class_name}].push_back(&p);

  PointMiouReport report;
  double sum = 0.0;
  for (const auto& [key, group] : groups) {
    const bool any_positive = std::any_of(group.begin(), group.end(), [](auto* p) { return p->positive; });
    if (!any_positive) {
      report.excluded_no_positive.push_back(key);
      continue;
    }
    const auto it = predictions.find(key);
    if (it == predictions.end()) {
      throw ParameterError("point_miou: no prediction for image " + key.first + ", class " + key.second);
    }
    const PointPrediction& pred = it->second;
    PointPairIoU pair{key.first, key.second};
    for (const auto* p : group) {
      const auto [y, x] = point_pixel(*p, pred.height, pred.width);
      const bool on = pred.at(y, x) != 0;
      if (p->positive) (on ? pair.tp : pair.fn)++;
      else if (on) pair.fp++;
    }
    pair.iou = static_cast<double>(pair.tp) / static_cast<double>(pair.tp + pair.fp + pair.fn);
    sum += pair.iou;
    report.pairs.push_back(std::move(pair));
  }
  report.mean_iou = report.pairs.empty() ? 0.0 : sum / static_cast<double>(report.pairs.size());
  return report;
}

// ---------------------------------------------------------------------------
// Localization-property analysis

/// Michelson contrast (a − b) / (a + b), with 0/0 read as 0.
inline double michelson(double a, double b) {
  const double s = a + b;
  return s == 0.0 ? 0.0 : (a - b) / s;
}

/// Mean dot product over ordered pairs of distinct tokens. With `cosine` the rows are
/// L2-normalized first.
inline double patch_patch_similarity(const Tensor& tokens, bool cosine = false) {
  require_rank(tokens, 2, "patch_patch_similarity");
  const std::size_t n = tokens.rows(), d = tokens.cols();
  if (n < 2) throw ParameterError("patch_patch_similarity: need at least 2 tokens");
  const Tensor x = cosine ? l2_normalize_rows(tokens) : tokens;
  // Σ_{i≠j} x_i·x_j = ‖Σ x_i‖² − Σ ‖x_i‖²
  std::vector<double> total(d, 0.0);
  double self = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      total[j] += x(i, j);
      self += static_cast<double>(x(i, j)) * x(i, j);
    }
  }
  double sq = 0.0;
  for (double t : total) sq += t * t;
  return (sq - self) / (static_cast<double>(n) * static_cast<double>(n - 1));
}

struct ContrastTerms {
  double inside = 0.0;   // S_in,in or TS_txt,obj
  double outside = 0.0;  // S_in,out or TS_txt,bg
  double contrast = 0.0;
};

namespace detail {

inline std::size_t check_mask(std::size_t n, std::span<const std::uint8_t> mask) {
  if (mask.size() != n) {
    throw DimensionError("contrast: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(n) + " tokens");
  }
  const auto m = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
  if (m == 0 || m == n) throw ParameterError("contrast: mask must cover some but not all tokens");
  return m;
}

}  // namespace detail

/// Pairwise cosine similarities of the rows of `tokens`.
inline Tensor cosine_similarity_matrix(const Tensor& tokens) {
  const Tensor x = l2_normalize_rows(tokens);
  return matmul_transposed(x, x);
}

/// Object-background contrast from a precomputed cosine matrix, using positive parts.
/// A single-token mask has no inside pairs; its inside term is 0.
inline ContrastTerms object_background_contrast_from_similarity(const Tensor& sim,
                                                                std::span<const std::uint8_t> mask) {
  const std::size_t n = sim.rows();
  const std::size_t m = detail::check_mask(n, mask);
  double in_in = 0.0, in_out = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double c = std::max(0.0, static_cast<double>(sim(i, j)));
      (mask[j] ? in_in : in_out) += c;
    }
  }
  ContrastTerms t;
  t.inside = m > 1 ? in_in / (static_cast<double>(m) * static_cast<double>(m - 1)) : 0.0;
  t.outside = in_out / (static_cast<double>(m) * static_cast<double>(n - m));
  t.contrast = michelson(t.inside, t.outside);
  return t;
}

inline ContrastTerms object_background_contrast(const Tensor& tokens, std::span<const std::uint8_t> mask) {
  require_rank(tokens, 2, "object_background_contrast");
  detail::check_mask(tokens.rows(), mask);
  return object_background_contrast_from_similarity(cosine_similarity_matrix(tokens), mask);
}

inline ContrastTerms text_object_background_contrast(const Tensor& patch_tokens_joint,
                                                     std::span<const float> text_embedding,
                                                     std::span<const std::uint8_t> mask) {
  require_rank(patch_tokens_joint, 2, "text_object_background_contrast");
  const std::size_t n = patch_tokens_joint.rows();
  if (text_embedding.size() != patch_tokens_joint.cols()) {
    throw DimensionError("text_object_background_contrast: text width " +
                         std::to_string(text_embedding.size()) + " vs token width " +
                         std::to_string(patch_tokens_joint.cols()));
  }
  const std::size_t m = detail::check_mask(n, mask);
  const Tensor x = l2_normalize_rows(patch_tokens_joint);
  const Tensor t = l2_normalize_rows(
      Tensor({1, text_embedding.size()}, std::vector<float>(text_embedding.begin(), text_embedding.end())));
  const Tensor sim = matmul_transposed(x, t);
  double obj = 0.0, bg = 0.0;
  for (std::size_t i = 0; i < n; ++i) (mask[i] ? obj : bg) += std::max(0.0, static_cast<double>(sim(i, 0)));
  ContrastTerms out;
  out.inside = obj / static_cast<double>(m);
  out.outside = bg / static_cast<double>(n - m);
  out.contrast = michelson(out.inside, out.outside);
  return out;
}

struct ContrastReport {
  double s_pp = 0.0;
  std::vector<double> per_mask_contrast;       // C^M
  double mean_contrast = 0.0;                  // MC
  std::vector<double> per_mask_text_contrast;  // TC^M
  double mean_text_contrast = 0.0;             // MTC
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Lipschitz constants of the attention projections

struct LipschitzEntry {
  std::size_t layer = 0;
  Projection projection = Projection::kValue;
  std::vector<double> per_head;
  double full = 0.0;
};

struct LipschitzSummary {
  double mean = 0.0, stddev = 0.0;
};

struct LipschitzReport {
  std::vector<LipschitzEntry> entries;
  std::map<std::string, LipschitzSummary> per_head_summary;  // keyed by "q", "k", "v"
  std::map<std::string, LipschitzSummary> full_summary;
};

inline LipschitzSummary summarize(const std::vector<double>& values) {
  LipschitzSummary s;
  if (values.empty()) return s;
  s.mean = mean_of(values);
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

/// Spectral norms of the raw Wq/Wk/Wv, per head (d×d_head column blocks) and whole.
inline LipschitzReport lipschitz_constants(const WeightBundle& b, int iters = 2000, double tol = 1e-10) {
  LipschitzReport report;
  const std::size_t heads = b.config.heads, dh = b.config.d_head();
  std::map<std::string, std::vector<double>> per_head, full;
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    for (Projection p : {Projection::kQuery, Projection::kKey, Projection::kValue}) {
      const Tensor& w = projection_weight(b.layers[l], p);
      LipschitzEntry e{l, p, {}, spectral_norm(w, iters, tol)};
      for (std::size_t h = 0; h < heads; ++h) {
        e.per_head.push_back(spectral_norm(slice_cols(w, h * dh, dh), iters, tol));
        per_head[projection_name(p)].push_back(e.per_head.back());
      }
      full[projection_name(p)].push_back(e.full);
      report.entries.push_back(std::move(e));
    }
  }
  for (const auto& [k, v] : per_head) report.per_head_summary[k] = summarize(v);
  for (const auto& [k, v] : full) report.full_summary[k] = summarize(v);
  return report;
}

}  // namespace gem
