#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gem/gem.hpp"
#include "gem/kernels.hpp"
#include "gem/model_io.hpp"

namespace gem {

inline constexpr double kVocBackgroundThreshold = 0.85;
inline constexpr double kPointThreshold = 0.5;

struct Heatmap {
  Tensor values;  // grid_rows × grid_cols cosine similarities
  std::string class_name;
};

struct SegmentationPrediction {
  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> label_map;  // class index per pixel, -1 = background
  std::vector<std::string> class_names;

  std::int32_t at(std::size_t y, std::size_t x) const { return label_map[y * width + x]; }
};

struct PointPrediction {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> mask;
  double min = 0.0, max = 0.0;
  bool degenerate = false;  // constant map, mask forced to zeros

  std::uint8_t at(std::size_t y, std::size_t x) const { return mask[y * width + x]; }
};

/// Cosine similarity of every patch token with every class embedding, as rows×cols×C.
inline Tensor class_similarity_maps(const Tensor& patch_tokens, const Tensor& text, Grid grid) {
  require_rank(patch_tokens, 2, "similarity patch tokens");
  require_rank(text, 2, "similarity text embeddings");
  if (patch_tokens.cols() != text.cols()) {
    throw DimensionError("similarity: patch tokens " + shape_string(patch_tokens.shape()) +
                         " and text embeddings " + shape_string(text.shape()) +
                         " live in different joint dimensions");
  }
  if (patch_tokens.rows() != grid.tokens()) {
    throw DimensionError("similarity: " + std::to_string(patch_tokens.rows()) + " tokens for a " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  const Tensor pn = l2_normalize_rows(patch_tokens);
  const Tensor tn = l2_normalize_rows(text);
  Tensor cos = matmul_transposed(pn, tn);
  for (auto& v : cos.storage()) v = std::clamp(v, -1.0f, 1.0f);
  return cos.reshaped({grid.rows, grid.cols, text.rows()});
}

inline Heatmap similarity_map(const GemOutput& gem, const TextEmbeddingSet& text, std::size_t class_index) {
  if (class_index >= text.class_names.size()) {
    throw ParameterError("similarity_map: class index " + std::to_string(class_index) + " out of range");
  }
  const Tensor t({1, text.embeddings.cols()},
                 std::vector<float>(text.embeddings.row(class_index).begin(),
                                    text.embeddings.row(class_index).end()));
  const Tensor maps = class_similarity_maps(gem.patch_tokens_joint, t, gem.grid);
  return {maps.reshaped({gem.grid.rows, gem.grid.cols}), text.class_names[class_index]};
}

/// Upsample per-class maps, argmax per pixel (lowest index wins ties) and, when a threshold
/// is given, mark pixels whose top class probability under softmax(logit_scale · cos) falls
/// below it as background.
inline SegmentationPrediction segment_from_maps(const Tensor& class_maps, double logit_scale,
                                                std::optional<double> background_threshold,
                                                std::size_t out_h, std::size_t out_w) {
  require_rank(class_maps, 3, "segment_from_maps");
  const std::size_t num_classes = class_maps.extent(2);
  const Tensor up = bilinear_resize(class_maps, out_h, out_w);
  SegmentationPrediction pred{out_h, out_w, std::vector<std::int32_t>(out_h * out_w, 0), {}};
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < num_classes; ++c)
        if (up(y, x, c) > up(y, x, best)) best = c;
      std::int32_t label = static_cast<std::int32_t>(best);
      if (background_threshold) {
        const double top = up(y, x, best);
        double denom = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c) denom += std::exp(logit_scale * (up(y, x, c) - top));
        if (1.0 / denom < *background_threshold) label = -1;
      }
      pred.label_map[y * out_w + x] = label;
    }
  }
  return pred;
}

inline SegmentationPrediction segment_multiclass(const GemOutput& gem, const TextEmbeddingSet& text,
                                                 const PreprocessSpec& spec,
                                                 std::optional<double> background_threshold,
                                                 std::size_t out_h, std::size_t out_w) {
  if (text.class_names.empty()) throw ParameterError("segment_multiclass: empty class set");
  auto pred = segment_from_maps(class_similarity_maps(gem.patch_tokens_joint, text.embeddings, gem.grid),
                                spec.logit_scale, background_threshold, out_h, out_w);
  pred.class_names = text.class_names;
  return pred;
}

/// Min-max normalize an upsampled map over the image and threshold at 0.5.
inline PointPrediction point_predict_from_map(const Tensor& grid_map, std::size_t out_h, std::size_t out_w) {
  require_rank(grid_map, 2, "point_predict");
  const Tensor up = bilinear_resize(grid_map.reshaped({grid_map.rows(), grid_map.cols(), 1}), out_h, out_w);
  PointPrediction pred{out_h, out_w, std::vector<std::uint8_t>(out_h * out_w, 0), 0.0, 0.0, false};
  const auto [lo, hi] = std::minmax_element(up.storage().begin(), up.storage().end());
  pred.min = *lo;
  pred.max = *hi;
  if (!(pred.max > pred.min)) {
    pred.degenerate = true;
    return pred;
  }
  const double range = pred.max - pred.min;
  for (std::size_t i = 0; i < up.size(); ++i) {
    pred.mask[i] = (static_cast<double>(up[i]) - pred.min) / range >= kPointThreshold ? 1 : 0;
  }
  return pred;
}

inline PointPrediction point_predict(const GemOutput& gem, const TextEmbeddingSet& text,
                                     std::size_t class_index, std::size_t out_h, std::size_t out_w) {
  return point_predict_from_map(similarity_map(gem, text, class_index).values, out_h, out_w);
}

}  // namespace gem
