#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "gem/kernels.hpp"
#include "gem/model_io.hpp"
#include "gem/tensor.hpp"

namespace gem {

/// Patch-token layout of an image: rows × cols patches.
struct Grid {
  std::size_t rows = 0, cols = 0;

  std::size_t tokens() const { return rows * cols; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

struct StemOutput {
  Tensor tokens;  // (1 + n)×d, CLS first
  Grid grid;
};

/// Token matrices entering every layer (CLS first), plus the final layer's output.
struct LayerTrace {
  std::vector<Tensor> tokens;  // layers + 1 entries
  Tensor cls_joint;            // joint_dim
  Grid grid;

  const Tensor& input_of(std::size_t layer) const { return tokens.at(layer); }
  const Tensor& output() const { return tokens.back(); }
};

/// Positional embedding for a rows×cols grid; the trained square grid is resampled
/// bicubically when the image grid differs.
inline Tensor positional_embedding(const WeightBundle& b, Grid grid) {
  const std::size_t g = b.config.trained_grid, d = b.config.d;
  if (grid.rows == g && grid.cols == g) return b.pos_embed;
  Tensor patch_pos({g, g, d});
  std::copy(b.pos_embed.storage().begin() + static_cast<std::ptrdiff_t>(d), b.pos_embed.storage().end(),
            patch_pos.storage().begin());
  const Tensor resized = bicubic_resize(patch_pos, grid.rows, grid.cols);
  Tensor out({1 + grid.tokens(), d});
  std::copy(b.pos_embed.storage().begin(), b.pos_embed.storage().begin() + static_cast<std::ptrdiff_t>(d),
            out.storage().begin());
  std::copy(resized.storage().begin(), resized.storage().end(),
            out.storage().begin() + static_cast<std::ptrdiff_t>(d));
  return out;
}

/// Non-overlapping patch projection of an H×W×3 image; H and W are truncated to
/// multiples of the patch size.
inline StemOutput patch_embed(const Tensor& image, const WeightBundle& b) {
  require_rank(image, 3, "patch_embed");
  const std::size_t p = b.config.patch_size, d = b.config.d;
  if (image.extent(2) != 3) throw DimensionError("patch_embed: expected 3 channels");
  if (image.extent(0) < p || image.extent(1) < p) {
    throw ParameterError("patch_embed: image " + shape_string(image.shape()) +
                         " is smaller than one " + std::to_string(p) + "-pixel patch");
  }
  const Grid grid{image.extent(0) / p, image.extent(1) / p};
  Tensor patches({grid.tokens(), p * p * 3});
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      float* dst = &patches.storage()[(r * grid.cols + c) * p * p * 3];
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = image(r * p + py, c * p + px, ch);
    }
  }
  const Tensor embedded = linear(patches, b.patch_weight, b.patch_bias);

  Tensor tokens({1 + grid.tokens(), d});
  for (std::size_t j = 0; j < d; ++j) tokens(0, j) = b.class_token[j];
  std::copy(embedded.storage().begin(), embedded.storage().end(),
            tokens.storage().begin() + static_cast<std::ptrdiff_t>(d));
  add_inplace(tokens, positional_embedding(b, grid));
  if (b.ln_pre) tokens = layer_norm(tokens, b.ln_pre->first, b.ln_pre->second);
  return {std::move(tokens), grid};
}

inline float activate(float x, Activation act) {
  if (act == Activation::kQuickGelu) {
    return static_cast<float>(x / (1.0 + std::exp(-1.702 * static_cast<double>(x))));
  }
  return static_cast<float>(0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)));
}

/// Multi-head scaled dot-product attention on already-normalized tokens. When `probs` is
/// given it receives one attention matrix per head.
inline Tensor multi_head_attention(const Tensor& x_ln, const LayerWeights& w, std::size_t heads,
                                   std::vector<Tensor>* probs = nullptr) {
  const std::size_t d = x_ln.cols(), dh = d / heads;
  const Tensor q = linear(x_ln, w.wq, w.bq);
  const Tensor k = linear(x_ln, w.wk, w.bk);
  const Tensor v = linear(x_ln, w.wv, w.bv);
  Tensor concat({x_ln.rows(), d});
  const double temperature = std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    Tensor attn = row_softmax(matmul_transposed(qh, kh), temperature);
    assign_cols(concat, h * dh, matmul(attn, vh));
    if (probs) probs->push_back(std::move(attn));
  }
  return linear(concat, w.wo, w.bo);
}

inline Tensor mlp(const Tensor& x_ln, const LayerWeights& w, Activation act) {
  Tensor hidden = linear(x_ln, w.fc1, w.fc1_bias);
  for (auto& v : hidden.storage()) v = activate(v, act);
  return linear(hidden, w.fc2, w.fc2_bias);
}

/// Pre-norm residual block: x + Attn(LN1 x), then + MLP(LN2 ·).
inline Tensor transformer_block(const Tensor& x, const LayerWeights& w, const ViTConfig& c,
                                std::vector<Tensor>* probs = nullptr) {
  Tensor y = x;
  add_inplace(y, multi_head_attention(layer_norm(x, w.ln1_gamma, w.ln1_beta), w, c.heads, probs));
  add_inplace(y, mlp(layer_norm(y, w.ln2_gamma, w.ln2_beta), w, c.activation));
  return y;
}

/// Final layer norm followed by the visual projection, applied to every row.
inline Tensor project_to_joint(const Tensor& tokens, const WeightBundle& b) {
  return matmul(layer_norm(tokens, b.ln_post_gamma, b.ln_post_beta), b.proj);
}

inline LayerTrace forward_with_trace(const Tensor& tokens, const WeightBundle& b, Grid grid) {
  require_rank(tokens, 2, "forward_with_trace");
  if (tokens.cols() != b.config.d) {
    throw DimensionError("forward_with_trace: token width " + std::to_string(tokens.cols()) +
                         " differs from model width " + std::to_string(b.config.d));
  }
  LayerTrace trace;
  trace.grid = grid;
  trace.tokens.reserve(b.layers.size() + 1);
  trace.tokens.push_back(tokens);
  for (const auto& layer : b.layers) {
    trace.tokens.push_back(transformer_block(trace.tokens.back(), layer, b.config));
  }
  const auto cls = trace.output().row(0);
  const Tensor cls_row({1, b.config.d}, std::vector<float>(cls.begin(), cls.end()));
  trace.cls_joint = project_to_joint(cls_row, b).reshaped({b.config.joint_dim});
  return trace;
}

inline LayerTrace forward_with_trace(const StemOutput& stem, const WeightBundle& b) {
  return forward_with_trace(stem.tokens, b, stem.grid);
}

}  // namespace gem
