#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gem/kernels.hpp"
#include "gem/model_io.hpp"
#include "gem/tensor.hpp"
#include "gem/vit.hpp"

namespace gem {

enum class Projection { kQuery, kKey, kValue };

inline const char* projection_name(Projection p) {
  switch (p) {
    case Projection::kQuery: return "q";
    case Projection::kKey: return "k";
    case Projection::kValue: return "v";
  }
  return "?";
}

/// Ablation surface of the grounding pathway. Defaults are the standard evaluation setup.
struct GemConfig {
  std::size_t depth = 4;       // number of trailing layers with a GEM block
  std::size_t iterations = 1;  // K
  std::vector<Projection> projections = {Projection::kQuery, Projection::kKey, Projection::kValue};
  std::optional<double> fixed_temperature;  // unset: adaptive
  bool include_mlp = false;
  bool ssa_over_cls = true;
  bool normalize = true;  // test hook; L2 normalization of projected tokens

  void validate(std::size_t layers) const {
    if (depth < 1 || depth > layers) {
      throw ParameterError("gem: depth " + std::to_string(depth) + " outside [1, " +
                           std::to_string(layers) + "]");
    }
    if (projections.empty()) throw ParameterError("gem: projection set is empty");
    if (fixed_temperature && !(*fixed_temperature > 0.0)) {
      throw ParameterError("gem: fixed temperature must be positive");
    }
  }
};

/// Iterated, per-head normalized projection p^k with its softmax temperature.
struct SSAState {
  Tensor p;  // heads × tokens × d_head
  double tau = 1.0;

  std::size_t heads() const { return p.extent(0); }
  std::size_t tokens() const { return p.extent(1); }
  std::size_t head_dim() const { return p.extent(2); }
};

struct GemOutput {
  Tensor patch_tokens_joint;  // n × joint_dim
  Tensor cls_joint;           // joint_dim
  Tensor raw_pathway_tokens;  // (1 + n) × d
  std::vector<Tensor> pathway_states;  // pathway state after each GEM layer
  Grid grid;
};

/// sqrt(d_head) divided by the mean L2 norm of the rows of `x`.
inline double adaptive_temperature(const Tensor& x, std::size_t d_head) {
  require_rank(x, 2, "adaptive_temperature");
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (float v : x.row(i)) ss += static_cast<double>(v) * v;
    total += std::sqrt(ss);
  }
  const double mean = total / static_cast<double>(x.rows());
  if (!(mean > 0.0) || !std::isfinite(mean)) {
    throw ParameterError("adaptive_temperature: tokens have zero mean norm");
  }
  return std::sqrt(static_cast<double>(d_head)) / mean;
}

/// tokens×(heads·dh) → heads×tokens×dh.
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 2, "split_heads");
  if (x.cols() % heads != 0) throw DimensionError("split_heads: width not divisible by heads");
  const std::size_t n = x.rows(), dh = x.cols() / heads;
  Tensor out({heads, n, dh});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) out(h, i, j) = x(i, h * dh + j);
  return out;
}

inline Tensor head(const Tensor& stacked, std::size_t h) {
  const std::size_t n = stacked.extent(1), dh = stacked.extent(2);
  const auto begin = stacked.storage().begin() + static_cast<std::ptrdiff_t>(h * n * dh);
  return Tensor({n, dh}, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(n * dh)));
}

inline void set_head(Tensor& stacked, std::size_t h, const Tensor& m) {
  std::copy(m.storage().begin(), m.storage().end(),
            stacked.storage().begin() + static_cast<std::ptrdiff_t>(h * m.size()));
}

/// Self-self attention matrix softmax(p·pᵀ / tau) for one head.
inline Tensor self_self_attention_matrix(const Tensor& p_head, double tau) {
  return row_softmax(matmul_transposed(p_head, p_head), tau);
}

/// One step of the recurrence: p' = softmax(p·pᵀ, tau)·p, then row renormalization.
inline SSAState self_self_attention_once(const SSAState& s, bool normalize = true) {
  SSAState next{Tensor(s.p.shape()), s.tau};
  for (std::size_t h = 0; h < s.heads(); ++h) {
    const Tensor p = head(s.p, h);
    Tensor mixed = matmul(self_self_attention_matrix(p, s.tau), p);
    set_head(next.p, h, normalize ? l2_normalize_rows(mixed) : mixed);
  }
  return next;
}

inline const Tensor& projection_weight(const LayerWeights& w, Projection p) {
  switch (p) {
    case Projection::kQuery: return w.wq;
    case Projection::kKey: return w.wk;
    case Projection::kValue: break;
  }
  return w.wv;
}

inline const Tensor& projection_bias(const LayerWeights& w, Projection p) {
  switch (p) {
    case Projection::kQuery: return w.bq;
    case Projection::kKey: return w.bk;
    case Projection::kValue: break;
  }
  return w.bv;
}

/// Initial state p⁰ for one projection: per-head L2-normalized LN1(x)·W + b.
inline SSAState initial_state(const Tensor& x_ln, const LayerWeights& w, Projection proj,
                              std::size_t heads, double tau, bool normalize = true) {
  Tensor stacked = split_heads(linear(x_ln, projection_weight(w, proj), projection_bias(w, proj)), heads);
  if (normalize) {
    for (std::size_t h = 0; h < heads; ++h) set_head(stacked, h, l2_normalize_rows(head(stacked, h)));
  }
  return {std::move(stacked), tau};
}

namespace detail {

inline Tensor drop_first_row(const Tensor& x) {
  const std::size_t d = x.cols();
  return Tensor({x.rows() - 1, d},
                std::vector<float>(x.storage().begin() + static_cast<std::ptrdiff_t>(d), x.storage().end()));
}

}  // namespace detail

/// Temperature used by a GEM block whose original-path input is `x_l`.
inline double block_temperature(const Tensor& x_l, std::size_t d_head, const GemConfig& cfg) {
  if (cfg.fixed_temperature) return *cfg.fixed_temperature;
  return adaptive_temperature(cfg.ssa_over_cls ? x_l : detail::drop_first_row(x_l), d_head);
}

/// Per-projection block outputs O_proj·Wo + bo, one entry per configured projection. Rows
/// cover the tokens taking part in self-self attention.
inline std::vector<Tensor> gem_block_terms(const Tensor& x_l, const LayerWeights& w, std::size_t heads,
                                           const GemConfig& cfg) {
  require_rank(x_l, 2, "gem_block");
  if (!cfg.ssa_over_cls && x_l.rows() < 2) {
    throw DimensionError("gem_block: no patch tokens to attend over");
  }
  const std::size_t d = x_l.cols(), dh = d / heads;
  const Tensor x_ln_all = layer_norm(x_l, w.ln1_gamma, w.ln1_beta);
  const Tensor x_ln = cfg.ssa_over_cls ? x_ln_all : detail::drop_first_row(x_ln_all);
  const double tau = block_temperature(x_l, dh, cfg);
  const Tensor values = split_heads(linear(x_ln, w.wv, w.bv), heads);

  std::vector<Tensor> terms;
  terms.reserve(cfg.projections.size());
  for (Projection proj : cfg.projections) {
    SSAState state = initial_state(x_ln, w, proj, heads, tau, cfg.normalize);
    for (std::size_t k = 0; k < cfg.iterations; ++k) state = self_self_attention_once(state, cfg.normalize);
    Tensor concat({x_ln.rows(), d});
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor assignment = self_self_attention_matrix(head(state.p, h), tau);
      assign_cols(concat, h * dh, matmul(assignment, head(values, h)));
    }
    terms.push_back(linear(concat, w.wo, w.bo));
  }
  return terms;
}

/// Ensemble mean of the per-projection outputs (float64 sum), then the optional MLP
/// residual. With ssa_over_cls off, the CLS row of the result is zero.
inline Tensor gem_block(const Tensor& x_l, const LayerWeights& w, const ViTConfig& c,
                        const GemConfig& cfg) {
  const std::vector<Tensor> terms = gem_block_terms(x_l, w, c.heads, cfg);
  Tensor mean(terms.front().shape());
  const double count = static_cast<double>(terms.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    double acc = 0.0;
    for (const auto& t : terms) acc += t[i];
    mean[i] = static_cast<float>(acc / count);
  }
  Tensor out = mean;
  if (!cfg.ssa_over_cls) {
    out = Tensor(x_l.shape());
    std::copy(mean.storage().begin(), mean.storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(x_l.cols()));
  }
  if (cfg.include_mlp) add_inplace(out, mlp(layer_norm(out, w.ln2_gamma, w.ln2_beta), w, c.activation));
  return out;
}

/// Alternative pathway over the last `depth` layers: s starts at the original path's input
/// to the first GEM layer and accumulates s += block(x_l, l), with every x_l taken from the
/// original trace. `block(x_l, layer_index)` is injectable for tests.
template <class BlockFn>
GemOutput gem_forward_with(const LayerTrace& trace, const WeightBundle& b, const GemConfig& cfg,
                           BlockFn&& block) {
  const std::size_t layers = b.layers.size();
  cfg.validate(layers);
  if (trace.tokens.size() != layers + 1) {
    throw DimensionError("gem_forward: trace has " + std::to_string(trace.tokens.size()) +
                         " entries for a " + std::to_string(layers) + "-layer model");
  }
  const std::size_t start = layers - cfg.depth;
  GemOutput out;
  out.grid = trace.grid;
  Tensor s = trace.input_of(start);
  for (std::size_t l = start; l < layers; ++l) {
    add_inplace(s, block(trace.input_of(l), l));
    out.pathway_states.push_back(s);
  }
  const Tensor joint = project_to_joint(s, b);
  const std::size_t jd = joint.cols();
  out.cls_joint = Tensor({jd}, std::vector<float>(joint.row(0).begin(), joint.row(0).end()));
  out.patch_tokens_joint = detail::drop_first_row(joint);
  out.raw_pathway_tokens = std::move(s);
  return out;
}

inline GemOutput gem_forward(const LayerTrace& trace, const WeightBundle& b, const GemConfig& cfg) {
  return gem_forward_with(trace, b, cfg, [&](const Tensor& x_l, std::size_t l) {
    return gem_block(x_l, b.layers[l], b.config, cfg);
  });
}

}  // namespace gem
