#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gem/kernels.hpp"
#include "gem/tensor.hpp"

namespace gem {

namespace fs = std::filesystem;

/// Anything wrong with a weight bundle or embedding file on disk.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

enum class Activation { kGelu, kQuickGelu };

inline const char* activation_name(Activation a) {
  return a == Activation::kGelu ? "gelu" : "quick_gelu";
}

struct ViTConfig {
  std::size_t layers = 0;
  std::size_t d = 0;
  std::size_t heads = 1;
  std::size_t patch_size = 16;
  std::size_t trained_grid = 14;  // tokens per side at training resolution
  std::size_t mlp_dim = 0;        // 0 means 4·d
  std::size_t joint_dim = 0;
  Activation activation = Activation::kGelu;

  std::size_t d_head() const { return d / heads; }
  std::size_t hidden() const { return mlp_dim == 0 ? 4 * d : mlp_dim; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw LoadError("vit config: d=" + std::to_string(d) + " is not divisible by heads=" +
                      std::to_string(heads));
    }
    if (patch_size == 0 || trained_grid == 0 || joint_dim == 0) {
      throw LoadError("vit config: patch_size, trained_grid and joint_dim must be positive");
    }
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct PreprocessSpec {
  std::size_t shorter_side = 448;
  std::array<float, 3> channel_mean{0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> channel_std{0.26862954f, 0.26130258f, 0.27577711f};
  float logit_scale = 100.0f;

  void validate(std::size_t patch_size) const {
    for (float s : channel_std)
      if (!(s > 0.0f)) throw LoadError("preprocess: channel_std entries must be > 0");
    if (shorter_side < patch_size) throw LoadError("preprocess: shorter_side smaller than patch_size");
    if (!(logit_scale > 0.0f)) throw LoadError("preprocess: logit_scale must be > 0");
  }

  friend bool operator==(const PreprocessSpec&, const PreprocessSpec&) = default;
};

struct TensorEntry {
  std::uint64_t offset_bytes = 0;
  Shape shape;
};

struct Manifest {
  std::string model_name;
  ViTConfig vit;
  PreprocessSpec preprocess;
  std::map<std::string, TensorEntry> tensors;
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1, fc1_bias, fc2, fc2_bias;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Immutable once loaded; safe to share across threads.
struct WeightBundle {
  ViTConfig config;
  PreprocessSpec preprocess;
  Tensor patch_weight;  // (p·p·3)×d, input flattened as (row, col, channel)
  Tensor patch_bias;    // d
  Tensor class_token;   // d
  Tensor pos_embed;     // (1 + g·g)×d
  std::optional<std::pair<Tensor, Tensor>> ln_pre;
  std::vector<LayerWeights> layers;
  Tensor ln_post_gamma, ln_post_beta;
  Tensor proj;  // d×joint_dim

  friend bool operator==(const WeightBundle&, const WeightBundle&) = default;
};

/// Name → expected shape, in canonical blob order. Optional tensors are flagged.
struct TensorSpec {
  std::string name;
  Shape shape;
  bool optional = false;
};

inline std::vector<TensorSpec> bundle_tensor_specs(const ViTConfig& c) {
  const std::size_t d = c.d, p = c.patch_size, g = c.trained_grid, h = c.hidden();
  std::vector<TensorSpec> specs = {
      {"patch_embed.weight", {p * p * 3, d}},
      {"patch_embed.bias", {d}, true},
      {"class_token", {d}},
      {"pos_embed", {1 + g * g, d}},
      {"ln_pre.gamma", {d}, true},
      {"ln_pre.beta", {d}, true},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    for (auto [name, shape] : std::vector<std::pair<std::string, Shape>>{
             {"ln1.gamma", {d}},     {"ln1.beta", {d}},         {"Wq", {d, d}},
             {"Wq.bias", {d}},       {"Wk", {d, d}},            {"Wk.bias", {d}},
             {"Wv", {d, d}},         {"Wv.bias", {d}},          {"Wo", {d, d}},
             {"Wo.bias", {d}},       {"ln2.gamma", {d}},        {"ln2.beta", {d}},
             {"mlp_fc1", {d, h}},    {"mlp_fc1.bias", {h}},     {"mlp_fc2", {h, d}},
             {"mlp_fc2.bias", {d}}}) {
      specs.push_back({pre + name, shape});
    }
  }
  specs.push_back({"ln_post.gamma", {d}});
  specs.push_back({"ln_post.beta", {d}});
  specs.push_back({"proj", {d, c.joint_dim}});
  return specs;
}

namespace detail {

inline void read_floats_le(const char* src, float* dst, std::size_t count) {
  std::memcpy(dst, src, count * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &dst[i], 4);
      u = __builtin_bswap32(u);
      std::memcpy(&dst[i], &u, 4);
    }
  }
}

inline void write_floats_le(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline nlohmann::json parse_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline std::map<std::string, TensorEntry> parse_tensor_table(const nlohmann::json& j) {
  std::map<std::string, TensorEntry> table;
  if (!j.is_object()) throw LoadError("manifest: \"tensors\" must be an object");
  for (const auto& [name, entry] : j.items()) {
    TensorEntry e;
    e.offset_bytes = entry.at("offset_bytes").get<std::uint64_t>();
    e.shape = entry.at("shape").get<Shape>();
    table.emplace(name, std::move(e));
  }
  return table;
}

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

/// Checks every entry lies inside the blob and that no two entries overlap. Returns warnings
/// for trailing bytes not covered by any tensor.
inline std::vector<std::string> check_layout(const std::map<std::string, TensorEntry>& table,
                                             std::uint64_t blob_size) {
  std::vector<std::pair<std::uint64_t, std::pair<std::uint64_t, std::string>>> spans;
  for (const auto& [name, e] : table) {
    for (auto x : e.shape)
      if (x == 0) throw LoadError("tensor " + name + " has a zero extent");
    const std::uint64_t bytes = numel(e.shape) * sizeof(float);
    if (e.offset_bytes + bytes > blob_size) {
      throw LoadError("truncated blob: tensor " + name + " needs bytes [" +
                      std::to_string(e.offset_bytes) + ", " + std::to_string(e.offset_bytes + bytes) +
                      ") but weights.bin has " + std::to_string(blob_size));
    }
    spans.push_back({e.offset_bytes, {e.offset_bytes + bytes, name}});
  }
  std::sort(spans.begin(), spans.end());
  std::uint64_t end = 0;
  std::string prev;
  for (const auto& [begin, rest] : spans) {
    if (begin < end) throw LoadError("tensors " + prev + " and " + rest.second + " overlap in weights.bin");
    end = rest.first;
    prev = rest.second;
  }
  std::vector<std::string> warnings;
  if (end < blob_size) {
    warnings.push_back(std::to_string(blob_size - end) + " trailing bytes in weights.bin");
  }
  return warnings;
}

inline Tensor extract(const std::string& blob, const std::map<std::string, TensorEntry>& table,
                      const std::string& name, const Shape& expected) {
  const auto it = table.find(name);
  if (it == table.end()) throw LoadError("missing tensor " + name);
  if (it->second.shape != expected) {
    throw LoadError("shape mismatch for tensor " + name + ": manifest " +
                    shape_string(it->second.shape) + ", expected " + shape_string(expected));
  }
  Tensor t(expected);
  read_floats_le(blob.data() + it->second.offset_bytes, t.storage().data(), t.size());
  return t;
}

}  // namespace detail

inline ViTConfig parse_vit_config(const nlohmann::json& j) {
  ViTConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.trained_grid = j.at("trained_grid").get<std::size_t>();
  c.mlp_dim = j.value("mlp_dim", std::size_t{0});
  c.joint_dim = j.at("joint_dim").get<std::size_t>();
  const std::string act = j.value("activation", std::string("gelu"));
  if (act == "gelu") c.activation = Activation::kGelu;
  else if (act == "quick_gelu") c.activation = Activation::kQuickGelu;
  else throw LoadError("vit config: unknown activation \"" + act + "\"");
  c.validate();
  return c;
}

inline nlohmann::json vit_config_json(const ViTConfig& c) {
  return {{"layers", c.layers},         {"d", c.d},
          {"heads", c.heads},           {"patch_size", c.patch_size},
          {"trained_grid", c.trained_grid}, {"mlp_dim", c.hidden()},
          {"joint_dim", c.joint_dim},   {"activation", activation_name(c.activation)}};
}

inline PreprocessSpec parse_preprocess(const nlohmann::json& j) {
  PreprocessSpec p;
  p.shorter_side = j.value("shorter_side", p.shorter_side);
  if (j.contains("channel_mean")) p.channel_mean = j.at("channel_mean").get<std::array<float, 3>>();
  if (j.contains("channel_std")) p.channel_std = j.at("channel_std").get<std::array<float, 3>>();
  p.logit_scale = j.value("logit_scale", p.logit_scale);
  return p;
}

inline nlohmann::json preprocess_json(const PreprocessSpec& p) {
  return {{"shorter_side", p.shorter_side},
          {"channel_mean", p.channel_mean},
          {"channel_std", p.channel_std},
          {"logit_scale", p.logit_scale}};
}

struct LoadedBundle {
  Manifest manifest;
  WeightBundle bundle;
  std::vector<std::string> warnings;
};

inline LoadedBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  const fs::path blob_path = dir / "weights.bin";
  if (!fs::exists(manifest_path)) throw LoadError("missing " + manifest_path.string());
  if (!fs::exists(blob_path)) throw LoadError("missing " + blob_path.string());

  const auto j = detail::parse_json_file(manifest_path);
  LoadedBundle out;
  Manifest& m = out.manifest;
  try {
    const int version = j.value("format_version", kFormatVersion);
    if (version != kFormatVersion) {
      throw LoadError("unsupported bundle format_version " + std::to_string(version));
    }
    m.model_name = j.value("model_name", std::string());
    m.vit = parse_vit_config(j.at("vit"));
    m.preprocess = parse_preprocess(j.value("preprocess", nlohmann::json::object()));
    m.tensors = detail::parse_tensor_table(j.at("tensors"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  m.preprocess.validate(m.vit.patch_size);

  const std::string blob = detail::read_file(blob_path);
  out.warnings = detail::check_layout(m.tensors, blob.size());

  const auto specs = bundle_tensor_specs(m.vit);
  std::set<std::string> known;
  for (const auto& s : specs) known.insert(s.name);
  for (const auto& [name, e] : m.tensors)
    if (!known.count(name)) out.warnings.push_back("unused tensor " + name);

  const auto get = [&](const std::string& name, const Shape& shape) {
    return detail::extract(blob, m.tensors, name, shape);
  };
  const auto has = [&](const std::string& name) { return m.tensors.count(name) > 0; };

  const ViTConfig& c = m.vit;
  WeightBundle& b = out.bundle;
  b.config = c;
  b.preprocess = m.preprocess;
  const std::size_t d = c.d, p = c.patch_size, g = c.trained_grid, h = c.hidden();
  b.patch_weight = get("patch_embed.weight", {p * p * 3, d});
  b.patch_bias = has("patch_embed.bias") ? get("patch_embed.bias", {d}) : Tensor({d});
  b.class_token = get("class_token", {d});
  b.pos_embed = get("pos_embed", {1 + g * g, d});
  if (has("ln_pre.gamma") || has("ln_pre.beta")) {
    b.ln_pre = std::make_pair(get("ln_pre.gamma", {d}), get("ln_pre.beta", {d}));
  }
  b.layers.reserve(c.layers);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.ln1_gamma = get(pre + "ln1.gamma", {d});
    w.ln1_beta = get(pre + "ln1.beta", {d});
    w.wq = get(pre + "Wq", {d, d});
    w.bq = get(pre + "Wq.bias", {d});
    w.wk = get(pre + "Wk", {d, d});
    w.bk = get(pre + "Wk.bias", {d});
    w.wv = get(pre + "Wv", {d, d});
    w.bv = get(pre + "Wv.bias", {d});
    w.wo = get(pre + "Wo", {d, d});
    w.bo = get(pre + "Wo.bias", {d});
    w.ln2_gamma = get(pre + "ln2.gamma", {d});
    w.ln2_beta = get(pre + "ln2.beta", {d});
    w.fc1 = get(pre + "mlp_fc1", {d, h});
    w.fc1_bias = get(pre + "mlp_fc1.bias", {h});
    w.fc2 = get(pre + "mlp_fc2", {h, d});
    w.fc2_bias = get(pre + "mlp_fc2.bias", {d});
    b.layers.push_back(std::move(w));
  }
  b.ln_post_gamma = get("ln_post.gamma", {d});
  b.ln_post_beta = get("ln_post.beta", {d});
  b.proj = get("proj", {d, c.joint_dim});
  return out;
}

/// Loads and validates; returns the warnings (empty for a clean bundle).
inline std::vector<std::string> validate_bundle(const fs::path& dir) {
  return load_bundle(dir).warnings;
}

/// Named tensors of a bundle in canonical blob order.
inline std::vector<std::pair<std::string, const Tensor*>> bundle_tensors(const WeightBundle& b) {
  std::vector<std::pair<std::string, const Tensor*>> out = {
      {"patch_embed.weight", &b.patch_weight},
      {"patch_embed.bias", &b.patch_bias},
      {"class_token", &b.class_token},
      {"pos_embed", &b.pos_embed},
  };
  if (b.ln_pre) {
    out.emplace_back("ln_pre.gamma", &b.ln_pre->first);
    out.emplace_back("ln_pre.beta", &b.ln_pre->second);
  }
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const LayerWeights& w = b.layers[l];
    for (auto [name, t] : std::vector<std::pair<const char*, const Tensor*>>{
             {"ln1.gamma", &w.ln1_gamma}, {"ln1.beta", &w.ln1_beta},   {"Wq", &w.wq},
             {"Wq.bias", &w.bq},          {"Wk", &w.wk},               {"Wk.bias", &w.bk},
             {"Wv", &w.wv},               {"Wv.bias", &w.bv},          {"Wo", &w.wo},
             {"Wo.bias", &w.bo},          {"ln2.gamma", &w.ln2_gamma}, {"ln2.beta", &w.ln2_beta},
             {"mlp_fc1", &w.fc1},         {"mlp_fc1.bias", &w.fc1_bias}, {"mlp_fc2", &w.fc2},
             {"mlp_fc2.bias", &w.fc2_bias}}) {
      out.emplace_back(pre + name, t);
    }
  }
  out.emplace_back("ln_post.gamma", &b.ln_post_gamma);
  out.emplace_back("ln_post.beta", &b.ln_post_beta);
  out.emplace_back("proj", &b.proj);
  return out;
}

inline void write_bundle(const fs::path& dir, const WeightBundle& b,
                         const std::string& model_name = "synthetic") {
  fs::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  std::ofstream blob(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw LoadError("cannot write " + (dir / "weights.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : bundle_tensors(b)) {
    tensors[name] = {{"offset_bytes", offset}, {"shape", t->shape()}};
    detail::write_floats_le(blob, t->data());
    offset += t->size() * sizeof(float);
  }
  const nlohmann::json manifest = {{"format_version", kFormatVersion},
                                   {"model_name", model_name},
                                   {"vit", vit_config_json(b.config)},
                                   {"preprocess", preprocess_json(b.preprocess)},
                                   {"tensors", tensors}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Precomputed text embeddings

struct TextEmbeddingSet {
  std::vector<std::string> class_names;
  Tensor embeddings;  // num_classes × joint_dim, unit rows
  std::string prompt_template = "a photo of a {}";
  std::vector<std::string> renormalized;  // classes whose stored norm deviated by > 1e-4

  std::optional<std::size_t> index_of(const std::string& name) const {
    const auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - class_names.begin());
  }
};

/// Reads `<dir>/manifest.json` + `<dir>/weights.bin` holding one `text/<class>` vector per
/// class. Rows whose norm deviates from 1 by more than 1e-4 are renormalized and recorded.
inline TextEmbeddingSet load_text_embeddings(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  const auto j = detail::parse_json_file(manifest_path);
  TextEmbeddingSet set;
  std::map<std::string, TensorEntry> table;
  try {
    set.class_names = j.at("classes").get<std::vector<std::string>>();
    set.prompt_template = j.value("prompt_template", set.prompt_template);
    table = detail::parse_tensor_table(j.at("tensors"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed text manifest " + manifest_path.string() + ": " + e.what());
  }
  if (set.class_names.empty()) throw LoadError("text embeddings: empty class list");
  std::set<std::string> seen;
  for (const auto& c : set.class_names)
    if (!seen.insert(c).second) throw LoadError("duplicate class name \"" + c + "\" in text embeddings");

  const std::string blob = detail::read_file(dir / "weights.bin");
  detail::check_layout(table, blob.size());
  const auto first = table.find("text/" + set.class_names.front());
  if (first == table.end()) throw LoadError("missing tensor text/" + set.class_names.front());
  const std::size_t dim = detail::numel(first->second.shape);

  set.embeddings = Tensor({set.class_names.size(), dim});
  for (std::size_t c = 0; c < set.class_names.size(); ++c) {
    const std::string name = "text/" + set.class_names[c];
    const auto it = table.find(name);
    if (it == table.end()) throw LoadError("missing tensor " + name);
    if (detail::numel(it->second.shape) != dim) {
      throw LoadError("shape mismatch for tensor " + name + ": " + shape_string(it->second.shape));
    }
    auto row = set.embeddings.row(c);
    detail::read_floats_le(blob.data() + it->second.offset_bytes, row.data(), dim);
    double ss = 0.0;
    for (float v : row) ss += static_cast<double>(v) * v;
    const double norm = std::sqrt(ss);
    if (std::abs(norm - 1.0) > 1e-4) {
      if (norm == 0.0) throw LoadError("zero text embedding for class " + set.class_names[c]);
      for (auto& v : row) v = static_cast<float>(v / norm);
      set.renormalized.push_back(set.class_names[c]);
    }
  }
  return set;
}

inline void write_text_embeddings(const fs::path& dir, const TextEmbeddingSet& set) {
  require_rank(set.embeddings, 2, "text embeddings");
  if (set.embeddings.rows() != set.class_names.size()) {
    throw DimensionError("text embeddings: row count differs from class count");
  }
  fs::create_directories(dir);
  std::ofstream blob(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (std::size_t c = 0; c < set.class_names.size(); ++c) {
    tensors["text/" + set.class_names[c]] = {{"offset_bytes", offset},
                                             {"shape", {set.embeddings.cols()}}};
    detail::write_floats_le(blob, set.embeddings.row(c));
    offset += set.embeddings.cols() * sizeof(float);
  }
  const nlohmann::json manifest = {{"format_version", kFormatVersion},
                                   {"prompt_template", set.prompt_template},
                                   {"classes", set.class_names},
                                   {"tensors", tensors}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

}  // namespace gem
