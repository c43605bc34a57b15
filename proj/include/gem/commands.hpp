#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gem/clustering.hpp"
#include "gem/gem.hpp"
#include "gem/image_io.hpp"
#include "gem/localization.hpp"
#include "gem/metrics.hpp"
#include "gem/model_io.hpp"
#include "gem/parallel.hpp"
#include "gem/vit.hpp"

namespace gem {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr std::uint16_t kLabelBackground = 0;
inline constexpr std::uint16_t kLabelIgnore = 65535;

/// User-facing failure of a command (bad input, unknown class, empty dataset).
class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run manifest

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
inline std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "missing";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

/// Written next to every command's outputs. The only field that varies between identical
/// runs is wall_time_seconds.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> input_digests;
  double wall_time_seconds = 0.0;

  void add_input(const fs::path& path) { input_digests[path.string()] = file_digest(path); }

  void add_input_dir(const fs::path& dir) {
    add_input(dir / "manifest.json");
    add_input(dir / "weights.bin");
  }

  void write(const fs::path& out_dir) const {
    const nlohmann::json j = {{"command", command},
                              {"tool_version", kToolVersion},
                              {"config", config},
                              {"input_digests", input_digests},
                              {"wall_time_seconds", wall_time_seconds}};
    std::ofstream(out_dir / "run_manifest.json", std::ios::trunc) << j.dump(2) << "\n";
  }
};

inline nlohmann::json gem_config_json(const GemConfig& cfg) {
  std::vector<std::string> projections;
  for (auto p : cfg.projections) projections.emplace_back(projection_name(p));
  nlohmann::json temperature = cfg.fixed_temperature ? nlohmann::json(*cfg.fixed_temperature)
                                                     : nlohmann::json("adaptive");
  return {{"depth", cfg.depth},
          {"iterations", cfg.iterations},
          {"projections", projections},
          {"temperature", temperature},
          {"include_mlp", cfg.include_mlp},
          {"ssa_over_cls", cfg.ssa_over_cls},
          {"normalize", cfg.normalize}};
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Shared pipeline

struct ImageResult {
  LayerTrace trace;
  GemOutput gem;
  std::size_t input_h = 0, input_w = 0;  // after preprocessing
};

inline ImageResult run_pipeline(const ImageRecord& img, const WeightBundle& b, const GemConfig& cfg) {
  const Tensor x = preprocess(img, b.preprocess);
  const StemOutput stem = patch_embed(x, b);
  ImageResult r;
  r.trace = forward_with_trace(stem, b);
  r.gem = gem_forward(r.trace, b, cfg);
  r.input_h = x.extent(0);
  r.input_w = x.extent(1);
  return r;
}

/// The unmodified model's dense output: final-layer patch tokens through ln_post and proj.
inline GemOutput baseline_output(const LayerTrace& trace, const WeightBundle& b) {
  GemOutput out;
  out.patch_tokens_joint = detail::drop_first_row(project_to_joint(trace.output(), b));
  out.cls_joint = trace.cls_joint;
  out.raw_pathway_tokens = trace.output();
  out.grid = trace.grid;
  return out;
}

inline std::string available_classes(const TextEmbeddingSet& text) {
  std::string s;
  for (std::size_t i = 0; i < text.class_names.size(); ++i) {
    if (i) s += ", ";
    s += text.class_names[i];
  }
  return s;
}

/// Embeddings for `names`, in that order.
inline TextEmbeddingSet select_classes(const TextEmbeddingSet& text, const std::vector<std::string>& names) {
  TextEmbeddingSet out;
  out.prompt_template = text.prompt_template;
  out.class_names = names;
  out.embeddings = Tensor({names.size(), text.embeddings.cols()});
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto idx = text.index_of(names[i]);
    if (!idx) {
      throw CommandError("unknown class \"" + names[i] + "\"; available classes: " + available_classes(text));
    }
    std::copy(text.embeddings.row(*idx).begin(), text.embeddings.row(*idx).end(), out.embeddings.row(i).begin());
  }
  return out;
}

inline std::string sanitize(const std::string& name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return s;
}

/// Sorted stems of `<dataset>/images/*.ppm`.
inline std::vector<std::string> list_images(const fs::path& dataset) {
  const fs::path dir = dataset / "images";
  if (!fs::is_directory(dir)) throw CommandError("dataset has no images/ directory: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CommandError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

/// Finite doubles as JSON numbers, NaN as null.
inline nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// heatmap

struct HeatmapArgs {
  fs::path model_dir, text_dir, image, out_dir;
  std::vector<std::string> classes;
  GemConfig gem;
  std::size_t jobs = 1;
};

/// 16-bit encoding of a cosine field: round((v + 1) / 2 · 65535).
inline LabelImage encode_heatmap(const Tensor& values_hw) {
  LabelImage img{values_hw.extent(0), values_hw.extent(1), std::vector<std::uint16_t>(values_hw.size())};
  for (std::size_t i = 0; i < values_hw.size(); ++i) {
    const double v = std::clamp(static_cast<double>(values_hw[i]), -1.0, 1.0);
    img.values[i] = static_cast<std::uint16_t>(std::lround((v + 1.0) * 0.5 * 65535.0));
  }
  return img;
}

/// Writes `heatmap_<class>.pgm16` at image resolution plus a JSON sidecar per class.
inline std::vector<fs::path> cmd_heatmap(const HeatmapArgs& args) {
  const Stopwatch clock;
  if (!fs::exists(args.image)) throw CommandError("image not found: " + args.image.string());
  if (args.classes.empty()) throw CommandError("heatmap: at least one --class is required");
  const LoadedBundle loaded = load_bundle(args.model_dir);
  const TextEmbeddingSet all = load_text_embeddings(args.text_dir);
  const TextEmbeddingSet text = select_classes(all, args.classes);
  const ImageRecord img = read_pixmap(args.image);
  const ImageResult r = run_pipeline(img, loaded.bundle, args.gem);

  fs::create_directories(args.out_dir);
  std::vector<fs::path> written(2 * text.class_names.size());
  parallel_for(text.class_names.size(), args.jobs, [&](std::size_t c) {
    const Heatmap hm = similarity_map(r.gem, text, c);
    const Tensor up = bilinear_resize(hm.values.reshaped({hm.values.rows(), hm.values.cols(), 1}),
                                      img.height(), img.width());
    const std::string stem = "heatmap_" + sanitize(hm.class_name);
    write_pgm16(args.out_dir / (stem + ".pgm16"), encode_heatmap(up.reshaped({img.height(), img.width()})));
    const auto [lo, hi] = std::minmax_element(hm.values.storage().begin(), hm.values.storage().end());
    write_json(args.out_dir / (stem + ".json"),
               {{"class_name", hm.class_name},
                {"prompt_template", text.prompt_template},
                {"grid", {r.gem.grid.rows, r.gem.grid.cols}},
                {"image_size", {img.height(), img.width()}},
                {"encoding", "u16 = round((cosine + 1) / 2 * 65535)"},
                {"min", *lo},
                {"max", *hi},
                {"values", hm.values.storage()}});
    written[2 * c] = args.out_dir / (stem + ".pgm16");
    written[2 * c + 1] = args.out_dir / (stem + ".json");
  });

  RunManifest m;
  m.command = "heatmap";
  m.config = {{"gem", gem_config_json(args.gem)}, {"classes", args.classes}, {"jobs", args.jobs}};
  m.add_input_dir(args.model_dir);
  m.add_input_dir(args.text_dir);
  m.add_input(args.image);
  m.wall_time_seconds = clock.seconds();
  m.write(args.out_dir);
  return written;
}

// ---------------------------------------------------------------------------
// eval-seg

enum class SegProtocol { kVoc, kContext, kAde };

inline SegProtocol parse_protocol(const std::string& s) {
  if (s == "voc") return SegProtocol::kVoc;
  if (s == "context") return SegProtocol::kContext;
  if (s == "ade") return SegProtocol::kAde;
  throw CommandError("unknown protocol \"" + s + "\" (expected voc, context or ade)");
}

struct ProtocolSettings {
  std::optional<double> background_threshold;
  bool background_is_class = false;  // scored as its own class, otherwise ignored
};

inline ProtocolSettings protocol_settings(SegProtocol p) {
  if (p == SegProtocol::kVoc) return {kVocBackgroundThreshold, true};
  return {std::nullopt, false};
}

struct EvalSegArgs {
  fs::path model_dir, text_dir, dataset_dir, out_dir;
  SegProtocol protocol = SegProtocol::kVoc;
  GemConfig gem;
  std::size_t jobs = 1;
  bool save_predictions = false;
  bool baseline = false;  // score the unmodified model's output instead of the GEM pathway
};

struct EvalSegReport {
  IoUStats stats;
  std::vector<std::string> score_classes;  // names for the IoU slots
  std::size_t images = 0;
};

/// Maps a stored label map and a prediction into the scoring index space of the protocol.
inline void to_score_space(const LabelImage& gt, const SegmentationPrediction& pred, std::size_t num_classes,
                           const ProtocolSettings& ps, std::vector<std::int32_t>& gt_out,
                           std::vector<std::int32_t>& pred_out) {
  const std::int32_t offset = ps.background_is_class ? 1 : 0;
  gt_out.resize(gt.values.size());
  pred_out.resize(gt.values.size());
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const std::uint16_t v = gt.values[i];
    if (v == kLabelIgnore) gt_out[i] = -1;
    else if (v == kLabelBackground) gt_out[i] = ps.background_is_class ? 0 : -1;
    else if (v <= num_classes) gt_out[i] = static_cast<std::int32_t>(v) - 1 + offset;
    else throw CommandError("label value " + std::to_string(v) + " exceeds class count " + std::to_string(num_classes));
    const std::int32_t p = pred.label_map[i];
    pred_out[i] = p < 0 ? (ps.background_is_class ? 0 : -2) : p + offset;
  }
}

inline EvalSegReport cmd_eval_seg(const EvalSegArgs& args) {
  const Stopwatch clock;
  const LoadedBundle loaded = load_bundle(args.model_dir);
  const std::vector<std::string> class_names = read_lines(args.dataset_dir / "classes.txt");
  const TextEmbeddingSet text = select_classes(load_text_embeddings(args.text_dir), class_names);
  const std::vector<std::string> ids = list_images(args.dataset_dir);
  if (ids.empty()) throw CommandError("empty dataset: no images in " + (args.dataset_dir / "images").string());
  const ProtocolSettings ps = protocol_settings(args.protocol);
  const std::size_t slots = class_names.size() + (ps.background_is_class ? 1 : 0);

  struct PerImage {
    std::vector<std::int32_t> gt, pred;
  };
  std::vector<PerImage> per_image(ids.size());
  if (args.save_predictions) fs::create_directories(args.out_dir / "predictions");
  parallel_for(ids.size(), args.jobs, [&](std::size_t i) {
    const ImageRecord img = read_pixmap(args.dataset_dir / "images" / (ids[i] + ".ppm"));
    const LabelImage gt = read_pgm16(args.dataset_dir / "labels" / (ids[i] + ".pgm16"));
    const ImageResult r = run_pipeline(img, loaded.bundle, args.gem);
    const SegmentationPrediction pred =
        segment_multiclass(args.baseline ? baseline_output(r.trace, loaded.bundle) : r.gem, text, loaded.bundle.preprocess, ps.background_threshold, gt.height, gt.width);
    to_score_space(gt, pred, class_names.size(), ps, per_image[i].gt, per_image[i].pred);
    if (args.save_predictions) {
      LabelImage out{pred.height, pred.width, std::vector<std::uint16_t>(pred.label_map.size())};
      for (std::size_t k = 0; k < out.values.size(); ++k)
        out.values[k] = static_cast<std::uint16_t>(pred.label_map[k] + 1);
      write_pgm16(args.out_dir / "predictions" / (ids[i] + ".pgm16"), out);
    }
  });

  IoUAccumulator acc(slots);
  for (const auto& p : per_image) acc.add(p.pred, p.gt, -1);
  EvalSegReport report{acc.stats(), {}, ids.size()};
  if (ps.background_is_class) report.score_classes.push_back("background");
  report.score_classes.insert(report.score_classes.end(), class_names.begin(), class_names.end());

  fs::create_directories(args.out_dir);
  nlohmann::json per_class = nlohmann::json::array();
  std::ostringstream csv;
  csv << "class,intersection,union,iou\n";
  for (std::size_t c = 0; c < slots; ++c) {
    per_class.push_back({{"class", report.score_classes[c]},
                         {"intersection", report.stats.intersection[c]},
                         {"union", report.stats.union_[c]},
                         {"iou", number_or_null(report.stats.iou[c])}});
    csv << report.score_classes[c] << "," << report.stats.intersection[c] << "," << report.stats.union_[c]
        << "," << csv_number(report.stats.iou[c]) << "\n";
  }
  const char* proto = args.protocol == SegProtocol::kVoc ? "voc" : args.protocol == SegProtocol::kContext ? "context" : "ade";
  write_json(args.out_dir / "miou.json", {{"schema_version", 1},
                                          {"protocol", proto},
                                          {"images", ids.size()},
                                          {"mean_iou", report.stats.mean_iou},
                                          {"classes_counted", report.stats.classes_counted},
                                          {"per_class", per_class}});
  std::ofstream(args.out_dir / "miou.csv", std::ios::trunc) << csv.str();

  RunManifest m;
  m.command = "eval-seg";
  m.config = {{"gem", gem_config_json(args.gem)},
              {"protocol", proto},
              {"baseline", args.baseline},
              {"background_threshold", ps.background_threshold ? nlohmann::json(*ps.background_threshold) : nlohmann::json(nullptr)},
              {"jobs", args.jobs}};
  m.add_input_dir(args.model_dir);
  m.add_input_dir(args.text_dir);
  m.add_input(args.dataset_dir / "classes.txt");
  m.wall_time_seconds = clock.seconds();
  m.write(args.out_dir);
  return report;
}

// ---------------------------------------------------------------------------
// eval-points

struct EvalPointsArgs {
  fs::path model_dir, text_dir, dataset_dir, out_dir;
  GemConfig gem;
  std::size_t jobs = 1;
};

inline PointMiouReport cmd_eval_points(const EvalPointsArgs& args) {
  const Stopwatch clock;
  const LoadedBundle loaded = load_bundle(args.model_dir);
  const TextEmbeddingSet text = load_text_embeddings(args.text_dir);
  const std::vector<PointAnnotation> points = read_points(args.dataset_dir / "points.txt");
  if (points.empty()) throw CommandError("empty dataset: no point annotations");

  std::map<std::string, std::vector<std::string>> classes_per_image;
  for (const auto& p : points) {
    if (!text.index_of(p.class_name)) {
      throw CommandError("annotation references unknown class \"" + p.class_name + "\" (image " + p.image_id + ")");
    }
    auto& v = classes_per_image[p.image_id];
    if (std::find(v.begin(), v.end(), p.class_name) == v.end()) v.push_back(p.class_name);
  }
  std::vector<std::string> ids;
  for (auto& [id, v] : classes_per_image) {
    std::sort(v.begin(), v.end());
    ids.push_back(id);
  }

  std::vector<std::vector<PointPrediction>> per_image(ids.size());
  parallel_for(ids.size(), args.jobs, [&](std::size_t i) {
    const ImageRecord img = read_pixmap(args.dataset_dir / "images" / (ids[i] + ".ppm"));
    const ImageResult r = run_pipeline(img, loaded.bundle, args.gem);
    for (const auto& name : classes_per_image[ids[i]]) {
      per_image[i].push_back(point_predict(r.gem, text, *text.index_of(name), img.height(), img.width()));
    }
  });
  std::map<PointKey, PointPrediction> predictions;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& names = classes_per_image[ids[i]];
    for (std::size_t c = 0; c < names.size(); ++c) predictions.emplace(PointKey{ids[i], names[c]}, std::move(per_image[i][c]));
  }
  const PointMiouReport report = point_miou(predictions, points);

  fs::create_directories(args.out_dir);
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& [img, cls] : report.excluded_no_positive) excluded.push_back({{"image_id", img}, {"class", cls}});
  std::ostringstream csv;
  csv << "image_id,class,tp,fp,fn,iou\n";
  for (const auto& p : report.pairs) {
    csv << p.image_id << "," << p.class_name << "," << p.tp << "," << p.fp << "," << p.fn << "," << csv_number(p.iou) << "\n";
  }
  write_json(args.out_dir / "pmiou.json", {{"schema_version", 1},
                                           {"p_miou", report.mean_iou},
                                           {"pairs", report.pairs.size()},
                                           {"excluded_no_positive", excluded}});
  std::ofstream(args.out_dir / "pmiou.csv", std::ios::trunc) << csv.str();

  RunManifest m;
  m.command = "eval-points";
  m.config = {{"gem", gem_config_json(args.gem)}, {"point_threshold", kPointThreshold}, {"jobs", args.jobs}};
  m.add_input_dir(args.model_dir);
  m.add_input_dir(args.text_dir);
  m.add_input(args.dataset_dir / "points.txt");
  m.wall_time_seconds = clock.seconds();
  m.write(args.out_dir);
  return report;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  fs::path model_dir, text_dir, dataset_dir, out_dir;
  GemConfig gem;
  std::size_t jobs = 1;
  bool cosine_spp = false;
};

struct SeriesPoint {
  std::string path;   // "baseline" or "gem"
  std::size_t layer;  // number of transformer layers applied
  double s_pp = 0.0, mc = 0.0, mtc = 0.0;
  std::size_t masks = 0;
};

struct AnalysisReport {
  std::vector<SeriesPoint> series;
  ContrastReport baseline_final, gem_final;
  LipschitzReport lipschitz;
  std::size_t masks_skipped = 0;
};

/// Token-grid masks, one per labelled class present in the image. A token belongs to the mask
/// when the label at its patch centre (mapped back to label resolution) is that class.
inline std::vector<std::pair<std::size_t, std::vector<std::uint8_t>>> token_masks(
    const LabelImage& gt, Grid grid, std::size_t patch, std::size_t input_h, std::size_t input_w,
    std::size_t num_classes) {
  std::vector<std::uint16_t> sampled(grid.tokens());
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const double cy = (static_cast<double>(r) + 0.5) * static_cast<double>(patch);
      const double cx = (static_cast<double>(c) + 0.5) * static_cast<double>(patch);
      const auto y = std::min(gt.height - 1, static_cast<std::size_t>(cy * gt.height / input_h));
      const auto x = std::min(gt.width - 1, static_cast<std::size_t>(cx * gt.width / input_w));
      sampled[r * grid.cols + c] = gt.at(y, x);
    }
  }
  std::vector<std::pair<std::size_t, std::vector<std::uint8_t>>> masks;
  for (std::size_t cls = 1; cls <= num_classes; ++cls) {
    std::vector<std::uint8_t> m(sampled.size());
    bool any = false;
    for (std::size_t i = 0; i < m.size(); ++i) any |= (m[i] = sampled[i] == cls) != 0;
    if (any) masks.emplace_back(cls - 1, std::move(m));
  }
  return masks;
}

inline AnalysisReport cmd_analyze(const AnalyzeArgs& args) {
  const Stopwatch clock;
  const LoadedBundle loaded = load_bundle(args.model_dir);
  const WeightBundle& b = loaded.bundle;
  const std::vector<std::string> class_names = read_lines(args.dataset_dir / "classes.txt");
  const TextEmbeddingSet text = select_classes(load_text_embeddings(args.text_dir), class_names);
  const std::vector<std::string> ids = list_images(args.dataset_dir);
  args.gem.validate(b.layers.size());

  // Series slots: baseline after layers 1..L, then GEM states after each pathway layer.
  const std::size_t L = b.layers.size(), start = L - args.gem.depth;
  std::vector<std::pair<std::string, std::size_t>> slots;
  for (std::size_t l = 1; l <= L; ++l) slots.emplace_back("baseline", l);
  for (std::size_t i = 0; i < args.gem.depth; ++i) slots.emplace_back("gem", start + i + 1);

  struct SlotValues {
    double s_pp = 0.0;
    std::vector<double> c, tc;
  };
  struct PerImage {
    std::vector<SlotValues> slots;
    std::size_t skipped = 0;
  };
  std::vector<PerImage> per_image(ids.size());

  parallel_for(ids.size(), args.jobs, [&](std::size_t i) {
    const ImageRecord img = read_pixmap(args.dataset_dir / "images" / (ids[i] + ".ppm"));
    const LabelImage gt = read_pgm16(args.dataset_dir / "labels" / (ids[i] + ".pgm16"));
    const ImageResult r = run_pipeline(img, b, args.gem);
    auto masks = token_masks(gt, r.trace.grid, b.config.patch_size, r.input_h, r.input_w, class_names.size());
    const std::size_t n = r.trace.grid.tokens();
    std::erase_if(masks, [&](const auto& m) {
      const auto count = static_cast<std::size_t>(std::count(m.second.begin(), m.second.end(), 1));
      if (count == n) ++per_image[i].skipped;
      return count == n;
    });
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const Tensor& tokens = s < L ? r.trace.tokens[s + 1] : r.gem.pathway_states[s - L];
      const Tensor patches = detail::drop_first_row(tokens);
      const Tensor joint = detail::drop_first_row(project_to_joint(tokens, b));
      SlotValues v;
      v.s_pp = n >= 2 ? patch_patch_similarity(patches, args.cosine_spp) : 0.0;
      const Tensor sim = cosine_similarity_matrix(patches);
      for (const auto& [cls, mask] : masks) {
        v.c.push_back(object_background_contrast_from_similarity(sim, mask).contrast);
        v.tc.push_back(text_object_background_contrast(joint, text.embeddings.row(cls), mask).contrast);
      }
      per_image[i].slots.push_back(std::move(v));
    }
  });

  AnalysisReport report;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    std::vector<double> spp, c, tc;
    for (const auto& img : per_image) {
      spp.push_back(img.slots[s].s_pp);
      c.insert(c.end(), img.slots[s].c.begin(), img.slots[s].c.end());
      tc.insert(tc.end(), img.slots[s].tc.begin(), img.slots[s].tc.end());
    }
    report.series.push_back({slots[s].first, slots[s].second, mean_of(spp), mean_of(c), mean_of(tc), c.size()});
    if (s == L - 1 || s == slots.size() - 1) {
      ContrastReport& cr = s == L - 1 ? report.baseline_final : report.gem_final;
      cr.s_pp = mean_of(spp);
      cr.per_mask_contrast = c;
      cr.mean_contrast = mean_of(c);
      cr.per_mask_text_contrast = tc;
      cr.mean_text_contrast = mean_of(tc);
    }
  }
  for (const auto& img : per_image) report.masks_skipped += img.skipped;
  report.lipschitz = lipschitz_constants(b);

  fs::create_directories(args.out_dir);
  std::ostringstream layers_csv;
  layers_csv << "path,layer,s_pp,mc,mtc,masks\n";
  nlohmann::json series = nlohmann::json::array();
  for (const auto& p : report.series) {
    layers_csv << p.path << "," << p.layer << "," << csv_number(p.s_pp) << "," << csv_number(p.mc) << ","
               << csv_number(p.mtc) << "," << p.masks << "\n";
    series.push_back({{"path", p.path}, {"layer", p.layer}, {"s_pp", p.s_pp}, {"mc", p.mc}, {"mtc", p.mtc}, {"masks", p.masks}});
  }
  std::ofstream(args.out_dir / "analysis_layers.csv", std::ios::trunc) << layers_csv.str();

  std::ostringstream lip_csv;
  lip_csv << "layer,projection,head,spectral_norm\n";
  for (const auto& e : report.lipschitz.entries) {
    lip_csv << e.layer << "," << projection_name(e.projection) << ",all," << csv_number(e.full) << "\n";
    for (std::size_t h = 0; h < e.per_head.size(); ++h)
      lip_csv << e.layer << "," << projection_name(e.projection) << "," << h << "," << csv_number(e.per_head[h]) << "\n";
  }
  std::ofstream(args.out_dir / "lipschitz.csv", std::ios::trunc) << lip_csv.str();

  const auto summary_json = [](const std::map<std::string, LipschitzSummary>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, s] : m) j[k] = {{"mean", s.mean}, {"std", s.stddev}};
    return j;
  };
  const auto contrast_json = [](const ContrastReport& c) {
    return nlohmann::json{{"s_pp", c.s_pp}, {"mc", c.mean_contrast}, {"mtc", c.mean_text_contrast},
                          {"masks", c.per_mask_contrast.size()}};
  };
  write_json(args.out_dir / "analysis.json",
             {{"schema_version", 1},
              {"images", ids.size()},
              {"s_pp_kind", args.cosine_spp ? "cosine" : "dot"},
              {"masks_skipped", report.masks_skipped},
              {"baseline", contrast_json(report.baseline_final)},
              {"gem", contrast_json(report.gem_final)},
              {"series", series},
              {"lipschitz", {{"per_head", summary_json(report.lipschitz.per_head_summary)},
                             {"full", summary_json(report.lipschitz.full_summary)}}}});

  RunManifest m;
  m.command = "analyze";
  m.config = {{"gem", gem_config_json(args.gem)}, {"cosine_spp", args.cosine_spp}, {"jobs", args.jobs}};
  m.add_input_dir(args.model_dir);
  m.add_input_dir(args.text_dir);
  m.add_input(args.dataset_dir / "classes.txt");
  m.wall_time_seconds = clock.seconds();
  m.write(args.out_dir);
  return report;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  SimConfig sim;
  fs::path out_dir;
  std::size_t jobs = 1;
};

/// Cluster counts with iterations as rows and temperatures as columns.
inline std::string cluster_table(const SimResult& r) {
  std::ostringstream os;
  os << "K\\tau";
  for (double t : r.config.temperatures) os << "\t" << format_tau(t);
  os << "\n";
  for (std::size_t k = 0; k < r.config.iterations.size(); ++k) {
    os << r.config.iterations[k];
    for (std::size_t t = 0; t < r.config.temperatures.size(); ++t) os << "\t" << r.cell(k, t).clusters.count;
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json sim_config_json(const SimConfig& c) {
  return {{"n_points", c.n_points},         {"dim", c.dim},
          {"iterations", c.iterations},     {"temperatures", c.temperatures},
          {"spectral_target", c.spectral_target}, {"seed", c.seed},
          {"cos_threshold", c.cos_threshold}};
}

inline SimResult cmd_simulate(const SimulateArgs& args) {
  const Stopwatch clock;
  const SimResult result = run_simulation(args.sim, args.jobs);
  emit_plot_data(result, args.out_dir);
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : result.cells) {
    cells.push_back({{"iterations", c.iterations},
                     {"tau", c.tau},
                     {"clusters", c.clusters.count},
                     {"mean_within_cosine", c.mean_within_cosine},
                     {"file", sim_cell_stem(c.iterations, c.tau) + ".csv"}});
  }
  write_json(args.out_dir / "sim_meta.json", {{"schema_version", 1},
                                              {"seed", args.sim.seed},
                                              {"generator", GaussianRng::kName},
                                              {"config", sim_config_json(args.sim)},
                                              {"cells", cells}});
  RunManifest m;
  m.command = "simulate";
  m.config = {{"sim", sim_config_json(args.sim)}, {"jobs", args.jobs}};
  m.wall_time_seconds = clock.seconds();
  m.write(args.out_dir);
  return result;
}

}  // namespace gem
