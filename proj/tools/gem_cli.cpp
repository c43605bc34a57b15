// gem: training-free open-vocabulary localization from a ViT vision-language bundle.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "gem/commands.hpp"

namespace {

struct AblationFlags {
  std::string projections = "q,k,v";
  std::size_t iterations = 1;
  std::size_t depth = 4;
  std::string temperature = "adaptive";
  bool include_mlp = false;
  bool no_norm = false;
  bool no_cls_ssa = false;

  void attach(CLI::App* app) {
    app->add_option("--projections", projections, "comma-separated subset of q,k,v")->capture_default_str();
    app->add_option("--iterations", iterations, "self-self attention iterations K")->capture_default_str();
    app->add_option("--depth", depth, "number of final layers in the parallel pathway")->capture_default_str();
    app->add_option("--temperature", temperature, "\"adaptive\" or a positive number")->capture_default_str();
    app->add_flag("--include-mlp", include_mlp, "add the block MLP residual in the pathway");
    app->add_flag("--no-norm", no_norm, "skip L2 normalization of projections");
    app->add_flag("--no-cls-ssa", no_cls_ssa, "exclude the CLS token from self-self attention");
  }

  gem::GemConfig config() const {
    gem::GemConfig cfg;
    cfg.depth = depth;
    cfg.iterations = iterations;
    cfg.include_mlp = include_mlp;
    cfg.normalize = !no_norm;
    cfg.ssa_over_cls = !no_cls_ssa;
    cfg.projections.clear();
    std::stringstream ss(projections);
    for (std::string tok; std::getline(ss, tok, ',');) {
      if (tok == "q") cfg.projections.push_back(gem::Projection::kQuery);
      else if (tok == "k") cfg.projections.push_back(gem::Projection::kKey);
      else if (tok == "v") cfg.projections.push_back(gem::Projection::kValue);
      else throw gem::CommandError("unknown projection \"" + tok + "\" (expected q, k or v)");
    }
    if (temperature != "adaptive") {
      double t = 0.0;
      std::size_t used = 0;
      try {
        t = std::stod(temperature, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != temperature.size()) throw gem::CommandError("--temperature must be \"adaptive\" or a number");
      cfg.fixed_temperature = t;
    }
    return cfg;
  }
};

std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GEM open-vocabulary localization"};
  app.set_version_flag("--version", gem::kToolVersion);
  app.require_subcommand(1);

  std::string model_dir = env_or("GEM_MODEL_DIR"), text_dir, out_dir, dataset_dir, image, protocol = "voc";
  std::vector<std::string> classes;
  std::size_t jobs = 1;
  bool save_predictions = false, cosine_spp = false, baseline = false;
  AblationFlags ablation;
  gem::SimConfig sim;

  const auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--model", model_dir, "model bundle directory (default: $GEM_MODEL_DIR)");
    sub->add_option("--text", text_dir, "text embedding directory")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--jobs", jobs, "worker threads")->capture_default_str();
    ablation.attach(sub);
  };

  auto* heatmap = app.add_subcommand("heatmap", "per-class similarity heatmaps for one image");
  model_opts(heatmap);
  heatmap->add_option("--image", image, "input PPM image")->required();
  heatmap->add_option("--class", classes, "class name (repeatable)")->required();

  auto* eval_seg = app.add_subcommand("eval-seg", "multi-class segmentation mIoU over a dataset");
  model_opts(eval_seg);
  eval_seg->add_option("--dataset", dataset_dir, "dataset directory")->required();
  eval_seg->add_option("--protocol", protocol, "voc, context or ade")->capture_default_str();
  eval_seg->add_flag("--save-predictions", save_predictions, "write predicted label maps");
  eval_seg->add_flag("--baseline", baseline, "score the unmodified model output instead of the GEM pathway");

  auto* eval_points = app.add_subcommand("eval-points", "point-annotation mIoU over a dataset");
  model_opts(eval_points);
  eval_points->add_option("--dataset", dataset_dir, "dataset directory")->required();

  auto* analyze = app.add_subcommand("analyze", "per-layer similarity and contrast analysis");
  model_opts(analyze);
  analyze->add_option("--dataset", dataset_dir, "dataset directory")->required();
  analyze->add_flag("--cosine-spp", cosine_spp, "report patch-patch similarity on normalized tokens");

  auto* simulate = app.add_subcommand("simulate", "clustering simulation of iterated self-self attention");
  simulate->add_option("--out", out_dir, "output directory")->required();
  simulate->add_option("--seed", sim.seed)->capture_default_str();
  simulate->add_option("--points", sim.n_points)->capture_default_str();
  simulate->add_option("--dim", sim.dim)->capture_default_str();
  simulate->add_option("--sim-iterations", sim.iterations, "iteration counts")->delimiter(',')->capture_default_str();
  simulate->add_option("--temperatures", sim.temperatures)->delimiter(',')->capture_default_str();
  simulate->add_option("--spectral-target", sim.spectral_target)->capture_default_str();
  simulate->add_option("--cos-threshold", sim.cos_threshold)->capture_default_str();
  simulate->add_option("--jobs", jobs, "worker threads")->capture_default_str();

  auto* validate = app.add_subcommand("validate", "check a model bundle and report problems");
  validate->add_option("--model", model_dir, "model bundle directory (default: $GEM_MODEL_DIR)");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto need_model = [&] {
      if (model_dir.empty()) throw gem::CommandError("no model bundle: pass --model or set GEM_MODEL_DIR");
    };
    if (*heatmap) {
      need_model();
      const auto files = gem::cmd_heatmap({model_dir, text_dir, image, out_dir, classes, ablation.config(), jobs});
      for (const auto& f : files) std::cout << f.string() << "\n";
    } else if (*eval_seg) {
      need_model();
      gem::EvalSegArgs a{model_dir, text_dir, dataset_dir, out_dir, gem::parse_protocol(protocol),
                         ablation.config(), jobs, save_predictions, baseline};
      const auto r = gem::cmd_eval_seg(a);
      std::cout << "mIoU " << r.stats.mean_iou << " over " << r.stats.classes_counted << " classes, "
                << r.images << " images\n";
    } else if (*eval_points) {
      need_model();
      const auto r = gem::cmd_eval_points({model_dir, text_dir, dataset_dir, out_dir, ablation.config(), jobs});
      std::cout << "pMIoU " << r.mean_iou << " over " << r.pairs.size() << " pairs";
      if (!r.excluded_no_positive.empty()) std::cout << " (" << r.excluded_no_positive.size() << " excluded)";
      std::cout << "\n";
    } else if (*analyze) {
      need_model();
      const auto r = gem::cmd_analyze({model_dir, text_dir, dataset_dir, out_dir, ablation.config(), jobs, cosine_spp});
      std::cout << "baseline: s_pp " << r.baseline_final.s_pp << " MC " << r.baseline_final.mean_contrast
                << " MTC " << r.baseline_final.mean_text_contrast << "\n"
                << "gem:      s_pp " << r.gem_final.s_pp << " MC " << r.gem_final.mean_contrast << " MTC "
                << r.gem_final.mean_text_contrast << "\n";
    } else if (*simulate) {
      const auto r = gem::cmd_simulate({sim, out_dir, jobs});
      std::cout << gem::cluster_table(r);
    } else if (*validate) {
      need_model();
      const auto warnings = gem::validate_bundle(model_dir);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "ok\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
