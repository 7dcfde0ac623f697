// densestream: multi-stream 3D DenseNet lesion classification pipeline.
//
// Subcommands walk the pipeline stages in order:
//   gen-phantom -> preprocess -> extract -> train -> ensemble -> predict
// plus `evaluate` (score predictions against labeled findings) and `report`
// (regenerate tables/figures from stored metrics).
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "densestream/pipeline.hpp"

namespace {

using namespace densestream;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

PipelineConfig load_config(const CommonArgs& args) {
  if (args.config_path.empty()) throw data_error("--config is required for this subcommand");
  PipelineConfig config = load_pipeline_config(args.config_path);
  if (args.seed) config.master_seed = *args.seed;
  if (args.workers) config.workers = *args.workers;
  return config;
}

TrainFilters parse_only(const std::string& only) {
  TrainFilters filters;
  if (only.empty()) return filters;
  for (const auto& part : split_csv_line(only)) {
    const auto eq = part.find('=');
    if (eq == std::string::npos)
      throw data_error("--only expects key=value pairs, got '" + part + "'");
    const std::string key = trim(part.substr(0, eq));
    const std::string value = trim(part.substr(eq + 1));
    if (key == "geometry") {
      filters.geometry = static_cast<int>(parse_int(value, "--only geometry"));
    } else if (key == "fold") {
      filters.fold = static_cast<int>(parse_int(value, "--only fold"));
    } else if (key == "family") {
      filters.family = family_from_name(value);
    } else {
      throw data_error("--only supports geometry/fold/family keys, got '" + key + "'");
    }
  }
  return filters;
}

}  // namespace

int main(int argc, char** argv) {
  densestream::tune_malloc_for_tensors();

  CLI::App app{"multi-stream 3D DenseNet lesion classification pipeline"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string phantom_spec_path, out_dir, only;
  std::string predictions_path, truth_path, eval_out;

  auto add_common = [&](CLI::App* cmd, bool with_config = true) {
    if (with_config)
      cmd->add_option("--config", common.config_path, "pipeline configuration JSON")->required();
    cmd->add_option("--seed", common.seed, "override the master seed");
    cmd->add_option("--workers", common.workers, "worker thread count");
  };

  auto* gen = app.add_subcommand("gen-phantom", "generate a synthetic cohort");
  gen->add_option("--spec", phantom_spec_path, "phantom spec JSON (defaults when omitted)");
  gen->add_option("--out", out_dir, "output root directory")->required();
  add_common(gen, false);

  auto* prep = app.add_subcommand("preprocess", "resample, crop and standardize all studies");
  add_common(prep);

  auto* extract = app.add_subcommand("extract", "sample centers and extract patch archives");
  add_common(extract);

  auto* train = app.add_subcommand("train", "train the per-geometry per-fold stream models");
  add_common(train);
  train->add_option("--only", only, "filter jobs, e.g. geometry=96,fold=2,family=composite");

  auto* ens = app.add_subcommand("ensemble", "train the stacked-generalization meta-networks");
  add_common(ens);

  auto* predict = app.add_subcommand("predict", "score test-cohort findings");
  add_common(predict);

  auto* evaluate = app.add_subcommand("evaluate", "ROC/AUC of predictions against labels");
  evaluate->add_option("--config", common.config_path, "pipeline configuration JSON");
  evaluate->add_option("--predictions", predictions_path, "predictions CSV");
  evaluate->add_option("--truth", truth_path, "findings CSV with labels");
  evaluate->add_option("--out", eval_out, "output directory");

  auto* report = app.add_subcommand("report", "regenerate tables and figures from metrics");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      PhantomSpec spec;
      if (!phantom_spec_path.empty()) {
        try {
          spec = nlohmann::json::parse(read_file_text(phantom_spec_path)).get<PhantomSpec>();
        } catch (const nlohmann::json::exception& e) {
          throw data_error("bad phantom spec " + phantom_spec_path + ": " + e.what());
        }
      }
      if (common.seed) spec.master_seed = *common.seed;
      run_gen_phantom(spec, out_dir, common.workers.value_or(1));
      std::printf("gen-phantom: %d studies under %s/cohort\n", spec.n_subjects, out_dir.c_str());
    } else if (prep->parsed()) {
      PipelineConfig config = load_config(common);
      run_preprocess(config);
      std::printf("preprocess: wrote %s/prep\n", config.out_dir.c_str());
    } else if (extract->parsed()) {
      PipelineConfig config = load_config(common);
      run_extract(config);
      std::printf("extract: wrote %s/patches\n", config.out_dir.c_str());
    } else if (train->parsed()) {
      PipelineConfig config = load_config(common);
      run_train(config, parse_only(only));
      std::printf("train: wrote %s/streams\n", config.out_dir.c_str());
    } else if (ens->parsed()) {
      PipelineConfig config = load_config(common);
      run_ensembles(config);
      std::printf("ensemble: wrote %s/ensemble\n", config.out_dir.c_str());
    } else if (predict->parsed()) {
      PipelineConfig config = load_config(common);
      run_predict(config);
      std::printf("predict: wrote %s/predictions/predictions.csv\n", config.out_dir.c_str());
    } else if (evaluate->parsed()) {
      std::filesystem::path pred = predictions_path, truth = truth_path, out = eval_out;
      if (!common.config_path.empty()) {
        PipelineConfig config = load_pipeline_config(common.config_path);
        if (pred.empty())
          pred = std::filesystem::path(config.out_dir) / "predictions" / "predictions.csv";
        if (truth.empty())
          truth = std::filesystem::path(config.manifest_path).parent_path() / "truth.csv";
        if (out.empty()) out = std::filesystem::path(config.out_dir) / "eval";
      }
      if (pred.empty() || truth.empty() || out.empty())
        throw data_error("evaluate needs --predictions, --truth and --out (or --config)");
      run_evaluate(pred, truth, out);
      std::printf("evaluate: wrote %s/eval.json\n", out.string().c_str());
    } else if (report->parsed()) {
      PipelineConfig config = load_config(common);
      run_report(config);
      std::printf("report: wrote %s/report\n", config.out_dir.c_str());
    }
  } catch (const data_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
  return 0;
}
