#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/ensemble.hpp"
#include "densestream/phantom.hpp"
#include "densestream/preprocess.hpp"
#include "densestream/trainer.hpp"

// Pipeline orchestration: one configuration document, deterministic seed
// derivation, and per-stage manifests carrying content digests so staleness
// is detected by content rather than timestamps.

namespace densestream {

struct StreamDefaults {
  int growth = 12;
  int layers_per_block = 4;
  double compression = 0.5;
  double dropout = 0.2;
  int head_width = 64;
  // per-geometry override fragments, keyed by in-plane size ("42".."96")
  std::map<std::string, nlohmann::json> overrides;
};

inline void to_json(nlohmann::json& j, const StreamDefaults& s) {
  j["growth"] = s.growth;
  j["layers_per_block"] = s.layers_per_block;
  j["compression"] = s.compression;
  j["dropout"] = s.dropout;
  j["head_width"] = s.head_width;
  j["overrides"] = nlohmann::json::object();
  for (const auto& [k, v] : s.overrides) j["overrides"][k] = v;
}

inline void from_json(const nlohmann::json& j, StreamDefaults& s) {
  s.growth = j.value("growth", s.growth);
  s.layers_per_block = j.value("layers_per_block", s.layers_per_block);
  s.compression = j.value("compression", s.compression);
  s.dropout = j.value("dropout", s.dropout);
  s.head_width = j.value("head_width", s.head_width);
  if (j.contains("overrides"))
    for (const auto& [k, v] : j.at("overrides").items()) s.overrides[k] = v;
}

inline void to_json(nlohmann::json& j, const FocalParams& p) {
  j["alpha"] = p.alpha;
  j["gamma"] = p.gamma;
  j["class_balanced"] = p.class_balanced;
}

inline void from_json(const nlohmann::json& j, FocalParams& p) {
  p.alpha = j.value("alpha", p.alpha);
  p.gamma = j.value("gamma", p.gamma);
  p.class_balanced = j.value("class_balanced", p.class_balanced);
}

struct PipelineConfig {
  std::string manifest_path;  // cohort manifest (gen-phantom writes cohort/manifest.json)
  std::string out_dir = "out";
  std::uint64_t master_seed = 1;
  int workers = 1;

  GridSpec grid;      // 0.5 mm in-plane, 3 mm slices, 320 crop
  PatchSpec patches;  // four geometries, 100 per study, boost 10, r_pos 5 mm
  StreamDefaults stream;
  TrainConfig train;  // lr 2e-4, momentum 0.9, decay 1e-5, epochs 200, batch 72
  // optimizer settings for the meta-network; same optimizer and loss as the
  // streams, but the two-layer head tolerates a far larger step size
  TrainConfig meta_train = [] {
    TrainConfig t;
    t.learning_rate = 0.05;
    return t;
  }();
  FocalParams focal;  // alpha 0.5, gamma 1.5
  std::vector<Family> families = {Family::Composite, Family::Solo};
  std::vector<EnsembleFamily> ensembles = {EnsembleFamily::Composite, EnsembleFamily::Solo,
                                           EnsembleFamily::Quadruple};
  EnsembleFamily predict_family = EnsembleFamily::Quadruple;

  StreamConfig stream_config_for(Family family, int geometry_index) const {
    StreamConfig c = make_stream_config(patches.geometries[static_cast<std::size_t>(geometry_index)],
                                        family, stream.growth, stream.layers_per_block);
    c.compression = stream.compression;
    c.dropout = stream.dropout;
    c.head_width = stream.head_width;
    auto it = stream.overrides.find(
        patches.geometries[static_cast<std::size_t>(geometry_index)].name());
    if (it != stream.overrides.end()) {
      nlohmann::json merged = c;
      merged.merge_patch(it->second);
      c = merged.get<StreamConfig>();
    }
    c.validate();
    return c;
  }

  // Everything that determines results; run-local details (paths, worker
  // count) are excluded so two runs of one experiment emit identical
  // manifests.
  nlohmann::json semantic_json() const {
    nlohmann::json j;
    j["master_seed"] = master_seed;
    j["grid"] = {{"in_plane_mm", grid.in_plane_mm},
                 {"slice_mm", grid.slice_mm},
                 {"crop", grid.crop}};
    j["patches"] = {{"per_study", patches.patches_per_study},
                    {"boost", patches.finding_boost},
                    {"r_pos_mm", patches.r_pos_mm}};
    j["stream"] = stream;
    j["train"] = train;
    j["meta_train"] = meta_train;
    j["focal"] = focal;
    j["families"] = nlohmann::json::array();
    for (Family f : families) j["families"].push_back(family_name(f));
    j["ensembles"] = nlohmann::json::array();
    for (EnsembleFamily f : ensembles) j["ensembles"].push_back(ensemble_family_name(f));
    j["predict_family"] = ensemble_family_name(predict_family);
    return j;
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = c.semantic_json();
  j["manifest"] = c.manifest_path;
  j["out_dir"] = c.out_dir;
  j["workers"] = c.workers;
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.manifest_path = j.value("manifest", c.manifest_path);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.master_seed = j.value("master_seed", c.master_seed);
  c.workers = j.value("workers", c.workers);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.grid.in_plane_mm = g.value("in_plane_mm", c.grid.in_plane_mm);
    c.grid.slice_mm = g.value("slice_mm", c.grid.slice_mm);
    c.grid.crop = g.value("crop", c.grid.crop);
  }
  if (j.contains("patches")) {
    const auto& p = j.at("patches");
    c.patches.patches_per_study = p.value("per_study", c.patches.patches_per_study);
    c.patches.finding_boost = p.value("boost", c.patches.finding_boost);
    c.patches.r_pos_mm = p.value("r_pos_mm", c.patches.r_pos_mm);
  }
  if (j.contains("stream")) c.stream = j.at("stream").get<StreamDefaults>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("meta_train")) c.meta_train = j.at("meta_train").get<TrainConfig>();
  if (j.contains("focal")) c.focal = j.at("focal").get<FocalParams>();
  if (j.contains("families")) {
    c.families.clear();
    for (const auto& f : j.at("families")) c.families.push_back(family_from_name(f));
  }
  if (j.contains("ensembles")) {
    c.ensembles.clear();
    for (const auto& f : j.at("ensembles"))
      c.ensembles.push_back(ensemble_family_from_name(f));
  }
  if (j.contains("predict_family"))
    c.predict_family = ensemble_family_from_name(j.at("predict_family"));
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  try {
    PipelineConfig c = nlohmann::json::parse(read_file_text(path)).get<PipelineConfig>();
    c.grid.validate();
    c.patches.validate();
    c.train.validate();
    c.focal.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad pipeline config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// stage manifests

struct StageManifest {
  std::string stage;
  std::uint64_t seed = 0;
  nlohmann::json config;                        // semantic snapshot
  std::map<std::string, std::string> inputs;    // logical name -> digest
  std::map<std::string, std::string> artifacts; // path relative to stage dir -> digest
};

inline void save_stage_manifest(const StageManifest& m, const std::filesystem::path& stage_dir) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["inputs"] = m.inputs;
  j["artifacts"] = m.artifacts;
  write_file_text(stage_dir / "stage.json", j.dump(2) + "\n");
}

// stage directory -> the subcommand that (re)builds it
inline std::string stage_command(const std::string& stage_dir_name) {
  static const std::map<std::string, std::string> kCommands = {
      {"cohort", "gen-phantom"}, {"prep", "preprocess"},      {"patches", "extract"},
      {"streams", "train"},      {"ensemble", "ensemble"},    {"predictions", "predict"},
      {"eval", "evaluate"},      {"report", "report"}};
  auto it = kCommands.find(stage_dir_name);
  return it == kCommands.end() ? stage_dir_name : it->second;
}

inline StageManifest load_stage_manifest(const std::filesystem::path& stage_dir,
                                         const std::string& stage) {
  const std::filesystem::path path = stage_dir / "stage.json";
  if (!std::filesystem::exists(path))
    throw data_error("stage '" + stage + "' has not produced outputs yet; run `densestream " +
                     stage_command(stage) + "` first");
  StageManifest m;
  try {
    nlohmann::json j = nlohmann::json::parse(read_file_text(path));
    m.stage = j.at("stage").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad stage manifest " + path.string() + ": " + e.what());
  }
  return m;
}

// Recomputes artifact digests; any mismatch means the upstream stage must be
// rerun before this one can trust its inputs.
inline StageManifest require_fresh_stage(const std::filesystem::path& out_root,
                                         const std::string& stage) {
  const std::filesystem::path stage_dir = out_root / stage;
  StageManifest m = load_stage_manifest(stage_dir, stage);
  for (const auto& [rel, digest] : m.artifacts) {
    const std::filesystem::path path = stage_dir / rel;
    if (!std::filesystem::exists(path))
      throw data_error("artifact '" + rel + "' of stage '" + stage +
                       "' is missing; rerun `densestream " + stage_command(stage) + "`");
    if (digest_file(path) != digest)
      throw data_error("artifact '" + rel + "' of stage '" + stage +
                       "' is stale (content changed); rerun `densestream " +
                       stage_command(stage) + "`");
  }
  return m;
}

namespace detail {

inline void add_artifact(StageManifest& m, const std::filesystem::path& stage_dir,
                         const std::string& rel) {
  m.artifacts[rel] = digest_file(stage_dir / rel);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// stage: gen-phantom

// Generates the cohort, masking test-subject labels in the per-study findings
// files (the full truth goes to truth.csv for later evaluation).
inline void run_gen_phantom(const PhantomSpec& spec, const std::filesystem::path& out_root,
                            int workers = 1) {
  spec.validate();
  const std::filesystem::path dir = out_root / "cohort";
  std::filesystem::create_directories(dir);

  const auto classes = assign_lesion_classes(spec);
  std::vector<std::vector<Finding>> all_findings(static_cast<std::size_t>(spec.n_subjects));
  std::vector<Cohort> cohorts(static_cast<std::size_t>(spec.n_subjects));

  std::vector<std::function<void()>> jobs;
  for (int i = 0; i < spec.n_subjects; ++i) {
    jobs.push_back([&, i] {
      Study s = generate_subject(spec, i, classes[static_cast<std::size_t>(i)]);
      for (Modality m : kAllModalities)
        write_volume(s.volume(m), dir / (s.subject_id + "_" + modality_name(m)));
      all_findings[static_cast<std::size_t>(i)] = s.findings;
      cohorts[static_cast<std::size_t>(i)] = s.cohort;
      std::vector<Finding> masked = s.findings;
      if (s.cohort == Cohort::Test && spec.unknown_test_labels)
        for (auto& f : masked) f.clin_sig = ClinSig::Unknown;
      write_findings_csv(masked, dir / (s.subject_id + "_findings.csv"));
    });
  }
  run_jobs(jobs, workers);

  CohortManifest manifest;
  std::vector<Finding> truth;
  for (int i = 0; i < spec.n_subjects; ++i) {
    const std::string id = phantom_subject_id(i);
    StudyFiles files;
    files.t2w = id + "_t2w";
    files.adc = id + "_adc";
    files.dwi = id + "_dwi";
    files.ktrans = id + "_ktrans";
    files.findings = id + "_findings.csv";
    files.cohort = cohorts[static_cast<std::size_t>(i)];
    manifest.studies[id] = files;
    truth.insert(truth.end(), all_findings[static_cast<std::size_t>(i)].begin(),
                 all_findings[static_cast<std::size_t>(i)].end());
  }
  save_manifest(manifest, dir / "manifest.json");
  write_findings_csv(truth, dir / "truth.csv");

  StageManifest sm;
  sm.stage = "gen-phantom";
  sm.seed = spec.master_seed;
  sm.config = spec;
  detail::add_artifact(sm, dir, "manifest.json");
  detail::add_artifact(sm, dir, "truth.csv");
  for (const auto& [id, files] : manifest.studies) {
    for (Modality m : kAllModalities) {
      detail::add_artifact(sm, dir, files.volume_base(m) + ".json");
      detail::add_artifact(sm, dir, files.volume_base(m) + ".raw");
    }
    detail::add_artifact(sm, dir, files.findings);
  }
  save_stage_manifest(sm, dir);
}

// ---------------------------------------------------------------------------
// stage: preprocess

namespace detail {

struct StatsPart {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
};

inline StatsPart volume_stats_part(const Volume& v) {
  StatsPart p;
  p.n = v.voxel_count();
  double sum = 0.0;
  for (float x : v.voxels) sum += x;
  p.mean = sum / static_cast<double>(p.n);
  for (float x : v.voxels) {
    const double d = x - p.mean;
    p.m2 += d * d;
  }
  return p;
}

// Chan's merge; applied in fixed subject order so results are independent of
// worker scheduling.
inline StatsPart merge_stats(const StatsPart& a, const StatsPart& b) {
  if (a.n == 0) return b;
  if (b.n == 0) return a;
  StatsPart out;
  out.n = a.n + b.n;
  const double delta = b.mean - a.mean;
  out.mean = a.mean + delta * static_cast<double>(b.n) / static_cast<double>(out.n);
  out.m2 = a.m2 + b.m2 +
           delta * delta * static_cast<double>(a.n) * static_cast<double>(b.n) /
               static_cast<double>(out.n);
  return out;
}

}  // namespace detail

// Unifies every study onto the target grid, fits per-modality statistics on
// the training cohort only, standardizes all studies with those frozen stats,
// and writes a new cohort manifest for the preprocessed volumes.
inline void run_preprocess(const PipelineConfig& config) {
  const std::filesystem::path out_root = config.out_dir;
  const std::filesystem::path dir = out_root / "prep";
  std::filesystem::create_directories(dir);
  config.grid.validate();

  CohortManifest source = load_manifest(config.manifest_path);
  std::vector<std::string> ids;
  for (const auto& [id, files] : source.studies)
    if (!source.excluded(id)) ids.push_back(id);
  if (ids.empty()) throw data_error("preprocess: no studies after exclusions");

  // phase A: unify and write, collecting per-subject stats parts
  std::vector<std::array<detail::StatsPart, 4>> parts(ids.size());
  std::vector<Cohort> cohorts(ids.size());
  std::vector<std::function<void()>> unify_jobs;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    unify_jobs.push_back([&, i] {
      Study raw = load_study(source, ids[i]);
      Study uni = unify_study(raw, config.grid);
      cohorts[i] = uni.cohort;
      for (Modality m : kAllModalities) {
        const Volume& v = uni.volume(m);
        if (uni.cohort == Cohort::Train)
          parts[i][static_cast<std::size_t>(m)] = detail::volume_stats_part(v);
        write_volume(v, dir / (ids[i] + "_" + modality_name(m)));
      }
      write_findings_csv(uni.findings, dir / (ids[i] + "_findings.csv"));
    });
  }
  run_jobs(unify_jobs, config.workers);

  // fit: merge per-subject parts in id order (training cohort only)
  StatsTable stats;
  for (Modality m : kAllModalities) {
    detail::StatsPart acc;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (cohorts[i] == Cohort::Train)
        acc = detail::merge_stats(acc, parts[i][static_cast<std::size_t>(m)]);
    if (acc.n == 0) throw data_error("preprocess: no training-cohort studies to fit stats on");
    ModalityStats st;
    st.modality = m;
    st.mean = acc.mean;
    st.stddev = std::sqrt(acc.m2 / static_cast<double>(acc.n));
    st.count = acc.n;
    stats[static_cast<std::size_t>(m)] = st;
  }
  save_stats(stats, dir / "stats.json");

  // phase B: standardize in place with the frozen training stats
  std::vector<std::function<void()>> std_jobs;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std_jobs.push_back([&, i] {
      for (Modality m : kAllModalities) {
        const std::filesystem::path base = dir / (ids[i] + "_" + modality_name(m));
        Volume v = read_volume(base);
        write_volume(standardize(v, stats[static_cast<std::size_t>(m)]), base);
      }
    });
  }
  run_jobs(std_jobs, config.workers);

  CohortManifest prep_manifest;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    StudyFiles files;
    files.t2w = ids[i] + "_t2w";
    files.adc = ids[i] + "_adc";
    files.dwi = ids[i] + "_dwi";
    files.ktrans = ids[i] + "_ktrans";
    files.findings = ids[i] + "_findings.csv";
    files.cohort = cohorts[i];
    prep_manifest.studies[ids[i]] = files;
  }
  save_manifest(prep_manifest, dir / "manifest.json");

  StageManifest sm;
  sm.stage = "preprocess";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();
  sm.inputs["cohort_manifest"] = digest_file(config.manifest_path);
  detail::add_artifact(sm, dir, "manifest.json");
  detail::add_artifact(sm, dir, "stats.json");
  for (const auto& id : ids) {
    for (Modality m : kAllModalities) {
      detail::add_artifact(sm, dir, id + "_" + std::string(modality_name(m)) + ".json");
      detail::add_artifact(sm, dir, id + "_" + std::string(modality_name(m)) + ".raw");
    }
    detail::add_artifact(sm, dir, id + "_findings.csv");
  }
  save_stage_manifest(sm, dir);
}

// ---------------------------------------------------------------------------
// stage: extract

inline void run_extract(const PipelineConfig& config) {
  const std::filesystem::path out_root = config.out_dir;
  const StageManifest prep = require_fresh_stage(out_root, "prep");
  const std::filesystem::path prep_dir = out_root / "prep";
  const std::filesystem::path dir = out_root / "patches";
  std::filesystem::create_directories(dir);
  config.patches.validate();

  CohortManifest manifest = load_manifest(prep_dir / "manifest.json");
  std::vector<std::string> ids;
  for (const auto& [id, files] : manifest.studies)
    if (files.cohort == Cohort::Train) ids.push_back(id);
  if (ids.empty()) throw data_error("extract: no training-cohort studies");

  std::vector<std::function<void()>> jobs;
  for (const auto& id : ids) {
    jobs.push_back([&, id] {
      Study study = load_study(manifest, id);
      PatchArchive archive = extract_study_patches(
          study, config.patches, derive_seed(config.master_seed, "extract/" + id));
      save_patch_archive(archive, dir / (id + ".patches"));
    });
  }
  run_jobs(jobs, config.workers);

  StageManifest sm;
  sm.stage = "extract";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();
  sm.inputs["prep_stage"] = digest_file(prep_dir / "stage.json");
  for (const auto& id : ids) {
    detail::add_artifact(sm, dir, id + ".patches.json");
    detail::add_artifact(sm, dir, id + ".patches.bin");
    detail::add_artifact(sm, dir, id + ".patches.csv");
  }
  save_stage_manifest(sm, dir);
  (void)prep;
}

// ---------------------------------------------------------------------------
// stage: train

inline std::map<std::string, PatchArchive> load_train_archives(
    const std::filesystem::path& patches_dir) {
  std::map<std::string, PatchArchive> archives;
  for (const auto& entry : std::filesystem::directory_iterator(patches_dir)) {
    const std::string name = entry.path().filename().string();
    const std::string suffix = ".patches.json";
    if (name.size() <= suffix.size() || name.substr(name.size() - suffix.size()) != suffix)
      continue;
    const std::string id = name.substr(0, name.size() - suffix.size());
    PatchArchive a = load_patch_archive(patches_dir / (id + ".patches"));
    if (a.cohort == Cohort::Train) archives.emplace(id, std::move(a));
  }
  if (archives.empty()) throw data_error("no patch archives found; run `densestream extract`");
  return archives;
}

inline std::vector<SubjectStratum> strata_from_archives(
    const std::map<std::string, PatchArchive>& archives) {
  std::vector<SubjectStratum> strata;
  for (const auto& [id, archive] : archives) {
    bool positive = false;
    for (const auto& r : archive.records)
      if (r.provenance == Provenance::FindingCentered && r.label == ClinSig::Positive)
        positive = true;
    strata.push_back({id, positive});
  }
  return strata;
}

struct TrainFilters {
  std::optional<int> geometry;
  std::optional<int> fold;
  std::optional<Family> family;
};

inline void run_train(const PipelineConfig& config, const TrainFilters& filters = {}) {
  const std::filesystem::path out_root = config.out_dir;
  const StageManifest patches_stage = require_fresh_stage(out_root, "patches");
  const std::filesystem::path dir = out_root / "streams";
  std::filesystem::create_directories(dir);

  const auto archives = load_train_archives(out_root / "patches");
  const auto folds = make_folds(strata_from_archives(archives), config.train.folds,
                                derive_seed(config.master_seed, "folds"));

  StreamBankRequest req;
  req.families = config.families;
  req.patch_spec = config.patches;
  for (int gi = 0; gi < 4; ++gi) {
    req.composite_configs[gi] = config.stream_config_for(Family::Composite, gi);
    req.solo_configs[gi] = config.stream_config_for(Family::Solo, gi);
  }
  req.train_config = config.train;
  req.loss_params = config.focal;
  req.master_seed = config.master_seed;
  req.workers = config.workers;
  req.only_geometry = filters.geometry;
  req.only_fold = filters.fold;
  req.only_family = filters.family;

  const auto outcomes = run_all_streams(archives, folds, req, dir);

  // fold definition, for provenance and leakage audits
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& f : folds)
    folds_json.push_back({{"fold", f.fold_index},
                          {"train_subjects", f.train_subjects},
                          {"val_subjects", f.val_subjects}});
  write_file_text(dir / "folds.json", folds_json.dump(2) + "\n");

  // metrics store consumed by `report` (and the tables themselves)
  nlohmann::json metrics;
  metrics["folds"] = config.train.folds;
  metrics["rows"] = nlohmann::json::array();
  std::map<Family, std::vector<StreamTableRow>> tables;
  for (const auto& out : outcomes) {
    nlohmann::json row;
    row["family"] = family_name(out.key.family);
    row["geometry"] =
        config.patches.geometries[static_cast<std::size_t>(out.key.geometry_index)].name();
    row["fold"] = out.key.fold;
    row["patch_size"] = out.row.patch_size;
    row["train_accuracy"] = out.row.train_accuracy;
    row["train_auc"] = out.row.train_auc;
    row["val_accuracy"] = out.row.val_accuracy;
    row["val_auc"] = out.row.val_auc;
    if (out.row.cf_accuracy) row["cf_val_accuracy"] = *out.row.cf_accuracy;
    if (out.row.cf_auc) row["cf_val_auc"] = *out.row.cf_auc;
    row["n_train"] = out.n_train;
    row["n_val"] = out.n_val;
    row["n_val_findings"] = out.n_val_findings;
    row["epochs_ran"] = out.history.epochs_ran;
    row["best_epoch"] = out.history.best_epoch;
    row["best_val_loss"] = out.history.best_val_loss;
    row["checkpoint"] = out.checkpoint_base;
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : out.val_roc.points)
      roc.push_back({std::isfinite(p.threshold) ? p.threshold
                                                : (p.threshold > 0 ? 1.0e308 : -1.0e308),
                     p.sensitivity, p.fpr});
    row["roc"] = std::move(roc);
    metrics["rows"].push_back(std::move(row));
    tables[out.key.family].push_back(out.row);
  }
  write_file_text(dir / "metrics_streams.json", metrics.dump(2) + "\n");
  if (tables.count(Family::Composite))
    write_file_text(dir / "table1_streams_composite.csv",
                    stream_table_csv(tables[Family::Composite]));
  if (tables.count(Family::Solo))
    write_file_text(dir / "table2_streams_solo.csv", stream_table_csv(tables[Family::Solo]));

  StageManifest sm;
  sm.stage = "train";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();
  sm.inputs["patches_stage"] = digest_file(out_root / "patches" / "stage.json");
  detail::add_artifact(sm, dir, "folds.json");
  detail::add_artifact(sm, dir, "metrics_streams.json");
  if (tables.count(Family::Composite)) detail::add_artifact(sm, dir, "table1_streams_composite.csv");
  if (tables.count(Family::Solo)) detail::add_artifact(sm, dir, "table2_streams_solo.csv");
  for (const auto& out : outcomes) {
    detail::add_artifact(sm, dir, out.checkpoint_base + ".json");
    detail::add_artifact(sm, dir, out.checkpoint_base + ".bin");
    detail::add_artifact(sm, dir, "history_" + out.key.name(config.patches) + ".csv");
    detail::add_artifact(sm, dir, "roc_" + out.key.name(config.patches) + ".csv");
  }
  save_stage_manifest(sm, dir);
  (void)patches_stage;
}

// ---------------------------------------------------------------------------
// stage: ensemble

inline void run_ensembles(const PipelineConfig& config) {
  const std::filesystem::path out_root = config.out_dir;
  require_fresh_stage(out_root, "streams");
  require_fresh_stage(out_root, "patches");
  const std::filesystem::path streams_dir = out_root / "streams";
  const std::filesystem::path dir = out_root / "ensemble";
  std::filesystem::create_directories(dir);
  tune_malloc_for_tensors();

  const auto archives = load_train_archives(out_root / "patches");

  std::vector<EnsembleTableRow> rows;
  nlohmann::json metrics;
  metrics["rows"] = nlohmann::json::array();
  StageManifest sm;
  sm.stage = "ensemble";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();
  sm.inputs["streams_stage"] = digest_file(streams_dir / "stage.json");
  sm.inputs["patches_stage"] = digest_file(out_root / "patches" / "stage.json");

  for (EnsembleFamily selection : config.ensembles) {
    const std::string name = ensemble_family_name(selection);
    EnsembleModel<float> model = make_ensemble<float>(
        selection, streams_dir, config.patches, config.train.folds,
        derive_seed(config.master_seed, "ensemble_init/" + name));
    TrainConfig meta_cfg = config.meta_train;
    meta_cfg.folds = config.train.folds;
    EnsembleOutcome out =
        train_ensemble(model, archives, streams_dir, config.focal, meta_cfg,
                       derive_seed(config.master_seed, "ensemble_train/" + name));
    save_ensemble(model, dir / ("ensemble_" + name));
    write_file_text(dir / ("history_ensemble_" + name + ".csv"), history_csv(out.history));
    write_file_text(dir / ("roc_ensemble_" + name + ".csv"), roc_points_csv(out.val_roc));
    rows.push_back(out.row);

    nlohmann::json row;
    row["selection"] = name;
    row["input_channels"] = out.row.input_channels;
    row["train_accuracy"] = out.row.train_accuracy;
    row["train_auc"] = out.row.train_auc;
    row["val_accuracy"] = out.row.val_accuracy;
    row["val_auc"] = out.row.val_auc;
    if (out.row.cf_accuracy) row["cf_val_accuracy"] = *out.row.cf_accuracy;
    if (out.row.cf_auc) row["cf_val_auc"] = *out.row.cf_auc;
    row["best_stream_val_auc"] = out.best_stream_val_auc;
    row["n_train"] = out.n_train;
    row["n_val"] = out.n_val;
    row["epochs_ran"] = out.history.epochs_ran;
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : out.val_roc.points)
      roc.push_back({std::isfinite(p.threshold) ? p.threshold
                                                : (p.threshold > 0 ? 1.0e308 : -1.0e308),
                     p.sensitivity, p.fpr});
    row["roc"] = std::move(roc);
    metrics["rows"].push_back(std::move(row));

    detail::add_artifact(sm, dir, "ensemble_" + name + ".json");
    detail::add_artifact(sm, dir, "ensemble_" + name + ".bin");
    detail::add_artifact(sm, dir, "history_ensemble_" + name + ".csv");
    detail::add_artifact(sm, dir, "roc_ensemble_" + name + ".csv");
  }
  write_file_text(dir / "table3_ensembles.csv", ensemble_table_csv(rows));
  write_file_text(dir / "metrics_ensemble.json", metrics.dump(2) + "\n");
  detail::add_artifact(sm, dir, "table3_ensembles.csv");
  detail::add_artifact(sm, dir, "metrics_ensemble.json");
  save_stage_manifest(sm, dir);
}

// ---------------------------------------------------------------------------
// stage: predict

inline void run_predict(const PipelineConfig& config) {
  const std::filesystem::path out_root = config.out_dir;
  require_fresh_stage(out_root, "prep");
  require_fresh_stage(out_root, "ensemble");
  const std::filesystem::path dir = out_root / "predictions";
  std::filesystem::create_directories(dir);
  tune_malloc_for_tensors();

  EnsembleModel<float> model = load_ensemble<float>(
      out_root / "ensemble" / ("ensemble_" + std::string(ensemble_family_name(config.predict_family))),
      out_root / "streams");

  CohortManifest manifest = load_manifest(out_root / "prep" / "manifest.json");
  std::vector<PredictionRow> rows;
  int failures = 0;
  for (const auto& [id, files] : manifest.studies) {
    if (files.cohort != Cohort::Test) continue;
    Study study = load_study(manifest, id);
    for (const auto& finding : study.findings) {
      try {
        rows.push_back({id, finding.finding_id, predict_finding(model, study, finding)});
      } catch (const data_error& e) {
        // per-finding failure: report and continue with the rest of the batch
        std::fprintf(stderr, "predict: skipping (%s, %d): %s\n", id.c_str(),
                     finding.finding_id, e.what());
        ++failures;
      }
    }
  }
  if (rows.empty())
    throw data_error("predict: no test-cohort predictions produced (" +
                     std::to_string(failures) + " findings failed)");
  write_predictions_csv(rows, dir / "predictions.csv");

  StageManifest sm;
  sm.stage = "predict";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();
  sm.inputs["prep_stage"] = digest_file(out_root / "prep" / "stage.json");
  sm.inputs["ensemble_stage"] = digest_file(out_root / "ensemble" / "stage.json");
  detail::add_artifact(sm, dir, "predictions.csv");
  save_stage_manifest(sm, dir);
}

// ---------------------------------------------------------------------------
// stage: evaluate

// Joins prediction scores with labeled findings and reports ROC/AUC plus
// accuracy at the 0.5 threshold.
inline void run_evaluate(const std::filesystem::path& predictions_path,
                         const std::filesystem::path& truth_path,
                         const std::filesystem::path& eval_dir) {
  std::filesystem::create_directories(eval_dir);
  const auto predictions = read_predictions_csv(predictions_path);
  const auto truth = read_findings_csv(truth_path);
  std::map<std::pair<std::string, int>, ClinSig> labels;
  for (const auto& f : truth) labels[{f.subject_id, f.finding_id}] = f.clin_sig;

  std::vector<double> scores;
  std::vector<int> y;
  int unknown = 0, unmatched = 0;
  for (const auto& p : predictions) {
    auto it = labels.find({p.subject_id, p.finding_id});
    if (it == labels.end()) {
      ++unmatched;
      continue;
    }
    if (it->second == ClinSig::Unknown) {
      ++unknown;
      continue;
    }
    scores.push_back(p.probability);
    y.push_back(it->second == ClinSig::Positive ? 1 : 0);
  }
  if (scores.empty())
    throw data_error("evaluate: no labeled predictions to score (" + std::to_string(unknown) +
                     " unknown, " + std::to_string(unmatched) + " unmatched)");
  RocCurve curve = roc_auc(scores, y);
  ConfusionCounts c = confusion(scores, y, 0.5);

  nlohmann::json j;
  j["n"] = scores.size();
  j["n_unknown_skipped"] = unknown;
  j["n_unmatched_skipped"] = unmatched;
  j["auc"] = curve.auc;
  j["accuracy_at_0.5"] = accuracy(c).value_or(0.0);
  if (auto s = sensitivity(c)) j["sensitivity_at_0.5"] = *s;
  if (auto s = specificity(c)) j["specificity_at_0.5"] = *s;
  write_file_text(eval_dir / "eval.json", j.dump(2) + "\n");
  write_file_text(eval_dir / "roc_predictions.csv", roc_points_csv(curve));
  SvgSeries series;
  series.label = "predictions";
  for (const auto& p : curve.points) series.xy.push_back({p.fpr, p.sensitivity});
  write_file_text(eval_dir / "roc_predictions.svg", roc_svg("test predictions", {series}));

  StageManifest sm;
  sm.stage = "evaluate";
  sm.seed = 0;
  sm.config = nlohmann::json::object();
  sm.inputs["predictions"] = digest_file(predictions_path);
  sm.inputs["truth"] = digest_file(truth_path);
  detail::add_artifact(sm, eval_dir, "eval.json");
  detail::add_artifact(sm, eval_dir, "roc_predictions.csv");
  detail::add_artifact(sm, eval_dir, "roc_predictions.svg");
  save_stage_manifest(sm, eval_dir);
}

// ---------------------------------------------------------------------------
// stage: report (regenerates tables and figures from stored metrics)

inline void run_report(const PipelineConfig& config) {
  const std::filesystem::path out_root = config.out_dir;
  require_fresh_stage(out_root, "streams");
  const std::filesystem::path dir = out_root / "report";
  std::filesystem::create_directories(dir);

  StageManifest sm;
  sm.stage = "report";
  sm.seed = config.master_seed;
  sm.config = config.semantic_json();

  const nlohmann::json stream_metrics =
      nlohmann::json::parse(read_file_text(out_root / "streams" / "metrics_streams.json"));
  sm.inputs["metrics_streams"] = digest_file(out_root / "streams" / "metrics_streams.json");

  std::map<std::string, std::vector<StreamTableRow>> tables;
  // figure data: one chart per (family, geometry) with a curve per fold
  std::map<std::string, std::vector<SvgSeries>> figures;
  for (const auto& row : stream_metrics.at("rows")) {
    StreamTableRow r;
    r.patch_size = row.at("patch_size").get<std::string>();
    r.fold = row.at("fold").get<int>();
    r.train_accuracy = row.at("train_accuracy").get<double>();
    r.train_auc = row.at("train_auc").get<double>();
    r.val_accuracy = row.at("val_accuracy").get<double>();
    r.val_auc = row.at("val_auc").get<double>();
    if (row.contains("cf_val_accuracy")) r.cf_accuracy = row.at("cf_val_accuracy").get<double>();
    if (row.contains("cf_val_auc")) r.cf_auc = row.at("cf_val_auc").get<double>();
    const std::string family = row.at("family").get<std::string>();
    tables[family].push_back(r);
    SvgSeries series;
    series.label = "fold " + std::to_string(r.fold);
    for (const auto& p : row.at("roc"))
      series.xy.push_back({p.at(2).get<double>(), p.at(1).get<double>()});
    figures[family + "_g" + row.at("geometry").get<std::string>()].push_back(series);
  }
  if (tables.count("composite")) {
    write_file_text(dir / "table1_streams_composite.csv", stream_table_csv(tables["composite"]));
    detail::add_artifact(sm, dir, "table1_streams_composite.csv");
  }
  if (tables.count("solo")) {
    write_file_text(dir / "table2_streams_solo.csv", stream_table_csv(tables["solo"]));
    detail::add_artifact(sm, dir, "table2_streams_solo.csv");
  }
  for (const auto& [name, series] : figures) {
    const std::string file = "roc_" + name + ".svg";
    write_file_text(dir / file, roc_svg(name, series));
    detail::add_artifact(sm, dir, file);
  }

  const std::filesystem::path ensemble_metrics_path =
      out_root / "ensemble" / "metrics_ensemble.json";
  if (std::filesystem::exists(ensemble_metrics_path)) {
    require_fresh_stage(out_root, "ensemble");
    const nlohmann::json em = nlohmann::json::parse(read_file_text(ensemble_metrics_path));
    sm.inputs["metrics_ensemble"] = digest_file(ensemble_metrics_path);
    std::vector<EnsembleTableRow> rows;
    std::vector<SvgSeries> curves;
    for (const auto& row : em.at("rows")) {
      EnsembleTableRow r;
      r.input_channels = row.at("input_channels").get<std::string>();
      r.train_accuracy = row.at("train_accuracy").get<double>();
      r.train_auc = row.at("train_auc").get<double>();
      r.val_accuracy = row.at("val_accuracy").get<double>();
      r.val_auc = row.at("val_auc").get<double>();
      if (row.contains("cf_val_accuracy"))
        r.cf_accuracy = row.at("cf_val_accuracy").get<double>();
      if (row.contains("cf_val_auc")) r.cf_auc = row.at("cf_val_auc").get<double>();
      rows.push_back(r);
      SvgSeries series;
      series.label = row.at("selection").get<std::string>();
      for (const auto& p : row.at("roc"))
        series.xy.push_back({p.at(2).get<double>(), p.at(1).get<double>()});
      curves.push_back(series);
    }
    write_file_text(dir / "table3_ensembles.csv", ensemble_table_csv(rows));
    write_file_text(dir / "roc_ensembles.svg", roc_svg("stacked ensembles", curves));
    detail::add_artifact(sm, dir, "table3_ensembles.csv");
    detail::add_artifact(sm, dir, "roc_ensembles.svg");
  }
  save_stage_manifest(sm, dir);
}

}  // namespace densestream
