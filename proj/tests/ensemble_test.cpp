#include "densestream/ensemble.hpp"

#include <gtest/gtest.h>

#include "densestream/phantom.hpp"
#include "densestream/pipeline.hpp"
#include "support/tempdir.hpp"

using namespace densestream;

namespace {

// One small trained stream bank shared by all tests in this file: 8 subjects,
// 2 folds, tiny stream configs.
struct Bank {
  TempDir dir;
  PatchSpec patch_spec;
  TrainConfig train_config;
  FocalParams focal;
  std::map<std::string, PatchArchive> archives;
  std::vector<FoldSplit> folds;
  std::filesystem::path streams_dir;
  PhantomSpec phantom_spec;

  Bank() : dir("densestream-ensemble") {
    phantom_spec.n_subjects = 8;
    phantom_spec.min_lesions = 1;
    phantom_spec.max_lesions = 1;
    phantom_spec.positive_fraction = 0.5;
    phantom_spec.grid = GridSpec{0.5, 3.0, 128};
    phantom_spec.acquisition = {{
        {6, 144, 144, 3.0, 0.5},
        {6, 37, 37, 3.0, 2.0},
        {6, 37, 37, 3.0, 2.0},
        {11, 49, 49, 1.5, 1.5},
    }};
    phantom_spec.master_seed = 77;

    patch_spec.patches_per_study = 6;
    train_config.learning_rate = 5e-3;
    train_config.max_epochs = 2;
    train_config.patience = 1;
    train_config.batch_size = 16;
    train_config.folds = 2;

    auto cohort = generate_cohort(phantom_spec);
    std::vector<Study> unified;
    for (const auto& s : cohort) unified.push_back(unify_study(s, phantom_spec.grid));
    StatsTable stats = fit_all_stats(unified);
    for (const auto& s : unified) {
      Study std_s = standardize_study(s, stats);
      archives.emplace(s.subject_id,
                       extract_study_patches(std_s, patch_spec, derive_seed(77, s.subject_id)));
    }
    folds = make_folds(strata_from_archives(archives), 2, 99);

    StreamBankRequest req;
    req.patch_spec = patch_spec;
    for (int gi = 0; gi < 4; ++gi) {
      for (Family fam : {Family::Composite, Family::Solo}) {
        StreamConfig c = make_stream_config(patch_spec.geometries[static_cast<std::size_t>(gi)],
                                            fam, 2, 1);
        c.head_width = 8;
        c.dropout = 0.1;
        (fam == Family::Composite ? req.composite_configs : req.solo_configs)[gi] = c;
      }
    }
    req.train_config = train_config;
    req.loss_params = focal;
    req.master_seed = 31;
    req.workers = 2;
    streams_dir = dir / "streams";
    run_all_streams(archives, folds, req, streams_dir);
  }
};

Bank& bank() {
  static Bank* instance = new Bank();
  return *instance;
}

TEST(Ensemble, SingleFamilyInputWidthIsGeometriesTimesFolds) {
  auto model = make_ensemble<float>(EnsembleFamily::Composite, bank().streams_dir,
                                    bank().patch_spec, 2, 5);
  EXPECT_EQ(model.input_width(), 4 * 2);
  auto solo = make_ensemble<float>(EnsembleFamily::Solo, bank().streams_dir, bank().patch_spec,
                                   2, 5);
  EXPECT_EQ(solo.input_width(), 4 * 2);
}

TEST(Ensemble, QuadrupleFamilyDoublesWidthCompositeBankFirst) {
  auto model = make_ensemble<float>(EnsembleFamily::Quadruple, bank().streams_dir,
                                    bank().patch_spec, 2, 5);
  EXPECT_EQ(model.input_width(), 2 * 4 * 2);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(model.base_refs[static_cast<std::size_t>(i)].key.family,
                                        Family::Composite);
  for (int i = 8; i < 16; ++i) EXPECT_EQ(model.base_refs[static_cast<std::size_t>(i)].key.family,
                                         Family::Solo);
}

TEST(Ensemble, MissingCheckpointNamesStream) {
  TempDir empty("densestream-nostreams");
  try {
    make_ensemble<float>(EnsembleFamily::Solo, empty.path, bank().patch_spec, 2, 5);
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("solo"), std::string::npos) << msg;
    EXPECT_NE(msg.find("fold 0"), std::string::npos) << msg;
  }
}

TEST(Ensemble, MetaFeaturesAreProbabilitiesInFixedOrder) {
  auto model = make_ensemble<float>(EnsembleFamily::Quadruple, bank().streams_dir,
                                    bank().patch_spec, 2, 5);
  const PatchArchive& a = bank().archives.begin()->second;
  // rebuild a PatchSet view from the stored record
  PatchSet set;
  for (int gi = 0; gi < 4; ++gi) {
    for (Family fam : {Family::Composite, Family::Solo}) {
      PatchTensor t;
      t.geom = bank().patch_spec.geometries[static_cast<std::size_t>(gi)];
      t.channels = family_channels(fam);
      const float* src = a.patch_data(0, fam, gi);
      t.data.assign(src, src + PatchArchive::patch_floats(t.geom, fam));
      (fam == Family::Composite ? set.composite : set.solo)[static_cast<std::size_t>(gi)] = t;
    }
  }
  auto features = meta_features(model, set);
  ASSERT_EQ(features.size(), 16u);
  for (float f : features) {
    EXPECT_GT(f, 0.0f);
    EXPECT_LT(f, 1.0f);
  }
}

TEST(Ensemble, TrainingLeavesBaseCheckpointsUntouched) {
  auto model = make_ensemble<float>(EnsembleFamily::Composite, bank().streams_dir,
                                    bank().patch_spec, 2, 7);
  std::vector<std::string> before;
  for (const auto& ref : model.base_refs)
    before.push_back(checkpoint_digest(bank().streams_dir / ref.checkpoint_base));
  TrainConfig meta_cfg = bank().train_config;
  meta_cfg.max_epochs = 50;
  meta_cfg.patience = 10;
  meta_cfg.learning_rate = 0.05;
  EnsembleOutcome out = train_ensemble(model, bank().archives, bank().streams_dir, bank().focal,
                                       meta_cfg, 11);
  for (std::size_t i = 0; i < model.base_refs.size(); ++i)
    EXPECT_EQ(checkpoint_digest(bank().streams_dir / model.base_refs[i].checkpoint_base),
              before[i]);
  EXPECT_GT(out.row.val_auc, 0.0);
  EXPECT_LE(out.row.val_auc, 1.0);
  EXPECT_EQ(out.row.input_channels, "t2w+adc+dwi");
}

TEST(Ensemble, CheckpointRoundTripAndOrderValidation) {
  auto model = make_ensemble<float>(EnsembleFamily::Quadruple, bank().streams_dir,
                                    bank().patch_spec, 2, 13);
  TrainConfig meta_cfg = bank().train_config;
  meta_cfg.max_epochs = 10;
  meta_cfg.patience = 3;
  meta_cfg.learning_rate = 0.05;
  train_ensemble(model, bank().archives, bank().streams_dir, bank().focal, meta_cfg, 17);
  const auto base = bank().dir / "ens_quadruple";
  save_ensemble(model, base);
  auto loaded = load_ensemble<float>(base, bank().streams_dir);
  EXPECT_EQ(loaded.input_width(), model.input_width());
  EXPECT_EQ(loaded.fc1.weight.value.values(), model.fc1.weight.value.values());
  EXPECT_EQ(loaded.fc2.bias.value.values(), model.fc2.bias.value.values());

  // tamper with the recorded ordering -> loud failure
  nlohmann::json j = nlohmann::json::parse(read_file_text(bank().dir / "ens_quadruple.json"));
  std::swap(j["base"][0], j["base"][1]);
  write_file_text(bank().dir / "ens_quadruple.json", j.dump());
  EXPECT_THROW(load_ensemble<float>(base, bank().streams_dir), data_error);
}

TEST(Ensemble, PredictFindingDeterministicAndPlumbable) {
  auto model = make_ensemble<float>(EnsembleFamily::Quadruple, bank().streams_dir,
                                    bank().patch_spec, 2, 19);
  TrainConfig meta_cfg = bank().train_config;
  meta_cfg.max_epochs = 10;
  meta_cfg.patience = 3;
  train_ensemble(model, bank().archives, bank().streams_dir, bank().focal, meta_cfg, 23);

  // a fresh preprocessed + standardized study
  PhantomSpec test_spec = bank().phantom_spec;
  test_spec.master_seed = 555;
  test_spec.n_subjects = 2;
  auto cohort = generate_cohort(test_spec);
  std::vector<Study> unified;
  for (const auto& s : cohort) unified.push_back(unify_study(s, test_spec.grid));
  StatsTable stats = fit_all_stats(unified);
  Study study = standardize_study(unified[0], stats);

  const Finding& finding = study.findings[0];
  const double a = predict_finding(model, study, finding);
  const double b = predict_finding(model, study, finding);
  EXPECT_EQ(a, b);
  EXPECT_GT(a, 0.0);
  EXPECT_LT(a, 1.0);

  TempDir out("densestream-pred");
  write_predictions_csv({{study.subject_id, finding.finding_id, a}}, out / "p.csv");
  auto rows = read_predictions_csv(out / "p.csv");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].probability, a, 5e-7);  // 6-decimal wire format

  // a finding pushed to the volume edge cannot retain the envelope
  Finding edge = finding;
  edge.world_pos = study.volume(Modality::T2w).origin;
  EXPECT_THROW(predict_finding(model, study, edge), data_error);
}

}  // namespace
