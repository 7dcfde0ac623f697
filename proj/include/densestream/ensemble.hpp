#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/trainer.hpp"

// Second-level stacked generalization: the per-fold stream models are loaded
// read-only, their probabilities for a finding are concatenated in a fixed
// order (family-major, geometry-major, fold-minor), and a two-layer
// fully-connected meta-network maps that vector to the final probability.
// Base checkpoints are digest-checked before and after meta-training.

namespace densestream {

enum class EnsembleFamily { Composite, Solo, Quadruple };

inline const char* ensemble_family_name(EnsembleFamily f) {
  switch (f) {
    case EnsembleFamily::Composite: return "composite";
    case EnsembleFamily::Solo: return "solo";
    case EnsembleFamily::Quadruple: return "quadruple";
  }
  throw data_error("invalid ensemble family");
}

inline EnsembleFamily ensemble_family_from_name(const std::string& s) {
  if (s == "composite") return EnsembleFamily::Composite;
  if (s == "solo") return EnsembleFamily::Solo;
  if (s == "quadruple") return EnsembleFamily::Quadruple;
  throw data_error("unknown ensemble family '" + s + "'");
}

inline const char* ensemble_channel_label(EnsembleFamily f) {
  switch (f) {
    case EnsembleFamily::Composite: return "t2w+adc+dwi";
    case EnsembleFamily::Solo: return "ktrans";
    case EnsembleFamily::Quadruple: return "t2w+adc+dwi+ktrans";
  }
  throw data_error("invalid ensemble family");
}

inline std::vector<Family> ensemble_base_families(EnsembleFamily f) {
  switch (f) {
    case EnsembleFamily::Composite: return {Family::Composite};
    case EnsembleFamily::Solo: return {Family::Solo};
    case EnsembleFamily::Quadruple: return {Family::Composite, Family::Solo};
  }
  throw data_error("invalid ensemble family");
}

// content digest over a checkpoint's manifest + blob
inline std::string checkpoint_digest(const std::filesystem::path& base) {
  std::filesystem::path j = base, b = base;
  j += ".json";
  b += ".bin";
  auto jb = read_file_bytes(j);
  auto bb = read_file_bytes(b);
  std::uint64_t h = fnv1a64(jb.data(), jb.size());
  h = fnv1a64(bb.data(), bb.size(), h);
  return to_hex(h);
}

struct BaseStreamRef {
  StreamKey key;
  std::string checkpoint_base;  // relative to the streams directory
  std::string digest;
};

inline constexpr int kMetaHiddenWidth = 16;

template <typename T>
struct EnsembleModel {
  EnsembleFamily selection = EnsembleFamily::Quadruple;
  PatchSpec patch_spec;
  int folds = 5;
  std::vector<BaseStreamRef> base_refs;
  std::vector<StreamModel<T>> base_models;  // frozen; never touched by the optimizer
  FcUnit<T> fc1, fc2;

  int input_width() const { return static_cast<int>(base_refs.size()); }

  std::vector<Parameter<T>*> meta_parameters() {
    return {&fc1.weight, &fc1.bias, &fc2.weight, &fc2.bias};
  }
};

// Fixed base ordering: for each selected family, geometries ascending, folds
// ascending. A single family yields k*4 inputs (20 at the default five folds).
template <typename T>
EnsembleModel<T> make_ensemble(EnsembleFamily selection, const std::filesystem::path& streams_dir,
                               const PatchSpec& patch_spec, int folds, std::uint64_t seed) {
  EnsembleModel<T> model;
  model.selection = selection;
  model.patch_spec = patch_spec;
  model.folds = folds;
  for (Family family : ensemble_base_families(selection))
    for (int gi = 0; gi < 4; ++gi)
      for (int fold = 0; fold < folds; ++fold) {
        BaseStreamRef ref;
        ref.key = {family, gi, fold};
        ref.checkpoint_base = "stream_" + ref.key.name(patch_spec);
        const std::filesystem::path base = streams_dir / ref.checkpoint_base;
        std::filesystem::path probe = base;
        probe += ".json";
        if (!std::filesystem::exists(probe))
          throw data_error("missing stream checkpoint for (" +
                           std::string(family_name(family)) + ", geometry " +
                           patch_spec.geometries[static_cast<std::size_t>(gi)].name() +
                           ", fold " + std::to_string(fold) + "): " + probe.string());
        ref.digest = checkpoint_digest(base);
        model.base_models.push_back(load_checkpoint<T>(base));
        model.base_refs.push_back(std::move(ref));
      }

  Rng rng(derive_seed(seed, "ensemble/" + std::string(ensemble_family_name(selection))));
  model.fc1 = detail::make_fc<T>("meta.fc1", model.input_width(), kMetaHiddenWidth, rng);
  model.fc2 = detail::make_fc<T>("meta.fc2", kMetaHiddenWidth, 1, rng);
  return model;
}

// ---------------------------------------------------------------------------
// meta features

// Probabilities of every base stream for one co-centered patch set,
// concatenated in the serialized base order.
template <typename T>
std::vector<T> meta_features(EnsembleModel<T>& model, const PatchSet& set) {
  ad::NoGradGuard guard;
  std::vector<T> features;
  features.reserve(model.base_refs.size());
  for (std::size_t i = 0; i < model.base_refs.size(); ++i) {
    const StreamKey& key = model.base_refs[i].key;
    const PatchTensor& patch =
        set.family(key.family)[static_cast<std::size_t>(key.geometry_index)];
    Shape shape = Shape::of({1, patch.channels, patch.geom.d, patch.geom.h, patch.geom.w});
    std::vector<T> data(patch.data.begin(), patch.data.end());
    Tensor<T> batch = Tensor<T>::from(shape, std::move(data));
    features.push_back(model.base_models[i].forward(batch, Mode::Eval).values()[0]);
  }
  return features;
}

// Feature matrix [n_examples x width] for archive records, one batched eval
// pass per base stream.
template <typename T>
std::vector<double> meta_feature_matrix(EnsembleModel<T>& model,
                                        const std::map<std::string, PatchArchive>& archives,
                                        const std::vector<std::pair<std::string, std::size_t>>&
                                            example_records) {
  ad::NoGradGuard guard;
  const std::size_t n = example_records.size();
  const std::size_t width = model.base_refs.size();
  std::vector<double> matrix(n * width);
  constexpr std::size_t kEvalBatch = 128;
  for (std::size_t s = 0; s < width; ++s) {
    const StreamKey& key = model.base_refs[s].key;
    const PatchGeometry geom =
        model.patch_spec.geometries[static_cast<std::size_t>(key.geometry_index)];
    const int channels = family_channels(key.family);
    const std::size_t patch_floats = PatchArchive::patch_floats(geom, key.family);
    for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
      const std::size_t end = std::min(n, begin + kEvalBatch);
      const int b = static_cast<int>(end - begin);
      Shape shape = Shape::of({b, channels, geom.d, geom.h, geom.w});
      std::vector<T> data(shape.numel());
      for (std::size_t i = begin; i < end; ++i) {
        const auto& [subject, record] = example_records[i];
        const PatchArchive& a = archives.at(subject);
        const float* src = a.patch_data(record, key.family, key.geometry_index);
        T* dst = data.data() + (i - begin) * patch_floats;
        for (std::size_t j = 0; j < patch_floats; ++j) dst[j] = static_cast<T>(src[j]);
      }
      Tensor<T> batch = Tensor<T>::from(shape, std::move(data));
      Tensor<T> probs = model.base_models[s].forward(batch, Mode::Eval);
      for (std::size_t i = begin; i < end; ++i)
        matrix[i * width + s] = static_cast<double>(probs.values()[i - begin]);
    }
  }
  return matrix;
}

// meta-network forward on a feature matrix slice
template <typename T>
Tensor<T> meta_forward(EnsembleModel<T>& model, const std::vector<double>& matrix,
                       const std::vector<std::size_t>& rows, std::size_t begin, std::size_t end) {
  const int width = model.input_width();
  Shape shape = Shape::of({static_cast<int>(end - begin), width});
  std::vector<T> data(shape.numel());
  for (std::size_t i = begin; i < end; ++i)
    for (int f = 0; f < width; ++f)
      data[(i - begin) * static_cast<std::size_t>(width) + static_cast<std::size_t>(f)] =
          static_cast<T>(matrix[rows[i] * static_cast<std::size_t>(width) +
                                static_cast<std::size_t>(f)]);
  Tensor<T> x = Tensor<T>::from(shape, std::move(data));
  Tensor<T> h = relu(fully_connected(x, model.fc1.weight.value, model.fc1.bias.value));
  return fully_connected(h, model.fc2.weight.value, model.fc2.bias.value);  // logits
}

struct EnsembleOutcome {
  EnsembleTableRow row;
  RocCurve val_roc;
  TrainHistory history;
  std::size_t n_train = 0, n_val = 0;
  double best_stream_val_auc = 0.0;  // best single base stream on the same meta-val split
};

// Meta-training on finding-centered labeled records. The records are split
// 80/20 at subject level (stratified); only the two fully connected layers
// update. Any change to a base checkpoint file is a hard failure.
template <typename T>
EnsembleOutcome train_ensemble(EnsembleModel<T>& model,
                               const std::map<std::string, PatchArchive>& archives,
                               const std::filesystem::path& streams_dir,
                               const FocalParams& loss_params, TrainConfig config,
                               std::uint64_t seed) {
  loss_params.validate();
  config.validate();

  std::vector<std::string> digests_before;
  for (const auto& ref : model.base_refs)
    digests_before.push_back(checkpoint_digest(streams_dir / ref.checkpoint_base));

  // finding-centered labeled examples, subject-major order
  std::vector<std::pair<std::string, std::size_t>> examples;
  std::vector<int> labels;
  std::vector<SubjectStratum> strata;
  for (const auto& [subject, archive] : archives) {
    if (archive.cohort != Cohort::Train) continue;
    bool any_positive = false;
    bool any_example = false;
    for (std::size_t r = 0; r < archive.records.size(); ++r) {
      const auto& rec = archive.records[r];
      if (rec.provenance != Provenance::FindingCentered || rec.label == ClinSig::Unknown)
        continue;
      examples.push_back({subject, r});
      labels.push_back(rec.label == ClinSig::Positive ? 1 : -1);
      any_positive = any_positive || rec.label == ClinSig::Positive;
      any_example = true;
    }
    if (any_example) strata.push_back({subject, any_positive});
  }
  if (examples.empty()) throw data_error("train_ensemble: no labeled finding-centered patches");

  // 80/20 subject-level meta split (fold 0 of a seeded 5-fold as holdout);
  // small cohorts fall back to the widest split that still has k >= 2
  const int meta_k = std::max(2, std::min(5, static_cast<int>(strata.size()) / 2));
  const auto meta_folds = make_folds(strata, meta_k, derive_seed(seed, "meta_split"));
  const std::set<std::string> val_subjects(meta_folds[0].val_subjects.begin(),
                                           meta_folds[0].val_subjects.end());
  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t i = 0; i < examples.size(); ++i)
    (val_subjects.count(examples[i].first) ? val_rows : train_rows).push_back(i);
  if (train_rows.empty() || val_rows.empty())
    throw data_error("train_ensemble: meta split produced an empty side");

  const std::vector<double> matrix = meta_feature_matrix(model, archives, examples);
  const std::size_t width = model.base_refs.size();

  auto rows_labels = [&](const std::vector<std::size_t>& rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(labels[r]);
    return out;
  };
  auto val_labels = rows_labels(val_rows);
  {
    bool pos = false, neg = false;
    for (int y : val_labels) (y > 0 ? pos : neg) = true;
    if (!pos || !neg)
      throw data_error("train_ensemble: meta validation split has a single class");
  }

  auto val_loss = [&] {
    ad::NoGradGuard guard;
    Tensor<T> logits = meta_forward(model, matrix, val_rows, 0, val_rows.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < val_rows.size(); ++i)
      acc += focal_loss(static_cast<double>(logits.values()[i]), val_labels[i], loss_params);
    return acc / static_cast<double>(val_rows.size());
  };

  auto params = model.meta_parameters();
  EarlyStopper stopper(config.patience);
  std::vector<std::vector<T>> best;
  TrainHistory history;
  std::vector<std::size_t> order = train_rows;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "meta_shuffle/" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      Tensor<T> logits = meta_forward(model, matrix, order, begin, end);
      std::vector<int> batch_labels;
      for (std::size_t i = begin; i < end; ++i) batch_labels.push_back(labels[order[i]]);
      Tensor<T> loss = focal_loss_mean(logits, batch_labels, loss_params);
      backward(loss);
      sgd_nesterov_step(params, config);
      for (auto* p : params) p->value.zero_grad();
      epoch_loss += static_cast<double>(loss.values()[0]) * static_cast<double>(end - begin);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    const double vl = val_loss();
    history.val_loss.push_back(vl);
    history.epochs_ran = epoch;
    const bool improved = vl < stopper.best;
    const bool stop = stopper.observe(epoch, vl);
    if (improved) {
      best.clear();
      for (auto* p : params) best.push_back(p->value.values());
    }
    if (stop) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value.values() = best[i];
  history.best_epoch = stopper.best_epoch;
  history.best_val_loss = stopper.best;

  // freeze invariant: base checkpoints must be byte-identical
  for (std::size_t i = 0; i < model.base_refs.size(); ++i) {
    const std::string after = checkpoint_digest(streams_dir / model.base_refs[i].checkpoint_base);
    if (after != digests_before[i])
      throw numeric_error("freeze violation: base checkpoint " +
                          model.base_refs[i].checkpoint_base + " changed during meta-training");
    model.base_refs[i].digest = after;
  }

  // table row + ROC on the meta split (validation set is finding-centered by
  // construction, so the clinical-findings columns coincide with validation)
  EnsembleOutcome out;
  out.history = history;
  out.n_train = train_rows.size();
  out.n_val = val_rows.size();
  auto scores_for = [&](const std::vector<std::size_t>& rows) {
    ad::NoGradGuard guard;
    Tensor<T> logits = meta_forward(model, matrix, rows, 0, rows.size());
    std::vector<double> scores;
    for (std::size_t i = 0; i < rows.size(); ++i)
      scores.push_back(sigmoid_scalar(static_cast<double>(logits.values()[i])));
    return scores;
  };
  const auto train_scores = scores_for(train_rows);
  const auto val_scores = scores_for(val_rows);
  std::vector<int> train01, val01;
  for (std::size_t r : train_rows) train01.push_back(labels[r] > 0);
  for (std::size_t r : val_rows) val01.push_back(labels[r] > 0);
  out.row.input_channels = ensemble_channel_label(model.selection);
  out.row.train_accuracy = accuracy(confusion(train_scores, train01, 0.5)).value_or(0.0);
  out.row.train_auc = roc_auc(train_scores, train01).auc;
  out.row.val_accuracy = accuracy(confusion(val_scores, val01, 0.5)).value_or(0.0);
  out.val_roc = roc_auc(val_scores, val01);
  out.row.val_auc = out.val_roc.auc;
  out.row.cf_accuracy = out.row.val_accuracy;
  out.row.cf_auc = out.row.val_auc;

  // strongest single base stream on the identical meta-val rows, for the
  // ensemble-vs-stream comparison
  for (std::size_t s = 0; s < width; ++s) {
    std::vector<double> stream_scores;
    for (std::size_t r : val_rows) stream_scores.push_back(matrix[r * width + s]);
    out.best_stream_val_auc =
        std::max(out.best_stream_val_auc, roc_auc(stream_scores, val01).auc);
  }
  return out;
}

// Extracts the co-centered patch set at a finding and applies the frozen
// streams + meta-network. The study must already be preprocessed and
// standardized with the frozen training statistics.
template <typename T>
double predict_finding(EnsembleModel<T>& model, const Study& study, const Finding& finding) {
  CenterSample sample;
  sample.center = align_modalities(study, finding);
  sample.provenance = Provenance::FindingCentered;
  sample.finding_id = finding.finding_id;
  const PatchSet set = extract_patch_set(study, sample, model.patch_spec);

  ad::NoGradGuard guard;
  std::vector<T> features = meta_features(model, set);
  Shape shape = Shape::of({1, model.input_width()});
  Tensor<T> x = Tensor<T>::from(shape, std::move(features));
  Tensor<T> h = relu(fully_connected(x, model.fc1.weight.value, model.fc1.bias.value));
  Tensor<T> logit = fully_connected(h, model.fc2.weight.value, model.fc2.bias.value);
  return sigmoid_scalar(static_cast<double>(logit.values()[0]));
}

// ---------------------------------------------------------------------------
// ensemble checkpoint: manifest (family set, ordered base digests, meta
// shapes) + f32le blob of the meta parameters

inline constexpr int kEnsembleFormatVersion = 1;

template <typename T>
void save_ensemble(EnsembleModel<T>& model, const std::filesystem::path& base) {
  nlohmann::json j;
  j["format_version"] = kEnsembleFormatVersion;
  j["selection"] = ensemble_family_name(model.selection);
  j["folds"] = model.folds;
  j["geometries"] = nlohmann::json::array();
  for (const auto& g : model.patch_spec.geometries) j["geometries"].push_back({g.h, g.w, g.d});
  j["patches_per_study"] = model.patch_spec.patches_per_study;
  j["finding_boost"] = model.patch_spec.finding_boost;
  j["r_pos_mm"] = model.patch_spec.r_pos_mm;
  j["base"] = nlohmann::json::array();
  for (const auto& ref : model.base_refs) {
    nlohmann::json e;
    e["family"] = family_name(ref.key.family);
    e["geometry"] =
        model.patch_spec.geometries[static_cast<std::size_t>(ref.key.geometry_index)].name();
    e["fold"] = ref.key.fold;
    e["checkpoint"] = ref.checkpoint_base;
    e["digest"] = ref.digest;
    j["base"].push_back(std::move(e));
  }
  std::vector<float> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (auto* p : model.meta_parameters()) {
    nlohmann::json t;
    t["name"] = p->name;
    t["shape"] = nlohmann::json::array();
    for (int i = 0; i < p->value.shape().rank; ++i) t["shape"].push_back(p->value.shape()[i]);
    t["offset"] = blob.size();
    tensors.push_back(std::move(t));
    for (const auto v : p->value.values()) blob.push_back(static_cast<float>(v));
  }
  j["meta_tensors"] = std::move(tensors);
  std::filesystem::path jp = base;
  jp += ".json";
  write_file_text(jp, j.dump(2) + "\n");
  std::filesystem::path bp = base;
  bp += ".bin";
  write_f32le(bp, blob);
}

// Loading re-resolves every base checkpoint by name and fails loudly if the
// recorded ordering or any digest does not match what is on disk.
template <typename T>
EnsembleModel<T> load_ensemble(const std::filesystem::path& base,
                               const std::filesystem::path& streams_dir) {
  std::filesystem::path jp = base;
  jp += ".json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(jp));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad ensemble manifest " + jp.string() + ": " + e.what());
  }
  EnsembleModel<T> model;
  try {
    if (j.at("format_version").get<int>() != kEnsembleFormatVersion)
      throw data_error("unsupported ensemble format version in " + jp.string());
    model.selection = ensemble_family_from_name(j.at("selection").get<std::string>());
    model.folds = j.at("folds").get<int>();
    const auto& gs = j.at("geometries");
    for (int gi = 0; gi < 4; ++gi)
      model.patch_spec.geometries[static_cast<std::size_t>(gi)] = {
          gs.at(gi).at(0).get<int>(), gs.at(gi).at(1).get<int>(), gs.at(gi).at(2).get<int>()};
    model.patch_spec.patches_per_study = j.at("patches_per_study").get<int>();
    model.patch_spec.finding_boost = j.at("finding_boost").get<double>();
    model.patch_spec.r_pos_mm = j.at("r_pos_mm").get<double>();

    // expected order must match the serialized order exactly
    std::size_t i = 0;
    for (Family family : ensemble_base_families(model.selection))
      for (int gi = 0; gi < 4; ++gi)
        for (int fold = 0; fold < model.folds; ++fold, ++i) {
          const auto& e = j.at("base").at(i);
          BaseStreamRef ref;
          ref.key = {family, gi, fold};
          if (e.at("family").get<std::string>() != family_name(family) ||
              e.at("geometry").get<std::string>() !=
                  model.patch_spec.geometries[static_cast<std::size_t>(gi)].name() ||
              e.at("fold").get<int>() != fold)
            throw data_error("ensemble manifest " + jp.string() +
                             ": base ordering mismatch at index " + std::to_string(i));
          ref.checkpoint_base = e.at("checkpoint").get<std::string>();
          ref.digest = e.at("digest").get<std::string>();
          const std::string on_disk = checkpoint_digest(streams_dir / ref.checkpoint_base);
          if (on_disk != ref.digest)
            throw data_error("ensemble manifest " + jp.string() + ": base checkpoint " +
                             ref.checkpoint_base + " digest mismatch (expected " + ref.digest +
                             ", found " + on_disk + ")");
          model.base_models.push_back(load_checkpoint<T>(streams_dir / ref.checkpoint_base));
          model.base_refs.push_back(std::move(ref));
        }
    if (j.at("base").size() != i)
      throw data_error("ensemble manifest " + jp.string() + ": unexpected extra base entries");
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad ensemble manifest " + jp.string() + ": " + e.what());
  }

  std::filesystem::path bp = base;
  bp += ".bin";
  const std::vector<float> blob = read_f32le(bp);
  Rng rng(0);
  model.fc1 = detail::make_fc<T>("meta.fc1", model.input_width(), kMetaHiddenWidth, rng);
  model.fc2 = detail::make_fc<T>("meta.fc2", kMetaHiddenWidth, 1, rng);
  std::map<std::string, std::pair<Shape, std::size_t>> index;
  try {
    for (const auto& t : j.at("meta_tensors")) {
      Shape shape;
      for (const auto& d : t.at("shape"))
        shape.d[static_cast<std::size_t>(shape.rank++)] = d.get<int>();
      index[t.at("name").get<std::string>()] = {shape, t.at("offset").get<std::size_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad ensemble manifest " + jp.string() + ": " + e.what());
  }
  for (auto* p : model.meta_parameters()) {
    auto it = index.find(p->name);
    if (it == index.end())
      throw data_error("ensemble checkpoint missing tensor '" + p->name + "'");
    if (!(it->second.first == p->value.shape()))
      throw data_error("ensemble tensor '" + p->name + "' shape mismatch");
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      p->value.values()[i] = static_cast<T>(blob[it->second.second + i]);
  }
  return model;
}

}  // namespace densestream
