#pragma once

#include <atomic>
#include <map>
#include <optional>
#include <set>
#include <thread>
#include <vector>

#include <json.hpp>

#include "densestream/densenet.hpp"
#include "densestream/focal_loss.hpp"
#include "densestream/metrics.hpp"
#include "densestream/patches.hpp"

// Cross-validation splitting, the Nesterov-momentum optimizer, the per-stream
// training loop, and the 4-geometry x 5-fold x 2-family runner.

namespace densestream {

struct TrainConfig {
  double learning_rate = 2e-4;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int max_epochs = 200;
  int batch_size = 72;
  int patience = 20;  // epochs of no validation improvement before stopping
  int folds = 5;

  void validate() const {
    if (!(learning_rate >= 0.0) || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0)
      throw data_error("train config: bad optimizer parameters");
    if (max_epochs < 1 || batch_size < 1 || folds < 2)
      throw data_error("train config: epochs/batch/folds out of range");
    if (patience < 1 || patience >= max_epochs)
      throw data_error("train config: patience must lie in [1, max_epochs)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["max_epochs"] = c.max_epochs;
  j["batch_size"] = c.batch_size;
  j["patience"] = c.patience;
  j["folds"] = c.folds;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.folds = j.value("folds", c.folds);
}

// ---------------------------------------------------------------------------
// stratified subject-level folds

struct SubjectStratum {
  std::string subject_id;
  bool positive_bearing = false;  // has at least one clinically significant finding
};

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
};

// Subjects are the folding unit so no prostate can appear on both sides of a
// fold. Strata (positive-bearing vs not) are dealt round-robin after a seeded
// shuffle; the deal index carries across strata to keep fold sizes even.
inline std::vector<FoldSplit> make_folds(std::vector<SubjectStratum> subjects, int k,
                                         std::uint64_t seed) {
  if (k < 2) throw data_error("make_folds: need k >= 2");
  if (static_cast<int>(subjects.size()) < k)
    throw data_error("make_folds: fewer subjects (" + std::to_string(subjects.size()) +
                     ") than folds (" + std::to_string(k) + ")");
  std::sort(subjects.begin(), subjects.end(),
            [](const SubjectStratum& a, const SubjectStratum& b) {
              return a.subject_id < b.subject_id;
            });
  std::vector<std::string> positives, negatives;
  for (const auto& s : subjects)
    (s.positive_bearing ? positives : negatives).push_back(s.subject_id);
  Rng rng(seed);
  rng.shuffle(positives);
  rng.shuffle(negatives);

  std::vector<std::vector<std::string>> val_sets(static_cast<std::size_t>(k));
  int deal = 0;
  for (const auto& id : positives) val_sets[static_cast<std::size_t>(deal++ % k)].push_back(id);
  for (const auto& id : negatives) val_sets[static_cast<std::size_t>(deal++ % k)].push_back(id);

  std::vector<FoldSplit> folds;
  for (int f = 0; f < k; ++f) {
    FoldSplit split;
    split.fold_index = f;
    split.val_subjects = val_sets[static_cast<std::size_t>(f)];
    for (int other = 0; other < k; ++other)
      if (other != f)
        split.train_subjects.insert(split.train_subjects.end(),
                                    val_sets[static_cast<std::size_t>(other)].begin(),
                                    val_sets[static_cast<std::size_t>(other)].end());
    std::sort(split.train_subjects.begin(), split.train_subjects.end());
    std::sort(split.val_subjects.begin(), split.val_subjects.end());
    folds.push_back(std::move(split));
  }
  return folds;
}

inline std::vector<SubjectStratum> strata_from_studies(const std::vector<Study>& studies) {
  std::vector<SubjectStratum> out;
  for (const auto& s : studies) {
    if (s.cohort != Cohort::Train) continue;
    bool positive = false;
    for (const auto& f : s.findings) positive = positive || f.clin_sig == ClinSig::Positive;
    out.push_back({s.subject_id, positive});
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimizer

// SGD with Nesterov momentum and coupled L2 decay:
//   g_eff = g + lambda * w
//   v     = mu * v - lr * g_eff
//   w    += mu * v - lr * g_eff
template <typename T>
void sgd_nesterov_step(const std::vector<Parameter<T>*>& params, const TrainConfig& config) {
  const T lr = static_cast<T>(config.learning_rate);
  const T mu = static_cast<T>(config.momentum);
  const T lambda = static_cast<T>(config.weight_decay);
  for (auto* p : params) {
    const auto& grad = p->value.grad_view();
    if (grad.size() != p->value.numel())
      throw numeric_error("optimizer: missing gradient for parameter '" + p->name + "'");
    auto& w = p->value.values();
    auto& v = p->momentum;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T g = grad[i] + lambda * w[i];
      v[i] = mu * v[i] - lr * g;
      w[i] += mu * v[i] - lr * g;
    }
  }
}

// ---------------------------------------------------------------------------
// early stopping

// Improvement means strictly smaller validation loss; after `patience`
// consecutive non-improving epochs the run stops and the best checkpoint is
// restored.
struct EarlyStopper {
  int patience;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int since_best = 0;

  explicit EarlyStopper(int patience_epochs) : patience(patience_epochs) {}

  // returns true when training should stop after this epoch
  bool observe(int epoch, double val_loss) {
    if (val_loss < best) {
      best = val_loss;
      best_epoch = epoch;
      since_best = 0;
      return false;
    }
    return ++since_best >= patience;
  }
};

// ---------------------------------------------------------------------------
// patch datasets (one channel family + geometry slice of the archives)

struct PatchDataset {
  PatchGeometry geom;
  int channels = 0;
  std::size_t patch_floats = 0;
  std::vector<float> data;  // n x patch_floats
  std::vector<int> labels;  // +1 / -1
  std::vector<Provenance> provenance;
  std::vector<std::string> subjects;

  std::size_t size() const { return labels.size(); }

  bool has_both_classes() const {
    bool pos = false, neg = false;
    for (int y : labels) (y > 0 ? pos : neg) = true;
    return pos && neg;
  }
};

// Gathers the labeled records of the given subjects. Unknown-labeled patches
// are rejected here: they belong to prediction, never to training folds.
inline PatchDataset dataset_from_archives(const std::map<std::string, PatchArchive>& archives,
                                          const std::vector<std::string>& subject_ids,
                                          Family family, int geometry_index) {
  PatchDataset ds;
  bool first = true;
  for (const auto& id : subject_ids) {
    auto it = archives.find(id);
    if (it == archives.end()) throw data_error("no patch archive for subject '" + id + "'");
    const PatchArchive& a = it->second;
    if (first) {
      ds.geom = a.spec.geometries[static_cast<std::size_t>(geometry_index)];
      ds.channels = family_channels(family);
      ds.patch_floats = PatchArchive::patch_floats(ds.geom, family);
      first = false;
    }
    for (std::size_t r = 0; r < a.records.size(); ++r) {
      const auto& rec = a.records[r];
      if (rec.label == ClinSig::Unknown) continue;
      const float* src = a.patch_data(r, family, geometry_index);
      ds.data.insert(ds.data.end(), src, src + ds.patch_floats);
      ds.labels.push_back(rec.label == ClinSig::Positive ? 1 : -1);
      ds.provenance.push_back(rec.provenance);
      ds.subjects.push_back(id);
    }
  }
  if (first) throw data_error("dataset_from_archives: no subjects given");
  return ds;
}

template <typename T>
Tensor<T> assemble_batch(const PatchDataset& ds, const std::vector<std::size_t>& indices,
                         std::size_t begin, std::size_t end) {
  const int b = static_cast<int>(end - begin);
  Shape shape = Shape::of({b, ds.channels, ds.geom.d, ds.geom.h, ds.geom.w});
  std::vector<T> out(shape.numel());
  for (std::size_t i = begin; i < end; ++i) {
    const float* src = ds.data.data() + indices[i] * ds.patch_floats;
    T* dst = out.data() + (i - begin) * ds.patch_floats;
    for (std::size_t j = 0; j < ds.patch_floats; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return Tensor<T>::from(shape, std::move(out));
}

// ---------------------------------------------------------------------------
// single-stream training

struct TrainHistory {
  std::vector<double> train_loss;  // accumulated during each epoch
  std::vector<double> val_loss;    // measured after each epoch
  int best_epoch = 0;              // 1-based
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_ran = 0;
};

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss\n";
  for (std::size_t i = 0; i < h.train_loss.size(); ++i)
    os << (i + 1) << ',' << format_fixed(h.train_loss[i], 6) << ','
       << format_fixed(h.val_loss[i], 6) << '\n';
  return os.str();
}

namespace detail {

template <typename T>
struct ModelSnapshot {
  std::vector<std::vector<T>> params;
  std::vector<std::pair<std::vector<T>, std::vector<T>>> bn;

  static ModelSnapshot take(StreamModel<T>& model) {
    ModelSnapshot s;
    for (auto* p : model.parameters()) s.params.push_back(p->value.values());
    for (auto& [name, state] : model.bn_states())
      s.bn.push_back({state->running_mean, state->running_var});
    return s;
  }

  void restore(StreamModel<T>& model) const {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value.values() = this->params[i];
    auto bn_states = model.bn_states();
    for (std::size_t i = 0; i < bn_states.size(); ++i) {
      bn_states[i].second->running_mean = bn[i].first;
      bn_states[i].second->running_var = bn[i].second;
      bn_states[i].second->initialized = true;
    }
  }
};

}  // namespace detail

// Mean focal loss over a dataset in eval mode (no graph construction).
template <typename T>
double dataset_loss(StreamModel<T>& model, const PatchDataset& ds, const FocalParams& params,
                    std::size_t eval_batch = 256) {
  ad::NoGradGuard guard;
  std::vector<std::size_t> indices(ds.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  double acc = 0.0;
  for (std::size_t begin = 0; begin < ds.size(); begin += eval_batch) {
    const std::size_t end = std::min(ds.size(), begin + eval_batch);
    Tensor<T> batch = assemble_batch<T>(ds, indices, begin, end);
    Tensor<T> logits = model.forward_logits(batch, Mode::Eval);
    for (std::size_t i = begin; i < end; ++i)
      acc += focal_loss(static_cast<double>(logits.values()[i - begin]), ds.labels[i], params);
  }
  return acc / static_cast<double>(ds.size());
}

// Eval-mode probabilities for a dataset.
template <typename T>
std::vector<double> dataset_scores(StreamModel<T>& model, const PatchDataset& ds,
                                   std::size_t eval_batch = 256) {
  ad::NoGradGuard guard;
  std::vector<std::size_t> indices(ds.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  std::vector<double> scores;
  scores.reserve(ds.size());
  for (std::size_t begin = 0; begin < ds.size(); begin += eval_batch) {
    const std::size_t end = std::min(ds.size(), begin + eval_batch);
    Tensor<T> batch = assemble_batch<T>(ds, indices, begin, end);
    Tensor<T> probs = model.forward(batch, Mode::Eval);
    for (std::size_t i = begin; i < end; ++i)
      scores.push_back(static_cast<double>(probs.values()[i - begin]));
  }
  return scores;
}

// One stream's training loop: shuffled mini-batches of `batch_size` (ragged
// final batch kept), training loss accumulated during the epoch, validation
// loss measured after it, early stopping on validation focal loss with the
// best checkpoint restored at the end.
template <typename T>
TrainHistory train_stream(StreamModel<T>& model, const PatchDataset& train_ds,
                          const PatchDataset& val_ds, const FocalParams& loss_params,
                          const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  loss_params.validate();
  if (train_ds.size() == 0 || val_ds.size() == 0)
    throw data_error("train_stream: empty training or validation dataset");
  if (!val_ds.has_both_classes())
    throw data_error("train_stream: validation fold has a single class; AUC is undefined");

  auto params = model.parameters();
  TrainHistory history;
  EarlyStopper stopper(config.patience);
  detail::ModelSnapshot<T> best;

  std::vector<std::size_t> indices(train_ds.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "shuffle/" + std::to_string(epoch)));
    shuffle_rng.shuffle(indices);

    double epoch_loss = 0.0;
    int step = 0;
    for (std::size_t begin = 0; begin < indices.size();
         begin += static_cast<std::size_t>(config.batch_size), ++step) {
      const std::size_t end =
          std::min(indices.size(), begin + static_cast<std::size_t>(config.batch_size));
      Tensor<T> batch = assemble_batch<T>(train_ds, indices, begin, end);
      std::vector<int> labels;
      labels.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) labels.push_back(train_ds.labels[indices[i]]);

      const std::uint64_t dropout_seed =
          derive_seed(seed, "dropout/" + std::to_string(epoch) + "/" + std::to_string(step));
      Tensor<T> logits = model.forward_logits(batch, Mode::Train, dropout_seed);
      Tensor<T> loss = focal_loss_mean(logits, labels, loss_params);
      if (!std::isfinite(static_cast<double>(loss.values()[0])))
        throw numeric_error("train_stream: non-finite loss at epoch " + std::to_string(epoch));
      backward(loss);
      sgd_nesterov_step(params, config);
      for (auto* p : params) p->value.zero_grad();
      epoch_loss += static_cast<double>(loss.values()[0]) * static_cast<double>(end - begin);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(train_ds.size()));
    const double val = dataset_loss(model, val_ds, loss_params);
    history.val_loss.push_back(val);
    history.epochs_ran = epoch;

    const bool improved = val < stopper.best;
    const bool stop = stopper.observe(epoch, val);
    if (improved) best = detail::ModelSnapshot<T>::take(model);
    if (stop) break;
  }

  best.restore(model);
  history.best_epoch = stopper.best_epoch;
  history.best_val_loss = stopper.best;
  model.meta.epochs_seen = history.epochs_ran;
  model.meta.best_val_loss = history.best_val_loss;
  return history;
}

// ---------------------------------------------------------------------------
// the full stream bank: 4 geometries x k folds per channel family

struct StreamKey {
  Family family = Family::Composite;
  int geometry_index = 0;
  int fold = 0;

  std::string name(const PatchSpec& spec) const {
    return std::string(family_name(family)) + "_g" +
           spec.geometries[static_cast<std::size_t>(geometry_index)].name() + "_f" +
           std::to_string(fold);
  }
};

struct StreamOutcome {
  StreamKey key;
  std::string checkpoint_base;  // path base relative to the output directory
  TrainHistory history;
  StreamTableRow row;
  RocCurve val_roc;
  std::size_t n_train = 0, n_val = 0, n_val_findings = 0;
};

struct StreamBankRequest {
  std::vector<Family> families = {Family::Composite, Family::Solo};
  PatchSpec patch_spec;
  std::map<int, StreamConfig> composite_configs;  // by geometry index
  std::map<int, StreamConfig> solo_configs;
  TrainConfig train_config;
  FocalParams loss_params;
  std::uint64_t master_seed = 1;
  int workers = 1;
  // optional job filter: run only matching jobs (empty = all)
  std::optional<int> only_geometry;  // in-plane size, e.g. 96
  std::optional<int> only_fold;
  std::optional<Family> only_family;
};

inline const StreamConfig& config_for(const StreamBankRequest& req, Family family,
                                      int geometry_index) {
  const auto& table = family == Family::Composite ? req.composite_configs : req.solo_configs;
  auto it = table.find(geometry_index);
  if (it == table.end())
    throw data_error("no stream config for geometry index " + std::to_string(geometry_index));
  return it->second;
}

// Runs a list of independent jobs on a small worker pool. Results are
// committed in job order, so worker count never changes outputs.
inline void run_jobs(const std::vector<std::function<void()>>& jobs, int workers) {
  if (workers <= 1) {
    for (const auto& job : jobs) job();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs.size());
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Trains every requested (family, geometry, fold) stream and writes its
// checkpoint + history under `out_dir`. Returns outcomes in fixed job order.
inline std::vector<StreamOutcome> run_all_streams(
    const std::map<std::string, PatchArchive>& archives, const std::vector<FoldSplit>& folds,
    const StreamBankRequest& req, const std::filesystem::path& out_dir) {
  tune_malloc_for_tensors();
  std::filesystem::create_directories(out_dir);

  struct Job {
    StreamKey key;
  };
  std::vector<Job> jobs;
  for (Family family : req.families) {
    if (req.only_family && *req.only_family != family) continue;
    for (int gi = 0; gi < 4; ++gi) {
      const int size = req.patch_spec.geometries[static_cast<std::size_t>(gi)].h;
      if (req.only_geometry && *req.only_geometry != size) continue;
      for (const auto& fold : folds) {
        if (req.only_fold && *req.only_fold != fold.fold_index) continue;
        jobs.push_back({StreamKey{family, gi, fold.fold_index}});
      }
    }
  }

  std::vector<StreamOutcome> outcomes(jobs.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t ji = 0; ji < jobs.size(); ++ji) {
    tasks.push_back([&, ji] {
      const StreamKey key = jobs[ji].key;
      const FoldSplit& fold = folds[static_cast<std::size_t>(key.fold)];
      const std::string name = key.name(req.patch_spec);

      PatchDataset train_ds =
          dataset_from_archives(archives, fold.train_subjects, key.family, key.geometry_index);
      PatchDataset val_ds =
          dataset_from_archives(archives, fold.val_subjects, key.family, key.geometry_index);
      // subject-level leakage check: training patches must come from training
      // subjects only (and vice versa)
      const std::set<std::string> train_set(fold.train_subjects.begin(),
                                            fold.train_subjects.end());
      for (const auto& id : train_ds.subjects)
        if (!train_set.count(id))
          throw numeric_error("leakage: training patch from validation subject " + id);

      const std::uint64_t seed = derive_seed(req.master_seed, "train/" + name);
      StreamConfig config = config_for(req, key.family, key.geometry_index);
      StreamModel<float> model = build_stream<float>(config, derive_seed(seed, "init"));
      StreamOutcome& out = outcomes[ji];
      out.key = key;
      out.history = train_stream(model, train_ds, val_ds, req.loss_params, req.train_config, seed);
      out.n_train = train_ds.size();
      out.n_val = val_ds.size();

      // metrics with the restored best checkpoint, eval mode
      const std::vector<double> train_scores = dataset_scores(model, train_ds);
      const std::vector<double> val_scores = dataset_scores(model, val_ds);
      std::vector<int> train01(train_ds.labels.size()), val01(val_ds.labels.size());
      for (std::size_t i = 0; i < train01.size(); ++i) train01[i] = train_ds.labels[i] > 0;
      for (std::size_t i = 0; i < val01.size(); ++i) val01[i] = val_ds.labels[i] > 0;

      StreamTableRow row;
      const PatchGeometry geom = req.patch_spec.geometries[static_cast<std::size_t>(key.geometry_index)];
      row.patch_size = std::to_string(geom.h) + "x" + std::to_string(geom.w) + "x" +
                       std::to_string(geom.d);
      row.fold = key.fold;
      row.train_accuracy = accuracy(confusion(train_scores, train01, 0.5)).value_or(0.0);
      row.train_auc = roc_auc(train_scores, train01).auc;
      row.val_accuracy = accuracy(confusion(val_scores, val01, 0.5)).value_or(0.0);
      out.val_roc = roc_auc(val_scores, val01);
      row.val_auc = out.val_roc.auc;

      // clinical-findings subset: finding-centered validation patches
      std::vector<double> cf_scores;
      std::vector<int> cf_labels;
      for (std::size_t i = 0; i < val_ds.size(); ++i)
        if (val_ds.provenance[i] == Provenance::FindingCentered) {
          cf_scores.push_back(val_scores[i]);
          cf_labels.push_back(val01[i]);
        }
      out.n_val_findings = cf_scores.size();
      if (!cf_scores.empty()) {
        row.cf_accuracy = accuracy(confusion(cf_scores, cf_labels, 0.5));
        bool pos = false, neg = false;
        for (int y : cf_labels) (y ? pos : neg) = true;
        if (pos && neg) row.cf_auc = roc_auc(cf_scores, cf_labels).auc;
      }
      out.row = row;

      out.checkpoint_base = "stream_" + name;
      save_checkpoint(model, out_dir / out.checkpoint_base);
      write_file_text(out_dir / ("history_" + name + ".csv"), history_csv(out.history));
      write_file_text(out_dir / ("roc_" + name + ".csv"), roc_points_csv(out.val_roc));
    });
  }
  run_jobs(tasks, req.workers);
  return outcomes;
}

}  // namespace densestream
