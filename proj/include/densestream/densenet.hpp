#pragma once

#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/patches.hpp"
#include "densestream/tensor.hpp"

// Patch-size-specific 3D DenseNet streams: an initial conv + max pool, three
// or four dense blocks joined by compressing transitions, and a small
// fully-connected head ending in a sigmoid.

namespace densestream {

struct StreamConfig {
  PatchGeometry geometry;  // (h, w, d)
  int in_channels = 3;     // 3 composite, 1 solo
  int growth = 12;
  int layers_per_block = 4;
  int num_blocks = 3;       // 3 for the small geometries, 4 for 96
  int init_filters = 24;    // 2g
  int bottleneck_width = 48;  // 4g
  double compression = 0.5;
  double dropout = 0.2;
  int head_width = 64;

  void validate() const {
    if (in_channels != 1 && in_channels != 3)
      throw data_error("stream config: in_channels must be 1 or 3");
    if (num_blocks != 3 && num_blocks != 4)
      throw data_error("stream config: block count must be 3 or 4");
    if (growth < 1 || layers_per_block < 1 || init_filters < 1 || bottleneck_width < 1 ||
        head_width < 1)
      throw data_error("stream config: widths must be >= 1");
    if (!(compression > 0.0 && compression <= 1.0))
      throw data_error("stream config: compression must lie in (0,1]");
    if (dropout < 0.0 || dropout >= 1.0) throw data_error("stream config: dropout must lie in [0,1)");
  }
};

// Defaults scale the depth with patch size: the largest receptive field gets
// the fourth dense block.
inline StreamConfig make_stream_config(const PatchGeometry& geometry, Family family,
                                       int growth = 12, int layers_per_block = 4) {
  StreamConfig c;
  c.geometry = geometry;
  c.in_channels = family_channels(family);
  c.growth = growth;
  c.layers_per_block = layers_per_block;
  c.num_blocks = geometry.h >= 96 ? 4 : 3;
  c.init_filters = 2 * growth;
  c.bottleneck_width = 4 * growth;
  return c;
}

inline void to_json(nlohmann::json& j, const StreamConfig& c) {
  j["geometry"] = {c.geometry.h, c.geometry.w, c.geometry.d};
  j["in_channels"] = c.in_channels;
  j["growth"] = c.growth;
  j["layers_per_block"] = c.layers_per_block;
  j["num_blocks"] = c.num_blocks;
  j["init_filters"] = c.init_filters;
  j["bottleneck_width"] = c.bottleneck_width;
  j["compression"] = c.compression;
  j["dropout"] = c.dropout;
  j["head_width"] = c.head_width;
}

inline void from_json(const nlohmann::json& j, StreamConfig& c) {
  const auto& g = j.at("geometry");
  c.geometry = {g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
  c.in_channels = j.at("in_channels").get<int>();
  c.growth = j.value("growth", c.growth);
  c.layers_per_block = j.value("layers_per_block", c.layers_per_block);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.init_filters = j.value("init_filters", c.init_filters);
  c.bottleneck_width = j.value("bottleneck_width", c.bottleneck_width);
  c.compression = j.value("compression", c.compression);
  c.dropout = j.value("dropout", c.dropout);
  c.head_width = j.value("head_width", c.head_width);
}

// ---------------------------------------------------------------------------
// architecture plan: channel and spatial bookkeeping, checked at build time

struct StagePlan {
  std::string name;
  int channels = 0;
  Dim3 extent;  // spatial (z, y, x)
};

inline int transition_out_channels(int channels, double compression) {
  return static_cast<int>(std::floor(compression * channels));
}

inline std::vector<StagePlan> plan_stream(const StreamConfig& config) {
  config.validate();
  std::vector<StagePlan> plan;
  Dim3 ext{config.geometry.d, config.geometry.h, config.geometry.w};
  auto collapse = [&](const std::string& stage) {
    throw data_error("stream " + std::to_string(config.geometry.h) + "/" +
                     std::to_string(config.in_channels) + "ch: spatial extent collapses at " +
                     stage + " (" + ext.to_string() + ")");
  };
  plan.push_back({"input", config.in_channels, ext});
  // initial conv (same padding) keeps extent
  plan.push_back({"stem_conv", config.init_filters, ext});
  if (ext.y < 2 || ext.x < 2) collapse("stem_pool");
  ext = {ext.z, (ext.y - 2) / 2 + 1, (ext.x - 2) / 2 + 1};
  plan.push_back({"stem_pool", config.init_filters, ext});
  int channels = config.init_filters;
  for (int b = 0; b < config.num_blocks; ++b) {
    channels += config.layers_per_block * config.growth;
    plan.push_back({"block" + std::to_string(b), channels, ext});
    if (b + 1 < config.num_blocks) {
      channels = transition_out_channels(channels, config.compression);
      if (channels < 1) collapse("transition" + std::to_string(b) + " channels");
      const Dim3 window = ext.z >= 2 ? Dim3{2, 2, 2} : Dim3{1, 2, 2};
      if (ext.y < 2 || ext.x < 2) collapse("transition" + std::to_string(b));
      ext = {(ext.z - window.z) / window.z + 1, (ext.y - 2) / 2 + 1, (ext.x - 2) / 2 + 1};
      plan.push_back({"transition" + std::to_string(b), channels, ext});
    }
  }
  plan.push_back({"head_pool", channels, {1, 1, 1}});
  plan.push_back({"head_fc", config.head_width, {1, 1, 1}});
  plan.push_back({"logit", 1, {1, 1, 1}});
  return plan;
}

// Closed-form parameter count for a config (weights + biases + BN affine
// pairs); running statistics are not parameters.
inline std::int64_t stream_parameter_count(const StreamConfig& config) {
  auto conv = [](int ci, int co, int k3) { return static_cast<std::int64_t>(ci) * co * k3 + co; };
  auto bn = [](int c) { return static_cast<std::int64_t>(2) * c; };
  std::int64_t n = conv(config.in_channels, config.init_filters, 27);
  int channels = config.init_filters;
  for (int b = 0; b < config.num_blocks; ++b) {
    for (int l = 0; l < config.layers_per_block; ++l) {
      const int c_in = channels + l * config.growth;
      n += conv(c_in, config.bottleneck_width, 1);
      n += bn(config.bottleneck_width) * 2;
      n += conv(config.bottleneck_width, config.growth, 27);
    }
    channels += config.layers_per_block * config.growth;
    if (b + 1 < config.num_blocks) {
      n += bn(channels);
      const int out = transition_out_channels(channels, config.compression);
      n += conv(channels, out, 1);
      channels = out;
    }
  }
  n += bn(channels);
  n += static_cast<std::int64_t>(channels) * config.head_width + config.head_width;
  n += config.head_width + 1;
  return n;
}

// ---------------------------------------------------------------------------
// model

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> momentum;

  std::size_t numel() const { return value.numel(); }
};

template <typename T>
struct ConvUnit {
  Parameter<T> weight, bias;
  Padding padding = Padding::None;
};

template <typename T>
struct BnUnit {
  Parameter<T> scale, shift;
  BatchNormState<T> state;
};

template <typename T>
struct FcUnit {
  Parameter<T> weight, bias;
};

template <typename T>
struct DenseLayer {
  ConvUnit<T> bottleneck;  // 1x1x1 -> bottleneck_width
  BnUnit<T> bn1, bn2;
  ConvUnit<T> conv;  // 3x3x3 -> growth
};

template <typename T>
struct TransitionLayer {
  BnUnit<T> bn;
  ConvUnit<T> conv;  // 1x1x1 compression
  Dim3 pool;
};

struct TrainMeta {
  int epochs_seen = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

template <typename T>
struct StreamModel {
  StreamConfig config;
  ConvUnit<T> stem;
  Dim3 stem_pool{1, 2, 2};
  std::vector<std::vector<DenseLayer<T>>> blocks;
  std::vector<TransitionLayer<T>> transitions;
  BnUnit<T> final_bn;
  FcUnit<T> head1, head2;
  TrainMeta meta;

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    auto add_conv = [&](ConvUnit<T>& c) {
      out.push_back(&c.weight);
      out.push_back(&c.bias);
    };
    auto add_bn = [&](BnUnit<T>& b) {
      out.push_back(&b.scale);
      out.push_back(&b.shift);
    };
    add_conv(stem);
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      for (auto& layer : blocks[bi]) {
        add_conv(layer.bottleneck);
        add_bn(layer.bn1);
        add_bn(layer.bn2);
        add_conv(layer.conv);
      }
      if (bi < transitions.size()) {
        add_bn(transitions[bi].bn);
        add_conv(transitions[bi].conv);
      }
    }
    add_bn(final_bn);
    out.push_back(&head1.weight);
    out.push_back(&head1.bias);
    out.push_back(&head2.weight);
    out.push_back(&head2.bias);
    return out;
  }

  std::vector<std::pair<std::string, BatchNormState<T>*>> bn_states() {
    std::vector<std::pair<std::string, BatchNormState<T>*>> out;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      for (std::size_t li = 0; li < blocks[bi].size(); ++li) {
        const std::string base =
            "block" + std::to_string(bi) + ".layer" + std::to_string(li) + ".";
        out.push_back({base + "bn1", &blocks[bi][li].bn1.state});
        out.push_back({base + "bn2", &blocks[bi][li].bn2.state});
      }
      if (bi < transitions.size())
        out.push_back({"transition" + std::to_string(bi) + ".bn", &transitions[bi].bn.state});
    }
    out.push_back({"final_bn", &final_bn.state});
    return out;
  }

  // Forward to the pre-sigmoid logits [B,1]. `trace`, when given, records the
  // shape after every stage for bookkeeping checks.
  Tensor<T> forward_logits(const Tensor<T>& batch, Mode mode, std::uint64_t dropout_seed = 0,
                           std::vector<StagePlan>* trace = nullptr) {
    const Shape& s = batch.shape();
    const Shape expected = Shape::of(
        {s.rank == 5 ? s[0] : -1, config.in_channels, config.geometry.d, config.geometry.h,
         config.geometry.w});
    if (s.rank != 5 || s[1] != expected[1] || s[2] != expected[2] || s[3] != expected[3] ||
        s[4] != expected[4])
      throw data_error("stream forward: expected batch shaped [B," +
                       std::to_string(config.in_channels) + "," +
                       std::to_string(config.geometry.d) + "," + std::to_string(config.geometry.h) +
                       "," + std::to_string(config.geometry.w) + "], got " + s.to_string());

    auto record = [&](const char* name, const Tensor<T>& t) {
      if (trace)
        trace->push_back({name, t.shape()[1], Dim3{t.shape()[2], t.shape()[3], t.shape()[4]}});
    };

    Tensor<T> x = conv3d(batch, stem.weight.value, stem.bias.value, 1, Padding::Same);
    record("stem_conv", x);
    x = maxpool3d(x, stem_pool);
    record("stem_pool", x);
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      for (auto& layer : blocks[bi]) {
        Tensor<T> t = conv3d(x, layer.bottleneck.weight.value, layer.bottleneck.bias.value, 1,
                             Padding::None);
        t = batchnorm(t, layer.bn1.scale.value, layer.bn1.shift.value, layer.bn1.state, mode);
        t = relu(t);
        t = batchnorm(t, layer.bn2.scale.value, layer.bn2.shift.value, layer.bn2.state, mode);
        t = relu(t);
        t = conv3d(t, layer.conv.weight.value, layer.conv.bias.value, 1, Padding::Same);
        x = concat_channels<T>({x, t});
      }
      record(("block" + std::to_string(bi)).c_str(), x);
      if (bi < transitions.size()) {
        auto& tr = transitions[bi];
        x = batchnorm(x, tr.bn.scale.value, tr.bn.shift.value, tr.bn.state, mode);
        x = relu(x);
        x = conv3d(x, tr.conv.weight.value, tr.conv.bias.value, 1, Padding::None);
        x = maxpool3d(x, tr.pool);
        record(("transition" + std::to_string(bi)).c_str(), x);
      }
    }
    x = batchnorm(x, final_bn.scale.value, final_bn.shift.value, final_bn.state, mode);
    x = relu(x);
    Tensor<T> pooled = avgpool_global(x);  // [B, C]
    pooled = dropout(pooled, config.dropout, mode, dropout_seed);
    Tensor<T> h = relu(fully_connected(pooled, head1.weight.value, head1.bias.value));
    return fully_connected(h, head2.weight.value, head2.bias.value);  // [B, 1]
  }

  Tensor<T> forward(const Tensor<T>& batch, Mode mode, std::uint64_t dropout_seed = 0) {
    return sigmoid(forward_logits(batch, mode, dropout_seed));
  }
};

// ---------------------------------------------------------------------------
// builder

namespace detail {

template <typename T>
Parameter<T> make_param(const std::string& name, const Shape& shape) {
  Parameter<T> p;
  p.name = name;
  p.value = Tensor<T>::zeros(shape, true);
  p.momentum.assign(shape.numel(), T(0));
  return p;
}

// He-normal fill: std = sqrt(2 / fan_in)
template <typename T>
void he_fill(Parameter<T>& p, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value.values()) v = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
ConvUnit<T> make_conv(const std::string& name, int ci, int co, Dim3 k, Padding pad, Rng& rng) {
  ConvUnit<T> unit;
  unit.padding = pad;
  unit.weight = make_param<T>(name + ".weight", Shape::of({co, ci, k.z, k.y, k.x}));
  unit.bias = make_param<T>(name + ".bias", Shape::of({co}));
  he_fill(unit.weight, ci * k.z * k.y * k.x, rng);
  return unit;
}

template <typename T>
BnUnit<T> make_bn(const std::string& name, int channels) {
  BnUnit<T> unit;
  unit.scale = make_param<T>(name + ".scale", Shape::of({channels}));
  unit.shift = make_param<T>(name + ".shift", Shape::of({channels}));
  for (auto& v : unit.scale.value.values()) v = T(1);
  unit.state.reset(channels);
  return unit;
}

template <typename T>
FcUnit<T> make_fc(const std::string& name, int in, int out, Rng& rng) {
  FcUnit<T> unit;
  unit.weight = make_param<T>(name + ".weight", Shape::of({out, in}));
  unit.bias = make_param<T>(name + ".bias", Shape::of({out}));
  he_fill(unit.weight, in, rng);
  return unit;
}

}  // namespace detail

template <typename T>
StreamModel<T> build_stream(const StreamConfig& config, std::uint64_t seed) {
  const auto plan = plan_stream(config);  // validates spatial extents
  StreamModel<T> model;
  model.config = config;
  Rng rng(seed);

  model.stem = detail::make_conv<T>("stem", config.in_channels, config.init_filters, Dim3{3, 3, 3},
                                    Padding::Same, rng);
  int channels = config.init_filters;
  Dim3 ext = plan[2].extent;  // after stem pool
  for (int b = 0; b < config.num_blocks; ++b) {
    std::vector<DenseLayer<T>> block;
    for (int l = 0; l < config.layers_per_block; ++l) {
      const std::string base = "block" + std::to_string(b) + ".layer" + std::to_string(l);
      DenseLayer<T> layer;
      layer.bottleneck = detail::make_conv<T>(base + ".bottleneck", channels + l * config.growth,
                                              config.bottleneck_width, Dim3{1, 1, 1},
                                              Padding::None, rng);
      layer.bn1 = detail::make_bn<T>(base + ".bn1", config.bottleneck_width);
      layer.bn2 = detail::make_bn<T>(base + ".bn2", config.bottleneck_width);
      layer.conv = detail::make_conv<T>(base + ".conv", config.bottleneck_width, config.growth,
                                        Dim3{3, 3, 3}, Padding::Same, rng);
      block.push_back(std::move(layer));
    }
    model.blocks.push_back(std::move(block));
    channels += config.layers_per_block * config.growth;
    if (b + 1 < config.num_blocks) {
      const std::string base = "transition" + std::to_string(b);
      TransitionLayer<T> tr;
      tr.bn = detail::make_bn<T>(base + ".bn", channels);
      const int out = transition_out_channels(channels, config.compression);
      tr.conv = detail::make_conv<T>(base + ".conv", channels, out, Dim3{1, 1, 1}, Padding::None,
                                     rng);
      tr.pool = ext.z >= 2 ? Dim3{2, 2, 2} : Dim3{1, 2, 2};
      ext = {(ext.z - tr.pool.z) / tr.pool.z + 1, (ext.y - 2) / 2 + 1, (ext.x - 2) / 2 + 1};
      model.transitions.push_back(std::move(tr));
      channels = out;
    }
  }
  model.final_bn = detail::make_bn<T>("final_bn", channels);
  model.head1 = detail::make_fc<T>("head1", channels, config.head_width, rng);
  model.head2 = detail::make_fc<T>("head2", config.head_width, 1, rng);
  return model;
}

// ---------------------------------------------------------------------------
// checkpoint format: `<base>.json` manifest + `<base>.bin` f32le blob holding
// every parameter and batch-norm running statistic, offsets recorded by name

inline constexpr int kCheckpointFormatVersion = 1;

template <typename T>
void save_checkpoint(StreamModel<T>& model, const std::filesystem::path& base) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = model.config;
  manifest["meta"]["epochs_seen"] = model.meta.epochs_seen;
  if (std::isfinite(model.meta.best_val_loss))  // infinity is not valid JSON
    manifest["meta"]["best_val_loss"] = model.meta.best_val_loss;

  std::vector<float> blob;
  nlohmann::json tensors = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Shape& shape, const auto& data) {
    nlohmann::json t;
    t["name"] = name;
    t["shape"] = nlohmann::json::array();
    for (int i = 0; i < shape.rank; ++i) t["shape"].push_back(shape[i]);
    t["offset"] = blob.size();
    tensors.push_back(std::move(t));
    for (const auto v : data) blob.push_back(static_cast<float>(v));
  };
  for (auto* p : model.parameters()) emit(p->name, p->value.shape(), p->value.values());
  for (auto& [name, state] : model.bn_states()) {
    if (!state->initialized)
      throw data_error("save_checkpoint: batch-norm stats uninitialized for " + name);
    emit(name + ".running_mean", Shape::of({static_cast<int>(state->running_mean.size())}),
         state->running_mean);
    emit(name + ".running_var", Shape::of({static_cast<int>(state->running_var.size())}),
         state->running_var);
  }
  manifest["tensors"] = std::move(tensors);

  std::filesystem::path json_path = base;
  json_path += ".json";
  write_file_text(json_path, manifest.dump(2) + "\n");
  std::filesystem::path bin_path = base;
  bin_path += ".bin";
  write_f32le(bin_path, blob);
}

template <typename T>
StreamModel<T> load_checkpoint(const std::filesystem::path& base) {
  std::filesystem::path json_path = base;
  json_path += ".json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_text(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad checkpoint manifest " + json_path.string() + ": " + e.what());
  }
  StreamModel<T> model;
  std::map<std::string, std::pair<Shape, std::size_t>> index;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw data_error("unsupported checkpoint format version in " + json_path.string());
    StreamConfig config = manifest.at("config").get<StreamConfig>();
    model = build_stream<T>(config, 0);
    model.meta.epochs_seen = manifest.at("meta").at("epochs_seen").get<int>();
    model.meta.best_val_loss = manifest.at("meta").value(
        "best_val_loss", std::numeric_limits<double>::infinity());
    for (const auto& t : manifest.at("tensors")) {
      Shape shape;
      for (const auto& d : t.at("shape"))
        shape.d[static_cast<std::size_t>(shape.rank++)] = d.get<int>();
      index[t.at("name").get<std::string>()] = {shape, t.at("offset").get<std::size_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad checkpoint manifest " + json_path.string() + ": " + e.what());
  }

  std::filesystem::path bin_path = base;
  bin_path += ".bin";
  const std::vector<float> blob = read_f32le(bin_path);
  auto fetch = [&](const std::string& name, const Shape& want, auto& out) {
    auto it = index.find(name);
    if (it == index.end())
      throw data_error("checkpoint " + base.string() + " is missing tensor '" + name + "'");
    if (!(it->second.first == want))
      throw data_error("checkpoint tensor '" + name + "' has shape " +
                       it->second.first.to_string() + ", model expects " + want.to_string());
    const std::size_t off = it->second.second;
    if (off + want.numel() > blob.size())
      throw data_error("checkpoint blob too small for tensor '" + name + "'");
    for (std::size_t i = 0; i < want.numel(); ++i) out[i] = static_cast<T>(blob[off + i]);
  };
  for (auto* p : model.parameters()) fetch(p->name, p->value.shape(), p->value.values());
  for (auto& [name, state] : model.bn_states()) {
    const Shape s = Shape::of({static_cast<int>(state->running_mean.size())});
    fetch(name + ".running_mean", s, state->running_mean);
    fetch(name + ".running_var", s, state->running_var);
    state->initialized = true;
  }
  return model;
}

}  // namespace densestream
