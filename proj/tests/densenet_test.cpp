#include "densestream/densenet.hpp"

#include <gtest/gtest.h>

#include "densestream/focal_loss.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace densestream;

namespace {

StreamConfig tiny_config(const PatchGeometry& geometry, int channels) {
  StreamConfig c;
  c.geometry = geometry;
  c.in_channels = channels;
  c.growth = 2;
  c.layers_per_block = 1;
  c.num_blocks = geometry.h >= 96 ? 4 : 3;
  c.init_filters = 4;
  c.bottleneck_width = 8;
  c.head_width = 8;
  c.dropout = 0.0;
  return c;
}

template <typename T>
Tensor<T> random_batch(const StreamConfig& c, int batch, std::uint64_t seed) {
  Rng rng(seed);
  Shape s = Shape::of({batch, c.in_channels, c.geometry.d, c.geometry.h, c.geometry.w});
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>::from(s, std::move(v));
}

TEST(Plan, DenseBlockConcatenationArithmetic) {
  // input c0 = 24, L = 4, g = 12 -> 24 + 48 = 72 channels after one block
  StreamConfig c = make_stream_config({48, 48, 3}, Family::Composite);
  auto plan = plan_stream(c);
  auto find = [&](const std::string& name) {
    for (const auto& st : plan)
      if (st.name == name) return st;
    throw std::runtime_error("stage not found: " + name);
  };
  EXPECT_EQ(find("stem_pool").channels, 24);
  EXPECT_EQ(find("block0").channels, 72);
  EXPECT_EQ(find("transition0").channels, 36);  // floor(0.5 * 72)
  EXPECT_EQ(find("block1").channels, 36 + 48);
}

TEST(Plan, ChannelBookkeepingClosedFormAllGeometries) {
  for (const auto& geometry : kPatchGeometries)
    for (Family family : {Family::Composite, Family::Solo}) {
      StreamConfig c = make_stream_config(geometry, family);
      auto plan = plan_stream(c);
      // independent closed-form walk: c0 + L*g per block, floor(compression*c)
      // per transition
      int channels = c.init_filters;
      for (const auto& stage : plan) {
        if (stage.name.rfind("block", 0) == 0) {
          channels += c.layers_per_block * c.growth;
          EXPECT_EQ(stage.channels, channels) << stage.name;
        } else if (stage.name.rfind("transition", 0) == 0) {
          channels = static_cast<int>(std::floor(c.compression * channels));
          EXPECT_EQ(stage.channels, channels) << stage.name;
        }
      }
      const int blocks_seen = c.num_blocks;
      EXPECT_EQ(blocks_seen, geometry.h >= 96 ? 4 : 3);
    }
}

TEST(Plan, ForwardTraceMatchesPlan) {
  for (const auto& geometry : kPatchGeometries) {
    StreamConfig c = tiny_config(geometry, 3);
    auto plan = plan_stream(c);
    auto model = build_stream<float>(c, 11);
    std::vector<StagePlan> trace;
    model.forward_logits(random_batch<float>(c, 2, 5), Mode::Train, 1, &trace);
    for (const auto& stage : trace) {
      bool found = false;
      for (const auto& planned : plan)
        if (planned.name == stage.name) {
          found = true;
          EXPECT_EQ(stage.channels, planned.channels) << stage.name;
          EXPECT_EQ(stage.extent, planned.extent) << stage.name;
        }
      EXPECT_TRUE(found) << stage.name;
    }
  }
}

TEST(Plan, SpatialCollapseIsBuildError) {
  StreamConfig c = tiny_config({8, 8, 1}, 3);  // pools to nothing by block 2
  c.num_blocks = 4;
  EXPECT_THROW(plan_stream(c), data_error);
  StreamConfig c2 = tiny_config({42, 42, 1}, 3);
  EXPECT_NO_THROW(plan_stream(c2));
}

TEST(Build, ParameterCountMatchesClosedForm) {
  for (const auto& geometry : kPatchGeometries)
    for (Family family : {Family::Composite, Family::Solo}) {
      StreamConfig c = make_stream_config(geometry, family);
      auto model = build_stream<float>(c, 3);
      std::int64_t walked = 0;
      for (auto* p : model.parameters()) walked += static_cast<std::int64_t>(p->numel());
      EXPECT_EQ(walked, stream_parameter_count(c))
          << geometry.h << " " << family_name(family);
    }
}

TEST(Build, ParameterNamesUnique) {
  auto model = build_stream<float>(tiny_config({48, 48, 3}, 1), 5);
  std::set<std::string> names;
  for (auto* p : model.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
}

TEST(Build, DeterministicInSeed) {
  StreamConfig c = tiny_config({42, 42, 1}, 3);
  auto a = build_stream<float>(c, 17);
  auto b = build_stream<float>(c, 17);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(pa[i]->value.values(), pb[i]->value.values()) << pa[i]->name;
}

TEST(Forward, ProbabilitiesInOpenUnitInterval) {
  StreamConfig c = tiny_config({96, 96, 3}, 3);
  auto model = build_stream<float>(c, 7);
  Tensor<float> probs = model.forward(random_batch<float>(c, 2, 9), Mode::Train, 1);
  ASSERT_EQ(probs.shape(), Shape::of({2, 1}));
  for (float p : probs.values()) {
    EXPECT_GT(p, 0.0f);
    EXPECT_LT(p, 1.0f);
  }
}

TEST(Forward, EvalDeterministicBitwise) {
  StreamConfig c = tiny_config({48, 48, 3}, 3);
  auto model = build_stream<float>(c, 13);
  Tensor<float> batch = random_batch<float>(c, 3, 21);
  model.forward(batch, Mode::Train, 2);  // prime BN running stats
  Tensor<float> a = model.forward(batch, Mode::Eval);
  Tensor<float> b = model.forward(batch, Mode::Eval);
  EXPECT_EQ(a.values(), b.values());
}

TEST(Forward, EvalBatchIndependence) {
  StreamConfig c = tiny_config({42, 42, 1}, 1);
  auto model = build_stream<float>(c, 19);
  model.forward(random_batch<float>(c, 4, 23), Mode::Train, 3);
  Tensor<float> one = random_batch<float>(c, 1, 29);
  // duplicate the sample three times
  std::vector<float> dup;
  for (int i = 0; i < 3; ++i)
    dup.insert(dup.end(), one.values().begin(), one.values().end());
  Shape s = Shape::of({3, c.in_channels, c.geometry.d, c.geometry.h, c.geometry.w});
  Tensor<float> probs = model.forward(Tensor<float>::from(s, std::move(dup)), Mode::Eval);
  EXPECT_EQ(probs.values()[0], probs.values()[1]);
  EXPECT_EQ(probs.values()[1], probs.values()[2]);
}

TEST(Forward, FreshModelOutputsNearHalf) {
  StreamConfig c = make_stream_config({42, 42, 1}, Family::Composite, 4, 2);
  c.dropout = 0.2;
  auto model = build_stream<float>(c, 31);
  Tensor<float> probs = model.forward(random_batch<float>(c, 64, 37), Mode::Train, 5);
  double mean = 0.0;
  for (float p : probs.values()) mean += p;
  mean /= 64.0;
  EXPECT_GT(mean, 0.3);
  EXPECT_LT(mean, 0.7);
}

TEST(Forward, GeometryMismatchNamesShapes) {
  StreamConfig c = tiny_config({48, 48, 3}, 3);
  auto model = build_stream<float>(c, 41);
  StreamConfig wrong = tiny_config({64, 64, 3}, 3);
  try {
    model.forward(random_batch<float>(wrong, 1, 43), Mode::Train, 7);
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("48"), std::string::npos) << msg;
    EXPECT_NE(msg.find("64"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, RoundTripBitwiseAndMeta) {
  TempDir dir;
  StreamConfig c = tiny_config({42, 42, 1}, 3);
  auto model = build_stream<float>(c, 47);
  model.forward(random_batch<float>(c, 2, 51), Mode::Train, 9);
  model.meta.epochs_seen = 12;
  model.meta.best_val_loss = 0.125;
  save_checkpoint(model, dir / "ckpt");
  auto loaded = load_checkpoint<float>(dir / "ckpt");
  EXPECT_EQ(loaded.meta.epochs_seen, 12);
  EXPECT_EQ(loaded.meta.best_val_loss, 0.125);
  auto pa = model.parameters();
  auto pb = loaded.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value.values(), pb[i]->value.values()) << pa[i]->name;
  }
  // eval forward agrees bitwise after reload
  Tensor<float> batch = random_batch<float>(c, 2, 53);
  EXPECT_EQ(model.forward(batch, Mode::Eval).values(),
            loaded.forward(batch, Mode::Eval).values());
}

TEST(Checkpoint, ShapeValidationByName) {
  TempDir dir;
  StreamConfig c = tiny_config({42, 42, 1}, 3);
  auto model = build_stream<float>(c, 59);
  model.forward(random_batch<float>(c, 2, 61), Mode::Train, 11);
  save_checkpoint(model, dir / "ckpt");
  // tamper: change a recorded tensor shape in the manifest
  std::string manifest = read_file_text(dir / "ckpt.json");
  auto j = nlohmann::json::parse(manifest);
  j["tensors"][0]["shape"][0] = j["tensors"][0]["shape"][0].get<int>() + 1;
  write_file_text(dir / "ckpt.json", j.dump());
  EXPECT_THROW(load_checkpoint<float>(dir / "ckpt"), data_error);
}

// Full-chain gradient soundness on a one-sample batch: analytic gradients of
// a tiny stream against central finite differences over a sampled parameter
// subset.
TEST(FullModel, GradientsMatchFiniteDifferences) {
  StreamConfig c = tiny_config({42, 42, 1}, 3);
  c.dropout = 0.2;  // exercised with a fixed mask seed
  auto model = build_stream<double>(c, 67);
  Rng rng(71);
  Shape in_shape = Shape::of({1, 3, 1, 42, 42});
  std::vector<double> data(in_shape.numel());
  for (auto& v : data) v = rng.normal();
  Tensor<double> batch = Tensor<double>::from(in_shape, std::move(data));
  const std::vector<int> labels = {1};
  FocalParams params;

  auto loss_value = [&]() {
    Tensor<double> logits = model.forward_logits(batch, Mode::Train, 73);
    return static_cast<double>(focal_loss_mean(logits, labels, params).values()[0]);
  };

  for (auto* p : model.parameters()) p->value.zero_grad();
  {
    Tensor<double> logits = model.forward_logits(batch, Mode::Train, 73);
    backward(focal_loss_mean(logits, labels, params));
  }

  auto params_list = model.parameters();
  // deterministic 50-parameter-element subset across all tensors
  Rng pick(79);
  const double h = 1e-5;
  int checked = 0;
  double max_rel = 0.0;
  while (checked < 50) {
    auto* p = params_list[pick.uniform_int(0, static_cast<int>(params_list.size()))];
    auto& vals = p->value.values();
    const std::size_t i = pick.uniform_index(vals.size());
    const double analytic = p->value.grad_view()[i];
    const double keep = vals[i];
    vals[i] = keep + h;
    const double up = loss_value();
    vals[i] = keep - h;
    const double down = loss_value();
    vals[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(numeric - analytic) /
                       std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    max_rel = std::max(max_rel, rel);
    ++checked;
  }
  EXPECT_LE(max_rel, 1e-3);
}

}  // namespace
