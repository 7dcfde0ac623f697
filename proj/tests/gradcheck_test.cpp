#include <gtest/gtest.h>

#include "densestream/focal_loss.hpp"
#include "densestream/tensor.hpp"
#include "support/gradcheck.hpp"

// Central finite-difference checks for every differentiable operation, on
// small randomized shapes at 64-bit. Inputs are nudged away from relu/maxpool
// switching points where the analytic subgradient is one-sided.

using namespace densestream;
using gradcheck::check_gradients;
using gradcheck::random_tensor;
using gradcheck::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

// keep |x| away from 0 so finite differences never straddle the relu kink
void nudge_from_zero(Tensor<double>& t, double margin = 1e-3) {
  for (auto& v : t.values())
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
}

TEST(GradCheck, Conv3d) {
  Rng rng(100);
  for (int trial = 0; trial < 12; ++trial) {
    const int B = rng.uniform_int(1, 3), Ci = rng.uniform_int(1, 4), Co = rng.uniform_int(1, 4);
    const int Z = rng.uniform_int(1, 4), Y = rng.uniform_int(3, 6), X = rng.uniform_int(3, 6);
    const bool same = rng.uniform01() < 0.5;
    const int kz = std::min(Z, 3), ky = 3, kx = 3;
    std::vector<Tensor<double>> inputs = {
        random_tensor(Shape::of({B, Ci, Z, Y, X}), rng),
        random_tensor(Shape::of({Co, Ci, same ? ((kz / 2) * 2 + 1) : kz, ky, kx}), rng),
        random_tensor(Shape::of({Co}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, same, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(conv3d(in[0], in[1], in[2], 1, same ? Padding::Same : Padding::None),
                          wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << "trial " << trial << ": " << r.worst;
  }
}

TEST(GradCheck, Conv3dStride2) {
  Rng rng(101);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({1, 2, 4, 6, 6}), rng),
                                          random_tensor(Shape::of({2, 2, 2, 3, 3}), rng),
                                          random_tensor(Shape::of({2}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(conv3d(in[0], in[1], in[2], 2, Padding::None), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, MaxPool) {
  Rng rng(102);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 2, 2, 4, 4}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(maxpool3d(in[0], Dim3{2, 2, 2}), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, AvgPoolGlobal) {
  Rng rng(103);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 3, 2, 3, 3}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(avgpool_global(in[0]), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, Relu) {
  Rng rng(104);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 2, 1, 3, 3}), rng)};
    nudge_from_zero(inputs[0]);
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(relu(in[0]), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, Sigmoid) {
  Rng rng(105);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 1, 1, 3, 3}), rng, true,
                                                        -4.0, 4.0)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(sigmoid(in[0]), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, FullyConnected) {
  Rng rng(106);
  for (int trial = 0; trial < 8; ++trial) {
    const int B = rng.uniform_int(1, 4), F = rng.uniform_int(2, 7), O = rng.uniform_int(1, 5);
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({B, F}), rng),
                                          random_tensor(Shape::of({O, F}), rng),
                                          random_tensor(Shape::of({O}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(fully_connected(in[0], in[1], in[2]), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, ConcatChannels) {
  Rng rng(107);
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 2, 1, 3, 3}), rng),
                                          random_tensor(Shape::of({2, 3, 1, 3, 3}), rng),
                                          random_tensor(Shape::of({2, 1, 1, 3, 3}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(concat_channels<double>({in[0], in[1], in[2]}), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, BatchNormTrainMode) {
  Rng rng(108);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({3, 2, 1, 3, 3}), rng),
                                          random_tensor(Shape::of({2}), rng, true, 0.5, 1.5),
                                          random_tensor(Shape::of({2}), rng)};
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, wseed](const std::vector<Tensor<double>>& in) {
      BatchNormState<double> state;  // fresh per eval: stats do not affect train output
      Tensor<double> scale = in[1];
      return weighted_sum(batchnorm(in[0], in[1], in[2], state, Mode::Train), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, BatchNormEvalMode) {
  Rng rng(109);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 2, 1, 3, 3}), rng),
                                          random_tensor(Shape::of({2}), rng, true, 0.5, 1.5),
                                          random_tensor(Shape::of({2}), rng)};
    // prime running stats once, then differentiate the eval path
    BatchNormState<double> state;
    batchnorm(inputs[0], inputs[1], inputs[2], state, Mode::Train);
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&state, wseed](const std::vector<Tensor<double>>& in) {
      BatchNormState<double> frozen = state;
      return weighted_sum(batchnorm(in[0], in[1], in[2], frozen, Mode::Eval), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, DropoutTrainFixedMask) {
  Rng rng(110);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({2, 2, 1, 3, 3}), rng)};
    const std::uint64_t mask_seed = rng.next_u64();
    const std::uint64_t wseed = rng.next_u64();
    auto func = [&, mask_seed, wseed](const std::vector<Tensor<double>>& in) {
      return weighted_sum(dropout(in[0], 0.3, Mode::Train, mask_seed), wseed);
    };
    auto r = check_gradients(func, inputs);
    EXPECT_TRUE(r.ok(kTol)) << r.worst;
  }
}

TEST(GradCheck, FocalLossMeanNode) {
  Rng rng(111);
  for (int trial = 0; trial < 8; ++trial) {
    const int B = rng.uniform_int(1, 6);
    std::vector<Tensor<double>> inputs = {random_tensor(Shape::of({B, 1}), rng, true, -3.0, 3.0)};
    std::vector<int> labels(static_cast<std::size_t>(B));
    for (auto& y : labels) y = rng.uniform01() < 0.5 ? 1 : -1;
    FocalParams params;
    params.alpha = 0.5;
    params.gamma = trial % 2 == 0 ? 1.5 : 0.0;
    auto func = [&](const std::vector<Tensor<double>>& in) {
      return focal_loss_mean(in[0], labels, params);
    };
    auto r = check_gradients(func, inputs, 1e-6);
    EXPECT_TRUE(r.ok(1e-7)) << r.worst;
  }
}

}  // namespace
