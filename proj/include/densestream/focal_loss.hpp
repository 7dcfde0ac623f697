#pragma once

#include <cmath>
#include <vector>

#include "densestream/tensor.hpp"

// Sigmoid focal loss on logits, with labels in {+1, -1}:
//
//   X_t  = y * X,   p_t = sigmoid(X_t)
//   L(X) = alpha * (1 + e^{X_t})^{-gamma} * log(1 + e^{-X_t})
//        = -alpha * (1 - p_t)^gamma * log(p_t)
//
// computed via softplus so both the loss and its closed-form derivative stay
// finite far into the tails. gamma = 0, alpha = 1 is exactly binary
// cross-entropy.

namespace densestream {

struct FocalParams {
  double alpha = 0.5;
  double gamma = 1.5;
  // When set, alpha weights the positive class and (1 - alpha) the negative
  // class; off by default, which matches the single-alpha printed equations.
  bool class_balanced = false;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw data_error("focal alpha must lie in (0,1]");
    if (gamma < 0.0) throw data_error("focal gamma must be >= 0");
  }

  double weight(int label) const {
    if (!class_balanced) return alpha;
    return label > 0 ? alpha : 1.0 - alpha;
  }
};

// log(1 + e^z) without overflow
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double focal_loss(double logit, int label, const FocalParams& params) {
  if (!std::isfinite(logit)) throw numeric_error("focal_loss: non-finite logit");
  if (label != 1 && label != -1) throw data_error("focal_loss: label must be +1 or -1");
  const double xt = label * logit;
  const double modulator = std::exp(-params.gamma * softplus(xt));  // (1 - p_t)^gamma
  return params.weight(label) * modulator * softplus(-xt);
}

// d focal_loss / d logit. With s = sigmoid(X_t):
//   dL/dX_t = w * [ gamma * s * (1-s)^gamma * log(s) - (1-s)^{gamma+1} ]
//   dL/dX   = y * dL/dX_t
// where (1-s)^gamma = exp(-gamma * softplus(X_t)), log(s) = -softplus(-X_t),
// and (1-s) = sigmoid(-X_t); every factor is individually stable.
inline double focal_loss_grad(double logit, int label, const FocalParams& params) {
  if (!std::isfinite(logit)) throw numeric_error("focal_loss_grad: non-finite logit");
  if (label != 1 && label != -1) throw data_error("focal_loss_grad: label must be +1 or -1");
  const double xt = label * logit;
  const double s = sigmoid_scalar(xt);
  const double one_minus_s = sigmoid_scalar(-xt);
  const double modulator = std::exp(-params.gamma * softplus(xt));
  const double log_s = -softplus(-xt);
  const double d_xt =
      params.weight(label) * (params.gamma * s * modulator * log_s - modulator * one_minus_s);
  return label * d_xt;
}

inline double batch_loss(const std::vector<double>& logits, const std::vector<int>& labels,
                         const FocalParams& params) {
  if (logits.empty()) throw data_error("batch_loss: empty batch");
  if (logits.size() != labels.size())
    throw data_error("batch_loss: logits and labels differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    acc += focal_loss(logits[i], labels[i], params);
  return acc / static_cast<double>(logits.size());
}

// Graph node: mean focal loss over a batch of logits, seeding backward with
// the analytic per-sample derivative. Accepts [B] or [B,1] logits.
template <typename T>
Tensor<T> focal_loss_mean(const Tensor<T>& logits, const std::vector<int>& labels,
                          const FocalParams& params) {
  const Shape& s = logits.shape();
  const std::size_t n = logits.numel();
  if (!((s.rank == 1 && s[0] >= 1) || (s.rank == 2 && s[1] == 1)))
    throw data_error("focal_loss_mean: logits must be [B] or [B,1], got " + s.to_string());
  if (labels.size() != n) throw data_error("focal_loss_mean: labels length mismatch");
  params.validate();

  auto xn = logits.node();
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  auto backprop = [xn, labels_copy, params, n](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const double g = static_cast<double>(self.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      xn->grad[i] += static_cast<T>(
          g * focal_loss_grad(static_cast<double>(xn->value[i]), (*labels_copy)[i], params));
  };
  Tensor<T> out = ad::make_op<T>(Shape::of({1}), {xn}, backprop);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    acc += focal_loss(static_cast<double>(xn->value[i]), labels[i], params);
  out.values()[0] = static_cast<T>(acc / static_cast<double>(n));
  return out;
}

}  // namespace densestream
