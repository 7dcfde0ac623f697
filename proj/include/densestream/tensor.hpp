#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "densestream/common.hpp"
#include "densestream/rng.hpp"

// Dense-tensor engine with reverse-mode differentiation. Deliberately minimal:
// exactly the operator set the stream architecture needs, on shapes of up to
// five axes (batch, channel, z, y, x). Scalar type is a template parameter;
// gradient checks run at 64-bit, training at 32-bit.
//
// Determinism: no operation reads global state, accumulation order per output
// element is fixed in code, and dropout derives its mask purely from the seed
// argument.

namespace densestream {

struct Shape {
  std::array<int, 5> d{};
  int rank = 0;

  static Shape of(std::initializer_list<int> dims) {
    Shape s;
    if (dims.size() > 5) throw data_error("tensor rank above 5 is unsupported");
    for (int v : dims) s.d[static_cast<std::size_t>(s.rank++)] = v;
    return s;
  }

  int operator[](int i) const { return d[static_cast<std::size_t>(i)]; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(d[static_cast<std::size_t>(i)]);
    return n;
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank != b.rank) return false;
    for (int i = 0; i < a.rank; ++i) if (a[i] != b[i]) return false;
    return true;
  }

  std::string to_string() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) s += (i ? "x" : "") + std::to_string((*this)[i]);
    return s + "]";
  }
};

// pooling/conv extents in (z, y, x) axis order
struct Dim3 {
  int z = 1, y = 1, x = 1;
  friend bool operator==(const Dim3&, const Dim3&) = default;
  std::string to_string() const {
    return std::to_string(z) + "x" + std::to_string(y) + "x" + std::to_string(x);
  }
};

enum class Padding { None, Same };
enum class Mode { Train, Eval };

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily; same numel as value when present
  bool requires_grad = false;
  bool backward_run = false;  // set on a node that has served as backward root
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->value.assign(shape.numel(), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(const Shape& shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape.numel())
      throw data_error("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape.to_string());
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad_view() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace ad {

// Thread-local switch for building graphs. Inside a NoGradGuard, ops compute
// values only: no parent links, no backprop closures, no saved activations.
inline bool& grad_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_flag()) { grad_flag() = false; }
  ~NoGradGuard() { grad_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = shape;
  n->value.assign(shape.numel(), T(0));
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p->requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

inline void check_rank(const Shape& s, int rank, const char* op) {
  if (s.rank != rank)
    throw data_error(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     s.to_string());
}

}  // namespace ad

// ---------------------------------------------------------------------------
// backward pass

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
// across graph paths; running it twice on the same root is an error.
template <typename T>
void backward(Tensor<T> loss) {
  if (loss.numel() != 1) throw numeric_error("backward: loss must be scalar, got " +
                                             loss.shape().to_string());
  auto root = loss.node();
  if (!root->requires_grad)
    throw numeric_error("backward: loss does not depend on any parameter");
  if (root->backward_run) throw numeric_error("backward: second backward without reset");
  root->backward_run = true;

  // iterative post-order DFS; reverse post-order is the backprop order
  std::vector<TensorNode<T>*> order;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  std::vector<TensorNode<T>*> seen;
  auto mark_seen = [&](TensorNode<T>* n) {
    for (auto* s : seen)
      if (s == n) return false;
    seen.push_back(n);
    return true;
  };
  // pointer-set via sorted vector would be O(n log n); graphs here are small
  // (hundreds of nodes), linear scan is fine
  if (mark_seen(root.get())) stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && mark_seen(parent)) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// elementwise and reduction ops

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xn = x.node();
  Tensor<T> out = ad::make_op<T>(
      x.shape(), {xn}, [xn](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i)
          if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
        // subgradient at exactly 0 is 0 by convention
      });
  auto& v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xn->value[i] > T(0) ? xn->value[i] : T(0);
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto xn = x.node();
  Tensor<T> out = ad::make_op<T>(
      x.shape(), {xn}, [xn](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          const T s = self.value[i];
          xn->grad[i] += self.grad[i] * s * (T(1) - s);
        }
      });
  auto& v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid_scalar(xn->value[i]);
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xn = x.node();
  Tensor<T> out = ad::make_op<T>(
      Shape::of({1}), {xn}, [xn](TensorNode<T>& self) {
        xn->ensure_grad();
        for (auto& g : xn->grad) g += self.grad[0];
      });
  T acc = T(0);
  for (T v : xn->value) acc += v;
  out.values()[0] = acc;
  return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw data_error("hadamard: shape mismatch " + a.shape().to_string() + " vs " +
                     b.shape().to_string());
  auto an = a.node(), bn = b.node();
  Tensor<T> out = ad::make_op<T>(
      a.shape(), {an, bn}, [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.value.size(); ++i)
            an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.value.size(); ++i)
            bn->grad[i] += self.grad[i] * an->value[i];
        }
      });
  auto& v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = an->value[i] * bn->value[i];
  return out;
}

// Dropout mask is a pure function of (seed, element count): a fixed seed gives
// a fixed mask, which keeps full-model finite differences meaningful.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw data_error("dropout rate must lie in [0,1)");
  if (mode == Mode::Eval || rate == 0.0) return x;  // identity
  auto xn = x.node();
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  Rng rng(seed);
  const T scale = T(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform01() < rate ? T(0) : scale;
  Tensor<T> out = ad::make_op<T>(
      x.shape(), {xn}, [xn, mask](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i)
          xn->grad[i] += self.grad[i] * (*mask)[i];
      });
  auto& v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xn->value[i] * (*mask)[i];
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  ad::check_rank(x.shape(), 5, "flatten");
  const Shape out_shape = Shape::of({x.shape()[0], static_cast<int>(x.numel()) / x.shape()[0]});
  auto xn = x.node();
  Tensor<T> out = ad::make_op<T>(
      out_shape, {xn}, [xn](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) xn->grad[i] += self.grad[i];
      });
  out.values() = xn->value;
  return out;
}

// ---------------------------------------------------------------------------
// channel concatenation

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw data_error("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  ad::check_rank(first, 5, "concat_channels");
  int channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    ad::check_rank(s, 5, "concat_channels");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3] || s[4] != first[4])
      throw data_error("concat_channels: incompatible shape " + s.to_string() + " vs " +
                       first.to_string() + " (batch/spatial axes must match)");
    channels += s[1];
  }
  const int B = first[0], Z = first[2], Y = first[3], X = first[4];
  const std::size_t spatial = static_cast<std::size_t>(Z) * Y * X;
  Shape out_shape = Shape::of({B, channels, Z, Y, X});

  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());

  auto backprop = [parents, spatial, channels](TensorNode<T>& self) {
    const int B_ = self.shape[0];
    for (int b = 0; b < B_; ++b) {
      std::size_t coff = 0;
      for (const auto& pn : parents) {
        const int pc = pn->shape[1];
        const std::size_t n = static_cast<std::size_t>(pc) * spatial;
        if (pn->requires_grad) {
          pn->ensure_grad();
          const T* src = self.grad.data() +
                         (static_cast<std::size_t>(b) * channels + coff) * spatial;
          T* dst = pn->grad.data() + static_cast<std::size_t>(b) * n;
          for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
        }
        coff += static_cast<std::size_t>(pc);
      }
    }
  };
  Tensor<T> out = ad::make_op<T>(out_shape, parents, backprop);
  auto& v = out.values();
  for (int b = 0; b < B; ++b) {
    std::size_t coff = 0;
    for (const auto& p : parts) {
      const int pc = p.shape()[1];
      const std::size_t n = static_cast<std::size_t>(pc) * spatial;
      const T* src = p.values().data() + static_cast<std::size_t>(b) * n;
      T* dst = v.data() + (static_cast<std::size_t>(b) * channels + coff) * spatial;
      std::copy(src, src + n, dst);
      coff += static_cast<std::size_t>(pc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// fully connected

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  ad::check_rank(x.shape(), 2, "fully_connected input");
  ad::check_rank(weight.shape(), 2, "fully_connected weight");
  ad::check_rank(bias.shape(), 1, "fully_connected bias");
  const int B = x.shape()[0], F = x.shape()[1];
  const int O = weight.shape()[0];
  if (weight.shape()[1] != F)
    throw data_error("fully_connected: weight expects " + std::to_string(weight.shape()[1]) +
                     " features, input has " + std::to_string(F));
  if (bias.shape()[0] != O) throw data_error("fully_connected: bias width mismatch");

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  auto backprop = [xn, wn, bn, B, F, O](TensorNode<T>& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) {
          const T g = self.grad[static_cast<std::size_t>(b) * O + o];
          const T* wrow = wn->value.data() + static_cast<std::size_t>(o) * F;
          T* xrow = xn->grad.data() + static_cast<std::size_t>(b) * F;
          for (int f = 0; f < F; ++f) xrow[f] += g * wrow[f];
        }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (int o = 0; o < O; ++o)
        for (int b = 0; b < B; ++b) {
          const T g = self.grad[static_cast<std::size_t>(b) * O + o];
          const T* xrow = xn->value.data() + static_cast<std::size_t>(b) * F;
          T* wrow = wn->grad.data() + static_cast<std::size_t>(o) * F;
          for (int f = 0; f < F; ++f) wrow[f] += g * xrow[f];
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
          bn->grad[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(b) * O + o];
    }
  };
  Tensor<T> out = ad::make_op<T>(Shape::of({B, O}), {xn, wn, bn}, backprop);
  auto& v = out.values();
  for (int b = 0; b < B; ++b) {
    const T* xrow = xn->value.data() + static_cast<std::size_t>(b) * F;
    for (int o = 0; o < O; ++o) {
      const T* wrow = wn->value.data() + static_cast<std::size_t>(o) * F;
      T acc = bn->value[static_cast<std::size_t>(o)];
      for (int f = 0; f < F; ++f) acc += wrow[f] * xrow[f];
      v[static_cast<std::size_t>(b) * O + o] = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation)

namespace ad {

struct ConvGeom {
  int B, Ci, Z, Y, X;       // input
  int Co, KZ, KY, KX;       // kernel
  int PZ, PY, PX;           // padding
  int stride;
  int OZ, OY, OX;           // output

  static int out_dim(int in, int k, int p, int stride, const char* axis) {
    const int o = (in + 2 * p - k) / stride + 1;
    if (in + 2 * p < k || o < 1)
      throw data_error(std::string("conv3d: output collapses along ") + axis + " (input " +
                       std::to_string(in) + ", kernel " + std::to_string(k) + ", padding " +
                       std::to_string(p) + ")");
    return o;
  }
};

inline int same_padding(int k, const char* axis) {
  if (k % 2 == 0)
    throw data_error(std::string("conv3d: 'same' padding needs an odd kernel along ") + axis);
  return (k - 1) / 2;
}

// valid output range along one axis: indices o where 0 <= o*stride + koff < in
struct ConvRange {
  int lo, hi;  // half-open
};

inline ConvRange conv_range(int out, int in, int koff, int stride) {
  int lo = 0;
  if (koff < 0) lo = (-koff + stride - 1) / stride;
  int hi = out;
  const int last = in - 1 - koff;
  if (last < 0) return {0, 0};
  hi = std::min(hi, last / stride + 1);
  return {std::min(lo, hi), hi};
}

}  // namespace ad

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride = 1, Padding padding = Padding::None) {
  ad::check_rank(input.shape(), 5, "conv3d input");
  ad::check_rank(kernel.shape(), 5, "conv3d kernel");
  ad::check_rank(bias.shape(), 1, "conv3d bias");
  if (stride < 1) throw data_error("conv3d: stride must be >= 1");

  ad::ConvGeom g;
  g.B = input.shape()[0];
  g.Ci = input.shape()[1];
  g.Z = input.shape()[2];
  g.Y = input.shape()[3];
  g.X = input.shape()[4];
  g.Co = kernel.shape()[0];
  if (kernel.shape()[1] != g.Ci)
    throw data_error("conv3d: kernel expects " + std::to_string(kernel.shape()[1]) +
                     " input channels, input has " + std::to_string(g.Ci) + " (channel axis)");
  g.KZ = kernel.shape()[2];
  g.KY = kernel.shape()[3];
  g.KX = kernel.shape()[4];
  if (bias.shape()[0] != g.Co) throw data_error("conv3d: bias width mismatch (channel axis)");
  g.stride = stride;
  if (padding == Padding::Same) {
    g.PZ = ad::same_padding(g.KZ, "z");
    g.PY = ad::same_padding(g.KY, "y");
    g.PX = ad::same_padding(g.KX, "x");
  } else {
    g.PZ = g.PY = g.PX = 0;
  }
  g.OZ = ad::ConvGeom::out_dim(g.Z, g.KZ, g.PZ, stride, "z");
  g.OY = ad::ConvGeom::out_dim(g.Y, g.KY, g.PY, stride, "y");
  g.OX = ad::ConvGeom::out_dim(g.X, g.KX, g.PX, stride, "x");

  auto xn = input.node();
  auto wn = kernel.node();
  auto bn = bias.node();

  const std::size_t in_plane = static_cast<std::size_t>(g.Y) * g.X;
  const std::size_t in_chan = static_cast<std::size_t>(g.Z) * in_plane;
  const std::size_t out_plane = static_cast<std::size_t>(g.OY) * g.OX;
  const std::size_t out_chan = static_cast<std::size_t>(g.OZ) * out_plane;

  auto backprop = [xn, wn, bn, g, in_plane, in_chan, out_plane, out_chan](TensorNode<T>& self) {
    const T* __restrict__ dout = self.grad.data();
    // bias gradient
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int b = 0; b < g.B; ++b)
        for (int co = 0; co < g.Co; ++co) {
          const T* p = dout + (static_cast<std::size_t>(b) * g.Co + co) * out_chan;
          T acc = T(0);
          for (std::size_t i = 0; i < out_chan; ++i) acc += p[i];
          bn->grad[static_cast<std::size_t>(co)] += acc;
        }
    }
    // input gradient: scatter dout through the kernel (transposed correlation)
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int b = 0; b < g.B; ++b)
        for (int co = 0; co < g.Co; ++co) {
          const T* dslab = dout + (static_cast<std::size_t>(b) * g.Co + co) * out_chan;
          for (int ci = 0; ci < g.Ci; ++ci) {
            T* __restrict__ dx = xn->grad.data() +
                                 (static_cast<std::size_t>(b) * g.Ci + ci) * in_chan;
            const T* wslab = wn->value.data() +
                             (static_cast<std::size_t>(co) * g.Ci + ci) *
                                 (static_cast<std::size_t>(g.KZ) * g.KY * g.KX);
            for (int kz = 0; kz < g.KZ; ++kz) {
              const int zoff = kz - g.PZ;
              const auto rz = ad::conv_range(g.OZ, g.Z, zoff, g.stride);
              for (int ky = 0; ky < g.KY; ++ky) {
                const int yoff = ky - g.PY;
                const auto ry = ad::conv_range(g.OY, g.Y, yoff, g.stride);
                for (int kx = 0; kx < g.KX; ++kx) {
                  const int xoff = kx - g.PX;
                  const auto rx = ad::conv_range(g.OX, g.X, xoff, g.stride);
                  const T w = wslab[(static_cast<std::size_t>(kz) * g.KY + ky) * g.KX + kx];
                  if (w == T(0)) continue;
                  for (int oz = rz.lo; oz < rz.hi; ++oz) {
                    const int iz = oz * g.stride + zoff;
                    for (int oy = ry.lo; oy < ry.hi; ++oy) {
                      const int iy = oy * g.stride + yoff;
                      const T* drow = dslab + (static_cast<std::size_t>(oz) * g.OY + oy) * g.OX;
                      T* xrow = dx + (static_cast<std::size_t>(iz) * g.Y + iy) * g.X + xoff;
                      if (g.stride == 1) {
                        for (int ox = rx.lo; ox < rx.hi; ++ox) xrow[ox] += w * drow[ox];
                      } else {
                        for (int ox = rx.lo; ox < rx.hi; ++ox)
                          xrow[static_cast<std::size_t>(ox) * g.stride] += w * drow[ox];
                      }
                    }
                  }
                }
              }
            }
          }
        }
    }
    // kernel gradient: correlate input with dout
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (int b = 0; b < g.B; ++b)
        for (int co = 0; co < g.Co; ++co) {
          const T* dslab = dout + (static_cast<std::size_t>(b) * g.Co + co) * out_chan;
          for (int ci = 0; ci < g.Ci; ++ci) {
            const T* xslab = xn->value.data() +
                             (static_cast<std::size_t>(b) * g.Ci + ci) * in_chan;
            T* wslab = wn->grad.data() +
                       (static_cast<std::size_t>(co) * g.Ci + ci) *
                           (static_cast<std::size_t>(g.KZ) * g.KY * g.KX);
            for (int kz = 0; kz < g.KZ; ++kz) {
              const int zoff = kz - g.PZ;
              const auto rz = ad::conv_range(g.OZ, g.Z, zoff, g.stride);
              for (int ky = 0; ky < g.KY; ++ky) {
                const int yoff = ky - g.PY;
                const auto ry = ad::conv_range(g.OY, g.Y, yoff, g.stride);
                for (int kx = 0; kx < g.KX; ++kx) {
                  const int xoff = kx - g.PX;
                  const auto rx = ad::conv_range(g.OX, g.X, xoff, g.stride);
                  // four fixed partial accumulators keep the reduction
                  // vectorizable without reassociating at the compiler's whim
                  T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
                  for (int oz = rz.lo; oz < rz.hi; ++oz) {
                    const int iz = oz * g.stride + zoff;
                    for (int oy = ry.lo; oy < ry.hi; ++oy) {
                      const int iy = oy * g.stride + yoff;
                      const T* drow = dslab + (static_cast<std::size_t>(oz) * g.OY + oy) * g.OX;
                      const T* xrow = xslab + (static_cast<std::size_t>(iz) * g.Y + iy) * g.X + xoff;
                      int ox = rx.lo;
                      if (g.stride == 1) {
                        for (; ox + 4 <= rx.hi; ox += 4) {
                          a0 += drow[ox] * xrow[ox];
                          a1 += drow[ox + 1] * xrow[ox + 1];
                          a2 += drow[ox + 2] * xrow[ox + 2];
                          a3 += drow[ox + 3] * xrow[ox + 3];
                        }
                        for (; ox < rx.hi; ++ox) a0 += drow[ox] * xrow[ox];
                      } else {
                        for (; ox < rx.hi; ++ox)
                          a0 += drow[ox] * xrow[static_cast<std::size_t>(ox) * g.stride];
                      }
                    }
                  }
                  wslab[(static_cast<std::size_t>(kz) * g.KY + ky) * g.KX + kx] +=
                      ((a0 + a1) + (a2 + a3));
                }
              }
            }
          }
        }
    }
  };

  Tensor<T> out = ad::make_op<T>(Shape::of({g.B, g.Co, g.OZ, g.OY, g.OX}), {xn, wn, bn}, backprop);
  T* __restrict__ ov = out.values().data();
  for (int b = 0; b < g.B; ++b)
    for (int co = 0; co < g.Co; ++co) {
      T* oslab = ov + (static_cast<std::size_t>(b) * g.Co + co) * out_chan;
      const T bias_v = bn->value[static_cast<std::size_t>(co)];
      for (std::size_t i = 0; i < out_chan; ++i) oslab[i] = bias_v;
      for (int ci = 0; ci < g.Ci; ++ci) {
        const T* xslab = xn->value.data() + (static_cast<std::size_t>(b) * g.Ci + ci) * in_chan;
        const T* wslab = wn->value.data() +
                         (static_cast<std::size_t>(co) * g.Ci + ci) *
                             (static_cast<std::size_t>(g.KZ) * g.KY * g.KX);
        for (int kz = 0; kz < g.KZ; ++kz) {
          const int zoff = kz - g.PZ;
          const auto rz = ad::conv_range(g.OZ, g.Z, zoff, g.stride);
          for (int ky = 0; ky < g.KY; ++ky) {
            const int yoff = ky - g.PY;
            const auto ry = ad::conv_range(g.OY, g.Y, yoff, g.stride);
            for (int kx = 0; kx < g.KX; ++kx) {
              const int xoff = kx - g.PX;
              const auto rx = ad::conv_range(g.OX, g.X, xoff, g.stride);
              const T w = wslab[(static_cast<std::size_t>(kz) * g.KY + ky) * g.KX + kx];
              for (int oz = rz.lo; oz < rz.hi; ++oz) {
                const int iz = oz * g.stride + zoff;
                for (int oy = ry.lo; oy < ry.hi; ++oy) {
                  const int iy = oy * g.stride + yoff;
                  T* __restrict__ orow = oslab + (static_cast<std::size_t>(oz) * g.OY + oy) * g.OX;
                  const T* __restrict__ xrow =
                      xslab + (static_cast<std::size_t>(iz) * g.Y + iy) * g.X + xoff;
                  if (g.stride == 1) {
                    for (int ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += w * xrow[ox];
                  } else {
                    for (int ox = rx.lo; ox < rx.hi; ++ox)
                      orow[ox] += w * xrow[static_cast<std::size_t>(ox) * g.stride];
                  }
                }
              }
            }
          }
        }
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, Dim3 window, Dim3 stride) {
  ad::check_rank(input.shape(), 5, "maxpool3d");
  const int B = input.shape()[0], C = input.shape()[1];
  const int Z = input.shape()[2], Y = input.shape()[3], X = input.shape()[4];
  if (window.z > Z || window.y > Y || window.x > X)
    throw data_error("maxpool3d: window " + window.to_string() + " larger than input extent " +
                     std::to_string(Z) + "x" + std::to_string(Y) + "x" + std::to_string(X));
  if (stride.z < 1 || stride.y < 1 || stride.x < 1)
    throw data_error("maxpool3d: stride must be >= 1");
  const int OZ = (Z - window.z) / stride.z + 1;
  const int OY = (Y - window.y) / stride.y + 1;
  const int OX = (X - window.x) / stride.x + 1;

  auto xn = input.node();
  const std::size_t in_chan = static_cast<std::size_t>(Z) * Y * X;
  const std::size_t out_chan = static_cast<std::size_t>(OZ) * OY * OX;
  // argmax linear index (within the input channel slab) per output element;
  // ties break toward the lowest linear index for deterministic gradients
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(
      static_cast<std::size_t>(B) * C * out_chan);

  auto backprop = [xn, argmax, B, C, in_chan, out_chan](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t slab = static_cast<std::size_t>(b) * C + c;
        const T* g = self.grad.data() + slab * out_chan;
        T* dx = xn->grad.data() + slab * in_chan;
        const std::uint32_t* am = argmax->data() + slab * out_chan;
        for (std::size_t i = 0; i < out_chan; ++i) dx[am[i]] += g[i];
      }
  };
  Tensor<T> out = ad::make_op<T>(Shape::of({B, C, OZ, OY, OX}), {xn}, backprop);
  auto& ov = out.values();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t slab = static_cast<std::size_t>(b) * C + c;
      const T* xs = xn->value.data() + slab * in_chan;
      T* os = ov.data() + slab * out_chan;
      std::uint32_t* am = argmax->data() + slab * out_chan;
      std::size_t o = 0;
      for (int oz = 0; oz < OZ; ++oz)
        for (int oy = 0; oy < OY; ++oy)
          for (int ox = 0; ox < OX; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::uint32_t best_i = 0;
            for (int kz = 0; kz < window.z; ++kz)
              for (int ky = 0; ky < window.y; ++ky)
                for (int kx = 0; kx < window.x; ++kx) {
                  const int iz = oz * stride.z + kz;
                  const int iy = oy * stride.y + ky;
                  const int ix = ox * stride.x + kx;
                  const std::size_t ii = (static_cast<std::size_t>(iz) * Y + iy) * X + ix;
                  if (xs[ii] > best) {
                    best = xs[ii];
                    best_i = static_cast<std::uint32_t>(ii);
                  }
                }
            os[o] = best;
            am[o] = best_i;
          }
    }
  return out;
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, Dim3 window) {
  return maxpool3d(input, window, window);
}

// global average pool over all spatial axes: [B,C,Z,Y,X] -> [B,C]
template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& input) {
  ad::check_rank(input.shape(), 5, "avgpool_global");
  const int B = input.shape()[0], C = input.shape()[1];
  const std::size_t spatial = static_cast<std::size_t>(input.shape()[2]) * input.shape()[3] *
                              input.shape()[4];
  auto xn = input.node();
  auto backprop = [xn, B, C, spatial](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T inv = T(1) / static_cast<T>(spatial);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T g = self.grad[static_cast<std::size_t>(b) * C + c] * inv;
        T* dx = xn->grad.data() + (static_cast<std::size_t>(b) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) dx[i] += g;
      }
  };
  Tensor<T> out = ad::make_op<T>(Shape::of({B, C}), {xn}, backprop);
  auto& ov = out.values();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xs = xn->value.data() + (static_cast<std::size_t>(b) * C + c) * spatial;
      T acc = T(0);
      for (std::size_t i = 0; i < spatial; ++i) acc += xs[i];
      ov[static_cast<std::size_t>(b) * C + c] = acc / static_cast<T>(spatial);
    }
  return out;
}

// ---------------------------------------------------------------------------
// batch normalization

// Running statistics live with the model, not the graph.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  void reset(int channels) {
    running_mean.assign(static_cast<std::size_t>(channels), T(0));
    running_var.assign(static_cast<std::size_t>(channels), T(1));
    initialized = false;
  }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// Train mode normalizes with batch statistics (per channel over batch and
// space, divisor N) and updates the running stats; eval mode normalizes with
// the running stats and requires at least one prior train-mode pass.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                    BatchNormState<T>& state, Mode mode) {
  ad::check_rank(x.shape(), 5, "batchnorm");
  const int B = x.shape()[0], C = x.shape()[1];
  const std::size_t spatial = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3] * x.shape()[4];
  const std::size_t per_chan = static_cast<std::size_t>(B) * spatial;
  if (scale.shape().rank != 1 || scale.shape()[0] != C || shift.shape().rank != 1 ||
      shift.shape()[0] != C)
    throw data_error("batchnorm: scale/shift must be per-channel vectors of width " +
                     std::to_string(C));
  if (static_cast<int>(state.running_mean.size()) != C) state.reset(C);
  if (mode == Mode::Eval && !state.initialized)
    throw numeric_error("batchnorm: eval before any train step (running stats uninitialized)");

  auto xn = x.node(), sn = scale.node(), bn = shift.node();
  auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
  const bool save_ctx = ad::grad_enabled() &&
                        (xn->requires_grad || sn->requires_grad || bn->requires_grad);
  auto xhat = std::make_shared<std::vector<T>>(save_ctx ? x.numel() : 0);

  if (mode == Mode::Train) {
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int b = 0; b < B; ++b) {
        const T* xs = xn->value.data() + (static_cast<std::size_t>(b) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) acc += xs[i];
      }
      const T m = acc / static_cast<T>(per_chan);
      T vacc = T(0);
      for (int b = 0; b < B; ++b) {
        const T* xs = xn->value.data() + (static_cast<std::size_t>(b) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const T d = xs[i] - m;
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(per_chan);
      (*mean)[static_cast<std::size_t>(c)] = m;
      (*inv_std)[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + static_cast<T>(kBatchNormEps));
      state.running_mean[static_cast<std::size_t>(c)] =
          static_cast<T>(kBatchNormMomentum) * state.running_mean[static_cast<std::size_t>(c)] +
          static_cast<T>(1.0 - kBatchNormMomentum) * m;
      state.running_var[static_cast<std::size_t>(c)] =
          static_cast<T>(kBatchNormMomentum) * state.running_var[static_cast<std::size_t>(c)] +
          static_cast<T>(1.0 - kBatchNormMomentum) * var;
    }
    state.initialized = true;
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<std::size_t>(c)] = state.running_mean[static_cast<std::size_t>(c)];
      (*inv_std)[static_cast<std::size_t>(c)] =
          T(1) / std::sqrt(state.running_var[static_cast<std::size_t>(c)] +
                           static_cast<T>(kBatchNormEps));
    }
  }

  const bool train_stats = mode == Mode::Train;
  auto backprop = [xn, sn, bn, mean, inv_std, xhat, B, C, spatial, per_chan,
                   train_stats](TensorNode<T>& self) {
    for (int c = 0; c < C; ++c) {
      const T gamma = sn->value[static_cast<std::size_t>(c)];
      const T istd = (*inv_std)[static_cast<std::size_t>(c)];
      // channel reductions
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int b = 0; b < B; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * spatial;
        const T* dy = self.grad.data() + off;
        const T* xh = xhat->data() + off;
        for (std::size_t i = 0; i < spatial; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * xh[i];
        }
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        sn->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[static_cast<std::size_t>(c)] += sum_dy;
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        const T n = static_cast<T>(per_chan);
        for (int b = 0; b < B; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * spatial;
          const T* dy = self.grad.data() + off;
          const T* xh = xhat->data() + off;
          T* dx = xn->grad.data() + off;
          if (train_stats) {
            for (std::size_t i = 0; i < spatial; ++i)
              dx[i] += gamma * istd * (dy[i] - sum_dy / n - xh[i] * (sum_dy_xhat / n));
          } else {
            for (std::size_t i = 0; i < spatial; ++i) dx[i] += gamma * istd * dy[i];
          }
        }
      }
    }
  };
  Tensor<T> out = ad::make_op<T>(x.shape(), {xn, sn, bn}, backprop);
  auto& ov = out.values();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * spatial;
      const T m = (*mean)[static_cast<std::size_t>(c)];
      const T istd = (*inv_std)[static_cast<std::size_t>(c)];
      const T gamma = sn->value[static_cast<std::size_t>(c)];
      const T beta = bn->value[static_cast<std::size_t>(c)];
      const T* xs = xn->value.data() + off;
      T* os = ov.data() + off;
      if (save_ctx) {
        T* xh = xhat->data() + off;
        for (std::size_t i = 0; i < spatial; ++i) {
          xh[i] = (xs[i] - m) * istd;
          os[i] = gamma * xh[i] + beta;
        }
      } else {
        for (std::size_t i = 0; i < spatial; ++i) os[i] = gamma * (xs[i] - m) * istd + beta;
      }
    }
  return out;
}

}  // namespace densestream
