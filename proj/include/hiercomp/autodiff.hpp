#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in creation order, which
// is already a topological order, so backward() is a single reverse sweep.
// Parameters live outside the tape; their gradients accumulate into
// Parameter::grad across backward calls until zero_grad().

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "hiercomp/tensor.hpp"

namespace hiercomp {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward pass reaches it

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const noexcept { return grad.size() == value.size() && !value.empty(); }
  void zero_grad() {
    if (has_grad()) grad.fill(T{0});
  }
};

class DetachedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool attached() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const {
    if (!tape_) throw DetachedError("tensor is not attached to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape().value(id_); }
  const Shape& shape() const { return value().shape(); }
  const Tensor<T>& grad() const { return tape().grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  // Called with the tape and the id of the node that owns the closure.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }
  // Leaf whose gradient is wanted (inputs in gradient checks).
  Var<T> variable(Tensor<T> v) { return push(std::move(v), true, {}); }
  Var<T> parameter(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> push(Tensor<T> v, bool requires_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, zero-initialized on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    Tensor<T>& g = n.param ? n.param->grad : n.grad;
    const Tensor<T>& v = n.param ? n.param->value : n.value;
    if (g.size() != v.size() || g.empty()) g = Tensor<T>(v.shape());
    return g;
  }

  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    const Tensor<T>& g = n.param ? n.param->grad : n.grad;
    return !g.empty();
  }

  void backward(const Var<T>& loss) {
    if (!loss.attached() || &loss.tape() != this)
      throw DetachedError("backward: loss is not recorded on this tape");
    if (!requires_grad(loss.id()))
      throw DetachedError("backward: loss does not depend on any differentiable input");
    if (value(loss.id()).size() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + to_string(value(loss.id()).shape()));
    grad(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // deque: references survive push_back
};

namespace detail {

template <class T>
Tape<T>& common_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
  return a.tape();
}

}  // namespace detail


// y = x W^T + b;  x [B x in], W [out x in], b [out].
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Tape<T>& tape = detail::common_tape(x, w);
  detail::common_tape(x, b);
  const Tensor<T>& X = x.value();
  const Tensor<T>& W = w.value();
  const Tensor<T>& Bv = b.value();
  require_shape(X.rank() == 2 && W.rank() == 2 && X.dim(1) == W.dim(1), "dense", X.shape(), W.shape());
  require_shape(Bv.rank() == 1 && Bv.dim(0) == W.dim(0), "dense bias", W.shape(), Bv.shape());
  const auto batch = static_cast<Eigen::Index>(X.dim(0));
  const auto in = static_cast<Eigen::Index>(X.dim(1));
  const auto out = static_cast<Eigen::Index>(W.dim(0));

  Tensor<T> Y({X.dim(0), W.dim(0)});
  MatrixMap<T> y(Y.data(), batch, out);
  y.noalias() = ConstMatrixMap<T>(X.data(), batch, in) * ConstMatrixMap<T>(W.data(), out, in).transpose();
  y.rowwise() += ConstVectorMap<T>(Bv.data(), out).transpose();

  const std::size_t xi = x.id(), wi = w.id(), bi = b.id();
  const bool rg = tape.requires_grad(xi) || tape.requires_grad(wi) || tape.requires_grad(bi);
  return tape.push(std::move(Y), rg, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dYt = t.grad(self);
    ConstMatrixMap<T> dy(dYt.data(), batch, out);
    if (t.requires_grad(xi)) {
      MatrixMap<T> dx(t.grad(xi).data(), batch, in);
      dx.noalias() += dy * ConstMatrixMap<T>(t.value(wi).data(), out, in);
    }
    if (t.requires_grad(wi)) {
      MatrixMap<T> dw(t.grad(wi).data(), out, in);
      dw.noalias() += dy.transpose() * ConstMatrixMap<T>(t.value(xi).data(), batch, in);
    }
    if (t.requires_grad(bi)) VectorMap<T>(t.grad(bi).data(), out) += dy.colwise().sum().transpose();
  });
}

struct Conv2dGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

inline std::size_t conv_output_side(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (in + 2 * pad < kernel)
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

// cols[(c*k + kr)*k + kc][oh*OW + ow] = x[c][oh*s - p + kr][ow*s - p + kc]
template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* cols) {
  const std::size_t k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t kr = 0; kr < k; ++kr)
      for (std::size_t kc = 0; kc < k; ++kc) {
        T* row = cols + ((c * k + kr) * k + kc) * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kr) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kc) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.in_h) &&
                                iw < static_cast<std::ptrdiff_t>(g.in_w);
            row[oh * g.out_w + ow] =
                inside ? x[(c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w + static_cast<std::size_t>(iw)] : T{0};
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const Conv2dGeometry& g, T* dx) {
  const std::size_t k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t kr = 0; kr < k; ++kr)
      for (std::size_t kc = 0; kc < k; ++kc) {
        const T* row = cols + ((c * k + kr) * k + kc) * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kr) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kc) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            dx[(c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w + static_cast<std::size_t>(iw)] += row[oh * g.out_w + ow];
          }
        }
      }
}

}  // namespace detail

// x [B x C x H x W], w [OC x C x k x k], b [OC] -> [B x OC x OH x OW]
// with OH = floor((H + 2p - k) / s) + 1.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride = 1, std::size_t pad = 0) {
  Tape<T>& tape = detail::common_tape(x, w);
  detail::common_tape(x, b);
  const Tensor<T>& X = x.value();
  const Tensor<T>& W = w.value();
  const Tensor<T>& Bv = b.value();
  require_shape(X.rank() == 4 && W.rank() == 4 && W.dim(1) == X.dim(1) && W.dim(2) == W.dim(3), "conv2d",
                X.shape(), W.shape());
  require_shape(Bv.rank() == 1 && Bv.dim(0) == W.dim(0), "conv2d bias", W.shape(), Bv.shape());

  Conv2dGeometry g{X.dim(0), X.dim(1), X.dim(2), X.dim(3), W.dim(0), W.dim(2), stride, pad, 0, 0};
  g.out_h = conv_output_side(g.in_h, g.kernel, stride, pad);
  g.out_w = conv_output_side(g.in_w, g.kernel, stride, pad);

  const auto oc = static_cast<Eigen::Index>(g.out_channels);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto npos = static_cast<Eigen::Index>(g.positions());
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_size = g.out_channels * g.positions();

  Tensor<T> Y({g.batch, g.out_channels, g.out_h, g.out_w});
  std::vector<T> cols(g.patch() * g.positions());
  ConstMatrixMap<T> wm(W.data(), oc, patch);
  ConstMatrixMap<T> cm(cols.data(), patch, npos);
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::im2col(X.data() + n * in_size, g, cols.data());
    MatrixMap<T> y(Y.data() + n * out_size, oc, npos);
    y.noalias() = wm * cm;
    y.colwise() += ConstVectorMap<T>(Bv.data(), oc);
  }

  const std::size_t xi = x.id(), wi = w.id(), bi = b.id();
  const bool rg = tape.requires_grad(xi) || tape.requires_grad(wi) || tape.requires_grad(bi);
  return tape.push(std::move(Y), rg, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.grad(self);
    const Tensor<T>& Xv = t.value(xi);
    ConstMatrixMap<T> wmat(t.value(wi).data(), oc, patch);
    std::vector<T> c(g.patch() * g.positions());
    std::vector<T> dc(t.requires_grad(xi) ? c.size() : 0);
    for (std::size_t n = 0; n < g.batch; ++n) {
      ConstMatrixMap<T> dy(dY.data() + n * out_size, oc, npos);
      if (t.requires_grad(wi)) {
        detail::im2col(Xv.data() + n * in_size, g, c.data());
        MatrixMap<T> dw(t.grad(wi).data(), oc, patch);
        dw.noalias() += dy * ConstMatrixMap<T>(c.data(), patch, npos).transpose();
      }
      if (t.requires_grad(bi)) VectorMap<T>(t.grad(bi).data(), oc) += dy.rowwise().sum();
      if (t.requires_grad(xi)) {
        MatrixMap<T>(dc.data(), patch, npos).noalias() = wmat.transpose() * dy;
        detail::col2im_add(dc.data(), g, t.grad(xi).data() + n * in_size);
      }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& X = x.value();
  Tensor<T> Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] > T{0} ? X[i] : T{0};
  const std::size_t xi = x.id();
  return tape.push(std::move(Y), tape.requires_grad(xi), [xi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.grad(self);
    const Tensor<T>& Xv = t.value(xi);
    Tensor<T>& dX = t.grad(xi);
    for (std::size_t i = 0; i < Xv.size(); ++i)
      if (Xv[i] > T{0}) dX[i] += dY[i];
  });
}

// 2x2 window, stride 2, floor semantics for odd sides.
template <class T>
Var<T> maxpool2x2(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& X = x.value();
  if (X.rank() != 4) throw ShapeError("maxpool2x2: expected [B x C x H x W], got " + to_string(X.shape()));
  const std::size_t planes = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2x2: input too small " + to_string(X.shape()));
  Tensor<T> Y({X.dim(0), X.dim(1), oh, ow});
  std::vector<std::size_t> argmax(Y.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = p * h * w + (2 * r) * w + 2 * c;
        for (std::size_t dr = 0; dr < 2; ++dr)
          for (std::size_t dc = 0; dc < 2; ++dc) {
            const std::size_t idx = p * h * w + (2 * r + dr) * w + 2 * c + dc;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (p * oh + r) * ow + c;
        Y[o] = X[best];
        argmax[o] = best;
      }
  const std::size_t xi = x.id();
  return tape.push(std::move(Y), tape.requires_grad(xi),
                   [xi, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& dY = t.grad(self);
                     Tensor<T>& dX = t.grad(xi);
                     for (std::size_t o = 0; o < argmax.size(); ++o) dX[argmax[o]] += dY[o];
                   });
}

// [B x ...] -> [B x prod(...)]
template <class T>
Var<T> flatten(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& X = x.value();
  if (X.rank() < 1) throw ShapeError("flatten: scalar input");
  const std::size_t batch = X.dim(0);
  Tensor<T> Y = X.reshaped({batch, batch ? X.size() / batch : 0});
  const std::size_t xi = x.id();
  return tape.push(std::move(Y), tape.requires_grad(xi), [xi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.grad(self);
    Tensor<T>& dX = t.grad(xi);
    for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i];
  });
}

// [B x C x H x W] -> [B x C], mean over spatial positions.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& X = x.value();
  if (X.rank() != 4) throw ShapeError("global_avg_pool: expected [B x C x H x W], got " + to_string(X.shape()));
  const std::size_t planes = X.dim(0) * X.dim(1), hw = X.dim(2) * X.dim(3);
  Tensor<T> Y({X.dim(0), X.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += X[p * hw + i];
    Y[p] = static_cast<T>(acc / static_cast<double>(hw));
  }
  const std::size_t xi = x.id();
  return tape.push(std::move(Y), tape.requires_grad(xi), [xi, planes, hw](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.grad(self);
    Tensor<T>& dX = t.grad(xi);
    const T scale = T{1} / static_cast<T>(hw);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < hw; ++i) dX[p * hw + i] += dY[p] * scale;
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  const Tensor<T>& X = x.value();
  double acc = 0;
  for (auto v : X.values()) acc += v;
  const std::size_t xi = x.id();
  return tape.push(Tensor<T>({1}, static_cast<T>(acc)), tape.requires_grad(xi), [xi](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(xi).values()) v += g;
  });
}

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  Tape<T>& tape = logits.tape();
  const Tensor<T>& L = logits.value();
  if (L.rank() != 2) throw ShapeError("cross_entropy: expected [B x K] logits, got " + to_string(L.shape()));
  const std::size_t batch = L.dim(0), k = L.dim(1);
  if (labels.size() != batch)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  if (batch == 0) throw ShapeError("cross_entropy: empty batch");
  Tensor<T> probs(L.shape());
  double total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw std::out_of_range("cross_entropy: class " + std::to_string(label) + " outside [0, " +
                              std::to_string(k) + ")");
    const T* row = L.data() + b * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, row[j]);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
    total += log_z - static_cast<double>(row[label]);
  }
  const std::size_t li = logits.id();
  std::vector<int> owned(labels.begin(), labels.end());
  return tape.push(Tensor<T>({1}, static_cast<T>(total / static_cast<double>(batch))), tape.requires_grad(li),
                   [li, batch, k, probs = std::move(probs), owned = std::move(owned)](Tape<T>& t, std::size_t self) {
                     const T scale = t.grad(self)[0] / static_cast<T>(batch);
                     Tensor<T>& dL = t.grad(li);
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t j = 0; j < k; ++j) {
                         const T onehot = static_cast<std::size_t>(owned[b]) == j ? T{1} : T{0};
                         dL[b * k + j] += (probs[b * k + j] - onehot) * scale;
                       }
                   });
}

// Mean of squared differences over all elements.
template <class T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  Tape<T>& tape = pred.tape();
  const Tensor<T>& P = pred.value();
  require_shape(P.shape() == target.shape(), "mse", P.shape(), target.shape());
  if (P.empty()) throw ShapeError("mse: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = static_cast<double>(P[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  const double n = static_cast<double>(P.size());
  const std::size_t pi = pred.id();
  return tape.push(Tensor<T>({1}, static_cast<T>(acc / n)), tape.requires_grad(pi),
                   [pi, target, n](Tape<T>& t, std::size_t self) {
                     const T scale = static_cast<T>(2.0 / n) * t.grad(self)[0];
                     const Tensor<T>& Pv = t.value(pi);
                     Tensor<T>& dP = t.grad(pi);
                     for (std::size_t i = 0; i < Pv.size(); ++i) dP[i] += (Pv[i] - target[i]) * scale;
                   });
}

}  // namespace hiercomp
