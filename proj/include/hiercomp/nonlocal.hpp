#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "data.hpp"
#include "optim.hpp"
#include "random.hpp"

namespace hiercomp {

// Sparse structure of a convolution written as a dense matrix
// [out_channels*out_side^2 x in_channels*in_side^2], stored row-wise (CSR).
// Entries are either convolutional (one kernel coordinate each) or nonlocal
// additions; everything else is a structural zero.
struct ToeplitzLayout {
  std::size_t in_channels = 0, in_side = 0, out_channels = 0, kernel = 0, out_side = 0;
  std::vector<std::uint64_t> row_ptr;  // rows + 1
  std::vector<std::uint32_t> col;
  // Flattened kernel index oc*(ic*k*k) + (ic*k + ky)*k + kx, or -1 for a nonlocal entry.
  std::vector<std::int32_t> conv_coord;

  std::size_t rows() const { return out_channels * out_side * out_side; }
  std::size_t cols() const { return in_channels * in_side * in_side; }
  std::size_t dense_size() const { return rows() * cols(); }
  std::size_t nnz() const { return col.size(); }
  std::size_t conv_count() const {
    return static_cast<std::size_t>(std::count_if(conv_coord.begin(), conv_coord.end(), [](auto c) { return c >= 0; }));
  }
  std::size_t nonlocal_count() const { return nnz() - conv_count(); }
  bool is_nonlocal(std::size_t e) const { return conv_coord[e] < 0; }

  std::vector<std::pair<std::size_t, std::size_t>> entries(bool nonlocal) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::uint64_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e)
        if (is_nonlocal(e) == nonlocal) out.emplace_back(r, col[e]);
    return out;
  }
  std::vector<std::pair<std::size_t, std::size_t>> conv_index() const { return entries(false); }
  std::vector<std::pair<std::size_t, std::size_t>> nonlocal_index() const { return entries(true); }
};

// Layout of a stride-1, unpadded k x k convolution on an in_side^2 input.
inline ToeplitzLayout toeplitz_layout(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                                      std::size_t in_side) {
  if (kernel == 0 || kernel > in_side) throw ShapeError("toeplitz: kernel does not fit the input");
  ToeplitzLayout L{in_channels, in_side, out_channels, kernel, in_side - kernel + 1, {}, {}, {}};
  if (L.dense_size() / std::max<std::size_t>(L.cols(), 1) != L.rows() || L.cols() > UINT32_MAX ||
      out_channels * in_channels * kernel * kernel > static_cast<std::size_t>(INT32_MAX))
    throw std::overflow_error("toeplitz: layout too large");
  const std::size_t os = L.out_side, patch = in_channels * kernel * kernel;
  L.row_ptr.reserve(L.rows() + 1);
  L.col.reserve(L.rows() * patch);
  L.conv_coord.reserve(L.rows() * patch);
  L.row_ptr.push_back(0);
  for (std::size_t oc = 0; oc < out_channels; ++oc)
    for (std::size_t y = 0; y < os; ++y)
      for (std::size_t x = 0; x < os; ++x) {
        // (ic, ky, kx) in lexicographic order gives increasing columns.
        for (std::size_t ic = 0; ic < in_channels; ++ic)
          for (std::size_t ky = 0; ky < kernel; ++ky)
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              L.col.push_back(static_cast<std::uint32_t>(ic * in_side * in_side + (y + ky) * in_side + x + kx));
              L.conv_coord.push_back(static_cast<std::int32_t>(oc * patch + (ic * kernel + ky) * kernel + kx));
            }
        L.row_ptr.push_back(L.col.size());
      }
  return L;
}

// Values aligned with the layout entries, plus one bias per row.
template <class T>
struct NonlocalLayer {
  ToeplitzLayout layout;
  Parameter<T> values;  // [nnz]
  Parameter<T> bias;    // [rows]
};

// Dense-matrix form of a convolution: weights [oc x ic x k x k], bias [oc].
template <class T>
NonlocalLayer<T> conv_to_toeplitz(const Tensor<T>& weight, const Tensor<T>& bias, std::size_t in_side,
                                  const std::string& name = "toeplitz") {
  require_shape(weight.rank() == 4 && weight.dim(2) == weight.dim(3), "conv_to_toeplitz", weight.shape(),
                Shape{in_side, in_side});
  require_shape(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv_to_toeplitz bias", weight.shape(),
                bias.shape());
  NonlocalLayer<T> out;
  out.layout = toeplitz_layout(weight.dim(1), weight.dim(0), weight.dim(2), in_side);
  const auto& L = out.layout;
  out.values = Parameter<T>{name + ".values", Tensor<T>({L.nnz()})};
  out.bias = Parameter<T>{name + ".bias", Tensor<T>({L.rows()})};
  for (std::size_t e = 0; e < L.nnz(); ++e) out.values.value[e] = weight[static_cast<std::size_t>(L.conv_coord[e])];
  const std::size_t per_channel = L.out_side * L.out_side;
  for (std::size_t r = 0; r < L.rows(); ++r) out.bias.value[r] = bias[r / per_channel];
  return out;
}

// Promotes each structural zero independently with probability p. New
// entries are drawn like dense-layer weights, U(-1/sqrt(cols), 1/sqrt(cols)).
// Zeros are visited in row-major order with geometric skips, which has the
// same distribution as one Bernoulli draw per zero.
template <class T>
void add_nonlocal(NonlocalLayer<T>& layer, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("add_nonlocal: probability must be in [0,1]");
  ToeplitzLayout& L = layer.layout;
  if (p == 0.0) return;
  Rng rng(mix_seed(seed, 0x4E4C));
  const double bound = 1.0 / std::sqrt(static_cast<double>(L.cols()));
  const double log_q = std::log1p(-p);
  auto skip = [&]() -> std::uint64_t {
    if (p == 1.0) return 0;
    const double u = 1.0 - uniform01(rng);  // (0, 1]
    const double k = std::floor(std::log(u) / log_q);
    return k >= 9e18 ? std::numeric_limits<std::uint64_t>::max() / 2 : static_cast<std::uint64_t>(k);
  };

  ToeplitzLayout next = L;
  next.row_ptr.assign(1, 0);
  next.col.clear();
  next.conv_coord.clear();
  std::vector<T> values, old(layer.values.value.values().begin(), layer.values.value.values().end());
  values.reserve(old.size());

  std::uint64_t zero_base = 0;    // ordinal of the first zero in the current row
  std::uint64_t target = skip();  // ordinal of the next promoted zero
  for (std::size_t r = 0; r < L.rows(); ++r) {
    const std::uint64_t begin = L.row_ptr[r], end = L.row_ptr[r + 1];
    const std::uint64_t zeros = L.cols() - (end - begin);
    std::vector<std::uint32_t> added;
    while (target < zero_base + zeros) {
      // Map the zero ordinal within the row to a column by stepping over
      // the (sorted) occupied columns.
      std::uint64_t c = target - zero_base;
      for (std::uint64_t e = begin; e < end && L.col[e] <= c; ++e) ++c;
      added.push_back(static_cast<std::uint32_t>(c));
      target += 1 + skip();
    }
    zero_base += zeros;
    std::uint64_t e = begin;
    std::size_t a = 0;
    while (e < end || a < added.size()) {
      if (a == added.size() || (e < end && L.col[e] < added[a])) {
        next.col.push_back(L.col[e]);
        next.conv_coord.push_back(L.conv_coord[e]);
        values.push_back(old[e]);
        ++e;
      } else {
        next.col.push_back(added[a]);
        next.conv_coord.push_back(-1);
        values.push_back(static_cast<T>(uniform(rng, -bound, bound)));
        ++a;
      }
    }
    next.row_ptr.push_back(next.col.size());
  }
  L = std::move(next);
  const std::size_t n = values.size();
  layer.values.value = Tensor<T>({n}, std::move(values));
  layer.values.grad = {};
}

template <class T>
Tensor<T> to_dense(const NonlocalLayer<T>& layer) {
  const auto& L = layer.layout;
  Tensor<T> out({L.rows(), L.cols()});
  for (std::size_t r = 0; r < L.rows(); ++r)
    for (std::uint64_t e = L.row_ptr[r]; e < L.row_ptr[r + 1]; ++e) out[r * L.cols() + L.col[e]] = layer.values.value[e];
  return out;
}

// y[b][r] = bias[r] + sum over entries (r, c) of v * x[b][c];  x [B x cols].
template <class T>
Var<T> masked_dense(const Var<T>& x, NonlocalLayer<T>& layer) {
  Tape<T>& tape = x.tape();
  const Var<T> v = tape.parameter(layer.values);
  const Var<T> bvar = tape.parameter(layer.bias);
  const ToeplitzLayout* L = &layer.layout;
  const Tensor<T>& X = x.value();
  require_shape(X.rank() == 2 && X.dim(1) == L->cols(), "masked_dense", X.shape(), Shape{L->rows(), L->cols()});
  const std::size_t B = X.dim(0), rows = L->rows(), cols = L->cols();

  // Work batch-minor so each entry touches two contiguous rows of length B.
  RowMatrix<T> xt = ConstMatrixMap<T>(X.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(cols)).transpose();
  RowMatrix<T> yt(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(B));
  const T* vals = layer.values.value.data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto yr = yt.row(static_cast<Eigen::Index>(r));
    yr.setConstant(layer.bias.value[r]);
    for (std::uint64_t e = L->row_ptr[r]; e < L->row_ptr[r + 1]; ++e)
      yr.noalias() += vals[e] * xt.row(static_cast<Eigen::Index>(L->col[e]));
  }
  Tensor<T> Y({B, rows});
  MatrixMap<T>(Y.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(rows)) = yt.transpose();

  const std::size_t xi = x.id(), vi = v.id(), bi = bvar.id();
  return tape.push(std::move(Y), true, [=, xt = std::move(xt)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.grad(self);
    const RowMatrix<T> dyt =
        ConstMatrixMap<T>(dY.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(rows)).transpose();
    T* dv = t.grad(vi).data();
    T* db = t.grad(bi).data();
    const T* w = t.value(vi).data();
    const bool want_x = t.requires_grad(xi);
    RowMatrix<T> dxt;
    if (want_x) dxt = RowMatrix<T>::Zero(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(B));
    for (std::size_t r = 0; r < rows; ++r) {
      const auto gr = dyt.row(static_cast<Eigen::Index>(r));
      db[r] += gr.sum();
      for (std::uint64_t e = L->row_ptr[r]; e < L->row_ptr[r + 1]; ++e) {
        const auto c = static_cast<Eigen::Index>(L->col[e]);
        dv[e] += gr.dot(xt.row(c));
        if (want_x) dxt.row(c).noalias() += w[e] * gr;
      }
    }
    if (want_x)
      MatrixMap<T>(t.grad(xi).data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(cols)) += dxt.transpose();
  });
}

// Applies a gradient given on the dense [rows x cols] matrix: only the
// layout's entries move, structural zeros are never written.
template <class T>
void masked_step(NonlocalLayer<T>& layer, const Tensor<T>& dense_grad, OptimizerState<T>& state, double lr) {
  const auto& L = layer.layout;
  require_shape(dense_grad.shape() == Shape{L.rows(), L.cols()}, "masked_step", dense_grad.shape(),
                Shape{L.rows(), L.cols()});
  layer.values.grad = Tensor<T>(layer.values.value.shape());
  for (std::size_t r = 0; r < L.rows(); ++r)
    for (std::uint64_t e = L.row_ptr[r]; e < L.row_ptr[r + 1]; ++e)
      layer.values.grad[e] = dense_grad[r * L.cols() + L.col[e]];
  sgd_step(std::span<Parameter<T>>(&layer.values, 1), state, lr);
  layer.values.zero_grad();
}

// Frobenius norm of the nonlocal entries only.
template <class T>
double nonlocal_norm(const NonlocalLayer<T>& layer) {
  double s = 0;
  for (std::size_t e = 0; e < layer.layout.nnz(); ++e)
    if (layer.layout.is_nonlocal(e)) {
      const double w = static_cast<double>(layer.values.value[e]);
      s += w * w;
    }
  return std::sqrt(s);
}

// ---- the experiment -------------------------------------------------------

struct NonlocalConfig {
  double probability = 0.0005;
  int epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.01;
  SgdConfig sgd{0.9, 0.0, 0.0, false};
  std::vector<std::size_t> channels{3, 6, 12, 12};
  std::size_t kernel = 3;
  std::size_t hidden = 1024;
  std::uint64_t seed = 1;
  AugmentConfig augment;  // normalization only

  void validate() const {
    if (!(probability >= 0 && probability <= 1)) throw std::invalid_argument("nonlocal: probability must be in [0,1]");
    if (epochs < 0 || batch_size == 0 || !(lr > 0)) throw std::invalid_argument("nonlocal: bad training settings");
    if (channels.empty()) throw std::invalid_argument("nonlocal: need at least one layer");
    sgd.validate();
  }
};

// Four masked Toeplitz layers (ReLU) followed by a two-layer fully
// connected head, all on flattened inputs.
template <class T>
class NonlocalNet {
 public:
  explicit NonlocalNet(const NonlocalConfig& cfg) {
    std::size_t in_ch = kImageChannels, side = kImageSide;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      const std::size_t out_ch = cfg.channels[i], k = cfg.kernel;
      Rng rng(mix_seed(cfg.seed, 0xC0, i));
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
      Tensor<T> w({out_ch, in_ch, k, k}), b({out_ch});
      for (auto& x : w.values()) x = static_cast<T>(uniform(rng, -bound, bound));
      for (auto& x : b.values()) x = static_cast<T>(uniform(rng, -bound, bound));
      layers_.push_back(conv_to_toeplitz(w, b, side, "layer" + std::to_string(i + 1)));
      add_nonlocal(layers_.back(), cfg.probability, mix_seed(cfg.seed, 0xAD, i));
      in_ch = out_ch;
      side = side - k + 1;
    }
    const std::size_t flat = in_ch * side * side;
    auto make_fc = [&](std::size_t in, std::size_t out, int idx) {
      Rng rng(mix_seed(cfg.seed, 0xFC, static_cast<std::uint64_t>(idx)));
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      Parameter<T> w{"fc" + std::to_string(idx) + ".weight", Tensor<T>({out, in})};
      Parameter<T> b{"fc" + std::to_string(idx) + ".bias", Tensor<T>({out})};
      for (auto& x : w.value.values()) x = static_cast<T>(uniform(rng, -bound, bound));
      for (auto& x : b.value.values()) x = static_cast<T>(uniform(rng, -bound, bound));
      fc_.push_back(std::move(w));
      fc_.push_back(std::move(b));
    };
    make_fc(flat, cfg.hidden, 1);
    make_fc(cfg.hidden, kNumClasses, 2);
  }

  Var<T> forward(Tape<T>& tape, const Tensor<T>& images) {
    Var<T> x = tape.constant(images.reshaped({images.dim(0), images.size() / images.dim(0)}));
    for (auto& l : layers_) x = relu(masked_dense(x, l));
    x = relu(dense(x, tape.parameter(fc_[0]), tape.parameter(fc_[1])));
    return dense(x, tape.parameter(fc_[2]), tape.parameter(fc_[3]));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) {
      out.push_back(&l.values);
      out.push_back(&l.bias);
    }
    for (auto& p : fc_) out.push_back(&p);
    return out;
  }

  std::vector<NonlocalLayer<T>>& layers() { return layers_; }
  const std::vector<NonlocalLayer<T>>& layers() const { return layers_; }

 private:
  std::vector<NonlocalLayer<T>> layers_;
  std::vector<Parameter<T>> fc_;
};

struct NonlocalPoint {
  int epoch = 0;  // 0 = before training
  double nonlocal_norm = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
};

struct NonlocalResult {
  std::vector<NonlocalPoint> series;
  std::string status = "ok";
  std::string error;
  std::size_t first_layer_conv = 0;
  std::size_t first_layer_nonlocal = 0;
};

// Least-squares slope of norm against epoch.
inline double norm_slope(const std::vector<NonlocalPoint>& series) {
  const double n = static_cast<double>(series.size());
  if (series.size() < 2) return 0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : series) {
    sx += p.epoch;
    sy += p.nonlocal_norm;
    sxx += static_cast<double>(p.epoch) * p.epoch;
    sxy += p.epoch * p.nonlocal_norm;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

template <class T = float>
NonlocalResult run_nonlocal_experiment(const NonlocalConfig& cfg, const TaskDataset& train, std::ostream* log = nullptr,
                                       NonlocalNet<T>* net_out = nullptr) {
  cfg.validate();
  if (!is_classification(train.task)) throw std::invalid_argument("nonlocal: needs a classification dataset");
  NonlocalNet<T> net(cfg);
  NonlocalResult res;
  res.first_layer_conv = net.layers().front().layout.conv_count();
  res.first_layer_nonlocal = net.layers().front().layout.nonlocal_count();
  res.series.push_back({0, nonlocal_norm(net.layers().front())});

  auto ptrs = net.parameters();
  std::vector<OptimizerState<T>> states(ptrs.size(), OptimizerState<T>(cfg.sgd));
  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto order = epoch_order(train.size(), cfg.seed, static_cast<std::size_t>(epoch));
      double loss_sum = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const Batch b = make_batch(train, std::span<const std::size_t>(order.data() + start, end - start), cfg.augment,
                                   nullptr);
        Tape<T> tape;
        const Var<T> loss = cross_entropy(net.forward(tape, b.inputs.template cast<T>()), std::span<const int>(b.labels));
        const double l = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(l)) throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch));
        tape.backward(loss);
        for (std::size_t k = 0; k < ptrs.size(); ++k) {
          sgd_step(std::span<Parameter<T>>(ptrs[k], 1), states[k], cfg.lr);
          ptrs[k]->zero_grad();
        }
        loss_sum += l * static_cast<double>(end - start);
      }
      res.series.push_back({epoch + 1, nonlocal_norm(net.layers().front()), loss_sum / static_cast<double>(order.size())});
      if (log)
        *log << "nonlocal epoch " << epoch + 1 << "/" << cfg.epochs << " norm " << res.series.back().nonlocal_norm
             << " loss " << res.series.back().train_loss << std::endl;
    }
  } catch (const std::runtime_error& e) {
    res.status = "diverged";
    res.error = e.what();
  }
  if (net_out) *net_out = std::move(net);
  return res;
}

inline void write_nonlocal_csv(const std::string& path, const NonlocalResult& res) {
  std::ofstream out(path, std::ios::trunc);
  out << "epoch,nonlocal_norm,train_loss\n";
  for (const auto& p : res.series) {
    out << p.epoch << ',' << std::setprecision(12) << p.nonlocal_norm << ',';
    if (std::isfinite(p.train_loss)) out << std::setprecision(9) << p.train_loss;
    out << '\n';
  }
  if (!out) throw std::runtime_error("cannot write " + path);
}

}  // namespace hiercomp
