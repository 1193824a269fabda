#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hiercomp/autodiff.hpp"

namespace hiercomp {

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double dampening = 0.0;
  bool nesterov = true;

  void validate() const {
    if (momentum < 0 || weight_decay < 0 || dampening < 0)
      throw std::invalid_argument("sgd: hyperparameters must be non-negative");
    if (nesterov && (momentum <= 0 || dampening != 0))
      throw std::invalid_argument("sgd: nesterov requires momentum > 0 and zero dampening");
  }
};

// Momentum buffers, one per parameter, created on the first step.
template <class T>
struct OptimizerState {
  SgdConfig config;
  std::vector<Tensor<T>> buffers;

  explicit OptimizerState(SgdConfig c = {}) : config(c) { config.validate(); }
};

namespace detail {

// One element of the update:
//   g   = grad + wd * param
//   buf = momentum * buf + (1 - dampening) * g      (buf = g on the first step)
//   d   = g + momentum * buf   if nesterov, else buf
//   param -= lr * d
template <class T>
inline void sgd_update(T& param, T grad, T& buf, bool first, const SgdConfig& c, T lr) {
  const T g = grad + static_cast<T>(c.weight_decay) * param;
  T d = g;
  if (c.momentum != 0) {
    buf = first ? g : static_cast<T>(c.momentum) * buf + static_cast<T>(1 - c.dampening) * g;
    d = c.nesterov ? g + static_cast<T>(c.momentum) * buf : buf;
  }
  param -= lr * d;
}

}  // namespace detail

template <class T>
void sgd_step(std::span<Parameter<T>> params, OptimizerState<T>& state, double lr) {
  if (!(lr >= 0)) throw std::invalid_argument("sgd: learning rate must be non-negative");
  for (const auto& p : params)
    if (!p.has_grad()) throw std::logic_error("sgd: parameter '" + p.name + "' has no gradient");
  const bool first = state.buffers.empty();
  if (first) {
    state.buffers.reserve(params.size());
    for (const auto& p : params) state.buffers.emplace_back(p.value.shape());
  } else if (state.buffers.size() != params.size()) {
    throw std::logic_error("sgd: optimizer state built for a different parameter list");
  }
  const T step = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = params[k];
    Tensor<T>& buf = state.buffers[k];
    if (buf.shape() != p.value.shape()) throw ShapeError("sgd: momentum buffer shape mismatch for " + p.name);
    T* v = p.value.data();
    const T* g = p.grad.data();
    T* b = buf.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) detail::sgd_update(v[i], g[i], b[i], first, state.config, step);
  }
}

template <class T>
void zero_grad(std::span<Parameter<T>> params) {
  for (auto& p : params) p.zero_grad();
}

// Step schedule: full rate for the first quarter of the epochs, half until
// the midpoint, a quarter afterwards (boundaries rounded up).
struct LrSchedule {
  double base_lr = 0.1;
  int total_epochs = 1;

  void validate() const {
    if (!(base_lr > 0)) throw std::invalid_argument("lr schedule: base_lr must be positive");
    if (total_epochs < 1) throw std::invalid_argument("lr schedule: total_epochs must be >= 1");
  }
};

inline double lr_at(const LrSchedule& s, int epoch) {
  s.validate();
  if (epoch < 0 || epoch >= s.total_epochs)
    throw std::out_of_range("lr schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(s.total_epochs) + ")");
  const int first_cut = (s.total_epochs + 3) / 4;   // ceil(0.25 * total)
  const int second_cut = (s.total_epochs + 1) / 2;  // ceil(0.50 * total)
  if (epoch < first_cut) return s.base_lr;
  if (epoch < second_cut) return s.base_lr / 2;
  return s.base_lr / 4;
}

// eta = 0.1 * lr_network_adjustment * dataset_learning_factor
inline double recipe_base_lr(double network_adjustment, double dataset_factor) {
  return 0.1 * network_adjustment * dataset_factor;
}

}  // namespace hiercomp
