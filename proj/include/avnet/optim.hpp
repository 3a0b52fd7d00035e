// Poly learning-rate decay and the parameter update rules.
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "avnet/tensor.hpp"

namespace avnet {

struct LrSchedule {
  double base_lr = 1e-4;
  double power = 0.9;
  std::size_t max_iter = 1000;
};

inline double poly_lr(const LrSchedule& s, std::size_t iteration) {
  if (iteration > s.max_iter) {
    throw std::out_of_range("poly_lr: iteration " + std::to_string(iteration) +
                            " past max_iter " + std::to_string(s.max_iter));
  }
  if (s.max_iter == 0) return s.base_lr;
  const double frac = static_cast<double>(iteration) / static_cast<double>(s.max_iter);
  return s.base_lr * std::pow(1.0 - frac, s.power);
}

enum class OptimizerKind { Momentum, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Momentum;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline std::string_view optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Adam ? "adam" : "momentum";
}

template <typename T>
using NamedParameters = std::vector<std::pair<std::string, Tensor<T>>>;

// Buffers are keyed by parameter name. Momentum uses `first` as its velocity;
// Adam uses both moments.
template <typename T>
struct OptimizerState {
  OptimizerConfig config;
  std::map<std::string, std::vector<T>> first;
  std::map<std::string, std::vector<T>> second;
  std::size_t iteration = 0;

  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig cfg) : config(cfg) {}
};

namespace detail {

template <typename T>
std::vector<T>& buffer_for(std::map<std::string, std::vector<T>>& buffers,
                           const std::string& name, std::size_t n) {
  auto& b = buffers[name];
  if (b.empty()) b.assign(n, T(0));
  if (b.size() != n) {
    throw std::invalid_argument("optimizer buffer for " + name + " has " +
                                std::to_string(b.size()) + " elements, parameter has " +
                                std::to_string(n));
  }
  return b;
}

template <typename T>
void require_grad(const std::string& name, const Tensor<T>& p) {
  if (p.requires_grad() && !p.has_grad()) {
    throw AutodiffError("optimizer step: parameter " + name + " has no gradient");
  }
}

}  // namespace detail

// v <- mu*v + g; p <- p - lr*v; gradients are zeroed afterwards.
template <typename T>
void sgd_step(NamedParameters<T>& params, OptimizerState<T>& state, double lr) {
  for (const auto& [name, p] : params) detail::require_grad(name, p);
  const T mu = static_cast<T>(state.config.momentum);
  const T step = static_cast<T>(lr);
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& v = detail::buffer_for(state.first, name, p.numel());
    auto data = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      data[i] -= step * v[i];
    }
    p.zero_grad();
  }
  ++state.iteration;
}

template <typename T>
void adam_step(NamedParameters<T>& params, OptimizerState<T>& state, double lr) {
  for (const auto& [name, p] : params) detail::require_grad(name, p);
  const OptimizerConfig& c = state.config;
  const double t = static_cast<double>(state.iteration + 1);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& m = detail::buffer_for(state.first, name, p.numel());
    auto& v = detail::buffer_for(state.second, name, p.numel());
    auto data = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / correction1;
      const double vhat = static_cast<double>(v[i]) / correction2;
      data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + c.epsilon));
    }
    p.zero_grad();
  }
  ++state.iteration;
}

template <typename T>
void optimizer_step(NamedParameters<T>& params, OptimizerState<T>& state, double lr) {
  if (state.config.kind == OptimizerKind::Adam) {
    adam_step(params, state, lr);
  } else {
    sgd_step(params, state, lr);
  }
}

}  // namespace avnet
