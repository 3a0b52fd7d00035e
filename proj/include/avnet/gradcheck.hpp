// Central finite-difference gradient checking.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "avnet/tensor.hpp"

namespace avnet {

template <typename T>
T relative_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) /
         std::max(T(1e-8), std::abs(analytic) + std::abs(numeric));
}

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Elements checked per tensor; 0 checks all of them.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 7;
  // When positive, also evaluates the unperturbed loss and skips elements
  // whose one-sided differences disagree by more than this relative amount.
  // Such points sit on a ReLU or max-pool kink within +-epsilon, where the
  // central difference measures neither one-sided derivative. A wrong
  // backward pass is not masked: at smooth points both sides agree with each
  // other but not with the analytic value.
  double kink_tolerance = 0.0;
};

template <typename T>
struct GradCheckReport {
  T worst = T(0);
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

// Compares the reverse-mode gradient of `loss_fn` with respect to each
// tensor in `wrt` against central differences. `loss_fn` must rebuild its
// graph on each call and read the current values of `wrt`. Returns the
// largest relative error seen, with counts of checked and skipped elements.
template <typename T>
GradCheckReport<T> gradient_check_report(const std::function<Tensor<T>()>& loss_fn,
                                         std::vector<Tensor<T>> wrt,
                                         const GradCheckOptions& opts = {}) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  backward(loss_fn());

  std::mt19937_64 rng(opts.seed);
  GradCheckReport<T> report;
  const T eps = static_cast<T>(opts.epsilon);
  for (auto& t : wrt) {
    std::vector<T> analytic(t.numel(), T(0));
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> indices(t.numel());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (opts.samples_per_tensor && opts.samples_per_tensor < indices.size()) {
      for (std::size_t i = 0; i < opts.samples_per_tensor; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, indices.size() - 1);
        std::swap(indices[i], indices[pick(rng)]);
      }
      indices.resize(opts.samples_per_tensor);
    }

    NoGradGuard<T> no_grad;
    auto values = t.mutable_data();
    for (std::size_t idx : indices) {
      const T original = values[idx];
      values[idx] = original + eps;
      const T plus = loss_fn().item();
      values[idx] = original - eps;
      const T minus = loss_fn().item();
      values[idx] = original;
      if (opts.kink_tolerance > 0.0) {
        const T centre = loss_fn().item();
        const T right = (plus - centre) / eps, left = (centre - minus) / eps;
        if (relative_error(right, left) > static_cast<T>(opts.kink_tolerance)) {
          ++report.kinks;
          continue;
        }
      }
      const T numeric = (plus - minus) / (T(2) * eps);
      report.worst = std::max(report.worst, relative_error(analytic[idx], numeric));
      ++report.checked;
    }
  }
  return report;
}

template <typename T>
T gradient_check(const std::function<Tensor<T>()>& loss_fn,
                 std::vector<Tensor<T>> wrt, const GradCheckOptions& opts = {}) {
  return gradient_check_report(loss_fn, std::move(wrt), opts).worst;
}

// Gradient check of a tensor-valued function at `x`. Non-scalar outputs are
// reduced with a fixed random projection so that every output element
// contributes a distinct weight.
template <typename T>
T finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                    const Tensor<T>& x, double epsilon = 1e-5,
                    std::uint64_t seed = 11) {
  Tensor<T> input = x.detach();
  Tensor<T> projection;
  auto loss_fn = [&]() {
    Tensor<T> y = f(input);
    if (y.numel() == 1) return reshape(y, Shape{});
    if (!projection.defined()) {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> dist(0.5, 1.5);
      std::vector<T> w(y.numel());
      for (auto& v : w) v = static_cast<T>(dist(rng));
      projection = Tensor<T>(y.shape(), std::move(w));
    }
    return sum(y * projection);
  };
  GradCheckOptions opts;
  opts.epsilon = epsilon;
  return gradient_check<T>(loss_fn, {input}, opts);
}

}  // namespace avnet
