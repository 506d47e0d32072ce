#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dkbf/autodiff.hpp"
#include "dkbf/tensor.hpp"

namespace dkbf {

// A scalar-valued function of a parameter list. The tape passed in may or
// may not be recording; implementations must be deterministic (dropout off
// or mask frozen) and must route every parameter through the given leaves.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

namespace detail {

inline Tensor eval_untaped(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape(false);
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  Tensor y = f(tape, leaves);
  if (!y.is_scalar()) throw Error("finite_diff_check: f must return a scalar");
  return y;
}

}  // namespace detail

// Reverse-mode gradients of f with respect to every entry of every param.
inline std::vector<Tensor> analytic_gradients(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape(true);
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) {
    Tensor t = p;
    t.requires_grad = true;
    leaves.push_back(tape.leaf(t));
  }
  Tensor y = f(tape, leaves);
  GradMap grads = tape.backward(y);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& leafT : leaves) out.push_back(grads.at(leafT));
  return out;
}

// Central finite differences, entry by entry. Uses the symmetric 5-point
// (fourth-order) stencil: the O(eps^4) truncation lets eps sit high enough
// that float rounding noise stays below the relative-error floor even for
// entries whose true gradient is near zero.
inline std::vector<Tensor> numeric_gradients(const ScalarFn& f, const std::vector<Tensor>& params,
                                             double eps) {
  if (eps <= 0.0) throw Error("finite_diff_check: eps must be positive");
  std::vector<Tensor> work = params;
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t p = 0; p < work.size(); ++p) {
    Tensor g = Tensor::zeros(work[p].shape);
    for (std::size_t i = 0; i < work[p].values.size(); ++i) {
      const double orig = work[p].values[i];
      auto eval_at = [&](double x) {
        work[p].values[i] = x;
        return detail::eval_untaped(f, work).item();
      };
      const double f_p2 = eval_at(orig + 2.0 * eps);
      const double f_p1 = eval_at(orig + eps);
      const double f_m1 = eval_at(orig - eps);
      const double f_m2 = eval_at(orig - 2.0 * eps);
      work[p].values[i] = orig;
      // Grouped as differences so equal evaluations cancel exactly.
      g.values[i] = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max over entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
inline double max_rel_error(const std::vector<Tensor>& analytic,
                            const std::vector<Tensor>& numeric) {
  double worst = 0.0;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    for (std::size_t i = 0; i < analytic[p].values.size(); ++i) {
      const double a = analytic[p].values[i];
      const double n = numeric[p].values[i];
      const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  }
  return worst;
}

// Verifies reverse-mode gradients of f against central differences and
// returns the max relative error over all parameter entries. Throws if f
// is detected to be non-deterministic (two base evaluations disagree).
inline double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double eps) {
  const Tensor y1 = detail::eval_untaped(f, params);
  const Tensor y2 = detail::eval_untaped(f, params);
  if (y1.values != y2.values)
    throw Error("finite_diff_check: f is non-deterministic (two evaluations differ)");
  const std::vector<Tensor> a = analytic_gradients(f, params);
  const std::vector<Tensor> n = numeric_gradients(f, params, eps);
  return max_rel_error(a, n);
}

}  // namespace dkbf
