#pragma once

// Central-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "warpadapt/random.hpp"
#include "warpadapt/tensor.hpp"

namespace warpadapt {

// max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-6)
// f must build its graph from the tensor it is handed.
using ScalarFn = std::function<Tensor<double>(const Tensor<double>&)>;

namespace detail {

// With skip_kinks, an element whose one-sided differences disagree by more
// than 0.1% is taken to straddle a non-differentiable point (a leaky-relu
// hinge inside a network) and left out; `skipped` counts those.
inline double grad_check_at(const ScalarFn& f, const Tensor<double>& x, const std::vector<std::size_t>& indices,
                            double step, bool skip_kinks = false, std::size_t* skipped = nullptr) {
  if (!(step > 0)) throw UsageError("grad_check: step must be positive");
  Tensor<double> probe = Tensor<double>::make(x.shape(), x.values(), true);
  Tensor<double> loss = f(probe);
  backward(loss);
  std::vector<double> analytic(probe.numel(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  double worst = 0.0;
  NoGradGuard no_grad;
  Tensor<double> work = Tensor<double>::make(x.shape(), x.values(), false);
  const double f0 = skip_kinks ? f(work).item() : 0.0;
  if (skipped) *skipped = 0;
  for (std::size_t i : indices) {
    const double orig = work.values()[i];
    const double hi = orig + step;
    const double lo = orig - step;
    work.mutable_values()[i] = hi;
    const double fp = f(work).item();
    work.mutable_values()[i] = lo;
    const double fm = f(work).item();
    work.mutable_values()[i] = orig;
    // divide by the perturbation actually applied, not the nominal one
    const double numeric = (fp - fm) / (hi - lo);
    if (skip_kinks) {
      const double up = (fp - f0) / (hi - orig);
      const double down = (f0 - fm) / (orig - lo);
      if (std::abs(up - down) > 1e-3 * std::max({std::abs(up), std::abs(down), 1e-6})) {
        if (skipped) ++*skipped;
        continue;
      }
    }
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace detail

inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double step = 1e-5) {
  std::vector<std::size_t> all(x.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return detail::grad_check_at(f, x, all, step);
}

// Same check on at most `count` elements drawn without replacement; for
// parameter tensors of whole networks, where hinges are unavoidable.
inline double grad_check_sampled(const ScalarFn& f, const Tensor<double>& x, std::size_t count, std::uint64_t seed,
                                 double step = 1e-5, bool skip_kinks = false, std::size_t* skipped = nullptr) {
  std::vector<std::size_t> idx(x.numel());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (idx.size() > count) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
  }
  return detail::grad_check_at(f, x, idx, step, skip_kinks, skipped);
}

}  // namespace warpadapt
