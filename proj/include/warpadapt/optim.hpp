#pragma once

// Adam with bias correction; AdamW (decoupled decay) when weight_decay > 0.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "warpadapt/netlib.hpp"

namespace warpadapt {

inline constexpr double kAdamEps = 1e-8;
inline constexpr double kFlowWeightDecay = 0.01;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
};

// First and second moments for one parameter, plus the step count used for
// bias correction.
template <class T>
struct AdamMoments {
  std::vector<T> m, v;
  std::uint64_t step = 0;
};

// One update of `param` from `grad`. An empty grad counts as zero.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments<T>& mom, const AdamConfig& cfg) {
  if (!grad.empty() && grad.size() != param.size()) {
    throw ShapeError("adam_update: gradient has " + std::to_string(grad.size()) + " values, parameter " +
                     std::to_string(param.size()));
  }
  if (mom.m.empty()) {
    mom.m.assign(param.size(), T(0));
    mom.v.assign(param.size(), T(0));
  }
  if (mom.m.size() != param.size() || mom.v.size() != param.size()) throw ShapeError("adam_update: moment size");
  ++mom.step;
  const double t = static_cast<double>(mom.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    const double m = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
    mom.m[i] = static_cast<T>(m);
    mom.v[i] = static_cast<T>(v);
    double p = param[i];
    if (cfg.weight_decay > 0) p -= cfg.lr * cfg.weight_decay * p;
    p -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
    param[i] = static_cast<T>(p);
  }
}

// Optimizer state for every parameter of one network, keyed by position.
template <class T>
class Adam {
 public:
  AdamConfig config;
  std::vector<AdamMoments<T>> moments;

  Adam() = default;
  explicit Adam(AdamConfig c) : config(c) {}

  void step(NetworkHandle<T>& net) {
    if (net.frozen) return;
    if (moments.empty()) moments.resize(net.params.size());
    if (moments.size() != net.params.size()) throw UsageError("Adam: network parameter list changed");
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      Tensor<T>& p = net.params[i].second;
      adam_update(p.data(), p.grad(), moments[i], config);
    }
  }
};

}  // namespace warpadapt
