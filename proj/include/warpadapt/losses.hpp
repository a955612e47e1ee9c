#pragma once

// Translation, warping and supervised losses, and the three training
// objectives assembled from them.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "warpadapt/kernels.hpp"
#include "warpadapt/netlib.hpp"
#include "warpadapt/warp.hpp"

namespace warpadapt {

struct LossWeights {
  double lambda_translation = 10.0;
  double lambda_cyc = 10.0;
  double lambda_perceptual = 1.0;  // 0 drops the perceptual term (ablation)
  double lambda_cosine = 1.0;      // 0 drops the cosine term (ablation)
  double lambda_f_disp_warpx = 5.0;
  double lambda_f_flow_warpx = 5.0;
  double lambda_corr = 1.0;
  double lambda_ms = 0.1;
  double lambda_disp = 1.0;
  double lambda_f_disp_warpy = 5.0;
  double lambda_flow = 1.0;
  double lambda_f_flow_warpy = 5.0;

  // name -> member, in a fixed order; shared by the config parser and the log echo
  static const std::vector<std::pair<const char*, double LossWeights::*>>& fields() {
    static const std::vector<std::pair<const char*, double LossWeights::*>> f{
        {"lambda_translation", &LossWeights::lambda_translation},
        {"lambda_cyc", &LossWeights::lambda_cyc},
        {"lambda_perceptual", &LossWeights::lambda_perceptual},
        {"lambda_cosine", &LossWeights::lambda_cosine},
        {"lambda_f_disp_warpx", &LossWeights::lambda_f_disp_warpx},
        {"lambda_f_flow_warpx", &LossWeights::lambda_f_flow_warpx},
        {"lambda_corr", &LossWeights::lambda_corr},
        {"lambda_ms", &LossWeights::lambda_ms},
        {"lambda_disp", &LossWeights::lambda_disp},
        {"lambda_f_disp_warpy", &LossWeights::lambda_f_disp_warpy},
        {"lambda_flow", &LossWeights::lambda_flow},
        {"lambda_f_flow_warpy", &LossWeights::lambda_f_flow_warpy},
    };
    return f;
  }

  void validate() const {
    for (const auto& [name, member] : fields()) {
      const double v = this->*member;
      if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string("weights.") + name + " must be >= 0");
    }
  }
};

// Named scalars for one step. Keys appear in canonical order when listed.
class LossBreakdown {
 public:
  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "adv_a2b", "adv_b2a", "disc_a",    "disc_b", "cyc",  "perceptual", "cosine",
        "translation", "disp_warpx", "flow_warpx", "corr", "ms", "L_T",
        "disp", "disp_warpy", "L_d",  "flow", "flow_warpy", "L_f"};
    return k;
  }

  void set(const std::string& key, double v) {
    if (std::find(keys().begin(), keys().end(), key) == keys().end()) {
      throw UsageError("LossBreakdown: unknown key " + key);
    }
    values_[key] = v;
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  double get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("LossBreakdown: missing " + key);
    return it->second;
  }
  std::size_t size() const { return values_.size(); }
  bool operator==(const LossBreakdown& o) const { return values_ == o.values_; }

 private:
  std::map<std::string, double> values_;
};

template <class T>
using LossParts = std::map<std::string, Tensor<T>>;

// ---------------------------------------------------------------------------
// Adversarial (log loss, non-saturating generator side)

inline constexpr double kProbClamp = 1e-6;

template <class T>
Tensor<T> adversarial_gen_term(const Tensor<T>& d_fake) {
  return scale(mean(log_clamped(d_fake, kProbClamp, 1.0 - kProbClamp)), -1.0);
}

template <class T>
Tensor<T> adversarial_disc_term(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  const Tensor<T> real = mean(log_clamped(d_real, kProbClamp, 1.0 - kProbClamp));
  const Tensor<T> one_minus_fake = add_scalar(scale(d_fake, -1.0), 1.0);
  const Tensor<T> fake = mean(log_clamped(one_minus_fake, kProbClamp, 1.0 - kProbClamp));
  return scale(add(real, fake), -1.0);
}

template <class T>
struct AdversarialTerms {
  Tensor<T> gen;
  Tensor<T> disc;
};

template <class T>
AdversarialTerms<T> adversarial_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  return {adversarial_gen_term(d_fake), adversarial_disc_term(d_real, d_fake)};
}

// ---------------------------------------------------------------------------
// Translation regularizers

template <class T>
Tensor<T> mean_l1(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(abs(sub(a, b)));
}

// mean L1 + (1 - mean SSIM)
template <class T>
Tensor<T> cycle_loss(const Tensor<T>& reconstructed, const Tensor<T>& original) {
  if (reconstructed.shape() != original.shape()) {
    throw ShapeError("cycle_loss: " + to_string(reconstructed.shape()) + " vs " + to_string(original.shape()));
  }
  const Tensor<T> dssim = add_scalar(scale(mean(ssim_map(reconstructed, original)), -1.0), 1.0);
  return add(mean_l1(reconstructed, original), dssim);
}

template <class T>
Tensor<T> perceptual_loss(const NetworkHandle<T>& extractor, const Tensor<T>& a, const Tensor<T>& b) {
  const auto fa = extractor_features(extractor, a);
  const auto fb = extractor_features(extractor, b);
  std::vector<Tensor<T>> terms;
  for (std::size_t i = 0; i < fa.size(); ++i) terms.push_back(mean(square(sub(fa[i], fb[i]))));
  return detail::add_all(terms);
}

template <class T>
Tensor<T> cosine_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scalar(scale(mean(cosine_map(a, b)), -1.0), 1.0);
}

inline constexpr int kCorrConsistencyReach = 8;

// Mean L1 between horizontal correlation volumes of the original and the
// translated pair. Each image is mean-centred per channel first, so a global
// brightness offset does not register.
template <class T>
Tensor<T> corr_consistency_loss(const Tensor<T>& x_l, const Tensor<T>& x_r, const Tensor<T>& g_l,
                                const Tensor<T>& g_r) {
  for (const auto* t : {&x_r, &g_l, &g_r}) {
    if (t->shape() != x_l.shape()) throw ShapeError("corr_consistency_loss: input shapes differ");
  }
  auto centred = [](const Tensor<T>& x) { return sub(x, mean_axes(x, {false, false, true, true})); };
  const Tensor<T> vx =
      correlation1d(centred(x_l), centred(x_r), CorrAxis::horizontal, 0, kCorrConsistencyReach);
  const Tensor<T> vg =
      correlation1d(centred(g_l), centred(g_r), CorrAxis::horizontal, 0, kCorrConsistencyReach);
  return mean_l1(vx, vg);
}

inline constexpr double kModeSeekingEps = 1e-5;

// input diversity / (output diversity + eps)
template <class T>
Tensor<T> mode_seeking_loss(const Tensor<T>& fake1, const Tensor<T>& fake2, const Tensor<T>& src1,
                            const Tensor<T>& src2) {
  return div(mean_l1(src1, src2), add_scalar(mean_l1(fake1, fake2), kModeSeekingEps));
}

// ---------------------------------------------------------------------------
// Supervised task losses

template <class T>
Tensor<T> supervised_disp_loss(const std::vector<Tensor<T>>& stages, const WarpField<T>& x_d, double gamma) {
  return stagewise_warp_loss(stages, x_d, gamma);
}

template <class T>
Tensor<T> supervised_flow_loss(const std::vector<Tensor<T>>& stages, const WarpField<T>& x_f,
                               const std::type_identity_t<std::optional<Tensor<T>>>& mask, double gamma) {
  return stagewise_warp_loss(stages, x_f, gamma, mask);
}

// Two-way feature warping: W(src, field) vs dst and W(dst, -field) vs src.
// For disparity (src = left) that is sign -1 then +1; same for flow (src = t).
template <class T>
Tensor<T> bidirectional_warp_loss(const std::vector<Tensor<T>>& taps_src, const std::vector<Tensor<T>>& taps_dst,
                                  const WarpField<T>& field, const std::type_identity_t<std::optional<Tensor<T>>>& mask = {}) {
  return add(multiscale_warp_loss(taps_src, taps_dst, field, -1, mask),
             multiscale_warp_loss(taps_dst, taps_src, field, +1, mask));
}

// ---------------------------------------------------------------------------
// Objectives

namespace detail {
template <class T>
const Tensor<T>& need(const LossParts<T>& parts, const std::string& key, const char* who) {
  auto it = parts.find(key);
  if (it == parts.end() || !it->second.defined()) throw UsageError(std::string(who) + ": missing part " + key);
  return it->second;
}

template <class T>
Tensor<T> weighted_sum(const LossParts<T>& parts, const std::vector<std::pair<std::string, double>>& terms,
                       const char* who) {
  Tensor<T> acc;
  for (const auto& [key, w] : terms) {
    const Tensor<T> t = scale(need(parts, key, who), w);
    acc = acc.defined() ? add(acc, t) : t;
  }
  return acc;
}
}  // namespace detail

template <class T>
Tensor<T> assemble_translation(const LossParts<T>& parts, const LossWeights& w) {
  return detail::weighted_sum(parts,
                              {{"adv_a2b", 1.0},
                               {"adv_b2a", 1.0},
                               {"cyc", w.lambda_cyc},
                               {"perceptual", w.lambda_perceptual},
                               {"cosine", w.lambda_cosine}},
                              "assemble_translation");
}

template <class T>
Tensor<T> assemble_L_T(const LossParts<T>& parts, const LossWeights& w) {
  LossParts<T> with_translation = parts;
  with_translation["translation"] = assemble_translation(parts, w);
  return detail::weighted_sum(with_translation,
                              {{"translation", w.lambda_translation},
                               {"disp_warpx", w.lambda_f_disp_warpx},
                               {"flow_warpx", w.lambda_f_flow_warpx},
                               {"corr", w.lambda_corr},
                               {"ms", w.lambda_ms}},
                              "assemble_L_T");
}

template <class T>
Tensor<T> assemble_L_d(const LossParts<T>& parts, const LossWeights& w) {
  return detail::weighted_sum(parts, {{"disp", w.lambda_disp}, {"disp_warpy", w.lambda_f_disp_warpy}},
                              "assemble_L_d");
}

template <class T>
Tensor<T> assemble_L_f(const LossParts<T>& parts, const LossWeights& w) {
  return detail::weighted_sum(parts, {{"flow", w.lambda_flow}, {"flow_warpy", w.lambda_f_flow_warpy}},
                              "assemble_L_f");
}

// Reassembles the aggregates from breakdown members in double.
inline double recompute_translation(const LossBreakdown& b, const LossWeights& w) {
  return b.get("adv_a2b") + b.get("adv_b2a") + w.lambda_cyc * b.get("cyc") + w.lambda_perceptual * b.get("perceptual") +
         w.lambda_cosine * b.get("cosine");
}
inline double recompute_L_T(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_translation * recompute_translation(b, w) + w.lambda_f_disp_warpx * b.get("disp_warpx") +
         w.lambda_f_flow_warpx * b.get("flow_warpx") + w.lambda_corr * b.get("corr") + w.lambda_ms * b.get("ms");
}
inline double recompute_L_d(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_disp * b.get("disp") + w.lambda_f_disp_warpy * b.get("disp_warpy");
}
inline double recompute_L_f(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_flow * b.get("flow") + w.lambda_f_flow_warpy * b.get("flow_warpy");
}

}  // namespace warpadapt
