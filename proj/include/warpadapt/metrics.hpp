#pragma once

// Field and image-quality metrics. Everything here runs without a graph and
// accumulates in double.

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "warpadapt/kernels.hpp"
#include "warpadapt/warp.hpp"

namespace warpadapt {

enum class ThresholdMode { any, both };  // error > abs OR / AND error > rel*|gt|

inline ThresholdMode parse_threshold_mode(const std::string& s) {
  if (s == "or") return ThresholdMode::any;
  if (s == "and") return ThresholdMode::both;
  throw ConfigError("d1_mode must be 'or' or 'and', got '" + s + "'");
}

namespace detail {

// Per-pixel endpoint error and ground-truth magnitude over valid pixels.
template <class T>
void for_each_valid_error(const WarpField<T>& pred, const WarpField<T>& gt, const Tensor<T>* valid, auto&& f) {
  const Shape& ps = pred.values.shape();
  const Shape& gs = gt.values.shape();
  if (ps != gs || pred.kind != gt.kind) throw ShapeError("metric: prediction " + to_string(ps) + " vs " + to_string(gs));
  if (valid && (valid->shape().n != gs.n || valid->shape().c != 1 || valid->shape().h != gs.h ||
                valid->shape().w != gs.w)) {
    throw ShapeError("metric: mask " + to_string(valid->shape()) + " vs field " + to_string(gs));
  }
  const std::size_t P = gs.plane();
  const auto& pv = pred.values.values();
  const auto& gv = gt.values.values();
  for (std::size_t n = 0; n < gs.n; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      if (valid && valid->values()[n * P + p] <= T(0)) continue;
      double e2 = 0, g2 = 0;
      for (std::size_t c = 0; c < gs.c; ++c) {
        const double g = gv[(n * gs.c + c) * P + p];
        const double d = static_cast<double>(pv[(n * gs.c + c) * P + p]) - g;
        e2 += d * d;
        g2 += g * g;
      }
      f(std::sqrt(e2), std::sqrt(g2));
    }
  }
}

}  // namespace detail

// Mean |d_pred - d_gt| (disparity) or mean endpoint distance (flow).
template <class T>
double epe(const WarpField<T>& pred, const WarpField<T>& gt, const Tensor<T>* valid = nullptr) {
  double total = 0;
  std::size_t count = 0;
  detail::for_each_valid_error(pred, gt, valid, [&](double e, double) {
    total += e;
    ++count;
  });
  if (count == 0) throw MetricError("epe: no valid pixels");
  return total / static_cast<double>(count);
}

// Percentage of valid pixels with error > abs_thresh, combined with
// error > rel_thresh*|gt| when rel_thresh > 0.
template <class T>
double threshold_error_rate(const WarpField<T>& pred, const WarpField<T>& gt, double abs_thresh,
                            double rel_thresh = 0.0, const Tensor<T>* valid = nullptr,
                            ThresholdMode mode = ThresholdMode::any) {
  std::size_t bad = 0, count = 0;
  detail::for_each_valid_error(pred, gt, valid, [&](double e, double g) {
    bool out = e > abs_thresh;
    if (rel_thresh > 0) out = mode == ThresholdMode::any ? (out || e > rel_thresh * g) : (out && e > rel_thresh * g);
    bad += out ? 1 : 0;
    ++count;
  });
  if (count == 0) throw MetricError("threshold_error_rate: no valid pixels");
  return 100.0 * static_cast<double>(bad) / static_cast<double>(count);
}

inline constexpr double kOutlierPixels = 3.0;
inline constexpr double kOutlierFraction = 0.05;

template <class T>
double d1_all(const WarpField<T>& pred, const WarpField<T>& gt, ThresholdMode mode = ThresholdMode::any,
              const Tensor<T>* valid = nullptr) {
  return threshold_error_rate(pred, gt, kOutlierPixels, kOutlierFraction, valid, mode);
}

template <class T>
double f1_all(const WarpField<T>& pred, const WarpField<T>& gt, ThresholdMode mode = ThresholdMode::any,
              const Tensor<T>* valid = nullptr) {
  return threshold_error_rate(pred, gt, kOutlierPixels, kOutlierFraction, valid, mode);
}

template <class T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.numel() == 0) throw MetricError("mse: empty tensors");
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

// 10 log10(1 / MSE) for images in [0,1]; +inf when identical.
inline double psnr_from_mse(double m) {
  if (m == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  return psnr_from_mse(mse(a, b));
}

// Mean of the same SSIM map the losses use, evaluated in double.
template <class T>
double ssim_metric(const Tensor<T>& a, const Tensor<T>& b) {
  NoGradGuard no_grad;
  const Tensor<double> m = ssim_map(a.template cast<double>(), b.template cast<double>());
  double acc = 0;
  for (double v : m.values()) acc += v;
  return acc / static_cast<double>(m.numel());
}

// ---------------------------------------------------------------------------

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct MetricsReport {
  double epe_disp = 0, d1_all = 0, gt2px = 0, gt4px = 0, gt5px = 0;
  double epe_flow = 0, f1_all = 0;
  double psnr = 0, ssim = 0, perceptual_dist = 0;
  std::size_t sample_count = 0;
  std::vector<std::pair<std::string, std::string>> config;  // echo

  std::vector<std::pair<std::string, double>> values() const {
    return {{"epe_disp", epe_disp}, {"d1_all", d1_all}, {"gt2px", gt2px},   {"gt4px", gt4px},
            {"gt5px", gt5px},       {"epe_flow", epe_flow}, {"f1_all", f1_all}, {"psnr", psnr},
            {"ssim", ssim},         {"perceptual_dist", perceptual_dist}};
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : config) out += "config." + k + "=" + v + "\n";
    out += "sample_count=" + std::to_string(sample_count) + "\n";
    for (const auto& [k, v] : values()) out += k + "=" + format_metric(v) + "\n";
    return out;
  }

  std::string csv_header() const {
    std::string out = "sample_count";
    for (const auto& [k, v] : values()) out += "," + k;
    return out;
  }

  std::string csv_row() const {
    std::string out = std::to_string(sample_count);
    for (const auto& [k, v] : values()) out += "," + format_metric(v);
    return out;
  }
};

}  // namespace warpadapt
