#pragma once

// Differentiable warping by disparity / flow fields and the multi-scale
// feature-warping losses built on top of it.
//
// Conventions: disparity is in pixels, positive meaning the matching content
// sits further left in the right view. warp_by_disparity(src, d, s) samples src
// at (x - s*d, y), so s = +1 pulls right-view content into the left view.
// Flow (u, v) is rightward/downward motion from frame t to t+1;
// warp_by_flow(src, f, s) samples src at (x + s*u, y + s*v), so s = +1 pulls
// frame t+1 content back onto frame t.

#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "warpadapt/kernels.hpp"

namespace warpadapt {

enum class FieldKind { disparity, flow };

template <class T>
struct WarpField {
  FieldKind kind = FieldKind::disparity;
  Tensor<T> values;    // (N,1,H,W) disparity or (N,2,H,W) flow, pixels at this scale
  double scale = 1.0;  // 1, 1/2, 1/4 ...

  std::size_t channels() const { return kind == FieldKind::disparity ? 1 : 2; }
};

template <class T>
WarpField<T> disparity_field(Tensor<T> values, double scale = 1.0) {
  return {FieldKind::disparity, std::move(values), scale};
}

template <class T>
WarpField<T> flow_field(Tensor<T> values, double scale = 1.0) {
  return {FieldKind::flow, std::move(values), scale};
}

namespace detail {

// (N,2,H,W) grid of pixel coordinates (x, y).
template <class T>
Tensor<T> base_grid(std::size_t n, std::size_t h, std::size_t w) {
  std::vector<T> g(n * 2 * h * w);
  for (std::size_t b = 0; b < n; ++b) {
    T* gx = g.data() + b * 2 * h * w;
    T* gy = gx + h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        gx[y * w + x] = static_cast<T>(x);
        gy[y * w + x] = static_cast<T>(y);
      }
    }
  }
  return Tensor<T>::make({n, 2, h, w}, std::move(g));
}

template <class T>
void check_field(const Tensor<T>& src, const WarpField<T>& f, FieldKind want, const char* op) {
  if (f.kind != want) throw UsageError(std::string(op) + ": wrong field kind");
  const Shape& s = src.shape();
  const Shape& v = f.values.shape();
  if (v.n != s.n || v.h != s.h || v.w != s.w || v.c != f.channels()) {
    throw ShapeError(std::string(op) + ": field " + to_string(v) + " does not match source " + to_string(s));
  }
}

inline int power_of_two_ratio(std::size_t big, std::size_t small, const char* op) {
  if (small == 0 || big % small != 0) throw ShapeError(std::string(op) + ": scales are not related by a power of two");
  std::size_t r = big / small;
  int levels = 0;
  while (r > 1) {
    if (r % 2 != 0) throw ShapeError(std::string(op) + ": scales are not related by a power of two");
    r /= 2;
    ++levels;
  }
  return levels;
}

template <class T>
Tensor<T> add_all(const std::vector<Tensor<T>>& terms) {
  Tensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace detail

template <class T>
Tensor<T> warp_by_disparity(const Tensor<T>& src, const WarpField<T>& disp, int sign) {
  detail::check_field(src, disp, FieldKind::disparity, "warp_by_disparity");
  const Shape& s = src.shape();
  // only the x channel moves: d * (-sign, 0)
  const auto dir = Tensor<T>::make({1, 2, 1, 1}, {static_cast<T>(-sign), T(0)});
  const Tensor<T> grid = add(detail::base_grid<T>(s.n, s.h, s.w), mul(disp.values, dir));
  return grid_sample(src, grid);
}

template <class T>
Tensor<T> warp_by_flow(const Tensor<T>& src, const WarpField<T>& flow, int sign) {
  detail::check_field(src, flow, FieldKind::flow, "warp_by_flow");
  const Shape& s = src.shape();
  const Tensor<T> grid = add(detail::base_grid<T>(s.n, s.h, s.w), scale(flow.values, sign));
  return grid_sample(src, grid);
}

template <class T>
Tensor<T> warp(const Tensor<T>& src, const WarpField<T>& field, int sign) {
  return field.kind == FieldKind::disparity ? warp_by_disparity(src, field, sign) : warp_by_flow(src, field, sign);
}

// Halve the field `levels` times: average 2x2 blocks and halve the values.
template <class T>
WarpField<T> downscale_field(const WarpField<T>& f, int levels) {
  WarpField<T> out = f;
  for (int i = 0; i < levels; ++i) {
    out.values = scale(resize_down2(out.values), 0.5);
    out.scale *= 0.5;
  }
  return out;
}

// Double the field `levels` times: bilinear upsample and double the values.
template <class T>
WarpField<T> upscale_field(const WarpField<T>& f, int levels) {
  WarpField<T> out = f;
  for (int i = 0; i < levels; ++i) {
    out.values = scale(resize_up2(out.values), 2.0);
    out.scale *= 2.0;
  }
  return out;
}

template <class T>
Tensor<T> downscale_mask(Tensor<T> m, int levels) {
  for (int i = 0; i < levels; ++i) m = resize_down2(m);
  return m;
}

// (1/T) sum_i mean |W(src_i, field at scale i) - dst_i|, optionally restricted
// to a (N,1,H,W) mask given at the field's scale.
template <class T>
Tensor<T> multiscale_warp_loss(const std::vector<Tensor<T>>& taps_src, const std::vector<Tensor<T>>& taps_dst,
                               const WarpField<T>& field, int sign, const std::type_identity_t<std::optional<Tensor<T>>>& mask = {}) {
  if (taps_src.size() != taps_dst.size() || taps_src.empty()) {
    throw UsageError("multiscale_warp_loss: tap lists must be non-empty and of equal length (" +
                     std::to_string(taps_src.size()) + " vs " + std::to_string(taps_dst.size()) + ")");
  }
  const Shape fs = field.values.shape();
  std::vector<Tensor<T>> terms;
  for (std::size_t i = 0; i < taps_src.size(); ++i) {
    if (taps_src[i].shape() != taps_dst[i].shape()) {
      throw ShapeError("multiscale_warp_loss: tap " + std::to_string(i) + " shapes differ");
    }
    const Shape ts = taps_src[i].shape();
    const int levels = detail::power_of_two_ratio(fs.h, ts.h, "multiscale_warp_loss");
    if (detail::power_of_two_ratio(fs.w, ts.w, "multiscale_warp_loss") != levels) {
      throw ShapeError("multiscale_warp_loss: anisotropic tap scale");
    }
    const WarpField<T> f = downscale_field(field, levels);
    const Tensor<T> l1 = abs(sub(warp(taps_src[i], f, sign), taps_dst[i]));
    if (mask) {
      const Tensor<T> m = downscale_mask(*mask, levels);
      double mm = 0;
      for (T v : m.values()) mm += v;
      mm /= static_cast<double>(m.numel());
      const Tensor<T> num = mean(mul(l1, m));
      terms.push_back(mm > 0 ? scale(num, 1.0 / mm) : num);
    } else {
      terms.push_back(mean(l1));
    }
  }
  return scale(detail::add_all(terms), 1.0 / static_cast<double>(terms.size()));
}

// sum_s gamma^(S-1-s) * mean smoothL1(up(stage_s) * ratio, target), stages
// ordered coarse to fine, each in the pixel units of its own scale.
template <class T>
Tensor<T> stagewise_warp_loss(const std::vector<Tensor<T>>& stages, const WarpField<T>& target, double gamma,
                              const std::type_identity_t<std::optional<Tensor<T>>>& mask = {}, double beta = 1.0) {
  if (stages.empty()) throw UsageError("stagewise_warp_loss: no stages");
  if (!(gamma > 0 && gamma <= 1)) throw UsageError("stagewise_warp_loss: gamma must lie in (0, 1]");
  const Shape ts = target.values.shape();
  const std::size_t S = stages.size();
  double mm = 1.0;
  if (mask) {
    mm = 0;
    for (T v : mask->values()) mm += v;
    mm /= static_cast<double>(mask->numel());
  }
  std::vector<Tensor<T>> terms;
  for (std::size_t s = 0; s < S; ++s) {
    const Shape ss = stages[s].shape();
    if (ss.c != ts.c || ss.n != ts.n) throw ShapeError("stagewise_warp_loss: stage " + std::to_string(s) + " channels");
    const int levels = detail::power_of_two_ratio(ts.h, ss.h, "stagewise_warp_loss");
    const WarpField<T> up = upscale_field(WarpField<T>{target.kind, stages[s], target.scale / (1 << levels)}, levels);
    Tensor<T> err = smooth_l1(up.values, target.values, beta);
    Tensor<T> term;
    if (mask) {
      term = mean(mul(err, *mask));
      if (mm > 0) term = scale(term, 1.0 / mm);
    } else {
      term = mean(err);
    }
    terms.push_back(scale(term, std::pow(gamma, static_cast<double>(S - 1 - s))));
  }
  return detail::add_all(terms);
}

}  // namespace warpadapt
