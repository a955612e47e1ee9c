#pragma once

// The closed catalog of differentiable kernels. Every network, warp and loss
// in the library is composed from these, so one gradient-check harness
// covers the whole system.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "warpadapt/tensor.hpp"

namespace warpadapt {

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const auto da = a.dims();
  const auto db = b.dims();
  std::array<std::size_t, 4> o{};
  for (int i = 0; i < 4; ++i) {
    if (da[i] == db[i]) {
      o[i] = da[i];
    } else if (da[i] == 1) {
      o[i] = db[i];
    } else if (db[i] == 1) {
      o[i] = da[i];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  return Shape{o[0], o[1], o[2], o[3]};
}

// Element strides with zero stride on extent-1 axes.
inline std::array<std::size_t, 4> broadcast_strides(const Shape& s) {
  std::array<std::size_t, 4> st{s.c * s.h * s.w, s.h * s.w, s.w, 1};
  const auto d = s.dims();
  for (int i = 0; i < 4; ++i) {
    if (d[i] == 1) st[i] = 0;
  }
  return st;
}

template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const auto sa = broadcast_strides(a);
  const auto sb = broadcast_strides(b);
  std::size_t io = 0;
  for (std::size_t n = 0; n < out.n; ++n) {
    for (std::size_t c = 0; c < out.c; ++c) {
      for (std::size_t y = 0; y < out.h; ++y) {
        const std::size_t ba = n * sa[0] + c * sa[1] + y * sa[2];
        const std::size_t bb = n * sb[0] + c * sb[1] + y * sb[2];
        for (std::size_t x = 0; x < out.w; ++x, ++io) f(io, ba + x * sa[3], bb + x * sb[3]);
      }
    }
  }
}

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, Da da, Db db) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), op);
  const bool same = a.shape() == b.shape();
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(os.numel());
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(os, a.shape(), b.shape(),
                       [&](std::size_t io, std::size_t ia, std::size_t ib) { out[io] = fwd(av[ia], bv[ib]); });
  }
  Tensor<T> res = make_result(os, std::move(out), {&a, &b}, op);
  if (res.requires_grad()) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    res.node()->backward = [=](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      const auto& yv = self.value;
      const auto& g = self.grad;
      std::vector<T>* ga = input_grad(self, 0);
      std::vector<T>* gb = input_grad(self, 1);
      auto body = [&](std::size_t io, std::size_t ia, std::size_t ib) {
        if (ga) (*ga)[ia] += g[io] * da(av[ia], bv[ib], yv[io]);
        if (gb) (*gb)[ib] += g[io] * db(av[ia], bv[ib], yv[io]);
      };
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) body(i, i, i);
      } else {
        for_each_broadcast(self.shape, sa, sb, body);
      }
    };
  }
  return res;
}

template <class T, class Fwd, class D>
Tensor<T> unary_op(const Tensor<T>& x, const char* op, Fwd fwd, D d) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  Tensor<T> res = make_result(x.shape(), std::move(out), {&x}, op);
  if (res.requires_grad()) {
    res.node()->backward = [d](Node<T>& self) {
      std::vector<T>* gx = input_grad(self, 0);
      if (!gx) return;
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * d(xv[i], self.value[i]);
    };
  }
  return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  const T k = static_cast<T>(s);
  return detail::unary_op(x, "scale", [k](T v) { return v * k; }, [k](T, T) { return k; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, double s) {
  const T k = static_cast<T>(s);
  return detail::unary_op(x, "add_scalar", [k](T v) { return v + k; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.2) {
  const T k = static_cast<T>(slope);
  return detail::unary_op(
      x, "leaky_relu", [k](T v) { return v > T(0) ? v : v * k; }, [k](T v, T) { return v > T(0) ? T(1) : k; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      x, "softplus", [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op(
      x, "abs", [](T v) { return std::abs(v); }, [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// defined for x > 0 only
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

// log(clamp(x, lo, hi)); zero gradient where the clamp is active.
template <class T>
Tensor<T> log_clamped(const Tensor<T>& x, double lo, double hi) {
  const T l = static_cast<T>(lo);
  const T h = static_cast<T>(hi);
  return detail::unary_op(
      x, "log_clamped", [l, h](T v) { return std::log(std::clamp(v, l, h)); },
      [l, h](T v, T) { return (v < l || v > h) ? T(0) : T(1) / v; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> res = detail::make_result(kScalarShape, std::vector<T>{acc}, {&x}, "sum");
  if (res.requires_grad()) {
    res.node()->backward = [](Node<T>& self) {
      if (auto* gx = detail::input_grad(self, 0)) {
        for (auto& g : *gx) g += self.grad[0];
      }
    };
  }
  return res;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const std::size_t count = x.numel();
  if (count == 0) throw ShapeError("mean: empty tensor");
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> res = detail::make_result(kScalarShape, std::vector<T>{acc / static_cast<T>(count)}, {&x}, "mean");
  if (res.requires_grad()) {
    res.node()->backward = [count](Node<T>& self) {
      if (auto* gx = detail::input_grad(self, 0)) {
        const T g = self.grad[0] / static_cast<T>(count);
        for (auto& v : *gx) v += g;
      }
    };
  }
  return res;
}

using AxisMask = std::array<bool, 4>;  // reduce over (n, c, h, w)

namespace detail {
template <class T>
Tensor<T> reduce_axes(const Tensor<T>& x, AxisMask axes, bool average, const char* op) {
  const Shape s = x.shape();
  const Shape r{axes[0] ? 1 : s.n, axes[1] ? 1 : s.c, axes[2] ? 1 : s.h, axes[3] ? 1 : s.w};
  const std::size_t count = s.numel() / std::max<std::size_t>(r.numel(), 1);
  const T k = average ? T(1) / static_cast<T>(count) : T(1);
  std::vector<T> out(r.numel(), T(0));
  const auto& xv = x.values();
  for_each_broadcast(s, s, r, [&](std::size_t io, std::size_t, std::size_t ir) { out[ir] += xv[io]; });
  for (auto& v : out) v *= k;
  Tensor<T> res = make_result(r, std::move(out), {&x}, op);
  if (res.requires_grad()) {
    res.node()->backward = [s, r, k](Node<T>& self) {
      auto* gx = input_grad(self, 0);
      if (!gx) return;
      for_each_broadcast(s, s, r,
                         [&](std::size_t io, std::size_t, std::size_t ir) { (*gx)[io] += self.grad[ir] * k; });
    };
  }
  return res;
}
}  // namespace detail

template <class T>
Tensor<T> sum_axes(const Tensor<T>& x, AxisMask axes) {
  return detail::reduce_axes(x, axes, false, "sum_axes");
}

template <class T>
Tensor<T> mean_axes(const Tensor<T>& x, AxisMask axes) {
  return detail::reduce_axes(x, axes, true, "mean_axes");
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  const Shape s0 = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: " + to_string(s) + " incompatible with " + to_string(s0));
    }
    channels += s.c;
  }
  const Shape os{s0.n, channels, s0.h, s0.w};
  const std::size_t plane = s0.plane();
  std::vector<T> out(os.numel());
  std::vector<std::size_t> offsets;
  std::size_t c_off = 0;
  for (const auto& p : parts) {
    offsets.push_back(c_off);
    const Shape& s = p.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
      std::copy_n(p.values().begin() + n * s.c * plane, s.c * plane, out.begin() + (n * channels + c_off) * plane);
    }
    c_off += s.c;
  }
  Tensor<T> res = detail::make_result_list(os, std::move(out), parts, "concat_channels");
  if (res.requires_grad()) {
    res.node()->backward = [offsets, channels, plane](Node<T>& self) {
      for (std::size_t i = 0; i < self.inputs.size(); ++i) {
        auto* gx = detail::input_grad(self, i);
        if (!gx) continue;
        const Shape& s = self.inputs[i]->shape;
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* src = self.grad.data() + (n * channels + offsets[i]) * plane;
          T* dst = gx->data() + n * s.c * plane;
          for (std::size_t j = 0; j < s.c * plane; ++j) dst[j] += src[j];
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Bilinear resize by a factor of two (half-pixel centers, edge clamped).

namespace detail {

struct LinearTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w0, w1;
};

inline LinearTaps down2_taps(std::size_t out) {
  LinearTaps t;
  for (std::size_t o = 0; o < out; ++o) {
    t.i0.push_back(2 * o);
    t.i1.push_back(2 * o + 1);
    t.w0.push_back(0.5);
    t.w1.push_back(0.5);
  }
  return t;
}

inline LinearTaps up2_taps(std::size_t in) {
  LinearTaps t;
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    t.i0.push_back(i0);
    t.i1.push_back(i1);
    t.w0.push_back(1.0 - f);
    t.w1.push_back(f);
  }
  return t;
}

template <class T>
Tensor<T> separable_resample(const Tensor<T>& x, Shape os, LinearTaps ty, LinearTaps tx, const char* op) {
  const Shape s = x.shape();
  std::vector<T> out(os.numel(), T(0));
  const auto& xv = x.values();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* in = xv.data() + nc * s.plane();
    T* o = out.data() + nc * os.plane();
    for (std::size_t y = 0; y < os.h; ++y) {
      const T* r0 = in + ty.i0[y] * s.w;
      const T* r1 = in + ty.i1[y] * s.w;
      const T wy0 = static_cast<T>(ty.w0[y]);
      const T wy1 = static_cast<T>(ty.w1[y]);
      for (std::size_t xx = 0; xx < os.w; ++xx) {
        const T wx0 = static_cast<T>(tx.w0[xx]);
        const T wx1 = static_cast<T>(tx.w1[xx]);
        o[y * os.w + xx] = wy0 * (wx0 * r0[tx.i0[xx]] + wx1 * r0[tx.i1[xx]]) +
                           wy1 * (wx0 * r1[tx.i0[xx]] + wx1 * r1[tx.i1[xx]]);
      }
    }
  }
  Tensor<T> res = make_result(os, std::move(out), {&x}, op);
  if (res.requires_grad()) {
    res.node()->backward = [s, os, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
      auto* gx = input_grad(self, 0);
      if (!gx) return;
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        T* gin = gx->data() + nc * s.plane();
        const T* g = self.grad.data() + nc * os.plane();
        for (std::size_t y = 0; y < os.h; ++y) {
          T* r0 = gin + ty.i0[y] * s.w;
          T* r1 = gin + ty.i1[y] * s.w;
          const T wy0 = static_cast<T>(ty.w0[y]);
          const T wy1 = static_cast<T>(ty.w1[y]);
          for (std::size_t xx = 0; xx < os.w; ++xx) {
            const T gv = g[y * os.w + xx];
            const T wx0 = static_cast<T>(tx.w0[xx]);
            const T wx1 = static_cast<T>(tx.w1[xx]);
            r0[tx.i0[xx]] += gv * wy0 * wx0;
            r0[tx.i1[xx]] += gv * wy0 * wx1;
            r1[tx.i0[xx]] += gv * wy1 * wx0;
            r1[tx.i1[xx]] += gv * wy1 * wx1;
          }
        }
      }
    };
  }
  return res;
}

}  // namespace detail

template <class T>
Tensor<T> resize_down2(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("resize_down2: odd extent in " + to_string(s));
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  return detail::separable_resample(x, os, detail::down2_taps(os.h), detail::down2_taps(os.w), "resize_down2");
}

template <class T>
Tensor<T> resize_up2(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h == 0 || s.w == 0) throw ShapeError("resize_up2: empty extent in " + to_string(s));
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  return detail::separable_resample(x, os, detail::up2_taps(s.h), detail::up2_taps(s.w), "resize_up2");
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling. grid is (N, 2, Ho, Wo) holding absolute source
// pixel coordinates (x, y). Taps outside the source read as zero and receive
// no gradient.

template <class T>
Tensor<T> grid_sample(const Tensor<T>& src, const Tensor<T>& grid) {
  const Shape s = src.shape();
  const Shape g = grid.shape();
  if (g.c != 2 || g.n != s.n) {
    throw ShapeError("grid_sample: grid " + to_string(g) + " does not match source " + to_string(s));
  }
  const Shape os{s.n, s.c, g.h, g.w};
  std::vector<T> out(os.numel(), T(0));
  const auto& sv = src.values();
  const auto& gv = grid.values();
  const auto H = static_cast<long>(s.h);
  const auto W = static_cast<long>(s.w);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* gx = gv.data() + (n * 2) * g.plane();
    const T* gy = gx + g.plane();
    for (std::size_t p = 0; p < g.plane(); ++p) {
      const T fx0 = std::floor(gx[p]);
      const T fy0 = std::floor(gy[p]);
      const T fx = gx[p] - fx0;
      const T fy = gy[p] - fy0;
      const long x0 = static_cast<long>(fx0);
      const long y0 = static_cast<long>(fy0);
      const bool in_x0 = x0 >= 0 && x0 < W;
      const bool in_x1 = x0 + 1 >= 0 && x0 + 1 < W;
      const bool in_y0 = y0 >= 0 && y0 < H;
      const bool in_y1 = y0 + 1 >= 0 && y0 + 1 < H;
      const T w00 = (T(1) - fx) * (T(1) - fy);
      const T w10 = fx * (T(1) - fy);
      const T w01 = (T(1) - fx) * fy;
      const T w11 = fx * fy;
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* plane = sv.data() + (n * s.c + c) * s.plane();
        T acc = 0;
        if (in_y0 && in_x0) acc += w00 * plane[y0 * W + x0];
        if (in_y0 && in_x1) acc += w10 * plane[y0 * W + x0 + 1];
        if (in_y1 && in_x0) acc += w01 * plane[(y0 + 1) * W + x0];
        if (in_y1 && in_x1) acc += w11 * plane[(y0 + 1) * W + x0 + 1];
        out[(n * s.c + c) * os.plane() + p] = acc;
      }
    }
  }
  Tensor<T> res = detail::make_result(os, std::move(out), {&src, &grid}, "grid_sample");
  if (res.requires_grad()) {
    res.node()->backward = [s, g, os, H, W](Node<T>& self) {
      auto* gsrc = detail::input_grad(self, 0);
      auto* ggrid = detail::input_grad(self, 1);
      const auto& sv = self.inputs[0]->value;
      const auto& gv = self.inputs[1]->value;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* gx = gv.data() + (n * 2) * g.plane();
        const T* gy = gx + g.plane();
        for (std::size_t p = 0; p < g.plane(); ++p) {
          const T fx0 = std::floor(gx[p]);
          const T fy0 = std::floor(gy[p]);
          const T fx = gx[p] - fx0;
          const T fy = gy[p] - fy0;
          const long x0 = static_cast<long>(fx0);
          const long y0 = static_cast<long>(fy0);
          const bool in_x0 = x0 >= 0 && x0 < W;
          const bool in_x1 = x0 + 1 >= 0 && x0 + 1 < W;
          const bool in_y0 = y0 >= 0 && y0 < H;
          const bool in_y1 = y0 + 1 >= 0 && y0 + 1 < H;
          T dgx = 0;
          T dgy = 0;
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * s.plane();
            const T go = self.grad[(n * s.c + c) * os.plane() + p];
            const T v00 = (in_y0 && in_x0) ? sv[base + y0 * W + x0] : T(0);
            const T v10 = (in_y0 && in_x1) ? sv[base + y0 * W + x0 + 1] : T(0);
            const T v01 = (in_y1 && in_x0) ? sv[base + (y0 + 1) * W + x0] : T(0);
            const T v11 = (in_y1 && in_x1) ? sv[base + (y0 + 1) * W + x0 + 1] : T(0);
            if (gsrc) {
              if (in_y0 && in_x0) (*gsrc)[base + y0 * W + x0] += go * (T(1) - fx) * (T(1) - fy);
              if (in_y0 && in_x1) (*gsrc)[base + y0 * W + x0 + 1] += go * fx * (T(1) - fy);
              if (in_y1 && in_x0) (*gsrc)[base + (y0 + 1) * W + x0] += go * (T(1) - fx) * fy;
              if (in_y1 && in_x1) (*gsrc)[base + (y0 + 1) * W + x0 + 1] += go * fx * fy;
            }
            dgx += go * ((v10 - v00) * (T(1) - fy) + (v11 - v01) * fy);
            dgy += go * ((v01 - v00) * (T(1) - fx) + (v11 - v10) * fx);
          }
          if (ggrid) {
            (*ggrid)[(n * 2) * g.plane() + p] += dgx;
            (*ggrid)[(n * 2 + 1) * g.plane() + p] += dgy;
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// 1-D correlation along one axis. Channel k of the output holds
//   (1/C) * sum_c a[c](p) * b[c](p - d_k * axis),  d_k = d_min + k,
// with zero where the shifted position leaves the image. The stereo cost
// volume is the horizontal case with displacements 0..D.

enum class CorrAxis { horizontal, vertical };

template <class T>
Tensor<T> correlation1d(const Tensor<T>& a, const Tensor<T>& b, CorrAxis axis, int d_min, int d_max) {
  if (a.shape() != b.shape()) {
    throw ShapeError("correlation1d: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (d_max < d_min) throw UsageError("correlation1d: empty displacement range");
  const Shape s = a.shape();
  const std::size_t K = static_cast<std::size_t>(d_max - d_min + 1);
  const Shape os{s.n, K, s.h, s.w};
  const T inv_c = T(1) / static_cast<T>(s.c);
  const long H = static_cast<long>(s.h);
  const long W = static_cast<long>(s.w);
  const long dx_unit = axis == CorrAxis::horizontal ? 1 : 0;
  const long dy_unit = axis == CorrAxis::vertical ? 1 : 0;

  auto visit = [=](auto&& f) {
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const long d = d_min + static_cast<long>(k);
        const long ox = d * dx_unit;
        const long oy = d * dy_unit;
        for (long y = 0; y < H; ++y) {
          const long ys = y - oy;
          if (ys < 0 || ys >= H) continue;
          for (long x = 0; x < W; ++x) {
            const long xs = x - ox;
            if (xs < 0 || xs >= W) continue;
            f(n, k, static_cast<std::size_t>(y * W + x), static_cast<std::size_t>(ys * W + xs));
          }
        }
      }
    }
  };

  std::vector<T> out(os.numel(), T(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  visit([&](std::size_t n, std::size_t k, std::size_t p, std::size_t q) {
    T acc = 0;
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      acc += av[base + p] * bv[base + q];
    }
    out[(n * K + k) * s.plane() + p] = acc * inv_c;
  });
  Tensor<T> res = detail::make_result(os, std::move(out), {&a, &b}, "correlation1d");
  if (res.requires_grad()) {
    res.node()->backward = [=](Node<T>& self) {
      auto* ga = detail::input_grad(self, 0);
      auto* gb = detail::input_grad(self, 1);
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      visit([&](std::size_t n, std::size_t k, std::size_t p, std::size_t q) {
        const T go = self.grad[(n * K + k) * s.plane() + p] * inv_c;
        if (go == T(0)) return;
        for (std::size_t c = 0; c < s.c; ++c) {
          const std::size_t base = (n * s.c + c) * s.plane();
          if (ga) (*ga)[base + p] += go * bv[base + q];
          if (gb) (*gb)[base + q] += go * av[base + p];
        }
      });
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Smooth-L1 distance map: 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.

template <class T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b, double beta = 1.0) {
  if (beta <= 0) throw UsageError("smooth_l1: beta must be positive");
  const T bt = static_cast<T>(beta);
  auto f = [bt](T x, T y) {
    const T d = x - y;
    const T ad = std::abs(d);
    return ad < bt ? T(0.5) * d * d / bt : ad - T(0.5) * bt;
  };
  auto dfa = [bt](T x, T y, T) {
    const T d = x - y;
    if (std::abs(d) < bt) return d / bt;
    return d > T(0) ? T(1) : T(-1);
  };
  auto dfb = [dfa](T x, T y, T o) { return -dfa(x, y, o); };
  if (a.shape() != b.shape()) {
    throw ShapeError("smooth_l1: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  return detail::binary_op(a, b, "smooth_l1", f, dfa, dfb);
}

// ---------------------------------------------------------------------------
// Windowed SSIM map: 11x11 Gaussian (sigma 1.5), renormalized at borders,
// C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1. Statistics run in double.

struct SsimConstants {
  static constexpr int kWindow = 11;
  static constexpr double kSigma = 1.5;
  static constexpr double kC1 = 0.01 * 0.01;
  static constexpr double kC2 = 0.03 * 0.03;
};

namespace detail {

inline const std::vector<double>& ssim_taps() {
  static const std::vector<double> taps = [] {
    std::vector<double> w(SsimConstants::kWindow);
    const int r = SsimConstants::kWindow / 2;
    double total = 0;
    for (int i = 0; i < SsimConstants::kWindow; ++i) {
      const double d = i - r;
      w[i] = std::exp(-d * d / (2 * SsimConstants::kSigma * SsimConstants::kSigma));
      total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
  }();
  return taps;
}

// Per-position normalizer: sum of tap weights landing inside [0, n).
inline std::vector<double> ssim_norms(std::size_t n) {
  const auto& w = ssim_taps();
  const long r = static_cast<long>(w.size() / 2);
  std::vector<double> norm(n, 0.0);
  for (long i = 0; i < static_cast<long>(n); ++i) {
    for (long k = -r; k <= r; ++k) {
      const long j = i + k;
      if (j >= 0 && j < static_cast<long>(n)) norm[i] += w[k + r];
    }
  }
  return norm;
}

class GaussianBlur {
 public:
  GaussianBlur(std::size_t h, std::size_t w) : h_(h), w_(w), norm_y_(ssim_norms(h)), norm_x_(ssim_norms(w)) {}

  void apply(const double* in, double* out) const {
    const auto& k = ssim_taps();
    const long r = static_cast<long>(k.size() / 2);
    std::vector<double> tmp(h_ * w_, 0.0);
    for (std::size_t y = 0; y < h_; ++y) {
      for (long x = 0; x < static_cast<long>(w_); ++x) {
        double acc = 0;
        for (long d = -r; d <= r; ++d) {
          const long xs = x + d;
          if (xs >= 0 && xs < static_cast<long>(w_)) acc += k[d + r] * in[y * w_ + xs];
        }
        tmp[y * w_ + x] = acc / norm_x_[x];
      }
    }
    for (long y = 0; y < static_cast<long>(h_); ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        double acc = 0;
        for (long d = -r; d <= r; ++d) {
          const long ys = y + d;
          if (ys >= 0 && ys < static_cast<long>(h_)) acc += k[d + r] * tmp[ys * w_ + x];
        }
        out[y * w_ + x] = acc / norm_y_[y];
      }
    }
  }

  // Adjoint of apply(); accumulates into gin.
  void apply_transpose(const double* gout, double* gin) const {
    const auto& k = ssim_taps();
    const long r = static_cast<long>(k.size() / 2);
    std::vector<double> gtmp(h_ * w_, 0.0);
    for (long y = 0; y < static_cast<long>(h_); ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        const double g = gout[y * w_ + x] / norm_y_[y];
        for (long d = -r; d <= r; ++d) {
          const long ys = y + d;
          if (ys >= 0 && ys < static_cast<long>(h_)) gtmp[ys * w_ + x] += k[d + r] * g;
        }
      }
    }
    for (std::size_t y = 0; y < h_; ++y) {
      for (long x = 0; x < static_cast<long>(w_); ++x) {
        const double g = gtmp[y * w_ + x] / norm_x_[x];
        for (long d = -r; d <= r; ++d) {
          const long xs = x + d;
          if (xs >= 0 && xs < static_cast<long>(w_)) gin[y * w_ + xs] += k[d + r] * g;
        }
      }
    }
  }

 private:
  std::size_t h_, w_;
  std::vector<double> norm_y_, norm_x_;
};

struct SsimStats {
  std::vector<double> mu_a, mu_b, s_aa, s_bb, s_ab;
};

template <class T>
SsimStats ssim_stats(const GaussianBlur& blur, const T* a, const T* b, std::size_t plane) {
  SsimStats st;
  std::vector<double> da(a, a + plane), db(b, b + plane), aa(plane), bb(plane), ab(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    aa[i] = da[i] * da[i];
    bb[i] = db[i] * db[i];
    ab[i] = da[i] * db[i];
  }
  for (auto* v : {&st.mu_a, &st.mu_b, &st.s_aa, &st.s_bb, &st.s_ab}) v->resize(plane);
  blur.apply(da.data(), st.mu_a.data());
  blur.apply(db.data(), st.mu_b.data());
  blur.apply(aa.data(), st.s_aa.data());
  blur.apply(bb.data(), st.s_bb.data());
  blur.apply(ab.data(), st.s_ab.data());
  return st;
}

}  // namespace detail

template <class T>
Tensor<T> ssim_map(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim_map: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Shape s = a.shape();
  const detail::GaussianBlur blur(s.h, s.w);
  constexpr double C1 = SsimConstants::kC1;
  constexpr double C2 = SsimConstants::kC2;
  std::vector<T> out(s.numel());
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const auto st = detail::ssim_stats(blur, a.values().data() + nc * s.plane(),
                                       b.values().data() + nc * s.plane(), s.plane());
    for (std::size_t p = 0; p < s.plane(); ++p) {
      const double ma = st.mu_a[p];
      const double mb = st.mu_b[p];
      const double va = st.s_aa[p] - ma * ma;
      const double vb = st.s_bb[p] - mb * mb;
      const double cov = st.s_ab[p] - ma * mb;
      const double num = (2 * ma * mb + C1) * (2 * cov + C2);
      const double den = (ma * ma + mb * mb + C1) * (va + vb + C2);
      out[nc * s.plane() + p] = static_cast<T>(num / den);
    }
  }
  Tensor<T> res = detail::make_result(s, std::move(out), {&a, &b}, "ssim_map");
  if (res.requires_grad()) {
    res.node()->backward = [s](Node<T>& self) {
      auto* ga = detail::input_grad(self, 0);
      auto* gb = detail::input_grad(self, 1);
      const detail::GaussianBlur blur(s.h, s.w);
      const std::size_t P = s.plane();
      std::vector<double> g_mu_a(P), g_mu_b(P), g_saa(P), g_sbb(P), g_sab(P);
      std::vector<double> t_mu_a(P), t_mu_b(P), t_saa(P), t_sbb(P), t_sab(P);
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const T* av = self.inputs[0]->value.data() + nc * P;
        const T* bv = self.inputs[1]->value.data() + nc * P;
        const auto st = detail::ssim_stats(blur, av, bv, P);
        for (std::size_t p = 0; p < P; ++p) {
          const double g = self.grad[nc * P + p];
          const double ma = st.mu_a[p];
          const double mb = st.mu_b[p];
          const double va = st.s_aa[p] - ma * ma;
          const double vb = st.s_bb[p] - mb * mb;
          const double cov = st.s_ab[p] - ma * mb;
          const double A1 = 2 * ma * mb + SsimConstants::kC1;
          const double A2 = 2 * cov + SsimConstants::kC2;
          const double B1 = ma * ma + mb * mb + SsimConstants::kC1;
          const double B2 = va + vb + SsimConstants::kC2;
          const double S = A1 * A2 / (B1 * B2);
          const double inv = 1.0 / (B1 * B2);
          g_mu_a[p] = g * (2 * mb * (A2 - A1) * inv + 2 * ma * S * (1.0 / B2 - 1.0 / B1));
          g_mu_b[p] = g * (2 * ma * (A2 - A1) * inv + 2 * mb * S * (1.0 / B2 - 1.0 / B1));
          g_saa[p] = g * (-S / B2);
          g_sbb[p] = g * (-S / B2);
          g_sab[p] = g * (2 * A1 * inv);
        }
        for (auto* v : {&t_mu_a, &t_mu_b, &t_saa, &t_sbb, &t_sab}) std::fill(v->begin(), v->end(), 0.0);
        blur.apply_transpose(g_mu_a.data(), t_mu_a.data());
        blur.apply_transpose(g_mu_b.data(), t_mu_b.data());
        blur.apply_transpose(g_saa.data(), t_saa.data());
        blur.apply_transpose(g_sbb.data(), t_sbb.data());
        blur.apply_transpose(g_sab.data(), t_sab.data());
        for (std::size_t p = 0; p < P; ++p) {
          const double a = av[p];
          const double b = bv[p];
          if (ga) (*ga)[nc * P + p] += static_cast<T>(t_mu_a[p] + 2 * a * t_saa[p] + b * t_sab[p]);
          if (gb) (*gb)[nc * P + p] += static_cast<T>(t_mu_b[p] + 2 * b * t_sbb[p] + a * t_sab[p]);
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Channelwise cosine similarity: (N,C,H,W) x2 -> (N,1,H,W),
// cos = <a,b> / max(|a| |b|, eps). Accumulated in double.

template <class T>
Tensor<T> cosine_map(const Tensor<T>& a, const Tensor<T>& b, double eps = 1e-8) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cosine_map: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Shape s = a.shape();
  const Shape os{s.n, 1, s.h, s.w};
  const std::size_t P = s.plane();
  std::vector<T> out(os.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double x = av[(n * s.c + c) * P + p];
        const double y = bv[(n * s.c + c) * P + p];
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      out[n * P + p] = static_cast<T>(dot / std::max(std::sqrt(na * nb), eps));
    }
  }
  Tensor<T> res = detail::make_result(os, std::move(out), {&a, &b}, "cosine_map");
  if (res.requires_grad()) {
    res.node()->backward = [s, P, eps](Node<T>& self) {
      auto* ga = detail::input_grad(self, 0);
      auto* gb = detail::input_grad(self, 1);
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t p = 0; p < P; ++p) {
          double dot = 0, na = 0, nb = 0;
          for (std::size_t c = 0; c < s.c; ++c) {
            const double x = av[(n * s.c + c) * P + p];
            const double y = bv[(n * s.c + c) * P + p];
            dot += x * y;
            na += x * x;
            nb += y * y;
          }
          const double g = self.grad[n * P + p];
          const double prod = std::sqrt(na * nb);
          const bool clamped = prod <= eps;
          const double denom = clamped ? eps : prod;
          const double cosv = dot / denom;
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = (n * s.c + c) * P + p;
            const double x = av[i];
            const double y = bv[i];
            if (ga) (*ga)[i] += static_cast<T>(g * (clamped ? y / eps : y / denom - cosv * x / na));
            if (gb) (*gb)[i] += static_cast<T>(g * (clamped ? x / eps : x / denom - cosv * y / nb));
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM). Weights: conv2d (Cout, Cin, k, k);
// conv_transpose2d (Cin, Cout, k, k). Bias, when defined, is (1, Cout, 1, 1).

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  std::size_t channels, h, w, k, stride, pad, out_h, out_w;
  std::size_t rows() const { return channels * k * k; }
  std::size_t cols() const { return out_h * out_w; }
};

template <class T>
void im2col(const T* src, const ConvGeom& g, T* col) {
  const long H = static_cast<long>(g.h);
  const long W = static_cast<long>(g.w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = src + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        T* out = col + row * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* orow = out + oy * g.out_w;
          if (y < 0 || y >= H) {
            std::fill_n(orow, g.out_w, T(0));
            continue;
          }
          const T* irow = plane + y * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            orow[ox] = (x >= 0 && x < W) ? irow[x] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* dst) {
  const long H = static_cast<long>(g.h);
  const long W = static_cast<long>(g.w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = dst + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        const T* in = col + row * g.cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (y < 0 || y >= H) continue;
          T* drow = plane + y * W;
          const T* irow = in + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (x >= 0 && x < W) drow[x] += irow[ox];
          }
        }
      }
    }
  }
}

template <class T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

// C (m x n) = or += op(A) * op(B), all row-major. Eigen peels unaligned heads
// differently depending on where a buffer happens to live, which reorders
// float sums; staging every operand in aligned scratch keeps results
// bitwise reproducible from run to run.
template <class T>
void matmul(const T* a, std::size_t a_rows, std::size_t a_cols, bool ta, const T* b, std::size_t b_rows,
            std::size_t b_cols, bool tb, T* c, bool accumulate) {
  using AMap = Eigen::Map<const MatR<T>, Eigen::AlignedMax>;
  using OMap = Eigen::Map<MatR<T>, Eigen::AlignedMax>;
  thread_local AlignedVec<T> sa, sb, sc;
  sa.assign(a, a + a_rows * a_cols);
  sb.assign(b, b + b_rows * b_cols);
  const std::size_t m = ta ? a_cols : a_rows;
  const std::size_t n = tb ? b_rows : b_cols;
  sc.resize(m * n);
  AMap am(sa.data(), a_rows, a_cols), bm(sb.data(), b_rows, b_cols);
  OMap cm(sc.data(), m, n);
  if (ta && tb) cm.noalias() = am.transpose() * bm.transpose();
  else if (ta) cm.noalias() = am.transpose() * bm;
  else if (tb) cm.noalias() = am * bm.transpose();
  else cm.noalias() = am * bm;
  if (accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] += sc[i];
  } else {
    std::copy(sc.begin(), sc.end(), c);
  }
}

template <class T>
void check_bias(const Tensor<T>& bias, std::size_t cout, const char* op) {
  if (!bias.defined()) return;
  if (bias.shape() != Shape{1, cout, 1, 1}) {
    throw ShapeError(std::string(op) + ": bias " + to_string(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t pad = 1) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != s.c || ws.h != ws.w || stride == 0) {
    throw ShapeError("conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(s));
  }
  if (s.h + 2 * pad < ws.h || s.w + 2 * pad < ws.w) throw ShapeError("conv2d: input smaller than kernel");
  detail::check_bias(bias, ws.n, "conv2d");
  const detail::ConvGeom geom{s.c, s.h, s.w, ws.h, stride, pad, (s.h + 2 * pad - ws.h) / stride + 1,
                              (s.w + 2 * pad - ws.w) / stride + 1};
  const std::size_t cout = ws.n;
  const Shape os{s.n, cout, geom.out_h, geom.out_w};
  std::vector<T> out(os.numel());
  std::vector<T> col(geom.rows() * geom.cols());
  const T* wm = weight.values().data();
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::im2col(x.values().data() + n * s.c * s.plane(), geom, col.data());
    T* on = out.data() + n * cout * geom.cols();
    detail::matmul(wm, cout, geom.rows(), false, col.data(), geom.rows(), geom.cols(), false, on, false);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < geom.cols(); ++p) on[c * geom.cols() + p] += bias.values()[c];
    }
  }
  Tensor<T> res = detail::make_result(os, std::move(out), {&x, &weight, &bias}, "conv2d");
  if (res.requires_grad()) {
    res.node()->backward = [s, geom, cout](Node<T>& self) {
      auto* gx = detail::input_grad(self, 0);
      auto* gw = detail::input_grad(self, 1);
      auto* gb = self.inputs.size() > 2 ? detail::input_grad(self, 2) : nullptr;
      const T* wm = self.inputs[1]->value.data();
      std::vector<T> col(geom.rows() * geom.cols());
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* go = self.grad.data() + n * cout * geom.cols();
        if (gw) {
          detail::im2col(self.inputs[0]->value.data() + n * s.c * s.plane(), geom, col.data());
          detail::matmul(go, cout, geom.cols(), false, col.data(), geom.rows(), geom.cols(), true, gw->data(), true);
        }
        if (gx) {
          detail::matmul(wm, cout, geom.rows(), true, go, cout, geom.cols(), false, col.data(), false);
          detail::col2im(col.data(), geom, gx->data() + n * s.c * s.plane());
        }
        if (gb) {
          for (std::size_t c = 0; c < cout; ++c) {
            T acc = 0;
            for (std::size_t p = 0; p < geom.cols(); ++p) acc += go[c * geom.cols() + p];
            (*gb)[c] += acc;
          }
        }
      }
    };
  }
  return res;
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride = 2, std::size_t pad = 1) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != s.c || ws.h != ws.w || stride == 0) {
    throw ShapeError("conv_transpose2d: weight " + to_string(ws) + " incompatible with input " + to_string(s));
  }
  if ((s.h - 1) * stride + ws.h < 2 * pad + 1 || (s.w - 1) * stride + ws.w < 2 * pad + 1) {
    throw ShapeError("conv_transpose2d: padding exceeds output");
  }
  const std::size_t cout = ws.c;
  const std::size_t oh = (s.h - 1) * stride + ws.h - 2 * pad;
  const std::size_t ow = (s.w - 1) * stride + ws.w - 2 * pad;
  detail::check_bias(bias, cout, "conv_transpose2d");
  // Geometry of the adjoint convolution mapping (cout, oh, ow) -> (h, w).
  const detail::ConvGeom geom{cout, oh, ow, ws.h, stride, pad, s.h, s.w};
  if (geom.out_h != (oh + 2 * pad - ws.h) / stride + 1 || geom.out_w != (ow + 2 * pad - ws.w) / stride + 1) {
    throw ShapeError("conv_transpose2d: inconsistent geometry");
  }
  const Shape os{s.n, cout, oh, ow};
  std::vector<T> out(os.numel(), T(0));
  std::vector<T> col(geom.rows() * geom.cols());
  const T* wm = weight.values().data();
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::matmul(wm, s.c, geom.rows(), true, x.values().data() + n * s.c * s.plane(), s.c, s.plane(), false,
                   col.data(), false);
    T* on = out.data() + n * cout * oh * ow;
    detail::col2im(col.data(), geom, on);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t p = 0; p < oh * ow; ++p) on[c * oh * ow + p] += bias.values()[c];
      }
    }
  }
  Tensor<T> res = detail::make_result(os, std::move(out), {&x, &weight, &bias}, "conv_transpose2d");
  if (res.requires_grad()) {
    res.node()->backward = [s, geom, cout, oh, ow](Node<T>& self) {
      auto* gx = detail::input_grad(self, 0);
      auto* gw = detail::input_grad(self, 1);
      auto* gb = self.inputs.size() > 2 ? detail::input_grad(self, 2) : nullptr;
      const T* wm = self.inputs[1]->value.data();
      std::vector<T> col(geom.rows() * geom.cols());
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* go = self.grad.data() + n * cout * oh * ow;
        detail::im2col(go, geom, col.data());
        if (gx) {
          detail::matmul(wm, s.c, geom.rows(), false, col.data(), geom.rows(), geom.cols(), false,
                         gx->data() + n * s.c * s.plane(), true);
        }
        if (gw) {
          detail::matmul(self.inputs[0]->value.data() + n * s.c * s.plane(), s.c, s.plane(), false, col.data(),
                         geom.rows(), geom.cols(), true, gw->data(), true);
        }
        if (gb) {
          for (std::size_t c = 0; c < cout; ++c) {
            T acc = 0;
            for (std::size_t p = 0; p < oh * ow; ++p) acc += go[c * oh * ow + p];
            (*gb)[c] += acc;
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Name-based dispatch over the catalog.

enum class Kernel {
  conv2d,
  conv_transpose2d,
  leaky_relu,
  sigmoid,
  tanh,
  softplus,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  abs,
  square,
  exp,
  sqrt,
  log_clamped,
  sum,
  mean,
  sum_axes,
  mean_axes,
  concat_channels,
  resize_down2,
  resize_up2,
  grid_sample,
  correlation1d,
  smooth_l1,
  ssim_map,
  cosine_map,
};

struct KernelParams {
  std::size_t stride = 1;
  std::size_t pad = 1;
  double slope = 0.2;
  double beta = 1.0;
  double scalar = 1.0;
  double lo = 1e-6;
  double hi = 1.0 - 1e-6;
  CorrAxis axis = CorrAxis::horizontal;
  int d_min = 0;
  int d_max = 0;
  AxisMask axes{false, false, false, false};
};

template <class T>
Tensor<T> apply(Kernel kernel, const std::vector<Tensor<T>>& in, const KernelParams& p = {}) {
  auto need = [&](std::size_t lo, std::size_t hi, const char* name) {
    if (in.size() < lo || in.size() > hi) {
      throw UsageError(std::string(name) + ": expected " + std::to_string(lo) + (lo == hi ? "" : "+") +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kernel) {
    case Kernel::conv2d:
      need(2, 3, "conv2d");
      return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor<T>{}, p.stride, p.pad);
    case Kernel::conv_transpose2d:
      need(2, 3, "conv_transpose2d");
      return conv_transpose2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor<T>{}, p.stride, p.pad);
    case Kernel::leaky_relu: need(1, 1, "leaky_relu"); return leaky_relu(in[0], p.slope);
    case Kernel::sigmoid: need(1, 1, "sigmoid"); return sigmoid(in[0]);
    case Kernel::tanh: need(1, 1, "tanh"); return tanh(in[0]);
    case Kernel::softplus: need(1, 1, "softplus"); return softplus(in[0]);
    case Kernel::add: need(2, 2, "add"); return add(in[0], in[1]);
    case Kernel::sub: need(2, 2, "sub"); return sub(in[0], in[1]);
    case Kernel::mul: need(2, 2, "mul"); return mul(in[0], in[1]);
    case Kernel::div: need(2, 2, "div"); return div(in[0], in[1]);
    case Kernel::scale: need(1, 1, "scale"); return scale(in[0], p.scalar);
    case Kernel::add_scalar: need(1, 1, "add_scalar"); return add_scalar(in[0], p.scalar);
    case Kernel::abs: need(1, 1, "abs"); return abs(in[0]);
    case Kernel::square: need(1, 1, "square"); return square(in[0]);
    case Kernel::exp: need(1, 1, "exp"); return exp(in[0]);
    case Kernel::sqrt: need(1, 1, "sqrt"); return sqrt(in[0]);
    case Kernel::log_clamped: need(1, 1, "log_clamped"); return log_clamped(in[0], p.lo, p.hi);
    case Kernel::sum: need(1, 1, "sum"); return sum(in[0]);
    case Kernel::mean: need(1, 1, "mean"); return mean(in[0]);
    case Kernel::sum_axes: need(1, 1, "sum_axes"); return sum_axes(in[0], p.axes);
    case Kernel::mean_axes: need(1, 1, "mean_axes"); return mean_axes(in[0], p.axes);
    case Kernel::concat_channels: need(1, in.size() + 1, "concat_channels"); return concat_channels(in);
    case Kernel::resize_down2: need(1, 1, "resize_down2"); return resize_down2(in[0]);
    case Kernel::resize_up2: need(1, 1, "resize_up2"); return resize_up2(in[0]);
    case Kernel::grid_sample: need(2, 2, "grid_sample"); return grid_sample(in[0], in[1]);
    case Kernel::correlation1d:
      need(2, 2, "correlation1d");
      return correlation1d(in[0], in[1], p.axis, p.d_min, p.d_max);
    case Kernel::smooth_l1: need(2, 2, "smooth_l1"); return smooth_l1(in[0], in[1], p.beta);
    case Kernel::ssim_map: need(2, 2, "ssim_map"); return ssim_map(in[0], in[1]);
    case Kernel::cosine_map: need(2, 2, "cosine_map"); return cosine_map(in[0], in[1]);
  }
  throw UsageError("apply: unknown kernel id " + std::to_string(static_cast<int>(kernel)));
}

template <class T>
Tensor<T> apply(Kernel kernel, std::initializer_list<Tensor<T>> in, const KernelParams& p = {}) {
  return apply(kernel, std::vector<Tensor<T>>(in), p);
}

}  // namespace warpadapt
