#pragma once

// Finite-difference checks over every differentiable kernel and every loss
// term, on small random double inputs. Shared by `warpadapt gradcheck` and the
// test suites; `seed` only changes the inputs, never the thresholds.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "warpadapt/gradcheck.hpp"
#include "warpadapt/losses.hpp"
#include "warpadapt/netlib.hpp"

namespace warpadapt {

inline constexpr double kSmoothGradTol = 1e-4;
inline constexpr double kGradTol = 1e-3;
// Elements sitting on a hinge may be dropped, but only this many.
inline constexpr double kMaxSkippedFraction = 0.1;

struct GradCase {
  std::string name;
  double tolerance;
  std::function<double()> run;  // relative error; +inf when too many elements were skipped
};

namespace detail {

using TD = Tensor<double>;

inline TD suite_random(Shape s, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Rng rng(seed);
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::make(s, std::move(v));
}

// uniform in [lo, hi] but at least `gap` from every kink
inline TD suite_away_from(Shape s, std::uint64_t seed, const std::vector<double>& kinks, double gap, double lo = -2.0,
                          double hi = 2.0) {
  Rng rng(seed);
  std::vector<double> v(s.numel());
  for (auto& x : v) {
    for (;;) {
      x = rng.uniform(lo, hi);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) > gap;
      if (ok) break;
    }
  }
  return TD::make(s, std::move(v));
}

// <out, r> for a fixed random r: every output element gets its own weight.
inline TD project(const TD& out, std::uint64_t seed) { return sum(mul(out, suite_random(out.shape(), seed, -1, 1))); }

// Full check that tolerates a few hinge crossings (networks, abs residuals
// through bilinear sampling).
inline double check_with_kinks(const ScalarFn& f, const TD& x, double step = 1e-6) {
  std::size_t skipped = 0;
  const double err = grad_check_sampled(f, x, x.numel(), 0, step, true, &skipped);
  if (static_cast<double>(skipped) > kMaxSkippedFraction * static_cast<double>(x.numel()))
    return std::numeric_limits<double>::infinity();
  return err;
}

}  // namespace detail

inline std::vector<GradCase> gradient_suite(std::uint64_t seed = 0) {
  using detail::TD;
  std::vector<GradCase> cases;
  const std::uint64_t base = seed * 1000;
  auto in = [base](Shape s, std::uint64_t k, double lo = -2, double hi = 2) {
    return detail::suite_random(s, base + k, lo, hi);
  };
  auto away = [base](Shape s, std::uint64_t k, std::vector<double> kinks, double gap, double lo = -2, double hi = 2) {
    return detail::suite_away_from(s, base + k, kinks, gap, lo, hi);
  };
  auto unary = [&](std::string name, bool smooth, std::function<TD(const TD&)> f, TD x) {
    cases.push_back({"kernel/" + name, smooth ? kSmoothGradTol : kGradTol,
                     [=] { return grad_check([=](const TD& t) { return detail::project(f(t), 77); }, x); }});
  };
  auto binary = [&](std::string name, bool smooth, std::function<TD(const TD&, const TD&)> f, TD a, TD b) {
    const double tol = smooth ? kSmoothGradTol : kGradTol;
    cases.push_back({"kernel/" + name + "[a]", tol,
                     [=] { return grad_check([=](const TD& t) { return detail::project(f(t, b), 78); }, a); }});
    cases.push_back({"kernel/" + name + "[b]", tol,
                     [=] { return grad_check([=](const TD& t) { return detail::project(f(a, t), 79); }, b); }});
  };
  auto loss = [&](std::string name, std::function<TD(const TD&)> f, TD x) {
    cases.push_back({"loss/" + name, kGradTol, [=] { return detail::check_with_kinks(f, x); }});
  };

  // --- kernels ---
  const Shape s{2, 3, 6, 8};
  const TD w = in({4, 3, 3, 3}, 31, -0.5, 0.5), bias = in({1, 4, 1, 1}, 32);
  for (std::size_t stride : {1u, 2u}) {
    const std::string tag = "conv2d/s" + std::to_string(stride);
    const TD x = in(s, 1);
    unary(tag + "[x]", true, [=](const TD& t) { return conv2d(t, w, bias, stride, 1); }, x);
    unary(tag + "[w]", true, [=](const TD& t) { return conv2d(x, t, bias, stride, 1); }, w);
    unary(tag + "[b]", true, [=](const TD& t) { return conv2d(x, w, t, stride, 1); }, bias);
  }
  {
    const TD wt = in({3, 2, 4, 4}, 33, -0.5, 0.5), bt = in({1, 2, 1, 1}, 34), x = in(s, 2);
    unary("conv_transpose2d[x]", true, [=](const TD& t) { return conv_transpose2d(t, wt, bt, 2, 1); }, x);
    unary("conv_transpose2d[w]", true, [=](const TD& t) { return conv_transpose2d(x, t, bt, 2, 1); }, wt);
    unary("conv_transpose2d[b]", true, [=](const TD& t) { return conv_transpose2d(x, wt, t, 2, 1); }, bt);
  }
  unary("leaky_relu", false, [](const TD& t) { return leaky_relu(t, 0.2); }, away(s, 3, {0.0}, 0.01));
  unary("sigmoid", true, [](const TD& t) { return sigmoid(t); }, in(s, 4));
  unary("tanh", true, [](const TD& t) { return tanh(t); }, in(s, 5));
  unary("softplus", true, [](const TD& t) { return softplus(t); }, in(s, 6));
  unary("scale", true, [](const TD& t) { return scale(t, -1.7); }, in(s, 7));
  unary("add_scalar", true, [](const TD& t) { return add_scalar(t, 0.3); }, in(s, 8));
  unary("abs", false, [](const TD& t) { return abs(t); }, away(s, 9, {0.0}, 0.01));
  unary("square", true, [](const TD& t) { return square(t); }, in(s, 10));
  unary("exp", true, [](const TD& t) { return exp(t); }, in(s, 43));
  unary("sqrt", true, [](const TD& t) { return sqrt(t); }, in(s, 44, 0.5, 2.0));
  unary("log_clamped", false, [](const TD& t) { return log_clamped(t, 0.1, 1.5); },
        away(s, 11, {0.1, 1.5}, 0.01, 0.0, 2.0));
  unary("sum", true, [](const TD& t) { return sum(t); }, in(s, 12));
  unary("mean", true, [](const TD& t) { return mean(t); }, in(s, 13));
  unary("sum_axes", true, [](const TD& t) { return sum_axes(t, {false, true, false, true}); }, in(s, 14));
  unary("mean_axes", true, [](const TD& t) { return mean_axes(t, {true, false, true, false}); }, in(s, 15));
  unary("resize_down2", true, [](const TD& t) { return resize_down2(t); }, in(s, 16));
  unary("resize_up2", true, [](const TD& t) { return resize_up2(t); }, in(s, 17));
  {
    const TD other = in(s, 18);
    unary("concat_channels", true, [=](const TD& t) { return concat_channels<double>({other, t, t}); }, in(s, 19));
  }
  binary("add", true, [](const TD& a, const TD& b) { return add(a, b); }, in(s, 20), in({1, 3, 1, 8}, 21));
  binary("sub", true, [](const TD& a, const TD& b) { return sub(a, b); }, in(s, 22), in({2, 1, 6, 1}, 23));
  binary("mul", true, [](const TD& a, const TD& b) { return mul(a, b); }, in(s, 24), in({1, 1, 6, 8}, 25));
  binary("div", true, [](const TD& a, const TD& b) { return div(a, b); }, in(s, 26), in(s, 27, 0.5, 2.0));
  binary("smooth_l1", false, [](const TD& a, const TD& b) { return smooth_l1(a, b, 1.0); },
         away(s, 28, {-1.0, 1.0}, 0.02, -1.0, 1.0), TD::zeros(s));
  binary("ssim_map", true, [](const TD& a, const TD& b) { return ssim_map(a, b); }, in({1, 2, 12, 13}, 29),
         in({1, 2, 12, 13}, 30));
  binary("cosine_map", true, [](const TD& a, const TD& b) { return cosine_map(a, b); }, in(s, 35), in(s, 36));
  binary("correlation1d/h", true,
         [](const TD& a, const TD& b) { return correlation1d(a, b, CorrAxis::horizontal, 0, 3); }, in(s, 37),
         in(s, 38));
  binary("correlation1d/v", true,
         [](const TD& a, const TD& b) { return correlation1d(a, b, CorrAxis::vertical, -2, 2); }, in(s, 39),
         in(s, 40));
  {
    // grid gradient is only defined away from cell edges
    Rng rng(base + 41);
    std::vector<double> g(2 * 2 * 6 * 8);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool is_y = (i / 48) % 2 == 1;
      g[i] = static_cast<double>(rng.range(-1, is_y ? 6 : 8)) + rng.uniform(0.1, 0.9);
    }
    binary("grid_sample", false, [](const TD& a, const TD& b) { return grid_sample(a, b); }, in(s, 42),
           TD::make({2, 2, 6, 8}, g));
  }
  {
    const TD src = in({1, 2, 6, 7}, 50);
    const std::vector<double> ints{-2, -1, 0, 1, 2};
    const TD disp = away({1, 1, 6, 7}, 51, ints, 0.1, -1.5, 1.5);
    const TD flow = away({1, 2, 6, 7}, 52, ints, 0.1, -1.5, 1.5);
    binary("warp_by_disparity", false,
           [](const TD& a, const TD& d) { return warp_by_disparity(a, disparity_field(d), -1); }, src, disp);
    binary("warp_by_flow", false, [](const TD& a, const TD& f) { return warp_by_flow(a, flow_field(f), +1); }, src,
           flow);
  }
  unary("channel_normalize", true, [](const TD& t) { return channel_normalize(t); }, in(s, 53));
  {
    const std::vector<double> table{0, 1, 2, 3};
    unary("soft_argmin", true, [=](const TD& t) { return soft_argmin(t, table); }, in({2, 4, 3, 5}, 54, -1, 1));
  }

  // --- losses ---
  {
    const TD d_real = in({1, 1, 4, 8}, 60, 0.05, 0.95), d_fake = in({1, 1, 4, 8}, 61, 0.05, 0.95);
    loss("adversarial_gen", [](const TD& t) { return adversarial_gen_term(t); }, d_fake);
    loss("adversarial_disc[real]", [=](const TD& t) { return adversarial_disc_term(t, d_fake); }, d_real);
    loss("adversarial_disc[fake]", [=](const TD& t) { return adversarial_disc_term(d_real, t); }, d_fake);
  }
  {
    const TD a = in({1, 2, 12, 12}, 62, 0, 1), b = in({1, 2, 12, 12}, 63, 0, 1);
    loss("cycle", [=](const TD& t) { return cycle_loss(t, b); }, a);
  }
  {
    const auto extractor = build_extractor<double>(base + 64);
    const TD a = in({1, 3, 8, 8}, 65, 0, 1), b = in({1, 3, 8, 8}, 66, 0, 1);
    loss("perceptual", [=](const TD& t) { return perceptual_loss(extractor, t, b); }, a);
  }
  {
    const TD a = in({1, 3, 5, 5}, 67), b = in({1, 3, 5, 5}, 68);
    loss("cosine", [=](const TD& t) { return cosine_loss(t, b); }, a);
  }
  {
    const TD l = in({1, 2, 6, 12}, 69), r = in({1, 2, 6, 12}, 70), gl = in({1, 2, 6, 12}, 71),
             gr = in({1, 2, 6, 12}, 72);
    loss("corr_consistency[g_l]", [=](const TD& t) { return corr_consistency_loss(l, r, t, gr); }, gl);
    loss("corr_consistency[g_r]", [=](const TD& t) { return corr_consistency_loss(l, r, gl, t); }, gr);
  }
  {
    const TD f1 = in({1, 3, 6, 6}, 73, 0, 1), f2 = in({1, 3, 6, 6}, 74, 0, 1), s1 = in({1, 3, 6, 6}, 75, 0, 1),
             s2 = in({1, 3, 6, 6}, 76, 0, 1);
    loss("mode_seeking", [=](const TD& t) { return mode_seeking_loss(t, f2, s1, s2); }, f1);
  }
  {
    // two tap levels at 1/2 and 1/4 of an 16x16 field
    const TD a0 = in({1, 2, 8, 8}, 80), a1 = in({1, 3, 4, 4}, 81);
    const TD b0 = in({1, 2, 8, 8}, 82), b1 = in({1, 3, 4, 4}, 83);
    const TD disp = in({1, 1, 16, 16}, 84, 0.3, 3.7);
    const TD flow = in({1, 2, 16, 16}, 85, -3, 3);
    const TD occ = TD::make({1, 1, 16, 16}, [&] {
      std::vector<double> m(256);
      Rng rng(base + 86);
      for (auto& v : m) v = rng.uniform() < 0.8 ? 1.0 : 0.0;
      return m;
    }());
    loss("disp_warp[taps]", [=](const TD& t) {
      return bidirectional_warp_loss<double>({t, a1}, {b0, b1}, disparity_field(disp));
    }, a0);
    loss("disp_warp[field]", [=](const TD& t) {
      return bidirectional_warp_loss<double>({a0, a1}, {b0, b1}, disparity_field(t));
    }, disp);
    loss("flow_warp[taps]", [=](const TD& t) {
      return bidirectional_warp_loss<double>({a0, a1}, {t, b1}, flow_field(flow), occ);
    }, b0);
    loss("flow_warp[field]", [=](const TD& t) {
      return bidirectional_warp_loss<double>({a0, a1}, {b0, b1}, flow_field(t), occ);
    }, flow);
  }
  {
    const TD gt_d = in({1, 1, 16, 16}, 90, 0, 6), gt_f = in({1, 2, 16, 16}, 91, -4, 4);
    const TD d0 = in({1, 1, 4, 4}, 92, 0, 2), d1 = in({1, 1, 8, 8}, 93, 0, 3), d2 = in({1, 1, 16, 16}, 94, 0, 6);
    const TD f0 = in({1, 2, 4, 4}, 95, -1, 1), f1 = in({1, 2, 8, 8}, 96, -2, 2), f2 = in({1, 2, 16, 16}, 97, -4, 4);
    const TD occ = in({1, 1, 16, 16}, 98, 0, 1);
    loss("supervised_disp[coarse]", [=](const TD& t) {
      return supervised_disp_loss<double>({t, d1, d2}, disparity_field(gt_d), 0.9);
    }, d0);
    loss("supervised_disp[fine]", [=](const TD& t) {
      return supervised_disp_loss<double>({d0, d1, t}, disparity_field(gt_d), 0.9);
    }, d2);
    loss("supervised_flow[mid]", [=](const TD& t) {
      return supervised_flow_loss<double>({f0, t, f2}, flow_field(gt_f), occ, 0.9);
    }, f1);
  }
  return cases;
}

}  // namespace warpadapt
