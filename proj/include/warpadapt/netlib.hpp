#pragma once

// Small fixed architectures: translation generators, patch discriminators,
// a stereo net, a flow net and a frozen random-feature extractor.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "warpadapt/kernels.hpp"
#include "warpadapt/random.hpp"
#include "warpadapt/warp.hpp"

namespace warpadapt {

enum class Role { generator, discriminator, stereo, flow, extractor };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::generator: return "generator";
    case Role::discriminator: return "discriminator";
    case Role::stereo: return "stereo";
    case Role::flow: return "flow";
    case Role::extractor: return "extractor";
  }
  return "?";
}

template <class T>
struct ForwardResult {
  Tensor<T> output;
  std::vector<Tensor<T>> taps;
  std::vector<Tensor<T>> stages;  // coarse to fine
};

template <class T>
class NetworkHandle {
 public:
  Role role = Role::generator;
  int width = 0;            // channels_base, max_disp or max_flow depending on role
  bool identity = false;    // generator that passes its input through unchanged
  bool frozen = false;
  std::vector<int> tap_layers;
  std::vector<std::pair<std::string, Tensor<T>>> params;

  const Tensor<T>& p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError(std::string(role_name(role)) + ": no parameter " + name);
    return params[it->second].second;
  }

  void add_param(std::string name, Tensor<T> t) {
    index_[name] = params.size();
    params.emplace_back(std::move(name), std::move(t));
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : params) t.set_requires_grad(on && !frozen);
  }

  void zero_grad() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }

  // Deep copy of parameter values.
  NetworkHandle clone() const {
    NetworkHandle c = *this;
    for (auto& [name, t] : c.params) {
      const bool rg = t.requires_grad();
      t = Tensor<T>::make(t.shape(), t.values(), rg);
    }
    return c;
  }

 private:
  std::map<std::string, std::size_t> index_;
};

namespace detail {

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn in double.
template <class T>
Tensor<T> uniform_init(Rng& rng, Shape s, double fan_in) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::make(s, std::move(v));
}

template <class T>
void add_conv(NetworkHandle<T>& net, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k = 3) {
  const double fan_in = static_cast<double>(cin * k * k);
  net.add_param(name + ".w", uniform_init<T>(rng, {cout, cin, k, k}, fan_in));
  net.add_param(name + ".b", uniform_init<T>(rng, {1, cout, 1, 1}, fan_in));
}

// Stride-2 transposed conv, k = 4: each output pixel sees cin * 2 * 2 inputs.
template <class T>
void add_tconv(NetworkHandle<T>& net, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout) {
  const double fan_in = static_cast<double>(cin * 4);
  net.add_param(name + ".w", uniform_init<T>(rng, {cin, cout, 4, 4}, fan_in));
  net.add_param(name + ".b", uniform_init<T>(rng, {1, cout, 1, 1}, fan_in));
}

template <class T>
Tensor<T> conv(const NetworkHandle<T>& net, const std::string& name, const Tensor<T>& x, std::size_t stride = 1) {
  return conv2d(x, net.p(name + ".w"), net.p(name + ".b"), stride, 1);
}

template <class T>
Tensor<T> tconv(const NetworkHandle<T>& net, const std::string& name, const Tensor<T>& x) {
  return conv_transpose2d(x, net.p(name + ".w"), net.p(name + ".b"), 2, 1);
}

template <class T>
Tensor<T> lrelu(const Tensor<T>& x) {
  return leaky_relu(x, 0.2);
}

inline void check_image_extent(const Shape& s, std::size_t multiple, const char* who) {
  if (s.c != 3 || s.h % multiple != 0 || s.w % multiple != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError(std::string(who) + ": expected a 3-channel image with extents divisible by " +
                     std::to_string(multiple) + ", got " + to_string(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator: 2 stride-2 encoder convs, 3 residual blocks, 2 transposed convs.
// The decoder produces a candidate image t in [0,1] and a gate m; the output
// m*x + (1-m)*t starts close to the input (gate bias +3).

inline constexpr int kResidualBlocks = 3;

template <class T>
NetworkHandle<T> build_generator(std::uint64_t seed, int channels_base = 8, bool identity = false) {
  if (channels_base < 4) throw ConfigError("build_generator: channels_base must be >= 4");
  NetworkHandle<T> net;
  net.role = Role::generator;
  net.width = channels_base;
  net.identity = identity;
  net.tap_layers = {0, 1, 2 + kResidualBlocks - 1};
  const auto c = static_cast<std::size_t>(channels_base);
  Rng rng(seed);
  detail::add_conv(net, rng, "enc1", 3, c);
  detail::add_conv(net, rng, "enc2", c, 2 * c);
  for (int b = 0; b < kResidualBlocks; ++b) {
    detail::add_conv(net, rng, "res" + std::to_string(b) + ".a", 2 * c, 2 * c);
    detail::add_conv(net, rng, "res" + std::to_string(b) + ".b", 2 * c, 2 * c);
  }
  detail::add_tconv(net, rng, "dec1", 2 * c, c);
  detail::add_tconv(net, rng, "dec2", c, 3);
  detail::add_tconv(net, rng, "gate", c, 1);
  for (auto& v : net.params.back().second.mutable_values()) v = T(3);  // gate.b
  return net;
}

template <class T>
std::vector<Tensor<T>> generator_taps(const NetworkHandle<T>& g, const Tensor<T>& x, Tensor<T>* trunk = nullptr) {
  detail::check_image_extent(x.shape(), 4, "generator");
  Tensor<T> h1 = detail::lrelu(detail::conv(g, "enc1", x, 2));
  Tensor<T> h = detail::lrelu(detail::conv(g, "enc2", h1, 2));
  std::vector<Tensor<T>> taps{h1, h};
  for (int b = 0; b < kResidualBlocks; ++b) {
    const std::string n = "res" + std::to_string(b);
    h = add(h, detail::conv(g, n + ".b", detail::lrelu(detail::conv(g, n + ".a", h))));
  }
  taps.push_back(h);
  if (trunk) *trunk = h;
  return taps;
}

template <class T>
ForwardResult<T> generator_forward(const NetworkHandle<T>& g, const Tensor<T>& x) {
  Tensor<T> h;
  ForwardResult<T> r;
  r.taps = generator_taps(g, x, &h);
  if (g.identity) {
    r.output = x;
    return r;
  }
  const Tensor<T> d1 = detail::lrelu(detail::tconv(g, "dec1", h));
  const Tensor<T> t = scale(add_scalar(tanh(detail::tconv(g, "dec2", d1)), 1.0), 0.5);
  const Tensor<T> m = sigmoid(detail::tconv(g, "gate", d1));
  // m*x + (1-m)*t  ==  t + m*(x - t)
  r.output = add(t, mul(m, sub(x, t)));
  return r;
}

// ---------------------------------------------------------------------------
// Patch discriminator: 4 stride-2 convs, sigmoid realness map.

template <class T>
NetworkHandle<T> build_discriminator(std::uint64_t seed, int channels_base = 8) {
  if (channels_base < 4) throw ConfigError("build_discriminator: channels_base must be >= 4");
  NetworkHandle<T> net;
  net.role = Role::discriminator;
  net.width = channels_base;
  const auto c = static_cast<std::size_t>(channels_base);
  Rng rng(seed);
  detail::add_conv(net, rng, "d1", 3, c);
  detail::add_conv(net, rng, "d2", c, 2 * c);
  detail::add_conv(net, rng, "d3", 2 * c, 4 * c);
  detail::add_conv(net, rng, "d4", 4 * c, 1);
  return net;
}

template <class T>
ForwardResult<T> discriminator_forward(const NetworkHandle<T>& d, const Tensor<T>& x) {
  detail::check_image_extent(x.shape(), 16, "discriminator");
  Tensor<T> h = detail::lrelu(detail::conv(d, "d1", x, 2));
  h = detail::lrelu(detail::conv(d, "d2", h, 2));
  h = detail::lrelu(detail::conv(d, "d3", h, 2));
  ForwardResult<T> r;
  r.output = sigmoid(detail::conv(d, "d4", h, 2));
  return r;
}

// ---------------------------------------------------------------------------
// Stereo and flow nets share a layout: a 2-scale encoder applied to both
// inputs, 1-D correlation at 1/4 scale, then three refinement stages at 1/4,
// 1/2 and full scale. The coarse stage is a soft-argmin over the cost volume
// plus a learned residual. Each finer stage upsamples the previous estimate,
// warps the second view's features with it and predicts a residual.

template <class T>
void add_matching_encoder(NetworkHandle<T>& net, Rng& rng) {
  detail::add_conv(net, rng, "f1", 3, 8);
  detail::add_conv(net, rng, "f2a", 8, 16);
  detail::add_conv(net, rng, "f2b", 16, 16);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> matching_features(const NetworkHandle<T>& net, const Tensor<T>& x) {
  Tensor<T> f1 = detail::lrelu(detail::conv(net, "f1", x, 2));
  Tensor<T> f2 = detail::lrelu(detail::conv(net, "f2a", f1, 2));
  f2 = detail::lrelu(detail::conv(net, "f2b", f2));
  return {f1, f2};
}

template <class T>
void add_matching_decoder(NetworkHandle<T>& net, Rng& rng, std::size_t corr_channels, std::size_t field_channels) {
  detail::add_conv(net, rng, "s0.a", corr_channels + 16 + field_channels, 32);
  detail::add_conv(net, rng, "s0.b", 32, 32);
  detail::add_conv(net, rng, "s0.out", 32, field_channels);
  detail::add_conv(net, rng, "s1.a", field_channels + 16, 16);
  detail::add_conv(net, rng, "s1.out", 16, field_channels);
  detail::add_conv(net, rng, "s2.a", field_channels + 6, 16);
  detail::add_conv(net, rng, "s2.out", 16, field_channels);
}

inline constexpr double kMatchNormEps = 1e-6;
inline constexpr double kSoftArgminBeta = 10.0;

// Unit RMS over channels, so the correlation of two feature maps is their
// per-pixel cosine similarity (at most 1).
template <class T>
Tensor<T> channel_normalize(const Tensor<T>& f) {
  const Tensor<T> rms = sqrt(add_scalar(mean_axes(square(f), {false, true, false, false}), kMatchNormEps));
  return div(f, rms);
}

// Displacement expected under softmax(beta * cost) across the cost channels;
// displacement[k] belongs to channel k. Costs are <= 1, so shifting by one
// keeps every exponent <= 0.
template <class T>
Tensor<T> soft_argmin(const Tensor<T>& cost, const std::vector<double>& displacement) {
  if (cost.shape().c != displacement.size()) throw ShapeError("soft_argmin: displacement table size");
  const AxisMask channels{false, true, false, false};
  const Tensor<T> e = exp(scale(add_scalar(cost, -1.0), kSoftArgminBeta));
  std::vector<T> d(displacement.begin(), displacement.end());
  const Tensor<T> table = Tensor<T>::make({1, displacement.size(), 1, 1}, std::move(d));
  return div(sum_axes(mul(e, table), channels), sum_axes(e, channels));
}

template <class T>
ForwardResult<T> matching_forward(const NetworkHandle<T>& net, const Tensor<T>& a, const Tensor<T>& b) {
  const char* who = role_name(net.role);
  detail::check_image_extent(a.shape(), 4, who);
  if (a.shape() != b.shape()) throw ShapeError(std::string(who) + ": input pair shapes differ");
  const bool stereo = net.role == Role::stereo;
  const FieldKind kind = stereo ? FieldKind::disparity : FieldKind::flow;
  const int reach = net.width / 4;

  const auto [f1a, f2a] = matching_features(net, a);
  const auto [f1b, f2b] = matching_features(net, b);
  const Tensor<T> na = channel_normalize(f2a), nb = channel_normalize(f2b);
  // channel k of a correlation over [lo, hi] compares a(x) with b(x - (lo + k))
  auto offsets = [](int lo, int hi, double sign) {
    std::vector<double> d;
    for (int k = lo; k <= hi; ++k) d.push_back(sign * k);
    return d;
  };
  Tensor<T> cost, initial;
  if (stereo) {
    cost = correlation1d(na, nb, CorrAxis::horizontal, 0, reach);
    initial = soft_argmin(cost, offsets(0, reach, 1.0));
  } else {
    // flow pulls from b(x + u): displacement -d on each axis
    const Tensor<T> ch = correlation1d(na, nb, CorrAxis::horizontal, -reach, reach);
    const Tensor<T> cv = correlation1d(na, nb, CorrAxis::vertical, -reach, reach);
    cost = concat_channels<T>({ch, cv});
    initial = concat_channels<T>({soft_argmin(ch, offsets(-reach, reach, -1.0)),
                                  soft_argmin(cv, offsets(-reach, reach, -1.0))});
  }

  ForwardResult<T> r;
  Tensor<T> h = detail::lrelu(detail::conv(net, "s0.a", concat_channels<T>({cost, f2a, initial})));
  h = detail::lrelu(detail::conv(net, "s0.b", h));
  Tensor<T> est = add(initial, detail::conv(net, "s0.out", h));
  r.stages.push_back(est);

  const std::vector<std::pair<std::string, std::pair<Tensor<T>, Tensor<T>>>> levels{
      {"s1", {f1a, f1b}}, {"s2", {a, b}}};
  for (const auto& [name, feats] : levels) {
    const Tensor<T> up = scale(resize_up2(est), 2.0);
    // pull view b onto view a with the current estimate
    const Tensor<T> pulled = warp(feats.second, WarpField<T>{kind, up, 1.0}, +1);
    Tensor<T> z = detail::lrelu(detail::conv(net, name + ".a", concat_channels<T>({up, feats.first, pulled})));
    est = add(up, detail::conv(net, name + ".out", z));
    r.stages.push_back(est);
  }
  if (stereo) r.stages.back() = softplus(r.stages.back());
  r.output = r.stages.back();
  return r;
}

template <class T>
NetworkHandle<T> build_stereo_net(std::uint64_t seed, int max_disp = 16) {
  if (max_disp < 4 || max_disp % 4 != 0) throw ConfigError("build_stereo_net: max_disp must be a multiple of 4, >= 4");
  NetworkHandle<T> net;
  net.role = Role::stereo;
  net.width = max_disp;
  Rng rng(seed);
  add_matching_encoder(net, rng);
  add_matching_decoder(net, rng, static_cast<std::size_t>(max_disp / 4 + 1), 1);
  return net;
}

template <class T>
NetworkHandle<T> build_flow_net(std::uint64_t seed, int max_flow = 8) {
  if (max_flow < 4 || max_flow % 4 != 0) throw ConfigError("build_flow_net: max_flow must be a multiple of 4, >= 4");
  NetworkHandle<T> net;
  net.role = Role::flow;
  net.width = max_flow;
  Rng rng(seed);
  add_matching_encoder(net, rng);
  add_matching_decoder(net, rng, static_cast<std::size_t>(2 * (2 * (max_flow / 4) + 1)), 2);
  return net;
}

// ---------------------------------------------------------------------------
// Frozen extractor: fixed random conv stack, features at 1/1, 1/2, 1/4.

template <class T>
NetworkHandle<T> build_extractor(std::uint64_t seed) {
  NetworkHandle<T> net;
  net.role = Role::extractor;
  net.frozen = true;
  net.tap_layers = {0, 1, 2};
  Rng rng(seed);
  detail::add_conv(net, rng, "e1", 3, 8);
  detail::add_conv(net, rng, "e2", 8, 16);
  detail::add_conv(net, rng, "e3", 16, 32);
  return net;
}

template <class T>
std::vector<Tensor<T>> extractor_features(const NetworkHandle<T>& e, const Tensor<T>& x) {
  Tensor<T> h1 = detail::lrelu(detail::conv(e, "e1", x, 1));
  Tensor<T> h2 = detail::lrelu(detail::conv(e, "e2", h1, 2));
  Tensor<T> h3 = detail::lrelu(detail::conv(e, "e3", h2, 2));
  return {h1, h2, h3};
}

// Role-dispatched entry points.
template <class T>
ForwardResult<T> forward(const NetworkHandle<T>& net, const Tensor<T>& x) {
  switch (net.role) {
    case Role::generator: return generator_forward(net, x);
    case Role::discriminator: return discriminator_forward(net, x);
    case Role::extractor: {
      ForwardResult<T> r;
      r.taps = extractor_features(net, x);
      r.output = r.taps.back();
      return r;
    }
    default: throw UsageError(std::string(role_name(net.role)) + " network takes two inputs");
  }
}

template <class T>
ForwardResult<T> forward(const NetworkHandle<T>& net, const Tensor<T>& a, const Tensor<T>& b) {
  if (net.role != Role::stereo && net.role != Role::flow) {
    throw UsageError(std::string(role_name(net.role)) + " network takes one input");
  }
  return matching_forward(net, a, b);
}

}  // namespace warpadapt
