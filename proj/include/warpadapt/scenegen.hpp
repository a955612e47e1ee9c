#pragma once

// Procedural layered scenes with exact disparity, flow and visibility, a
// photometric domain shift, and the on-disk sample format.
//
// Every layer moves by an integer number of pixels between views and
// textures live on the integer lattice, so re-rendered views agree with the
// reference view exactly wherever the same surface point is visible.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "warpadapt/random.hpp"
#include "warpadapt/tensor_io.hpp"
#include "warpadapt/warp.hpp"

namespace warpadapt {

enum class Domain : std::uint8_t { synthetic = 0, real = 1 };

inline const char* domain_name(Domain d) { return d == Domain::synthetic ? "synthetic" : "real"; }

struct SceneSample {
  Domain domain = Domain::synthetic;
  Tensor<float> left, right, next_left;        // (1,3,H,W) in [0,1]
  std::optional<WarpField<float>> disparity;   // (1,1,H,W)
  std::optional<WarpField<float>> flow;        // (1,2,H,W)
  std::optional<Tensor<float>> occlusion;      // 1 = visible in both frames
  std::optional<Tensor<float>> stereo_mask;    // 1 = visible in both views
};

struct SceneParams {
  int width = 128;
  int height = 64;
  int max_disp = 16;
  int max_flow = 8;
  int min_objects = 5;
  int max_objects = 10;
};

namespace detail {

inline std::uint32_t hash3(std::uint32_t seed, std::int32_t x, std::int32_t y) {
  std::uint32_t h = seed * 0x9E3779B1u;
  h ^= static_cast<std::uint32_t>(x) * 0x85EBCA77u;
  h = (h << 13) | (h >> 19);
  h ^= static_cast<std::uint32_t>(y) * 0xC2B2AE3Du;
  h ^= h >> 16;
  h *= 0x7FEB352Du;
  h ^= h >> 15;
  h *= 0x846CA68Bu;
  h ^= h >> 16;
  return h;
}

inline double hash01(std::uint32_t seed, std::int32_t x, std::int32_t y) {
  return static_cast<double>(hash3(seed, x, y) >> 8) / 16777216.0;
}

inline std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Smooth value noise sampled at integer points; cell = lattice spacing.
inline double value_noise(std::uint32_t seed, std::int32_t x, std::int32_t y, std::int32_t cell) {
  const std::int32_t cx = floor_div(x, cell);
  const std::int32_t cy = floor_div(y, cell);
  double fx = static_cast<double>(x - cx * cell) / cell;
  double fy = static_cast<double>(y - cy * cell) / cell;
  fx = fx * fx * (3 - 2 * fx);
  fy = fy * fy * (3 - 2 * fy);
  const double a = hash01(seed, cx, cy);
  const double b = hash01(seed, cx + 1, cy);
  const double c = hash01(seed, cx, cy + 1);
  const double d = hash01(seed, cx + 1, cy + 1);
  return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
}

struct Layer {
  bool background = false;
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 0, ry = 0;  // shape in reference (left, t) coordinates
  int disp = 0;
  int u = 0, v = 0;
  std::uint32_t tex_seed = 0;
  std::array<double, 3> base{};
  std::array<double, 3> tint{};

  bool covers(int x, int y) const {
    if (background) return true;
    const double dx = (x + 0.5 - cx) / rx;
    const double dy = (y + 0.5 - cy) / ry;
    return ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }

  std::array<float, 3> color(int x, int y) const {
    const double t = 0.5 * value_noise(tex_seed, x, y, 8) + 0.3 * value_noise(tex_seed + 1, x, y, 3) +
                     0.2 * hash01(tex_seed + 2, x, y);
    std::array<float, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = static_cast<float>(std::clamp(base[k] + (t - 0.5) * tint[k], 0.0, 1.0));
    return c;
  }
};

// Index of the topmost layer visible at (x, y) when each layer is displaced
// by `shift(layer)`; layers are painted in order so later ones are in front.
template <class Shift>
int top_layer(const std::vector<Layer>& layers, int x, int y, Shift shift) {
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    const auto [ox, oy] = shift(layers[i]);
    if (layers[i].covers(x - ox, y - oy)) return i;
  }
  return 0;
}

template <class Shift>
Tensor<float> render(const std::vector<Layer>& layers, int w, int h, Shift shift, std::vector<int>* owner = nullptr) {
  std::vector<float> img(3 * static_cast<std::size_t>(w * h));
  if (owner) owner->assign(static_cast<std::size_t>(w * h), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int li = top_layer(layers, x, y, shift);
      const auto [ox, oy] = shift(layers[li]);
      const auto c = layers[li].color(x - ox, y - oy);
      for (int k = 0; k < 3; ++k) img[(static_cast<std::size_t>(k) * h + y) * w + x] = c[k];
      if (owner) (*owner)[static_cast<std::size_t>(y * w + x)] = li;
    }
  }
  return Tensor<float>::make({1, 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(img));
}

}  // namespace detail

inline SceneSample generate_scene(std::uint64_t seed, const SceneParams& p) {
  if (p.width <= 0 || p.height <= 0 || p.width % 4 != 0 || p.height % 4 != 0) {
    throw ConfigError("generate_scene: width and height must be positive multiples of 4");
  }
  if (p.max_disp < 1 || p.max_flow < 1 || p.min_objects < 0 || p.max_objects < p.min_objects) {
    throw ConfigError("generate_scene: invalid disparity/flow/object limits");
  }
  Rng rng(seed);
  const int W = p.width;
  const int H = p.height;
  const int flow_reach = std::max(1, static_cast<int>(std::floor(p.max_flow / std::sqrt(2.0))));
  constexpr double z_near = 1.0;
  constexpr double z_far = 8.0;
  const double k = p.max_disp * z_near;  // disparity = k / depth

  auto make_palette = [&](detail::Layer& l) {
    for (int c = 0; c < 3; ++c) {
      l.base[c] = rng.uniform(0.2, 0.8);
      l.tint[c] = rng.uniform(0.5, 1.0);
    }
    l.tex_seed = static_cast<std::uint32_t>(rng.next() >> 32);
  };

  std::vector<detail::Layer> layers;
  std::vector<double> depths;
  {
    detail::Layer bg;
    bg.background = true;
    const double z = rng.uniform(0.75 * z_far, z_far);
    bg.disp = static_cast<int>(std::lround(k / z));
    bg.u = rng.range(-2, 2);
    bg.v = rng.range(-1, 1);
    make_palette(bg);
    layers.push_back(bg);
  }
  const int count = rng.range(p.min_objects, p.max_objects);
  std::vector<detail::Layer> objects;
  for (int i = 0; i < count; ++i) {
    detail::Layer l;
    l.ellipse = rng.uniform() < 0.5;
    l.cx = rng.uniform(0, W);
    l.cy = rng.uniform(0, H);
    l.rx = rng.uniform(W / 16.0, W / 5.0);
    l.ry = rng.uniform(H / 10.0, H / 3.0);
    const double z = rng.uniform(z_near, 0.7 * z_far);
    depths.push_back(z);
    l.disp = std::clamp(static_cast<int>(std::lround(k / z)), 0, p.max_disp);
    do {
      l.u = rng.range(-flow_reach, flow_reach);
      l.v = rng.range(-flow_reach, flow_reach);
    } while (l.u * l.u + l.v * l.v > p.max_flow * p.max_flow);
    make_palette(l);
    objects.push_back(l);
  }
  // painter's order: far to near, nearer layers never have smaller disparity
  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return depths[a] > depths[b]; });
  for (std::size_t i : order) layers.push_back(objects[i]);

  auto at_left = [](const detail::Layer&) { return std::pair<int, int>{0, 0}; };
  auto at_right = [](const detail::Layer& l) { return std::pair<int, int>{-l.disp, 0}; };
  auto at_next = [](const detail::Layer& l) { return std::pair<int, int>{l.u, l.v}; };

  std::vector<int> own_left, own_right, own_next;
  SceneSample s;
  s.domain = Domain::synthetic;
  s.left = detail::render(layers, W, H, at_left, &own_left);
  s.right = detail::render(layers, W, H, at_right, &own_right);
  s.next_left = detail::render(layers, W, H, at_next, &own_next);

  const auto Hs = static_cast<std::size_t>(H);
  const auto Ws = static_cast<std::size_t>(W);
  std::vector<float> disp(Hs * Ws), flow(2 * Hs * Ws), occ(Hs * Ws), smask(Hs * Ws);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * W + x);
      const int li = own_left[i];
      const auto& l = layers[static_cast<std::size_t>(li)];
      disp[i] = static_cast<float>(l.disp);
      flow[i] = static_cast<float>(l.u);
      flow[Hs * Ws + i] = static_cast<float>(l.v);
      // same surface point visible in the other view: in bounds and owned by the same layer
      const int xr = x - l.disp;
      smask[i] = (xr >= 0 && xr < W && own_right[static_cast<std::size_t>(y * W + xr)] == li) ? 1.0f : 0.0f;
      const int xn = x + l.u;
      const int yn = y + l.v;
      occ[i] = (xn >= 0 && xn < W && yn >= 0 && yn < H && own_next[static_cast<std::size_t>(yn * W + xn)] == li)
                   ? 1.0f
                   : 0.0f;
    }
  }
  s.disparity = disparity_field(Tensor<float>::make({1, 1, Hs, Ws}, std::move(disp)));
  s.flow = flow_field(Tensor<float>::make({1, 2, Hs, Ws}, std::move(flow)));
  s.occlusion = Tensor<float>::make({1, 1, Hs, Ws}, std::move(occ));
  s.stereo_mask = Tensor<float>::make({1, 1, Hs, Ws}, std::move(smask));
  return s;
}

// ---------------------------------------------------------------------------
// Photometric domain shift: clamp01(M * img^gamma + vignette + noise)

struct DomainShift {
  double gamma_curve = 1.0;
  std::array<std::array<double, 3>, 3> color_matrix{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  double noise_sigma = 0.0;
  double vignette_strength = 0.0;

  static DomainShift preset(const std::string& name) {
    DomainShift s;
    if (name == "none") return s;
    if (name == "default") {
      s.gamma_curve = 0.6;
      s.color_matrix = {{{0.85, 0.10, 0.05}, {0.05, 0.85, 0.10}, {0.10, 0.05, 0.85}}};
      s.noise_sigma = 0.04;
      s.vignette_strength = 0.35;
      return s;
    }
    if (name == "strong") {
      s.gamma_curve = 0.45;
      s.color_matrix = {{{0.70, 0.20, 0.10}, {0.10, 0.70, 0.20}, {0.20, 0.10, 0.70}}};
      s.noise_sigma = 0.06;
      s.vignette_strength = 0.5;
      return s;
    }
    throw ConfigError("unknown shift preset '" + name + "' (none, default, strong)");
  }
};

inline Tensor<float> shift_image(const Tensor<float>& img, const DomainShift& sh, Rng& rng) {
  const Shape s = img.shape();
  if (s.c != 3) throw ShapeError("apply_domain_shift: expected 3 channels, got " + to_string(s));
  std::vector<float> out(img.numel());
  const double cx = (static_cast<double>(s.w) - 1) / 2;
  const double cy = (static_cast<double>(s.h) - 1) / 2;
  const bool noisy = sh.noise_sigma > 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < s.w; ++x) {
        std::array<double, 3> g{};
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = img.at(n, c, y, x);
          g[c] = sh.gamma_curve == 1.0 ? v : std::pow(std::max(v, 0.0), sh.gamma_curve);
        }
        const double rx = cx > 0 ? (static_cast<double>(x) - cx) / cx : 0.0;
        const double ry = cy > 0 ? (static_cast<double>(y) - cy) / cy : 0.0;
        const double vig = -sh.vignette_strength * 0.5 * (rx * rx + ry * ry);
        for (std::size_t c = 0; c < 3; ++c) {
          double v = sh.color_matrix[c][0] * g[0] + sh.color_matrix[c][1] * g[1] + sh.color_matrix[c][2] * g[2] + vig;
          if (noisy) v += sh.noise_sigma * rng.normal();
          out[img.offset(n, c, y, x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return Tensor<float>::make(s, std::move(out));
}

// Same shift parameters on every frame of the sample; ground truth is kept
// for held-out evaluation but never read by training on real samples.
inline SceneSample apply_domain_shift(const SceneSample& sample, const DomainShift& shift, std::uint64_t seed) {
  if (sample.domain != Domain::synthetic) throw UsageError("apply_domain_shift: sample is already real-domain");
  Rng rng(seed);
  SceneSample out = sample;
  out.domain = Domain::real;
  out.left = shift_image(sample.left, shift, rng);
  out.right = shift_image(sample.right, shift, rng);
  out.next_left = shift_image(sample.next_left, shift, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Sample files: "WARPADT1" | u8 domain | u8 fields | tensor records
// (left, right, next_left, then disparity, flow, occlusion, stereo mask as
// flagged by bits 0..3).

inline constexpr char kSampleMagic[] = "WARPADT1";

namespace field_bits {
inline constexpr std::uint8_t disparity = 1;
inline constexpr std::uint8_t flow = 2;
inline constexpr std::uint8_t occlusion = 4;
inline constexpr std::uint8_t stereo_mask = 8;
}  // namespace field_bits

inline std::vector<std::uint8_t> encode_sample(const SceneSample& s) {
  ByteWriter w;
  w.bytes(kSampleMagic, 8);
  w.u8(static_cast<std::uint8_t>(s.domain));
  std::uint8_t bits = 0;
  if (s.disparity) bits |= field_bits::disparity;
  if (s.flow) bits |= field_bits::flow;
  if (s.occlusion) bits |= field_bits::occlusion;
  if (s.stereo_mask) bits |= field_bits::stereo_mask;
  w.u8(bits);
  w.tensor(s.left);
  w.tensor(s.right);
  w.tensor(s.next_left);
  if (s.disparity) w.tensor(s.disparity->values);
  if (s.flow) w.tensor(s.flow->values);
  if (s.occlusion) w.tensor(*s.occlusion);
  if (s.stereo_mask) w.tensor(*s.stereo_mask);
  return w.data();
}

inline SceneSample decode_sample(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (r.str(8) != std::string(kSampleMagic, 8)) r.fail("bad magic (expected WARPADT1)", 0);
  SceneSample s;
  const std::size_t tag_at = r.offset();
  const std::uint8_t tag = r.u8();
  if (tag > 1) r.fail("unknown domain tag " + std::to_string(tag), tag_at);
  s.domain = static_cast<Domain>(tag);
  const std::size_t bits_at = r.offset();
  const std::uint8_t bits = r.u8();
  if (bits & 0xF0) r.fail("unknown field bits", bits_at);
  s.left = r.tensor();
  s.right = r.tensor();
  s.next_left = r.tensor();
  if (bits & field_bits::disparity) s.disparity = disparity_field(r.tensor());
  if (bits & field_bits::flow) s.flow = flow_field(r.tensor());
  if (bits & field_bits::occlusion) s.occlusion = r.tensor();
  if (bits & field_bits::stereo_mask) s.stereo_mask = r.tensor();
  if (!r.at_end()) r.fail("trailing bytes", r.offset());
  return s;
}

inline std::string sample_filename(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu.wad", i);
  return buf;
}

inline void write_dataset(const std::vector<SceneSample>& samples, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string name = sample_filename(i);
    write_file(dir / name, encode_sample(samples[i]));
    manifest += name + "\n";
  }
  write_file(dir / "manifest.txt", std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
}

inline std::vector<SceneSample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.txt").string());
  std::vector<SceneSample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto path = dir / line;
    out.push_back(decode_sample(read_file(path), path.string()));
  }
  return out;
}

struct DomainSplit {
  std::vector<SceneSample> train, validation;
};

// First 80% of a domain's samples (file order) train, the rest validate.
inline DomainSplit split_domain(const std::vector<SceneSample>& all, Domain d) {
  std::vector<SceneSample> picked;
  for (const auto& s : all) {
    if (s.domain == d) picked.push_back(s);
  }
  const std::size_t n_train = picked.size() * 4 / 5;
  DomainSplit split;
  split.train.assign(picked.begin(), picked.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(picked.begin() + static_cast<std::ptrdiff_t>(n_train), picked.end());
  return split;
}

// Synthetic scenes for seeds derived from `seed`, plus an equal number of
// real-domain scenes rendered from different seeds and shifted.
inline std::vector<SceneSample> generate_dataset(std::size_t count, std::uint64_t seed, const SceneParams& p,
                                                 const DomainShift& shift) {
  std::vector<SceneSample> out;
  out.reserve(2 * count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(derive_seed(seed, 2 * i), p));
  for (std::size_t i = 0; i < count; ++i) {
    const SceneSample base = generate_scene(derive_seed(seed, 2 * i + 1), p);
    out.push_back(apply_domain_shift(base, shift, derive_seed(seed ^ 0x5eed5eedULL, i)));
  }
  return out;
}

}  // namespace warpadapt
