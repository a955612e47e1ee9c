// Acceptance run: one PASS/FAIL line per criterion. Thresholds below are fixed;
// pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "warpadapt/config.hpp"
#include "warpadapt/gradsuite.hpp"
#include "warpadapt/trainer.hpp"
#include <unistd.h>

using namespace warpadapt;
namespace fs = std::filesystem;
using TD = Tensor<double>;
using TF = Tensor<float>;
using Clock = std::chrono::steady_clock;

namespace {

// --- pinned thresholds ------------------------------------------------------
constexpr double kGradSuiteSeconds = 120.0;
constexpr int kGradSuiteSeeds = 3;
constexpr int kOracleSeeds = 100;
constexpr double kIntegerInverseTol = 1e-5;
constexpr double kFractionalInverseTol = 1e-2;
constexpr double kPyramidTol = 1e-2;
constexpr int kMetricInstances = 200;
constexpr double kMetricTol = 1e-6;
constexpr double kAggregateRelTol = 1e-5;
constexpr int kAuditIters = 50;
constexpr int kTrendSeeds = 4;
constexpr std::uint64_t kTrendIters = 1000;
constexpr int kTrendMinWins = 3;
constexpr double kTrendMinImprovement = 0.10;
constexpr double kRunSecondsLimit = 30 * 60;
constexpr std::uint64_t kResumeAt = 100;
constexpr std::uint64_t kResumeTo = 110;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TD random_td(Shape s, Rng& rng, double lo, double hi) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::make(s, std::move(v));
}

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("warpadapt_accept_" + std::to_string(::getpid()) + "_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::vector<std::uint8_t>> dir_contents(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().filename().string()] = read_file(e.path());
  return out;
}

// --- 1 ----------------------------------------------------------------------
Outcome gradient_suite_check() {
  Outcome o;
  const auto t0 = Clock::now();
  std::size_t cases = 0;
  double worst_ratio = 0;
  std::string worst;
  for (int seed = 0; seed < kGradSuiteSeeds; ++seed) {
    for (const auto& c : gradient_suite(static_cast<std::uint64_t>(seed))) {
      ++cases;
      const double err = c.run();
      const double ratio = err / c.tolerance;
      if (!(err < c.tolerance)) {
        o.pass = false;
        o.detail += c.name + " (seed " + std::to_string(seed) + ") rel err " + fmt("%.3g", err) + "; ";
      }
      if (!(ratio <= worst_ratio)) {
        worst_ratio = ratio;
        worst = c.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= kGradSuiteSeconds) o.pass = false;
  o.detail += std::to_string(cases) + " cases over " + std::to_string(kGradSuiteSeeds) + " seeds, worst " + worst +
              " at " + fmt("%.3g", worst_ratio) + " of its threshold, " + fmt("%.1f", secs) + " s";
  return o;
}

// --- 2 ----------------------------------------------------------------------
// Frequencies stay at or below 0.2 rad/px (wavelength >= 31 px, >= 15 px at
// half scale). Bilinear resampling error grows with f^2, so the pyramid
// tolerance only means something for content the coarse level can represent.
double pattern(double x, double y, std::size_t c, std::uint64_t seed) {
  const double fx = 0.08 + 0.015 * static_cast<double>(seed % 9);
  const double fy = 0.06 + 0.02 * static_cast<double>(seed % 7);
  return 0.5 + 0.2 * std::sin(fx * x + 0.9 * static_cast<double>(c) + 0.37 * static_cast<double>(seed)) *
                   std::cos(fy * y + 0.05 * x);
}

// pixel (x, y) holds pattern(x - dx, y - dy)
TD pattern_image(std::size_t h, std::size_t w, std::size_t ch, double dx, double dy, std::uint64_t seed) {
  std::vector<double> v(ch * h * w);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        v[(c * h + y) * w + x] = pattern(static_cast<double>(x) - dx, static_cast<double>(y) - dy, c, seed);
  return TD::make({1, ch, h, w}, std::move(v));
}

double interior_max_diff(const TD& a, const TD& b, std::size_t margin) {
  const Shape s = a.shape();
  double worst = 0;
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = margin; y + margin < s.h; ++y)
      for (std::size_t x = margin; x + margin < s.w; ++x)
        worst = std::max(worst, std::abs(a.at(0, c, y, x) - b.at(0, c, y, x)));
  return worst;
}

Outcome warp_oracles() {
  Outcome o;
  int identity_fail = 0;
  double int_err = 0, frac_err = 0, pyr_err = 0;
  for (int i = 0; i < kOracleSeeds; ++i) {
    const auto seed = static_cast<std::uint64_t>(i);
    Rng rng(derive_seed(seed, 77));
    // zero field, random shapes, both precisions and both signs
    const Shape s{1 + rng.below(2), 1 + rng.below(4), 2 + rng.below(15), 2 + rng.below(21)};
    const TD src = random_td(s, rng, -3, 3);
    const TF srcf = TF::make(s, std::vector<float>(src.values().begin(), src.values().end()));
    const int sign = rng.below(2) ? 1 : -1;
    const bool same =
        warp_by_disparity(src, disparity_field(TD::zeros({s.n, 1, s.h, s.w})), sign).values() == src.values() &&
        warp_by_flow(src, flow_field(TD::zeros({s.n, 2, s.h, s.w})), sign).values() == src.values() &&
        warp_by_disparity(srcf, disparity_field(TF::zeros({s.n, 1, s.h, s.w})), sign).values() == srcf.values() &&
        warp_by_flow(srcf, flow_field(TF::zeros({s.n, 2, s.h, s.w})), sign).values() == srcf.values();
    identity_fail += same ? 0 : 1;

    // integer and fractional translations, flow and disparity
    const std::size_t h = 20, w = 32;
    const int iu = rng.range(-3, 3), iv = rng.range(-2, 2), id = rng.range(0, 4);
    const double fu = rng.uniform(-3, 3), fv = rng.uniform(-2, 2), fd = rng.uniform(0, 4);
    const TD frame = pattern_image(h, w, 3, 0, 0, seed);
    auto flow_of = [&](double u, double v) {
      return flow_field(concat_channels<double>({TD::full({1, 1, h, w}, u), TD::full({1, 1, h, w}, v)}));
    };
    auto flow_err = [&](double u, double v) {
      return interior_max_diff(warp_by_flow(pattern_image(h, w, 3, u, v, seed), flow_of(u, v), +1), frame, 5);
    };
    // the right view sees content d px further left: right(x) = left(x + d)
    auto disp_err = [&](double d) {
      const TD right = pattern_image(h, w, 3, -d, 0, seed);
      return interior_max_diff(warp_by_disparity(right, disparity_field(TD::full({1, 1, h, w}, d)), +1), frame, 5);
    };
    int_err = std::max({int_err, flow_err(iu, iv), disp_err(id)});
    frac_err = std::max({frac_err, flow_err(fu, fv), disp_err(fd)});

    // half-scale warp with halved field vs downsampled full-scale warp
    const TD img = pattern_image(32, 48, 2, 0, 0, seed);
    const auto dfield = disparity_field(TD::full({1, 1, 32, 48}, rng.uniform(0, 6)));
    const auto ffield = flow_field(concat_channels<double>(
        {TD::full({1, 1, 32, 48}, rng.uniform(-4, 4)), TD::full({1, 1, 32, 48}, rng.uniform(-3, 3))}));
    pyr_err = std::max(pyr_err, interior_max_diff(warp_by_disparity(resize_down2(img), downscale_field(dfield, 1), +1),
                                                  resize_down2(warp_by_disparity(img, dfield, +1)), 5));
    pyr_err = std::max(pyr_err, interior_max_diff(warp_by_flow(resize_down2(img), downscale_field(ffield, 1), +1),
                                                  resize_down2(warp_by_flow(img, ffield, +1)), 5));
  }
  o.pass = identity_fail == 0 && int_err < kIntegerInverseTol && frac_err < kFractionalInverseTol &&
           pyr_err < kPyramidTol;
  o.detail = std::to_string(kOracleSeeds) + " seeds: identity mismatches " + std::to_string(identity_fail) +
             ", integer inverse " + fmt("%.2e", int_err) + ", fractional inverse " + fmt("%.2e", frac_err) +
             ", pyramid " + fmt("%.2e", pyr_err);
  return o;
}

// --- 3 ----------------------------------------------------------------------
// Brute-force references in double, straight from the definitions.
struct RefField {
  std::size_t c, h, w;
  std::vector<double> v;  // c-major
  double at(std::size_t ch, std::size_t y, std::size_t x) const { return v[(ch * h + y) * w + x]; }
};

RefField ref_of(const TD& t) {
  const Shape s = t.shape();
  return {s.c, s.h, s.w, t.values()};
}

std::vector<std::pair<double, double>> ref_errors(const RefField& p, const RefField& g, const RefField* mask) {
  std::vector<std::pair<double, double>> out;  // (error, |gt|)
  for (std::size_t y = 0; y < g.h; ++y)
    for (std::size_t x = 0; x < g.w; ++x) {
      if (mask && !(mask->at(0, y, x) > 0)) continue;
      double e2 = 0, g2 = 0;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double d = p.at(c, y, x) - g.at(c, y, x);
        e2 += d * d;
        g2 += g.at(c, y, x) * g.at(c, y, x);
      }
      out.emplace_back(std::sqrt(e2), std::sqrt(g2));
    }
  return out;
}

double ref_epe(const std::vector<std::pair<double, double>>& e) {
  double s = 0;
  for (const auto& [err, mag] : e) s += err;
  return s / static_cast<double>(e.size());
}

double ref_rate(const std::vector<std::pair<double, double>>& e, double abs_t, double rel_t, bool both) {
  std::size_t bad = 0;
  for (const auto& [err, mag] : e) {
    const bool a = err > abs_t;
    if (rel_t <= 0) {
      bad += a;
    } else {
      const bool r = err > rel_t * mag;
      bad += both ? (a && r) : (a || r);
    }
  }
  return 100.0 * static_cast<double>(bad) / static_cast<double>(e.size());
}

double ref_psnr(const TD& a, const TD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
  const double mse = s / static_cast<double>(a.numel());
  return -10.0 * std::log10(mse);
}

// Gaussian window, 11 taps, sigma 1.5, cut at the border and renormalized.
double ref_ssim(const TD& a, const TD& b) {
  const Shape s = a.shape();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (long y = 0; y < static_cast<long>(s.h); ++y)
        for (long x = 0; x < static_cast<long>(s.w); ++x) {
          double W = 0, ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
          for (long j = std::max(0L, y - 5); j <= std::min<long>(static_cast<long>(s.h) - 1, y + 5); ++j)
            for (long i = std::max(0L, x - 5); i <= std::min<long>(static_cast<long>(s.w) - 1, x + 5); ++i) {
              const double wt = std::exp(-static_cast<double>((i - x) * (i - x) + (j - y) * (j - y)) / 4.5);
              const double va = a.at(n, c, j, i), vb = b.at(n, c, j, i);
              W += wt;
              ma += wt * va;
              mb += wt * vb;
              aa += wt * va * va;
              bb += wt * vb * vb;
              ab += wt * va * vb;
            }
          ma /= W;
          mb /= W;
          const double sa = aa / W - ma * ma, sb = bb / W - mb * mb, sab = ab / W - ma * mb;
          total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
        }
  return total / static_cast<double>(a.numel());
}

Outcome metric_oracles() {
  Outcome o;
  double worst = 0;
  std::string worst_name = "-";
  auto check = [&](const std::string& name, double got, double want) {
    const double d = std::abs(got - want);
    if (!(d <= worst)) {
      worst = d;
      worst_name = name;
    }
  };
  for (int i = 0; i < kMetricInstances; ++i) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(i), 303));
    const std::size_t h = 8 + rng.below(9), w = 8 + rng.below(9);
    const TD mask = random_td({1, 1, h, w}, rng, -0.5, 1.0);
    for (std::size_t ch : {std::size_t{1}, std::size_t{2}}) {
      const TD g = random_td({1, ch, h, w}, rng, ch == 1 ? 0.0 : -12.0, 12.0);
      // mix of small and large errors so every threshold is exercised
      TD p = g;
      {
        std::vector<double> v = g.values();
        for (auto& x : v) x += rng.uniform(-1, 1) * (rng.below(3) == 0 ? 8.0 : 1.0);
        p = TD::make(g.shape(), std::move(v));
      }
      const WarpField<double> gf{ch == 1 ? FieldKind::disparity : FieldKind::flow, g, 1.0};
      const WarpField<double> pf{gf.kind, p, 1.0};
      const auto all = ref_errors(ref_of(p), ref_of(g), nullptr);
      const RefField mref = ref_of(mask);
      const auto masked = ref_errors(ref_of(p), ref_of(g), &mref);
      check("epe", epe(pf, gf), ref_epe(all));
      if (!masked.empty()) check("epe(masked)", epe(pf, gf, &mask), ref_epe(masked));
      for (double t : {2.0, 4.0, 5.0}) check(">" + fmt("%.0f", t) + "px", threshold_error_rate(pf, gf, t), ref_rate(all, t, 0, false));
      check("D1-all(or)", d1_all(pf, gf, ThresholdMode::any), ref_rate(all, 3, 0.05, false));
      check("D1-all(and)", d1_all(pf, gf, ThresholdMode::both), ref_rate(all, 3, 0.05, true));
      check("F1-all(or)", f1_all(pf, gf, ThresholdMode::any), ref_rate(all, 3, 0.05, false));
      check("F1-all(and)", f1_all(pf, gf, ThresholdMode::both), ref_rate(all, 3, 0.05, true));
      if (!masked.empty()) {
        check("F1-all(or,masked)", f1_all(pf, gf, ThresholdMode::any, &mask), ref_rate(masked, 3, 0.05, false));
        check("F1-all(and,masked)", f1_all(pf, gf, ThresholdMode::both, &mask), ref_rate(masked, 3, 0.05, true));
      }
    }
    const TD a = random_td({1, 3, h, w}, rng, 0, 1);
    const TD b = random_td({1, 3, h, w}, rng, 0, 1);
    check("psnr", psnr(a, b), ref_psnr(a, b));
    check("ssim", ssim_metric(a, b), ref_ssim(a, b));
  }
  o.pass = worst < kMetricTol;
  o.detail = std::to_string(kMetricInstances) + " instances, worst |diff| " + fmt("%.2e", worst) + " (" + worst_name + ")";
  return o;
}

// --- 4 ----------------------------------------------------------------------
template <class T>
std::vector<std::string> nonzero_consistent_losses() {
  std::vector<std::string> bad;
  Rng rng(9);
  std::vector<T> v(2 * 3 * 16 * 32);
  for (auto& x : v) x = static_cast<T>(rng.uniform(0.05, 0.95));
  const Tensor<T> a = Tensor<T>::make({2, 3, 16, 32}, v);
  const Tensor<T> b = Tensor<T>::make({2, 3, 16, 32}, std::vector<T>(v.rbegin(), v.rend()));
  const auto ex = build_extractor<T>(kExtractorSeed);
  const auto gen = build_generator<T>(5, 4);
  const auto taps_a = generator_taps(gen, a);
  const auto disp_gt = disparity_field(Tensor<T>::full({2, 1, 16, 32}, 4.0));
  const auto flow_gt = flow_field(Tensor<T>::full({2, 2, 16, 32}, -2.0));
  const std::vector<Tensor<T>> d_stages{Tensor<T>::full({2, 1, 4, 8}, 1.0), Tensor<T>::full({2, 1, 8, 16}, 2.0),
                                        Tensor<T>::full({2, 1, 16, 32}, 4.0)};
  const std::vector<Tensor<T>> f_stages{Tensor<T>::full({2, 2, 4, 8}, -0.5), Tensor<T>::full({2, 2, 8, 16}, -1.0),
                                        Tensor<T>::full({2, 2, 16, 32}, -2.0)};
  const Tensor<T> occ = Tensor<T>::full({2, 1, 16, 32}, 1.0);
  std::vector<std::pair<std::string, Tensor<T>>> parts{
      {"cycle", cycle_loss(a, a)},
      {"perceptual", perceptual_loss(ex, a, a)},
      {"cosine", cosine_loss(a, a)},
      {"cosine(scaled)", cosine_loss(a, scale(a, 2.0))},
      {"corr_consistency", corr_consistency_loss(a, b, a, b)},
      {"mode_seeking", mode_seeking_loss(a, b, a, a)},
      {"disp_warp", bidirectional_warp_loss(taps_a, taps_a, disparity_field(Tensor<T>::zeros({2, 1, 16, 32})))},
      {"flow_warp", bidirectional_warp_loss(taps_a, taps_a, flow_field(Tensor<T>::zeros({2, 2, 16, 32})), occ)},
      {"supervised_disp", supervised_disp_loss(d_stages, disp_gt, 0.9)},
      {"supervised_flow", supervised_flow_loss(f_stages, flow_gt, occ, 0.9)},
  };
  for (const auto& [name, t] : parts)
    if (t.item() != T(0)) bad.push_back(name + "=" + fmt("%.3g", static_cast<double>(t.item())));
  return bad;
}

Outcome loss_identities() {
  Outcome o;
  // weighted sums over random parts and weights
  double worst = 0;
  auto rel = [&](double a, double b) { worst = std::max(worst, std::abs(a - b) / std::max(std::abs(b), 1e-30)); };
  for (int i = 0; i < 100; ++i) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(i), 404));
    LossWeights w;
    for (const auto& [name, m] : LossWeights::fields()) w.*m = rng.uniform(0.0, 12.0);
    LossParts<float> p;
    LossBreakdown b;
    for (const char* k : {"adv_a2b", "adv_b2a", "cyc", "perceptual", "cosine", "disp_warpx", "flow_warpx", "corr",
                          "ms", "disp", "disp_warpy", "flow", "flow_warpy"}) {
      const float v = static_cast<float>(rng.uniform(0.0, 3.0));
      p[k] = TF::scalar(v);
      b.set(k, v);
    }
    rel(recompute_L_T(b, w), assemble_L_T(p, w).item());
    rel(recompute_translation(b, w), assemble_translation(p, w).item());
    rel(recompute_L_d(b, w), assemble_L_d(p, w).item());
    rel(recompute_L_f(b, w), assemble_L_f(p, w).item());
  }
  // and from breakdowns of real training steps
  {
    SceneParams sp;
    sp.width = 64;
    sp.height = 32;
    sp.max_disp = 6;
    sp.max_flow = 4;
    const TrainData d = split_data(generate_dataset(10, 21, sp, DomainShift::preset("default")));
    TrainConfig c;
    c.k = 2;
    c.gen_channels = 4;
    c.disc_channels = 4;
    c.max_disp = 8;
    c.max_flow = 4;
    TrainState s = init_state(c);
    for (int it = 0; it < 6; ++it) {
      const Batch syn = next_batch(s.syn, d.syn_train, c.batch_size, s.rng, true);
      const Batch real = next_batch(s.real, d.real_train, c.batch_size, s.rng, false);
      const LossBreakdown b = train_step(s, syn, &real);
      if (b.has("L_T")) {
        rel(recompute_L_T(b, c.weights), b.get("L_T"));
        rel(recompute_translation(b, c.weights), b.get("translation"));
      } else {
        rel(recompute_L_d(b, c.weights), b.get("L_d"));
        rel(recompute_L_f(b, c.weights), b.get("L_f"));
      }
    }
  }
  auto bad = nonzero_consistent_losses<float>();
  for (auto& s : nonzero_consistent_losses<double>()) bad.push_back(s + " (double)");

  // published defaults, both as compiled in and as loaded from an empty config
  const std::vector<std::pair<std::string, double>> published{
      {"lambda_translation", 10}, {"lambda_f_disp_warpx", 5}, {"lambda_f_flow_warpx", 5},
      {"lambda_corr", 1},         {"lambda_ms", 0.1},         {"lambda_disp", 1},
      {"lambda_f_disp_warpy", 5}, {"lambda_flow", 1},         {"lambda_f_flow_warpy", 5}};
  CliConfig loaded;
  apply_config_text(loaded, "# nothing set\n");
  std::map<std::string, std::string> echo;
  for (const auto& [k, v] : config_echo(loaded.train)) echo[k] = v;
  std::vector<std::string> wrong;
  for (const auto& [name, want] : published) {
    double compiled = 0;
    for (const auto& [n, m] : LossWeights::fields())
      if (name == n) compiled = LossWeights{}.*m;
    double echoed = std::nan("");
    if (auto it = echo.find("weights." + name); it != echo.end()) echoed = std::stod(it->second);
    if (compiled != want || echoed != want) wrong.push_back(name);
  }
  o.pass = worst <= kAggregateRelTol && bad.empty() && wrong.empty();
  o.detail = "aggregate rel err " + fmt("%.2e", worst) + "; nonzero on consistent inputs: " +
             (bad.empty() ? std::string("none") : bad.front()) + "; default weights " +
             (wrong.empty() ? std::string("verbatim") : "wrong: " + wrong.front());
  return o;
}

// --- 5 ----------------------------------------------------------------------
std::uint64_t hash_net(const NetworkHandle<float>& n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : n.params) {
    mix(name.data(), name.size());
    mix(t.values().data(), t.values().size() * sizeof(float));
  }
  return h;
}

Outcome schedule_audit(const TrainData& data) {
  Outcome o;
  const std::set<std::string> translation{"g_a2b", "g_b2a", "d_a", "d_b"};
  const std::set<std::string> task{"stereo", "flow"};
  for (int k : {5, 3}) {
    TrainConfig c;
    c.k = k;
    c.seed = 11;
    TrainState s = init_state(c);
    auto hashes = [&] {
      std::map<std::string, std::uint64_t> h;
      for (auto& [name, net] : s.models.named()) h[name] = hash_net(*net);
      return h;
    };
    int t_updates = 0, d_updates = 0, violations = 0;
    for (int it = 0; it < kAuditIters; ++it) {
      const auto before = hashes();
      const Batch syn = next_batch(s.syn, data.syn_train, c.batch_size, s.rng, true);
      const Batch real = next_batch(s.real, data.real_train, c.batch_size, s.rng, false);
      train_step(s, syn, &real);
      const auto after = hashes();
      std::set<std::string> changed;
      for (const auto& [name, h] : after)
        if (before.at(name) != h) changed.insert(name);
      if (changed == translation) {
        ++t_updates;
        violations += it % k != 0;
      } else if (changed == task) {
        ++d_updates;
        violations += it % k == 0;
      } else {
        ++violations;
      }
    }
    const int want_t = (kAuditIters + k - 1) / k;
    const bool ok = t_updates == want_t && d_updates == kAuditIters - want_t && violations == 0;
    o.pass = o.pass && ok;
    o.detail += "k=" + std::to_string(k) + ": " + std::to_string(t_updates) + " translation (want " +
                std::to_string(want_t) + "), " + std::to_string(d_updates) + " task, " + std::to_string(violations) +
                " off-slot changes; ";
  }
  o.detail += "extractor never updated";
  return o;
}

// --- 6 and 7 ----------------------------------------------------------------
struct TrendRun {
  MetricsReport report;
  double seconds = 0;
};

struct TrendSeed {
  TrendRun source, full, no_flow_warp, no_lp_cos;
};

TrendRun trend_run(const TrainData& data, std::uint64_t seed, const std::string& variant) {
  TrainConfig c;
  c.seed = seed;
  c.total_iters = kTrendIters;
  c.threads = 1;
  if (variant == "source") c.mode = TrainMode::source_only;
  if (variant == "no_flow_warp") c.weights.lambda_f_flow_warpx = c.weights.lambda_f_flow_warpy = 0;
  if (variant == "no_lp_cos") c.weights.lambda_perceptual = c.weights.lambda_cosine = 0;
  const auto t0 = Clock::now();
  RunOptions o;
  o.evaluate = false;
  auto [state, out] = run_training(c, data, o);
  TrendRun r;
  r.seconds = seconds_since(t0);
  r.report = evaluate(state.models, c, data.real_val);
  std::fprintf(stderr, "  seed %llu %-13s epe_disp %.4f epe_flow %.4f psnr %.3f (%.0f s)\n",
               static_cast<unsigned long long>(seed), variant.c_str(), r.report.epe_disp, r.report.epe_flow,
               r.report.psnr, r.seconds);
  return r;
}

const std::vector<TrendSeed>& trend_runs() {
  static const std::vector<TrendSeed> runs = [] {
    std::vector<TrendSeed> out;
    for (int i = 0; i < kTrendSeeds; ++i) {
      const auto seed = static_cast<std::uint64_t>(i + 1);
      // 200 per domain: 160 train / 40 validation
      const TrainData data = split_data(generate_dataset(200, 1000 + seed, SceneParams{}, DomainShift::preset("default")));
      TrendSeed t;
      t.source = trend_run(data, seed, "source");
      t.full = trend_run(data, seed, "full");
      t.no_flow_warp = trend_run(data, seed, "no_flow_warp");
      t.no_lp_cos = trend_run(data, seed, "no_lp_cos");
      out.push_back(t);
    }
    return out;
  }();
  return runs;
}

Outcome adaptation_trend() {
  Outcome o;
  const auto& runs = trend_runs();
  int wins = 0;
  double slowest = 0;
  std::vector<double> imp_d, imp_f;
  for (const auto& r : runs) {
    const double sd = r.source.report.epe_disp, sf = r.source.report.epe_flow;
    const double fd = r.full.report.epe_disp, ff = r.full.report.epe_flow;
    wins += (fd < sd && ff < sf) ? 1 : 0;
    imp_d.push_back((sd - fd) / sd);
    imp_f.push_back((sf - ff) / sf);
    slowest = std::max({slowest, r.source.seconds, r.full.seconds});
  }
  const double md = median(imp_d), mf = median(imp_f);
  o.pass = wins >= kTrendMinWins && md >= kTrendMinImprovement && mf >= kTrendMinImprovement &&
           slowest <= kRunSecondsLimit;
  o.detail = "full beats source-only on both EPEs in " + std::to_string(wins) + "/" + std::to_string(runs.size()) +
             " seeds; median improvement disp " + fmt("%+.1f%%", 100 * md) + ", flow " + fmt("%+.1f%%", 100 * mf) +
             " (need >= " + fmt("%.0f%%", 100 * kTrendMinImprovement) + "); slowest run " + fmt("%.0f", slowest) + " s";
  return o;
}

Outcome ablation_trend() {
  Outcome o;
  const auto& runs = trend_runs();
  std::vector<double> full_f, noflow_f, full_p, nolp_p;
  double slowest = 0;
  for (const auto& r : runs) {
    full_f.push_back(r.full.report.epe_flow);
    noflow_f.push_back(r.no_flow_warp.report.epe_flow);
    full_p.push_back(r.full.report.psnr);
    nolp_p.push_back(r.no_lp_cos.report.psnr);
    slowest = std::max({slowest, r.no_flow_warp.seconds, r.no_lp_cos.seconds});
  }
  const double a = median(full_f), b = median(noflow_f), c = median(full_p), d = median(nolp_p);
  o.pass = b > a && d < c && slowest <= kRunSecondsLimit;
  o.detail = "median flow EPE full " + fmt("%.4f", a) + " vs w/o flow warp " + fmt("%.4f", b) +
             "; median cycle PSNR full " + fmt("%.3f", c) + " vs w/o Lp+Lcos " + fmt("%.3f", d) + " dB";
  return o;
}

// --- 8 ----------------------------------------------------------------------
Outcome reproducibility(const TrainData& data) {
  Outcome o;
  TrainConfig c;
  c.seed = 5;
  c.total_iters = 20;
  c.eval_every = 10;
  c.checkpoint_every = 10;
  c.threads = 1;
  std::vector<std::map<std::string, std::vector<std::uint8_t>>> files;
  std::vector<std::string> reports;
  std::vector<std::map<std::string, std::vector<std::uint8_t>>> datasets;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = scratch_dir("repro" + std::to_string(run));
    RunOptions opts;
    opts.out_dir = dir / "train";
    auto [state, out] = run_training(c, data, opts);
    files.push_back(dir_contents(dir / "train"));
    std::string rep;
    for (const auto& [it, r] : out.evals) rep += std::to_string(it) + "\n" + r.to_text();
    rep += evaluate(state.models, c, data.real_val).to_text();
    reports.push_back(rep);
    write_dataset(generate_dataset(6, 77, SceneParams{}, DomainShift::preset("default")), dir / "data");
    datasets.push_back(dir_contents(dir / "data"));
    fs::remove_all(dir);
  }
  const bool logs_ckpts = files[0] == files[1];
  o.pass = logs_ckpts && reports[0] == reports[1] && datasets[0] == datasets[1] && files[0].count("train.log") &&
           files[0].count("checkpoint_final.ckpt");
  o.detail = std::to_string(files[0].size()) + " output files " + (logs_ckpts ? "identical" : "DIFFER") +
             ", reports " + (reports[0] == reports[1] ? "identical" : "DIFFER") + ", generated datasets " +
             (datasets[0] == datasets[1] ? "identical" : "DIFFER");
  return o;
}

// --- 9 ----------------------------------------------------------------------
Outcome round_trips(const TrainData& data) {
  Outcome o;
  const fs::path dir = scratch_dir("roundtrip");
  std::vector<std::string> problems;

  // dataset
  const auto samples = generate_dataset(8, 99, SceneParams{}, DomainShift::preset("default"));
  write_dataset(samples, dir / "data");
  const auto back = read_dataset(dir / "data");
  bool ds_ok = back.size() == samples.size();
  for (std::size_t i = 0; ds_ok && i < samples.size(); ++i) ds_ok = encode_sample(back[i]) == encode_sample(samples[i]);
  if (!ds_ok) problems.push_back("dataset");

  // resume: uninterrupted to kResumeTo vs stop at kResumeAt, save, load, continue
  TrainConfig c;
  c.seed = 3;
  c.total_iters = kResumeTo;
  c.threads = 1;
  RunOptions quiet;
  quiet.evaluate = false;
  TrainState a = init_state(c);
  const RunOutputs ra = continue_training(a, data, kResumeTo, quiet);

  TrainState b = init_state(c);
  continue_training(b, data, kResumeAt, quiet);
  const auto bytes = encode_checkpoint(b);
  save_checkpoint(b, dir / "mid.ckpt");
  TrainState b2 = load_checkpoint(dir / "mid.ckpt");
  if (encode_checkpoint(b2) != bytes || read_file(dir / "mid.ckpt") != bytes) problems.push_back("checkpoint");
  const RunOutputs rb = continue_training(b2, data, kResumeTo, quiet);
  bool same_losses = rb.losses.size() == kResumeTo - kResumeAt;
  for (std::size_t i = 0; same_losses && i < rb.losses.size(); ++i)
    same_losses = rb.losses[i] == ra.losses[kResumeAt + i];
  if (!same_losses) problems.push_back("resumed losses");
  if (encode_checkpoint(b2) != encode_checkpoint(a)) problems.push_back("resumed final state");
  fs::remove_all(dir);

  o.pass = problems.empty();
  o.detail = "dataset " + std::to_string(samples.size()) + " samples, checkpoint " + std::to_string(bytes.size()) +
             " bytes, resume " + std::to_string(kResumeAt) + "->" + std::to_string(kResumeTo) + ": " +
             (problems.empty() ? std::string("all bit-exact") : "mismatch in " + problems.front());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int n) { return wanted.empty() || wanted.count(n) != 0; };

  // small benchmark-sized split shared by the mechanical checks
  const TrainData small = split_data(generate_dataset(12, 4242, SceneParams{}, DomainShift::preset("default")));

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite_check},
      {"warp oracles", warp_oracles},
      {"metric oracles", metric_oracles},
      {"loss identities", loss_identities},
      {"schedule discipline", [&] { return schedule_audit(small); }},
      {"adaptation trend", adaptation_trend},
      {"ablation trend", ablation_trend},
      {"reproducibility", [&] { return reproducibility(small); }},
      {"round trips", [&] { return round_trips(small); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!want(n)) continue;
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("threw: ") + e.what()};
    }
    failed += r.pass ? 0 : 1;
    std::printf("criterion %d %s: %s: %s\n", n, r.pass ? "PASS" : "FAIL", criteria[i].first, r.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
