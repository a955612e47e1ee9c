#pragma once

// Alternating co-training: every k-th iteration updates the translation
// module (discriminators, then generators) with the task nets frozen; the
// k-1 iterations in between update the stereo and flow nets together with
// the generators frozen.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "warpadapt/losses.hpp"
#include "warpadapt/metrics.hpp"
#include "warpadapt/netlib.hpp"
#include "warpadapt/optim.hpp"
#include "warpadapt/random.hpp"
#include "warpadapt/scenegen.hpp"
#include "warpadapt/tensor_io.hpp"

namespace warpadapt {

enum class TrainMode { joint, source_only };

inline const char* mode_name(TrainMode m) { return m == TrainMode::joint ? "joint" : "source_only"; }

inline TrainMode parse_mode(const std::string& s) {
  if (s == "joint") return TrainMode::joint;
  if (s == "source_only") return TrainMode::source_only;
  throw ConfigError("mode must be 'joint' or 'source_only', got '" + s + "'");
}

// The extractor is the same for every run so perceptual distances compare.
inline constexpr std::uint64_t kExtractorSeed = 0x70e1c3a5ULL;

struct TrainConfig {
  int k = 5;
  std::uint64_t total_iters = 1000;
  int batch_size = 2;
  double lr_translation = 2e-4;
  double lr_disp = 1e-3;
  double lr_flow = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::uint64_t eval_every = 0;        // 0: evaluate only before and after training
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  double gamma = 0.9;
  int gen_channels = 8;
  int disc_channels = 8;
  int max_disp = 16;
  int max_flow = 8;
  TrainMode mode = TrainMode::joint;
  bool identity_generators = false;
  ThresholdMode d1_mode = ThresholdMode::any;
  bool flow_noc = false;  // evaluate flow on pixels visible in both frames only
  int threads = 1;        // evaluation workers

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr_translation > 0) || !(lr_disp > 0) || !(lr_flow > 0)) throw ConfigError("learning rates must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(gamma > 0 && gamma <= 1)) throw ConfigError("gamma must lie in (0, 1]");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    weights.validate();
  }
};

// ---------------------------------------------------------------------------

struct Models {
  NetworkHandle<float> g_a2b, g_b2a, d_a, d_b, stereo, flow, extractor;

  std::vector<std::pair<const char*, NetworkHandle<float>*>> named() {
    return {{"g_a2b", &g_a2b}, {"g_b2a", &g_b2a}, {"d_a", &d_a},           {"d_b", &d_b},
            {"stereo", &stereo}, {"flow", &flow},  {"extractor", &extractor}};
  }
};

inline Models build_models(const TrainConfig& c) {
  Models m;
  m.g_a2b = build_generator<float>(derive_seed(c.seed, 1), c.gen_channels, c.identity_generators);
  m.g_b2a = build_generator<float>(derive_seed(c.seed, 2), c.gen_channels, c.identity_generators);
  m.d_a = build_discriminator<float>(derive_seed(c.seed, 3), c.disc_channels);
  m.d_b = build_discriminator<float>(derive_seed(c.seed, 4), c.disc_channels);
  m.stereo = build_stereo_net<float>(derive_seed(c.seed, 5), c.max_disp);
  m.flow = build_flow_net<float>(derive_seed(c.seed, 6), c.max_flow);
  m.extractor = build_extractor<float>(kExtractorSeed);
  for (auto& [name, net] : m.named()) net->set_trainable(false);
  return m;
}

struct Optimizers {
  Adam<float> g_a2b, g_b2a, d_a, d_b, stereo, flow;

  std::vector<std::pair<const char*, Adam<float>*>> named() {
    return {{"g_a2b", &g_a2b}, {"g_b2a", &g_b2a}, {"d_a", &d_a}, {"d_b", &d_b}, {"stereo", &stereo}, {"flow", &flow}};
  }
};

inline Optimizers build_optimizers(const TrainConfig& c) {
  const AdamConfig tr{c.lr_translation, c.beta1, c.beta2, 0.0};
  Optimizers o;
  o.g_a2b = Adam<float>(tr);
  o.g_b2a = Adam<float>(tr);
  o.d_a = Adam<float>(tr);
  o.d_b = Adam<float>(tr);
  o.stereo = Adam<float>(AdamConfig{c.lr_disp, c.beta1, c.beta2, 0.0});
  o.flow = Adam<float>(AdamConfig{c.lr_flow, c.beta1, c.beta2, kFlowWeightDecay});
  return o;
}

// Cyclic pass over a sample list, reshuffled at every epoch boundary.
struct DataCursor {
  std::vector<std::uint32_t> perm;
  std::size_t pos = 0;
};

struct TrainState {
  TrainConfig config;
  std::uint64_t iteration = 0;
  Models models;
  Optimizers opt;
  Rng rng;
  DataCursor syn, real;
};

inline TrainState init_state(const TrainConfig& c) {
  c.validate();
  TrainState s;
  s.config = c;
  s.models = build_models(c);
  s.opt = build_optimizers(c);
  s.rng = Rng(derive_seed(c.seed, 100));
  return s;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  Tensor<float> left, right, next;
  std::optional<Tensor<float>> disp, flow, occ;
};

namespace detail {

inline Tensor<float> stack(const std::vector<const Tensor<float>*>& ts) {
  Shape s = ts.front()->shape();
  std::vector<float> v;
  for (const auto* t : ts) {
    if (t->shape().c != s.c || t->shape().h != s.h || t->shape().w != s.w) throw UsageError("batch: mixed sample shapes");
    v.insert(v.end(), t->values().begin(), t->values().end());
  }
  s.n = 0;
  for (const auto* t : ts) s.n += t->shape().n;
  return Tensor<float>::make(s, std::move(v));
}

}  // namespace detail

// with_truth: carry ground truth (synthetic training batches only)
inline Batch make_batch(const std::vector<const SceneSample*>& picks, bool with_truth) {
  if (picks.empty()) throw UsageError("make_batch: empty batch");
  auto gather = [&](auto get) {
    std::vector<const Tensor<float>*> ts;
    for (const auto* p : picks) ts.push_back(get(*p));
    return detail::stack(ts);
  };
  Batch b;
  b.left = gather([](const SceneSample& s) { return &s.left; });
  b.right = gather([](const SceneSample& s) { return &s.right; });
  b.next = gather([](const SceneSample& s) { return &s.next_left; });
  if (with_truth) {
    for (const auto* p : picks) {
      if (!p->disparity || !p->flow || !p->occlusion) throw UsageError("make_batch: synthetic sample lacks ground truth");
    }
    b.disp = gather([](const SceneSample& s) { return &s.disparity->values; });
    b.flow = gather([](const SceneSample& s) { return &s.flow->values; });
    b.occ = gather([](const SceneSample& s) { return &*s.occlusion; });
  }
  return b;
}

inline Batch next_batch(DataCursor& cur, const std::vector<SceneSample>& samples, int size, Rng& rng, bool with_truth) {
  if (samples.empty()) throw UsageError("next_batch: no samples");
  std::vector<const SceneSample*> picks;
  for (int i = 0; i < size; ++i) {
    if (cur.pos >= cur.perm.size()) {
      cur.perm.resize(samples.size());
      for (std::size_t j = 0; j < samples.size(); ++j) cur.perm[j] = static_cast<std::uint32_t>(j);
      rng.shuffle(cur.perm);
      cur.pos = 0;
    }
    picks.push_back(&samples.at(cur.perm[cur.pos++]));
  }
  return make_batch(picks, with_truth);
}

// ---------------------------------------------------------------------------
// Steps

inline bool is_translation_step(std::uint64_t iteration, int k) {
  return iteration % static_cast<std::uint64_t>(k) == 0;
}

namespace detail {

inline void record(LossBreakdown& b, const LossParts<float>& parts) {
  for (const auto& [k, t] : parts) b.set(k, t.item());
}

inline void check_batch(const Batch& b, bool need_truth, const char* who) {
  if (!b.left.defined() || !b.right.defined() || !b.next.defined()) throw UsageError(std::string(who) + ": batch lacks views");
  if (b.left.shape() != b.right.shape() || b.left.shape() != b.next.shape()) {
    throw UsageError(std::string(who) + ": batch views differ in shape");
  }
  if (need_truth && (!b.disp || !b.flow || !b.occ)) throw UsageError(std::string(who) + ": batch lacks ground truth");
}

inline LossBreakdown translation_step(TrainState& s, const Batch& x, const Batch& y) {
  Models& m = s.models;
  const LossWeights& w = s.config.weights;
  LossBreakdown out;

  // discriminators on detached fakes
  Tensor<float> fake_b, fake_a;
  {
    NoGradGuard ng;
    fake_b = forward(m.g_a2b, x.left).output;
    fake_a = forward(m.g_b2a, y.left).output;
  }
  m.d_a.set_trainable(true);
  m.d_b.set_trainable(true);
  m.d_a.zero_grad();
  m.d_b.zero_grad();
  const Tensor<float> disc_b =
      adversarial_disc_term(forward(m.d_b, y.left).output, forward(m.d_b, fake_b).output);
  const Tensor<float> disc_a =
      adversarial_disc_term(forward(m.d_a, x.left).output, forward(m.d_a, fake_a).output);
  backward(add(disc_a, disc_b));
  s.opt.d_a.step(m.d_a);
  s.opt.d_b.step(m.d_b);
  m.d_a.set_trainable(false);
  m.d_b.set_trainable(false);
  m.d_a.zero_grad();
  m.d_b.zero_grad();
  out.set("disc_a", disc_a.item());
  out.set("disc_b", disc_b.item());

  // generators against the updated (now frozen) discriminators
  m.g_a2b.set_trainable(true);
  m.g_b2a.set_trainable(true);
  m.g_a2b.zero_grad();
  m.g_b2a.zero_grad();
  const auto al = generator_forward(m.g_a2b, x.left);
  const auto ar = generator_forward(m.g_a2b, x.right);
  const auto an = generator_forward(m.g_a2b, x.next);
  const auto bl = generator_forward(m.g_b2a, al.output);  // synthetic -> real -> synthetic
  const auto br_taps = generator_taps(m.g_b2a, ar.output);
  const auto bn_taps = generator_taps(m.g_b2a, an.output);
  const Tensor<float> fa = generator_forward(m.g_b2a, y.left).output;
  const Tensor<float> rec_y = generator_forward(m.g_a2b, fa).output;  // real -> synthetic -> real
  const Tensor<float>& rec_x = bl.output;

  const auto xd = disparity_field(*x.disp);
  const auto xf = flow_field(*x.flow);
  LossParts<float> p;
  p["adv_a2b"] = adversarial_gen_term(forward(m.d_b, al.output).output);
  p["adv_b2a"] = adversarial_gen_term(forward(m.d_a, fa).output);
  p["cyc"] = add(cycle_loss(rec_y, y.left), cycle_loss(rec_x, x.left));
  p["perceptual"] = add(perceptual_loss(m.extractor, rec_y, y.left), perceptual_loss(m.extractor, rec_x, x.left));
  p["cosine"] = add(cosine_loss(rec_y, y.left), cosine_loss(rec_x, x.left));
  p["disp_warpx"] = add(bidirectional_warp_loss(al.taps, ar.taps, xd), bidirectional_warp_loss(bl.taps, br_taps, xd));
  p["flow_warpx"] = add(bidirectional_warp_loss(al.taps, an.taps, xf, *x.occ),
                        bidirectional_warp_loss(bl.taps, bn_taps, xf, *x.occ));
  p["corr"] = corr_consistency_loss(x.left, x.right, al.output, ar.output);
  p["ms"] = mode_seeking_loss(al.output, an.output, x.left, x.next);
  const Tensor<float> translation = assemble_translation(p, w);
  const Tensor<float> l_t = assemble_L_T(p, w);
  backward(l_t);
  s.opt.g_a2b.step(m.g_a2b);
  s.opt.g_b2a.step(m.g_b2a);
  m.g_a2b.set_trainable(false);
  m.g_b2a.set_trainable(false);
  m.g_a2b.zero_grad();
  m.g_b2a.zero_grad();
  // the discriminators saw gradient flow through their inputs only
  m.d_a.zero_grad();
  m.d_b.zero_grad();

  record(out, p);
  out.set("translation", translation.item());
  out.set("L_T", l_t.item());
  return out;
}

inline LossBreakdown task_step(TrainState& s, const Batch& x, const Batch* y) {
  Models& m = s.models;
  const LossWeights& w = s.config.weights;
  const bool joint = s.config.mode == TrainMode::joint;

  Tensor<float> in_l = x.left, in_r = x.right, in_n = x.next;
  std::vector<Tensor<float>> yl_taps, yr_taps, yn_taps;
  if (joint) {
    NoGradGuard ng;
    in_l = forward(m.g_a2b, x.left).output;
    in_r = forward(m.g_a2b, x.right).output;
    in_n = forward(m.g_a2b, x.next).output;
    yl_taps = generator_taps(m.g_b2a, y->left);
    yr_taps = generator_taps(m.g_b2a, y->right);
    yn_taps = generator_taps(m.g_b2a, y->next);
  }

  m.stereo.set_trainable(true);
  m.flow.set_trainable(true);
  m.stereo.zero_grad();
  m.flow.zero_grad();
  LossParts<float> p;
  p["disp"] = supervised_disp_loss(forward(m.stereo, in_l, in_r).stages, disparity_field(*x.disp), s.config.gamma);
  p["flow"] = supervised_flow_loss(forward(m.flow, in_l, in_n).stages, flow_field(*x.flow), *x.occ, s.config.gamma);
  Tensor<float> l_d, l_f;
  if (joint) {
    const Tensor<float> yd = forward(m.stereo, y->left, y->right).output;
    const Tensor<float> yf = forward(m.flow, y->left, y->next).output;
    p["disp_warpy"] = bidirectional_warp_loss(yl_taps, yr_taps, disparity_field(yd));
    p["flow_warpy"] = bidirectional_warp_loss(yl_taps, yn_taps, flow_field(yf));
    l_d = assemble_L_d(p, w);
    l_f = assemble_L_f(p, w);
  } else {
    l_d = scale(p["disp"], w.lambda_disp);
    l_f = scale(p["flow"], w.lambda_flow);
  }
  backward(add(l_d, l_f));
  s.opt.stereo.step(m.stereo);
  s.opt.flow.step(m.flow);
  m.stereo.set_trainable(false);
  m.flow.set_trainable(false);
  m.stereo.zero_grad();
  m.flow.zero_grad();

  LossBreakdown out;
  record(out, p);
  out.set("L_d", l_d.item());
  out.set("L_f", l_f.item());
  return out;
}

}  // namespace detail

// One iteration. `real` may be null only in source-only mode.
inline LossBreakdown train_step(TrainState& s, const Batch& syn, const Batch* real) {
  const bool joint = s.config.mode == TrainMode::joint;
  detail::check_batch(syn, true, "train_step");
  if (joint) {
    if (!real) throw UsageError("train_step: joint mode needs a real-domain batch");
    detail::check_batch(*real, false, "train_step");
  }
  LossBreakdown b;
  if (joint && is_translation_step(s.iteration, s.config.k)) {
    b = detail::translation_step(s, syn, *real);
  } else {
    b = detail::task_step(s, syn, real);
  }
  ++s.iteration;
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  bool oracle = false;  // inject ground truth as the prediction
};

namespace detail {

struct SampleMetrics {
  double epe_disp, d1, gt2, gt4, gt5, epe_flow, f1, mse, ssim, perceptual;
};

inline SampleMetrics evaluate_sample(Models& m, const TrainConfig& c, const SceneSample& s, const EvalOptions& o) {
  NoGradGuard ng;
  if (!s.disparity || !s.flow || !s.occlusion) throw MetricError("evaluate: validation sample has no hidden ground truth");
  SampleMetrics r{};
  const WarpField<float>& gd = *s.disparity;
  const WarpField<float>& gf = *s.flow;
  const WarpField<float> pd = o.oracle ? gd : disparity_field(forward(m.stereo, s.left, s.right).output);
  const WarpField<float> pf = o.oracle ? gf : flow_field(forward(m.flow, s.left, s.next_left).output);
  r.epe_disp = epe(pd, gd);
  r.d1 = d1_all(pd, gd, c.d1_mode);
  r.gt2 = threshold_error_rate(pd, gd, 2.0);
  r.gt4 = threshold_error_rate(pd, gd, 4.0);
  r.gt5 = threshold_error_rate(pd, gd, 5.0);
  const Tensor<float>* valid = c.flow_noc ? &*s.occlusion : nullptr;
  r.epe_flow = epe(pf, gf, valid);
  r.f1 = f1_all(pf, gf, c.d1_mode, valid);
  // real -> synthetic -> real
  const Tensor<float> rec = forward(m.g_a2b, forward(m.g_b2a, s.left).output).output;
  r.mse = mse(rec, s.left);
  r.ssim = ssim_metric(rec, s.left);
  r.perceptual = perceptual_loss(m.extractor, rec, s.left).item();
  return r;
}

}  // namespace detail

// Field metrics on real-domain validation pairs against their hidden ground
// truth, plus cycle-reconstruction quality. Means over samples.
inline MetricsReport evaluate(Models& m, const TrainConfig& c, const std::vector<SceneSample>& validation,
                              const EvalOptions& o = {}) {
  if (validation.empty()) throw MetricError("evaluate: empty validation set");
  std::vector<detail::SampleMetrics> per(validation.size());
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(c.threads), validation.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < validation.size(); ++i) per[i] = detail::evaluate_sample(m, c, validation[i], o);
  } else {
    // read-only use of the parameters; each worker owns its slice of `per`
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < validation.size(); i += workers)
            per[i] = detail::evaluate_sample(m, c, validation[i], o);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  MetricsReport r;
  const double n = static_cast<double>(per.size());
  for (const auto& s : per) {
    r.epe_disp += s.epe_disp / n;
    r.d1_all += s.d1 / n;
    r.gt2px += s.gt2 / n;
    r.gt4px += s.gt4 / n;
    r.gt5px += s.gt5 / n;
    r.epe_flow += s.epe_flow / n;
    r.f1_all += s.f1 / n;
    r.psnr += psnr_from_mse(s.mse) / n;
    r.ssim += s.ssim / n;
    r.perceptual_dist += s.perceptual / n;
  }
  r.sample_count = per.size();
  r.config = {{"d1_mode", c.d1_mode == ThresholdMode::any ? "or" : "and"},
              {"flow_valid", c.flow_noc ? "noc" : "all"},
              {"oracle", o.oracle ? "1" : "0"}};
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: "WARPCKP1" | u32 version | u32 record count |
//   records (u16 name length, name, tensor record) | u64 iteration | 4 x u64 rng

inline constexpr char kCheckpointMagic[] = "WARPCKP1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline Tensor<float> index_tensor(const std::vector<std::uint32_t>& v, std::size_t extra) {
  std::vector<float> f;
  f.push_back(static_cast<float>(extra));
  for (auto x : v) f.push_back(static_cast<float>(x));
  const Shape s{1, 1, 1, f.size()};
  return Tensor<float>::make(s, std::move(f));
}

inline void load_cursor(DataCursor& c, const Tensor<float>& t) {
  const auto& v = t.values();
  if (v.empty()) throw FormatError("checkpoint: empty cursor record");
  c.pos = static_cast<std::size_t>(v[0]);
  c.perm.assign(v.size() - 1, 0);
  for (std::size_t i = 1; i < v.size(); ++i) c.perm[i - 1] = static_cast<std::uint32_t>(v[i]);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(TrainState& s) {
  std::vector<std::pair<std::string, Tensor<float>>> records;
  const TrainConfig& c = s.config;
  records.emplace_back("meta.arch", Tensor<float>::make({1, 1, 1, 6}, {static_cast<float>(c.gen_channels),
                                                                        static_cast<float>(c.disc_channels),
                                                                        static_cast<float>(c.max_disp),
                                                                        static_cast<float>(c.max_flow),
                                                                        c.identity_generators ? 1.0f : 0.0f,
                                                                        c.mode == TrainMode::joint ? 0.0f : 1.0f}));
  for (auto& [name, net] : s.models.named()) {
    for (auto& [pn, t] : net->params) records.emplace_back(std::string("net.") + name + "." + pn, t);
  }
  for (auto& [name, adam] : s.opt.named()) {
    for (std::size_t i = 0; i < adam->moments.size(); ++i) {
      const auto& mom = adam->moments[i];
      const std::string base = std::string("opt.") + name + "." + std::to_string(i);
      const std::size_t n = mom.m.size();
      records.emplace_back(base + ".m", Tensor<float>::make({1, 1, 1, n}, mom.m));
      records.emplace_back(base + ".v", Tensor<float>::make({1, 1, 1, n}, mom.v));
      records.emplace_back(base + ".t", Tensor<float>::scalar(static_cast<float>(mom.step)));
    }
  }
  records.emplace_back("data.syn", detail::index_tensor(s.syn.perm, s.syn.pos));
  records.emplace_back("data.real", detail::index_tensor(s.real.perm, s.real.pos));

  ByteWriter w;
  w.str(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.tensor(t);
  }
  w.u64(s.iteration);
  for (std::uint64_t v : s.rng.state()) w.u64(v);
  return w.data();
}

// Rebuilds the state for `base` (architecture taken from the file) and
// overwrites every parameter, moment buffer and cursor from the records.
inline TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context,
                                    TrainConfig base = {}) {
  ByteReader r(bytes, context);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) r.fail("bad magic (expected WARPCKP1)", 0);
  const std::size_t vat = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version), vat);
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor<float>> recs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint16_t len = r.u16();
    std::string name = r.str(len);
    if (recs.count(name)) r.fail("duplicate record " + name, at);
    recs.emplace(std::move(name), r.tensor());
  }
  const std::uint64_t iteration = r.u64();
  Rng::State st;
  for (auto& v : st) v = r.u64();
  if (!r.at_end()) r.fail("trailing bytes", r.offset());

  auto take = [&](const std::string& name) -> Tensor<float>& {
    auto it = recs.find(name);
    if (it == recs.end()) throw FormatError(context + ": missing record " + name);
    return it->second;
  };
  const auto& arch = take("meta.arch").values();
  if (arch.size() != 6) throw FormatError(context + ": malformed meta.arch");
  base.gen_channels = static_cast<int>(arch[0]);
  base.disc_channels = static_cast<int>(arch[1]);
  base.max_disp = static_cast<int>(arch[2]);
  base.max_flow = static_cast<int>(arch[3]);
  base.identity_generators = arch[4] != 0;
  base.mode = arch[5] == 0 ? TrainMode::joint : TrainMode::source_only;

  TrainState s = init_state(base);
  s.iteration = iteration;
  s.rng.set_state(st);
  for (auto& [name, net] : s.models.named()) {
    for (auto& [pn, t] : net->params) {
      const Tensor<float>& src = take(std::string("net.") + name + "." + pn);
      if (src.shape() != t.shape()) throw FormatError(context + ": shape mismatch for " + name + "." + pn);
      t.mutable_values() = src.values();
    }
  }
  for (auto& [name, adam] : s.opt.named()) {
    const std::string prefix = std::string("opt.") + name + ".";
    if (!recs.count(prefix + "0.m")) continue;  // optimizer never stepped
    NetworkHandle<float>* net = nullptr;
    for (auto& [mn, mnet] : s.models.named())
      if (std::string(mn) == name) net = mnet;
    adam->moments.resize(net->params.size());
    for (std::size_t i = 0; i < adam->moments.size(); ++i) {
      const std::string b = prefix + std::to_string(i);
      adam->moments[i].m = take(b + ".m").values();
      adam->moments[i].v = take(b + ".v").values();
      adam->moments[i].step = static_cast<std::uint64_t>(take(b + ".t").item());
    }
  }
  detail::load_cursor(s.syn, take("data.syn"));
  detail::load_cursor(s.real, take("data.real"));
  return s;
}

inline void save_checkpoint(TrainState& s, const std::filesystem::path& path) { write_file(path, encode_checkpoint(s)); }

inline TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& base = {}) {
  return decode_checkpoint(read_file(path), path.string(), base);
}

// ---------------------------------------------------------------------------
// Log lines

inline std::string format_log_line(std::uint64_t iteration, const LossBreakdown& b) {
  std::string line = std::to_string(iteration);
  for (const auto& k : LossBreakdown::keys()) line += "\t" + k + "=" + (b.has(k) ? format_metric(b.get(k)) : "-");
  return line;
}

inline std::string format_eval_line(std::uint64_t iteration, const MetricsReport& r) {
  std::string line = "eval\t" + std::to_string(iteration) + "\tsample_count=" + std::to_string(r.sample_count);
  for (const auto& [k, v] : r.values()) line += "\t" + k + "=" + format_metric(v);
  return line;
}

inline std::vector<std::pair<std::string, std::string>> config_echo(const TrainConfig& c) {
  auto num = [](double v) { return format_metric(v); };
  std::vector<std::pair<std::string, std::string>> e{
      {"k", std::to_string(c.k)},
      {"total_iters", std::to_string(c.total_iters)},
      {"batch_size", std::to_string(c.batch_size)},
      {"lr_translation", num(c.lr_translation)},
      {"lr_disp", num(c.lr_disp)},
      {"lr_flow", num(c.lr_flow)},
      {"beta1", num(c.beta1)},
      {"beta2", num(c.beta2)},
      {"seed", std::to_string(c.seed)},
      {"eval_every", std::to_string(c.eval_every)},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"gamma", num(c.gamma)},
      {"gen_channels", std::to_string(c.gen_channels)},
      {"disc_channels", std::to_string(c.disc_channels)},
      {"max_disp", std::to_string(c.max_disp)},
      {"max_flow", std::to_string(c.max_flow)},
      {"mode", mode_name(c.mode)},
      {"identity_generators", c.identity_generators ? "1" : "0"},
      {"d1_mode", c.d1_mode == ThresholdMode::any ? "or" : "and"},
      {"flow_valid", c.flow_noc ? "noc" : "all"},
  };
  for (const auto& [name, member] : LossWeights::fields()) e.emplace_back(std::string("weights.") + name, num(c.weights.*member));
  return e;
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainData {
  std::vector<SceneSample> syn_train;
  std::vector<SceneSample> real_train;
  std::vector<SceneSample> real_val;
};

inline TrainData split_data(const std::vector<SceneSample>& all) {
  TrainData d;
  d.syn_train = split_domain(all, Domain::synthetic).train;
  const DomainSplit real = split_domain(all, Domain::real);
  d.real_train = real.train;
  d.real_val = real.validation;
  return d;
}

struct RunOutputs {
  std::vector<std::string> log;                                 // every line written
  std::vector<LossBreakdown> losses;                            // per iteration
  std::vector<std::pair<std::uint64_t, MetricsReport>> evals;   // (iteration, report)
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // log + checkpoints go here when set
  std::ostream* echo = nullptr;                  // progress copy of the log
  bool evaluate = true;
};

// Advances `s` to `target_iters`, evaluating before the first step, every
// eval_every iterations and at the end.
inline RunOutputs continue_training(TrainState& s, const TrainData& data, std::uint64_t target_iters,
                                    const RunOptions& opts = {}) {
  const TrainConfig& c = s.config;
  if (data.syn_train.empty()) throw UsageError("training: no synthetic training samples");
  if (c.mode == TrainMode::joint && data.real_train.empty()) throw UsageError("training: no real-domain training samples");
  RunOutputs out;
  std::ofstream log_file;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    const auto path = *opts.out_dir / "train.log";
    log_file.open(path, s.iteration == 0 ? std::ios::trunc : std::ios::app);
    if (!log_file) throw IoError("cannot write " + path.string());
  }
  auto emit = [&](const std::string& line) {
    out.log.push_back(line);
    if (log_file) log_file << line << '\n';
    if (opts.echo) *opts.echo << line << '\n';
  };
  auto run_eval = [&] {
    if (!opts.evaluate || data.real_val.empty()) return;
    const MetricsReport r = evaluate(s.models, c, data.real_val);
    out.evals.emplace_back(s.iteration, r);
    emit(format_eval_line(s.iteration, r));
  };
  auto checkpoint = [&](const std::string& name) {
    if (opts.out_dir) save_checkpoint(s, *opts.out_dir / name);
  };

  if (s.iteration == 0) {
    for (const auto& [k, v] : config_echo(c)) emit("# " + k + "=" + v);
    run_eval();
  }
  while (s.iteration < target_iters) {
    const std::uint64_t it = s.iteration;
    const Batch syn = next_batch(s.syn, data.syn_train, c.batch_size, s.rng, true);
    std::optional<Batch> real;
    if (c.mode == TrainMode::joint) real = next_batch(s.real, data.real_train, c.batch_size, s.rng, false);
    const LossBreakdown b = train_step(s, syn, real ? &*real : nullptr);
    out.losses.push_back(b);
    emit(format_log_line(it, b));
    if (c.eval_every > 0 && s.iteration % c.eval_every == 0 && s.iteration < target_iters) run_eval();
    if (c.checkpoint_every > 0 && s.iteration % c.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06llu.ckpt", static_cast<unsigned long long>(s.iteration));
      checkpoint(name);
    }
  }
  if (target_iters > 0 || s.iteration > 0) run_eval();
  checkpoint("checkpoint_final.ckpt");
  return out;
}

inline std::pair<TrainState, RunOutputs> run_training(const TrainConfig& c, const TrainData& data,
                                                      const RunOptions& opts = {}) {
  if (c.total_iters % static_cast<std::uint64_t>(std::max(c.k, 1)) != 0) {
    std::cerr << "warning: total_iters " << c.total_iters << " is not a multiple of k " << c.k << "\n";
  }
  TrainState s = init_state(c);
  RunOutputs out = continue_training(s, data, c.total_iters, opts);
  return {std::move(s), std::move(out)};
}

}  // namespace warpadapt
