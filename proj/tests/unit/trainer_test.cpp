#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "warpadapt/trainer.hpp"

using namespace warpadapt;
namespace fs = std::filesystem;

namespace {

SceneParams small_scene() {
  SceneParams p;
  p.width = 64;
  p.height = 32;
  p.max_disp = 6;
  p.max_flow = 4;
  p.min_objects = 2;
  p.max_objects = 4;
  return p;
}

TrainConfig small_config() {
  TrainConfig c;
  c.k = 2;
  c.total_iters = 4;
  c.batch_size = 2;
  c.gen_channels = 4;
  c.disc_channels = 4;
  c.max_disp = 8;
  c.max_flow = 4;
  c.seed = 7;
  return c;
}

const TrainData& small_data() {
  static const TrainData d = split_data(generate_dataset(5, 3, small_scene(), DomainShift::preset("default")));
  return d;
}

using Snapshot = std::vector<std::vector<float>>;

Snapshot snapshot(const NetworkHandle<float>& n) {
  Snapshot s;
  for (const auto& [name, t] : n.params) s.push_back(t.values());
  return s;
}

std::map<std::string, Snapshot> snapshot_all(Models& m) {
  std::map<std::string, Snapshot> out;
  for (auto& [name, net] : m.named()) out[name] = snapshot(*net);
  return out;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("warpadapt_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  std::vector<float> p{1.0f, -2.0f, 0.5f};
  const std::vector<float> g{0.3f, -4.0f, 1e-3f};
  AdamMoments<float> m;
  adam_update<float>(p, g, m, AdamConfig{0.1, 0.9, 0.999, 0.0});
  // mhat / sqrt(vhat) = g / |g| on the first step
  EXPECT_NEAR(p[0], 0.9, 1e-6);
  EXPECT_NEAR(p[1], -1.9, 1e-6);
  EXPECT_NEAR(p[2], 0.4 + 0.1 * 1e-8 / (1e-3 + 1e-8), 1e-6);
  EXPECT_EQ(m.step, 1u);
}

TEST(Adam, DecoupledDecayScalesParameter) {
  std::vector<float> p{2.0f};
  const std::vector<float> zero{0.0f};
  AdamMoments<float> m;
  adam_update<float>(p, zero, m, AdamConfig{0.1, 0.9, 0.999, kFlowWeightDecay});
  EXPECT_NEAR(p[0], 2.0 * (1 - 0.1 * 0.01), 1e-7);
}

TEST(Adam, SecondStepClosedForm) {
  std::vector<float> p{0.0f};
  AdamMoments<float> m;
  const AdamConfig c{0.01, 0.9, 0.999, 0.0};
  adam_update<float>(p, std::vector<float>{1.0f}, m, c);
  adam_update<float>(p, std::vector<float>{3.0f}, m, c);
  const double m2 = 0.9 * 0.1 + 0.1 * 3, v2 = 0.999 * 0.001 + 0.001 * 9;
  const double step2 = (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p[0], -0.01 - 0.01 * step2, 1e-6);
}

TEST(Trainer, FreezeContract) {
  TrainConfig c = small_config();
  TrainState s = init_state(c);
  const auto& d = small_data();
  const auto before = snapshot_all(s.models);

  // iteration 0: translation
  Batch syn = next_batch(s.syn, d.syn_train, c.batch_size, s.rng, true);
  Batch real = next_batch(s.real, d.real_train, c.batch_size, s.rng, false);
  const LossBreakdown b0 = train_step(s, syn, &real);
  EXPECT_TRUE(b0.has("L_T"));
  EXPECT_FALSE(b0.has("L_d"));
  const auto after_t = snapshot_all(s.models);
  for (const char* n : {"g_a2b", "g_b2a", "d_a", "d_b"}) EXPECT_NE(after_t.at(n), before.at(n)) << n;
  for (const char* n : {"stereo", "flow", "extractor"}) EXPECT_EQ(after_t.at(n), before.at(n)) << n;

  // iteration 1: task
  const LossBreakdown b1 = train_step(s, syn, &real);
  EXPECT_TRUE(b1.has("L_d"));
  EXPECT_FALSE(b1.has("L_T"));
  const auto after_d = snapshot_all(s.models);
  for (const char* n : {"g_a2b", "g_b2a", "d_a", "d_b", "extractor"}) EXPECT_EQ(after_d.at(n), after_t.at(n)) << n;
  for (const char* n : {"stereo", "flow"}) EXPECT_NE(after_d.at(n), after_t.at(n)) << n;

  // no parameter is left requiring gradients between steps
  for (auto& [name, net] : s.models.named())
    for (const auto& [pn, t] : net->params) EXPECT_FALSE(t.requires_grad()) << name << "." << pn;
}

TEST(Trainer, BreakdownAggregatesRecompute) {
  TrainConfig c = small_config();
  TrainState s = init_state(c);
  const auto& d = small_data();
  Batch syn = next_batch(s.syn, d.syn_train, c.batch_size, s.rng, true);
  Batch real = next_batch(s.real, d.real_train, c.batch_size, s.rng, false);
  const LossBreakdown t = train_step(s, syn, &real);
  EXPECT_NEAR(recompute_L_T(t, c.weights), t.get("L_T"), 1e-4 * std::abs(t.get("L_T")));
  EXPECT_NEAR(recompute_translation(t, c.weights), t.get("translation"), 1e-4 * std::abs(t.get("translation")));
  const LossBreakdown k = train_step(s, syn, &real);
  EXPECT_NEAR(recompute_L_d(k, c.weights), k.get("L_d"), 1e-4 * std::abs(k.get("L_d")));
  EXPECT_NEAR(recompute_L_f(k, c.weights), k.get("L_f"), 1e-4 * std::abs(k.get("L_f")));
}

TEST(Trainer, SourceOnlyNeverTouchesTranslation) {
  TrainConfig c = small_config();
  c.mode = TrainMode::source_only;
  TrainState s = init_state(c);
  const auto before = snapshot_all(s.models);
  TrainData d = small_data();
  d.real_train.clear();
  RunOptions o;
  o.evaluate = false;
  const RunOutputs out = continue_training(s, d, 4, o);
  ASSERT_EQ(out.losses.size(), 4u);
  for (const auto& b : out.losses) {
    EXPECT_TRUE(b.has("disp"));
    EXPECT_FALSE(b.has("disp_warpy"));
    EXPECT_FALSE(b.has("L_T"));
  }
  const auto after = snapshot_all(s.models);
  for (const char* n : {"g_a2b", "g_b2a", "d_a", "d_b"}) EXPECT_EQ(after.at(n), before.at(n));
  EXPECT_NE(after.at("stereo"), before.at("stereo"));
}

TEST(Trainer, JointModeNeedsRealBatch) {
  TrainState s = init_state(small_config());
  const auto& d = small_data();
  Batch syn = next_batch(s.syn, d.syn_train, 1, s.rng, true);
  EXPECT_THROW(train_step(s, syn, nullptr), UsageError);
  Batch real = next_batch(s.real, d.real_train, 1, s.rng, false);
  EXPECT_THROW(train_step(s, real, &real), UsageError);  // no ground truth
}

TEST(Trainer, SameSeedSameRun) {
  const TrainConfig c = small_config();
  RunOptions o;
  o.evaluate = false;
  auto [a, ra] = run_training(c, small_data(), o);
  auto [b, rb] = run_training(c, small_data(), o);
  ASSERT_EQ(ra.losses.size(), rb.losses.size());
  for (std::size_t i = 0; i < ra.losses.size(); ++i) EXPECT_TRUE(ra.losses[i] == rb.losses[i]) << i;
  EXPECT_EQ(snapshot_all(a.models), snapshot_all(b.models));
  EXPECT_EQ(ra.log, rb.log);
}

TEST(Trainer, ZeroIterationsEvaluatesInitialModel) {
  TrainConfig c = small_config();
  c.total_iters = 0;
  auto [s, out] = run_training(c, small_data());
  EXPECT_TRUE(out.losses.empty());
  ASSERT_EQ(out.evals.size(), 1u);
  EXPECT_EQ(out.evals[0].first, 0u);
  const auto fresh = init_state(c);
  auto fresh_models = fresh.models;
  EXPECT_EQ(snapshot_all(s.models), snapshot_all(fresh_models));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TrainConfig c = small_config();
  RunOptions o;
  o.evaluate = false;
  auto [s, out] = run_training(c, small_data(), o);
  const auto bytes = encode_checkpoint(s);
  TrainState back = decode_checkpoint(bytes, "mem", c);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.iteration, s.iteration);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "WARPCKP1");
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  TrainState s = init_state(small_config());
  auto bytes = encode_checkpoint(s);
  auto bad = bytes;
  bad[0] = 'Z';
  EXPECT_THROW(decode_checkpoint(bad, "x"), FormatError);
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() / 2);
  try {
    decode_checkpoint(cut, "half.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  TrainConfig c = small_config();
  c.total_iters = 6;
  RunOptions o;
  o.evaluate = false;
  auto [full, rf] = run_training(c, small_data(), o);

  TrainState half = init_state(c);
  const RunOutputs r1 = continue_training(half, small_data(), 3, o);
  TrainState resumed = decode_checkpoint(encode_checkpoint(half), "mem", c);
  const RunOutputs r2 = continue_training(resumed, small_data(), 6, o);

  ASSERT_EQ(r1.losses.size() + r2.losses.size(), rf.losses.size());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(rf.losses[3 + i] == r2.losses[i]) << i;
  EXPECT_EQ(snapshot_all(full.models), snapshot_all(resumed.models));
}

TEST(Trainer, WritesLogAndCheckpoints) {
  TrainConfig c = small_config();
  c.checkpoint_every = 2;
  c.eval_every = 2;
  RunOptions o;
  o.out_dir = temp_dir("logs");
  auto [s, out] = run_training(c, small_data(), o);
  EXPECT_TRUE(fs::exists(*o.out_dir / "checkpoint_000002.ckpt"));
  EXPECT_TRUE(fs::exists(*o.out_dir / "checkpoint_final.ckpt"));
  // evaluation at 0, 2 and 4
  ASSERT_EQ(out.evals.size(), 3u);
  EXPECT_EQ(out.evals[1].first, 2u);
  std::ifstream in(*o.out_dir / "train.log");
  std::string line;
  int iter_lines = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) {
      ++iter_lines;
      int fields = 0;
      for (char ch : line) fields += ch == '\t';
      EXPECT_EQ(fields, static_cast<int>(LossBreakdown::keys().size()));
      EXPECT_NE(line.find("=-"), std::string::npos);  // the other step's keys are absent
    }
  }
  EXPECT_EQ(iter_lines, 4);
  const TrainState back = load_checkpoint(*o.out_dir / "checkpoint_final.ckpt", c);
  EXPECT_EQ(back.iteration, 4u);
  fs::remove_all(*o.out_dir);
}

TEST(Evaluate, OracleGivesPerfectFieldsAndThreadsAgree) {
  TrainConfig c = small_config();
  TrainState s = init_state(c);
  const auto& val = small_data().real_val;
  const MetricsReport oracle = evaluate(s.models, c, val, EvalOptions{true});
  EXPECT_EQ(oracle.epe_disp, 0.0);
  EXPECT_EQ(oracle.d1_all, 0.0);
  EXPECT_EQ(oracle.epe_flow, 0.0);
  EXPECT_EQ(oracle.f1_all, 0.0);
  EXPECT_EQ(oracle.sample_count, val.size());
  const MetricsReport serial = evaluate(s.models, c, val);
  c.threads = 3;
  const MetricsReport threaded = evaluate(s.models, c, val);
  EXPECT_EQ(serial.values(), threaded.values());
  EXPECT_GT(serial.epe_disp, 0.0);
}

TEST(Evaluate, IdentityGeneratorsReconstructExactly) {
  TrainConfig c = small_config();
  c.identity_generators = true;
  TrainState s = init_state(c);
  const MetricsReport r = evaluate(s.models, c, small_data().real_val);
  EXPECT_TRUE(std::isinf(r.psnr));
  EXPECT_EQ(r.ssim, 1.0);
  EXPECT_EQ(r.perceptual_dist, 0.0);
}

TEST(TrainConfigTest, ValidationRejectsBadValues) {
  TrainConfig c;
  c.k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_disp = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights.lambda_cyc = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_mode("both"), ConfigError);
}

TEST(Adam, UnitGradientFirstStepIsMinusLearningRate) {
  std::vector<float> p{0.0f};
  AdamMoments<float> m;
  adam_update<float>(p, std::vector<float>{1.0f}, m, AdamConfig{0.1, 0.9, 0.999, 0.0});
  // mhat = 1, vhat = 1: delta = -0.1 / (1 + 1e-8)
  EXPECT_NEAR(p[0], -0.1 / (1 + 1e-8), 1e-7);
}

// 200 iterations at 64x128, batch 2: the cycle loss of the last translation
// step is below that of the first, for three seeds.
TEST(Trainer, SmokeRunReducesCycleLoss) {
  const TrainData d = split_data(generate_dataset(20, 17, SceneParams{}, DomainShift::preset("default")));
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig c;
    c.total_iters = 200;
    c.seed = seed;
    RunOptions o;
    o.evaluate = false;
    auto [state, out] = run_training(c, d, o);
    EXPECT_EQ(state.iteration, 200u);
    std::vector<double> cyc;
    for (const auto& b : out.losses)
      if (b.has("cyc")) cyc.push_back(b.get("cyc"));
    ASSERT_EQ(cyc.size(), 40u);
    EXPECT_LT(cyc.back(), cyc.front()) << "seed " << seed;
  }
}
