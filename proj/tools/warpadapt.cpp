// warpadapt: generate data, train, evaluate, inspect translations, check
// gradients. Exit codes: 0 ok, 1 verification failure, 2 usage/config,
// 3 data/I/O.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "warpadapt/config.hpp"
#include "warpadapt/gradsuite.hpp"
#include "warpadapt/trainer.hpp"

using namespace warpadapt;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kVerifyFail = 1, kUsage = 2, kData = 3 };

// WARPADAPT_THREADS caps the worker count; unset means all cores.
int worker_threads() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("WARPADAPT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) throw ConfigError("WARPADAPT_THREADS must be a positive integer");
    n = std::min<int>(n, static_cast<int>(cap));
  }
  return n;
}

// "--key value" pairs left over after CLI11 parsing become config overrides.
void apply_overrides(CliConfig& c, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& flag = extras[i];
    if (flag.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + flag + "'");
    std::string key = flag.substr(2), value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + key);
      value = extras[++i];
    }
    apply_config_value(c, key, value);
  }
}

void write_tensor_file(const fs::path& path, const Tensor<float>& t) {
  ByteWriter w;
  w.str("WARPTEN1");
  w.tensor(t);
  write_file(path, w.data());
}

// 8-bit binary PPM of the first image in the batch.
void write_ppm(const fs::path& path, const Tensor<float>& t) {
  const Shape s = t.shape();
  if (s.c != 3) throw UsageError("write_ppm: need 3 channels");
  std::vector<std::uint8_t> bytes;
  const std::string header = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp<double>(t.at(0, c, y, x), 0.0, 1.0);
        bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  write_file(path, bytes);
}

int cmd_generate(const fs::path& out, CliConfig c, std::uint64_t seed) {
  const auto samples = generate_dataset(c.count, seed, c.scene, DomainShift::preset(c.shift_preset));
  write_dataset(samples, out);
  const auto syn = split_domain(samples, Domain::synthetic);
  std::printf("generated %zu synthetic + %zu real samples (%dx%d, shift=%s) in %s; split %zu/%zu per domain\n",
              c.count, c.count, c.scene.width, c.scene.height, c.shift_preset.c_str(), out.string().c_str(),
              syn.train.size(), syn.validation.size());
  return kOk;
}

int cmd_train(const CliConfig& c, const fs::path& data, const fs::path& out) {
  const TrainData d = split_data(read_dataset(data));
  RunOptions o;
  o.out_dir = out;
  o.echo = &std::cout;
  auto [state, res] = run_training(c.train, d, o);
  std::printf("trained %llu iterations; checkpoint %s\n", static_cast<unsigned long long>(state.iteration),
              (out / "checkpoint_final.ckpt").string().c_str());
  return kOk;
}

int cmd_eval(const CliConfig& c, const fs::path& checkpoint, const fs::path& data, bool oracle, bool csv) {
  TrainState s = load_checkpoint(checkpoint, c.train);
  TrainConfig ec = s.config;
  ec.d1_mode = c.train.d1_mode;
  ec.flow_noc = c.train.flow_noc;
  ec.threads = c.train.threads;
  const TrainData d = split_data(read_dataset(data));
  const MetricsReport r = evaluate(s.models, ec, d.real_val, EvalOptions{oracle});
  if (csv) {
    std::cout << r.csv_header() << "\n" << r.csv_row() << "\n";
  } else {
    std::cout << r.to_text();
  }
  return kOk;
}

int cmd_translate(const CliConfig& c, const fs::path& checkpoint, const fs::path& in, const fs::path& out,
                  const std::string& direction) {
  TrainState s = load_checkpoint(checkpoint, c.train);
  const SceneSample sample = decode_sample(read_file(in), in.string());
  const bool real = sample.domain == Domain::real;
  if ((direction == "a2b" && real) || (direction == "b2a" && !real)) {
    std::cerr << "warning: direction " << direction << " applied to a " << domain_name(sample.domain)
              << " sample; proceeding\n";
  }
  fs::create_directories(out);
  NoGradGuard ng;
  auto emit = [&](const std::string& name, const Tensor<float>& t) {
    write_tensor_file(out / (name + ".wat"), t);
    write_ppm(out / (name + ".ppm"), t);
  };
  const Tensor<float>& x = sample.left;
  emit("original", x);
  if (direction == "a2b") {
    emit("translated", generator_forward(s.models.g_a2b, x).output);
  } else if (direction == "b2a") {
    emit("translated", generator_forward(s.models.g_b2a, x).output);
  } else {
    // start from the sample's own domain and come back to it
    const auto& there = real ? s.models.g_b2a : s.models.g_a2b;
    const auto& back = real ? s.models.g_a2b : s.models.g_b2a;
    const Tensor<float> mid = generator_forward(there, x).output;
    const Tensor<float> rec = generator_forward(back, mid).output;
    emit(real ? "fake_synthetic" : "fake_real", mid);
    emit("reconstructed", rec);
    std::cout << "psnr=" << format_metric(psnr(rec, x)) << "\n";
  }
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  int failures = 0;
  std::printf("%-40s %12s %10s  %s\n", "case", "rel_error", "threshold", "result");
  for (const auto& c : gradient_suite(seed)) {
    const double err = c.run();
    const bool ok = err < c.tolerance;
    failures += !ok;
    std::printf("%-40s %12.3e %10.0e  %s\n", c.name.c_str(), err, c.tolerance, ok ? "pass" : "FAIL");
  }
  if (failures) {
    std::printf("%d case(s) failed\n", failures);
    return kVerifyFail;
  }
  std::printf("all cases passed\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"warpadapt: joint domain translation, stereo and optical flow training"};
  app.require_subcommand(1);

  std::string config_file;
  auto load = [&](CliConfig& c) {
    if (!config_file.empty()) c = load_config_file(config_file, c);
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic + domain-shifted dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  std::size_t gen_count = 200;
  int gen_w = 128, gen_h = 64, gen_disp = 16, gen_flow = 8;
  std::string gen_preset = "default";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "samples per domain");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--width", gen_w);
  gen->add_option("--height", gen_h);
  gen->add_option("--max-disp", gen_disp);
  gen->add_option("--max-flow", gen_flow);
  gen->add_option("--shift-preset", gen_preset, "none, default or strong");

  auto* train = app.add_subcommand("train", "run co-training; extra --key value pairs override the config");
  std::string data_dir, out_dir;
  train->add_option("--config", config_file, "key=value config file");
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", out_dir)->required();
  train->allow_extras();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the real-domain validation split");
  std::string checkpoint, d1_mode = "or", flow_valid = "all";
  bool oracle = false, csv = false;
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--d1-mode", d1_mode, "or | and");
  eval->add_option("--flow-valid", flow_valid, "all | noc");
  eval->add_flag("--oracle", oracle, "use ground truth as the prediction");
  eval->add_flag("--csv", csv, "print a CSV header and row");

  auto* tr = app.add_subcommand("translate", "translate one sample's left view");
  std::string in_sample, direction = "cycle";
  tr->add_option("--checkpoint", checkpoint)->required();
  tr->add_option("--in", in_sample)->required();
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--direction", direction)->check(CLI::IsMember({"a2b", "b2a", "cycle"}));

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every kernel and loss");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    CliConfig c;
    c.train.threads = worker_threads();
    if (*gen) {
      c.count = gen_count;
      c.scene.width = gen_w;
      c.scene.height = gen_h;
      c.scene.max_disp = gen_disp;
      c.scene.max_flow = gen_flow;
      c.shift_preset = gen_preset;
      return cmd_generate(gen_out, c, gen_seed);
    }
    if (*train) {
      load(c);
      apply_overrides(c, train->remaining());
      c.train.threads = std::min(c.train.threads, worker_threads());
      c.train.validate();
      return cmd_train(c, data_dir, out_dir);
    }
    if (*eval) {
      c.train.d1_mode = parse_threshold_mode(d1_mode);
      if (flow_valid != "all" && flow_valid != "noc") throw ConfigError("--flow-valid must be all or noc");
      c.train.flow_noc = flow_valid == "noc";
      return cmd_eval(c, checkpoint, data_dir, oracle, csv);
    }
    if (*tr) return cmd_translate(c, checkpoint, in_sample, out_dir, direction);
    if (*gc) return cmd_gradcheck(gc_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kData;
  } catch (const MetricError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
