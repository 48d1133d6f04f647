#include "fincflow/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "fincflow/bench.hpp"
#include "fincflow/check.hpp"
#include "fincflow/checkpoint.hpp"
#include "fincflow/dense_oracle.hpp"
#include "fincflow/image_io.hpp"
#include "fincflow/train.hpp"

namespace fs = std::filesystem;

namespace fincflow {

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  int workers = 1;
  std::string out = ".";
};

struct TrainArgs {
  std::string data = "synthetic";
  std::size_t levels = 2, steps = 4, hidden = 64, kernel = 3;
  TrainConfig cfg;
  double grad_clip = 0.0;
};

struct SampleArgs {
  std::string checkpoint;
  std::size_t n = 4;
  double temperature = 1.0;
};

struct ReconstructArgs {
  std::string checkpoint, image, output;
};

struct BenchArgs {
  std::vector<std::size_t> sizes{16, 32, 64, 128};
  std::vector<std::size_t> channels{4};
  std::size_t k = 3, batch = 1, runs = kBenchRuns;
  std::vector<int> worker_counts;
  std::vector<std::string> strategies{"reference", "wavefront", "dense"};
  std::string target = "block";
};

struct PlotArgs {
  std::string csv, output;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value file; command-line flags take precedence");
  sub->add_option("--seed", c.seed, "RNG seed");
  sub->add_option("--dtype", c.dtype, "element type")->check(CLI::IsMember({"f32", "f64"}));
  sub->add_option("--workers", c.workers, "threads for wavefront inversion (default $FINCFLOW_WORKERS or 1)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "output directory");
}

void apply_config_file(CLI::App* sub, const std::string& path) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw InvalidConfig(path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty()) throw InvalidConfig(path + ": sections are not supported");
    if (item.name == "config") throw InvalidConfig(path + ": config files cannot name another config file");
    CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
    if (!opt) throw InvalidConfig(path + ": unknown key '" + item.name + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    if (item.inputs.size() != 1 && opt->get_items_expected_max() <= 1)
      throw InvalidConfig(path + ": key '" + item.name + "' takes one value");
    try {
      for (const auto& v : item.inputs) opt->add_result(v);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw InvalidConfig(path + ": " + item.name + ": " + e.what());
    }
  }
}

void finish_common(CLI::App* sub, Common& c) {
  if (!c.config.empty()) apply_config_file(sub, c.config);
  if (sub->get_option("--workers")->count() == 0) c.workers = default_workers();
  fs::create_directories(c.out);
}

std::uint8_t requantize(double v) { return static_cast<std::uint8_t>(std::clamp(std::floor(v * 256.0), 0.0, 255.0)); }

template <typename T>
Image to_image(const Tensor<T>& x, std::size_t n) {
  Image img{x.c(), x.h(), x.w(), std::vector<std::uint8_t>(x.c() * x.h() * x.w())};
  for (std::size_t c = 0; c < x.c(); ++c)
    for (std::size_t h = 0; h < x.h(); ++h)
      for (std::size_t w = 0; w < x.w(); ++w) img.at(c, h, w) = requantize(static_cast<double>(x(n, c, h, w)));
  return img;
}

// 1- and 3-channel images go out as PGM/PPM; anything else is tiled into one PGM.
fs::path write_image(const fs::path& stem, const Image& img) {
  if (img.channels == 3) {
    auto p = fs::path(stem).replace_extension(".ppm");
    write_pnm(p, img);
    return p;
  }
  auto p = fs::path(stem).replace_extension(".pgm");
  write_pnm(p, img.channels == 1 ? img : tile_channels(img));
  return p;
}

template <typename T>
int cmd_train(const Common& c, const TrainArgs& a, std::ostream& out) {
  const Dataset data = dataset_load(a.data);
  ModelConfig mc{a.levels, a.steps, data.channels, data.height, data.width, a.hidden, a.kernel};
  mc.validate();
  TrainConfig tc = a.cfg;
  tc.seed = c.seed;
  if (a.grad_clip > 0) tc.grad_clip = a.grad_clip;
  tc.validate();

  FlowModel<T> model(mc, c.seed);
  model.workers = c.workers;
  const fs::path csv_path = fs::path(c.out) / "metrics.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw Error("cannot open " + csv_path.string());
  const TrainSummary s = train(model, data, tc, &csv);
  const fs::path ckpt = fs::path(c.out) / "model.ckpt";
  save_checkpoint(model, ckpt);
  out << "trained " << s.steps << " steps on " << data.size() << " images; bpd " << s.first_bpd << " -> " << s.last_bpd
      << "\n"
      << "metrics: " << csv_path.string() << "\ncheckpoint: " << ckpt.string() << "\n";
  return 0;
}

template <typename T>
int cmd_sample(const Common& c, const SampleArgs& a, std::ostream& out) {
  if (a.temperature < 0) throw InvalidConfig("temperature must be >= 0");
  FlowModel<T> model = load_checkpoint<T>(a.checkpoint);
  model.workers = c.workers;
  const Tensor<T> x = model.sample(a.n, a.temperature, c.seed);
  for (std::size_t i = 0; i < a.n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu", i);
    out << write_image(fs::path(c.out) / name, to_image(x, i)).string() << "\n";
  }
  return 0;
}

template <typename T>
int cmd_reconstruct(const Common& c, const ReconstructArgs& a, std::ostream& out) {
  FlowModel<T> model = load_checkpoint<T>(a.checkpoint);
  model.workers = c.workers;
  const Dataset data = dataset_load(a.image);
  const ModelConfig& mc = model.config();
  if (data.channels != mc.channels || data.height != mc.height || data.width != mc.width)
    throw DimsMismatch(a.image + " is " + std::to_string(data.channels) + "x" + std::to_string(data.height) + "x" +
                       std::to_string(data.width) + ", model expects " + std::to_string(mc.channels) + "x" +
                       std::to_string(mc.height) + "x" + std::to_string(mc.width));
  const std::size_t index[] = {0};
  const Tensor<T> x = dequantize_midpoint<T>(data, index);
  const Tensor<T> back = model.inverse(model.forward(x).latents);
  const double err = max_abs_diff(x, back);
  const fs::path stem = a.output.empty() ? fs::path(c.out) / "reconstruction" : fs::path(a.output);
  const fs::path written = write_image(stem, to_image(back, 0));
  out << "max_abs_error " << err << "\n" << "wrote " << written.string() << "\n";
  return 0;
}

bool power_of_two_in_range(std::size_t n) { return n >= 8 && n <= 256 && (n & (n - 1)) == 0; }

int cmd_bench(const Common& c, const BenchArgs& a, std::ostream& out, std::ostream& err) {
  for (std::size_t n : a.sizes)
    if (!power_of_two_in_range(n)) throw InvalidConfig("bench sizes must be powers of two in [8, 256], got " + std::to_string(n));
  const BenchTarget target = parse_target(a.target);
  std::vector<Strategy> strategies;
  for (const auto& s : a.strategies) strategies.push_back(parse_strategy(s));
  const std::vector<int> worker_counts = a.worker_counts.empty() ? std::vector<int>{c.workers} : a.worker_counts;

  const fs::path summary_path = fs::path(c.out) / "bench.csv";
  const fs::path raw_path = fs::path(c.out) / "bench_raw.csv";
  std::ofstream summary(summary_path), raw(raw_path);
  if (!summary || !raw) throw Error("cannot write bench CSVs under " + c.out);
  summary << csv_header() << "\n";
  raw << raw_csv_header() << "\n";
  out << csv_header() << "\n";

  for (std::size_t n : a.sizes)
    for (std::size_t ch : a.channels)
      for (Strategy s : strategies) {
        if (s == Strategy::Dense && (target == BenchTarget::Unit || n * n * ch > kDenseCap)) {
          err << "note: dense skipped for n=" << n << " c=" << ch
              << (target == BenchTarget::Unit ? " (blocks only)" : " (above dense cap)") << "\n";
          continue;
        }
        const bool parallel = s == Strategy::Wavefront;
        for (int w : parallel ? worker_counts : std::vector<int>{1}) {
          BenchCase bc{n, ch, a.k, a.batch, w, s, target};
          const BenchReport r = run_bench(bc, c.seed, a.runs);
          summary << csv_row(r) << "\n";
          for (const auto& line : raw_csv_rows(r)) raw << line << "\n";
          out << csv_row(r) << "\n";
        }
      }
  out << "summary: " << summary_path.string() << "\nraw runs: " << raw_path.string() << "\n";
  return 0;
}

int cmd_plot(const Common& c, const PlotArgs& a, std::ostream& out) {
  std::ifstream in(a.csv);
  if (!in) throw Error("cannot open " + a.csv);
  const auto rows = parse_bench_csv(in);
  const fs::path path = a.output.empty() ? fs::path(c.out) / "bench.dat" : fs::path(a.output);
  std::ofstream dat(path);
  if (!dat) throw Error("cannot open " + path.string());
  write_gnuplot(dat, rows);
  out << "wrote " << path.string() << "\n";
  return 0;
}

}  // namespace

int default_workers() {
  const char* env = std::getenv("FINCFLOW_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 4096) throw InvalidConfig("FINCFLOW_WORKERS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<int>(v);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Invertible padded convolutions with wavefront-parallel inversion, in a multi-scale flow."};
  app.name("fincflow");
  app.require_subcommand(1);

  Common common;
  TrainArgs ta;
  SampleArgs sa;
  ReconstructArgs ra;
  CheckOptions co;
  bool no_model_checks = false;
  BenchArgs ba;
  PlotArgs pa;

  auto* train_cmd = app.add_subcommand("train", "train a model, write metrics.csv and model.ckpt");
  add_common(train_cmd, common);
  train_cmd->add_option("--data", ta.data, "'synthetic', a directory of PGM/PPM files, a .ften archive or one image");
  train_cmd->add_option("--levels", ta.levels, "L, multi-scale levels");
  train_cmd->add_option("--steps", ta.steps, "K, flow steps per level");
  train_cmd->add_option("--hidden", ta.hidden, "coupling net width");
  train_cmd->add_option("--kernel", ta.kernel, "padded convolution kernel size");
  train_cmd->add_option("--lr", ta.cfg.lr, "Adam learning rate");
  train_cmd->add_option("--decay", ta.cfg.decay, "learning-rate multiplier per epoch");
  train_cmd->add_flag("--decay-per-step", ta.cfg.decay_per_step, "apply --decay after every step instead");
  train_cmd->add_option("--grad-clip", ta.grad_clip, "clamp gradient elements to [-v, v] (0 = off)");
  train_cmd->add_option("--batch", ta.cfg.batch, "minibatch size");
  train_cmd->add_option("--epochs", ta.cfg.epochs, "passes over the data");
  train_cmd->add_option("--max-steps", ta.cfg.max_steps, "stop after this many steps (0 = no cap)");

  auto* sample_cmd = app.add_subcommand("sample", "draw images from a checkpoint");
  add_common(sample_cmd, common);
  sample_cmd->add_option("--checkpoint", sa.checkpoint)->required();
  sample_cmd->add_option("--n", sa.n, "number of images");
  sample_cmd->add_option("--temperature", sa.temperature, "latent standard deviation scale");

  auto* recon_cmd = app.add_subcommand("reconstruct", "run an image forward and back through a checkpoint");
  add_common(recon_cmd, common);
  recon_cmd->add_option("--checkpoint", ra.checkpoint)->required();
  recon_cmd->add_option("--image", ra.image, "PGM/PPM image or .ften archive (first image is used)")->required();
  recon_cmd->add_option("--output", ra.output, "output path without extension (default OUT/reconstruction)");

  auto* check_cmd = app.add_subcommand("check", "run the correctness oracles; exit 1 on any failure");
  add_common(check_cmd, common);
  check_cmd->add_option("--height", co.height);
  check_cmd->add_option("--width", co.width);
  check_cmd->add_option("--channels", co.channels);
  check_cmd->add_option("--k", co.k, "kernel size");
  check_cmd->add_option("--batch", co.batch);
  check_cmd->add_flag("--inject-fault", co.inject_fault, "set one anchor weight to 1.1");
  check_cmd->add_flag("--no-model-checks", no_model_checks, "skip the gradient and Jacobian checks");

  auto* bench_cmd = app.add_subcommand("bench", "time inversions; write bench.csv and bench_raw.csv");
  add_common(bench_cmd, common);
  bench_cmd->add_option("--sizes", ba.sizes, "H = W values, powers of two in [8, 256]")->delimiter(',');
  bench_cmd->add_option("--channels", ba.channels)->delimiter(',');
  bench_cmd->add_option("--k", ba.k, "kernel size");
  bench_cmd->add_option("--batch", ba.batch);
  bench_cmd->add_option("--worker-counts", ba.worker_counts, "wavefront worker counts (default --workers)")
      ->delimiter(',');
  bench_cmd->add_option("--strategies", ba.strategies, "reference, wavefront, dense")->delimiter(',');
  bench_cmd->add_option("--target", ba.target, "block or unit");
  bench_cmd->add_option("--runs", ba.runs, "timed runs including the discarded first");

  auto* plot_cmd = app.add_subcommand("plot", "turn bench.csv into a gnuplot data file");
  add_common(plot_cmd, common);
  plot_cmd->add_option("--csv", pa.csv, "summary CSV from bench")->required();
  plot_cmd->add_option("--output", pa.output, "data file (default OUT/bench.dat)");

  std::vector<std::string> argv_store{"fincflow"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    finish_common(sub, common);
    bool f64 = common.dtype == "f64";
    if (sub->get_option("--dtype")->count() == 0 && (sub == sample_cmd || sub == recon_cmd))
      f64 = read_checkpoint_info(sub == sample_cmd ? sa.checkpoint : ra.checkpoint).dtype == Dtype::F64;
    if (sub == train_cmd) return f64 ? cmd_train<double>(common, ta, out) : cmd_train<float>(common, ta, out);
    if (sub == sample_cmd) return f64 ? cmd_sample<double>(common, sa, out) : cmd_sample<float>(common, sa, out);
    if (sub == recon_cmd)
      return f64 ? cmd_reconstruct<double>(common, ra, out) : cmd_reconstruct<float>(common, ra, out);
    if (sub == check_cmd) {
      co.workers = common.workers;
      co.seed = common.seed;
      co.model_checks = !no_model_checks;
      const auto results = run_checks(co);
      print_check_table(out, results);
      const bool ok = all_passed(results);
      out << (ok ? "all checks passed" : "FAILED") << "\n";
      return ok ? 0 : 1;
    }
    if (sub == bench_cmd) return cmd_bench(common, ba, out, err);
    if (sub == plot_cmd) return cmd_plot(common, pa, out);
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace fincflow
