#include "fincflow/bench.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <tuple>

#include "fincflow/dense_oracle.hpp"
#include "fincflow/invconv.hpp"

namespace fincflow {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw BadFormat("number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw BadFormat("number '" + s + "'");
  }
}

std::uint64_t to_u64(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) throw BadFormat("integer '" + s + "'");
  return std::stoull(s);
}

using ConfigKey = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, int, std::string>;

template <typename Clock = std::chrono::steady_clock>
double seconds_since(typename Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Reference: return "reference";
    case Strategy::Wavefront: return "wavefront";
    case Strategy::Dense: return "dense";
  }
  return "?";
}

const char* to_string(BenchTarget t) { return t == BenchTarget::Block ? "block" : "unit"; }

Strategy parse_strategy(const std::string& s) {
  if (s == "reference") return Strategy::Reference;
  if (s == "wavefront") return Strategy::Wavefront;
  if (s == "dense") return Strategy::Dense;
  throw InvalidConfig("strategy must be reference, wavefront or dense, got '" + s + "'");
}

BenchTarget parse_target(const std::string& s) {
  if (s == "block") return BenchTarget::Block;
  if (s == "unit") return BenchTarget::Unit;
  throw InvalidConfig("target must be block or unit, got '" + s + "'");
}

double t95(std::size_t kept) {
  if (kept < 2) return 0.0;
  if (kept == kBenchRuns - kBenchDiscard) return kT95Df9;
  boost::math::students_t_distribution<double> dist(static_cast<double>(kept - 1));
  return boost::math::quantile(dist, 0.975);
}

BenchStats summarize(std::span<const double> kept) {
  BenchStats s;
  if (kept.empty()) return s;
  const double n = static_cast<double>(kept.size());
  s.mean = std::accumulate(kept.begin(), kept.end(), 0.0) / n;
  if (kept.size() < 2) return s;
  double ss = 0.0;
  for (double v : kept) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / (n - 1.0));
  s.ci95 = t95(kept.size()) * s.std / std::sqrt(n);
  return s;
}

BenchReport run_bench(const BenchCase& bc, std::uint64_t seed, std::size_t runs) {
  if (bc.n < 1 || bc.c < 1 || bc.k < 1 || bc.batch < 1) throw InvalidConfig("bench sizes must be >= 1");
  if (bc.workers < 1) throw InvalidConfig("workers must be >= 1");
  if (runs <= kBenchDiscard) throw InvalidConfig("need more runs than the discarded warm-up");
  if (bc.target == BenchTarget::Unit && bc.c % 4 != 0)
    throw IndivisibleChannels("a unit needs channels divisible by 4, got " + std::to_string(bc.c));

  std::mt19937_64 rng(seed);
  Tensor<float> y({bc.batch, bc.c, bc.n, bc.n});
  std::normal_distribution<float> normal;
  for (auto& v : y.data()) v = normal(rng);

  BenchReport report;
  report.config = bc;
  report.runs.reserve(runs);
  InversionStats stats;

  if (bc.strategy == Strategy::Dense) {
    if (bc.target == BenchTarget::Unit) throw InvalidConfig("dense strategy runs on single blocks only");
    if (bc.n * bc.n * bc.c > kDenseCap)
      throw TooLargeForDense(std::to_string(bc.n * bc.n * bc.c) + " unknowns exceed " + std::to_string(kDenseCap));
    const auto pcb = MaskedKernel<float>::random(bc.c, bc.k, Orientation::TL, rng);
    const ConvMatrix m = build_conv_matrix(pcb, bc.n, bc.n);
    std::vector<std::vector<double>> rhs;
    for (std::size_t i = 0; i < bc.batch; ++i) rhs.push_back(vectorize(y, i, Orientation::TL));
    for (std::size_t r = 0; r < runs; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& b : rhs) {
        auto x = solve_lower(m, b);
        (void)x;
      }
      report.runs.push_back(seconds_since(t0));
    }
    const std::uint64_t d = m.dim();
    report.phases = d * bc.batch;
    report.madds = d * (d - 1) / 2 * bc.batch;
    report.max_element_madds = d - 1;
    report.stats = summarize(report.kept());
    return report;
  }

  if (bc.target == BenchTarget::Block) {
    const auto pcb = MaskedKernel<float>::random(bc.c, bc.k, Orientation::TL, rng);
    for (std::size_t r = 0; r < runs; ++r) {
      InversionStats s;
      const auto t0 = std::chrono::steady_clock::now();
      if (bc.strategy == Strategy::Reference)
        pcb_invert_reference(y, pcb, &s);
      else
        pcb_invert_wavefront(y, pcb, bc.workers, &s);
      report.runs.push_back(seconds_since(t0));
      stats = s;
    }
  } else {
    const auto unit = FincFlowUnit<float>::random(bc.c, bc.k, rng);
    for (std::size_t r = 0; r < runs; ++r) {
      InversionStats s;
      const auto t0 = std::chrono::steady_clock::now();
      if (bc.strategy == Strategy::Reference)
        unit_invert_reference(y, unit, &s);
      else
        unit_invert(y, unit, bc.workers, &s);
      report.runs.push_back(seconds_since(t0));
      stats = s;
    }
  }
  report.phases = stats.phases;
  report.madds = stats.madds;
  report.max_element_madds = stats.max_element_madds;
  report.stats = summarize(report.kept());
  return report;
}

std::string csv_header() { return "n,c,k,batch,workers,strategy,mean_s,std_s,ci95_s,phases,madds"; }

namespace {

std::string config_prefix(const BenchCase& b) {
  std::string strategy = to_string(b.strategy);
  if (b.target == BenchTarget::Unit) strategy += "-unit";
  return std::to_string(b.n) + "," + std::to_string(b.c) + "," + std::to_string(b.k) + "," +
         std::to_string(b.batch) + "," + std::to_string(b.workers) + "," + strategy;
}

}  // namespace

std::string csv_row(const BenchReport& r) {
  return config_prefix(r.config) + "," + fmt(r.stats.mean) + "," + fmt(r.stats.std) + "," + fmt(r.stats.ci95) +
         "," + std::to_string(r.phases) + "," + std::to_string(r.madds);
}

std::string raw_csv_header() { return "n,c,k,batch,workers,strategy,run,seconds,kept"; }

std::vector<std::string> raw_csv_rows(const BenchReport& r) {
  std::vector<std::string> out;
  const std::string prefix = config_prefix(r.config);
  for (std::size_t i = 0; i < r.runs.size(); ++i)
    out.push_back(prefix + "," + std::to_string(i + 1) + "," + fmt(r.runs[i]) + "," + (i < kBenchDiscard ? "0" : "1"));
  return out;
}

std::vector<BenchRow> parse_bench_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) throw BadFormat("bench CSV header");
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11) throw BadFormat("bench CSV row: " + line);
    BenchRow r;
    r.n = to_u64(f[0]);
    r.c = to_u64(f[1]);
    r.k = to_u64(f[2]);
    r.batch = to_u64(f[3]);
    r.workers = static_cast<int>(to_u64(f[4]));
    r.strategy = f[5];
    r.stats = {to_double(f[6]), to_double(f[7]), to_double(f[8])};
    r.phases = to_u64(f[9]);
    r.madds = to_u64(f[10]);
    rows.push_back(r);
  }
  return rows;
}

double verify_bench_csv(std::istream& summary, std::istream& raw) {
  const auto rows = parse_bench_csv(summary);
  std::string line;
  if (!std::getline(raw, line) || line != raw_csv_header()) throw BadFormat("raw CSV header");
  std::map<ConfigKey, std::vector<std::pair<std::size_t, double>>> runs;
  std::map<ConfigKey, std::vector<bool>> kept_flags;
  while (std::getline(raw, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw BadFormat("raw CSV row: " + line);
    const ConfigKey key{to_u64(f[0]), to_u64(f[1]), to_u64(f[2]), to_u64(f[3]), static_cast<int>(to_u64(f[4])), f[5]};
    const std::size_t run = to_u64(f[6]);
    const bool kept = to_u64(f[8]) != 0;
    if (kept != (run > kBenchDiscard)) throw BadFormat("run " + std::to_string(run) + " has the wrong kept flag");
    if (kept) runs[key].emplace_back(run, to_double(f[7]));
  }
  double worst = 0.0;
  for (const auto& r : rows) {
    const ConfigKey key{r.n, r.c, r.k, r.batch, r.workers, r.strategy};
    auto it = runs.find(key);
    if (it == runs.end()) throw BadFormat("no raw runs for a summary row");
    auto v = it->second;
    std::sort(v.begin(), v.end());
    std::vector<double> times;
    for (const auto& [_, t] : v) times.push_back(t);
    const BenchStats s = summarize(times);
    worst = std::max({worst, std::abs(s.mean - r.stats.mean), std::abs(s.std - r.stats.std),
                      std::abs(s.ci95 - r.stats.ci95)});
  }
  return worst;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void write_gnuplot(std::ostream& out, const std::vector<BenchRow>& rows) {
  using Series = std::tuple<std::string, int, std::size_t, std::size_t, std::size_t>;
  std::map<Series, std::vector<const BenchRow*>> series;
  for (const auto& r : rows) series[{r.strategy, r.workers, r.c, r.k, r.batch}].push_back(&r);
  bool first = true;
  for (auto& [key, members] : series) {
    if (!first) out << "\n\n";
    first = false;
    const auto& [strategy, workers, c, k, batch] = key;
    out << "# " << strategy << " workers=" << workers << " c=" << c << " k=" << k << " batch=" << batch << "\n";
    out << "# n mean_s ci95_s\n";
    std::sort(members.begin(), members.end(), [](const BenchRow* a, const BenchRow* b) { return a->n < b->n; });
    for (const BenchRow* r : members) out << r->n << " " << fmt(r->stats.mean) << " " << fmt(r->stats.ci95) << "\n";
  }
}

ScalingOutcome scaling_check(unsigned cores, std::uint64_t seed) {
  ScalingOutcome out;
  if (cores < 4) {
    out.skipped = true;
    out.detail = "needs >= 4 cores, found " + std::to_string(cores);
    return out;
  }
  const std::size_t sizes[] = {32, 64, 128};
  double ref[3], wave[3];
  for (int i = 0; i < 3; ++i) {
    BenchCase bc{sizes[i], 4, 3, 1, 1, Strategy::Reference, BenchTarget::Block};
    auto r = run_bench(bc, seed);
    ref[i] = median({r.kept().begin(), r.kept().end()});
    bc.strategy = Strategy::Wavefront;
    bc.workers = 8;
    r = run_bench(bc, seed);
    wave[i] = median({r.kept().begin(), r.kept().end()});
  }
  out.pass = true;
  std::ostringstream detail;
  for (int i = 0; i < 2; ++i) {
    const double rr = ref[i + 1] / ref[i];
    const double wr = wave[i + 1] / wave[i];
    out.pass = out.pass && rr >= 3.5 && wr <= 3.5;
    detail << sizes[i] << "->" << sizes[i + 1] << ": reference x" << rr << ", wavefront x" << wr << "; ";
  }
  out.detail = detail.str();
  return out;
}

}  // namespace fincflow
