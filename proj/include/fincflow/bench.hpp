#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fincflow/kernels.hpp"

namespace fincflow {

enum class Strategy { Reference, Wavefront, Dense };
enum class BenchTarget { Block, Unit };

const char* to_string(Strategy s);
const char* to_string(BenchTarget t);
Strategy parse_strategy(const std::string& s);
BenchTarget parse_target(const std::string& s);

inline constexpr std::size_t kBenchRuns = 11;
inline constexpr std::size_t kBenchDiscard = 1;
// Two-sided 95% quantile of Student's t with 9 degrees of freedom.
inline constexpr double kT95Df9 = 2.2621571627982053;

struct BenchCase {
  std::size_t n = 16;  // H = W
  std::size_t c = 4;
  std::size_t k = 3;
  std::size_t batch = 1;
  int workers = 1;
  Strategy strategy = Strategy::Wavefront;
  BenchTarget target = BenchTarget::Block;
};

struct BenchStats {
  double mean = 0.0;
  double std = 0.0;   // sample standard deviation (n - 1)
  double ci95 = 0.0;  // half-width, t(0.975, df) * std / sqrt(count)
};

// t quantile for the number of kept runs (df = kept - 1).
double t95(std::size_t kept);
BenchStats summarize(std::span<const double> kept);

struct BenchReport {
  BenchCase config;
  std::vector<double> runs;  // every timed run in order, seconds; the first is warm-up
  BenchStats stats;          // over runs[kBenchDiscard..]
  std::uint64_t phases = 0;
  std::uint64_t madds = 0;
  std::uint64_t max_element_madds = 0;

  std::span<const double> kept() const { return std::span<const double>(runs).subspan(kBenchDiscard); }
};

// Random masked kernels and input, then `runs` timed inversions (f32). Only
// the inversion call sits inside the clock. Dense is refused with
// TooLargeForDense above the dense cap and with InvalidConfig for units.
BenchReport run_bench(const BenchCase& bc, std::uint64_t seed, std::size_t runs = kBenchRuns);

// Summary CSV: n,c,k,batch,workers,strategy,mean_s,std_s,ci95_s,phases,madds
std::string csv_header();
std::string csv_row(const BenchReport& r);
// Raw CSV: one line per timed run, including the discarded one.
std::string raw_csv_header();
std::vector<std::string> raw_csv_rows(const BenchReport& r);

struct BenchRow {
  std::size_t n = 0, c = 0, k = 0, batch = 0;
  int workers = 0;
  std::string strategy;
  BenchStats stats;
  std::uint64_t phases = 0, madds = 0;
};

std::vector<BenchRow> parse_bench_csv(std::istream& in);

// Recomputes every summary row from the raw file's kept runs and returns the
// largest absolute discrepancy in mean, std or CI. Throws BadFormat when the
// raw file lacks runs for a summary row or its discard column is inconsistent.
double verify_bench_csv(std::istream& summary, std::istream& raw);

double median(std::vector<double> v);

// Gnuplot data: one block per (strategy, workers, c, k, batch) with columns
// "n mean_s ci95_s", blocks separated by two blank lines.
void write_gnuplot(std::ostream& out, const std::vector<BenchRow>& rows);

struct ScalingOutcome {
  bool skipped = false;
  bool pass = false;
  std::string detail;
};

// Reference (1 worker) vs wavefront (8 workers) timing ratios for n doubling
// 32 -> 64 -> 128 on medians of 10 kept runs. Skipped below 4 cores.
ScalingOutcome scaling_check(unsigned cores, std::uint64_t seed);

}  // namespace fincflow
