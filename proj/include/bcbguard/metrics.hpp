// Static/dynamic instruction accounting and benchmark reports.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bcbguard/passes.hpp"
#include "bcbguard/specsim.hpp"
#include "bcbguard/state_io.hpp"

namespace bcbguard {

/// Instructions in the program; labels are not counted.
std::size_t count_static(const Program& program);

struct BenchInput {
  std::string id;
  Program program;
  std::string entry;
  InitState init;
};

struct BenchResult {
  std::string program;
  std::string variant;  // "native" or a pass name
  bool ok = true;
  std::string error;
  std::uint64_t static_instructions = 0;
  std::uint64_t dynamic_instructions = 0;
  std::uint64_t cycles = 0;
  double ipc = 0.0;
  double overhead_vs_native = 0.0;        // cycles ratio
  double instr_increase_vs_native = 0.0;  // dynamic instruction ratio
};

struct BenchSummary {
  std::string variant;
  std::size_t programs = 0;
  double geomean_overhead = 0.0;
  double geomean_instr_increase = 0.0;
};

struct BenchReport {
  std::vector<BenchResult> rows;  // program-major, native first
  std::vector<BenchSummary> summary;
  bool any_failed = false;

  const BenchResult* find(std::string_view program, std::string_view variant) const;
  const BenchSummary* summary_for(std::string_view variant) const;
};

inline constexpr std::uint64_t kBenchStepLimit = 20'000'000;

BenchReport run_bench(const std::vector<BenchInput>& corpus, const std::vector<PassKind>& variants,
                      const TimingConfig& timing, const MispredictPolicy& policy, const PassConfig& base = {});

/// Order-independent: the values are sorted before accumulation.
double geomean(std::span<const double> values);

std::string bench_csv(const BenchReport& r);
std::string bench_json(const BenchReport& r);
std::string bench_markdown(const BenchReport& r);

}  // namespace bcbguard
