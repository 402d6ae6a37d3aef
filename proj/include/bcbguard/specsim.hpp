// Speculative dataflow timing simulator with taint-based leak detection.
//
// The committed path is executed with interp's Cpu::step. At every
// mispredicted conditional branch the wrong path is executed on a copy of
// the machine and timing state until the branch resolves; its memory events
// stay in the trace (squashed) and its loads warm the cache.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "bcbguard/interp.hpp"

namespace bcbguard {

struct TimingConfig {
  unsigned issue_width = 4;
  unsigned lat_alu = 1;
  unsigned lat_load_warm = 4;
  unsigned lat_load_cold = 200;
  unsigned branch_resolve_extra = 1;
  unsigned max_spec_depth = 4;
  unsigned rob_size = 192;
  std::set<std::uint64_t> warm_lines;  // line numbers (address / 64)

  /// Throws std::invalid_argument.
  void validate() const;
};

/// A conditional branch identified by its function and its ordinal among
/// that function's Jcc instructions (passes never add or remove Jcc).
struct BranchSite {
  std::string function;
  std::size_t ordinal = 0;
  friend auto operator<=>(const BranchSite&, const BranchSite&) = default;
};

struct MispredictPolicy {
  enum class Kind { Never, AlwaysWrong, Chosen };
  Kind kind = Kind::Never;
  std::map<BranchSite, bool> chosen;  // predicted taken?

  static MispredictPolicy never() { return {}; }
  static MispredictPolicy always_wrong() { return {Kind::AlwaysWrong, {}}; }
  static MispredictPolicy choose(std::map<BranchSite, bool> c) { return {Kind::Chosen, std::move(c)}; }
};

std::string_view policy_kind_name(MispredictPolicy::Kind k);
std::optional<MispredictPolicy::Kind> parse_policy_kind(std::string_view s);

/// All Jcc sites of a program in source order.
std::vector<BranchSite> branch_sites(const Program& program);

struct TraceEvent {
  std::uint64_t issue_cycle = 0;
  MemKind kind = MemKind::Load;
  std::uint64_t address = 0;
  std::uint64_t line = 0;
  unsigned width = 8;
  bool speculative = false;  // executed on a mispredicted path
  bool squashed = false;
  bool address_taint = false;
  Pc pc{};
};

struct SpecTrace {
  std::vector<TraceEvent> events;
};

struct LeakReport {
  std::vector<TraceEvent> leaks;
  bool leaked = false;
};

struct SimMetrics {
  std::uint64_t cycles = 0;
  std::uint64_t dynamic_instructions = 0;
  double ipc = 0.0;
};

struct MispredictRecord {
  BranchSite site;
  std::uint64_t resolve_cycle = 0;
  std::optional<std::uint64_t> first_speculative_issue;
  std::uint64_t window() const {
    return first_speculative_issue ? resolve_cycle - *first_speculative_issue : 0;
  }
};

struct ScheduleEntry {
  Pc pc{};
  std::uint64_t ready = 0;
  std::uint64_t issue = 0;
  std::uint64_t complete = 0;
};

struct SimOptions {
  std::uint64_t step_limit = 1'000'000;
  bool record_schedule = false;  // committed instructions only
};

struct SimResult {
  SpecTrace trace;
  LeakReport leaks;
  SimMetrics metrics;
  MachineState final;
  std::vector<MispredictRecord> mispredicts;
  std::vector<ScheduleEntry> schedule;
};

SimResult simulate(const Program& program, std::string_view entry, const MachineState& init,
                   const TimingConfig& timing, const MispredictPolicy& policy, const SimOptions& options = {});

/// resolve − first speculative issue for the first misprediction of `site`;
/// 0 when nothing issued speculatively. Throws std::invalid_argument when the
/// site does not exist or never mispredicts.
std::uint64_t speculation_window(const Program& program, std::string_view entry, const BranchSite& site,
                                 const MachineState& init, const TimingConfig& timing,
                                 const MispredictPolicy& policy);

}  // namespace bcbguard
