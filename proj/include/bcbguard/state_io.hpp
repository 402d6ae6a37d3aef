// JSON (schema 1) for initial states, timing, policies, reports and traces.
//
// Initial state:
//   {"schema": 1,
//    "registers": {"rdi": 5, "rsi": "0x10000"},
//    "memory": [{"address": "0x10000", "qwords": [1, 2]} | {"address": 64, "bytes": [1, 2]}],
//    "secret_regions": [{"start": "0x20000", "length": 64}],
//    "warm_lines": ["0x10000"],          // byte addresses; the line is address / 64
//    "step_limit": 100000}
//
// Timing: the TimingConfig field names, warm_lines as byte addresses.
// Policy: {"schema": 1, "kind": "never" | "always_wrong" | "chosen",
//          "chosen": [{"function": "victim", "ordinal": 0, "taken": true}]}
//
// Numbers may be JSON integers or strings ("0x1f", "-3", "42").
#pragma once

#include <optional>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "bcbguard/interp.hpp"
#include "bcbguard/passes.hpp"
#include "bcbguard/specsim.hpp"

namespace bcbguard {

inline constexpr int kSchemaVersion = 1;

class JsonInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InitState {
  MachineState state = default_state();
  std::set<std::uint64_t> warm_lines;  // line numbers
  std::optional<std::uint64_t> step_limit;
};

std::uint64_t json_u64(const nlohmann::json& j, const char* what);
std::int64_t json_i64(const nlohmann::json& j, const char* what);

InitState init_state_from_json(const nlohmann::json& j);
nlohmann::json init_state_to_json(const InitState& s);

/// Fields absent from `j` keep their value from `base`.
TimingConfig timing_from_json(const nlohmann::json& j, TimingConfig base = {});
nlohmann::json timing_to_json(const TimingConfig& t);

MispredictPolicy policy_from_json(const nlohmann::json& j);
nlohmann::json policy_to_json(const MispredictPolicy& p);

nlohmann::json event_to_json(const TraceEvent& e);
nlohmann::json pass_report_to_json(const PassReport& r);
nlohmann::json metrics_to_json(const SimMetrics& m);

std::string hex_string(std::uint64_t v);

}  // namespace bcbguard
