// Bounds-check-bypass hardening passes.
//
// All four passes share one insertion engine: instrumentation is collected
// per insertion point (before item k of a function body) and materialized in
// a single rebuild, so item indices computed on the input stay valid while a
// pass is planning.
#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bcbguard/asm.hpp"
#include "bcbguard/cfg.hpp"

namespace bcbguard {

enum class PassKind { Lfence, LahfDep, SlhCmov, ArgDep };

inline constexpr PassKind kAllPasses[] = {PassKind::Lfence, PassKind::LahfDep, PassKind::SlhCmov,
                                          PassKind::ArgDep};

/// "lfence", "lahf", "slh", "argdep".
std::string_view pass_name(PassKind k);
std::optional<PassKind> parse_pass_kind(std::string_view s);

struct PassConfig {
  PassKind kind = PassKind::Lfence;
  Register dep_register = Register::q(Gpr::R15);
  Register zero_register = Register::q(Gpr::R14);  // SlhCmov only
  bool instrument_both_edges = true;
  bool figure_fidelity = false;  // taken edge only

  /// Throws std::invalid_argument.
  void validate() const;
  bool taken_only() const { return figure_fidelity || !instrument_both_edges; }
  /// Registers the pass needs for itself.
  std::vector<Gpr> reserved() const;
};

struct SkippedBranch {
  std::string function;
  std::size_t item = 0;
  SourceSpan span{};
  std::string reason;
};

struct PassReport {
  std::size_t branches_instrumented = 0;
  std::size_t loads_instrumented = 0;
  std::size_t instructions_inserted = 0;
  std::size_t flags_conflicts_resolved = 0;
  std::size_t edges_instrumented = 0;
  std::size_t trampoline_jumps = 0;
  std::vector<SkippedBranch> skipped_branches;  // ArgDep only
};

struct Hardened {
  Program program;
  PassReport report;
};

class ReservedRegisterError : public std::runtime_error {
 public:
  explicit ReservedRegisterError(std::vector<ReservedViolation> v);
  const std::vector<ReservedViolation>& violations() const { return violations_; }

 private:
  std::vector<ReservedViolation> violations_;
};

Hardened harden_lfence(const Program& program, const PassConfig& config);
Hardened harden_lahf(const Program& program, const PassConfig& config);
Hardened harden_slh(const Program& program, const PassConfig& config);
Hardened harden_argdep(const Program& program, const PassConfig& config);
/// Dispatches on config.kind.
Hardened harden(const Program& program, const PassConfig& config);

/// Item indices of register loads reachable from a conditional branch of the
/// same function, in source order.
std::vector<std::size_t> select_hardened_loads(const Function& fn, const Cfg& cfg);

/// Prefix of trampoline labels created by the passes.
inline constexpr std::string_view kTrampolinePrefix = ".Lbcb_tramp_";

}  // namespace bcbguard
