// Architectural interpreter with per-word taint tracking.
//
// The same `Cpu::step` drives both the reference interpreter and the
// committed path of the speculative simulator, so the two cannot disagree on
// instruction semantics.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "bcbguard/asm.hpp"

namespace bcbguard {

class ExecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Flags {
  bool cf = false, pf = false, af = false, zf = false, sf = false, of = false;

  std::uint64_t to_rflags() const;
  static Flags from_rflags(std::uint64_t v);
  friend bool operator==(const Flags&, const Flags&) = default;
};

bool condition_holds(CondCode cc, const Flags& f);

struct SecretRegion {
  std::uint64_t start = 0;
  std::uint64_t length = 0;
  bool contains(std::uint64_t addr) const { return addr - start < length; }
};

inline constexpr std::uint64_t word_of(std::uint64_t addr) { return addr & ~std::uint64_t{7}; }
inline constexpr std::uint64_t line_of(std::uint64_t addr) { return addr >> 6; }

/// Sparse byte-addressed memory. Unwritten bytes read as zero; taint is kept
/// per 8-byte-aligned word and defaults to "inside a secret region".
class Memory {
 public:
  std::uint64_t read(std::uint64_t addr, unsigned bytes) const;
  void write(std::uint64_t addr, std::uint64_t value, unsigned bytes);
  /// Preload without touching taint (taint stays at its region default).
  void preload(std::uint64_t addr, std::span<const std::uint8_t> bytes);

  bool word_taint(std::uint64_t addr) const;
  /// Taint of an access of `bytes` bytes starting at `addr`.
  bool range_taint(std::uint64_t addr, unsigned bytes) const;
  void set_range_taint(std::uint64_t addr, unsigned bytes, bool t);

  bool in_secret(std::uint64_t addr) const;
  void add_secret(SecretRegion r) { secrets_.push_back(r); }
  const std::vector<SecretRegion>& secrets() const { return secrets_; }

  const std::map<std::uint64_t, std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::map<std::uint64_t, std::uint8_t> bytes_;
  std::unordered_map<std::uint64_t, bool> taint_;
  std::vector<SecretRegion> secrets_;
};

struct MachineState {
  std::array<std::uint64_t, kGprCount> gpr{};
  Flags flags{};
  Memory memory;
  std::array<bool, kGprCount> reg_taint{};
  bool flags_taint = false;

  std::uint64_t& reg(Gpr g) { return gpr[index_of(g)]; }
  std::uint64_t reg(Gpr g) const { return gpr[index_of(g)]; }
};

inline constexpr std::uint64_t kDefaultStackTop = 0x7fff'f000;

/// A state with RSP at the default stack top and everything else zero.
MachineState default_state();

enum class MemKind { Load, Store };

struct MemAccess {
  MemKind kind = MemKind::Load;
  std::uint64_t address = 0;
  unsigned width = 8;  // bytes
  bool address_taint = false;
};

struct MemEvent {
  MemKind kind = MemKind::Load;
  std::uint64_t address = 0;
  unsigned width = 8;
  bool address_taint = false;
  bool inserted = false;  // issued by a pass-inserted instruction
  friend bool operator==(const MemEvent&, const MemEvent&) = default;
};

/// Position of an instruction: function index and item index.
struct Pc {
  std::size_t function = 0;
  std::size_t item = 0;
  friend bool operator==(const Pc&, const Pc&) = default;
};

struct StepInfo {
  std::array<MemAccess, 2> accesses{};
  unsigned access_count = 0;
  bool branch_taken = false;  // Jcc only
  bool halted = false;
  Pc next{};
};

/// Resolved program: label and call targets mapped to positions.
class Cpu {
 public:
  explicit Cpu(const Program& program);

  const Program& program() const { return program_; }
  Pc entry(std::string_view function) const;
  /// Skips labels; throws ExecError when execution runs off a function.
  Pc normalize(Pc pc) const;
  const Instruction& at(Pc pc) const;
  /// Position of a label or function name.
  Pc label(std::string_view name) const;

  /// Executes the instruction at `pc` (which must be normalized).
  /// `call_depth` tracks CALL/RET nesting; RET at depth 0 halts.
  StepInfo step(Pc pc, MachineState& s, unsigned& call_depth) const;

  static std::uint64_t encode_return(Pc pc);

 private:
  const Program& program_;
  std::unordered_map<std::string, Pc> labels_;
  std::unordered_map<std::string, std::size_t> functions_;
};

struct ExecOptions {
  std::uint64_t step_limit = 1'000'000;
  bool record_trace = false;
};

struct ExecResult {
  MachineState final;
  std::uint64_t dynamic_instructions = 0;
  std::vector<MemEvent> mem_events;
  std::vector<Pc> trace;  // filled when ExecOptions::record_trace
};

ExecResult exec(const Program& program, std::string_view entry, const MachineState& init,
                const ExecOptions& options = {});

/// Architecturally observable outcome used to compare a program with its
/// hardened form: registers other than `ignored`, the memory image outside
/// the dead stack area below the final RSP, and the memory events issued by
/// original (non-inserted) instructions.
struct Observable {
  std::array<std::optional<std::uint64_t>, kGprCount> gpr{};
  std::map<std::uint64_t, std::uint8_t> memory;
  std::vector<MemEvent> mem_events;
  friend bool operator==(const Observable&, const Observable&) = default;
};

inline constexpr std::uint64_t kDeadStackWindow = 64 * 1024;

Observable observe(const ExecResult& r, GprSet ignored);

}  // namespace bcbguard
