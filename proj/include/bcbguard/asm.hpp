// Typed representation of the supported x86-64 instruction subset.
//
// Registers are tracked at 64-bit granularity: a narrower register is a view
// of its 64-bit parent, so two Registers alias iff their `gpr` fields match.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace bcbguard {

enum class Gpr : std::uint8_t {
  Rax, Rcx, Rdx, Rbx, Rsp, Rbp, Rsi, Rdi,
  R8, R9, R10, R11, R12, R13, R14, R15,
};
inline constexpr std::size_t kGprCount = 16;

constexpr std::size_t index_of(Gpr r) { return static_cast<std::size_t>(r); }

/// Bit set over the 16 general-purpose registers.
using GprSet = std::uint32_t;
constexpr GprSet bit(Gpr r) { return GprSet{1} << index_of(r); }

struct Register {
  Gpr gpr = Gpr::Rax;
  std::uint8_t width = 64;  // 8, 16, 32 or 64

  static constexpr Register q(Gpr g) { return {g, 64}; }
  friend bool operator==(const Register&, const Register&) = default;
};

constexpr bool valid_width(unsigned w) { return w == 8 || w == 16 || w == 32 || w == 64; }

/// Canonical AT&T name without the '%' sigil, e.g. "eax", "r8b".
std::string register_name(Register r);
std::optional<Register> parse_register(std::string_view name);
std::optional<Gpr> parse_gpr64(std::string_view name);

enum class CondCode : std::uint8_t { E, NE, L, LE, G, GE, B, BE, A, AE, S, NS, O, NO };
inline constexpr std::array<CondCode, 14> kAllCondCodes = {
    CondCode::E, CondCode::NE, CondCode::L,  CondCode::LE, CondCode::G,  CondCode::GE, CondCode::B,
    CondCode::BE, CondCode::A, CondCode::AE, CondCode::S,  CondCode::NS, CondCode::O,  CondCode::NO};

CondCode invert(CondCode c);
std::string_view cond_name(CondCode c);
/// Accepts canonical names and the usual aliases (z, nz, nge, c, ...).
std::optional<CondCode> parse_cond(std::string_view s);

struct Immediate {
  std::int64_t value = 0;
  friend bool operator==(const Immediate&, const Immediate&) = default;
};

struct MemoryRef {
  std::int64_t disp = 0;
  std::optional<Register> base;
  std::optional<Register> index;
  std::uint8_t scale = 1;
  friend bool operator==(const MemoryRef&, const MemoryRef&) = default;
};

struct LabelRef {
  std::string name;
  friend bool operator==(const LabelRef&, const LabelRef&) = default;
};

using Operand = std::variant<Immediate, Register, MemoryRef, LabelRef>;

enum class Opcode : std::uint8_t {
  Mov, Lea, Add, Sub, Imul, Xor, And, Or, Cmp, Test,
  Push, Pop, Lahf, Sahf, Pushf, Popf, Cmov, Jcc, Jmp, Call, Ret, Lfence, Nop,
};

std::string_view opcode_name(Opcode op);

struct SourceSpan {
  std::uint32_t line = 1;
  std::uint32_t column = 1;
  std::uint32_t length = 0;
};

struct Instruction {
  Opcode op = Opcode::Nop;
  std::optional<CondCode> cc;  // Jcc / Cmov only
  std::uint8_t width = 64;     // operand size in bits
  std::vector<Operand> operands;
  SourceSpan span{};
  bool inserted = false;  // produced by a hardening pass

  /// Structural equality: ignores span and the `inserted` marker.
  friend bool operator==(const Instruction& a, const Instruction& b) {
    return a.op == b.op && a.cc == b.cc && a.width == b.width && a.operands == b.operands;
  }
};

struct Label {
  std::string name;
  SourceSpan span{};
  friend bool operator==(const Label& a, const Label& b) { return a.name == b.name; }
};

using Item = std::variant<Label, Instruction>;

struct Function {
  std::string name;
  bool global = false;
  std::vector<Item> body;
  friend bool operator==(const Function&, const Function&) = default;
};

struct Program {
  std::string source_name;
  std::vector<Function> functions;

  const Function* find(std::string_view name) const;
  /// Structural equality over functions; the source name is metadata.
  friend bool operator==(const Program& a, const Program& b) { return a.functions == b.functions; }
};

// ---- instruction classification ----

bool is_label(const Item& item);
const Instruction* as_instruction(const Item& item);

bool reads_flags(const Instruction& inst);
bool writes_flags(const Instruction& inst);
bool is_terminator(const Instruction& inst);  // Jcc, Jmp, Call, Ret

/// The single memory operand, if any.
const MemoryRef* memory_operand(const Instruction& inst);
/// Registers used to form a memory address (base and index).
GprSet address_regs(const MemoryRef& m);

GprSet regs_read(const Instruction& inst);
GprSet regs_written(const Instruction& inst);
inline GprSet regs_mentioned(const Instruction& inst) { return regs_read(inst) | regs_written(inst); }

/// True for an instruction that reads memory through its source operand into
/// a register destination (plain loads and load-op forms).
bool is_register_load(const Instruction& inst);
/// Destination register of a register load.
std::optional<Register> load_destination(const Instruction& inst);

/// Jcc/Jmp/Call target label.
const std::string* branch_target(const Instruction& inst);

// ---- builders used by passes and tests ----

Instruction make_inst(Opcode op, std::vector<Operand> operands, std::uint8_t width = 64);
Instruction make_cmov(CondCode cc, Register src, Register dst);
Instruction make_jcc(CondCode cc, std::string target);
Instruction make_jmp(std::string target);

std::size_t count_instructions(const Function& fn);
std::size_t count_instructions(const Program& p);

}  // namespace bcbguard
