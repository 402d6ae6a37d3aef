#include "bcbguard/asm.hpp"

#include <algorithm>

namespace bcbguard {

namespace {

struct RegNames {
  const char* q;
  const char* d;
  const char* w;
  const char* b;
};

constexpr std::array<RegNames, kGprCount> kRegNames = {{
    {"rax", "eax", "ax", "al"},     {"rcx", "ecx", "cx", "cl"},     {"rdx", "edx", "dx", "dl"},
    {"rbx", "ebx", "bx", "bl"},     {"rsp", "esp", "sp", "spl"},    {"rbp", "ebp", "bp", "bpl"},
    {"rsi", "esi", "si", "sil"},    {"rdi", "edi", "di", "dil"},    {"r8", "r8d", "r8w", "r8b"},
    {"r9", "r9d", "r9w", "r9b"},    {"r10", "r10d", "r10w", "r10b"}, {"r11", "r11d", "r11w", "r11b"},
    {"r12", "r12d", "r12w", "r12b"}, {"r13", "r13d", "r13w", "r13b"}, {"r14", "r14d", "r14w", "r14b"},
    {"r15", "r15d", "r15w", "r15b"},
}};

constexpr std::array<std::string_view, 14> kCondNames = {"e", "ne", "l", "le", "g", "ge", "b",
                                                          "be", "a", "ae", "s", "ns", "o", "no"};

}  // namespace

std::string register_name(Register r) {
  const auto& n = kRegNames[index_of(r.gpr)];
  switch (r.width) {
    case 8: return n.b;
    case 16: return n.w;
    case 32: return n.d;
    default: return n.q;
  }
}

std::optional<Register> parse_register(std::string_view name) {
  for (std::size_t i = 0; i < kGprCount; ++i) {
    const auto g = static_cast<Gpr>(i);
    const auto& n = kRegNames[i];
    if (name == n.q) return Register{g, 64};
    if (name == n.d) return Register{g, 32};
    if (name == n.w) return Register{g, 16};
    if (name == n.b) return Register{g, 8};
  }
  return std::nullopt;
}

std::optional<Gpr> parse_gpr64(std::string_view name) {
  if (!name.empty() && name.front() == '%') name.remove_prefix(1);
  auto r = parse_register(name);
  if (!r || r->width != 64) return std::nullopt;
  return r->gpr;
}

CondCode invert(CondCode c) {
  switch (c) {
    case CondCode::E: return CondCode::NE;
    case CondCode::NE: return CondCode::E;
    case CondCode::L: return CondCode::GE;
    case CondCode::GE: return CondCode::L;
    case CondCode::LE: return CondCode::G;
    case CondCode::G: return CondCode::LE;
    case CondCode::B: return CondCode::AE;
    case CondCode::AE: return CondCode::B;
    case CondCode::BE: return CondCode::A;
    case CondCode::A: return CondCode::BE;
    case CondCode::S: return CondCode::NS;
    case CondCode::NS: return CondCode::S;
    case CondCode::O: return CondCode::NO;
    case CondCode::NO: return CondCode::O;
  }
  return c;
}

std::string_view cond_name(CondCode c) { return kCondNames[static_cast<std::size_t>(c)]; }

std::optional<CondCode> parse_cond(std::string_view s) {
  for (std::size_t i = 0; i < kCondNames.size(); ++i)
    if (s == kCondNames[i]) return static_cast<CondCode>(i);
  struct Alias {
    std::string_view name;
    CondCode cc;
  };
  static constexpr Alias kAliases[] = {
      {"z", CondCode::E},   {"nz", CondCode::NE}, {"nge", CondCode::L}, {"ng", CondCode::LE},
      {"nle", CondCode::G}, {"nl", CondCode::GE}, {"c", CondCode::B},   {"nae", CondCode::B},
      {"na", CondCode::BE}, {"nbe", CondCode::A}, {"nb", CondCode::AE}, {"nc", CondCode::AE},
  };
  for (const auto& a : kAliases)
    if (s == a.name) return a.cc;
  return std::nullopt;
}

std::string_view opcode_name(Opcode op) {
  switch (op) {
    case Opcode::Mov: return "mov";
    case Opcode::Lea: return "lea";
    case Opcode::Add: return "add";
    case Opcode::Sub: return "sub";
    case Opcode::Imul: return "imul";
    case Opcode::Xor: return "xor";
    case Opcode::And: return "and";
    case Opcode::Or: return "or";
    case Opcode::Cmp: return "cmp";
    case Opcode::Test: return "test";
    case Opcode::Push: return "push";
    case Opcode::Pop: return "pop";
    case Opcode::Lahf: return "lahf";
    case Opcode::Sahf: return "sahf";
    case Opcode::Pushf: return "pushf";
    case Opcode::Popf: return "popf";
    case Opcode::Cmov: return "cmov";
    case Opcode::Jcc: return "j";
    case Opcode::Jmp: return "jmp";
    case Opcode::Call: return "call";
    case Opcode::Ret: return "ret";
    case Opcode::Lfence: return "lfence";
    case Opcode::Nop: return "nop";
  }
  return "?";
}

const Function* Program::find(std::string_view name) const {
  for (const auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}

bool is_label(const Item& item) { return std::holds_alternative<Label>(item); }

const Instruction* as_instruction(const Item& item) { return std::get_if<Instruction>(&item); }

bool reads_flags(const Instruction& inst) {
  switch (inst.op) {
    case Opcode::Jcc:
    case Opcode::Cmov:
    case Opcode::Lahf:
    case Opcode::Pushf: return true;
    default: return false;
  }
}

bool writes_flags(const Instruction& inst) {
  switch (inst.op) {
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Imul:
    case Opcode::Xor:
    case Opcode::And:
    case Opcode::Or:
    case Opcode::Cmp:
    case Opcode::Test:
    case Opcode::Sahf:
    case Opcode::Popf:
    case Opcode::Call:  // callee clobbers
      return true;
    default: return false;
  }
}

bool is_terminator(const Instruction& inst) {
  switch (inst.op) {
    case Opcode::Jcc:
    case Opcode::Jmp:
    case Opcode::Call:
    case Opcode::Ret: return true;
    default: return false;
  }
}

const MemoryRef* memory_operand(const Instruction& inst) {
  for (const auto& op : inst.operands)
    if (const auto* m = std::get_if<MemoryRef>(&op)) return m;
  return nullptr;
}

GprSet address_regs(const MemoryRef& m) {
  GprSet s = 0;
  if (m.base) s |= bit(m.base->gpr);
  if (m.index) s |= bit(m.index->gpr);
  return s;
}

namespace {

GprSet operand_read(const Operand& op) {
  if (const auto* r = std::get_if<Register>(&op)) return bit(r->gpr);
  if (const auto* m = std::get_if<MemoryRef>(&op)) return address_regs(*m);
  return 0;
}

// Address registers of a destination operand are read; a register
// destination narrower than 32 bits merges with its old value.
GprSet dest_read(const Operand& op, bool reads_old_value) {
  if (const auto* r = std::get_if<Register>(&op))
    return (reads_old_value || r->width < 32) ? bit(r->gpr) : 0;
  if (const auto* m = std::get_if<MemoryRef>(&op)) return address_regs(*m);
  return 0;
}

GprSet dest_written(const Operand& op) {
  if (const auto* r = std::get_if<Register>(&op)) return bit(r->gpr);
  return 0;
}

}  // namespace

GprSet regs_read(const Instruction& inst) {
  const auto& ops = inst.operands;
  switch (inst.op) {
    case Opcode::Mov:
    case Opcode::Lea:
      if (ops.size() != 2) return 0;
      return operand_read(ops[0]) | dest_read(ops[1], false);
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Imul:
    case Opcode::Xor:
    case Opcode::And:
    case Opcode::Or:
    case Opcode::Cmov:
    case Opcode::Cmp:
    case Opcode::Test:
      if (ops.size() != 2) return 0;
      return operand_read(ops[0]) | dest_read(ops[1], true);
    case Opcode::Push:
      return bit(Gpr::Rsp) | (ops.empty() ? 0 : operand_read(ops[0]));
    case Opcode::Pop:
      return bit(Gpr::Rsp) | (ops.empty() ? 0 : dest_read(ops[0], false));
    case Opcode::Lahf:
    case Opcode::Sahf: return bit(Gpr::Rax);
    case Opcode::Pushf:
    case Opcode::Popf:
    case Opcode::Call:
    case Opcode::Ret: return bit(Gpr::Rsp);
    case Opcode::Jcc:
    case Opcode::Jmp:
    case Opcode::Lfence:
    case Opcode::Nop: return 0;
  }
  return 0;
}

GprSet regs_written(const Instruction& inst) {
  const auto& ops = inst.operands;
  switch (inst.op) {
    case Opcode::Mov:
    case Opcode::Lea:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Imul:
    case Opcode::Xor:
    case Opcode::And:
    case Opcode::Or:
    case Opcode::Cmov:
      return ops.size() == 2 ? dest_written(ops[1]) : 0;
    case Opcode::Pop:
      return bit(Gpr::Rsp) | (ops.empty() ? 0 : dest_written(ops[0]));
    case Opcode::Lahf: return bit(Gpr::Rax);
    case Opcode::Push:
    case Opcode::Pushf:
    case Opcode::Popf:
    case Opcode::Call:
    case Opcode::Ret: return bit(Gpr::Rsp);
    default: return 0;
  }
}

bool is_register_load(const Instruction& inst) {
  switch (inst.op) {
    case Opcode::Mov:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Imul:
    case Opcode::Xor:
    case Opcode::And:
    case Opcode::Or:
    case Opcode::Cmov:
      return inst.operands.size() == 2 && std::holds_alternative<MemoryRef>(inst.operands[0]) &&
             std::holds_alternative<Register>(inst.operands[1]);
    default: return false;
  }
}

std::optional<Register> load_destination(const Instruction& inst) {
  if (!is_register_load(inst)) return std::nullopt;
  return std::get<Register>(inst.operands[1]);
}

const std::string* branch_target(const Instruction& inst) {
  if (inst.op != Opcode::Jcc && inst.op != Opcode::Jmp && inst.op != Opcode::Call) return nullptr;
  if (inst.operands.size() != 1) return nullptr;
  if (const auto* l = std::get_if<LabelRef>(&inst.operands[0])) return &l->name;
  return nullptr;
}

Instruction make_inst(Opcode op, std::vector<Operand> operands, std::uint8_t width) {
  Instruction i;
  i.op = op;
  i.width = width;
  i.operands = std::move(operands);
  return i;
}

Instruction make_cmov(CondCode cc, Register src, Register dst) {
  auto i = make_inst(Opcode::Cmov, {src, dst}, dst.width);
  i.cc = cc;
  return i;
}

Instruction make_jcc(CondCode cc, std::string target) {
  auto i = make_inst(Opcode::Jcc, {LabelRef{std::move(target)}});
  i.cc = cc;
  return i;
}

Instruction make_jmp(std::string target) { return make_inst(Opcode::Jmp, {LabelRef{std::move(target)}}); }

std::size_t count_instructions(const Function& fn) {
  return static_cast<std::size_t>(
      std::count_if(fn.body.begin(), fn.body.end(), [](const Item& it) { return !is_label(it); }));
}

std::size_t count_instructions(const Program& p) {
  std::size_t n = 0;
  for (const auto& f : p.functions) n += count_instructions(f);
  return n;
}

}  // namespace bcbguard
