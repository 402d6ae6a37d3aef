#include "bcbguard/interp.hpp"

#include <cstdio>

namespace bcbguard {

namespace {

constexpr std::uint64_t width_mask(unsigned w) { return w >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << w) - 1; }

constexpr std::int64_t sign_extend(std::uint64_t v, unsigned w) {
  if (w >= 64) return static_cast<std::int64_t>(v);
  const unsigned shift = 64 - w;
  return static_cast<std::int64_t>(v << shift) >> shift;
}

bool sign_bit(std::uint64_t v, unsigned w) { return (v >> (w - 1)) & 1u; }

bool even_parity(std::uint64_t v) { return (__builtin_popcountll(v & 0xff) & 1) == 0; }

void set_result_flags(Flags& f, std::uint64_t r, unsigned w) {
  f.sf = sign_bit(r, w);
  f.zf = r == 0;
  f.pf = even_parity(r);
}

constexpr std::uint64_t kCodeTag = 0x00c0de0000000000ull;
constexpr std::uint64_t kCodeTagMask = 0xffff000000000000ull | kCodeTag;

struct Value {
  std::uint64_t v = 0;
  bool taint = false;
};

class Executor {
 public:
  Executor(MachineState& s, StepInfo& info) : s_(s), info_(info) {}

  std::uint64_t address(const MemoryRef& m, bool& taint) const {
    std::uint64_t a = static_cast<std::uint64_t>(m.disp);
    taint = false;
    if (m.base) {
      a += s_.reg(m.base->gpr);
      taint = taint || s_.reg_taint[index_of(m.base->gpr)];
    }
    if (m.index) {
      a += s_.reg(m.index->gpr) * m.scale;
      taint = taint || s_.reg_taint[index_of(m.index->gpr)];
    }
    return a;
  }

  void record(MemKind kind, std::uint64_t addr, unsigned bytes, bool addr_taint) {
    if (info_.access_count < info_.accesses.size())
      info_.accesses[info_.access_count++] = {kind, addr, bytes, addr_taint};
  }

  Value load(std::uint64_t addr, unsigned bytes, bool addr_taint) {
    record(MemKind::Load, addr, bytes, addr_taint);
    return {s_.memory.read(addr, bytes), s_.memory.range_taint(addr, bytes) || addr_taint};
  }

  void store(std::uint64_t addr, unsigned bytes, Value v, bool addr_taint) {
    record(MemKind::Store, addr, bytes, addr_taint);
    s_.memory.write(addr, v.v, bytes);
    s_.memory.set_range_taint(addr, bytes, v.taint || addr_taint);
  }

  Value read(const Operand& op, unsigned w) {
    if (const auto* i = std::get_if<Immediate>(&op))
      return {static_cast<std::uint64_t>(i->value) & width_mask(w), false};
    if (const auto* r = std::get_if<Register>(&op))
      return {s_.reg(r->gpr) & width_mask(w), s_.reg_taint[index_of(r->gpr)]};
    const auto& m = std::get<MemoryRef>(op);
    bool at = false;
    const auto addr = address(m, at);
    return load(addr, w / 8, at);
  }

  void write(const Operand& op, unsigned w, Value v) {
    if (const auto* r = std::get_if<Register>(&op)) {
      write_reg(r->gpr, w, v);
      return;
    }
    const auto& m = std::get<MemoryRef>(op);
    bool at = false;
    const auto addr = address(m, at);
    store(addr, w / 8, {v.v & width_mask(w), v.taint}, at);
  }

  void write_reg(Gpr g, unsigned w, Value v) {
    auto& slot = s_.reg(g);
    auto& t = s_.reg_taint[index_of(g)];
    if (w >= 32) {
      slot = v.v & width_mask(w);
      t = v.taint;
    } else {
      slot = (slot & ~width_mask(w)) | (v.v & width_mask(w));
      t = t || v.taint;
    }
  }

  void check_stack() const {
    if (s_.reg(Gpr::Rsp) & 7)
      throw ExecError("misaligned stack pointer 0x" + hex(s_.reg(Gpr::Rsp)));
  }

  void push(Value v) {
    check_stack();
    s_.reg(Gpr::Rsp) -= 8;
    store(s_.reg(Gpr::Rsp), 8, v, s_.reg_taint[index_of(Gpr::Rsp)]);
  }

  Value pop() {
    check_stack();
    const auto v = load(s_.reg(Gpr::Rsp), 8, s_.reg_taint[index_of(Gpr::Rsp)]);
    s_.reg(Gpr::Rsp) += 8;
    return v;
  }

  static std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  MachineState& s_;
  StepInfo& info_;
};

}  // namespace

std::uint64_t Flags::to_rflags() const {
  return (cf ? 1u : 0u) | 2u | (pf ? 1u << 2 : 0u) | (af ? 1u << 4 : 0u) | (zf ? 1u << 6 : 0u) |
         (sf ? 1u << 7 : 0u) | (of ? 1u << 11 : 0u);
}

Flags Flags::from_rflags(std::uint64_t v) {
  Flags f;
  f.cf = v & 1u;
  f.pf = (v >> 2) & 1u;
  f.af = (v >> 4) & 1u;
  f.zf = (v >> 6) & 1u;
  f.sf = (v >> 7) & 1u;
  f.of = (v >> 11) & 1u;
  return f;
}

bool condition_holds(CondCode cc, const Flags& f) {
  switch (cc) {
    case CondCode::E: return f.zf;
    case CondCode::NE: return !f.zf;
    case CondCode::L: return f.sf != f.of;
    case CondCode::LE: return f.zf || f.sf != f.of;
    case CondCode::G: return !f.zf && f.sf == f.of;
    case CondCode::GE: return f.sf == f.of;
    case CondCode::B: return f.cf;
    case CondCode::BE: return f.cf || f.zf;
    case CondCode::A: return !f.cf && !f.zf;
    case CondCode::AE: return !f.cf;
    case CondCode::S: return f.sf;
    case CondCode::NS: return !f.sf;
    case CondCode::O: return f.of;
    case CondCode::NO: return !f.of;
  }
  return false;
}

std::uint64_t Memory::read(std::uint64_t addr, unsigned bytes) const {
  std::uint64_t v = 0;
  for (unsigned i = 0; i < bytes; ++i) {
    auto it = bytes_.find(addr + i);
    if (it != bytes_.end()) v |= std::uint64_t{it->second} << (8 * i);
  }
  return v;
}

void Memory::write(std::uint64_t addr, std::uint64_t value, unsigned bytes) {
  for (unsigned i = 0; i < bytes; ++i) bytes_[addr + i] = static_cast<std::uint8_t>(value >> (8 * i));
}

void Memory::preload(std::uint64_t addr, std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes_[addr + i] = bytes[i];
}

bool Memory::in_secret(std::uint64_t addr) const {
  for (const auto& r : secrets_)
    if (r.contains(addr)) return true;
  return false;
}

bool Memory::word_taint(std::uint64_t addr) const {
  const auto w = word_of(addr);
  if (auto it = taint_.find(w); it != taint_.end()) return it->second;
  for (const auto& r : secrets_) {
    // Any byte of the word inside a region taints the word.
    if (r.length && w <= r.start + r.length - 1 && r.start <= w + 7) return true;
  }
  return false;
}

bool Memory::range_taint(std::uint64_t addr, unsigned bytes) const {
  if (bytes == 0) return false;
  return word_taint(addr) || word_taint(addr + bytes - 1);
}

void Memory::set_range_taint(std::uint64_t addr, unsigned bytes, bool t) {
  if (bytes == 0) return;
  taint_[word_of(addr)] = t;
  taint_[word_of(addr + bytes - 1)] = t;
}

MachineState default_state() {
  MachineState s;
  s.reg(Gpr::Rsp) = kDefaultStackTop;
  return s;
}

Cpu::Cpu(const Program& program) : program_(program) {
  for (std::size_t f = 0; f < program.functions.size(); ++f) {
    const auto& fn = program.functions[f];
    functions_.emplace(fn.name, f);
    labels_.emplace(fn.name, Pc{f, 0});
    for (std::size_t i = 0; i < fn.body.size(); ++i)
      if (const auto* l = std::get_if<Label>(&fn.body[i])) labels_.emplace(l->name, Pc{f, i});
  }
}

Pc Cpu::entry(std::string_view function) const {
  auto it = functions_.find(std::string(function));
  if (it == functions_.end()) throw ExecError("unknown entry function '" + std::string(function) + "'");
  return {it->second, 0};
}

Pc Cpu::normalize(Pc pc) const {
  if (pc.function >= program_.functions.size()) throw ExecError("invalid code position");
  const auto& body = program_.functions[pc.function].body;
  while (pc.item < body.size() && is_label(body[pc.item])) ++pc.item;
  if (pc.item >= body.size())
    throw ExecError("execution fell off the end of function '" + program_.functions[pc.function].name + "'");
  return pc;
}

const Instruction& Cpu::at(Pc pc) const { return std::get<Instruction>(program_.functions[pc.function].body[pc.item]); }

Pc Cpu::label(std::string_view name) const {
  auto it = labels_.find(std::string(name));
  if (it == labels_.end()) throw ExecError("undefined label '" + std::string(name) + "'");
  return it->second;
}

std::uint64_t Cpu::encode_return(Pc pc) { return kCodeTag | (std::uint64_t{pc.function} << 24) | pc.item; }

StepInfo Cpu::step(Pc pc, MachineState& s, unsigned& call_depth) const {
  const Instruction& inst = at(pc);
  StepInfo info;
  info.next = {pc.function, pc.item + 1};
  Executor ex(s, info);
  const unsigned w = inst.width;
  const auto& ops = inst.operands;

  auto jump_to = [&](const Operand& op) { return label(std::get<LabelRef>(op).name); };

  switch (inst.op) {
    case Opcode::Mov: ex.write(ops[1], w, ex.read(ops[0], w)); break;
    case Opcode::Lea: {
      bool t = false;
      const auto a = ex.address(std::get<MemoryRef>(ops[0]), t);
      ex.write(ops[1], w, {a, t});
      break;
    }
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Cmp: {
      const auto src = ex.read(ops[0], w);
      const auto dst = ex.read(ops[1], w);
      const bool sub = inst.op != Opcode::Add;
      const auto m = width_mask(w);
      const std::uint64_t r = (sub ? dst.v - src.v : dst.v + src.v) & m;
      auto& f = s.flags;
      set_result_flags(f, r, w);
      f.af = ((dst.v ^ src.v ^ r) >> 4) & 1u;
      if (sub) {
        f.cf = dst.v < src.v;
        f.of = sign_bit((dst.v ^ src.v) & (dst.v ^ r), w);
      } else {
        f.cf = r < dst.v;
        f.of = sign_bit((dst.v ^ r) & (src.v ^ r), w);
      }
      s.flags_taint = src.taint || dst.taint;
      if (inst.op != Opcode::Cmp) ex.write(ops[1], w, {r, src.taint || dst.taint});
      break;
    }
    case Opcode::Xor:
    case Opcode::And:
    case Opcode::Or:
    case Opcode::Test: {
      const auto src = ex.read(ops[0], w);
      const auto dst = ex.read(ops[1], w);
      std::uint64_t r = 0;
      if (inst.op == Opcode::Xor) r = dst.v ^ src.v;
      else if (inst.op == Opcode::Or) r = dst.v | src.v;
      else r = dst.v & src.v;
      auto& f = s.flags;
      set_result_flags(f, r, w);
      f.cf = f.of = f.af = false;
      s.flags_taint = src.taint || dst.taint;
      if (inst.op != Opcode::Test) ex.write(ops[1], w, {r, src.taint || dst.taint});
      break;
    }
    case Opcode::Imul: {
      const auto src = ex.read(ops[0], w);
      const auto dst = ex.read(ops[1], w);
      const __int128 full = static_cast<__int128>(sign_extend(dst.v, w)) * sign_extend(src.v, w);
      const std::uint64_t r = static_cast<std::uint64_t>(full) & width_mask(w);
      auto& f = s.flags;
      set_result_flags(f, r, w);
      f.af = false;
      f.cf = f.of = static_cast<__int128>(sign_extend(r, w)) != full;
      s.flags_taint = src.taint || dst.taint;
      ex.write(ops[1], w, {r, src.taint || dst.taint});
      break;
    }
    case Opcode::Cmov: {
      const auto src = ex.read(ops[0], w);  // memory is read even when the move is not taken
      const auto& dreg = std::get<Register>(ops[1]);
      const Value dst{s.reg(dreg.gpr) & width_mask(w), s.reg_taint[index_of(dreg.gpr)]};
      const bool t = src.taint || dst.taint || s.flags_taint;
      const bool take = condition_holds(inst.cc.value_or(CondCode::E), s.flags);
      ex.write_reg(dreg.gpr, w, {take ? src.v : dst.v, t});
      break;
    }
    case Opcode::Push: {
      auto v = ex.read(ops[0], 64);
      if (const auto* i = std::get_if<Immediate>(&ops[0])) v.v = static_cast<std::uint64_t>(i->value);
      ex.push(v);
      break;
    }
    case Opcode::Pop: ex.write(ops[0], 64, ex.pop()); break;
    case Opcode::Lahf: {
      const auto& f = s.flags;
      const std::uint64_t ah = (f.sf ? 0x80u : 0u) | (f.zf ? 0x40u : 0u) | (f.af ? 0x10u : 0u) |
                               (f.pf ? 0x04u : 0u) | 0x02u | (f.cf ? 0x01u : 0u);
      s.reg(Gpr::Rax) = (s.reg(Gpr::Rax) & ~std::uint64_t{0xff00}) | (ah << 8);
      s.reg_taint[index_of(Gpr::Rax)] = s.reg_taint[index_of(Gpr::Rax)] || s.flags_taint;
      break;
    }
    case Opcode::Sahf: {
      const std::uint64_t ah = (s.reg(Gpr::Rax) >> 8) & 0xff;
      auto& f = s.flags;
      f.sf = ah & 0x80u;
      f.zf = ah & 0x40u;
      f.af = ah & 0x10u;
      f.pf = ah & 0x04u;
      f.cf = ah & 0x01u;
      s.flags_taint = s.reg_taint[index_of(Gpr::Rax)];
      break;
    }
    case Opcode::Pushf: ex.push({s.flags.to_rflags(), s.flags_taint}); break;
    case Opcode::Popf: {
      const auto v = ex.pop();
      s.flags = Flags::from_rflags(v.v);
      s.flags_taint = v.taint;
      break;
    }
    case Opcode::Jcc:
      info.branch_taken = condition_holds(inst.cc.value_or(CondCode::E), s.flags);
      if (info.branch_taken) info.next = jump_to(ops[0]);
      break;
    case Opcode::Jmp: info.next = jump_to(ops[0]); break;
    case Opcode::Call: {
      ex.push({encode_return({pc.function, pc.item + 1}), false});
      ++call_depth;
      info.next = jump_to(ops[0]);
      break;
    }
    case Opcode::Ret: {
      if (call_depth == 0) {
        info.halted = true;
        break;
      }
      const auto v = ex.pop();
      --call_depth;
      if ((v.v & kCodeTagMask) != kCodeTag) throw ExecError("return to non-code address 0x" + Executor::hex(v.v));
      const Pc target{static_cast<std::size_t>((v.v >> 24) & 0xffff), static_cast<std::size_t>(v.v & 0xffffff)};
      if (target.function >= program_.functions.size() ||
          target.item > program_.functions[target.function].body.size())
        throw ExecError("return to invalid code address 0x" + Executor::hex(v.v));
      info.next = target;
      break;
    }
    case Opcode::Lfence:
    case Opcode::Nop: break;
  }
  return info;
}

ExecResult exec(const Program& program, std::string_view entry, const MachineState& init,
                const ExecOptions& options) {
  if (options.step_limit == 0) throw ExecError("step limit must be positive");
  Cpu cpu(program);
  ExecResult r;
  r.final = init;
  Pc pc = cpu.entry(entry);
  unsigned depth = 0;
  for (;;) {
    pc = cpu.normalize(pc);
    if (r.dynamic_instructions >= options.step_limit)
      throw ExecError("step limit of " + std::to_string(options.step_limit) + " instructions exhausted");
    const auto& inst = cpu.at(pc);
    const auto info = cpu.step(pc, r.final, depth);
    ++r.dynamic_instructions;
    if (options.record_trace) r.trace.push_back(pc);
    for (unsigned i = 0; i < info.access_count; ++i) {
      const auto& a = info.accesses[i];
      r.mem_events.push_back({a.kind, a.address, a.width, a.address_taint, inst.inserted});
    }
    if (info.halted) break;
    pc = info.next;
  }
  return r;
}

Observable observe(const ExecResult& r, GprSet ignored) {
  Observable o;
  for (std::size_t i = 0; i < kGprCount; ++i)
    if (!(ignored & bit(static_cast<Gpr>(i)))) o.gpr[i] = r.final.gpr[i];
  const std::uint64_t sp = r.final.reg(Gpr::Rsp);
  const std::uint64_t dead_lo = sp - kDeadStackWindow;
  for (const auto& [addr, byte] : r.final.memory.bytes()) {
    if (addr >= dead_lo && addr < sp) continue;
    o.memory.emplace(addr, byte);
  }
  for (const auto& e : r.mem_events)
    if (!e.inserted) o.mem_events.push_back(e);
  return o;
}

}  // namespace bcbguard
