#include "bcbguard/passes.hpp"

#include <array>
#include <set>

namespace bcbguard {

namespace {

enum Slot { kInit, kEdge, kMask, kPreBranch, kSlotCount };

Operand reg(Gpr g) { return Register::q(g); }

Instruction inserted(Instruction i) {
  i.inserted = true;
  return i;
}

Instruction ins(Opcode op, std::vector<Operand> ops) { return inserted(make_inst(op, std::move(ops))); }

Instruction xor_into(Gpr src, Gpr dst) { return ins(Opcode::Xor, {reg(src), reg(dst)}); }

void wrap_flags(std::vector<Instruction>& seq) {
  seq.insert(seq.begin(), ins(Opcode::Pushf, {}));
  seq.push_back(ins(Opcode::Popf, {}));
}

struct FunctionPlan {
  std::vector<std::array<std::vector<Instruction>, kSlotCount>> at;
  std::vector<Item> tail;
  std::vector<std::optional<std::string>> retarget;  // Jcc item -> trampoline label
};

class Engine {
 public:
  Engine(const Program& in, const PassConfig& cfg) : in_(in), cfg_(cfg) {
    for (const auto& f : in.functions) {
      used_labels_.insert(f.name);
      for (const auto& it : f.body)
        if (const auto* l = std::get_if<Label>(&it)) used_labels_.insert(l->name);
    }
  }

  Hardened run() {
    Hardened out;
    out.program.source_name = in_.source_name;
    for (const auto& fn : in_.functions) out.program.functions.push_back(harden_function(fn));
    out.report = report_;
    out.report.instructions_inserted = count_instructions(out.program) - count_instructions(in_);
    return out;
  }

 private:
  Gpr dep() const { return cfg_.dep_register.gpr; }
  Gpr zero() const { return cfg_.zero_register.gpr; }

  std::string fresh_label() {
    for (;;) {
      std::string name = std::string(kTrampolinePrefix) + std::to_string(next_label_++);
      if (used_labels_.insert(name).second) return name;
    }
  }

  // Instrumentation for one edge, with flags wrap applied when needed.
  std::vector<Instruction> edge_sequence(CondCode cc, EdgeKind kind, bool instrumented, bool flags_live) {
    std::vector<Instruction> seq;
    switch (cfg_.kind) {
      case PassKind::Lfence:
        if (instrumented) seq.push_back(ins(Opcode::Lfence, {}));
        break;
      case PassKind::LahfDep:
        if (!instrumented) {
          seq.push_back(ins(Opcode::Pop, {reg(Gpr::Rax)}));
          break;
        }
        if (flags_live) {
          seq.push_back(ins(Opcode::Lahf, {}));
          seq.push_back(ins(Opcode::Pushf, {}));
          seq.push_back(xor_into(Gpr::Rax, dep()));
          seq.push_back(ins(Opcode::Popf, {}));
          seq.push_back(ins(Opcode::Pop, {reg(Gpr::Rax)}));
          ++report_.flags_conflicts_resolved;
        } else {
          seq.push_back(ins(Opcode::Lahf, {}));
          seq.push_back(xor_into(Gpr::Rax, dep()));
          seq.push_back(ins(Opcode::Pop, {reg(Gpr::Rax)}));
        }
        break;
      case PassKind::SlhCmov:
        if (instrumented) {
          const CondCode c = kind == EdgeKind::Taken ? invert(cc) : cc;
          seq.push_back(inserted(make_cmov(c, Register::q(zero()), Register::q(dep()))));
        }
        break;
      case PassKind::ArgDep: break;
    }
    if (instrumented && !seq.empty()) ++report_.edges_instrumented;
    return seq;
  }

  std::vector<Instruction> mask_sequence(Gpr d) {
    std::vector<Instruction> seq;
    switch (cfg_.kind) {
      case PassKind::LahfDep:
      case PassKind::ArgDep:
        seq.push_back(xor_into(dep(), d));
        seq.push_back(xor_into(dep(), d));
        break;
      case PassKind::SlhCmov: seq.push_back(ins(Opcode::And, {reg(dep()), reg(d)})); break;
      case PassKind::Lfence: break;
    }
    return seq;
  }

  static bool argdep_setter(Opcode op) {
    switch (op) {
      case Opcode::Cmp:
      case Opcode::Test:
      case Opcode::Add:
      case Opcode::Sub:
      case Opcode::And:
      case Opcode::Or:
      case Opcode::Xor:
      case Opcode::Imul: return true;
      default: return false;
    }
  }

  void place_edge(const Function& fn, const Cfg& cfg, FunctionPlan& plan, std::size_t jcc, const Edge& e,
                  std::vector<Instruction> seq) {
    if (seq.empty()) return;
    const auto& target = cfg.blocks[e.to];
    if (cfg.in_degree(e.to) == 1) {
      append(plan.at[target.head()][kEdge], std::move(seq));
    } else if (e.kind == EdgeKind::Fallthrough) {
      append(plan.at[target.begin][kEdge], std::move(seq));
    } else {
      const std::string label = fresh_label();
      plan.tail.emplace_back(Label{label, {}});
      for (auto& i : seq) plan.tail.emplace_back(std::move(i));
      plan.tail.emplace_back(inserted(make_jmp(*branch_target(std::get<Instruction>(fn.body[jcc])))));
      plan.retarget[jcc] = label;
      ++report_.trampoline_jumps;
    }
  }

  static void append(std::vector<Instruction>& dst, std::vector<Instruction> src) {
    for (auto& i : src) dst.push_back(std::move(i));
  }

  Function harden_function(const Function& fn) {
    const Cfg cfg = build_cfg(fn);
    const FlagsLiveness live(fn, cfg);
    const std::size_t n = fn.body.size();
    FunctionPlan plan;
    plan.at.resize(n + 1);
    plan.retarget.resize(n);

    auto live_at_block = [&](std::size_t b) {
      const auto h = cfg.blocks[b].head();
      return h < n && live.live_before(h);
    };

    std::size_t branches = 0;
    for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
      const auto& blk = cfg.blocks[b];
      if (blk.instrs.empty()) continue;
      const std::size_t j = blk.instrs.back();
      const auto& jcc = std::get<Instruction>(fn.body[j]);
      if (jcc.op != Opcode::Jcc) continue;
      const CondCode cc = *jcc.cc;

      if (cfg_.kind == PassKind::ArgDep) {
        std::optional<std::size_t> setter;
        for (auto it = blk.instrs.rbegin() + 1; it != blk.instrs.rend(); ++it) {
          if (writes_flags(std::get<Instruction>(fn.body[*it]))) {
            setter = *it;
            break;
          }
        }
        if (!setter || !argdep_setter(std::get<Instruction>(fn.body[*setter]).op)) {
          report_.skipped_branches.push_back(
              {fn.name, j, jcc.span,
               setter ? "flags are set by an instruction without comparison arguments"
                      : "flags are not set in the branch's block"});
          continue;
        }
        auto& slot = plan.at[*setter][kPreBranch];
        for (const auto& op : std::get<Instruction>(fn.body[*setter]).operands)
          if (const auto* r = std::get_if<Register>(&op)) slot.push_back(xor_into(r->gpr, dep()));
        ++branches;
        continue;
      }

      ++branches;
      if (cfg_.kind == PassKind::LahfDep) plan.at[j][kPreBranch].push_back(ins(Opcode::Push, {reg(Gpr::Rax)}));
      for (const auto& e : cfg.edges) {
        if (e.from != b) continue;
        const bool instrumented = e.kind == EdgeKind::Taken || !cfg_.taken_only();
        place_edge(fn, cfg, plan, j, e, edge_sequence(cc, e.kind, instrumented, live_at_block(e.to)));
      }
    }
    report_.branches_instrumented += branches;

    if (cfg_.kind != PassKind::Lfence) {
      for (const std::size_t i : select_hardened_loads(fn, cfg)) {
        const Gpr d = load_destination(std::get<Instruction>(fn.body[i]))->gpr;
        auto seq = mask_sequence(d);
        std::optional<std::size_t> pos;
        for (std::size_t p = i + 1; p <= n; ++p) {
          if (!live.live_before(p)) {
            pos = p;
            break;
          }
          if (p == n || is_label(fn.body[p])) break;
          const auto& next = std::get<Instruction>(fn.body[p]);
          if (is_terminator(next) || (regs_mentioned(next) & bit(d))) break;
        }
        if (!pos) {
          pos = i + 1;
          wrap_flags(seq);
          ++report_.flags_conflicts_resolved;
        }
        append(plan.at[*pos][kMask], std::move(seq));
        ++report_.loads_instrumented;
      }
    }

    if (cfg_.kind == PassKind::SlhCmov && branches > 0) {
      plan.at[0][kInit].push_back(ins(Opcode::Mov, {Immediate{-1}, reg(dep())}));
      plan.at[0][kInit].push_back(ins(Opcode::Mov, {Immediate{0}, reg(zero())}));
    }

    Function out;
    out.name = fn.name;
    out.global = fn.global;
    auto emit = [&](std::size_t k) {
      for (auto& slot : plan.at[k])
        for (auto& i : slot) out.body.emplace_back(std::move(i));
    };
    for (std::size_t k = 0; k < n; ++k) {
      emit(k);
      Item item = fn.body[k];
      if (plan.retarget[k]) std::get<Instruction>(item).operands[0] = LabelRef{*plan.retarget[k]};
      out.body.push_back(std::move(item));
    }
    emit(n);
    for (auto& t : plan.tail) out.body.push_back(std::move(t));
    return out;
  }

  const Program& in_;
  const PassConfig& cfg_;
  PassReport report_;
  std::set<std::string> used_labels_;
  std::size_t next_label_ = 0;
};

Hardened run_pass(const Program& program, PassConfig config, PassKind kind) {
  config.kind = kind;
  config.validate();
  const auto reserved = config.reserved();
  if (!reserved.empty()) {
    auto v = verify_reserved(program, reserved);
    if (!v.empty()) throw ReservedRegisterError(std::move(v));
  }
  return Engine(program, config).run();
}

}  // namespace

std::string_view pass_name(PassKind k) {
  switch (k) {
    case PassKind::Lfence: return "lfence";
    case PassKind::LahfDep: return "lahf";
    case PassKind::SlhCmov: return "slh";
    case PassKind::ArgDep: return "argdep";
  }
  return "?";
}

std::optional<PassKind> parse_pass_kind(std::string_view s) {
  for (auto k : kAllPasses)
    if (pass_name(k) == s) return k;
  return std::nullopt;
}

void PassConfig::validate() const {
  if (dep_register.width != 64 || zero_register.width != 64)
    throw std::invalid_argument("dep and zero registers must be 64-bit registers");
  if (dep_register.gpr == zero_register.gpr)
    throw std::invalid_argument("dep register and zero register must differ");
  for (const auto& r : {dep_register, zero_register})
    if (r.gpr == Gpr::Rax || r.gpr == Gpr::Rsp)
      throw std::invalid_argument("%" + register_name(r) + " cannot be reserved");
}

std::vector<Gpr> PassConfig::reserved() const {
  switch (kind) {
    case PassKind::Lfence: return {};
    case PassKind::SlhCmov: return {dep_register.gpr, zero_register.gpr};
    case PassKind::LahfDep:
    case PassKind::ArgDep: return {dep_register.gpr};
  }
  return {};
}

ReservedRegisterError::ReservedRegisterError(std::vector<ReservedViolation> v)
    : std::runtime_error([&] {
        std::string msg = "program uses reserved registers:";
        for (const auto& x : v)
          msg += " " + x.function + ":" + std::to_string(x.span.line) + ":%" + register_name(Register::q(x.reg));
        return msg;
      }()),
      violations_(std::move(v)) {}

Hardened harden_lfence(const Program& p, const PassConfig& c) { return run_pass(p, c, PassKind::Lfence); }
Hardened harden_lahf(const Program& p, const PassConfig& c) { return run_pass(p, c, PassKind::LahfDep); }
Hardened harden_slh(const Program& p, const PassConfig& c) { return run_pass(p, c, PassKind::SlhCmov); }
Hardened harden_argdep(const Program& p, const PassConfig& c) { return run_pass(p, c, PassKind::ArgDep); }

Hardened harden(const Program& p, const PassConfig& c) { return run_pass(p, c, c.kind); }

std::vector<std::size_t> select_hardened_loads(const Function& fn, const Cfg& cfg) {
  const std::size_t nb = cfg.blocks.size();
  std::vector<bool> reach(nb, false);
  std::vector<std::size_t> work;
  auto seed = [&](std::size_t b) {
    for (auto s : cfg.successors(b))
      if (!reach[s]) {
        reach[s] = true;
        work.push_back(s);
      }
  };
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& blk = cfg.blocks[b];
    if (!blk.instrs.empty() && std::get<Instruction>(fn.body[blk.instrs.back()]).op == Opcode::Jcc) seed(b);
  }
  while (!work.empty()) {
    const auto b = work.back();
    work.pop_back();
    seed(b);
  }
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < nb; ++b) {
    if (!reach[b]) continue;
    for (auto i : cfg.blocks[b].instrs)
      if (is_register_load(std::get<Instruction>(fn.body[i]))) out.push_back(i);
  }
  return out;
}

}  // namespace bcbguard
