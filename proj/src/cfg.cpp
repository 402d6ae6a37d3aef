#include "bcbguard/cfg.hpp"

#include <map>

namespace bcbguard {

std::vector<std::size_t> Cfg::successors(std::size_t block) const {
  std::vector<std::size_t> out;
  for (const auto& e : edges)
    if (e.from == block) out.push_back(e.to);
  return out;
}

std::size_t Cfg::in_degree(std::size_t block) const {
  std::size_t n = (block == entry) ? 1 : 0;
  for (const auto& e : edges)
    if (e.to == block) ++n;
  return n;
}

Cfg build_cfg(const Function& fn) {
  Cfg cfg;
  cfg.block_of_item.assign(fn.body.size(), 0);

  bool open = false;  // current block can still take instructions
  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    const auto& item = fn.body[i];
    const bool label = is_label(item);
    const bool need_new =
        !open || (label && !cfg.blocks.back().instrs.empty());
    if (need_new) {
      BasicBlock b;
      b.begin = i;
      cfg.blocks.push_back(std::move(b));
      open = true;
    }
    auto& cur = cfg.blocks.back();
    cur.end = i + 1;
    cfg.block_of_item[i] = cfg.blocks.size() - 1;
    if (label) {
      cur.labels.push_back(std::get<Label>(item).name);
    } else {
      cur.instrs.push_back(i);
      if (is_terminator(std::get<Instruction>(item))) open = false;
    }
  }

  std::map<std::string, std::size_t, std::less<>> label_block;
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b)
    for (const auto& l : cfg.blocks[b].labels) label_block.emplace(l, b);

  auto resolve = [&](const Instruction& inst) {
    const std::string* target = branch_target(inst);
    const std::string name = target ? *target : std::string("<indirect>");
    auto it = target ? label_block.find(*target) : label_block.end();
    if (it == label_block.end())
      throw StructuralError(name, inst.span.line,
                            "line " + std::to_string(inst.span.line) + ": branch target '" + name +
                                "' is not a label of function '" + fn.name + "'");
    return it->second;
  };

  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    const auto& blk = cfg.blocks[b];
    const bool has_next = b + 1 < cfg.blocks.size();
    if (blk.instrs.empty()) {
      if (has_next) cfg.edges.push_back({b, b + 1, EdgeKind::Fallthrough});
      continue;
    }
    const auto& last = std::get<Instruction>(fn.body[blk.instrs.back()]);
    switch (last.op) {
      case Opcode::Jcc:
        cfg.edges.push_back({b, resolve(last), EdgeKind::Taken});
        if (!has_next)
          throw StructuralError("", last.span.line,
                                "line " + std::to_string(last.span.line) +
                                    ": conditional branch falls off the end of function '" + fn.name + "'");
        cfg.edges.push_back({b, b + 1, EdgeKind::Fallthrough});
        break;
      case Opcode::Jmp: cfg.edges.push_back({b, resolve(last), EdgeKind::Unconditional}); break;
      case Opcode::Ret: break;
      default:
        if (has_next) cfg.edges.push_back({b, b + 1, EdgeKind::Fallthrough});
        break;
    }
  }
  return cfg;
}

std::vector<Cfg> build_cfgs(const Program& program) {
  std::vector<Cfg> out;
  out.reserve(program.functions.size());
  for (const auto& f : program.functions) out.push_back(build_cfg(f));
  return out;
}

FlagsLiveness::FlagsLiveness(const Function& fn, const Cfg& cfg)
    : before_(fn.body.size() + 1, false), after_(fn.body.size() + 1, false) {
  const std::size_t nb = cfg.blocks.size();
  std::vector<bool> live_in(nb, false);
  std::vector<std::vector<std::size_t>> succ(nb);
  for (const auto& e : cfg.edges) succ[e.from].push_back(e.to);

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t b = nb; b-- > 0;) {
      bool live = false;
      for (auto s : succ[b]) live = live || live_in[s];
      const auto& blk = cfg.blocks[b];
      for (auto it = blk.instrs.rbegin(); it != blk.instrs.rend(); ++it) {
        const auto& inst = std::get<Instruction>(fn.body[*it]);
        live = (live && !writes_flags(inst)) || reads_flags(inst);
      }
      if (live != live_in[b]) {
        live_in[b] = live;
        changed = true;
      }
    }
  }

  for (std::size_t b = 0; b < nb; ++b) {
    const auto& blk = cfg.blocks[b];
    bool live = false;
    for (auto s : succ[b]) live = live || live_in[s];
    before_[blk.end] = before_[blk.end] || live;
    for (std::size_t i = blk.end; i-- > blk.begin;) {
      after_[i] = live;
      if (const auto* inst = as_instruction(fn.body[i]))
        live = (live && !writes_flags(*inst)) || reads_flags(*inst);
      before_[i] = live;
    }
  }
}

FlagsLiveness flags_liveness(const Function& fn, const Cfg& cfg) { return FlagsLiveness(fn, cfg); }

std::vector<ReservedViolation> verify_reserved(const Program& program, std::span<const Gpr> reserved) {
  GprSet mask = 0;
  for (auto r : reserved) mask |= bit(r);
  std::vector<ReservedViolation> out;
  for (const auto& fn : program.functions) {
    for (std::size_t i = 0; i < fn.body.size(); ++i) {
      const auto* inst = as_instruction(fn.body[i]);
      if (!inst) continue;
      const GprSet hit = regs_mentioned(*inst) & mask;
      if (!hit) continue;
      for (std::size_t r = 0; r < kGprCount; ++r)
        if (hit & bit(static_cast<Gpr>(r)))
          out.push_back({fn.name, i, inst->span, static_cast<Gpr>(r)});
    }
  }
  return out;
}

}  // namespace bcbguard
