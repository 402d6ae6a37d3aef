// Test-side reference implementations. These deliberately avoid the
// library's cfg/passes code: instruction-level successor walks instead of
// basic blocks, and flag/load classification restated by hand.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcbguard/asm.hpp"
#include "bcbguard/corpus.hpp"
#include "bcbguard/frontend.hpp"

namespace oracle {

using namespace bcbguard;

inline constexpr std::size_t npos = static_cast<std::size_t>(-1);

inline const Instruction* inst_at(const Function& f, std::size_t i) {
  return i < f.body.size() ? std::get_if<Instruction>(&f.body[i]) : nullptr;
}

inline std::size_t brute_count(const Program& p) {
  std::size_t n = 0;
  for (const auto& f : p.functions)
    for (const auto& it : f.body) n += std::holds_alternative<Instruction>(it);
  return n;
}

inline std::size_t brute_count(const Program& p, Opcode op, bool inserted_only = false) {
  std::size_t n = 0;
  for (const auto& f : p.functions)
    for (const auto& it : f.body)
      if (auto* in = std::get_if<Instruction>(&it); in && in->op == op && (!inserted_only || in->inserted)) ++n;
  return n;
}

inline std::size_t count_jcc(const Program& p) { return brute_count(p, Opcode::Jcc); }

// restated flag tables
inline bool reads_f(const Instruction& in) {
  return in.op == Opcode::Jcc || in.op == Opcode::Cmov || in.op == Opcode::Lahf || in.op == Opcode::Pushf;
}
inline bool writes_f(const Instruction& in) {
  switch (in.op) {
    case Opcode::Add: case Opcode::Sub: case Opcode::Imul: case Opcode::Xor: case Opcode::And:
    case Opcode::Or: case Opcode::Cmp: case Opcode::Test: case Opcode::Sahf: case Opcode::Popf:
    case Opcode::Call:
      return true;
    default: return false;
  }
}

inline bool loads_into_register(const Instruction& in) {
  switch (in.op) {
    case Opcode::Mov: case Opcode::Add: case Opcode::Sub: case Opcode::Imul: case Opcode::Xor:
    case Opcode::And: case Opcode::Or: case Opcode::Cmov:
      return in.operands.size() == 2 && std::holds_alternative<MemoryRef>(in.operands[0]) &&
             std::holds_alternative<Register>(in.operands[1]);
    default: return false;
  }
}

class Walker {
 public:
  explicit Walker(const Function& f) : f_(f) {
    for (std::size_t i = 0; i < f.body.size(); ++i)
      if (auto* l = std::get_if<Label>(&f.body[i])) labels_[l->name] = i;
  }

  std::size_t next_inst(std::size_t i) const {
    for (std::size_t j = i; j < f_.body.size(); ++j)
      if (inst_at(f_, j)) return j;
    return npos;
  }

  std::vector<std::size_t> succs(std::size_t i) const {
    const auto& in = *inst_at(f_, i);
    std::vector<std::size_t> out;
    auto target = [&] {
      const auto& name = std::get<LabelRef>(in.operands.at(0)).name;
      auto it = labels_.find(name);
      if (it == labels_.end()) throw std::runtime_error("oracle: unknown label " + name);
      return next_inst(it->second);
    };
    auto push = [&](std::size_t j) {
      if (j != npos) out.push_back(j);
    };
    switch (in.op) {
      case Opcode::Jcc: push(next_inst(i + 1)); push(target()); break;
      case Opcode::Jmp: push(target()); break;
      case Opcode::Ret: break;
      default: push(next_inst(i + 1)); break;
    }
    return out;
  }

  // instruction items reachable from the successors of `from`
  std::set<std::size_t> reachable_after(std::size_t from) const {
    std::set<std::size_t> seen;
    std::vector<std::size_t> work = succs(from);
    while (!work.empty()) {
      auto j = work.back();
      work.pop_back();
      if (!seen.insert(j).second) continue;
      for (auto s : succs(j)) work.push_back(s);
    }
    return seen;
  }

  // a path from just after `i` reaches a flags reader before any writer
  bool flags_live_after(std::size_t i) const {
    std::set<std::size_t> seen;
    std::vector<std::size_t> work = succs(i);
    while (!work.empty()) {
      auto j = work.back();
      work.pop_back();
      if (!seen.insert(j).second) continue;
      const auto& in = *inst_at(f_, j);
      if (reads_f(in)) return true;
      if (writes_f(in)) continue;
      for (auto s : succs(j)) work.push_back(s);
    }
    return false;
  }

  // inside a straight-line pushf ... popf pair
  bool wrapped(std::size_t i) const {
    bool open = false;
    for (std::size_t j = i; j-- > 0;) {
      if (std::holds_alternative<Label>(f_.body[j])) break;
      const auto& in = *inst_at(f_, j);
      if (in.op == Opcode::Popf) break;
      if (in.op == Opcode::Pushf) {
        open = true;
        break;
      }
    }
    if (!open) return false;
    for (std::size_t j = i + 1; j < f_.body.size(); ++j) {
      if (std::holds_alternative<Label>(f_.body[j])) return false;
      const auto& in = *inst_at(f_, j);
      if (in.op == Opcode::Popf) return true;
      if (in.op == Opcode::Jcc || in.op == Opcode::Jmp || in.op == Opcode::Ret || in.op == Opcode::Call) return false;
    }
    return false;
  }

 private:
  const Function& f_;
  std::map<std::string, std::size_t> labels_;
};

// loads reachable from any conditional branch
inline std::size_t hardened_loads(const Program& p) {
  std::size_t n = 0;
  for (const auto& f : p.functions) {
    Walker w(f);
    std::set<std::size_t> reach;
    for (std::size_t i = 0; i < f.body.size(); ++i)
      if (auto* in = inst_at(f, i); in && in->op == Opcode::Jcc) {
        auto r = w.reachable_after(i);
        reach.insert(r.begin(), r.end());
      }
    for (auto j : reach)
      if (loads_into_register(*inst_at(f, j))) ++n;
  }
  return n;
}

inline std::size_t functions_with_branches(const Program& p) {
  std::size_t n = 0;
  for (const auto& f : p.functions) {
    bool any = false;
    for (const auto& it : f.body)
      if (auto* in = std::get_if<Instruction>(&it); in && in->op == Opcode::Jcc) any = true;
    n += any;
  }
  return n;
}

// register operands of the flag setters feeding each Jcc; -1 means no
// eligible setter in the same straight-line run
inline std::vector<int> setter_register_operands(const Program& p) {
  std::vector<int> out;
  for (const auto& f : p.functions)
    for (std::size_t i = 0; i < f.body.size(); ++i) {
      auto* in = inst_at(f, i);
      if (!in || in->op != Opcode::Jcc) continue;
      int found = -1;
      for (std::size_t j = i; j-- > 0;) {
        if (std::holds_alternative<Label>(f.body[j])) break;
        const auto& s = *inst_at(f, j);
        if (s.op == Opcode::Jcc || s.op == Opcode::Jmp || s.op == Opcode::Ret || s.op == Opcode::Call) break;
        if (!writes_f(s)) continue;
        switch (s.op) {
          case Opcode::Cmp: case Opcode::Test: case Opcode::Add: case Opcode::Sub: case Opcode::And:
          case Opcode::Or: case Opcode::Xor: case Opcode::Imul: {
            int regs = 0;
            for (const auto& o : s.operands) regs += std::holds_alternative<Register>(o);
            found = regs;
            break;
          }
          default: break;
        }
        break;
      }
      out.push_back(found);
    }
  return out;
}

struct FlagsViolation {
  std::string function;
  std::size_t item;
};

// inserted flags writers whose clobber is observable
inline std::vector<FlagsViolation> flags_safety(const Program& hardened) {
  std::vector<FlagsViolation> out;
  for (const auto& f : hardened.functions) {
    Walker w(f);
    for (std::size_t i = 0; i < f.body.size(); ++i) {
      auto* in = inst_at(f, i);
      if (!in || !in->inserted || !writes_f(*in) || in->op == Opcode::Popf) continue;
      if (w.flags_live_after(i) && !w.wrapped(i)) out.push_back({f.name, i});
    }
  }
  return out;
}

inline std::vector<CorpusEntry> corpus() { return load_corpus(BCB_CORPUS_DIR); }

inline Program parse_or_throw(std::string_view text) {
  auto r = parse_asm(text);
  if (!r.ok()) {
    std::string msg = "oracle: parse failed";
    for (const auto& e : r.errors) msg += "\n" + format_error(e, "<test>");
    throw std::runtime_error(msg);
  }
  return std::move(*r.program);
}

}  // namespace oracle
