#include "bcbguard/specsim.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <stdexcept>
#include <unordered_map>

namespace bcbguard {

namespace {

constexpr std::uint64_t kNoBound = std::numeric_limits<std::uint64_t>::max();

// Per-path timing state. Copied when a wrong path is explored.
struct Timing {
  std::array<std::uint64_t, kGprCount> reg{};
  std::uint64_t flags = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> mem;  // word -> store data ready
  std::uint64_t fence = 0;
  std::uint64_t fetch = 0;
  unsigned fetch_count = 0;
  std::uint64_t max_complete = 0;
  std::vector<std::uint64_t> resolves;  // min-heap of the largest older resolve times
  std::vector<std::uint64_t> retire;    // ring of in-order retire times
  std::uint64_t seq = 0;
  std::uint64_t last_retire = 0;
};

struct Timed {
  std::uint64_t floor = 0;
  std::uint64_t ready = 0;
  std::uint64_t issue = 0;
  std::uint64_t complete = 0;
};

GprSet operand_regs(const Instruction& inst) {
  GprSet s = 0;
  for (const auto& op : inst.operands)
    if (const auto* r = std::get_if<Register>(&op)) s |= bit(r->gpr);
  if (inst.op == Opcode::Lahf || inst.op == Opcode::Sahf) s |= bit(Gpr::Rax);  // AH merge / source
  return s;
}

bool stack_op(Opcode op) {
  switch (op) {
    case Opcode::Push:
    case Opcode::Pop:
    case Opcode::Pushf:
    case Opcode::Popf:
    case Opcode::Call:
    case Opcode::Ret: return true;
    default: return false;
  }
}

class Simulator {
 public:
  Simulator(const Program& p, const TimingConfig& tc, const MispredictPolicy& pol, const SimOptions& opt)
      : cpu_(p), tc_(tc), policy_(pol), opt_(opt), warm_(tc.warm_lines) {
    for (std::size_t f = 0; f < p.functions.size(); ++f) {
      std::size_t ord = 0;
      for (std::size_t i = 0; i < p.functions[f].body.size(); ++i) {
        const auto* inst = as_instruction(p.functions[f].body[i]);
        if (inst && inst->op == Opcode::Jcc) sites_.emplace(key({f, i}), BranchSite{p.functions[f].name, ord++});
      }
    }
  }

  SimResult run(std::string_view entry, const MachineState& init) {
    SimResult r;
    r.final = init;
    Timing t;
    t.retire.assign(std::max(1u, tc_.rob_size), 0);
    Pc pc = cpu_.entry(entry);
    unsigned depth = 0;
    for (;;) {
      pc = cpu_.normalize(pc);
      if (r.metrics.dynamic_instructions >= opt_.step_limit)
        throw ExecError("step limit of " + std::to_string(opt_.step_limit) + " instructions exhausted");
      const Instruction& inst = cpu_.at(pc);
      const StepInfo info = cpu_.step(pc, r.final, depth);
      ++r.metrics.dynamic_instructions;
      const Timed tm = time(inst, pc, info, t, kNoBound, false);
      if (opt_.record_schedule) r.schedule.push_back({pc, tm.ready, tm.issue, tm.complete});

      if (inst.op == Opcode::Jcc) {
        const bool actual = info.branch_taken;
        const bool predicted = predict(pc, actual);
        if (predicted != actual) {
          MispredictRecord rec{site(pc), tm.complete, std::nullopt};
          std::size_t budget = tc_.rob_size;
          const Pc wrong = predicted ? cpu_.label(std::get<LabelRef>(inst.operands[0]).name)
                                     : Pc{pc.function, pc.item + 1};
          walk(wrong, r.final, t, depth, tm.complete, budget, rec);
          redirect(t, tm.complete);
          r.mispredicts.push_back(std::move(rec));
        }
      }
      if (info.halted) break;
      pc = info.next;
      if ((r.metrics.dynamic_instructions & 1023) == 0) prune(t);
    }
    r.metrics.cycles = std::max<std::uint64_t>(1, t.max_complete);
    r.metrics.ipc = static_cast<double>(r.metrics.dynamic_instructions) / static_cast<double>(r.metrics.cycles);
    std::stable_sort(events_.begin(), events_.end(),
                     [](const TraceEvent& a, const TraceEvent& b) { return a.issue_cycle < b.issue_cycle; });
    r.trace.events = std::move(events_);
    for (const auto& e : r.trace.events)
      if (e.squashed && e.address_taint) r.leaks.leaks.push_back(e);
    r.leaks.leaked = !r.leaks.leaks.empty();
    return r;
  }

 private:
  static std::uint64_t key(Pc pc) { return (std::uint64_t{pc.function} << 32) | pc.item; }

  BranchSite site(Pc pc) const { return sites_.at(key(pc)); }

  bool predict(Pc pc, bool actual) const {
    switch (policy_.kind) {
      case MispredictPolicy::Kind::Never: return actual;
      case MispredictPolicy::Kind::AlwaysWrong: return !actual;
      case MispredictPolicy::Kind::Chosen: {
        const auto s = site(pc);
        auto it = policy_.chosen.find(s);
        if (it == policy_.chosen.end())
          throw std::invalid_argument("policy does not cover branch " + s.function + "#" + std::to_string(s.ordinal));
        return it->second;
      }
    }
    return actual;
  }

  void redirect(Timing& t, std::uint64_t at) const {
    if (t.fetch < at) {
      t.fetch = at;
      t.fetch_count = 0;
    }
  }

  void prune(Timing& t) {
    slots_.erase(slots_.begin(), slots_.lower_bound(t.fetch));
    if (t.mem.size() > 4096)
      std::erase_if(t.mem, [&](const auto& kv) { return kv.second <= t.fetch; });
  }

  // Wrong-path execution. Events that issue before `bound` are recorded as
  // squashed; nothing here touches the committed state.
  void walk(Pc pc, MachineState s, Timing t, unsigned depth, std::uint64_t bound, std::size_t& budget,
            MispredictRecord& rec) {
    while (budget > 0) {
      --budget;
      StepInfo info;
      const Instruction* inst = nullptr;
      try {
        pc = cpu_.normalize(pc);
        inst = &cpu_.at(pc);
        info = cpu_.step(pc, s, depth);
      } catch (const ExecError&) {
        return;
      }
      const Timed tm = time(*inst, pc, info, t, bound, true);
      if (tm.floor >= bound) return;
      if (tm.issue < bound && (!rec.first_speculative_issue || tm.issue < *rec.first_speculative_issue))
        rec.first_speculative_issue = tm.issue;
      if (info.halted) return;
      if (inst->op == Opcode::Jcc) {
        const bool actual = info.branch_taken;
        const bool predicted = predict(pc, actual);
        if (predicted != actual) {
          const Pc wrong = predicted ? cpu_.label(std::get<LabelRef>(inst->operands[0]).name)
                                     : Pc{pc.function, pc.item + 1};
          walk(wrong, s, t, depth, std::min(bound, tm.complete), budget, rec);
          redirect(t, tm.complete);
        }
      }
      pc = info.next;
    }
  }

  std::uint64_t fetch(Timing& t) const {
    if (t.fetch_count >= tc_.issue_width) {
      ++t.fetch;
      t.fetch_count = 0;
    }
    ++t.fetch_count;
    return t.fetch;
  }

  std::uint64_t depth_floor(const Timing& t) const {
    return t.resolves.size() == tc_.max_spec_depth + 1 ? t.resolves.front() : 0;
  }

  std::uint64_t rob_floor(const Timing& t) const {
    if (t.seq < t.retire.size()) return 0;
    return t.retire[t.seq % t.retire.size()];
  }

  std::uint64_t slot(std::uint64_t ready, std::uint64_t bound) {
    std::uint64_t c = ready;
    for (auto it = slots_.lower_bound(c); it != slots_.end() && it->first == c && it->second >= tc_.issue_width;
         ++it)
      ++c;
    if (c < bound) ++slots_[c];
    return c;
  }

  std::uint64_t regs_ready(const Timing& t, GprSet s) const {
    std::uint64_t r = 0;
    for (std::size_t i = 0; i < kGprCount; ++i)
      if (s & bit(static_cast<Gpr>(i))) r = std::max(r, t.reg[i]);
    return r;
  }

  std::uint64_t load_latency(std::uint64_t addr, bool install) {
    const auto line = line_of(addr);
    const bool warm = warm_.contains(line);
    if (install) warm_.insert(line);
    return warm ? tc_.lat_load_warm : tc_.lat_load_cold;
  }

  void record(const MemAccess& a, std::uint64_t cycle, Pc pc, bool spec) {
    events_.push_back({cycle, a.kind, a.address, line_of(a.address), a.width, spec, spec, a.address_taint, pc});
  }

  Timed time(const Instruction& inst, Pc pc, const StepInfo& info, Timing& t, std::uint64_t bound, bool spec) {
    Timed tm;
    tm.floor = std::max({fetch(t), t.fence, depth_floor(t), rob_floor(t)});

    const MemoryRef* mem = memory_operand(inst);
    const bool stack = stack_op(inst.op);
    std::uint64_t addr_ready = 0;
    if (stack) addr_ready = t.reg[index_of(Gpr::Rsp)];
    else if (mem) addr_ready = regs_ready(t, address_regs(*mem));
    std::uint64_t data_ready = regs_ready(t, regs_read(inst) & operand_regs(inst));
    if (reads_flags(inst)) data_ready = std::max(data_ready, t.flags);
    if (inst.op == Opcode::Lea) data_ready = std::max(data_ready, addr_ready);

    const MemAccess* load = nullptr;
    const MemAccess* store = nullptr;
    for (unsigned i = 0; i < info.access_count; ++i)
      (info.accesses[i].kind == MemKind::Load ? load : store) = &info.accesses[i];

    std::uint64_t result = 0;
    if (inst.op == Opcode::Lfence) {
      tm.ready = std::max(tm.floor, t.max_complete);
      tm.issue = slot(tm.ready, bound);
      result = tm.complete = tm.issue + tc_.lat_alu;
      t.fence = std::max(t.fence, tm.complete);
    } else if (inst.op == Opcode::Ret) {
      tm.ready = tm.floor;
      tm.issue = slot(tm.ready, bound);
      if (load) {
        const bool issued = tm.issue < bound;
        load_latency(load->address, issued);
        if (issued) record(*load, tm.issue, pc, spec);
      }
      tm.complete = tm.issue + tc_.lat_alu;
    } else if (load) {
      tm.ready = std::max(tm.floor, addr_ready);
      tm.issue = slot(tm.ready, bound);
      const bool issued = tm.issue < bound;
      std::uint64_t done = tm.issue + load_latency(load->address, issued);
      if (auto it = t.mem.find(word_of(load->address)); it != t.mem.end()) done = std::max(done, it->second);
      if (issued) record(*load, tm.issue, pc, spec);
      const bool pure = (inst.op == Opcode::Mov && inst.width >= 32) || inst.op == Opcode::Pop || inst.op == Opcode::Popf;  // narrow movs merge
      result = pure ? done : std::max(done, data_ready) + tc_.lat_alu;
      tm.complete = result;
      if (store) {
        if (issued) record(*store, result, pc, spec);
        t.mem[word_of(store->address)] = result;
        if (!spec) warm_.insert(line_of(store->address));
      }
    } else if (store) {
      tm.ready = std::max({tm.floor, addr_ready, data_ready});
      tm.issue = slot(tm.ready, bound);
      if (tm.issue < bound) record(*store, tm.issue, pc, spec);
      result = tm.complete = tm.issue + tc_.lat_alu;
      t.mem[word_of(store->address)] = result;
      if (!spec) warm_.insert(line_of(store->address));  // write-allocate
    } else {
      tm.ready = std::max(tm.floor, data_ready);
      tm.issue = slot(tm.ready, bound);
      if (inst.op == Opcode::Jcc) {
        tm.complete = tm.issue + std::max(1u, tc_.branch_resolve_extra);
        auto& h = t.resolves;
        h.push_back(tm.complete);
        std::push_heap(h.begin(), h.end(), std::greater<>{});
        if (h.size() > tc_.max_spec_depth + 1) {
          std::pop_heap(h.begin(), h.end(), std::greater<>{});
          h.pop_back();
        }
      } else {
        result = tm.complete = tm.issue + tc_.lat_alu;
      }
    }

    GprSet written = regs_written(inst);
    if (stack) written &= ~bit(Gpr::Rsp);
    for (std::size_t i = 0; i < kGprCount; ++i)
      if (written & bit(static_cast<Gpr>(i))) t.reg[i] = result;
    if (writes_flags(inst)) t.flags = result;

    t.max_complete = std::max(t.max_complete, tm.complete);
    t.last_retire = std::max(t.last_retire, tm.complete);
    t.retire[t.seq % t.retire.size()] = t.last_retire;
    ++t.seq;
    return tm;
  }

  Cpu cpu_;
  const TimingConfig& tc_;
  const MispredictPolicy& policy_;
  const SimOptions& opt_;
  std::set<std::uint64_t> warm_;
  std::map<std::uint64_t, unsigned> slots_;
  std::unordered_map<std::uint64_t, BranchSite> sites_;
  std::vector<TraceEvent> events_;
};

}  // namespace

void TimingConfig::validate() const {
  if (issue_width < 1) throw std::invalid_argument("issue_width must be at least 1");
  if (lat_alu < 1 || lat_load_warm < 1 || lat_load_cold < 1)
    throw std::invalid_argument("latencies must be at least 1 cycle");
  if (rob_size < 1) throw std::invalid_argument("rob_size must be at least 1");
}

std::string_view policy_kind_name(MispredictPolicy::Kind k) {
  switch (k) {
    case MispredictPolicy::Kind::Never: return "never";
    case MispredictPolicy::Kind::AlwaysWrong: return "always_wrong";
    case MispredictPolicy::Kind::Chosen: return "chosen";
  }
  return "?";
}

std::optional<MispredictPolicy::Kind> parse_policy_kind(std::string_view s) {
  for (auto k : {MispredictPolicy::Kind::Never, MispredictPolicy::Kind::AlwaysWrong, MispredictPolicy::Kind::Chosen})
    if (policy_kind_name(k) == s) return k;
  return std::nullopt;
}

std::vector<BranchSite> branch_sites(const Program& program) {
  std::vector<BranchSite> out;
  for (const auto& fn : program.functions) {
    std::size_t ord = 0;
    for (const auto& it : fn.body)
      if (const auto* i = as_instruction(it); i && i->op == Opcode::Jcc) out.push_back({fn.name, ord++});
  }
  return out;
}

SimResult simulate(const Program& program, std::string_view entry, const MachineState& init,
                   const TimingConfig& timing, const MispredictPolicy& policy, const SimOptions& options) {
  timing.validate();
  if (options.step_limit == 0) throw ExecError("step limit must be positive");
  return Simulator(program, timing, policy, options).run(entry, init);
}

std::uint64_t speculation_window(const Program& program, std::string_view entry, const BranchSite& site,
                                 const MachineState& init, const TimingConfig& timing,
                                 const MispredictPolicy& policy) {
  const auto r = simulate(program, entry, init, timing, policy);
  for (const auto& m : r.mispredicts)
    if (m.site == site) return m.window();
  const auto sites = branch_sites(program);
  if (std::find(sites.begin(), sites.end(), site) == sites.end())
    throw std::invalid_argument("no branch site " + site.function + "#" + std::to_string(site.ordinal));
  throw std::invalid_argument("branch " + site.function + "#" + std::to_string(site.ordinal) +
                              " does not mispredict under the policy");
}

}  // namespace bcbguard
