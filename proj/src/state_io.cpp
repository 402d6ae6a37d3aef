#include "bcbguard/state_io.hpp"

#include <charconv>
#include <cstdio>

namespace bcbguard {

using nlohmann::json;

namespace {

void check_schema(const json& j) {
  if (!j.is_object()) throw JsonInputError("expected a JSON object");
  if (auto it = j.find("schema"); it != j.end()) {
    if (!it->is_number_integer() || it->get<int>() != kSchemaVersion)
      throw JsonInputError("unsupported schema version " + it->dump() + " (expected 1)");
  }
}

bool parse_integer(std::string_view s, std::uint64_t& out, bool& negative) {
  negative = false;
  if (!s.empty() && s.front() == '-') {
    negative = true;
    s.remove_prefix(1);
  }
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, base);
  return ec == std::errc{} && p == s.data() + s.size();
}

unsigned json_unsigned(const json& j, const char* what) {
  const auto v = json_u64(j, what);
  if (v > 0xffffffffu) throw JsonInputError(std::string(what) + " is out of range");
  return static_cast<unsigned>(v);
}

}  // namespace

std::string hex_string(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t json_u64(const json& j, const char* what) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer()) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  if (j.is_string()) {
    std::uint64_t v = 0;
    bool neg = false;
    if (parse_integer(j.get<std::string>(), v, neg)) return neg ? ~v + 1 : v;
  }
  throw JsonInputError(std::string(what) + ": expected an integer, got " + j.dump());
}

std::int64_t json_i64(const json& j, const char* what) { return static_cast<std::int64_t>(json_u64(j, what)); }

InitState init_state_from_json(const json& j) {
  check_schema(j);
  InitState out;
  auto& st = out.state;
  if (auto it = j.find("registers"); it != j.end()) {
    if (!it->is_object()) throw JsonInputError("registers: expected an object");
    for (const auto& [name, value] : it->items()) {
      const auto g = parse_gpr64(name);
      if (!g) throw JsonInputError("registers: unknown 64-bit register '" + name + "'");
      st.reg(*g) = json_u64(value, name.c_str());
    }
  }
  if (auto it = j.find("memory"); it != j.end()) {
    for (const auto& m : *it) {
      if (!m.contains("address")) throw JsonInputError("memory: entry without address");
      const auto addr = json_u64(m.at("address"), "memory.address");
      if (auto b = m.find("bytes"); b != m.end()) {
        std::uint64_t a = addr;
        for (const auto& x : *b) {
          const auto v = json_u64(x, "memory.bytes");
          if (v > 0xff) throw JsonInputError("memory.bytes: value out of range");
          st.memory.write(a++, v, 1);
        }
      }
      if (auto q = m.find("qwords"); q != m.end()) {
        std::uint64_t a = addr;
        for (const auto& x : *q) {
          st.memory.write(a, json_u64(x, "memory.qwords"), 8);
          a += 8;
        }
      }
    }
  }
  if (auto it = j.find("secret_regions"); it != j.end())
    for (const auto& r : *it)
      st.memory.add_secret({json_u64(r.at("start"), "secret.start"), json_u64(r.at("length"), "secret.length")});
  if (auto it = j.find("warm_lines"); it != j.end())
    for (const auto& a : *it) out.warm_lines.insert(line_of(json_u64(a, "warm_lines")));
  if (auto it = j.find("step_limit"); it != j.end()) out.step_limit = json_u64(*it, "step_limit");
  return out;
}

json init_state_to_json(const InitState& s) {
  json j;
  j["schema"] = kSchemaVersion;
  json regs = json::object();
  for (std::size_t i = 0; i < kGprCount; ++i)
    if (s.state.gpr[i]) regs[register_name(Register::q(static_cast<Gpr>(i)))] = hex_string(s.state.gpr[i]);
  j["registers"] = regs;
  json mem = json::array();
  const auto& bytes = s.state.memory.bytes();
  for (auto it = bytes.begin(); it != bytes.end();) {
    json run = json::array();
    const std::uint64_t start = it->first;
    std::uint64_t next = start;
    while (it != bytes.end() && it->first == next) {
      run.push_back(it->second);
      ++it;
      ++next;
    }
    mem.push_back({{"address", hex_string(start)}, {"bytes", run}});
  }
  j["memory"] = mem;
  json sec = json::array();
  for (const auto& r : s.state.memory.secrets()) sec.push_back({{"start", hex_string(r.start)}, {"length", r.length}});
  j["secret_regions"] = sec;
  json warm = json::array();
  for (auto l : s.warm_lines) warm.push_back(hex_string(l << 6));
  j["warm_lines"] = warm;
  if (s.step_limit) j["step_limit"] = *s.step_limit;
  return j;
}

TimingConfig timing_from_json(const json& j, TimingConfig t) {
  check_schema(j);
  static const std::set<std::string> known = {"schema", "issue_width", "lat_alu", "lat_load_warm",
                                              "lat_load_cold", "branch_resolve_extra", "max_spec_depth",
                                              "rob_size", "warm_lines"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw JsonInputError("timing: unknown field '" + k + "'");
  auto field = [&](const char* name, unsigned& dst) {
    if (auto it = j.find(name); it != j.end()) dst = json_unsigned(*it, name);
  };
  field("issue_width", t.issue_width);
  field("lat_alu", t.lat_alu);
  field("lat_load_warm", t.lat_load_warm);
  field("lat_load_cold", t.lat_load_cold);
  field("branch_resolve_extra", t.branch_resolve_extra);
  field("max_spec_depth", t.max_spec_depth);
  field("rob_size", t.rob_size);
  if (auto it = j.find("warm_lines"); it != j.end())
    for (const auto& a : *it) t.warm_lines.insert(line_of(json_u64(a, "warm_lines")));
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw JsonInputError(std::string("timing: ") + e.what());
  }
  return t;
}

json timing_to_json(const TimingConfig& t) {
  json warm = json::array();
  for (auto l : t.warm_lines) warm.push_back(hex_string(l << 6));
  return {{"schema", kSchemaVersion},
          {"issue_width", t.issue_width},
          {"lat_alu", t.lat_alu},
          {"lat_load_warm", t.lat_load_warm},
          {"lat_load_cold", t.lat_load_cold},
          {"branch_resolve_extra", t.branch_resolve_extra},
          {"max_spec_depth", t.max_spec_depth},
          {"rob_size", t.rob_size},
          {"warm_lines", warm}};
}

MispredictPolicy policy_from_json(const json& j) {
  check_schema(j);
  if (!j.contains("kind") || !j.at("kind").is_string()) throw JsonInputError("policy: missing \"kind\"");
  const auto kind = parse_policy_kind(j.at("kind").get<std::string>());
  if (!kind) throw JsonInputError("policy: unknown kind " + j.at("kind").dump());
  MispredictPolicy p;
  p.kind = *kind;
  if (p.kind == MispredictPolicy::Kind::Chosen) {
    if (!j.contains("chosen")) throw JsonInputError("policy: kind \"chosen\" needs a \"chosen\" list");
    for (const auto& c : j.at("chosen")) {
      if (!c.contains("function") || !c.contains("ordinal") || !c.contains("taken"))
        throw JsonInputError("policy: chosen entries need function, ordinal and taken");
      p.chosen[{c.at("function").get<std::string>(), json_u64(c.at("ordinal"), "ordinal")}] =
          c.at("taken").get<bool>();
    }
  }
  return p;
}

json policy_to_json(const MispredictPolicy& p) {
  json j{{"schema", kSchemaVersion}, {"kind", std::string(policy_kind_name(p.kind))}};
  if (p.kind == MispredictPolicy::Kind::Chosen) {
    json c = json::array();
    for (const auto& [site, taken] : p.chosen)
      c.push_back({{"function", site.function}, {"ordinal", site.ordinal}, {"taken", taken}});
    j["chosen"] = c;
  }
  return j;
}

json event_to_json(const TraceEvent& e) {
  return {{"issue_cycle", e.issue_cycle},
          {"kind", e.kind == MemKind::Load ? "load" : "store"},
          {"address", hex_string(e.address)},
          {"line", e.line},
          {"width", e.width},
          {"speculative", e.speculative},
          {"squashed", e.squashed},
          {"address_taint", e.address_taint}};
}

json pass_report_to_json(const PassReport& r) {
  json skipped = json::array();
  for (const auto& s : r.skipped_branches)
    skipped.push_back({{"function", s.function}, {"line", s.span.line}, {"reason", s.reason}});
  return {{"branches_instrumented", r.branches_instrumented},
          {"loads_instrumented", r.loads_instrumented},
          {"instructions_inserted", r.instructions_inserted},
          {"flags_conflicts_resolved", r.flags_conflicts_resolved},
          {"edges_instrumented", r.edges_instrumented},
          {"trampoline_jumps", r.trampoline_jumps},
          {"skipped_branches", skipped}};
}

json metrics_to_json(const SimMetrics& m) {
  return {{"cycles", m.cycles}, {"dynamic_instructions", m.dynamic_instructions}, {"ipc", m.ipc}};
}

}  // namespace bcbguard
