// bcbguard: harden / exec / simulate / bench / verify
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bcbguard/corpus.hpp"
#include "bcbguard/frontend.hpp"
#include "bcbguard/interp.hpp"
#include "bcbguard/metrics.hpp"
#include "bcbguard/passes.hpp"
#include "bcbguard/specsim.hpp"
#include "bcbguard/state_io.hpp"

using namespace bcbguard;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kFail = 1, kParse = 2, kReserved = 3, kIo = 4, kLeak = 10, kBenchFail = 11 };

// Thrown for any exit other than 0; carries the code.
struct ExitWith {
  int code;
  std::string message;
};

struct Options {
  // shared
  std::vector<std::string> inputs;
  std::string output;
  std::string entry;
  std::string state_file;
  // pass
  std::string pass;
  std::string dep_reg = "r15";
  std::string zero_reg = "r14";
  bool both_edges = false;
  bool taken_only = false;
  bool figure_fidelity = false;
  std::string report_file;
  // simulator
  std::string timing_file;
  std::string policy = "never";
  std::vector<std::string> secrets;
  std::vector<std::string> warm;
  std::string format = "md";
  std::vector<std::string> passes;
  std::vector<std::string> reserved;
};

std::string slurp(const std::string& path) {
  try {
    return read_file(path);
  } catch (const CorpusError& e) {
    throw ExitWith{kIo, e.what()};
  }
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw ExitWith{kIo, "cannot write " + path};
}

json parse_json_file(const std::string& path) {
  const auto text = slurp(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ExitWith{kParse, path + ": " + e.what()};
  }
}

Program load_program(const std::string& path) {
  const auto text = slurp(path);
  auto r = parse_asm(text, path);
  for (const auto& w : r.warnings)
    std::cerr << path << ':' << w.span.line << ':' << w.span.column << ": warning: " << w.message
              << " (skipped directives are not preserved in output)\n";
  if (!r.ok()) {
    std::string msg;
    for (const auto& e : r.errors) msg += format_error(e, path) + "\n";
    if (!msg.empty()) msg.pop_back();
    throw ExitWith{kParse, msg};
  }
  return std::move(*r.program);
}

std::string pick_entry(const Program& p, const std::string& wanted) {
  if (!wanted.empty()) {
    if (!p.find(wanted)) throw ExitWith{kParse, "entry function '" + wanted + "' is not defined"};
    return wanted;
  }
  if (p.find("main")) return "main";
  if (p.functions.empty()) throw ExitWith{kParse, "program defines no functions"};
  return p.functions.front().name;
}

std::uint64_t parse_number(const std::string& s, const char* what) {
  try {
    return json_u64(json(s), what);
  } catch (const JsonInputError& e) {
    throw ExitWith{kParse, e.what()};
  }
}

std::vector<SecretRegion> parse_secrets(const std::vector<std::string>& specs) {
  std::vector<SecretRegion> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ExitWith{kParse, "--secret expects START:LEN, got '" + s + "'"};
    out.push_back({parse_number(s.substr(0, colon), "--secret start"), parse_number(s.substr(colon + 1), "--secret length")});
  }
  return out;
}

std::vector<std::uint64_t> parse_warm(const std::vector<std::string>& specs) {
  std::vector<std::uint64_t> out;
  for (const auto& s : specs) out.push_back(line_of(parse_number(s, "--warm")));
  return out;
}

Register parse_reg64(const std::string& name, const char* flag) {
  std::string n = name;
  if (!n.empty() && n[0] == '%') n.erase(0, 1);
  auto g = parse_gpr64(n);
  if (!g) throw ExitWith{kParse, std::string(flag) + ": '" + name + "' is not a 64-bit general-purpose register"};
  return Register::q(*g);
}

PassKind parse_pass(const std::string& s) {
  auto k = parse_pass_kind(s);
  if (!k) throw ExitWith{kParse, "unknown pass '" + s + "' (lfence, lahf, slh, argdep)"};
  return *k;
}

PassConfig pass_config(const Options& o, PassKind kind) {
  PassConfig c;
  c.kind = kind;
  c.dep_register = parse_reg64(o.dep_reg, "--dep-reg");
  c.zero_register = parse_reg64(o.zero_reg, "--zero-reg");
  c.figure_fidelity = o.figure_fidelity;
  c.instrument_both_edges = !o.taken_only;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ExitWith{kParse, e.what()};
  }
  return c;
}

// "never", "always-wrong" or a JSON file
struct PolicyArg {
  std::optional<MispredictPolicy> fixed;
  std::string file;
};

PolicyArg parse_policy_arg(const std::string& s) {
  std::string k = s;
  for (auto& ch : k)
    if (ch == '-') ch = '_';
  if (k == "never") return {MispredictPolicy::never(), {}};
  if (k == "always_wrong") return {MispredictPolicy::always_wrong(), {}};
  return {std::nullopt, s};
}

MispredictPolicy resolve_policy(const PolicyArg& a) {
  if (a.fixed) return *a.fixed;
  try {
    return policy_from_json(parse_json_file(a.file));
  } catch (const JsonInputError& e) {
    throw ExitWith{kParse, a.file + ": " + e.what()};
  }
}

TimingConfig resolve_timing(const std::string& file) {
  if (file.empty()) return {};
  try {
    return timing_from_json(parse_json_file(file));
  } catch (const JsonInputError& e) {
    throw ExitWith{kParse, file + ": " + e.what()};
  }
}

InitState resolve_state(const Options& o, const std::vector<SecretRegion>& secrets,
                        const std::vector<std::uint64_t>& warm) {
  InitState s;
  if (!o.state_file.empty()) {
    try {
      s = init_state_from_json(parse_json_file(o.state_file));
    } catch (const JsonInputError& e) {
      throw ExitWith{kParse, o.state_file + ": " + e.what()};
    }
  }
  for (const auto& r : secrets) s.state.memory.add_secret(r);
  s.warm_lines.insert(warm.begin(), warm.end());
  return s;
}

Hardened run_pass(const Program& p, const PassConfig& cfg) {
  try {
    return harden(p, cfg);
  } catch (const ReservedRegisterError& e) {
    std::string msg = "reserved register violation for pass " + std::string(pass_name(cfg.kind)) + ":";
    for (const auto& v : e.violations())
      msg += "\n  " + v.function + ":" + std::to_string(v.span.line) + ":" + std::to_string(v.span.column) +
             ": uses " + register_name(Register::q(v.reg));
    throw ExitWith{kReserved, msg};
  } catch (const StructuralError& e) {
    throw ExitWith{kParse, e.what()};
  }
}

json report_json(const Hardened& h, const PassConfig& cfg) {
  json j = pass_report_to_json(h.report);
  j["schema"] = kSchemaVersion;
  j["pass"] = pass_name(cfg.kind);
  return j;
}

// ---- commands ----

int cmd_harden(const Options& o) {
  const auto cfg = pass_config(o, parse_pass(o.pass));
  const auto program = load_program(o.inputs.at(0));
  const auto h = run_pass(program, cfg);
  const auto text = print_asm(h.program);
  const auto report = report_json(h, cfg).dump(2) + "\n";
  emit(o.output, text);
  if (!o.report_file.empty()) emit(o.report_file, report);
  else if (!o.output.empty() && o.output != "-") std::cout << report;
  else std::cerr << report;
  return kOk;
}

json state_json(const MachineState& s) {
  json regs = json::object();
  for (std::size_t i = 0; i < kGprCount; ++i)
    regs[register_name(Register::q(static_cast<Gpr>(i)))] = hex_string(s.gpr[i]);
  return {{"registers", regs}, {"rflags", hex_string(s.flags.to_rflags())}};
}

int cmd_exec(const Options& o) {
  const auto secrets = parse_secrets(o.secrets);
  std::optional<PassConfig> cfg;
  if (!o.pass.empty()) cfg = pass_config(o, parse_pass(o.pass));
  auto program = load_program(o.inputs.at(0));
  if (cfg) program = run_pass(program, *cfg).program;
  const auto entry = pick_entry(program, o.entry);
  const auto init = resolve_state(o, secrets, {});
  ExecOptions eo;
  if (init.step_limit) eo.step_limit = *init.step_limit;
  ExecResult r;
  try {
    r = exec(program, entry, init.state, eo);
  } catch (const ExecError& e) {
    throw ExitWith{kFail, std::string("execution error: ") + e.what()};
  }
  json j = state_json(r.final);
  j["schema"] = kSchemaVersion;
  j["entry"] = entry;
  j["dynamic_instructions"] = r.dynamic_instructions;
  json ev = json::array();
  for (const auto& m : r.mem_events)
    ev.push_back({{"kind", m.kind == MemKind::Load ? "load" : "store"},
                  {"address", hex_string(m.address)},
                  {"width", m.width},
                  {"address_taint", m.address_taint}});
  j["mem_events"] = ev;
  emit(o.output, j.dump(2) + "\n");
  return kOk;
}

int cmd_simulate(const Options& o) {
  const auto secrets = parse_secrets(o.secrets);
  const auto warm = parse_warm(o.warm);
  const auto pol_arg = parse_policy_arg(o.policy);
  std::optional<PassConfig> cfg;
  if (!o.pass.empty()) cfg = pass_config(o, parse_pass(o.pass));

  auto program = load_program(o.inputs.at(0));
  if (cfg) program = run_pass(program, *cfg).program;
  const auto entry = pick_entry(program, o.entry);
  auto timing = resolve_timing(o.timing_file);
  const auto policy = resolve_policy(pol_arg);
  const auto init = resolve_state(o, secrets, warm);
  timing.warm_lines.insert(init.warm_lines.begin(), init.warm_lines.end());

  SimOptions so;
  if (init.step_limit) so.step_limit = *init.step_limit;
  SimResult r;
  try {
    r = simulate(program, entry, init.state, timing, policy, so);
  } catch (const ExecError& e) {
    throw ExitWith{kFail, std::string("execution error: ") + e.what()};
  } catch (const std::invalid_argument& e) {
    throw ExitWith{kParse, e.what()};
  }

  std::ostringstream os;
  for (const auto& e : r.trace.events) {
    json j = event_to_json(e);
    j["type"] = "event";
    os << j.dump() << '\n';
  }
  for (const auto& m : r.mispredicts) {
    json j{{"type", "mispredict"},
           {"function", m.site.function},
           {"ordinal", m.site.ordinal},
           {"resolve_cycle", m.resolve_cycle},
           {"window", m.window()}};
    os << j.dump() << '\n';
  }
  json leaks = json::array();
  for (const auto& e : r.leaks.leaks) leaks.push_back(event_to_json(e));
  os << json{{"type", "leak_report"}, {"leaked", r.leaks.leaked}, {"leaks", leaks}}.dump() << '\n';
  json m = metrics_to_json(r.metrics);
  m["type"] = "metrics";
  os << m.dump() << '\n';
  emit(o.output, os.str());
  return r.leaks.leaked ? kLeak : kOk;
}

int cmd_bench(const Options& o) {
  std::vector<PassKind> variants;
  for (const auto& p : o.passes) variants.push_back(parse_pass(p));
  if (variants.empty()) variants.assign(std::begin(kAllPasses), std::end(kAllPasses));
  const auto base = pass_config(o, variants.front());
  const auto pol_arg = parse_policy_arg(o.policy);
  if (o.format != "json" && o.format != "csv" && o.format != "md")
    throw ExitWith{kParse, "--format must be json, csv or md"};

  const auto timing = resolve_timing(o.timing_file);
  const auto policy = resolve_policy(pol_arg);
  const std::string dir = o.inputs.empty() ? std::string("corpus") : o.inputs.front();
  std::vector<CorpusEntry> corpus;
  try {
    corpus = load_corpus(dir);
  } catch (const CorpusError& e) {
    const bool missing = !std::filesystem::is_directory(dir);
    throw ExitWith{missing ? kIo : kParse, e.what()};
  }
  std::vector<BenchInput> inputs;
  for (const auto& e : corpus)
    if (e.bench) inputs.push_back({e.id, e.program, e.entry, *e.bench});
  const auto rep = run_bench(inputs, variants, timing, policy, base);
  const std::string text = o.format == "json" ? bench_json(rep) : o.format == "csv" ? bench_csv(rep) : bench_markdown(rep);
  emit(o.output, text);
  return rep.any_failed ? kBenchFail : kOk;
}

int cmd_verify(const Options& o) {
  std::vector<Gpr> reserved;
  if (!o.pass.empty()) reserved = pass_config(o, parse_pass(o.pass)).reserved();
  for (const auto& r : o.reserved) reserved.push_back(parse_reg64(r, "--reserved").gpr);

  int code = kOk;
  json files = json::array();
  for (const auto& path : o.inputs) {
    json f{{"file", path}};
    Program p;
    try {
      p = load_program(path);
    } catch (const ExitWith& e) {
      if (e.code == kIo) throw;
      std::cerr << e.message << '\n';
      f["parse"] = false;
      files.push_back(f);
      code = std::max(code, int(kParse));
      continue;
    }
    f["parse"] = true;
    const auto once = print_asm(p);
    const auto again = parse_asm(once, path);
    const bool round_trip = again.ok() && *again.program == p && print_asm(*again.program) == once;
    f["round_trip"] = round_trip;
    if (!round_trip) {
      std::cerr << path << ": print/parse round trip is not stable\n";
      code = std::max(code, int(kParse));
    }
    json viol = json::array();
    for (const auto& v : verify_reserved(p, reserved)) {
      viol.push_back({{"function", v.function},
                      {"line", v.span.line},
                      {"column", v.span.column},
                      {"register", register_name(Register::q(v.reg))}});
      std::cerr << path << ':' << v.span.line << ':' << v.span.column << ": reserved register "
                << register_name(Register::q(v.reg)) << " used in " << v.function << '\n';
    }
    if (!viol.empty() && code == kOk) code = kReserved;
    f["reserved_violations"] = viol;
    files.push_back(f);
  }
  emit(o.output, json{{"schema", kSchemaVersion}, {"files", files}}.dump(2) + "\n");
  return code;
}

std::string defaults_json() {
  const PassConfig pc;
  json pass{{"pass", pass_name(pc.kind)},
            {"dep_reg", register_name(pc.dep_register)},
            {"zero_reg", register_name(pc.zero_register)},
            {"both_edges", pc.instrument_both_edges},
            {"figure_fidelity", pc.figure_fidelity}};
  return json{{"schema", kSchemaVersion},
              {"timing", timing_to_json(TimingConfig{})},
              {"policy", policy_to_json(MispredictPolicy::never())},
              {"pass", pass},
              {"bench_step_limit", kBenchStepLimit},
              {"step_limit", ExecOptions{}.step_limit}}
             .dump(2) +
         "\n";
}

void add_pass_flags(CLI::App* c, Options& o, bool required) {
  auto* p = c->add_option("--pass", o.pass, "lfence | lahf | slh | argdep");
  if (required) p->required();
  c->add_option("--dep-reg", o.dep_reg, "dependency register (default r15)");
  c->add_option("--zero-reg", o.zero_reg, "zero register for slh (default r14)");
  auto* both = c->add_flag("--both-edges", o.both_edges, "instrument both outgoing edges (default)");
  auto* taken = c->add_flag("--taken-only", o.taken_only, "instrument only the taken edge");
  auto* fig = c->add_flag("--figure-fidelity", o.figure_fidelity, "taken edge only, as in the reference listing");
  both->excludes(taken)->excludes(fig);
}

void add_sim_flags(CLI::App* c, Options& o) {
  c->add_option("--entry", o.entry, "entry function (default main, else the first)");
  c->add_option("--state", o.state_file, "initial-state JSON");
  c->add_option("--timing", o.timing_file, "timing JSON (fields override the defaults)");
  c->add_option("--secret", o.secrets, "secret region START:LEN (repeatable)");
  c->add_option("--warm", o.warm, "warm cache line addresses")->delimiter(',');
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bcbguard: bounds-check-bypass hardening passes, interpreter and speculative timing simulator"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the compiled-in timing, policy and pass defaults");
  Options o;

  auto* harden_cmd = app.add_subcommand("harden", "harden an assembly file");
  harden_cmd->add_option("input", o.inputs, "input .s")->required()->expected(1);
  harden_cmd->add_option("-o,--output", o.output, "hardened .s (default stdout)");
  harden_cmd->add_option("--report", o.report_file, "write the PassReport JSON here");
  add_pass_flags(harden_cmd, o, true);

  auto* exec_cmd = app.add_subcommand("exec", "run the architectural interpreter");
  exec_cmd->add_option("input", o.inputs, "input .s")->required()->expected(1);
  exec_cmd->add_option("-o,--output", o.output, "result JSON (default stdout)");
  exec_cmd->add_option("--entry", o.entry, "entry function (default main, else the first)");
  exec_cmd->add_option("--state", o.state_file, "initial-state JSON");
  exec_cmd->add_option("--secret", o.secrets, "secret region START:LEN (repeatable)");
  add_pass_flags(exec_cmd, o, false);

  auto* sim_cmd = app.add_subcommand("simulate", "run the speculative timing simulator; exit 10 on a leak");
  sim_cmd->add_option("input", o.inputs, "input .s")->required()->expected(1);
  sim_cmd->add_option("-o,--output", o.output, "JSON-lines trace (default stdout)");
  sim_cmd->add_option("--policy", o.policy, "never | always-wrong | policy JSON file");
  add_sim_flags(sim_cmd, o);
  add_pass_flags(sim_cmd, o, false);

  auto* bench_cmd = app.add_subcommand("bench", "benchmark every pass over a corpus directory");
  bench_cmd->add_option("corpus", o.inputs, "corpus directory (default ./corpus)")->expected(0, 1);
  bench_cmd->add_option("-o,--output", o.output, "report file (default stdout)");
  bench_cmd->add_option("--format", o.format, "json | csv | md")->check(CLI::IsMember({"json", "csv", "md"}));
  bench_cmd->add_option("--passes", o.passes, "variants to run (default all)")->delimiter(',');
  bench_cmd->add_option("--timing", o.timing_file, "timing JSON");
  bench_cmd->add_option("--policy", o.policy, "never | always-wrong | policy JSON file");
  bench_cmd->add_option("--dep-reg", o.dep_reg, "dependency register");
  bench_cmd->add_option("--zero-reg", o.zero_reg, "zero register for slh");
  bench_cmd->add_flag("--taken-only", o.taken_only, "instrument only the taken edge");

  auto* verify_cmd = app.add_subcommand("verify", "check parse round trip and reserved registers; never writes inputs");
  verify_cmd->add_option("inputs", o.inputs, "input .s files")->required();
  verify_cmd->add_option("-o,--output", o.output, "summary JSON (default stdout)");
  verify_cmd->add_option("--pass", o.pass, "check the registers this pass reserves");
  verify_cmd->add_option("--dep-reg", o.dep_reg, "dependency register");
  verify_cmd->add_option("--zero-reg", o.zero_reg, "zero register for slh");
  verify_cmd->add_option("--reserved", o.reserved, "extra reserved registers")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kParse;
  }

  try {
    if (print_defaults) {
      std::cout << defaults_json();
      return kOk;
    }
    if (*harden_cmd) return cmd_harden(o);
    if (*exec_cmd) return cmd_exec(o);
    if (*sim_cmd) return cmd_simulate(o);
    if (*bench_cmd) return cmd_bench(o);
    if (*verify_cmd) return cmd_verify(o);
    std::cerr << app.help();
    return kParse;
  } catch (const ExitWith& e) {
    if (!e.message.empty()) std::cerr << "bcbguard: " << e.message << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "bcbguard: " << e.what() << '\n';
    return kFail;
  }
}
