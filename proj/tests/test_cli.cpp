#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kTmp = fs::temp_directory_path() / "bcb_cli_test";

struct Run {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Run cli(const std::string& args) {
  fs::create_directories(kTmp);
  const auto out = kTmp / "stdout", err = kTmp / "stderr";
  const std::string cmd = std::string("\"") + BCB_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(out), slurp(err)};
}

std::string corpus(const char* name) { return std::string(BCB_CORPUS_DIR) + "/" + name; }

fs::path write_tmp(const char* name, const std::string& text) {
  fs::create_directories(kTmp);
  const auto p = kTmp / name;
  std::ofstream(p) << text;
  return p;
}

std::vector<json> jsonl(const std::string& s) {
  std::vector<json> v;
  std::istringstream is(s);
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) v.push_back(json::parse(line));
  return v;
}

}  // namespace

TEST_CASE("print-defaults is valid JSON") {
  const auto r = cli("--print-defaults");
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("timing").at("issue_width") == 4);
  CHECK(j.at("timing").at("lat_load_cold") == 200);
  CHECK(j.contains("policy"));
  CHECK(j.contains("pass"));
}

TEST_CASE("harden writes assembly and a report") {
  const auto out = kTmp / "h.s";
  auto r = cli("harden " + corpus("bounds_check.s") + " --pass lahf -o " + out.string());
  REQUIRE(r.code == 0);
  const auto rep = json::parse(r.out);
  CHECK(rep.at("instructions_inserted") == 11);
  CHECK(slurp(out).find("lahf") != std::string::npos);

  r = cli("harden " + corpus("bounds_check.s") + " --pass lahf --figure-fidelity");
  REQUIRE(r.code == 0);
  const std::string triple = "\tlahf\n\txorq %rax, %r15\n\tpopq %rax\n";
  const auto at = r.out.find(triple);
  REQUIRE(at != std::string::npos);
  CHECK(r.out.find(triple, at + 1) == std::string::npos);

  // deterministic
  CHECK(cli("harden " + corpus("tight.s") + " --pass slh").out == cli("harden " + corpus("tight.s") + " --pass slh").out);
}

TEST_CASE("harden: parse, reserved, io and usage errors") {
  const auto bad = write_tmp("bad.s", "f:\n\tmovq (%rax,%rbx,3), %rcx\n");
  auto r = cli("harden " + bad.string() + " --pass lfence");
  CHECK(r.code == 2);
  CHECK(r.err.find(":2:") != std::string::npos);

  const auto r15 = write_tmp("r15.s", "f:\n\tcmpq $1, %rdi\n\tjl .L\n\tmovq %r15, %rax\n.L:\n\tret\n");
  CHECK(cli("harden " + r15.string() + " --pass slh").code == 3);
  CHECK(cli("harden " + r15.string() + " --pass lfence").code == 0);
  CHECK(cli("harden " + r15.string() + " --pass slh --dep-reg r13").code == 0);

  CHECK(cli("harden /nonexistent/x.s --pass lfence").code == 4);
  CHECK(cli("harden " + corpus("bounds_check.s") + " --pass retpoline").code == 2);
}

TEST_CASE("exec prints the final state") {
  const auto st = write_tmp("st.json", R"({"registers": {"rdi": 3, "rsi": "0x1000", "rdx": "0x2000"}})");
  const auto r = cli("exec " + corpus("bounds_check.s") + " --state " + st.string());
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("dynamic_instructions") == 6);
  CHECK(j.at("mem_events").size() == 2);
  CHECK(j.at("registers").contains("rax"));
}

TEST_CASE("simulate: native gadget leaks, hardened ones do not") {
  const std::string in = corpus("size_in_memory.s");
  const auto st = write_tmp("atk.json", json::parse(slurp(corpus("size_in_memory.json"))).at("attack").at("state").dump());
  const std::string common = " --state " + st.string() + " --policy always-wrong --warm 0x18000";
  auto r = cli("simulate " + in + common);
  CHECK(r.code == 10);
  bool leak_line = false, metrics_line = false;
  for (const auto& j : jsonl(r.out)) {
    leak_line = leak_line || (j.at("type") == "leak_report" && j.at("leaked") == true);
    metrics_line = metrics_line || j.at("type") == "metrics";
  }
  CHECK(leak_line);
  CHECK(metrics_line);
  for (const char* p : {"lfence", "lahf", "slh"}) {
    INFO(p);
    CHECK(cli("simulate " + in + common + " --pass " + p).code == 0);
  }
  CHECK(cli("simulate " + in + common).out == r.out);
}

TEST_CASE("simulate: policy and timing files") {
  const auto pol = write_tmp("pol.json", R"({"kind": "chosen", "chosen": [{"function": "victim", "ordinal": 0, "taken": false}]})");
  const auto tm = write_tmp("t.json", R"({"issue_width": 2})");
  CHECK(cli("simulate " + corpus("bounds_check.s") + " --policy " + pol.string() + " --timing " + tm.string()).code == 0);
  const auto badt = write_tmp("bt.json", R"({"issue_width": 0})");
  CHECK(cli("simulate " + corpus("bounds_check.s") + " --timing " + badt.string()).code == 2);
}

TEST_CASE("bench formats and failures") {
  const auto dir = kTmp / "mini";
  fs::create_directories(dir);
  fs::copy_file(corpus("bounds_check.s"), dir / "bounds_check.s", fs::copy_options::overwrite_existing);
  fs::copy_file(corpus("bounds_check.json"), dir / "bounds_check.json", fs::copy_options::overwrite_existing);
  auto r = cli("bench " + dir.string() + " --format csv");
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("program,variant,ok,", 0) == 0);
  CHECK(r.out.find("bounds_check,lahf,true") != std::string::npos);
  r = cli("bench " + dir.string() + " --format json --passes lfence");
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).at("results").size() == 2);
  CHECK(cli("bench " + dir.string() + " --format md").out.find("| bounds_check | slh |") != std::string::npos);

  std::ofstream(dir / "r15.s") << "victim:\n\tcmpq $1, %rdi\n\tjl .L\n\tmovq %r15, %rax\n.L:\n\tret\n";
  std::ofstream(dir / "r15.json") << R"({"schema": 1, "entry": "victim", "class": "kernel", "vectors": [{}], "bench": {}})";
  CHECK(cli("bench " + dir.string() + " --format csv").code == 11);
  fs::remove_all(dir);
}

TEST_CASE("verify checks without touching inputs") {
  const auto p = write_tmp("v.s", "\t.text\nf:\n\tcmpq $1, %rdi\n\tjl .L\n\tnop\n.L:\n\tret\n");
  const auto before = slurp(p);
  const auto t0 = fs::last_write_time(p);
  auto r = cli("verify " + p.string() + " " + corpus("bounds_check.s"));
  CHECK(r.code == 0);
  CHECK_NOTHROW(json::parse(r.out));
  CHECK(slurp(p) == before);
  CHECK(fs::last_write_time(p) == t0);

  const auto r15 = write_tmp("vr.s", "f:\n\tmovq %r15, %rax\n\tret\n");
  CHECK(cli("verify " + r15.string() + " --pass slh").code == 3);
  CHECK(cli("verify " + r15.string() + " --reserved r14").code == 0);
  const auto bad = write_tmp("vb.s", "f:\n\tfrob\n");
  CHECK(cli("verify " + bad.string()).code == 2);
}
