// Gadget/kernel corpus: each NAME.s has a sidecar NAME.json
//
//   {"schema": 1, "entry": "victim", "class": "gadget" | "kernel",
//    "vectors": [<initial state>, ...],
//    "attack": {"state": <initial state>, "attack_lines": [addresses]},
//    "bench": <initial state>}
//
// Initial states use the state_io format.
#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcbguard/state_io.hpp"

namespace bcbguard {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttackSetup {
  InitState init;
  std::vector<std::uint64_t> attack_lines;  // line numbers
};

struct CorpusEntry {
  std::string id;  // file stem
  std::filesystem::path path;
  std::string source;
  Program program;
  std::string entry;
  std::string kind;  // "gadget" or "kernel"
  std::vector<InitState> vectors;
  std::optional<AttackSetup> attack;
  std::optional<InitState> bench;
};

CorpusEntry load_corpus_entry(const std::filesystem::path& asm_path);
/// Every *.s in `dir`, sorted by id.
std::vector<CorpusEntry> load_corpus(const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& p);

}  // namespace bcbguard
