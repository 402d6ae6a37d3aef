#include "bcbguard/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "bcbguard/frontend.hpp"

namespace bcbguard {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorpusError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CorpusEntry load_corpus_entry(const std::filesystem::path& asm_path) {
  CorpusEntry e;
  e.id = asm_path.stem().string();
  e.path = asm_path;
  e.source = read_file(asm_path);
  auto parsed = parse_asm(e.source, asm_path.filename().string());
  if (!parsed.ok()) {
    std::string msg = "corpus entry " + e.id + " does not parse:";
    for (const auto& err : parsed.errors) msg += "\n  " + format_error(err, asm_path.filename().string());
    throw CorpusError(msg);
  }
  e.program = std::move(*parsed.program);

  auto meta_path = asm_path;
  meta_path.replace_extension(".json");
  try {
    const auto j = nlohmann::json::parse(read_file(meta_path));
    if (j.value("schema", 0) != kSchemaVersion) throw CorpusError(meta_path.string() + ": schema must be 1");
    e.entry = j.at("entry").get<std::string>();
    e.kind = j.value("class", "gadget");
    if (!e.program.find(e.entry)) throw CorpusError(meta_path.string() + ": entry '" + e.entry + "' not defined");
    for (const auto& v : j.value("vectors", nlohmann::json::array())) e.vectors.push_back(init_state_from_json(v));
    if (auto a = j.find("attack"); a != j.end()) {
      AttackSetup s;
      s.init = init_state_from_json(a->at("state"));
      for (const auto& l : a->value("attack_lines", nlohmann::json::array()))
        s.attack_lines.push_back(line_of(json_u64(l, "attack_lines")));
      e.attack = std::move(s);
    }
    if (auto b = j.find("bench"); b != j.end()) e.bench = init_state_from_json(*b);
  } catch (const nlohmann::json::exception& ex) {
    throw CorpusError(meta_path.string() + ": " + ex.what());
  } catch (const JsonInputError& ex) {
    throw CorpusError(meta_path.string() + ": " + ex.what());
  }
  return e;
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw CorpusError("corpus directory " + dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(dir))
    if (f.is_regular_file() && f.path().extension() == ".s") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  std::vector<CorpusEntry> out;
  for (const auto& f : files) out.push_back(load_corpus_entry(f));
  return out;
}

}  // namespace bcbguard
