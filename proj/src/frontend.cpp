#include "bcbguard/frontend.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>
#include <map>
#include <set>

namespace bcbguard {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\v' || c == '\f'; }

bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '$';
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// A slice of the current line with its 0-based column.
struct Piece {
  std::string_view text;
  std::size_t col = 0;
};

Piece trim(Piece p) {
  while (!p.text.empty() && is_space(p.text.front())) {
    p.text.remove_prefix(1);
    ++p.col;
  }
  while (!p.text.empty() && is_space(p.text.back())) p.text.remove_suffix(1);
  return p;
}

Piece sub(Piece p, std::size_t from, std::size_t len = std::string_view::npos) {
  from = std::min(from, p.text.size());
  return {p.text.substr(from, len), p.col + from};
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  bool neg = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    neg = s.front() == '-';
    s.remove_prefix(1);
  }
  if (s.empty()) return std::nullopt;
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  std::uint64_t mag = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), mag, base);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  if (neg) {
    if (mag > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()) + 1) return std::nullopt;
    return static_cast<std::int64_t>(0 - mag);
  }
  if (base == 10 && mag > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
    return std::nullopt;
  return static_cast<std::int64_t>(mag);  // hex may spell the full unsigned range
}

struct Mnemonic {
  Opcode op;
  std::optional<CondCode> cc;
  std::optional<std::uint8_t> suffix_width;
};

std::optional<std::uint8_t> suffix_width(char c) {
  switch (c) {
    case 'b': return 8;
    case 'w': return 16;
    case 'l': return 32;
    case 'q': return 64;
    default: return std::nullopt;
  }
}

std::optional<Opcode> base_opcode(std::string_view m) {
  static const std::map<std::string_view, Opcode> kBase = {
      {"mov", Opcode::Mov},     {"lea", Opcode::Lea},   {"add", Opcode::Add},       {"sub", Opcode::Sub},
      {"imul", Opcode::Imul},   {"xor", Opcode::Xor},   {"and", Opcode::And},       {"or", Opcode::Or},
      {"cmp", Opcode::Cmp},     {"test", Opcode::Test}, {"push", Opcode::Push},     {"pop", Opcode::Pop},
      {"lahf", Opcode::Lahf},   {"sahf", Opcode::Sahf}, {"pushf", Opcode::Pushf},   {"popf", Opcode::Popf},
      {"jmp", Opcode::Jmp},     {"call", Opcode::Call}, {"ret", Opcode::Ret},       {"lfence", Opcode::Lfence},
      {"nop", Opcode::Nop},
  };
  auto it = kBase.find(m);
  if (it == kBase.end()) return std::nullopt;
  return it->second;
}

bool suffix_allowed(Opcode op, std::uint8_t w) {
  switch (op) {
    case Opcode::Lahf:
    case Opcode::Sahf:
    case Opcode::Lfence:
    case Opcode::Nop: return false;
    case Opcode::Push:
    case Opcode::Pop:
    case Opcode::Pushf:
    case Opcode::Popf:
    case Opcode::Ret:
    case Opcode::Call:
    case Opcode::Jmp: return w == 64;
    default: return true;
  }
}

std::optional<Mnemonic> decode_mnemonic(std::string_view m) {
  if (auto op = base_opcode(m)) return Mnemonic{*op, std::nullopt, std::nullopt};
  if (m.size() > 4 && m.substr(0, 4) == "cmov") {
    auto rest = m.substr(4);
    if (auto cc = parse_cond(rest)) return Mnemonic{Opcode::Cmov, cc, std::nullopt};
    if (auto w = suffix_width(rest.back())) {
      if (auto cc = parse_cond(rest.substr(0, rest.size() - 1))) return Mnemonic{Opcode::Cmov, cc, w};
    }
    return std::nullopt;
  }
  if (m.size() > 1 && m[0] == 'j') {
    if (auto cc = parse_cond(m.substr(1))) return Mnemonic{Opcode::Jcc, cc, std::nullopt};
  }
  if (m.size() > 1) {
    if (auto w = suffix_width(m.back())) {
      if (auto op = base_opcode(m.substr(0, m.size() - 1)); op && suffix_allowed(*op, *w))
        return Mnemonic{*op, std::nullopt, w};
    }
  }
  return std::nullopt;
}

class LineParser {
 public:
  LineParser(std::uint32_t line, std::vector<ParseError>& errors) : line_(line), errors_(errors) {}

  void error(Piece at, std::string message, std::string expected) {
    errors_.push_back({span_of(at), std::move(message), std::move(expected)});
  }

  SourceSpan span_of(Piece p) const {
    return {line_, static_cast<std::uint32_t>(p.col + 1), static_cast<std::uint32_t>(p.text.size())};
  }

  std::optional<Register> reg(Piece p) {
    p = trim(p);
    if (p.text.empty() || p.text.front() != '%') {
      error(p, "expected a register, got '" + std::string(p.text) + "'", "register");
      return std::nullopt;
    }
    auto r = parse_register(lower(p.text.substr(1)));
    if (!r) error(p, "unknown register '" + std::string(p.text) + "'", "register");
    return r;
  }

  std::optional<Operand> memory(Piece whole, std::size_t open) {
    Piece disp_part = trim(sub(whole, 0, open));
    MemoryRef m;
    if (!disp_part.text.empty()) {
      auto d = parse_int(disp_part.text);
      if (!d) {
        error(disp_part, "malformed displacement '" + std::string(disp_part.text) + "'", "integer");
        return std::nullopt;
      }
      m.disp = *d;
    }
    const auto close = whole.text.find(')', open);
    if (close == std::string_view::npos) {
      error(whole, "malformed memory operand '" + std::string(whole.text) + "': missing ')'", "')'");
      return std::nullopt;
    }
    if (!trim(sub(whole, close + 1)).text.empty()) {
      error(whole, "malformed memory operand '" + std::string(whole.text) + "'", "end of operand");
      return std::nullopt;
    }
    Piece inner = sub(whole, open + 1, close - open - 1);
    std::vector<Piece> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= inner.text.size(); ++i) {
      if (i == inner.text.size() || inner.text[i] == ',') {
        parts.push_back(trim(sub(inner, start, i - start)));
        start = i + 1;
      }
    }
    if (parts.size() > 3) {
      error(whole, "malformed memory operand '" + std::string(whole.text) + "'", "memory operand");
      return std::nullopt;
    }
    if (!parts[0].text.empty()) {
      auto b = reg(parts[0]);
      if (!b) return std::nullopt;
      m.base = *b;
    }
    if (parts.size() >= 2) {
      if (parts[1].text.empty()) {
        error(whole, "malformed memory operand '" + std::string(whole.text) + "': missing index", "register");
        return std::nullopt;
      }
      auto x = reg(parts[1]);
      if (!x) return std::nullopt;
      if (x->gpr == Gpr::Rsp) {
        error(parts[1], "'" + std::string(parts[1].text) + "' cannot be used as an index register", "register");
        return std::nullopt;
      }
      m.index = *x;
    }
    if (parts.size() == 3) {
      auto s = parse_int(parts[2].text);
      if (!s || (*s != 1 && *s != 2 && *s != 4 && *s != 8)) {
        error(parts[2], "scale must be 1, 2, 4, or 8, got '" + std::string(parts[2].text) + "'", "scale");
        return std::nullopt;
      }
      m.scale = static_cast<std::uint8_t>(*s);
    }
    for (const auto& r : {m.base, m.index}) {
      if (r && r->width != 64) {
        error(whole, "address registers must be 64-bit in '" + std::string(whole.text) + "'", "register");
        return std::nullopt;
      }
    }
    if (!m.base && !m.index && m.disp == 0) {
      error(whole, "memory operand '" + std::string(whole.text) + "' needs a base, an index, or a displacement",
            "memory operand");
      return std::nullopt;
    }
    return m;
  }

  std::optional<Operand> operand(Piece p) {
    p = trim(p);
    if (p.text.empty()) {
      error(p, "empty operand", "operand");
      return std::nullopt;
    }
    const char c = p.text.front();
    if (c == '$') {
      auto v = parse_int(p.text.substr(1));
      if (!v) {
        error(p, "malformed immediate '" + std::string(p.text) + "'", "integer");
        return std::nullopt;
      }
      return Immediate{*v};
    }
    if (c == '%') {
      auto r = reg(p);
      if (!r) return std::nullopt;
      return *r;
    }
    if (c == '*') {
      error(p, "indirect branch operand '" + std::string(p.text) + "' is not supported", "label");
      return std::nullopt;
    }
    if (auto open = p.text.find('('); open != std::string_view::npos) return memory(p, open);
    if (c == '-' || c == '+' || std::isdigit(static_cast<unsigned char>(c))) {
      auto v = parse_int(p.text);
      if (!v) {
        error(p, "malformed displacement '" + std::string(p.text) + "'", "integer");
        return std::nullopt;
      }
      if (*v == 0) {
        error(p, "memory operand '" + std::string(p.text) + "' needs a base, an index, or a displacement",
              "memory operand");
        return std::nullopt;
      }
      return MemoryRef{*v, std::nullopt, std::nullopt, 1};
    }
    if (is_ident_start(c) && std::all_of(p.text.begin(), p.text.end(), is_ident_char))
      return LabelRef{std::string(p.text)};
    error(p, "malformed operand '" + std::string(p.text) + "'", "operand");
    return std::nullopt;
  }

  std::optional<Instruction> instruction(Piece stmt) {
    std::size_t mend = 0;
    while (mend < stmt.text.size() && !is_space(stmt.text[mend])) ++mend;
    Piece mpiece = sub(stmt, 0, mend);
    const std::string mname = lower(mpiece.text);
    auto mn = decode_mnemonic(mname);
    if (!mn) {
      error(mpiece, "unknown mnemonic '" + std::string(mpiece.text) + "'", "mnemonic");
      return std::nullopt;
    }

    Instruction inst;
    inst.op = mn->op;
    inst.cc = mn->cc;
    inst.span = span_of(trim(stmt));

    Piece rest = trim(sub(stmt, mend));
    std::vector<Piece> raw;
    if (!rest.text.empty()) {
      int depth = 0;
      std::size_t start = 0;
      for (std::size_t i = 0; i <= rest.text.size(); ++i) {
        if (i < rest.text.size()) {
          if (rest.text[i] == '(') ++depth;
          if (rest.text[i] == ')') --depth;
        }
        if (i == rest.text.size() || (rest.text[i] == ',' && depth == 0)) {
          raw.push_back(sub(rest, start, i - start));
          start = i + 1;
        }
      }
    }
    for (const auto& r : raw) {
      auto op = operand(r);
      if (!op) return std::nullopt;
      inst.operands.push_back(std::move(*op));
    }
    if (!validate(inst, mpiece, raw, mn->suffix_width)) return std::nullopt;
    return inst;
  }

 private:
  enum Kind : unsigned { kImm = 1, kReg = 2, kMem = 4, kLabel = 8 };

  static unsigned kind_of(const Operand& o) {
    switch (o.index()) {
      case 0: return kImm;
      case 1: return kReg;
      case 2: return kMem;
      default: return kLabel;
    }
  }

  static std::string kind_names(unsigned k) {
    std::vector<std::string> names;
    if (k & kImm) names.emplace_back("immediate");
    if (k & kReg) names.emplace_back("register");
    if (k & kMem) names.emplace_back("memory");
    if (k & kLabel) names.emplace_back("label");
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) s += (i ? " or " : "") + names[i];
    return s;
  }

  bool validate(Instruction& inst, Piece mpiece, const std::vector<Piece>& raw,
                std::optional<std::uint8_t> suffix) {
    std::vector<unsigned> shape;
    switch (inst.op) {
      case Opcode::Mov:
      case Opcode::Add:
      case Opcode::Sub:
      case Opcode::Xor:
      case Opcode::And:
      case Opcode::Or:
      case Opcode::Cmp:
      case Opcode::Test: shape = {kImm | kReg | kMem, kReg | kMem}; break;
      case Opcode::Imul: shape = {kImm | kReg | kMem, kReg}; break;
      case Opcode::Lea: shape = {kMem, kReg}; break;
      case Opcode::Cmov: shape = {kReg | kMem, kReg}; break;
      case Opcode::Push: shape = {kImm | kReg}; break;
      case Opcode::Pop: shape = {kReg}; break;
      case Opcode::Jcc:
      case Opcode::Jmp:
      case Opcode::Call: shape = {kLabel}; break;
      default: break;
    }
    const std::string m(mpiece.text);
    if (inst.operands.size() != shape.size()) {
      error(mpiece,
            "'" + m + "' takes " + std::to_string(shape.size()) + " operand(s), got " +
                std::to_string(inst.operands.size()),
            "operand count");
      return false;
    }
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (!(kind_of(inst.operands[i]) & shape[i])) {
        error(raw[i], "operand '" + std::string(trim(raw[i]).text) + "' of '" + m + "' must be " +
                          kind_names(shape[i]),
              kind_names(shape[i]));
        return false;
      }
    }
    if (std::count_if(inst.operands.begin(), inst.operands.end(),
                      [](const Operand& o) { return std::holds_alternative<MemoryRef>(o); }) > 1) {
      error(mpiece, "'" + m + "' has more than one memory operand", "at most one memory operand");
      return false;
    }

    std::optional<std::uint8_t> reg_width;
    for (std::size_t i = 0; i < inst.operands.size(); ++i) {
      if (const auto* r = std::get_if<Register>(&inst.operands[i])) {
        if (reg_width && *reg_width != r->width) {
          error(raw[i], "operand size mismatch at '" + std::string(trim(raw[i]).text) + "'", "register");
          return false;
        }
        reg_width = r->width;
      }
    }
    switch (inst.op) {
      case Opcode::Push:
      case Opcode::Pop:
        if (reg_width && *reg_width != 64) {
          error(mpiece, "'" + m + "' supports only 64-bit registers", "64-bit register");
          return false;
        }
        [[fallthrough]];
      case Opcode::Pushf:
      case Opcode::Popf:
      case Opcode::Jcc:
      case Opcode::Jmp:
      case Opcode::Call:
      case Opcode::Ret:
      case Opcode::Lahf:
      case Opcode::Sahf:
      case Opcode::Lfence:
      case Opcode::Nop: inst.width = 64; return true;
      default: break;
    }
    if (suffix && reg_width && *suffix != *reg_width) {
      error(mpiece, "suffix of '" + m + "' does not match its register operands", "width suffix");
      return false;
    }
    const auto width = suffix ? suffix : reg_width;
    if (!width) {
      error(mpiece, "ambiguous operand size for '" + m + "'; add a width suffix", "width suffix");
      return false;
    }
    if ((inst.op == Opcode::Cmov || inst.op == Opcode::Imul) && *width == 8) {
      error(mpiece, "'" + m + "' has no 8-bit form", "width suffix");
      return false;
    }
    inst.width = *width;
    return true;
  }

  std::uint32_t line_;
  std::vector<ParseError>& errors_;
};

/// Splits a leading "ident:" off a statement. Returns the label piece.
std::optional<Piece> leading_label(Piece& stmt) {
  if (stmt.text.empty() || !is_ident_start(stmt.text.front())) return std::nullopt;
  std::size_t i = 0;
  while (i < stmt.text.size() && is_ident_char(stmt.text[i])) ++i;
  if (i >= stmt.text.size() || stmt.text[i] != ':') return std::nullopt;
  Piece label = sub(stmt, 0, i);
  stmt = trim(sub(stmt, i + 1));
  return label;
}

bool starts_function(std::string_view label) { return label.substr(0, 2) != ".L"; }

}  // namespace

ParseResult parse_asm(std::string_view text, std::string source_name) {
  ParseResult result;
  Program prog;
  prog.source_name = std::move(source_name);
  std::set<std::string, std::less<>> globals;
  std::vector<SourceSpan> fn_spans;

  std::uint32_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

    LineParser lp(line_no, result.errors);
    Piece stmt = trim(Piece{line, 0});
    while (auto label = leading_label(stmt)) {
      const std::string name(label->text);
      if (starts_function(name)) {
        prog.functions.push_back(Function{name, false, {}});
        fn_spans.push_back(lp.span_of(*label));
      } else if (prog.functions.empty()) {
        lp.error(*label, "label '" + name + "' appears outside of a function", "function label");
        continue;
      } else {
        prog.functions.back().body.emplace_back(Label{name, lp.span_of(*label)});
      }
    }
    if (stmt.text.empty()) continue;

    if (stmt.text.front() == '.') {
      std::size_t dend = 0;
      while (dend < stmt.text.size() && !is_space(stmt.text[dend])) ++dend;
      const std::string dir = lower(stmt.text.substr(0, dend));
      Piece arg = trim(sub(stmt, dend));
      if (dir == ".globl" || dir == ".global") {
        if (arg.text.empty()) lp.error(stmt, "'" + dir + "' needs a symbol name", "symbol");
        else globals.insert(std::string(arg.text));
      } else if (dir != ".text") {
        result.warnings.push_back({lp.span_of(stmt), "ignored directive '" + std::string(stmt.text) + "'"});
      }
      continue;
    }

    auto inst = lp.instruction(stmt);
    if (!inst) continue;
    if (prog.functions.empty()) {
      lp.error(stmt, "instruction '" + std::string(stmt.text) + "' appears outside of a function", "function label");
      continue;
    }
    prog.functions.back().body.emplace_back(std::move(*inst));
  }

  // Label resolution.
  std::map<std::string, SourceSpan, std::less<>> defined;
  std::set<std::string, std::less<>> function_names;
  for (std::size_t fi = 0; fi < prog.functions.size(); ++fi) {
    auto& f = prog.functions[fi];
    f.global = globals.count(f.name) != 0;
    if (!function_names.insert(f.name).second || !defined.emplace(f.name, fn_spans[fi]).second)
      result.errors.push_back({fn_spans[fi], "duplicate label '" + f.name + "'", "unique label"});
    for (const auto& it : f.body) {
      if (const auto* l = std::get_if<Label>(&it)) {
        if (!defined.emplace(l->name, l->span).second)
          result.errors.push_back({l->span, "duplicate label '" + l->name + "'", "unique label"});
      }
    }
  }
  for (const auto& f : prog.functions) {
    for (const auto& it : f.body) {
      const auto* inst = as_instruction(it);
      if (!inst) continue;
      const std::string* target = branch_target(*inst);
      if (!target) continue;
      if (!defined.count(*target)) {
        result.errors.push_back({inst->span, "undefined label '" + *target + "'", "label"});
      } else if (inst->op == Opcode::Call && !function_names.count(*target)) {
        result.errors.push_back({inst->span, "call target '" + *target + "' is not a function", "function label"});
      }
    }
  }

  if (result.errors.empty()) result.program = std::move(prog);
  return result;
}

namespace {

char suffix_char(std::uint8_t w) {
  switch (w) {
    case 8: return 'b';
    case 16: return 'w';
    case 32: return 'l';
    default: return 'q';
  }
}

std::string print_operand(const Operand& op) {
  if (const auto* i = std::get_if<Immediate>(&op)) return "$" + std::to_string(i->value);
  if (const auto* r = std::get_if<Register>(&op)) return "%" + register_name(*r);
  if (const auto* l = std::get_if<LabelRef>(&op)) return l->name;
  const auto& m = std::get<MemoryRef>(op);
  std::string s;
  if (m.disp != 0 || (!m.base && !m.index)) s += std::to_string(m.disp);
  if (m.base || m.index) {
    s += "(";
    if (m.base) s += "%" + register_name(*m.base);
    if (m.index) s += ",%" + register_name(*m.index) + "," + std::to_string(m.scale);
    s += ")";
  }
  return s;
}

}  // namespace

std::string print_instruction(const Instruction& inst) {
  std::string m;
  switch (inst.op) {
    case Opcode::Jcc: m = "j" + std::string(cond_name(inst.cc.value_or(CondCode::E))); break;
    case Opcode::Cmov:
      m = "cmov" + std::string(cond_name(inst.cc.value_or(CondCode::E))) + suffix_char(inst.width);
      break;
    case Opcode::Pushf: m = "pushfq"; break;
    case Opcode::Popf: m = "popfq"; break;
    case Opcode::Jmp:
    case Opcode::Call:
    case Opcode::Ret:
    case Opcode::Lahf:
    case Opcode::Sahf:
    case Opcode::Lfence:
    case Opcode::Nop: m = std::string(opcode_name(inst.op)); break;
    default: m = std::string(opcode_name(inst.op)) + suffix_char(inst.width); break;
  }
  std::string s = m;
  for (std::size_t i = 0; i < inst.operands.size(); ++i) s += (i ? ", " : " ") + print_operand(inst.operands[i]);
  return s;
}

std::string print_asm(const Program& program) {
  std::string out = "\t.text\n";
  for (const auto& f : program.functions) {
    if (f.global) out += "\t.globl " + f.name + "\n";
    out += f.name + ":\n";
    for (const auto& it : f.body) {
      if (const auto* l = std::get_if<Label>(&it)) out += l->name + ":\n";
      else out += "\t" + print_instruction(std::get<Instruction>(it)) + "\n";
    }
  }
  return out;
}

std::string format_error(const ParseError& e, std::string_view source_name) {
  return std::string(source_name) + ":" + std::to_string(e.span.line) + ":" + std::to_string(e.span.column) +
         ": error: " + e.message;
}

}  // namespace bcbguard
