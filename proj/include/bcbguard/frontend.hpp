// AT&T-syntax reader and canonical printer for the supported subset.
//
// Grammar, one statement per line (a label may share its line with an
// instruction):
//
//   line     := label ':' | directive | mnemonic [operand (',' operand)*]
//   operand  := '$' imm | '%' reg | [disp] '(' ['%' base] [',' '%' index [',' scale]] ')'
//             | disp | label
//
// Labels that do not start with ".L" open a new function. Directives other
// than .text/.globl/.global are skipped with a warning and are not
// reproduced by print_asm.
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bcbguard/asm.hpp"

namespace bcbguard {

struct ParseError {
  SourceSpan span{};
  std::string message;
  std::string expected;  // token class the parser was looking for
};

struct ParseWarning {
  SourceSpan span{};
  std::string message;
};

struct ParseResult {
  std::optional<Program> program;
  std::vector<ParseError> errors;
  std::vector<ParseWarning> warnings;

  bool ok() const { return program.has_value(); }
};

ParseResult parse_asm(std::string_view text, std::string source_name = "<input>");

/// Canonical text: tab-indented lowercase mnemonics with width suffixes,
/// labels flush left, LF line endings.
std::string print_asm(const Program& program);
std::string print_instruction(const Instruction& inst);

/// Formats "file:line:col: message" diagnostics.
std::string format_error(const ParseError& e, std::string_view source_name);

}  // namespace bcbguard
