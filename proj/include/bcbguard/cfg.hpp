// Control-flow graph, flags liveness and reserved-register verification.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcbguard/asm.hpp"

namespace bcbguard {

/// Raised when a program's control flow cannot be represented, e.g. a jump
/// to a label that does not exist in the same function.
class StructuralError : public std::runtime_error {
 public:
  StructuralError(std::string label, std::uint32_t line, const std::string& what)
      : std::runtime_error(what), label_(std::move(label)), line_(line) {}
  const std::string& label() const { return label_; }
  std::uint32_t line() const { return line_; }

 private:
  std::string label_;
  std::uint32_t line_;
};

struct BasicBlock {
  std::vector<std::string> labels;
  std::size_t begin = 0;  // first item (label or instruction) of the block
  std::size_t end = 0;    // one past the last item
  std::vector<std::size_t> instrs;  // item indices of the block's instructions

  /// Item index of the first instruction, or `end` for a label-only block.
  std::size_t head() const { return instrs.empty() ? end : instrs.front(); }
};

enum class EdgeKind { Taken, Fallthrough, Unconditional };

struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  EdgeKind kind = EdgeKind::Fallthrough;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct Cfg {
  std::vector<BasicBlock> blocks;
  std::vector<Edge> edges;
  std::size_t entry = 0;
  std::vector<std::size_t> block_of_item;  // item index -> block index

  std::vector<std::size_t> successors(std::size_t block) const;
  /// Incoming edge count, plus one for the entry block (the function's callers).
  std::size_t in_degree(std::size_t block) const;
};

/// Builds the CFG of one function. Jcc/Jmp targets must be local labels.
Cfg build_cfg(const Function& fn);
std::vector<Cfg> build_cfgs(const Program& program);

/// Per-program-point flags liveness of one function (backward may-analysis).
class FlagsLiveness {
 public:
  FlagsLiveness(const Function& fn, const Cfg& cfg);

  /// Flags are live at the point immediately before item `i`
  /// (`i == body.size()` denotes the end of the function).
  bool live_before(std::size_t item) const { return before_[item]; }
  /// Flags are live at the point immediately after instruction `i`,
  /// i.e. on entry to its successors.
  bool live_after(std::size_t item) const { return after_[item]; }

 private:
  std::vector<bool> before_;
  std::vector<bool> after_;
};

FlagsLiveness flags_liveness(const Function& fn, const Cfg& cfg);

struct ReservedViolation {
  std::string function;
  std::size_t item = 0;
  SourceSpan span{};
  Gpr reg = Gpr::R15;
};

/// Every (instruction, register) pair where the program reads or writes a
/// reserved register, in source order.
std::vector<ReservedViolation> verify_reserved(const Program& program, std::span<const Gpr> reserved);

}  // namespace bcbguard
