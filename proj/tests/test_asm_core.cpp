#include <catch_amalgamated.hpp>

#include "bcbguard/asm.hpp"
#include "bcbguard/frontend.hpp"
#include "oracles.hpp"

using namespace bcbguard;

TEST_CASE("condition inversion is an involution without fixed points") {
  for (auto c : kAllCondCodes) {
    CHECK(invert(invert(c)) == c);
    CHECK(invert(c) != c);
  }
}

TEST_CASE("inverted condition holds exactly when the original does not") {
  // exhaustive over the flag combinations that matter
  for (int bits = 0; bits < 16; ++bits) {
    Flags f;
    f.cf = bits & 1;
    f.zf = bits & 2;
    f.sf = bits & 4;
    f.of = bits & 8;
    for (auto c : kAllCondCodes) CHECK(condition_holds(invert(c), f) == !condition_holds(c, f));
  }
}

TEST_CASE("specific inversions") {
  CHECK(invert(CondCode::L) == CondCode::GE);
  CHECK(invert(CondCode::B) == CondCode::AE);
  CHECK(invert(CondCode::BE) == CondCode::A);
  CHECK(invert(CondCode::E) == CondCode::NE);
  CHECK(invert(CondCode::S) == CondCode::NS);
  CHECK(invert(CondCode::O) == CondCode::NO);
  CHECK(invert(CondCode::LE) == CondCode::G);
}

TEST_CASE("condition names parse back, aliases included") {
  for (auto c : kAllCondCodes) CHECK(parse_cond(cond_name(c)) == c);
  CHECK(parse_cond("z") == CondCode::E);
  CHECK(parse_cond("nz") == CondCode::NE);
  CHECK(parse_cond("nge") == CondCode::L);
  CHECK(parse_cond("c") == CondCode::B);
  CHECK_FALSE(parse_cond("zz").has_value());
}

TEST_CASE("register names round-trip at every width") {
  for (std::size_t i = 0; i < kGprCount; ++i)
    for (unsigned w : {8u, 16u, 32u, 64u}) {
      Register r{static_cast<Gpr>(i), static_cast<std::uint8_t>(w)};
      auto back = parse_register(register_name(r));
      REQUIRE(back.has_value());
      CHECK(*back == r);
    }
  CHECK(register_name(Register::q(Gpr::R15)) == "r15");
  CHECK(register_name(Register{Gpr::Rax, 32}) == "eax");
  CHECK(register_name(Register{Gpr::R8, 8}) == "r8b");
  CHECK(parse_gpr64("r14") == Gpr::R14);
  CHECK_FALSE(parse_gpr64("eax").has_value());
  CHECK_FALSE(parse_register("rip").has_value());
}

TEST_CASE("flags tables") {
  auto p = oracle::parse_or_throw("f:\n cmpq $1, %rax\n jl .L\n lahf\n sahf\n pushfq\n popfq\n movq %rax, %rbx\n"
                                  " cmovgeq %rax, %rbx\n leaq 8(%rax), %rbx\n callq f\n.L:\n ret\n");
  const auto& b = p.functions[0].body;
  auto in = [&](std::size_t i) { return std::get<Instruction>(b[i]); };
  CHECK(writes_flags(in(0)));
  CHECK_FALSE(reads_flags(in(0)));
  CHECK(reads_flags(in(1)));
  CHECK(reads_flags(in(2)));
  CHECK(writes_flags(in(3)));
  CHECK(reads_flags(in(4)));
  CHECK(writes_flags(in(5)));
  CHECK_FALSE(writes_flags(in(6)));
  CHECK(reads_flags(in(7)));
  CHECK_FALSE(writes_flags(in(8)));
  CHECK(writes_flags(in(9)));  // callee may clobber
}

TEST_CASE("register read/write sets") {
  auto p = oracle::parse_or_throw("f:\n addq (%rsi,%rdi,8), %rbx\n movq %rax, 8(%rcx)\n pushq %rdx\n lahf\n"
                                  " movl %eax, %ebx\n ret\n");
  const auto& b = p.functions[0].body;
  auto in = [&](std::size_t i) { return std::get<Instruction>(b[i]); };
  CHECK(regs_read(in(0)) == (bit(Gpr::Rsi) | bit(Gpr::Rdi) | bit(Gpr::Rbx)));
  CHECK(regs_written(in(0)) == bit(Gpr::Rbx));
  CHECK(regs_read(in(1)) == (bit(Gpr::Rax) | bit(Gpr::Rcx)));
  CHECK(regs_written(in(1)) == 0);
  CHECK((regs_read(in(2)) & bit(Gpr::Rdx)));
  CHECK((regs_written(in(2)) & bit(Gpr::Rsp)));
  CHECK(regs_written(in(3)) == bit(Gpr::Rax));
  CHECK(regs_written(in(4)) == bit(Gpr::Rbx));
  CHECK(address_regs(*memory_operand(in(0))) == (bit(Gpr::Rsi) | bit(Gpr::Rdi)));
}

TEST_CASE("register loads are register-destination memory reads") {
  auto p = oracle::parse_or_throw("f:\n movq (%rax), %rbx\n addq 8(%rax), %rbx\n movq %rbx, (%rax)\n"
                                  " cmpq (%rax), %rbx\n leaq (%rax), %rbx\n cmovlq (%rax), %rcx\n ret\n");
  const auto& b = p.functions[0].body;
  const bool want[] = {true, true, false, false, false, true, false};
  for (std::size_t i = 0; i < 7; ++i) {
    const auto& in = std::get<Instruction>(b[i]);
    CHECK(is_register_load(in) == want[i]);
    CHECK(oracle::loads_into_register(in) == want[i]);
  }
  CHECK(load_destination(std::get<Instruction>(b[0])) == Register::q(Gpr::Rbx));
}

TEST_CASE("builders and counts") {
  auto c = make_cmov(CondCode::GE, Register::q(Gpr::R14), Register::q(Gpr::R15));
  CHECK(c.op == Opcode::Cmov);
  CHECK(c.cc == CondCode::GE);
  CHECK(print_instruction(c) == "cmovgeq %r14, %r15");
  auto j = make_jcc(CondCode::L, ".Lx");
  REQUIRE(branch_target(j));
  CHECK(*branch_target(j) == ".Lx");
  CHECK(is_terminator(j));
  CHECK(is_terminator(make_jmp(".Ly")));
  auto p = oracle::parse_or_throw("f:\n nop\n.L:\n nop\n ret\ng:\n ret\n");
  CHECK(count_instructions(p) == 4);
  CHECK(count_instructions(p.functions[0]) == 3);
  CHECK(p.find("g") != nullptr);
  CHECK(p.find("h") == nullptr);
}

TEST_CASE("instruction equality ignores spans and the inserted marker") {
  auto a = make_inst(Opcode::Xor, {Register::q(Gpr::Rax), Register::q(Gpr::R15)});
  auto b = a;
  b.inserted = true;
  b.span = {9, 9, 9};
  CHECK(a == b);
  b.width = 32;
  CHECK_FALSE(a == b);
}
