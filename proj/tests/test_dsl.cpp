#include <numeric>
#include <stdexcept>
#include <random>

#include "doctest.h"
#include "mwp/dsl.hpp"

using namespace mwp;

namespace {

const std::array<std::string, 5> kCardOptions = {"A) 2/1223", "B) 1/122", "C) 1/221",
                                                 "D) 3/1253", "E) 2/153"};

Value num(double v) { return Value::num(v); }
Value str(std::string s) { return Value::str(std::move(s)); }

std::optional<Value> apply(OperationId op, std::vector<Value> args) {
    static OptionSet opts = make_options(kCardOptions);
    return apply_operation(op, args, opts);
}

}  // namespace

TEST_CASE("arity per operation") {
    CHECK(arity(OperationId::Add) == 2);
    CHECK(arity(OperationId::Log) == 1);
    CHECK(arity(OperationId::Choose) == 2);
    CHECK(arity(OperationId::Id) == 1);
    CHECK(arity(OperationId::Check) == 1);
    size_t binary = 0;
    for (size_t i = 0; i < kNumOperations; ++i) {
        auto op = static_cast<OperationId>(i);
        CHECK((arity(op) == 1 || arity(op) == 2));
        if (arity(op) == 2) ++binary;
    }
    CHECK(binary == 6);  // Add, Subtract, Multiply, Divide, Power, Choose
}

TEST_CASE("arithmetic operations") {
    CHECK(apply(OperationId::Choose, {num(52), num(2)})->num_value() == doctest::Approx(1326));
    CHECK(apply(OperationId::Choose, {num(4), num(2)})->num_value() == doctest::Approx(6));
    CHECK(apply(OperationId::Factorial, {num(0)})->num_value() == doctest::Approx(1));
    CHECK(apply(OperationId::Factorial, {num(5)})->num_value() == doctest::Approx(120));
    CHECK(apply(OperationId::Add, {num(2), num(3)})->num_value() == doctest::Approx(5));
    CHECK(apply(OperationId::Divide, {num(6), num(1326)})->num_value() ==
          doctest::Approx(6.0 / 1326.0));
    CHECK(apply(OperationId::Sine, {num(0)})->num_value() == doctest::Approx(0.0));
    CHECK(apply(OperationId::Radians, {num(180)})->num_value() ==
          doctest::Approx(3.14159265358979323846));
    CHECK(apply(OperationId::Log, {num(100)})->num_value() == doctest::Approx(2.0));

    // domain errors
    CHECK(!apply(OperationId::Divide, {num(1), num(0)}));
    CHECK(!apply(OperationId::Log, {num(0)}));
    CHECK(!apply(OperationId::Log, {num(-3)}));
    CHECK(!apply(OperationId::Sqrt, {num(-1)}));
    CHECK(!apply(OperationId::Factorial, {num(2.5)}));
    CHECK(!apply(OperationId::Factorial, {num(-1)}));
    CHECK(!apply(OperationId::Factorial, {num(171)}));
    CHECK(!apply(OperationId::Choose, {num(2), num(5)}));
    CHECK(!apply(OperationId::Power, {num(0), num(-1)}));
    CHECK(!apply(OperationId::Power, {num(-2), num(0.5)}));

    // type errors
    CHECK(!apply(OperationId::Add, {str("a"), num(1)}));
    CHECK(!apply(OperationId::Sqrt, {str("4")}));
}

TEST_CASE("identity and conversions") {
    CHECK(apply(OperationId::Id, {str("Let")})->str_value() == "Let");
    CHECK(apply(OperationId::Id, {num(7)})->num_value() == doctest::Approx(7));

    CHECK(apply(OperationId::StrToFloat, {str("52")})->num_value() == doctest::Approx(52));
    CHECK(apply(OperationId::StrToFloat, {str("-2.5")})->num_value() == doctest::Approx(-2.5));
    CHECK(!apply(OperationId::StrToFloat, {str("abc")}));
    CHECK(!apply(OperationId::StrToFloat, {str("3/4")}));  // fractions have their own op

    CHECK(apply(OperationId::FloatToStr, {num(1326)})->str_value() == "1326");

    CHECK(apply(OperationId::FractionToFloat, {str("3/4")})->num_value() == doctest::Approx(0.75));
    CHECK(!apply(OperationId::FractionToFloat, {str("5/0")}));
    auto frac = apply(OperationId::FloatToFraction, {num(6.0 / 1326.0)});
    REQUIRE(frac);
    CHECK(frac->str_value() == "1/221");

    CHECK(apply(OperationId::ThousandsToFloat, {str("1,000,000")})->num_value() ==
          doctest::Approx(1000000.0));
    CHECK(apply(OperationId::FloatToThousands, {num(1000000)})->str_value() == "1,000,000");
    CHECK(apply(OperationId::FloatToThousands, {num(-1234567)})->str_value() == "-1,234,567");
    CHECK(!apply(OperationId::FloatToThousands, {num(1.5)}));
}

TEST_CASE("check operation") {
    auto r = apply(OperationId::Check, {str("1/221")});
    REQUIRE(r);
    CHECK(r->str_value() == "C");
    CHECK(apply(OperationId::Check, {str("B")})->str_value() == "B");
    CHECK(!apply(OperationId::Check, {str("7/13")}));  // matches nothing

    // ambiguous values error instead of guessing
    auto ambiguous = make_options({"A) 5", "B) 5", "C) 6", "D) 7", "E) 8"});
    CHECK(!apply_operation(OperationId::Check, {str("5")}, ambiguous));
    CHECK(apply_operation(OperationId::Check, {str("6")}, ambiguous)->str_value() == "C");
}

TEST_CASE("inverse pairs") {
    std::mt19937 rng(11);
    for (int i = 0; i < 200; ++i) {
        long b = 1 + static_cast<long>(rng() % 10000);
        long a = static_cast<long>(rng() % 1000000);
        long g = std::gcd(a, b);
        a /= g;
        b /= g;
        if (b > 10000) continue;
        std::string s = std::to_string(a) + "/" + std::to_string(b);
        auto v = apply(OperationId::FractionToFloat, {str(s)});
        REQUIRE(v);
        auto back = apply(OperationId::FloatToFraction, {*v});
        REQUIRE(back);
        CHECK(back->str_value() == s);
    }
    for (int i = 0; i < 200; ++i) {
        double v = std::floor(std::pow(10.0, (rng() % 140) / 10.0)) *
                   (rng() % 2 == 0 ? 1.0 : -1.0);
        if (std::abs(v) >= 1e15) continue;
        auto s = apply(OperationId::FloatToThousands, {num(v)});
        REQUIRE(s);
        auto back = apply(OperationId::ThousandsToFloat, {*s});
        REQUIRE(back);
        CHECK(back->num_value() == doctest::Approx(v));
    }
    for (double d = -360.0; d <= 360.0; d += 7.3) {
        auto rad = apply(OperationId::Radians, {num(d)});
        auto deg = apply(OperationId::Degrees, {*rad});
        CHECK(deg->num_value() == doctest::Approx(d).epsilon(1e-9));
    }
}

TEST_CASE("apply never returns non-finite numbers") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> dist(-1e6, 1e6);
    std::vector<OperationId> numeric_ops = {
        OperationId::Add,      OperationId::Subtract, OperationId::Multiply,
        OperationId::Divide,   OperationId::Power,    OperationId::Log,
        OperationId::Sqrt,     OperationId::Sine,     OperationId::Cosine,
        OperationId::Tangent,  OperationId::Factorial, OperationId::Choose,
        OperationId::Radians,  OperationId::Degrees};
    for (int i = 0; i < 5000; ++i) {
        auto op = numeric_ops[rng() % numeric_ops.size()];
        std::vector<Value> args;
        for (size_t j = 0; j < arity(op); ++j) args.push_back(num(dist(rng)));
        auto r = apply(op, args);
        if (r) {
            REQUIRE(r->is_num());
            CHECK(std::isfinite(r->num_value()));
        }
    }
}

TEST_CASE("resolve argument sources") {
    Problem p;
    p.question = "From a pack of 52 cards, two cards are drawn together at random.";
    p.options = kCardOptions;
    p.rationale = "x";
    p.correct = 'C';
    auto x = build_source(p);
    auto opts = make_options(p.options);
    ExecutionState state;
    state.x = &x;
    state.options = &opts;

    CHECK(resolve(Vocab{"Let"}, state)->str_value() == "Let");
    CHECK(x.tokens[4].surface == "52");
    CHECK(resolve(CopyInput{4}, state)->str_value() == "52");
    CHECK(!resolve(CopyInput{99999}, state));
    CHECK(!resolve(CopyOutput{0}, state));

    Instruction conv{OperationId::StrToFloat, {CopyInput{4}}, Dest::Memory};
    REQUIRE(execute_instruction(conv, state));
    CHECK(resolve(CopyOutput{0}, state)->num_value() == doctest::Approx(52.0));
    CHECK(state.mem.size() == 1);
    CHECK(state.out.empty());
}

TEST_CASE("program execution worked example") {
    Problem p;
    p.question =
        "From a pack of 52 cards, two cards are drawn together at random. What is the "
        "probability of both the cards being kings?";
    p.options = kCardOptions;
    p.rationale = "r";
    p.correct = 'C';
    auto x = build_source(p);
    auto opts = make_options(p.options);

    auto out_id = [](const char* w) {
        return Instruction{OperationId::Id, {Vocab{w}}, Dest::Output};
    };
    Program prog;
    prog.instrs = {
        out_id("Let"), out_id("s"), out_id("be"), out_id("the"), out_id("sample"),
        out_id("space"), out_id("."), out_id("\n"), out_id("Then"), out_id("n"),
        out_id("("), out_id("s"), out_id(")"), out_id("="),
        // memory/output placement for the computed values
        Instruction{OperationId::StrToFloat, {CopyInput{4}}, Dest::Memory},    // z14: 52
        Instruction{OperationId::FloatToStr, {CopyOutput{14}}, Dest::Output},  // "52"
        out_id("C"), out_id("2"), out_id("="),
        Instruction{OperationId::StrToFloat, {CopyOutput{17}}, Dest::Memory},  // z19: 2
        Instruction{OperationId::Choose, {CopyOutput{14}, CopyOutput{19}}, Dest::Memory},
        Instruction{OperationId::FloatToStr, {CopyOutput{20}}, Dest::Output},  // "1326"
    };
    auto res = execute_program(prog, x, opts);
    REQUIRE(res.ok);
    CHECK(res.out_tokens ==
          std::vector<std::string>{"Let", "s", "be", "the", "sample", "space", ".", "\n", "Then",
                                   "n", "(", "s", ")", "=", "52", "C", "2", "=", "1326"});
    REQUIRE(res.state.mem.size() == 3);
    CHECK(res.state.mem[0].num_value() == doctest::Approx(52.0));
    CHECK(res.state.mem[1].num_value() == doctest::Approx(2.0));
    CHECK(res.state.mem[2].num_value() == doctest::Approx(1326.0));

    // continuing the rationale: P(E) = 6/1326 = 1/221, Check gives C
    Program tail = prog;
    tail.instrs.push_back(Instruction{OperationId::StrToFloat, {Vocab{"6"}}, Dest::Memory});
    tail.instrs.push_back(
        Instruction{OperationId::Divide, {CopyOutput{22}, CopyOutput{20}}, Dest::Memory});
    tail.instrs.push_back(
        Instruction{OperationId::FloatToFraction, {CopyOutput{23}}, Dest::Output});
    tail.instrs.push_back(Instruction{OperationId::Check, {CopyOutput{24}}, Dest::Output});
    auto res2 = execute_program(tail, x, opts);
    REQUIRE(res2.ok);
    auto& toks = res2.out_tokens;
    REQUIRE(toks.size() >= 2);
    CHECK(toks[toks.size() - 2] == "1/221");
    CHECK(toks[toks.size() - 1] == "C");
}

TEST_CASE("program execution failures") {
    Problem p;
    p.question = "q 1";
    p.options = kCardOptions;
    p.rationale = "r";
    p.correct = 'C';
    auto x = build_source(p);
    auto opts = make_options(p.options);

    Program empty;
    auto res = execute_program(empty, x, opts);
    REQUIRE(res.ok);
    CHECK(res.out_tokens.empty());
    CHECK(res.state.values.empty());

    Program bad;
    bad.instrs = {Instruction{OperationId::StrToFloat, {Vocab{"abc"}}, Dest::Memory}};
    auto res2 = execute_program(bad, x, opts);
    CHECK(!res2.ok);
    CHECK(res2.error_index == 0);

    Program bad2;
    bad2.instrs = {Instruction{OperationId::Id, {Vocab{"hi"}}, Dest::Output},
                   Instruction{OperationId::Log, {Vocab{"x"}}, Dest::Output}};
    auto res3 = execute_program(bad2, x, opts);
    CHECK(!res3.ok);
    CHECK(res3.error_index == 1);
}

TEST_CASE("prefix monotonicity and determinism") {
    Problem p;
    p.question = "numbers 3 and 4 appear";
    p.options = {"A) 7", "B) 12", "C) 1", "D) 81", "E) 0.75"};
    p.rationale = "r";
    p.correct = 'A';
    auto x = build_source(p);
    auto opts = make_options(p.options);

    Program prog;
    prog.instrs = {
        Instruction{OperationId::StrToFloat, {CopyInput{1}}, Dest::Memory},
        Instruction{OperationId::StrToFloat, {CopyInput{3}}, Dest::Memory},
        Instruction{OperationId::Add, {CopyOutput{0}, CopyOutput{1}}, Dest::Memory},
        Instruction{OperationId::FloatToStr, {CopyOutput{2}}, Dest::Output},
        Instruction{OperationId::Check, {CopyOutput{3}}, Dest::Output},
    };
    auto full = execute_program(prog, x, opts);
    REQUIRE(full.ok);
    CHECK(full.out_tokens == std::vector<std::string>{"7", "A"});

    for (size_t k = 0; k <= prog.instrs.size(); ++k) {
        Program prefix;
        prefix.instrs.assign(prog.instrs.begin(), prog.instrs.begin() + k);
        auto res = execute_program(prefix, x, opts);
        REQUIRE(res.ok);
        CHECK(res.out_tokens.size() <= full.out_tokens.size());
        for (size_t t = 0; t < res.out_tokens.size(); ++t)
            CHECK(res.out_tokens[t] == full.out_tokens[t]);
    }

    auto rerun = execute_program(prog, x, opts);
    CHECK(rerun.out_tokens == full.out_tokens);
}

TEST_CASE("serialization round trip") {
    Program prog;
    prog.instrs = {
        Instruction{OperationId::Id, {Vocab{"Let"}}, Dest::Output},
        Instruction{OperationId::Id, {Vocab{"with \"quotes\" and \\ and \n"}}, Dest::Output},
        Instruction{OperationId::StrToFloat, {CopyInput{4}}, Dest::Memory},
        Instruction{OperationId::Choose, {CopyOutput{2}, CopyOutput{0}}, Dest::Memory},
        Instruction{OperationId::Check, {CopyOutput{3}}, Dest::Output},
    };
    auto text = print_program(prog);
    auto parsed = parse_program(text);
    REQUIRE(parsed.instrs.size() == prog.instrs.size());
    CHECK(parsed.instrs == prog.instrs);
    CHECK(print_program(parsed) == text);

    CHECK(print_instruction(prog.instrs[0]) == "out Id(\"Let\")");
    CHECK(print_instruction(prog.instrs[2]) == "mem StrToFloat(x[4])");

    CHECK_THROWS_AS(parse_instruction("out Bogus(x[0])"), std::runtime_error);
    CHECK_THROWS_AS(parse_instruction("nope Id(\"a\")"), std::runtime_error);
    CHECK_THROWS_AS(parse_instruction("out Add(x[0])"), std::runtime_error);

    // random programs round trip
    std::mt19937 rng(5);
    for (int iter = 0; iter < 100; ++iter) {
        Program rp;
        size_t len = 1 + rng() % 8;
        for (size_t i = 0; i < len; ++i) {
            Instruction in;
            in.op = static_cast<OperationId>(rng() % kNumOperations);
            in.dest = rng() % 2 ? Dest::Output : Dest::Memory;
            for (size_t a = 0; a < arity(in.op); ++a) {
                switch (rng() % 3) {
                    case 0:
                        in.args.push_back(Vocab{std::string(1, 'a' + static_cast<char>(rng() % 26))});
                        break;
                    case 1:
                        in.args.push_back(CopyInput{rng() % 50});
                        break;
                    default:
                        in.args.push_back(CopyOutput{rng() % 50});
                        break;
                }
            }
            rp.instrs.push_back(in);
        }
        auto t = print_program(rp);
        CHECK(parse_program(t).instrs == rp.instrs);
    }
}
