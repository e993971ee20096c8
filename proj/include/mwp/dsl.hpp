#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mwp/corpus.hpp"

namespace mwp {

// Runtime value: a string or a finite float. Constructing a non-finite Num is
// a caller bug; operations that would produce one fail instead.
class Value {
  public:
    static Value str(std::string s) {
        Value v;
        v.is_num_ = false;
        v.s_ = std::move(s);
        return v;
    }
    static Value num(double d) {
        assert(std::isfinite(d));
        Value v;
        v.is_num_ = true;
        v.d_ = d;
        return v;
    }

    bool is_num() const { return is_num_; }
    bool is_str() const { return !is_num_; }
    double num_value() const {
        assert(is_num_);
        return d_;
    }
    const std::string& str_value() const {
        assert(!is_num_);
        return s_;
    }

    // Surface form used when the value is emitted as an output token.
    std::string surface() const;

    bool operator==(const Value& o) const {
        if (is_num_ != o.is_num_) return false;
        return is_num_ ? d_ == o.d_ : s_ == o.s_;
    }

  private:
    bool is_num_ = false;
    std::string s_;
    double d_ = 0.0;
};

bool value_close(const Value& a, const Value& b, double rel_tol);
bool rel_close(double a, double b, double tol);

enum class OperationId : uint8_t {
    Id,
    Add,
    Subtract,
    Multiply,
    Divide,
    Power,
    Log,
    Sqrt,
    Sine,
    Cosine,
    Tangent,
    Factorial,
    Choose,
    Radians,
    Degrees,
    StrToFloat,
    FloatToStr,
    FractionToFloat,
    FloatToFraction,
    ThousandsToFloat,
    FloatToThousands,
    Check,
};

inline constexpr size_t kNumOperations = 22;

size_t arity(OperationId op);
const char* op_name(OperationId op);
std::optional<OperationId> op_from_name(const std::string& name);

// Where an instruction's value goes: appended to the rationale output or to
// the hidden memory buffer.
enum class Dest : uint8_t { Output, Memory };

struct Vocab {
    std::string word;
    bool operator==(const Vocab&) const = default;
};
struct CopyInput {
    size_t index;  // into x.tokens
    bool operator==(const CopyInput&) const = default;
};
struct CopyOutput {
    size_t index;  // into prior instructions, output or memory
    bool operator==(const CopyOutput&) const = default;
};
using ArgSource = std::variant<Vocab, CopyInput, CopyOutput>;

struct Instruction {
    OperationId op = OperationId::Id;
    std::vector<ArgSource> args;
    Dest dest = Dest::Output;

    bool operator==(const Instruction&) const = default;
};

struct Program {
    std::vector<Instruction> instrs;

    bool operator==(const Program&) const = default;
};

// Option texts with their tokenizations cached; Check scans these.
struct OptionSet {
    std::array<std::string, 5> texts;
    std::array<std::vector<Token>, 5> tokens;
};
OptionSet make_options(const std::array<std::string, 5>& texts);

struct ExecutionState {
    const SourceSeq* x = nullptr;
    const OptionSet* options = nullptr;
    std::vector<Value> values;  // value of each executed instruction, in order
    std::vector<Dest> dests;
    std::vector<Value> out;  // values whose dest was Output
    std::vector<Value> mem;  // append-only memory buffer

    std::vector<std::string> out_tokens() const;
};

// Integers near v (1e-9 relative) print with no decimal point; otherwise the
// shortest fixed-point decimal that lexes back within 1e-9 relative.
std::string format_float(double v);

// err, when non-null, receives a short description on failure.
std::optional<Value> resolve(const ArgSource& src, const ExecutionState& state,
                             std::string* err = nullptr);

std::optional<Value> apply_operation(OperationId op, const std::vector<Value>& args,
                                     const OptionSet& options, std::string* err = nullptr);

// Executes one instruction against the state, appending its value.
bool execute_instruction(const Instruction& instr, ExecutionState& state,
                         std::string* err = nullptr);

struct ExecResult {
    bool ok = false;
    size_t error_index = 0;
    std::string error;
    std::vector<std::string> out_tokens;
    ExecutionState state;
};

ExecResult execute_program(const Program& prog, const SourceSeq& x, const OptionSet& options);

// Text form: one instruction per line, `dest op(arg, ...)` where dest is
// out|mem and args are "literal", x[k] or z[j]. parse(print(p)) == p.
std::string print_instruction(const Instruction& instr);
std::string print_program(const Program& prog);
Instruction parse_instruction(const std::string& line);
Program parse_program(const std::string& text);

}  // namespace mwp
