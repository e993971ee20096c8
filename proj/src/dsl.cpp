#include "mwp/dsl.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mwp {

std::string Value::surface() const { return is_num_ ? format_float(d_) : s_; }

bool rel_close(double a, double b, double tol) {
    double diff = std::abs(a - b);
    double scale = std::max(std::abs(a), std::abs(b));
    return diff <= tol * scale || diff == 0.0;
}

bool value_close(const Value& a, const Value& b, double rel_tol) {
    if (a.is_num() != b.is_num()) return false;
    if (a.is_str()) return a.str_value() == b.str_value();
    return rel_close(a.num_value(), b.num_value(), rel_tol);
}

namespace {

constexpr double kPi = 3.14159265358979323846;

struct OpInfo {
    OperationId op;
    const char* name;
    size_t argc;
};

constexpr OpInfo kOps[kNumOperations] = {
    {OperationId::Id, "Id", 1},
    {OperationId::Add, "Add", 2},
    {OperationId::Subtract, "Subtract", 2},
    {OperationId::Multiply, "Multiply", 2},
    {OperationId::Divide, "Divide", 2},
    {OperationId::Power, "Power", 2},
    {OperationId::Log, "Log", 1},
    {OperationId::Sqrt, "Sqrt", 1},
    {OperationId::Sine, "Sine", 1},
    {OperationId::Cosine, "Cosine", 1},
    {OperationId::Tangent, "Tangent", 1},
    {OperationId::Factorial, "Factorial", 1},
    {OperationId::Choose, "Choose", 2},
    {OperationId::Radians, "Radians", 1},
    {OperationId::Degrees, "Degrees", 1},
    {OperationId::StrToFloat, "StrToFloat", 1},
    {OperationId::FloatToStr, "FloatToStr", 1},
    {OperationId::FractionToFloat, "FractionToFloat", 1},
    {OperationId::FloatToFraction, "FloatToFraction", 1},
    {OperationId::ThousandsToFloat, "ThousandsToFloat", 1},
    {OperationId::FloatToThousands, "FloatToThousands", 1},
    {OperationId::Check, "Check", 1},
};

const OpInfo& info(OperationId op) { return kOps[static_cast<size_t>(op)]; }

bool fail(std::string* err, const std::string& msg) {
    if (err) *err = msg;
    return false;
}

std::optional<Value> op_fail(std::string* err, const std::string& msg) {
    if (err) *err = msg;
    return std::nullopt;
}

bool near_integer(double v, double& out) {
    double r = std::nearbyint(v);
    if (std::abs(v - r) <= 1e-6 * std::max(1.0, std::abs(v))) {
        out = r;
        return true;
    }
    return false;
}

// integer or decimal, optional leading minus
std::optional<double> parse_plain(const std::string& s) {
    size_t i = 0;
    if (i < s.size() && s[i] == '-') ++i;
    size_t a = i;
    while (i < s.size() && isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == a) return std::nullopt;
    if (i < s.size() && s[i] == '.') {
        ++i;
        size_t b = i;
        while (i < s.size() && isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i == b) return std::nullopt;
    }
    if (i != s.size()) return std::nullopt;
    double v = std::strtod(s.c_str(), nullptr);
    if (!std::isfinite(v)) return std::nullopt;
    return v;
}

std::optional<double> parse_fraction(const std::string& s) {
    size_t slash = s.find('/');
    if (slash == std::string::npos) return std::nullopt;
    std::string num = s.substr(0, slash);
    std::string den = s.substr(slash + 1);
    auto all_digits = [](const std::string& t, bool sign_ok) {
        size_t i = 0;
        if (sign_ok && i < t.size() && t[i] == '-') ++i;
        if (i == t.size()) return false;
        for (; i < t.size(); ++i)
            if (!isdigit(static_cast<unsigned char>(t[i]))) return false;
        return true;
    };
    if (!all_digits(num, true) || !all_digits(den, false)) return std::nullopt;
    double n = std::strtod(num.c_str(), nullptr);
    double d = std::strtod(den.c_str(), nullptr);
    if (d == 0.0) return std::nullopt;
    double v = n / d;
    if (!std::isfinite(v)) return std::nullopt;
    return v;
}

// 1-3 leading digits plus zero or more ",ddd" groups
std::optional<double> parse_thousands(const std::string& s) {
    size_t i = 0;
    if (i < s.size() && s[i] == '-') ++i;
    size_t head = 0;
    while (i + head < s.size() && isdigit(static_cast<unsigned char>(s[i + head]))) ++head;
    if (head < 1 || head > 3) return std::nullopt;
    i += head;
    std::string digits = s.substr(0, i);
    while (i < s.size()) {
        if (s[i] != ',') return std::nullopt;
        if (i + 3 >= s.size()) return std::nullopt;
        for (size_t k = 1; k <= 3; ++k)
            if (!isdigit(static_cast<unsigned char>(s[i + k]))) return std::nullopt;
        if (i + 4 < s.size() && isdigit(static_cast<unsigned char>(s[i + 4]))) return std::nullopt;
        digits += s.substr(i + 1, 3);
        i += 4;
    }
    double v = std::strtod(digits.c_str(), nullptr);
    if (!std::isfinite(v)) return std::nullopt;
    return v;
}

std::string format_thousands(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.0f", std::abs(v));
    std::string digits = buf;
    std::string grouped;
    size_t lead = digits.size() % 3;
    if (lead == 0) lead = 3;
    grouped = digits.substr(0, lead);
    for (size_t i = lead; i < digits.size(); i += 3) grouped += "," + digits.substr(i, 3);
    if (v < 0) grouped = "-" + grouped;
    return grouped;
}

std::optional<std::string> to_fraction(double v) {
    double sign = v < 0 ? -1.0 : 1.0;
    double a = std::abs(v);
    auto render = [&](double p, long q) {
        long pi = static_cast<long>(p);
        // smaller q is tried first, so p/q is already in lowest terms
        return std::to_string(sign < 0 && pi != 0 ? -pi : pi) + "/" + std::to_string(q);
    };
    // exact representation first; it is unique when it exists
    for (long q = 1; q <= 10000; ++q) {
        double p = std::nearbyint(a * q);
        if (p / q == a) return render(p, q);
    }
    for (long q = 1; q <= 10000; ++q) {
        double p = std::nearbyint(a * q);
        if (rel_close(p / q, a, 1e-9)) return render(p, q);
    }
    return std::nullopt;
}

}  // namespace

size_t arity(OperationId op) { return info(op).argc; }
const char* op_name(OperationId op) { return info(op).name; }

std::optional<OperationId> op_from_name(const std::string& name) {
    for (const auto& o : kOps)
        if (name == o.name) return o.op;
    return std::nullopt;
}

OptionSet make_options(const std::array<std::string, 5>& texts) {
    OptionSet s;
    s.texts = texts;
    for (size_t i = 0; i < 5; ++i) s.tokens[i] = tokenize(texts[i]);
    return s;
}

std::vector<std::string> ExecutionState::out_tokens() const {
    std::vector<std::string> toks;
    toks.reserve(out.size());
    for (const auto& v : out) toks.push_back(v.surface());
    return toks;
}

std::string format_float(double v) {
    assert(std::isfinite(v));
    double r = std::nearbyint(v);
    if (std::abs(v - r) <= 1e-9 * std::max(1.0, std::abs(v)) && std::abs(v) < 1e15) {
        if (r == 0.0) r = 0.0;  // avoid "-0"
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.0f", r);
        return buf;
    }
    char buf[400];
    for (int p = 0; p <= 340; ++p) {
        std::snprintf(buf, sizeof buf, "%.*f", p, v);
        auto back = lex_numeric(buf);
        if (back && rel_close(*back, v, 1e-9)) return buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::optional<Value> resolve(const ArgSource& src, const ExecutionState& state, std::string* err) {
    if (const auto* v = std::get_if<Vocab>(&src)) return Value::str(v->word);
    if (const auto* ci = std::get_if<CopyInput>(&src)) {
        if (!state.x || ci->index >= state.x->tokens.size())
            return op_fail(err, "input copy index out of range");
        return Value::str(state.x->tokens[ci->index].surface);
    }
    const auto& co = std::get<CopyOutput>(src);
    if (co.index >= state.values.size()) return op_fail(err, "output copy index out of range");
    return state.values[co.index];
}

std::optional<Value> apply_operation(OperationId op, const std::vector<Value>& args,
                                     const OptionSet& options, std::string* err) {
    if (args.size() != arity(op)) return op_fail(err, "wrong argument count");

    auto want_num = [&](size_t i, double& out) {
        if (!args[i].is_num()) return fail(err, "expected float argument");
        out = args[i].num_value();
        return true;
    };
    auto want_str = [&](size_t i, std::string& out) {
        if (!args[i].is_str()) return fail(err, "expected string argument");
        out = args[i].str_value();
        return true;
    };
    auto finite_num = [&](double v) -> std::optional<Value> {
        if (!std::isfinite(v)) return op_fail(err, "non-finite result");
        return Value::num(v);
    };

    switch (op) {
        case OperationId::Id:
            return args[0];
        case OperationId::Add:
        case OperationId::Subtract:
        case OperationId::Multiply:
        case OperationId::Divide:
        case OperationId::Power: {
            double a, b;
            if (!want_num(0, a) || !want_num(1, b)) return std::nullopt;
            switch (op) {
                case OperationId::Add:
                    return finite_num(a + b);
                case OperationId::Subtract:
                    return finite_num(a - b);
                case OperationId::Multiply:
                    return finite_num(a * b);
                case OperationId::Divide:
                    if (b == 0.0) return op_fail(err, "division by zero");
                    return finite_num(a / b);
                default:
                    return finite_num(std::pow(a, b));
            }
        }
        case OperationId::Log: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            if (a <= 0.0) return op_fail(err, "log of non-positive value");
            return finite_num(std::log10(a));
        }
        case OperationId::Sqrt: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            if (a < 0.0) return op_fail(err, "sqrt of negative value");
            return finite_num(std::sqrt(a));
        }
        case OperationId::Sine: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return finite_num(std::sin(a));
        }
        case OperationId::Cosine: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return finite_num(std::cos(a));
        }
        case OperationId::Tangent: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return finite_num(std::tan(a));
        }
        case OperationId::Factorial: {
            double a, n;
            if (!want_num(0, a)) return std::nullopt;
            if (!near_integer(a, n) || n < 0.0 || n > 170.0)
                return op_fail(err, "factorial needs an integer in [0, 170]");
            double r = 1.0;
            for (double i = 2.0; i <= n; i += 1.0) r *= i;
            return finite_num(r);
        }
        case OperationId::Choose: {
            double a, b, n, k;
            if (!want_num(0, a) || !want_num(1, b)) return std::nullopt;
            if (!near_integer(a, n) || !near_integer(b, k))
                return op_fail(err, "choose needs integer arguments");
            if (k < 0.0 || n < 0.0 || k > n || n > 170.0)
                return op_fail(err, "choose arguments out of range");
            double r = 1.0;
            for (double i = 1.0; i <= k; i += 1.0) r = r * (n - k + i) / i;
            double snapped;
            if (near_integer(r, snapped)) r = snapped;
            return finite_num(r);
        }
        case OperationId::Radians: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return finite_num(a * kPi / 180.0);
        }
        case OperationId::Degrees: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return finite_num(a * 180.0 / kPi);
        }
        case OperationId::StrToFloat: {
            std::string s;
            if (!want_str(0, s)) return std::nullopt;
            auto v = parse_plain(s);
            if (!v) return op_fail(err, "not a plain number: " + s);
            return Value::num(*v);
        }
        case OperationId::FloatToStr: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            return Value::str(format_float(a));
        }
        case OperationId::FractionToFloat: {
            std::string s;
            if (!want_str(0, s)) return std::nullopt;
            auto v = parse_fraction(s);
            if (!v) return op_fail(err, "not a fraction: " + s);
            return Value::num(*v);
        }
        case OperationId::FloatToFraction: {
            double a;
            if (!want_num(0, a)) return std::nullopt;
            auto s = to_fraction(a);
            if (!s) return op_fail(err, "no small fraction within tolerance");
            return Value::str(*s);
        }
        case OperationId::ThousandsToFloat: {
            std::string s;
            if (!want_str(0, s)) return std::nullopt;
            auto v = parse_thousands(s);
            if (!v) return op_fail(err, "not a grouped number: " + s);
            return Value::num(*v);
        }
        case OperationId::FloatToThousands: {
            double a, n;
            if (!want_num(0, a)) return std::nullopt;
            if (!near_integer(a, n) || std::abs(n) >= 1e15)
                return op_fail(err, "grouping needs an integer below 1e15");
            return Value::str(format_thousands(n));
        }
        case OperationId::Check: {
            std::string s;
            if (!want_str(0, s)) return std::nullopt;
            auto lexed = lex_numeric(s);
            int match = -1;
            for (int i = 0; i < 5; ++i) {
                bool hit = false;
                for (const auto& t : options.tokens[i]) {
                    if (t.kind == TokenKind::Number) {
                        if (lexed && rel_close(*t.numeric_value, *lexed, 1e-6)) hit = true;
                    } else if (t.surface == s) {
                        hit = true;
                    }
                    if (hit) break;
                }
                if (hit) {
                    if (match >= 0) return op_fail(err, "value matches more than one option");
                    match = i;
                }
            }
            if (match < 0) return op_fail(err, "value matches no option");
            return Value::str(std::string(1, static_cast<char>('A' + match)));
        }
    }
    return op_fail(err, "unknown operation");
}

bool execute_instruction(const Instruction& instr, ExecutionState& state, std::string* err) {
    std::vector<Value> args;
    args.reserve(instr.args.size());
    for (const auto& src : instr.args) {
        auto v = resolve(src, state, err);
        if (!v) return false;
        args.push_back(std::move(*v));
    }
    auto v = apply_operation(instr.op, args, *state.options, err);
    if (!v) return false;
    state.values.push_back(*v);
    state.dests.push_back(instr.dest);
    if (instr.dest == Dest::Output)
        state.out.push_back(std::move(*v));
    else
        state.mem.push_back(std::move(*v));
    return true;
}

ExecResult execute_program(const Program& prog, const SourceSeq& x, const OptionSet& options) {
    ExecResult res;
    res.state.x = &x;
    res.state.options = &options;
    for (size_t i = 0; i < prog.instrs.size(); ++i) {
        std::string err;
        if (!execute_instruction(prog.instrs[i], res.state, &err)) {
            res.ok = false;
            res.error_index = i;
            res.error = err;
            return res;
        }
    }
    res.ok = true;
    res.out_tokens = res.state.out_tokens();
    return res;
}

namespace {

std::string escape_literal(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\')
            out += std::string("\\") + c;
        else if (c == '\n')
            out += "\\n";
        else
            out.push_back(c);
    }
    return out;
}

[[noreturn]] void parse_error(const std::string& line, const std::string& why) {
    throw std::runtime_error("bad instruction '" + line + "': " + why);
}

}  // namespace

std::string print_instruction(const Instruction& instr) {
    std::string s = instr.dest == Dest::Output ? "out " : "mem ";
    s += op_name(instr.op);
    s += "(";
    for (size_t i = 0; i < instr.args.size(); ++i) {
        if (i) s += ", ";
        const auto& a = instr.args[i];
        if (const auto* v = std::get_if<Vocab>(&a))
            s += "\"" + escape_literal(v->word) + "\"";
        else if (const auto* ci = std::get_if<CopyInput>(&a))
            s += "x[" + std::to_string(ci->index) + "]";
        else
            s += "z[" + std::to_string(std::get<CopyOutput>(a).index) + "]";
    }
    s += ")";
    return s;
}

std::string print_program(const Program& prog) {
    std::string s;
    for (const auto& in : prog.instrs) {
        s += print_instruction(in);
        s += "\n";
    }
    return s;
}

Instruction parse_instruction(const std::string& line) {
    Instruction out;
    size_t i = 0;
    auto skip_ws = [&] {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    };
    skip_ws();
    if (line.compare(i, 4, "out ") == 0) {
        out.dest = Dest::Output;
        i += 4;
    } else if (line.compare(i, 4, "mem ") == 0) {
        out.dest = Dest::Memory;
        i += 4;
    } else {
        parse_error(line, "expected out/mem destination");
    }
    skip_ws();
    size_t paren = line.find('(', i);
    if (paren == std::string::npos) parse_error(line, "missing (");
    std::string name = line.substr(i, paren - i);
    auto op = op_from_name(name);
    if (!op) parse_error(line, "unknown operation " + name);
    out.op = *op;
    i = paren + 1;
    skip_ws();
    while (i < line.size() && line[i] != ')') {
        if (line[i] == '"') {
            std::string lit;
            ++i;
            bool closed = false;
            while (i < line.size()) {
                char c = line[i++];
                if (c == '\\' && i < line.size()) {
                    char e = line[i++];
                    if (e == 'n')
                        lit += '\n';
                    else
                        lit += e;
                } else if (c == '"') {
                    closed = true;
                    break;
                } else {
                    lit += c;
                }
            }
            if (!closed) parse_error(line, "unterminated literal");
            out.args.push_back(Vocab{lit});
        } else if (line[i] == 'x' || line[i] == 'z') {
            char which = line[i];
            if (i + 1 >= line.size() || line[i + 1] != '[') parse_error(line, "expected [");
            size_t close = line.find(']', i);
            if (close == std::string::npos) parse_error(line, "missing ]");
            size_t idx = 0;
            try {
                idx = std::stoul(line.substr(i + 2, close - i - 2));
            } catch (const std::exception&) {
                parse_error(line, "bad index");
            }
            if (which == 'x')
                out.args.push_back(CopyInput{idx});
            else
                out.args.push_back(CopyOutput{idx});
            i = close + 1;
        } else {
            parse_error(line, "bad argument");
        }
        skip_ws();
        if (i < line.size() && line[i] == ',') {
            ++i;
            skip_ws();
        }
    }
    if (i >= line.size() || line[i] != ')') parse_error(line, "missing )");
    if (out.args.size() != arity(out.op)) parse_error(line, "wrong argument count");
    return out;
}

Program parse_program(const std::string& text) {
    Program p;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        p.instrs.push_back(parse_instruction(line));
    }
    return p;
}

}  // namespace mwp
