#include "mwp/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mwp {

Token make_word(std::string s) { return Token{std::move(s), TokenKind::Word, std::nullopt}; }
Token make_number(std::string s, double v) { return Token{std::move(s), TokenKind::Number, v}; }
Token make_punct(std::string s) { return Token{std::move(s), TokenKind::Punct, std::nullopt}; }
Token make_special(std::string s) { return Token{std::move(s), TokenKind::Special, std::nullopt}; }

namespace {

constexpr const char* kArrow = "\xE2\x86\x92";  // UTF-8 arrow

bool is_ascii_punct(char c) {
    static const std::string set = ".,;:?!()[]{}=";
    return set.find(c) != std::string::npos;
}

// Returns the byte length of a punctuation character at s[i], or 0.
size_t punct_len_at(const std::string& s, size_t i) {
    if (is_ascii_punct(s[i])) return 1;
    if (s.compare(i, 3, kArrow) == 0) return 3;
    return 0;
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

size_t digit_run(const std::string& s, size_t i) {
    size_t j = i;
    while (j < s.size() && is_digit(s[j])) ++j;
    return j - i;
}

// Each matcher returns the matched length starting at i (0 if no match).
size_t match_thousands(const std::string& s, size_t i) {
    size_t j = i;
    if (j < s.size() && s[j] == '-') ++j;
    size_t head = digit_run(s, j);
    if (head < 1 || head > 3) return 0;
    j += head;
    size_t groups = 0;
    while (j < s.size() && s[j] == ',') {
        if (digit_run(s, j + 1) != 3) return 0;  // "1,00" / "1,0000" are not grouped
        j += 4;
        ++groups;
    }
    if (groups == 0) return 0;
    return j - i;
}

size_t match_decimal(const std::string& s, size_t i) {
    size_t j = i;
    if (j < s.size() && s[j] == '-') ++j;
    size_t a = digit_run(s, j);
    if (a == 0) return 0;
    j += a;
    if (j >= s.size() || s[j] != '.') return 0;
    ++j;
    size_t b = digit_run(s, j);
    if (b == 0) return 0;
    return j + b - i;
}

size_t match_fraction(const std::string& s, size_t i) {
    size_t j = i;
    if (j < s.size() && s[j] == '-') ++j;
    size_t a = digit_run(s, j);
    if (a == 0) return 0;
    j += a;
    if (j >= s.size() || s[j] != '/') return 0;
    ++j;
    size_t b = digit_run(s, j);
    if (b == 0) return 0;
    // denominator of zero does not lex as a number
    bool all_zero = true;
    for (size_t k = j; k < j + b; ++k)
        if (s[k] != '0') all_zero = false;
    if (all_zero) return 0;
    return j + b - i;
}

size_t match_integer(const std::string& s, size_t i) {
    size_t j = i;
    if (j < s.size() && s[j] == '-') ++j;
    size_t a = digit_run(s, j);
    if (a == 0) return 0;
    return j + a - i;
}

size_t match_numeric(const std::string& s, size_t i) {
    if (size_t n = match_thousands(s, i)) return n;
    if (size_t n = match_decimal(s, i)) return n;
    if (size_t n = match_fraction(s, i)) return n;
    if (size_t n = match_integer(s, i)) return n;
    return 0;
}

std::optional<double> parse_numeric_value(const std::string& s) {
    double v = 0.0;
    if (size_t slash = s.find('/'); slash != std::string::npos) {
        double num = std::strtod(s.substr(0, slash).c_str(), nullptr);
        double den = std::strtod(s.substr(slash + 1).c_str(), nullptr);
        v = num / den;
    } else {
        std::string digits;
        for (char c : s)
            if (c != ',') digits.push_back(c);
        v = std::strtod(digits.c_str(), nullptr);
    }
    if (!std::isfinite(v)) return std::nullopt;
    return v;
}

bool is_special_surface(const std::string& s) {
    return s == kOptTag || s == kEor || s == kEos || s == kUnk;
}

void tokenize_chunk(const std::string& chunk, std::vector<Token>& out) {
    if (is_special_surface(chunk)) {
        out.push_back(make_special(chunk));
        return;
    }
    const size_t n = chunk.size();
    // Punctuation inside a maximal numeric match (the comma in "1,000", the
    // dot in "12.5") stays attached; everything else splits.
    std::vector<bool> in_number(n, false);
    for (size_t a = 0; a < n; ++a) {
        if (size_t len = match_numeric(chunk, a)) {
            for (size_t k = a; k < a + len; ++k) in_number[k] = true;
        }
    }
    size_t i = 0;
    while (i < n) {
        size_t pl = punct_len_at(chunk, i);
        if (pl && !in_number[i]) {
            out.push_back(make_punct(chunk.substr(i, pl)));
            i += pl;
            continue;
        }
        size_t j = i;
        while (j < n) {
            size_t q = punct_len_at(chunk, j);
            if (q && !in_number[j]) break;
            j += q ? q : 1;
        }
        std::string surf = chunk.substr(i, j - i);
        if (auto v = lex_numeric(surf))
            out.push_back(make_number(surf, *v));
        else
            out.push_back(make_word(surf));
        i = j;
    }
}

}  // namespace

std::optional<double> lex_numeric(const std::string& surface) {
    if (surface.empty()) return std::nullopt;
    size_t n = match_numeric(surface, 0);
    if (n != surface.size()) return std::nullopt;
    return parse_numeric_value(surface);
}

std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    size_t i = 0;
    std::string chunk;
    auto flush = [&] {
        if (!chunk.empty()) {
            tokenize_chunk(chunk, out);
            chunk.clear();
        }
    };
    while (i < text.size()) {
        char c = text[i];
        if (c == '\n') {
            flush();
            out.push_back(make_special(kNewline));
            ++i;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f') {
            flush();
            ++i;
        } else {
            chunk.push_back(c);
            ++i;
        }
    }
    flush();
    return out;
}

std::vector<Problem> parse_corpus(const std::string& text) {
    std::vector<Problem> out;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("line " + std::to_string(lineno) + ": bad record: " + e.what());
        }
        Problem p;
        try {
            p.question = j.at("question").get<std::string>();
            auto opts = j.at("options");
            if (!opts.is_array() || opts.size() != 5)
                throw std::runtime_error("expected exactly 5 options");
            for (size_t k = 0; k < 5; ++k) p.options[k] = opts[k].get<std::string>();
            p.rationale = j.at("rationale").get<std::string>();
            std::string c = j.at("correct").get<std::string>();
            if (c.size() != 1 || c[0] < 'A' || c[0] > 'E')
                throw std::runtime_error("correct must be a letter A..E");
            p.correct = c[0];
        } catch (const std::exception& e) {
            throw std::runtime_error("line " + std::to_string(lineno) + ": " + e.what());
        }
        if (p.question.empty() || p.rationale.empty())
            throw std::runtime_error("line " + std::to_string(lineno) +
                                     ": question and rationale must be non-empty");
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Problem> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_corpus(buf.str());
}

std::string problem_to_json(const Problem& p) {
    nlohmann::json j;
    j["question"] = p.question;
    j["options"] = p.options;
    j["rationale"] = p.rationale;
    j["correct"] = std::string(1, p.correct);
    return j.dump();
}

void save_corpus(const std::vector<Problem>& problems, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& p : problems) out << problem_to_json(p) << "\n";
}

SourceSeq build_source(const Problem& p) {
    SourceSeq x;
    x.tokens = tokenize(p.question);
    for (const auto& opt : p.options) {
        x.tokens.push_back(make_special(kOptTag));
        auto ts = tokenize(opt);
        x.tokens.insert(x.tokens.end(), ts.begin(), ts.end());
    }
    return x;
}

TargetSeq build_target(const Problem& p) {
    TargetSeq y;
    y.tokens = tokenize(p.rationale);
    y.tokens.push_back(make_special(kEor));
    y.tokens.push_back(make_word(std::string(1, p.correct)));
    y.tokens.push_back(make_special(kEos));
    return y;
}

size_t levenshtein(const std::string& a, const std::string& b) {
    const size_t n = a.size(), m = b.size();
    if (n == 0) return m;
    if (m == 0) return n;
    std::vector<size_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = j;
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            size_t del = prev[j] + 1;
            size_t ins = cur[j - 1] + 1;
            size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({del, ins, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double normalized_levenshtein(const std::string& a, const std::string& b) {
    size_t mx = std::max(a.size(), b.size());
    if (mx == 0) return 0.0;
    return static_cast<double>(levenshtein(a, b)) / static_cast<double>(mx);
}

std::vector<Problem> levenshtein_dedup(const std::vector<Problem>& heldout,
                                       const std::vector<Problem>& train,
                                       double threshold) {
    std::vector<Problem> kept;
    kept.reserve(train.size());
    for (const auto& t : train) {
        bool replica = false;
        for (const auto& h : heldout) {
            if (normalized_levenshtein(t.question, h.question) <= threshold) {
                replica = true;
                break;
            }
        }
        if (!replica) kept.push_back(t);
    }
    return kept;
}

namespace {

struct ColumnAccum {
    size_t tok_numeric = 0;
    size_t tok_other = 0;
    std::set<std::string> vocab_numeric;
    std::set<std::string> vocab_other;

    void add(const std::vector<Token>& toks) {
        for (const auto& t : toks) {
            if (t.kind == TokenKind::Number) {
                ++tok_numeric;
                vocab_numeric.insert(t.surface);
            } else {
                ++tok_other;
                vocab_other.insert(t.surface);
            }
        }
    }

    ColumnStats finish(size_t n) const {
        ColumnStats s;
        if (n == 0) return s;
        s.avg_numeric = static_cast<double>(tok_numeric) / n;
        s.avg_other = static_cast<double>(tok_other) / n;
        s.avg_all = s.avg_numeric + s.avg_other;
        s.vocab_numeric = vocab_numeric.size();
        s.vocab_other = vocab_other.size();
        std::set<std::string> all = vocab_numeric;
        all.insert(vocab_other.begin(), vocab_other.end());
        s.vocab_all = all.size();
        return s;
    }
};

}  // namespace

CorpusStats compute_stats(const std::vector<Problem>& problems) {
    CorpusStats out;
    out.n_examples = problems.size();
    ColumnAccum q, r;
    for (const auto& p : problems) {
        auto qt = tokenize(p.question);
        for (const auto& opt : p.options) {
            auto ot = tokenize(opt);
            qt.insert(qt.end(), ot.begin(), ot.end());
        }
        q.add(qt);
        r.add(tokenize(p.rationale));
    }
    out.question = q.finish(out.n_examples);
    out.rationale = r.finish(out.n_examples);
    return out;
}

std::string stats_to_text(const CorpusStats& s) {
    std::ostringstream os;
    os << "examples            " << s.n_examples << "\n";
    auto col = [&](const char* name, const ColumnStats& c) {
        os << name << ".avg_len.all       " << c.avg_all << "\n"
           << name << ".avg_len.numeric   " << c.avg_numeric << "\n"
           << name << ".avg_len.other     " << c.avg_other << "\n"
           << name << ".vocab.all         " << c.vocab_all << "\n"
           << name << ".vocab.numeric     " << c.vocab_numeric << "\n"
           << name << ".vocab.other       " << c.vocab_other << "\n";
    };
    col("question ", s.question);
    col("rationale", s.rationale);
    return os.str();
}

std::string stats_to_json(const CorpusStats& s) {
    auto col = [](const ColumnStats& c) {
        nlohmann::json j;
        j["avg_len"] = {{"all", c.avg_all}, {"numeric", c.avg_numeric}, {"other", c.avg_other}};
        j["vocab"] = {{"all", c.vocab_all}, {"numeric", c.vocab_numeric}, {"other", c.vocab_other}};
        return j;
    };
    nlohmann::json j;
    j["examples"] = s.n_examples;
    j["question"] = col(s.question);
    j["rationale"] = col(s.rationale);
    return j.dump(2);
}

}  // namespace mwp
