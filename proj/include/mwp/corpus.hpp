#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mwp {

// Special token surfaces. <O> separates the question from each option in the
// source sequence; <EOR> ends the rationale; the chosen option letter and
// <EOS> follow it in the target sequence.
inline constexpr const char* kOptTag = "<O>";
inline constexpr const char* kEor = "<EOR>";
inline constexpr const char* kEos = "<EOS>";
inline constexpr const char* kUnk = "<UNK>";
inline constexpr const char* kNewline = "\n";

enum class TokenKind : uint8_t { Word, Number, Punct, Special };

struct Token {
    std::string surface;
    TokenKind kind = TokenKind::Word;
    std::optional<double> numeric_value;  // present iff kind == Number

    bool operator==(const Token& o) const {
        return surface == o.surface && kind == o.kind;
    }
};

Token make_word(std::string s);
Token make_number(std::string s, double v);
Token make_punct(std::string s);
Token make_special(std::string s);

struct Problem {
    std::string question;
    std::array<std::string, 5> options;  // each prefixed with its letter, e.g. "A) 1/221"
    std::string rationale;
    char correct = 'A';  // one of A..E
};

// Question tokens followed by, per option, an <O> tag and the option tokens.
struct SourceSeq {
    std::vector<Token> tokens;
};

// Rationale tokens, then <EOR>, the correct letter, <EOS>.
struct TargetSeq {
    std::vector<Token> tokens;
};

struct ColumnStats {
    double avg_all = 0.0;
    double avg_numeric = 0.0;
    double avg_other = 0.0;
    size_t vocab_all = 0;
    size_t vocab_numeric = 0;
    size_t vocab_other = 0;
};

struct CorpusStats {
    size_t n_examples = 0;
    ColumnStats question;  // question + option tokens
    ColumnStats rationale;
};

// Parses one numeric surface form. Accepts plain integers, decimals,
// fractions a/b (b != 0) and thousands-grouped integers like "1,000,000",
// all with an optional leading minus. Anything else yields nullopt.
std::optional<double> lex_numeric(const std::string& surface);

// Whitespace split, then punctuation characters .,;:?!()[]{}= and the arrow
// are split off as single-char PUNCT tokens unless they participate in a
// maximal numeric pattern (thousands-grouped, decimal, fraction, integer, in
// that priority). A run delimited by punctuation that is entirely one numeric
// pattern becomes a NUMBER token; other runs are WORD tokens. Newlines become
// explicit SPECIAL tokens, as do the literal <O>/<EOR>/<EOS>/<UNK> surfaces.
// Joining surfaces with single spaces and re-tokenizing is a fixed point.
std::vector<Token> tokenize(const std::string& text);

// One JSON record per line with fields question, options (5 strings),
// rationale, correct. Throws std::runtime_error naming the offending line.
std::vector<Problem> load_corpus(const std::string& path);
std::vector<Problem> parse_corpus(const std::string& text);

std::string problem_to_json(const Problem& p);
void save_corpus(const std::vector<Problem>& problems, const std::string& path);

SourceSeq build_source(const Problem& p);
TargetSeq build_target(const Problem& p);

// Plain character-level edit distance and its normalized form
// (distance / max length in characters).
size_t levenshtein(const std::string& a, const std::string& b);
double normalized_levenshtein(const std::string& a, const std::string& b);

// Drops every training problem whose question is within `threshold`
// normalized edit distance of any heldout question. Order preserved.
std::vector<Problem> levenshtein_dedup(const std::vector<Problem>& heldout,
                                       const std::vector<Problem>& train,
                                       double threshold);

CorpusStats compute_stats(const std::vector<Problem>& problems);
std::string stats_to_text(const CorpusStats& s);
std::string stats_to_json(const CorpusStats& s);

}  // namespace mwp
