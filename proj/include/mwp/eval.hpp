#pragma once

#include <string>
#include <vector>

#include "mwp/corpus.hpp"

namespace mwp {

struct EvalReport {
    double perplexity = 0.0;
    double bleu4 = 0.0;    // 0..100
    double accuracy = 0.0;  // percent
    size_t n_examples = 0;
    size_t n_fallback_choices = 0;
};

// Mean over examples of exp(-sum(logp)/len). Throws on an empty corpus or an
// empty sentence.
double perplexity(const std::vector<std::vector<double>>& per_token_logprobs);

// Corpus-level BLEU with orders 1..4, geometric mean and brevity penalty,
// no smoothing; candidates and references are tokenized internally.
double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references);

// Diagnostic per-sentence variant with add-one smoothing on orders above 1.
double sentence_bleu4_smoothed(const std::string& candidate, const std::string& reference);

// 100 * matches / total
double accuracy(const std::vector<char>& chosen, const std::vector<char>& gold);

std::string report_to_text(const EvalReport& r);
std::string report_to_json(const EvalReport& r);

}  // namespace mwp
