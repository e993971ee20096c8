#include "mwp/eval.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mwp {

double perplexity(const std::vector<std::vector<double>>& per_token_logprobs) {
    if (per_token_logprobs.empty()) throw std::invalid_argument("perplexity of empty corpus");
    double sum = 0.0;
    for (const auto& sent : per_token_logprobs) {
        if (sent.empty()) throw std::invalid_argument("perplexity of empty sentence");
        double lp = 0.0;
        for (double v : sent) lp += v;
        sum += std::exp(-lp / static_cast<double>(sent.size()));
    }
    return sum / static_cast<double>(per_token_logprobs.size());
}

namespace {

using Ngram = std::vector<std::string>;

std::vector<std::string> surfaces_of(const std::string& text) {
    std::vector<std::string> out;
    for (const auto& t : tokenize(text)) out.push_back(t.surface);
    return out;
}

std::map<Ngram, size_t> ngram_counts(const std::vector<std::string>& toks, size_t n) {
    std::map<Ngram, size_t> counts;
    if (toks.size() < n) return counts;
    for (size_t i = 0; i + n <= toks.size(); ++i)
        ++counts[Ngram(toks.begin() + i, toks.begin() + i + n)];
    return counts;
}

}  // namespace

double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::string>& references) {
    if (candidates.empty()) throw std::invalid_argument("bleu of empty corpus");
    if (candidates.size() != references.size())
        throw std::invalid_argument("bleu needs matching candidate/reference counts");

    double matched[4] = {0, 0, 0, 0};
    double total[4] = {0, 0, 0, 0};
    double cand_len = 0.0, ref_len = 0.0;
    for (size_t i = 0; i < candidates.size(); ++i) {
        auto c = surfaces_of(candidates[i]);
        auto r = surfaces_of(references[i]);
        cand_len += static_cast<double>(c.size());
        ref_len += static_cast<double>(r.size());
        for (size_t n = 1; n <= 4; ++n) {
            auto cc = ngram_counts(c, n);
            auto rc = ngram_counts(r, n);
            for (const auto& [gram, count] : cc) {
                total[n - 1] += static_cast<double>(count);
                auto it = rc.find(gram);
                if (it != rc.end())
                    matched[n - 1] += static_cast<double>(std::min(count, it->second));
            }
        }
    }
    // orders with no candidate n-grams at all (candidates shorter than n)
    // drop out of the geometric mean; an order with zero matches scores zero
    double log_prec = 0.0;
    size_t orders = 0;
    for (size_t n = 0; n < 4; ++n) {
        if (total[n] == 0.0) continue;
        if (matched[n] == 0.0) return 0.0;
        log_prec += std::log(matched[n] / total[n]);
        ++orders;
    }
    if (orders == 0) return 0.0;
    log_prec /= static_cast<double>(orders);
    double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return 100.0 * bp * std::exp(log_prec);
}

double sentence_bleu4_smoothed(const std::string& candidate, const std::string& reference) {
    auto c = surfaces_of(candidate);
    auto r = surfaces_of(reference);
    if (c.empty() || r.empty()) return 0.0;
    double log_prec = 0.0;
    for (size_t n = 1; n <= 4; ++n) {
        auto cc = ngram_counts(c, n);
        auto rc = ngram_counts(r, n);
        double total = 0.0, matched = 0.0;
        for (const auto& [gram, count] : cc) {
            total += static_cast<double>(count);
            auto it = rc.find(gram);
            if (it != rc.end()) matched += static_cast<double>(std::min(count, it->second));
        }
        double p;
        if (n == 1)
            p = total > 0.0 ? matched / total : 0.0;
        else
            p = (matched + 1.0) / (total + 1.0);
        if (p == 0.0) return 0.0;
        log_prec += std::log(p) / 4.0;
    }
    double bp = c.size() >= r.size()
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(c.size()));
    return 100.0 * bp * std::exp(log_prec);
}

double accuracy(const std::vector<char>& chosen, const std::vector<char>& gold) {
    if (chosen.empty()) throw std::invalid_argument("accuracy of empty corpus");
    if (chosen.size() != gold.size())
        throw std::invalid_argument("accuracy needs matching counts");
    size_t hits = 0;
    for (size_t i = 0; i < chosen.size(); ++i)
        if (chosen[i] == gold[i]) ++hits;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(chosen.size());
}

std::string report_to_text(const EvalReport& r) {
    std::ostringstream os;
    os << "examples          " << r.n_examples << "\n"
       << "perplexity        " << r.perplexity << "\n"
       << "bleu-4            " << r.bleu4 << "\n"
       << "accuracy          " << r.accuracy << "\n"
       << "fallback_choices  " << r.n_fallback_choices << "\n";
    return os.str();
}

std::string report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["examples"] = r.n_examples;
    j["perplexity"] = r.perplexity;
    j["bleu4"] = r.bleu4;
    j["accuracy"] = r.accuracy;
    j["fallback_choices"] = r.n_fallback_choices;
    return j.dump(2);
}

}  // namespace mwp
