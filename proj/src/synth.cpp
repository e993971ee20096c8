#include "mwp/synth.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <string>

namespace mwp {

namespace {

const std::vector<std::string> kNames = {"Sam",  "Lena", "Tom", "Mia",
                                         "Ravi", "Ana",  "Ben", "Kira"};
const std::vector<std::string> kObjects = {"pens",  "apples", "marbles", "books",
                                           "cards", "shells", "coins",   "stickers"};

std::string num(long v) { return std::to_string(v); }

struct Draft {
    std::string question;
    std::string rationale_body;  // without the answer sentence
    long result = 0;
    long a = 0, b = 0;
};

Draft one_step(std::mt19937& rng) {
    Draft d;
    const std::string& name = kNames[rng() % kNames.size()];
    const std::string& obj = kObjects[rng() % kObjects.size()];
    long a, b;
    switch (rng() % 4) {
        case 0:
            a = 2 + static_cast<long>(rng() % 11);
            b = 2 + static_cast<long>(rng() % 11);
            d.question = name + " has " + num(a) + " red " + obj + " and " + num(b) + " blue " +
                         obj + " . How many " + obj + " does " + name + " have in total ?";
            d.result = a + b;
            d.rationale_body = num(a) + " + " + num(b) + " = " + num(d.result) + " .";
            break;
        case 1:
            b = 2 + static_cast<long>(rng() % 11);
            a = b + 1 + static_cast<long>(rng() % 11);
            d.question = "A shop had " + num(a) + " " + obj + " and sold " + num(b) +
                         " of them . How many " + obj + " are left ?";
            d.result = a - b;
            d.rationale_body = num(a) + " - " + num(b) + " = " + num(d.result) + " .";
            break;
        case 2:
            a = 2 + static_cast<long>(rng() % 11);
            b = 2 + static_cast<long>(rng() % 11);
            d.question = name + " packed " + num(a) + " boxes with " + num(b) + " " + obj +
                         " in each box . How many " + obj + " are there altogether ?";
            d.result = a * b;
            d.rationale_body = num(a) + " * " + num(b) + " = " + num(d.result) + " .";
            break;
        default: {
            b = 2 + static_cast<long>(rng() % 11);
            long q = 2 + static_cast<long>(rng() % 11);
            a = b * q;
            d.question = name + " shared " + num(a) + " " + obj + " equally among " + num(b) +
                         " friends . How many " + obj + " does each friend get ?";
            d.result = q;
            d.rationale_body = num(a) + " / " + num(b) + " = " + num(d.result) + " .";
            break;
        }
    }
    d.a = a;
    d.b = b;
    return d;
}

Draft two_step(std::mt19937& rng) {
    Draft d;
    const std::string& name = kNames[rng() % kNames.size()];
    const std::string& obj = kObjects[rng() % kObjects.size()];
    long a = 2 + static_cast<long>(rng() % 11);
    long b = 2 + static_cast<long>(rng() % 11);
    long c = 2 + static_cast<long>(rng() % 11);
    if (rng() % 2 == 0) {
        long r1 = a * b;
        d.question = name + " bought " + num(a) + " bags with " + num(b) + " " + obj +
                     " in each bag and found " + num(c) + " more " + obj + " . How many " + obj +
                     " does " + name + " have now ?";
        d.result = r1 + c;
        d.rationale_body = num(a) + " * " + num(b) + " = " + num(r1) + " . " + num(r1) + " + " +
                           num(c) + " = " + num(d.result) + " .";
    } else {
        long r1 = a + b;
        if (c >= r1) c = r1 - 1;
        d.question = name + " had " + num(a) + " " + obj + " and bought " + num(b) +
                     " more , then gave away " + num(c) + " . How many " + obj + " remain ?";
        d.result = r1 - c;
        d.rationale_body = num(a) + " + " + num(b) + " = " + num(r1) + " . " + num(r1) + " - " +
                           num(c) + " = " + num(d.result) + " .";
    }
    d.a = a;
    d.b = b;
    return d;
}

}  // namespace

std::vector<Problem> gen_synth(const SynthConfig& cfg) {
    std::mt19937 rng(static_cast<uint32_t>(cfg.seed));
    std::vector<Problem> out;
    out.reserve(cfg.n);
    const size_t n_two = static_cast<size_t>(cfg.two_step_fraction * static_cast<double>(cfg.n));
    for (size_t i = 0; i < cfg.n; ++i) {
        Draft d = (i < n_two) ? two_step(rng) : one_step(rng);

        // four distinct distractors around the result
        std::vector<long> pool = {d.result + 1, d.result - 1, d.result + 2,  d.result + d.b,
                                  d.result + 3, d.result * 2, d.result + 5,  d.result - 2,
                                  d.result + 7, d.result + 10, d.result + 4, d.result + 11};
        std::set<long> seen = {d.result};
        std::vector<long> distractors;
        for (long v : pool) {
            if (v < 0 || seen.count(v)) continue;
            seen.insert(v);
            distractors.push_back(v);
            if (distractors.size() == 4) break;
        }

        size_t correct_idx = rng() % 5;
        Problem p;
        p.question = d.question;
        size_t di = 0;
        for (size_t k = 0; k < 5; ++k) {
            long value = (k == correct_idx) ? d.result : distractors[di++];
            p.options[k] = std::string(1, static_cast<char>('A' + k)) + ") " + num(value);
        }
        p.correct = static_cast<char>('A' + correct_idx);
        p.rationale = d.rationale_body + " Answer is " + std::string(1, p.correct);
        out.push_back(std::move(p));
    }
    // interleave the two-step problems deterministically
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

}  // namespace mwp
