#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mwp/decode.hpp"
#include "mwp/eval.hpp"
#include "mwp/induction.hpp"
#include "mwp/model.hpp"

namespace mwp {

// Induced program sets for a corpus, run in a worker pool and optionally
// cached on disk. Entry i belongs to problems[i].
std::vector<InducedProgramSet> induce_corpus(const std::vector<Problem>& problems,
                                             const InductionConfig& cfg, size_t jobs,
                                             const std::string& cache_dir = "");

struct TrainPipelineConfig {
    ModelConfig model;
    InductionConfig induction;
    size_t epochs = 10;
    size_t jobs = 1;
    std::string cache_dir;
    std::string log_path;       // append-only: step, loss, grad norm, lr
    double plateau_eps = 1e-3;  // relative improvement below this halves the lr
};

struct TrainOutcome {
    size_t covered = 0;
    size_t total = 0;
    double final_loss = 0.0;
    double final_lr = 0.0;
};

// Builds the vocabulary from the training corpus, induces programs for every
// problem and runs epochs of single-example SGD steps over the covered ones.
Model train_pipeline(const std::vector<Problem>& train, const TrainPipelineConfig& cfg,
                     TrainOutcome* outcome = nullptr);

struct DecodedProblem {
    size_t index = 0;
    DecodeResult result;
};

std::vector<DecodedProblem> decode_corpus(const Model& model, const std::vector<Problem>& problems,
                                          const DecodeConfig& cfg, size_t jobs);

// Accuracy and BLEU from decode results; perplexity by force-decoding each
// gold rationale when `with_perplexity` is set.
EvalReport evaluate_corpus(const Model& model, const std::vector<Problem>& problems,
                           const std::vector<DecodedProblem>& decodes, bool with_perplexity,
                           const InductionConfig& icfg, size_t force_beam = 4, size_t jobs = 1);

}  // namespace mwp
