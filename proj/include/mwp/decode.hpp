#pragma once

#include <string>
#include <vector>

#include "mwp/induction.hpp"
#include "mwp/model.hpp"

namespace mwp {

struct DecodeConfig {
    size_t beam = 200;
    size_t max_len = 600;  // instruction budget per problem
    size_t op_k = 6;       // operations expanded per hypothesis
    size_t arg_k = 4;      // argument proposals per slot
    uint64_t seed = 1;     // fallback option choice
};

struct DecodeResult {
    Program program;
    std::string rationale;  // emitted tokens before <EOR>, space separated
    char chosen = '?';
    double score = 0.0;
    bool fallback = false;  // no hypothesis finished; letter drawn at random
};

// Execution-filtered beam search for the most likely program. Hypotheses
// proposing unexecutable instructions are pruned; once <EOR> is emitted only
// instructions producing an option letter are allowed, then <EOS>.
DecodeResult beam_decode(const Model& model, const SourceSeq& x, const OptionSet& options,
                         const DecodeConfig& cfg);

struct ForceDecodeResult {
    Program program;
    double total_logprob = 0.0;
    std::vector<double> per_token;  // chain score per target token
    // total emission mass of the token over every candidate chain available
    // to the surviving hypothesis at that step (>= per_token)
    std::vector<double> per_token_mass;
    size_t unk_tokens = 0;  // tokens scored through the <UNK> fallback
};

// Constrained decoding that must emit y: at each target token hypotheses
// extend through the candidate chains of the induction filter, scored by the
// model; tokens no chain explains score as <UNK> emissions and the state is
// advanced with the observed token.
ForceDecodeResult force_decode(const Model& model, const SourceSeq& x, const TargetSeq& y,
                               const OptionSet& options, const InductionConfig& icfg,
                               size_t beam);

// Model-guided ranking hook for induce_programs.
class ModelChainScorer : public ChainScorer {
  public:
    explicit ModelChainScorer(const Model& model) : model_(model) {}
    std::shared_ptr<void> start(const SourceSeq& x) override;
    std::pair<double, std::shared_ptr<void>> extend(const std::shared_ptr<void>& state,
                                                    const ExecutionState& exec,
                                                    const std::vector<Instruction>& chain) override;

  private:
    const Model& model_;
};

}  // namespace mwp
