#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mwp/dsl.hpp"

namespace mwp {

// Search configuration. `depth` bounds the number of hidden arithmetic
// instructions per emitted token at depth-1; string<->float conversions do
// not count. The candidate cap and node budget bound per-token search work
// and are reported when hit.
struct InductionConfig {
    size_t depth = 5;
    size_t beam = 200;
    size_t candidate_cap = 200;
    size_t node_budget = 200000;
    const std::set<std::string>* vocab = nullptr;  // null means everything is in-vocabulary
};

// A candidate explanation for one target token: zero or more Memory
// instructions followed by exactly one Output instruction that emits the
// token from the current state.
struct CandidateChain {
    std::vector<Instruction> instrs;
    size_t n_hidden = 0;  // arithmetic instructions, conversions excluded
};

struct CandidateSet {
    Token target;
    std::vector<CandidateChain> chains;
    bool capped = false;
    bool budget_hit = false;
};

// Chains usable by the search are drawn from a fixed grammar:
//   - operands are values copied from x tokens or prior instruction values,
//     with at most one string->float conversion per operand and at most one
//     float->string conversion at the emission;
//   - up to depth-1 arithmetic instructions combine operands, every
//     intermediate feeding a later instruction;
//   - the emission is Id of an equal token or of the vocabulary word equal
//     to the target, a float->string conversion whose result is exactly the
//     target surface, Id of the target word after arithmetic whose value
//     matches the target number at 1e-4 relative when no conversion
//     reproduces the surface, or Check when its result equals the target.
// Chains are deduplicated by (operation sequence, resolved argument values,
// destination pattern), preferring input copies, then output copies, then
// vocabulary words as the surviving provenance.
CandidateSet candidate_instructions(const ExecutionState& state, const Token& target,
                                    const InductionConfig& cfg, bool require_check = false);

// Signature used by the dedup rule: op, dest and resolved argument values of
// every instruction in the chain, executed from `base`. Returns nullopt when
// the chain does not execute.
std::optional<std::string> chain_signature(const ExecutionState& base,
                                           const std::vector<Instruction>& chain);

// Optional model hook for ranking hypotheses during induction. Implementations
// own their per-hypothesis state; `extend` must not mutate the input state.
class ChainScorer {
  public:
    virtual ~ChainScorer() = default;
    virtual std::shared_ptr<void> start(const SourceSeq& x) = 0;
    virtual std::pair<double, std::shared_ptr<void>> extend(
        const std::shared_ptr<void>& state, const ExecutionState& exec,
        const std::vector<Instruction>& chain) = 0;
};

struct InducedProgram {
    Program program;
    double score = 0.0;  // log-probability under the scorer; 0 under uniform
};

struct InducedProgramSet {
    std::vector<InducedProgram> programs;
    bool candidate_capped = false;
    bool budget_hit = false;
};

// Left-to-right beam search over the target tokens; every returned program
// re-executes to y exactly, and the emission before <EOS> is a Check result
// equal to the correct option letter.
InducedProgramSet induce_programs(const SourceSeq& x, const TargetSeq& y, const OptionSet& options,
                                  const InductionConfig& cfg, ChainScorer* scorer = nullptr);

struct CoverageEntry {
    bool covered = false;
    size_t n_programs = 0;
    std::string first_program;  // serialized, empty when uncovered
};

struct CoverageReport {
    std::vector<CoverageEntry> entries;
    size_t n_covered = 0;
};

CoverageReport coverage_report(const std::vector<Problem>& problems, const InductionConfig& cfg,
                               size_t jobs = 1, const std::string& cache_dir = "");

// Disk cache, one file per problem hash, holding serialized programs with
// their scores.
std::string problem_hash(const Problem& p);
std::optional<InducedProgramSet> load_cached_programs(const std::string& dir,
                                                      const std::string& hash);
void store_cached_programs(const std::string& dir, const std::string& hash,
                           const InducedProgramSet& set);

}  // namespace mwp
