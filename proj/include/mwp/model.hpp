#pragma once

#include <array>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mwp/dsl.hpp"
#include "mwp/tensor.hpp"

namespace mwp {

struct ModelConfig {
    size_t hidden_size = 200;
    size_t embed_size = 200;
    size_t att_size = 0;  // 0 means hidden_size
    size_t vocab_size = 20000;
    size_t lstm_layers = 2;
    size_t slice_k = 100;            // staged back-propagation window
    size_t samples_per_example = 8;  // programs kept per training example
    double learning_rate = 0.5;
    double lr_decay = 0.5;  // halving on plateau
    double clip_norm = 5.0;
    uint64_t seed = 1;

    size_t att() const { return att_size == 0 ? hidden_size : att_size; }
};

// Most frequent surfaces of a training corpus, with the special tokens always
// present. Out-of-vocabulary words map to <UNK>.
class Vocabulary {
  public:
    Vocabulary();  // specials only
    static Vocabulary build(const std::vector<Problem>& corpus, size_t max_size);
    static Vocabulary from_words(const std::vector<std::string>& words);

    int id(const std::string& w) const;
    int unk_id() const { return unk_id_; }
    size_t size() const { return words_.size(); }
    const std::string& word(int id) const { return words_[static_cast<size_t>(id)]; }
    const std::vector<std::string>& words() const { return words_; }
    bool contains(const std::string& w) const;
    std::set<std::string> surface_set() const;

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    int unk_id_ = 0;
};

// predictors for one argument slot
enum ArgPredictor : int { kPredSoftmax = 0, kPredCopyInput = 1, kPredCopyOutput = 2 };

struct LstmState {
    Vec h;
    Vec c;
};

// Activations of one LSTM step, kept for the backward pass.
struct LstmStepCache {
    Vec in, h_prev, c_prev;
    Vec ig, fg, gg, og;
    Vec c, tanh_c, h;
};

struct EncoderState {
    std::vector<Vec> u;  // top-layer hidden per position
    std::vector<LstmState> final_state;
    std::vector<std::vector<LstmStepCache>> caches;  // [layer][position]
    std::vector<Vec> inputs;                         // feature vector per position
    std::vector<int> token_ids;
};

// Immutable per-hypothesis decoder state for search.
struct DecSnapshot {
    std::vector<LstmState> layers;
    Vec prev_vfeat;   // features of the previous instruction's value
    Vec prev_qfinal;  // final argument state of the previous instruction
    std::shared_ptr<std::vector<Vec>> h_history;  // decoder states, for output copy
};

struct ArgDistribution {
    std::array<double, 3> gate{};  // masked mixture over predictors
    Vec softmax_probs;             // over the vocabulary
    Vec copy_input_probs;          // over x positions
    Vec copy_output_probs;         // over prior instructions
};

struct InstructionDistribution {
    Vec op_probs;           // over the 22 operations
    double p_output = 0.5;  // dest probability for the argmax operation
    ArgDistribution first_arg;
};

struct TrainExample {
    const SourceSeq* x = nullptr;
    const OptionSet* options = nullptr;
    std::vector<const Program*> programs;  // induced explanations of y
};

struct TrainStepStats {
    double loss = 0.0;
    size_t slice_passes = 0;
    size_t skipped = 0;  // examples with no programs
    double grad_norm = 0.0;
};

class Model {
  public:
    Model(ModelConfig cfg, Vocabulary vocab);

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }

    EncoderState encode(const SourceSeq& x) const;

    // ----- scoring -----
    DecSnapshot start_decoder(const EncoderState& enc) const;

    // Log-probability of appending `instrs` to a hypothesis, marginalizing
    // each argument over the predictors able to produce its resolved value.
    // `exec` is the execution state before the instructions; it is advanced
    // internally to resolve and embed values.
    struct ScoredChain {
        double logprob = 0.0;
        DecSnapshot next;
        std::vector<double> per_instr;
    };
    ScoredChain score_instructions(const EncoderState& enc, const DecSnapshot& snap,
                                   const ExecutionState& exec,
                                   const std::vector<Instruction>& instrs) const;

    double program_logprob(const SourceSeq& x, const OptionSet& options, const Program& z,
                           std::vector<double>* per_instr = nullptr) const;

    // Probability of emitting <UNK> through Id, used when force-decoding a
    // token no candidate chain explains.
    double unk_emission_logprob(const EncoderState& enc, const DecSnapshot& snap,
                                const ExecutionState& exec) const;
    DecSnapshot advance_with_unk(const EncoderState& enc, const DecSnapshot& snap,
                                 const ExecutionState& exec) const;

    InstructionDistribution step_distribution(const EncoderState& enc,
                                              const DecSnapshot& snap) const;

    // ----- expansion for free decoding -----
    struct OpChoice {
        OperationId op;
        double logp;
    };
    std::vector<OpChoice> top_ops(const EncoderState& enc, const DecSnapshot& snap,
                                  size_t k) const;

    // Top argument proposals for one slot of a partially built instruction,
    // drawn from all three predictors and ranked by the marginal probability
    // of the proposed value. Distinct values only.
    struct ArgProposal {
        ArgSource src;
        Value value;
        double logp;
    };
    std::vector<ArgProposal> propose_args(const EncoderState& enc, const DecSnapshot& snap,
                                          const ExecutionState& exec, OperationId op, Dest dest,
                                          const std::vector<ArgSource>& prior_args,
                                          size_t k) const;
    double dest_logprob(const EncoderState& enc, const DecSnapshot& snap, OperationId op,
                        Dest dest) const;

    // ----- training -----
    // loss = -log sum_z exp(log p(z|x)); gradients accumulate into params.
    // K empty: single full-sequence backward pass. Returns slice passes.
    double example_loss_and_grads(const TrainExample& ex, std::optional<size_t> K,
                                  size_t* slice_passes = nullptr);
    double example_loss(const TrainExample& ex) const;  // forward only

    TrainStepStats staged_train_step(const std::vector<TrainExample>& batch, size_t K, double lr);

    // ----- persistence -----
    void save(const std::string& path) const;
    static Model load(const std::string& path);

    // feature vectors: [embedding; is-string; is-float; signed log value]
    Vec token_features(const Token& t) const;
    Vec value_features(const Value& v) const;
    Vec start_features() const;

  private:
    ModelConfig cfg_;
    Vocabulary vocab_;
    ParamRegistry params_;
};

// Gradient check harness: central finite differences of example_loss against
// the analytic gradients, over every tensor. Returns the max relative error.
double gradient_check(Model& model, const TrainExample& ex, double epsilon,
                      std::string* worst_tensor = nullptr);

}  // namespace mwp
