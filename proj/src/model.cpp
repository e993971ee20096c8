#include "mwp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace mwp {

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string>& special_words() {
    static const std::vector<std::string> s = {kUnk, kOptTag, kEor, kEos, kNewline};
    return s;
}
}  // namespace

Vocabulary::Vocabulary() {
    for (const auto& w : special_words()) {
        index_[w] = static_cast<int>(words_.size());
        words_.push_back(w);
    }
    unk_id_ = index_.at(kUnk);
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) {
        if (v.index_.count(w)) continue;
        v.index_[w] = static_cast<int>(v.words_.size());
        v.words_.push_back(w);
    }
    return v;
}

Vocabulary Vocabulary::build(const std::vector<Problem>& corpus, size_t max_size) {
    std::unordered_map<std::string, size_t> freq;
    auto feed = [&](const std::vector<Token>& ts) {
        for (const auto& t : ts) ++freq[t.surface];
    };
    for (const auto& p : corpus) {
        feed(tokenize(p.question));
        for (const auto& o : p.options) feed(tokenize(o));
        feed(tokenize(p.rationale));
        freq[std::string(1, p.correct)] += 1;
    }
    std::vector<std::pair<std::string, size_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> words;
    for (const auto& [w, n] : items) {
        if (words.size() + special_words().size() >= max_size) break;
        words.push_back(w);
    }
    return from_words(words);
}

int Vocabulary::id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk_id_ : it->second;
}

bool Vocabulary::contains(const std::string& w) const { return index_.count(w) > 0; }

std::set<std::string> Vocabulary::surface_set() const {
    return std::set<std::string>(words_.begin(), words_.end());
}

// ---------------------------------------------------------------------------
// lstm primitives
// ---------------------------------------------------------------------------

namespace {

using LstmCache = LstmStepCache;

void lstm_forward(const Matrix& wx, const Matrix& wh, const Matrix& b, const Vec& in,
                  const LstmState& prev, LstmState& out, LstmCache* cache) {
    const size_t H = prev.h.size();
    Vec z(4 * H, 0.0);
    for (size_t r = 0; r < 4 * H; ++r) z[r] = b.data[r];
    mul_acc(z, wx, in);
    mul_acc(z, wh, prev.h);
    Vec ig(H), fg(H), gg(H), og(H), c(H), tc(H), h(H);
    for (size_t k = 0; k < H; ++k) {
        ig[k] = sigmoid(z[k]);
        fg[k] = sigmoid(z[H + k]);
        gg[k] = std::tanh(z[2 * H + k]);
        og[k] = sigmoid(z[3 * H + k]);
        c[k] = fg[k] * prev.c[k] + ig[k] * gg[k];
        tc[k] = std::tanh(c[k]);
        h[k] = og[k] * tc[k];
    }
    out.h = h;
    out.c = c;
    if (cache) {
        cache->in = in;
        cache->h_prev = prev.h;
        cache->c_prev = prev.c;
        cache->ig = std::move(ig);
        cache->fg = std::move(fg);
        cache->gg = std::move(gg);
        cache->og = std::move(og);
        cache->c = std::move(c);
        cache->tanh_c = std::move(tc);
        cache->h = std::move(h);
    }
}

// dh/dc: incoming gradients on this step's outputs. din/dh_prev/dc_prev are
// accumulated into; parameter gradients go to the g* matrices.
void lstm_backward(const Matrix& wx, const Matrix& wh, Matrix& gwx, Matrix& gwh, Matrix& gb,
                   const LstmCache& cache, const Vec& dh, const Vec& dc_in, Vec& din, Vec& dh_prev,
                   Vec& dc_prev) {
    const size_t H = dh.size();
    Vec dz(4 * H, 0.0);
    for (size_t k = 0; k < H; ++k) {
        double dtc = dh[k] * cache.og[k];
        double dc = dc_in[k] + dtc * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
        double dog = dh[k] * cache.tanh_c[k];
        double dig = dc * cache.gg[k];
        double dfg = dc * cache.c_prev[k];
        double dgg = dc * cache.ig[k];
        dc_prev[k] += dc * cache.fg[k];
        dz[k] = dig * cache.ig[k] * (1.0 - cache.ig[k]);
        dz[H + k] = dfg * cache.fg[k] * (1.0 - cache.fg[k]);
        dz[2 * H + k] = dgg * (1.0 - cache.gg[k] * cache.gg[k]);
        dz[3 * H + k] = dog * cache.og[k] * (1.0 - cache.og[k]);
    }
    outer_acc(gwx, dz, cache.in);
    outer_acc(gwh, dz, cache.h_prev);
    for (size_t r = 0; r < 4 * H; ++r) gb.data[r] += dz[r];
    mul_t_acc(din, wx, dz);
    mul_t_acc(dh_prev, wh, dz);
}

double signed_log(double v) { return std::copysign(std::log1p(std::abs(v)), v); }

}  // namespace

// ---------------------------------------------------------------------------
// model setup
// ---------------------------------------------------------------------------

namespace {
std::string layer_name(const char* base, size_t l) { return std::string(base) + std::to_string(l); }
}  // namespace

Model::Model(ModelConfig cfg, Vocabulary vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
    const size_t H = cfg_.hidden_size;
    const size_t E = cfg_.embed_size;
    const size_t A = cfg_.att();
    const size_t V = vocab_.size();
    const size_t VF = E + 3;

    params_.add("Emb", V, E);
    params_.add("OpEmb", kNumOperations, E);
    params_.add("DestEmb", 2, VF);
    params_.add("StartFeat", 1, VF);
    params_.add("W_in", E, VF + H);
    params_.add("b_in", E, 1);
    for (size_t l = 0; l < cfg_.lstm_layers; ++l) {
        size_t enc_in = l == 0 ? VF : H;
        size_t dec_in = l == 0 ? E : H;
        params_.add(layer_name("W_enc_x", l), 4 * H, enc_in);
        params_.add(layer_name("W_enc_h", l), 4 * H, H);
        params_.add(layer_name("b_enc", l), 4 * H, 1);
        params_.add(layer_name("W_dec_x", l), 4 * H, dec_in);
        params_.add(layer_name("W_dec_h", l), 4 * H, H);
        params_.add(layer_name("b_dec", l), 4 * H, 1);
    }
    params_.add("W_op", kNumOperations, H);
    params_.add("b_op", kNumOperations, 1);
    params_.add("W_r", H, H + E);
    params_.add("b_r", H, 1);
    params_.add("W_dest", 1, H);
    params_.add("b_dest", 1, 1);
    params_.add("W_q_x", 4 * H, VF);
    params_.add("W_q_h", 4 * H, H);
    params_.add("b_q", 4 * H, 1);
    params_.add("W_gate", 3, H);
    params_.add("b_gate", 3, 1);
    params_.add("W_vocab", V, H);
    params_.add("b_vocab", V, 1);
    params_.add("W_att_in", A, 2 * H);
    params_.add("b_att_in", A, 1);
    params_.add("V_att_in", 1, A);
    params_.add("W_att_out", A, 2 * H);
    params_.add("b_att_out", A, 1);
    params_.add("V_att_out", 1, A);

    params_.init_uniform(0.08, cfg_.seed);
}

namespace {
const Matrix& W(const ParamRegistry& p, const std::string& name) {
    const Tensor* t = p.find(name);
    assert(t);
    return t->value;
}
Matrix& G(ParamRegistry& p, const std::string& name) {
    Tensor* t = p.find(name);
    assert(t);
    return t->grad;
}
}  // namespace

Vec Model::token_features(const Token& t) const {
    const size_t E = cfg_.embed_size;
    Vec f(E + 3, 0.0);
    const Matrix& emb = W(params_, "Emb");
    int id = vocab_.id(t.surface);
    for (size_t k = 0; k < E; ++k) f[k] = emb.at(static_cast<size_t>(id), k);
    if (t.kind == TokenKind::Number && t.numeric_value) {
        f[E + 1] = 1.0;
        f[E + 2] = signed_log(*t.numeric_value);
    } else {
        f[E] = 1.0;
    }
    return f;
}

Vec Model::value_features(const Value& v) const {
    const size_t E = cfg_.embed_size;
    Vec f(E + 3, 0.0);
    const Matrix& emb = W(params_, "Emb");
    int id = vocab_.id(v.surface());
    for (size_t k = 0; k < E; ++k) f[k] = emb.at(static_cast<size_t>(id), k);
    if (v.is_num()) {
        f[E + 1] = 1.0;
        f[E + 2] = signed_log(v.num_value());
    } else {
        f[E] = 1.0;
    }
    return f;
}

Vec Model::start_features() const {
    const Matrix& sf = W(params_, "StartFeat");
    return Vec(sf.data.begin(), sf.data.end());
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

EncoderState Model::encode(const SourceSeq& x) const {
    const size_t H = cfg_.hidden_size;
    const size_t L = cfg_.lstm_layers;
    EncoderState enc;
    enc.caches.resize(L);
    std::vector<LstmState> state(L);
    for (auto& s : state) {
        s.h.assign(H, 0.0);
        s.c.assign(H, 0.0);
    }
    for (const auto& tok : x.tokens) {
        Vec in = token_features(tok);
        enc.inputs.push_back(in);
        enc.token_ids.push_back(vocab_.id(tok.surface));
        for (size_t l = 0; l < L; ++l) {
            LstmCache cache;
            LstmState next;
            lstm_forward(W(params_, layer_name("W_enc_x", l)), W(params_, layer_name("W_enc_h", l)),
                         W(params_, layer_name("b_enc", l)), in, state[l], next, &cache);
            in = next.h;
            state[l] = std::move(next);
            enc.caches[l].push_back(std::move(cache));
        }
        enc.u.push_back(state[L - 1].h);
    }
    enc.final_state = std::move(state);
    return enc;
}

// ---------------------------------------------------------------------------
// shared head math (forward only), used by both scoring paths
// ---------------------------------------------------------------------------

namespace {

// affinity f([a; q]) = V tanh(W [a; q] + b), returning the A-dim tanh vector
double affinity(const Matrix& w, const Matrix& b, const Matrix& v, const Vec& a, const Vec& q,
                Vec* tanh_out) {
    Vec cat = concat(a, q);
    Vec pre(w.rows, 0.0);
    for (size_t r = 0; r < w.rows; ++r) pre[r] = b.data[r];
    mul_acc(pre, w, cat);
    double s = 0.0;
    for (size_t r = 0; r < w.rows; ++r) {
        double t = std::tanh(pre[r]);
        if (tanh_out) (*tanh_out)[r] = t;
        s += v.data[r] * t;
    }
    return s;
}

struct GateInfo {
    Vec logits;                   // 3
    std::array<double, 3> probs;  // masked softmax
    std::array<bool, 3> avail;
};

GateInfo gate_distribution(const ParamRegistry& params, const Vec& qstate, bool have_output_copy) {
    GateInfo g;
    g.logits = mul(W(params, "W_gate"), qstate);
    const Matrix& b = W(params, "b_gate");
    for (size_t k = 0; k < 3; ++k) g.logits[k] += b.data[k];
    g.avail = {true, true, have_output_copy};
    double mx = -1e300;
    for (size_t k = 0; k < 3; ++k)
        if (g.avail[k]) mx = std::max(mx, g.logits[k]);
    double z = 0.0;
    for (size_t k = 0; k < 3; ++k)
        if (g.avail[k]) z += std::exp(g.logits[k] - mx);
    for (size_t k = 0; k < 3; ++k) g.probs[k] = g.avail[k] ? std::exp(g.logits[k] - mx) / z : 0.0;
    return g;
}

bool values_match(const Value& a, const Value& b) { return value_close(a, b, 1e-9); }

}  // namespace

// ---------------------------------------------------------------------------
// lean incremental scoring (decode path)
// ---------------------------------------------------------------------------

DecSnapshot Model::start_decoder(const EncoderState& enc) const {
    DecSnapshot s;
    s.layers = enc.final_state;
    s.prev_vfeat = start_features();
    s.prev_qfinal.assign(cfg_.hidden_size, 0.0);
    s.h_history = std::make_shared<std::vector<Vec>>();
    return s;
}

namespace {

struct LeanStep {
    Vec h;                          // top decoder state
    std::vector<LstmState> layers;  // post-step
};

}  // namespace

// One decoder LSTM step from a snapshot (no caches).
static LeanStep lean_decoder_step(const Model& m, const ParamRegistry& params,
                                  const ModelConfig& cfg, const DecSnapshot& snap) {
    Vec cat = concat(snap.prev_vfeat, snap.prev_qfinal);
    Vec in = mul(W(params, "W_in"), cat);
    const Matrix& bin = W(params, "b_in");
    for (size_t k = 0; k < in.size(); ++k) in[k] += bin.data[k];
    LeanStep out;
    out.layers.resize(cfg.lstm_layers);
    Vec layer_in = in;
    for (size_t l = 0; l < cfg.lstm_layers; ++l) {
        lstm_forward(W(params, layer_name("W_dec_x", l)), W(params, layer_name("W_dec_h", l)),
                     W(params, layer_name("b_dec", l)), layer_in, snap.layers[l], out.layers[l],
                     nullptr);
        layer_in = out.layers[l].h;
    }
    out.h = out.layers.back().h;
    return out;
}

// Marginal probability of an argument value over the predictors that can
// produce it. `exec` supplies x and the prior values.
static double arg_value_prob(const Model& m, const ParamRegistry& params, const ModelConfig& cfg,
                             const Vocabulary& vocab, const EncoderState& enc,
                             const std::vector<Vec>& h_history, const ExecutionState& exec,
                             const Vec& qstate, const Value& gold, bool* unk_fallback) {
    GateInfo gate = gate_distribution(params, qstate, !h_history.empty());
    double p = 0.0;

    Vec vocab_probs;
    auto vocab_prob_of = [&](int id) {
        if (vocab_probs.empty()) {
            Vec logits = mul(W(params, "W_vocab"), qstate);
            const Matrix& b = W(params, "b_vocab");
            for (size_t k = 0; k < logits.size(); ++k) logits[k] += b.data[k];
            vocab_probs = softmax(logits);
        }
        return vocab_probs[static_cast<size_t>(id)];
    };

    if (gold.is_str() && vocab.contains(gold.str_value()))
        p += gate.probs[kPredSoftmax] * vocab_prob_of(vocab.id(gold.str_value()));

    if (gold.is_str() && exec.x) {
        std::vector<size_t> matches;
        for (size_t k = 0; k < exec.x->tokens.size(); ++k)
            if (exec.x->tokens[k].surface == gold.str_value()) matches.push_back(k);
        if (!matches.empty()) {
            Vec scores(enc.u.size());
            Vec tanh_buf(cfg.att());
            for (size_t k = 0; k < enc.u.size(); ++k)
                scores[k] = affinity(W(params, "W_att_in"), W(params, "b_att_in"),
                                     W(params, "V_att_in"), enc.u[k], qstate, &tanh_buf);
            Vec probs = softmax(scores);
            double sum = 0.0;
            for (size_t k : matches) sum += probs[k];
            p += gate.probs[kPredCopyInput] * sum;
        }
    }

    if (!h_history.empty()) {
        std::vector<size_t> matches;
        for (size_t j = 0; j < exec.values.size(); ++j)
            if (values_match(exec.values[j], gold)) matches.push_back(j);
        if (!matches.empty()) {
            assert(h_history.size() == exec.values.size());
            Vec scores(h_history.size());
            Vec tanh_buf(cfg.att());
            for (size_t j = 0; j < h_history.size(); ++j)
                scores[j] = affinity(W(params, "W_att_out"), W(params, "b_att_out"),
                                     W(params, "V_att_out"), h_history[j], qstate, &tanh_buf);
            Vec probs = softmax(scores);
            double sum = 0.0;
            for (size_t j : matches) sum += probs[j];
            p += gate.probs[kPredCopyOutput] * sum;
        }
    }

    if (unk_fallback) *unk_fallback = false;
    if (p == 0.0) {
        // no predictor can produce the value: the word falls back to <UNK>
        p = gate.probs[kPredSoftmax] * vocab_prob_of(vocab.unk_id());
        if (unk_fallback) *unk_fallback = true;
    }
    return p;
}

Model::ScoredChain Model::score_instructions(const EncoderState& enc, const DecSnapshot& snap,
                                             const ExecutionState& exec,
                                             const std::vector<Instruction>& instrs) const {
    const size_t H = cfg_.hidden_size;
    ScoredChain out;
    DecSnapshot cur = snap;
    ExecutionState state = exec;
    for (const auto& instr : instrs) {
        LeanStep step = lean_decoder_step(*this, params_, cfg_, cur);
        double lp = 0.0;

        Vec op_logits = mul(W(params_, "W_op"), step.h);
        const Matrix& bop = W(params_, "b_op");
        for (size_t k = 0; k < op_logits.size(); ++k) op_logits[k] += bop.data[k];
        double op_lse = log_sum_exp(op_logits);
        lp += op_logits[static_cast<size_t>(instr.op)] - op_lse;

        const Matrix& op_emb = W(params_, "OpEmb");
        Vec oemb(op_emb.row(static_cast<size_t>(instr.op)),
                 op_emb.row(static_cast<size_t>(instr.op)) + cfg_.embed_size);
        Vec r_pre = mul(W(params_, "W_r"), concat(step.h, oemb));
        const Matrix& br = W(params_, "b_r");
        Vec r_state(H);
        for (size_t k = 0; k < H; ++k) r_state[k] = std::tanh(r_pre[k] + br.data[k]);

        double dest_logit = mul(W(params_, "W_dest"), r_state)[0] + W(params_, "b_dest").data[0];
        double p_out = sigmoid(dest_logit);
        lp += std::log(instr.dest == Dest::Output ? p_out : 1.0 - p_out);

        // argument chain
        LstmState q;
        q.h = r_state;
        q.c.assign(H, 0.0);
        const Matrix& dest_emb = W(params_, "DestEmb");
        size_t drow = instr.dest == Dest::Output ? 0 : 1;
        Vec din(dest_emb.row(drow), dest_emb.row(drow) + dest_emb.cols);
        LstmState qn;
        lstm_forward(W(params_, "W_q_x"), W(params_, "W_q_h"), W(params_, "b_q"), din, q, qn,
                     nullptr);
        q = qn;
        for (const auto& arg : instr.args) {
            auto gold = resolve(arg, state);
            if (!gold) return out;  // unexecutable; caller should not pass these
            double p = arg_value_prob(*this, params_, cfg_, vocab_, enc, *cur.h_history, state,
                                      q.h, *gold, nullptr);
            lp += std::log(p);
            Vec feat = value_features(*gold);
            lstm_forward(W(params_, "W_q_x"), W(params_, "W_q_h"), W(params_, "b_q"), feat, q, qn,
                         nullptr);
            q = qn;
        }

        std::string err;
        if (!execute_instruction(instr, state, &err)) return out;
        const Value& v = state.values.back();

        DecSnapshot next;
        next.layers = std::move(step.layers);
        next.prev_vfeat = value_features(v);
        next.prev_qfinal = q.h;
        next.h_history = std::make_shared<std::vector<Vec>>(*cur.h_history);
        next.h_history->push_back(step.h);
        cur = std::move(next);

        out.per_instr.push_back(lp);
        out.logprob += lp;
    }
    out.next = std::move(cur);
    return out;
}

double Model::program_logprob(const SourceSeq& x, const OptionSet& options, const Program& z,
                              std::vector<double>* per_instr) const {
    EncoderState enc = encode(x);
    DecSnapshot snap = start_decoder(enc);
    ExecutionState exec;
    exec.x = &x;
    exec.options = &options;
    auto scored = score_instructions(enc, snap, exec, z.instrs);
    if (scored.per_instr.size() != z.instrs.size())
        throw std::runtime_error("program does not execute");
    if (per_instr) *per_instr = scored.per_instr;
    return scored.logprob;
}

double Model::unk_emission_logprob(const EncoderState& enc, const DecSnapshot& snap,
                                   const ExecutionState& exec) const {
    Instruction unk{OperationId::Id, {Vocab{kUnk}}, Dest::Output};
    auto scored = score_instructions(enc, snap, exec, {unk});
    assert(scored.per_instr.size() == 1);
    return scored.logprob;
}

InstructionDistribution Model::step_distribution(const EncoderState& enc,
                                                 const DecSnapshot& snap) const {
    const size_t H = cfg_.hidden_size;
    InstructionDistribution dist;
    LeanStep step = lean_decoder_step(*this, params_, cfg_, snap);
    Vec op_logits = mul(W(params_, "W_op"), step.h);
    const Matrix& bop = W(params_, "b_op");
    for (size_t k = 0; k < op_logits.size(); ++k) op_logits[k] += bop.data[k];
    dist.op_probs = softmax(op_logits);

    size_t argmax_op = 0;
    for (size_t k = 1; k < dist.op_probs.size(); ++k)
        if (dist.op_probs[k] > dist.op_probs[argmax_op]) argmax_op = k;

    const Matrix& op_emb = W(params_, "OpEmb");
    Vec oemb(op_emb.row(argmax_op), op_emb.row(argmax_op) + cfg_.embed_size);
    Vec r_pre = mul(W(params_, "W_r"), concat(step.h, oemb));
    const Matrix& br = W(params_, "b_r");
    Vec r_state(H);
    for (size_t k = 0; k < H; ++k) r_state[k] = std::tanh(r_pre[k] + br.data[k]);
    dist.p_output =
        sigmoid(mul(W(params_, "W_dest"), r_state)[0] + W(params_, "b_dest").data[0]);

    LstmState q;
    q.h = r_state;
    q.c.assign(H, 0.0);
    const Matrix& dest_emb = W(params_, "DestEmb");
    Vec din(dest_emb.row(0), dest_emb.row(0) + dest_emb.cols);
    LstmState qn;
    lstm_forward(W(params_, "W_q_x"), W(params_, "W_q_h"), W(params_, "b_q"), din, q, qn, nullptr);

    GateInfo gate = gate_distribution(params_, qn.h, !snap.h_history->empty());
    dist.first_arg.gate = gate.probs;

    Vec logits = mul(W(params_, "W_vocab"), qn.h);
    const Matrix& bv = W(params_, "b_vocab");
    for (size_t k = 0; k < logits.size(); ++k) logits[k] += bv.data[k];
    dist.first_arg.softmax_probs = softmax(logits);

    Vec scores(enc.u.size());
    Vec tanh_buf(cfg_.att());
    for (size_t k = 0; k < enc.u.size(); ++k)
        scores[k] = affinity(W(params_, "W_att_in"), W(params_, "b_att_in"),
                             W(params_, "V_att_in"), enc.u[k], qn.h, &tanh_buf);
    dist.first_arg.copy_input_probs = softmax(scores);

    if (!snap.h_history->empty()) {
        Vec oscores(snap.h_history->size());
        for (size_t j = 0; j < snap.h_history->size(); ++j)
            oscores[j] = affinity(W(params_, "W_att_out"), W(params_, "b_att_out"),
                                  W(params_, "V_att_out"), (*snap.h_history)[j], qn.h, &tanh_buf);
        dist.first_arg.copy_output_probs = softmax(oscores);
    }
    return dist;
}

namespace {

// q-chain state for a partially built instruction: dest feed plus the prior
// argument feeds.
LstmState arg_chain_state(const Model& model, const ParamRegistry& params,
                          const ModelConfig& cfg, const Vec& r_state, Dest dest,
                          const ExecutionState& exec, const std::vector<ArgSource>& prior_args) {
    LstmState q;
    q.h = r_state;
    q.c.assign(cfg.hidden_size, 0.0);
    const Matrix& dest_emb = W(params, "DestEmb");
    size_t drow = dest == Dest::Output ? 0 : 1;
    Vec din(dest_emb.row(drow), dest_emb.row(drow) + dest_emb.cols);
    LstmState qn;
    lstm_forward(W(params, "W_q_x"), W(params, "W_q_h"), W(params, "b_q"), din, q, qn, nullptr);
    q = qn;
    for (const auto& arg : prior_args) {
        auto val = resolve(arg, exec);
        assert(val);
        Vec feat = model.value_features(*val);
        lstm_forward(W(params, "W_q_x"), W(params, "W_q_h"), W(params, "b_q"), feat, q, qn,
                     nullptr);
        q = qn;
    }
    return q;
}

Vec r_state_for_op(const ParamRegistry& params, const ModelConfig& cfg, const Vec& h,
                   OperationId op) {
    const Matrix& op_emb = W(params, "OpEmb");
    Vec oemb(op_emb.row(static_cast<size_t>(op)),
             op_emb.row(static_cast<size_t>(op)) + cfg.embed_size);
    Vec r_pre = mul(W(params, "W_r"), concat(h, oemb));
    const Matrix& br = W(params, "b_r");
    Vec r(cfg.hidden_size);
    for (size_t k = 0; k < cfg.hidden_size; ++k) r[k] = std::tanh(r_pre[k] + br.data[k]);
    return r;
}

}  // namespace

double Model::dest_logprob(const EncoderState& enc, const DecSnapshot& snap, OperationId op,
                           Dest dest) const {
    (void)enc;
    LeanStep step = lean_decoder_step(*this, params_, cfg_, snap);
    Vec r = r_state_for_op(params_, cfg_, step.h, op);
    double p_out = sigmoid(mul(W(params_, "W_dest"), r)[0] + W(params_, "b_dest").data[0]);
    return std::log(dest == Dest::Output ? p_out : 1.0 - p_out);
}

std::vector<Model::ArgProposal> Model::propose_args(const EncoderState& enc,
                                                    const DecSnapshot& snap,
                                                    const ExecutionState& exec, OperationId op,
                                                    Dest dest,
                                                    const std::vector<ArgSource>& prior_args,
                                                    size_t k) const {
    LeanStep step = lean_decoder_step(*this, params_, cfg_, snap);
    Vec r = r_state_for_op(params_, cfg_, step.h, op);
    LstmState q = arg_chain_state(*this, params_, cfg_, r, dest, exec, prior_args);

    GateInfo gate = gate_distribution(params_, q.h, !snap.h_history->empty());

    // all three conditional distributions, computed once
    Vec vocab_probs;
    {
        Vec logits = mul(W(params_, "W_vocab"), q.h);
        const Matrix& bv = W(params_, "b_vocab");
        for (size_t i = 0; i < logits.size(); ++i) logits[i] += bv.data[i];
        vocab_probs = softmax(logits);
    }
    Vec ci_probs;
    {
        Vec scores(enc.u.size());
        Vec tanh_buf(cfg_.att());
        for (size_t i = 0; i < enc.u.size(); ++i)
            scores[i] = affinity(W(params_, "W_att_in"), W(params_, "b_att_in"),
                                 W(params_, "V_att_in"), enc.u[i], q.h, &tanh_buf);
        ci_probs = softmax(scores);
    }
    Vec co_probs;
    if (!snap.h_history->empty()) {
        Vec scores(snap.h_history->size());
        Vec tanh_buf(cfg_.att());
        for (size_t j = 0; j < snap.h_history->size(); ++j)
            scores[j] = affinity(W(params_, "W_att_out"), W(params_, "b_att_out"),
                                 W(params_, "V_att_out"), (*snap.h_history)[j], q.h, &tanh_buf);
        co_probs = softmax(scores);
    }

    // candidate values from each predictor's head
    struct Cand {
        ArgSource src;
        Value value;
    };
    std::vector<Cand> cands;
    auto top_indices = [&](const Vec& scores) {
        std::vector<size_t> order(scores.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        size_t take = std::min(k, order.size());
        std::partial_sort(order.begin(), order.begin() + take, order.end(),
                          [&](size_t a, size_t b) { return scores[a] > scores[b]; });
        order.resize(take);
        return order;
    };
    for (size_t id : top_indices(vocab_probs)) {
        const std::string& w = vocab_.word(static_cast<int>(id));
        cands.push_back({Vocab{w}, Value::str(w)});
    }
    for (size_t pos : top_indices(ci_probs))
        cands.push_back({CopyInput{pos}, Value::str(exec.x->tokens[pos].surface)});
    if (!co_probs.empty())
        for (size_t j : top_indices(co_probs)) cands.push_back({CopyOutput{j}, exec.values[j]});

    // marginal probability of a value across the predictors that can emit it
    auto marginal = [&](const Value& v) {
        double p = 0.0;
        if (v.is_str()) {
            if (vocab_.contains(v.str_value()))
                p += gate.probs[kPredSoftmax] * vocab_probs[static_cast<size_t>(
                                                     vocab_.id(v.str_value()))];
            for (size_t i = 0; i < exec.x->tokens.size(); ++i)
                if (exec.x->tokens[i].surface == v.str_value())
                    p += gate.probs[kPredCopyInput] * ci_probs[i];
        }
        for (size_t j = 0; j < co_probs.size(); ++j)
            if (values_match(exec.values[j], v)) p += gate.probs[kPredCopyOutput] * co_probs[j];
        return p;
    };

    std::vector<ArgProposal> out;
    std::set<std::string> seen;
    for (const auto& c : cands) {
        std::string key = (c.value.is_num() ? "n:" : "s:") + c.value.surface();
        if (!seen.insert(key).second) continue;
        double p = marginal(c.value);
        if (p <= 0.0) continue;
        out.push_back({c.src, c.value, std::log(p)});
    }
    std::sort(out.begin(), out.end(),
              [](const ArgProposal& a, const ArgProposal& b) { return a.logp > b.logp; });
    if (out.size() > k) out.resize(k);
    return out;
}

std::vector<Model::OpChoice> Model::top_ops(const EncoderState& enc, const DecSnapshot& snap,
                                            size_t k) const {
    LeanStep step = lean_decoder_step(*this, params_, cfg_, snap);
    Vec op_logits = mul(W(params_, "W_op"), step.h);
    const Matrix& bop = W(params_, "b_op");
    for (size_t i = 0; i < op_logits.size(); ++i) op_logits[i] += bop.data[i];
    double lse = log_sum_exp(op_logits);
    std::vector<OpChoice> choices;
    for (size_t i = 0; i < op_logits.size(); ++i)
        choices.push_back({static_cast<OperationId>(i), op_logits[i] - lse});
    std::sort(choices.begin(), choices.end(),
              [](const OpChoice& a, const OpChoice& b) { return a.logp > b.logp; });
    if (choices.size() > k) choices.resize(k);
    return choices;
}

// ---------------------------------------------------------------------------
// cached training forward and backward
// ---------------------------------------------------------------------------

namespace {

struct ArgCache {
    Vec qstate;  // state the prediction was made from
    GateInfo gate;
    // softmax conditional
    bool used_vocab = false;
    Vec vocab_probs;
    int vocab_gold = -1;  // id scored under the softmax predictor (or UNK)
    // copy-input conditional
    bool used_ci = false;
    Vec ci_probs;
    std::vector<Vec> ci_tanh;
    std::vector<char> ci_match;
    // copy-output conditional
    bool used_co = false;
    Vec co_probs;
    std::vector<Vec> co_tanh;
    std::vector<char> co_match;
    double p_arg = 0.0;
    Vec feat;  // features of the fed value
    int feat_row = 0;
    LstmCache feed;  // q step consuming `feat`
};

struct InstrCache {
    Vec in_concat;
    Vec dec_in;
    std::vector<LstmCache> dec_steps;
    Vec h;
    Vec op_logits, op_probs;
    size_t op_id = 0;
    Vec r_concat, r_state;
    double p_out = 0.5;
    Dest dest = Dest::Output;
    LstmCache q_init;  // feeding the dest embedding
    size_t dest_row = 0;
    std::vector<ArgCache> args;
    Vec q_final;
    int v_row = 0;  // embedding row of the produced value
    Vec v_feat;
    double logprob = 0.0;
};

struct ProgramForward {
    std::vector<InstrCache> instrs;
    double total = 0.0;
};

}  // namespace

// Forward pass over one program with full caches. Returns false if the
// program fails to execute.
static bool forward_program(const Model& model, const ParamRegistry& params,
                            const ModelConfig& cfg, const Vocabulary& vocab,
                            const EncoderState& enc, const SourceSeq& x, const OptionSet& options,
                            const Program& z, ProgramForward& out) {
    const size_t H = cfg.hidden_size;
    ExecutionState exec;
    exec.x = &x;
    exec.options = &options;

    std::vector<LstmState> layers = enc.final_state;
    Vec prev_vfeat;
    Vec prev_qfinal(H, 0.0);
    std::vector<Vec> h_history;

    out.instrs.clear();
    out.total = 0.0;

    for (size_t i = 0; i < z.instrs.size(); ++i) {
        const Instruction& instr = z.instrs[i];
        InstrCache C;

        const bool first = i == 0;
        C.in_concat = concat(first ? Vec(W(params, "StartFeat").data.begin(),
                                         W(params, "StartFeat").data.end())
                                   : prev_vfeat,
                             prev_qfinal);
        C.dec_in = mul(W(params, "W_in"), C.in_concat);
        const Matrix& bin = W(params, "b_in");
        for (size_t k = 0; k < C.dec_in.size(); ++k) C.dec_in[k] += bin.data[k];

        Vec layer_in = C.dec_in;
        C.dec_steps.resize(cfg.lstm_layers);
        for (size_t l = 0; l < cfg.lstm_layers; ++l) {
            LstmState next;
            lstm_forward(W(params, layer_name("W_dec_x", l)), W(params, layer_name("W_dec_h", l)),
                         W(params, layer_name("b_dec", l)), layer_in, layers[l], next,
                         &C.dec_steps[l]);
            layer_in = next.h;
            layers[l] = std::move(next);
        }
        C.h = layers.back().h;

        C.op_logits = mul(W(params, "W_op"), C.h);
        const Matrix& bop = W(params, "b_op");
        for (size_t k = 0; k < C.op_logits.size(); ++k) C.op_logits[k] += bop.data[k];
        C.op_probs = softmax(C.op_logits);
        C.op_id = static_cast<size_t>(instr.op);
        C.logprob += std::log(C.op_probs[C.op_id]);

        const Matrix& op_emb = W(params, "OpEmb");
        Vec oemb(op_emb.row(C.op_id), op_emb.row(C.op_id) + cfg.embed_size);
        C.r_concat = concat(C.h, oemb);
        Vec r_pre = mul(W(params, "W_r"), C.r_concat);
        const Matrix& br = W(params, "b_r");
        C.r_state.resize(H);
        for (size_t k = 0; k < H; ++k) C.r_state[k] = std::tanh(r_pre[k] + br.data[k]);

        double dest_logit =
            mul(W(params, "W_dest"), C.r_state)[0] + W(params, "b_dest").data[0];
        C.p_out = sigmoid(dest_logit);
        C.dest = instr.dest;
        C.logprob += std::log(instr.dest == Dest::Output ? C.p_out : 1.0 - C.p_out);

        LstmState q;
        q.h = C.r_state;
        q.c.assign(H, 0.0);
        const Matrix& dest_emb = W(params, "DestEmb");
        C.dest_row = instr.dest == Dest::Output ? 0 : 1;
        Vec dest_in(dest_emb.row(C.dest_row), dest_emb.row(C.dest_row) + dest_emb.cols);
        LstmState qn;
        lstm_forward(W(params, "W_q_x"), W(params, "W_q_h"), W(params, "b_q"), dest_in, q, qn,
                     &C.q_init);
        q = qn;

        for (const auto& arg : instr.args) {
            ArgCache A;
            A.qstate = q.h;
            auto gold_opt = resolve(arg, exec);
            if (!gold_opt) return false;
            const Value gold = *gold_opt;

            A.gate = gate_distribution(params, q.h, !h_history.empty());
            double p = 0.0;

            if (gold.is_str() && vocab.contains(gold.str_value())) {
                A.used_vocab = true;
                A.vocab_gold = vocab.id(gold.str_value());
            }

            std::vector<size_t> ci_matches;
            if (gold.is_str()) {
                for (size_t k = 0; k < x.tokens.size(); ++k)
                    if (x.tokens[k].surface == gold.str_value()) ci_matches.push_back(k);
            }
            if (!ci_matches.empty()) A.used_ci = true;

            std::vector<size_t> co_matches;
            if (!h_history.empty()) {
                for (size_t j = 0; j < exec.values.size(); ++j)
                    if (values_match(exec.values[j], gold)) co_matches.push_back(j);
            }
            if (!co_matches.empty()) A.used_co = true;

            if (!A.used_vocab && !A.used_ci && !A.used_co) {
                // <UNK> fallback through the softmax predictor
                A.used_vocab = true;
                A.vocab_gold = vocab.unk_id();
            }

            if (A.used_vocab) {
                Vec logits = mul(W(params, "W_vocab"), q.h);
                const Matrix& bv = W(params, "b_vocab");
                for (size_t k = 0; k < logits.size(); ++k) logits[k] += bv.data[k];
                A.vocab_probs = softmax(logits);
                p += A.gate.probs[kPredSoftmax] * A.vocab_probs[static_cast<size_t>(A.vocab_gold)];
            }
            if (A.used_ci) {
                Vec scores(x.tokens.size());
                A.ci_tanh.resize(x.tokens.size(), Vec(cfg.att()));
                for (size_t k = 0; k < x.tokens.size(); ++k)
                    scores[k] = affinity(W(params, "W_att_in"), W(params, "b_att_in"),
                                         W(params, "V_att_in"), enc.u[k], q.h, &A.ci_tanh[k]);
                A.ci_probs = softmax(scores);
                A.ci_match.assign(x.tokens.size(), 0);
                double sum = 0.0;
                for (size_t k : ci_matches) {
                    A.ci_match[k] = 1;
                    sum += A.ci_probs[k];
                }
                p += A.gate.probs[kPredCopyInput] * sum;
            }
            if (A.used_co) {
                Vec scores(h_history.size());
                A.co_tanh.resize(h_history.size(), Vec(cfg.att()));
                for (size_t j = 0; j < h_history.size(); ++j)
                    scores[j] = affinity(W(params, "W_att_out"), W(params, "b_att_out"),
                                         W(params, "V_att_out"), h_history[j], q.h, &A.co_tanh[j]);
                A.co_probs = softmax(scores);
                A.co_match.assign(h_history.size(), 0);
                double sum = 0.0;
                for (size_t j : co_matches) {
                    A.co_match[j] = 1;
                    sum += A.co_probs[j];
                }
                p += A.gate.probs[kPredCopyOutput] * sum;
            }

            A.p_arg = p;
            C.logprob += std::log(p);

            A.feat = model.value_features(gold);
            A.feat_row = vocab.id(gold.surface());
            lstm_forward(W(params, "W_q_x"), W(params, "W_q_h"), W(params, "b_q"), A.feat, q, qn,
                         &A.feed);
            q = qn;
            C.args.push_back(std::move(A));
        }
        C.q_final = q.h;

        std::string err;
        if (!execute_instruction(instr, exec, &err)) return false;
        const Value& v = exec.values.back();
        C.v_row = vocab.id(v.surface());
        C.v_feat = model.value_features(v);

        h_history.push_back(C.h);
        prev_vfeat = C.v_feat;
        prev_qfinal = C.q_final;

        out.total += C.logprob;
        out.instrs.push_back(std::move(C));
    }
    return true;
}

// Shared accumulators for gradients flowing into the encoder.
struct EncGrads {
    std::vector<Vec> du;  // per position, top layer
    std::vector<Vec> dh_final, dc_final;
};

// Backward over instructions [a, b) of one cached forward pass. Gradients on
// recurrent state, argument-chain state and output-copy attention stop at the
// window boundary; encoder attention gradients always accumulate.
static void backward_window(Model& model, ParamRegistry& params, const ModelConfig& cfg,
                            const Vocabulary& vocab, const EncoderState& enc,
                            const ProgramForward& fwd, size_t a, size_t b, double scale,
                            EncGrads& eg) {
    const size_t H = cfg.hidden_size;
    const size_t L = cfg.lstm_layers;
    const size_t E = cfg.embed_size;

    std::vector<Vec> dh_next(L, Vec(H, 0.0)), dc_next(L, Vec(H, 0.0));
    Vec dqfinal_next(H, 0.0);
    std::vector<Vec> dh_extra(fwd.instrs.size(), Vec());

    for (size_t ii = b; ii-- > a;) {
        const InstrCache& C = fwd.instrs[ii];

        Vec dh_top = dh_next[L - 1];
        if (!dh_extra[ii].empty())
            for (size_t k = 0; k < H; ++k) dh_top[k] += dh_extra[ii][k];

        // ----- argument chain backward -----
        Vec dq_h = dqfinal_next;  // gradient on q_final
        dqfinal_next.assign(H, 0.0);
        Vec dq_c(H, 0.0);
        Vec dr_state(H, 0.0);

        for (size_t j = C.args.size(); j-- > 0;) {
            const ArgCache& A = C.args[j];
            // feed step backward: consumes A.feat from state producing q_{j+1}
            Vec dfeat(A.feat.size(), 0.0);
            Vec dh_prev(H, 0.0), dc_prev(H, 0.0);
            lstm_backward(W(params, "W_q_x"), W(params, "W_q_h"), G(params, "W_q_x"),
                          G(params, "W_q_h"), G(params, "b_q"), A.feed, dq_h, dq_c, dfeat, dh_prev,
                          dc_prev);
            {
                Matrix& gemb = G(params, "Emb");
                for (size_t k = 0; k < E; ++k)
                    gemb.at(static_cast<size_t>(A.feat_row), k) += dfeat[k];
            }
            dq_h = std::move(dh_prev);
            dq_c = std::move(dc_prev);

            // scoring backward at state A.qstate; d log p(arg) terms
            double inv_p = scale / A.p_arg;
            std::array<double, 3> dgate{0.0, 0.0, 0.0};

            if (A.used_vocab) {
                double g = A.vocab_probs[static_cast<size_t>(A.vocab_gold)];
                dgate[kPredSoftmax] += inv_p * g;
                // d logits = w * (onehot - probs) * gate, w = inv_p * gate...
                double w = inv_p * A.gate.probs[kPredSoftmax];
                Vec dlogits(A.vocab_probs.size());
                for (size_t k = 0; k < A.vocab_probs.size(); ++k)
                    dlogits[k] = -w * g * A.vocab_probs[k];
                dlogits[static_cast<size_t>(A.vocab_gold)] += w * g;
                outer_acc(G(params, "W_vocab"), dlogits, A.qstate);
                Matrix& gb = G(params, "b_vocab");
                for (size_t k = 0; k < dlogits.size(); ++k) gb.data[k] += dlogits[k];
                mul_t_acc(dq_h, W(params, "W_vocab"), dlogits);
            }
            if (A.used_ci) {
                double pm = 0.0;
                for (size_t k = 0; k < A.ci_probs.size(); ++k)
                    if (A.ci_match[k]) pm += A.ci_probs[k];
                dgate[kPredCopyInput] += inv_p * pm;
                double w = inv_p * A.gate.probs[kPredCopyInput];
                for (size_t k = 0; k < A.ci_probs.size(); ++k) {
                    double ds = w * A.ci_probs[k] * ((A.ci_match[k] ? 1.0 : 0.0) - pm);
                    if (ds == 0.0) continue;
                    // backward through the affinity mlp
                    const Matrix& va = W(params, "V_att_in");
                    Vec dpre(cfg.att());
                    for (size_t r = 0; r < cfg.att(); ++r) {
                        double t = A.ci_tanh[k][r];
                        G(params, "V_att_in").data[r] += ds * t;
                        dpre[r] = ds * va.data[r] * (1.0 - t * t);
                    }
                    Vec cat = concat(enc.u[k], A.qstate);
                    outer_acc(G(params, "W_att_in"), dpre, cat);
                    Matrix& gb = G(params, "b_att_in");
                    for (size_t r = 0; r < cfg.att(); ++r) gb.data[r] += dpre[r];
                    Vec dcat(cat.size(), 0.0);
                    mul_t_acc(dcat, W(params, "W_att_in"), dpre);
                    for (size_t r = 0; r < H; ++r) {
                        eg.du[k][r] += dcat[r];
                        dq_h[r] += dcat[H + r];
                    }
                }
            }
            if (A.used_co) {
                double pm = 0.0;
                for (size_t j2 = 0; j2 < A.co_probs.size(); ++j2)
                    if (A.co_match[j2]) pm += A.co_probs[j2];
                dgate[kPredCopyOutput] += inv_p * pm;
                double w = inv_p * A.gate.probs[kPredCopyOutput];
                for (size_t j2 = 0; j2 < A.co_probs.size(); ++j2) {
                    double ds = w * A.co_probs[j2] * ((A.co_match[j2] ? 1.0 : 0.0) - pm);
                    if (ds == 0.0) continue;
                    const Matrix& va = W(params, "V_att_out");
                    Vec dpre(cfg.att());
                    for (size_t r = 0; r < cfg.att(); ++r) {
                        double t = A.co_tanh[j2][r];
                        G(params, "V_att_out").data[r] += ds * t;
                        dpre[r] = ds * va.data[r] * (1.0 - t * t);
                    }
                    Vec cat = concat(fwd.instrs[j2].h, A.qstate);
                    outer_acc(G(params, "W_att_out"), dpre, cat);
                    Matrix& gb = G(params, "b_att_out");
                    for (size_t r = 0; r < cfg.att(); ++r) gb.data[r] += dpre[r];
                    Vec dcat(cat.size(), 0.0);
                    mul_t_acc(dcat, W(params, "W_att_out"), dpre);
                    // attention outside the window is treated as constant
                    if (j2 >= a) {
                        if (dh_extra[j2].empty()) dh_extra[j2].assign(H, 0.0);
                        for (size_t r = 0; r < H; ++r) dh_extra[j2][r] += dcat[r];
                    }
                    for (size_t r = 0; r < H; ++r) dq_h[r] += dcat[H + r];
                }
            }

            // gate backward (masked softmax)
            {
                Vec dlogits(3, 0.0);
                for (size_t c = 0; c < 3; ++c) {
                    if (!A.gate.avail[c]) continue;
                    for (size_t c2 = 0; c2 < 3; ++c2) {
                        if (!A.gate.avail[c2]) continue;
                        double jac = A.gate.probs[c2] * ((c == c2 ? 1.0 : 0.0) - A.gate.probs[c]);
                        dlogits[c] += dgate[c2] * jac;
                    }
                }
                outer_acc(G(params, "W_gate"), dlogits, A.qstate);
                Matrix& gb = G(params, "b_gate");
                for (size_t k = 0; k < 3; ++k) gb.data[k] += dlogits[k];
                mul_t_acc(dq_h, W(params, "W_gate"), dlogits);
            }
        }

        // q init step backward (dest embedding feed from (r_state, 0))
        {
            Vec ddest(C.q_init.in.size(), 0.0);
            Vec dh_prev(H, 0.0), dc_prev(H, 0.0);
            lstm_backward(W(params, "W_q_x"), W(params, "W_q_h"), G(params, "W_q_x"),
                          G(params, "W_q_h"), G(params, "b_q"), C.q_init, dq_h, dq_c, ddest,
                          dh_prev, dc_prev);
            Matrix& gdest = G(params, "DestEmb");
            for (size_t k = 0; k < ddest.size(); ++k) gdest.at(C.dest_row, k) += ddest[k];
            for (size_t k = 0; k < H; ++k) dr_state[k] += dh_prev[k];
            // cell was zero-initialized; gradient on it ends here
        }

        // dest head
        {
            double ds = scale * ((C.dest == Dest::Output) ? (1.0 - C.p_out) : -C.p_out);
            const Matrix& wd = W(params, "W_dest");
            Matrix& gwd = G(params, "W_dest");
            for (size_t k = 0; k < H; ++k) {
                gwd.data[k] += ds * C.r_state[k];
                dr_state[k] += ds * wd.data[k];
            }
            G(params, "b_dest").data[0] += ds;
        }

        // r state backward
        {
            Vec dpre(H);
            for (size_t k = 0; k < H; ++k)
                dpre[k] = dr_state[k] * (1.0 - C.r_state[k] * C.r_state[k]);
            outer_acc(G(params, "W_r"), dpre, C.r_concat);
            Matrix& gb = G(params, "b_r");
            for (size_t k = 0; k < H; ++k) gb.data[k] += dpre[k];
            Vec dcat(C.r_concat.size(), 0.0);
            mul_t_acc(dcat, W(params, "W_r"), dpre);
            for (size_t k = 0; k < H; ++k) dh_top[k] += dcat[k];
            Matrix& gop = G(params, "OpEmb");
            for (size_t k = 0; k < E; ++k) gop.at(C.op_id, k) += dcat[H + k];
        }

        // op head
        {
            Vec dlogits(C.op_probs.size());
            for (size_t k = 0; k < C.op_probs.size(); ++k) dlogits[k] = -scale * C.op_probs[k];
            dlogits[C.op_id] += scale;
            outer_acc(G(params, "W_op"), dlogits, C.h);
            Matrix& gb = G(params, "b_op");
            for (size_t k = 0; k < dlogits.size(); ++k) gb.data[k] += dlogits[k];
            mul_t_acc(dh_top, W(params, "W_op"), dlogits);
        }

        // decoder stack backward
        {
            Vec din_above;  // gradient on layer l-1's hidden from layer l's input
            for (size_t l = L; l-- > 0;) {
                // dh_top already contains the recurrent flow for the top layer
                Vec dh = (l == L - 1) ? dh_top : dh_next[l];
                if (l < L - 1)
                    for (size_t k = 0; k < H; ++k) dh[k] += din_above[k];
                Vec din(C.dec_steps[l].in.size(), 0.0);
                Vec dh_prev(H, 0.0), dc_prev(H, 0.0);
                lstm_backward(W(params, layer_name("W_dec_x", l)),
                              W(params, layer_name("W_dec_h", l)),
                              G(params, layer_name("W_dec_x", l)),
                              G(params, layer_name("W_dec_h", l)),
                              G(params, layer_name("b_dec", l)), C.dec_steps[l], dh, dc_next[l],
                              din, dh_prev, dc_prev);
                dh_next[l] = std::move(dh_prev);
                dc_next[l] = std::move(dc_prev);
                if (l == 0) {
                    outer_acc(G(params, "W_in"), din, C.in_concat);
                    Matrix& gb = G(params, "b_in");
                    for (size_t k = 0; k < din.size(); ++k) gb.data[k] += din[k];
                    Vec dcat(C.in_concat.size(), 0.0);
                    mul_t_acc(dcat, W(params, "W_in"), din);
                    size_t vf = C.in_concat.size() - H;
                    if (ii == 0) {
                        Matrix& gsf = G(params, "StartFeat");
                        for (size_t k = 0; k < vf; ++k) gsf.data[k] += dcat[k];
                    } else {
                        // embedding of the previous instruction's value: a
                        // parameter gradient, applied regardless of windows
                        Matrix& gemb = G(params, "Emb");
                        size_t row = static_cast<size_t>(fwd.instrs[ii - 1].v_row);
                        for (size_t k = 0; k < E; ++k) gemb.at(row, k) += dcat[k];
                    }
                    for (size_t k = 0; k < H; ++k) dqfinal_next[k] += dcat[vf + k];
                } else {
                    din_above = std::move(din);
                }
            }
        }
    }

    // boundary: recurrent state entering the window
    if (a == 0) {
        for (size_t l = 0; l < L; ++l) {
            for (size_t k = 0; k < H; ++k) {
                eg.dh_final[l][k] += dh_next[l][k];
                eg.dc_final[l][k] += dc_next[l][k];
            }
        }
        // the gradient on the previous value features at instruction 0 went to
        // StartFeat above; dqfinal before instruction 0 is on a zero constant
    }
    // dvfeat_next/dqfinal_next at a > 0 fall outside the window: truncated
}

static void encoder_backward(ParamRegistry& params, const ModelConfig& cfg,
                             const EncoderState& enc, EncGrads& eg) {
    const size_t H = cfg.hidden_size;
    const size_t L = cfg.lstm_layers;
    const size_t E = cfg.embed_size;
    const size_t n = enc.u.size();

    std::vector<Vec> dh_next(L), dc_next(L);
    for (size_t l = 0; l < L; ++l) {
        dh_next[l] = eg.dh_final[l];
        dc_next[l] = eg.dc_final[l];
    }
    for (size_t t = n; t-- > 0;) {
        Vec din_above;
        for (size_t l = L; l-- > 0;) {
            Vec dh = dh_next[l];
            if (l == L - 1) {
                for (size_t k = 0; k < H; ++k) dh[k] += eg.du[t][k];
            }
            if (l < L - 1 && !din_above.empty())
                for (size_t k = 0; k < H; ++k) dh[k] += din_above[k];
            Vec din(enc.caches[l][t].in.size(), 0.0);
            Vec dh_prev(H, 0.0), dc_prev(H, 0.0);
            lstm_backward(W(params, layer_name("W_enc_x", l)), W(params, layer_name("W_enc_h", l)),
                          G(params, layer_name("W_enc_x", l)), G(params, layer_name("W_enc_h", l)),
                          G(params, layer_name("b_enc", l)), enc.caches[l][t], dh, dc_next[l], din,
                          dh_prev, dc_prev);
            dh_next[l] = std::move(dh_prev);
            dc_next[l] = std::move(dc_prev);
            if (l == 0) {
                Matrix& gemb = G(params, "Emb");
                for (size_t k = 0; k < E; ++k)
                    gemb.at(static_cast<size_t>(enc.token_ids[t]), k) += din[k];
            } else {
                din_above = std::move(din);
            }
        }
    }
}

double Model::example_loss_and_grads(const TrainExample& ex, std::optional<size_t> K,
                                     size_t* slice_passes) {
    assert(ex.x && ex.options && !ex.programs.empty());
    EncoderState enc = encode(*ex.x);

    std::vector<ProgramForward> fwds(ex.programs.size());
    Vec lps;
    for (size_t zi = 0; zi < ex.programs.size(); ++zi) {
        bool ok = forward_program(*this, params_, cfg_, vocab_, enc, *ex.x, *ex.options,
                                  *ex.programs[zi], fwds[zi]);
        if (!ok) throw std::runtime_error("training program does not execute");
        lps.push_back(fwds[zi].total);
    }
    double lse = log_sum_exp(lps);
    double loss = -lse;

    EncGrads eg;
    eg.du.assign(enc.u.size(), Vec(cfg_.hidden_size, 0.0));
    eg.dh_final.assign(cfg_.lstm_layers, Vec(cfg_.hidden_size, 0.0));
    eg.dc_final.assign(cfg_.lstm_layers, Vec(cfg_.hidden_size, 0.0));

    size_t passes = 0;
    for (size_t zi = 0; zi < ex.programs.size(); ++zi) {
        double w = std::exp(lps[zi] - lse);
        double scale = -w;  // dL/dlogp(z)
        size_t n = fwds[zi].instrs.size();
        if (!K) {
            backward_window(*this, params_, cfg_, vocab_, enc, fwds[zi], 0, n, scale, eg);
            ++passes;
        } else {
            size_t k = std::max<size_t>(1, *K);
            for (size_t start = 0; start < n; start += k) {
                size_t end = std::min(n, start + k);
                backward_window(*this, params_, cfg_, vocab_, enc, fwds[zi], start, end, scale, eg);
                ++passes;
            }
            if (n == 0) ++passes;
        }
    }
    encoder_backward(params_, cfg_, enc, eg);
    if (slice_passes) *slice_passes = passes;
    return loss;
}

double Model::example_loss(const TrainExample& ex) const {
    assert(ex.x && ex.options && !ex.programs.empty());
    EncoderState enc = encode(*ex.x);
    Vec lps;
    for (const Program* z : ex.programs) {
        ProgramForward fwd;
        bool ok = forward_program(*this, params_, cfg_, vocab_, enc, *ex.x, *ex.options, *z, fwd);
        if (!ok) throw std::runtime_error("training program does not execute");
        lps.push_back(fwd.total);
    }
    return -log_sum_exp(lps);
}

TrainStepStats Model::staged_train_step(const std::vector<TrainExample>& batch, size_t K,
                                        double lr) {
    TrainStepStats stats;
    params_.zero_grads();
    for (const auto& ex : batch) {
        if (ex.programs.empty()) {
            ++stats.skipped;
            continue;
        }
        size_t passes = 0;
        stats.loss += example_loss_and_grads(ex, K, &passes);
        stats.slice_passes += passes;
    }
    params_.clip_grads(cfg_.clip_norm);
    stats.grad_norm = params_.grad_norm();
    params_.sgd_step(lr);
    return stats;
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

double gradient_check(Model& model, const TrainExample& ex, double epsilon,
                      std::string* worst_tensor) {
    model.params().zero_grads();
    model.example_loss_and_grads(ex, std::nullopt);

    // copy analytic grads
    std::map<std::string, Matrix> analytic;
    for (const Tensor* t : const_cast<const Model&>(model).params().all())
        analytic[t->name] = t->grad;

    double worst = 0.0;
    for (Tensor* t : model.params().all()) {
        for (size_t i = 0; i < t->value.data.size(); ++i) {
            double saved = t->value.data[i];
            t->value.data[i] = saved + epsilon;
            double lp = model.example_loss(ex);
            t->value.data[i] = saved - epsilon;
            double lm = model.example_loss(ex);
            t->value.data[i] = saved;
            double fd = (lp - lm) / (2.0 * epsilon);
            double g = analytic[t->name].data[i];
            double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-4});
            if (rel > worst) {
                worst = rel;
                if (worst_tensor) *worst_tensor = t->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    os.write(b, 4);
}
void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}
void put_f64(std::ostream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}
void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
uint64_t get_u64(std::istream& is) {
    uint64_t lo = get_u32(is);
    uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}
double get_f64(std::istream& is) {
    uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}
std::string get_str(std::istream& is) {
    uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

constexpr char kMagic[8] = {'M', 'W', 'P', 'M', '0', '0', '0', '1'};

}  // namespace

void Model::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write(kMagic, 8);
    put_u32(os, static_cast<uint32_t>(cfg_.hidden_size));
    put_u32(os, static_cast<uint32_t>(cfg_.embed_size));
    put_u32(os, static_cast<uint32_t>(cfg_.att_size));
    put_u32(os, static_cast<uint32_t>(cfg_.vocab_size));
    put_u32(os, static_cast<uint32_t>(cfg_.lstm_layers));
    put_u32(os, static_cast<uint32_t>(cfg_.slice_k));
    put_u32(os, static_cast<uint32_t>(cfg_.samples_per_example));
    put_u64(os, cfg_.seed);
    put_f64(os, cfg_.learning_rate);
    put_f64(os, cfg_.lr_decay);
    put_f64(os, cfg_.clip_norm);
    put_u32(os, static_cast<uint32_t>(vocab_.size()));
    for (const auto& w : vocab_.words()) put_str(os, w);
    auto tensors = params_.all();
    put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const Tensor* t : tensors) {
        put_str(os, t->name);
        put_u32(os, static_cast<uint32_t>(t->value.rows));
        put_u32(os, static_cast<uint32_t>(t->value.cols));
        for (double v : t->value.data) put_f64(os, v);
    }
    if (!os) throw std::runtime_error("short write: " + path);
}

Model Model::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("corrupt checkpoint (bad magic): " + path);
    ModelConfig cfg;
    cfg.hidden_size = get_u32(is);
    cfg.embed_size = get_u32(is);
    cfg.att_size = get_u32(is);
    cfg.vocab_size = get_u32(is);
    cfg.lstm_layers = get_u32(is);
    cfg.slice_k = get_u32(is);
    cfg.samples_per_example = get_u32(is);
    cfg.seed = get_u64(is);
    cfg.learning_rate = get_f64(is);
    cfg.lr_decay = get_f64(is);
    cfg.clip_norm = get_f64(is);
    uint32_t n_words = get_u32(is);
    std::vector<std::string> words;
    words.reserve(n_words);
    for (uint32_t i = 0; i < n_words; ++i) words.push_back(get_str(is));
    // from_words re-adds specials first; stored order already starts with them
    std::vector<std::string> tail(words.begin(), words.end());
    Model model(cfg, Vocabulary::from_words(tail));
    if (model.vocab_.size() != n_words)
        throw std::runtime_error("corrupt checkpoint (vocab): " + path);
    uint32_t n_tensors = get_u32(is);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_str(is);
        uint32_t rows = get_u32(is);
        uint32_t cols = get_u32(is);
        Tensor* t = model.params_.find(name);
        if (!t || t->value.rows != rows || t->value.cols != cols)
            throw std::runtime_error("corrupt checkpoint (tensor " + name + "): " + path);
        for (double& v : t->value.data) v = get_f64(is);
    }
    if (!is) throw std::runtime_error("corrupt checkpoint (truncated): " + path);
    return model;
}

}  // namespace mwp
