#include "mwp/decode.hpp"

#include <algorithm>
#include <cassert>
#include <random>

namespace mwp {

namespace {

bool is_option_letter(const std::string& s) {
    return s.size() == 1 && s[0] >= 'A' && s[0] <= 'E';
}

struct Hyp {
    Program prog;
    ExecutionState exec;
    DecSnapshot snap;
    double score = 0.0;
    // 0: emitting the rationale; 1: <EOR> seen, need the letter; 2: letter
    // emitted, need <EOS>; 3: finished
    int phase = 0;
    char letter = '?';
};

size_t emitted_count(const Hyp& h) { return h.exec.out.size(); }

}  // namespace

DecodeResult beam_decode(const Model& model, const SourceSeq& x, const OptionSet& options,
                         const DecodeConfig& cfg) {
    EncoderState enc = model.encode(x);

    std::vector<Hyp> beam(1);
    beam[0].exec.x = &x;
    beam[0].exec.options = &options;
    beam[0].snap = model.start_decoder(enc);

    std::vector<Hyp> finished;
    size_t steps = 0;

    while (!beam.empty() && steps < cfg.max_len) {
        ++steps;
        // Candidate instructions are assembled from the model's top operations
        // and per-slot argument proposals; their composed score equals the
        // full instruction log-probability, so only selected extensions pay
        // for a state advance.
        struct Ext {
            size_t hyp;
            Instruction instr;
            double score;
            size_t order;
        };
        std::vector<Ext> exts;

        for (size_t hi = 0; hi < beam.size(); ++hi) {
            const Hyp& h = beam[hi];
            auto ops = model.top_ops(enc, h.snap, cfg.op_k);
            for (const auto& oc : ops) {
                size_t argc = arity(oc.op);
                for (Dest dest : {Dest::Output, Dest::Memory}) {
                    if (h.phase >= 1 && dest == Dest::Memory) continue;  // options only
                    double base = h.score + oc.logp +
                                  model.dest_logprob(enc, h.snap, oc.op, dest);
                    struct Partial {
                        std::vector<ArgSource> args;
                        double logp = 0.0;
                    };
                    std::vector<Partial> partials(1);
                    for (size_t slot = 0; slot < argc; ++slot) {
                        std::vector<Partial> next;
                        for (const auto& p : partials) {
                            auto props = model.propose_args(enc, h.snap, h.exec, oc.op, dest,
                                                            p.args, cfg.arg_k);
                            for (const auto& pr : props) {
                                Partial np = p;
                                np.args.push_back(pr.src);
                                np.logp += pr.logp;
                                next.push_back(std::move(np));
                            }
                            if (slot + 1 == argc && next.size() >= cfg.arg_k * 3) break;
                        }
                        partials = std::move(next);
                        if (partials.empty()) break;
                    }
                    for (const auto& p : partials) {
                        Instruction instr{oc.op, p.args, dest};
                        exts.push_back(Ext{hi, std::move(instr), base + p.logp, exts.size()});
                    }
                }
            }
        }

        std::stable_sort(exts.begin(), exts.end(), [&](const Ext& a, const Ext& b) {
            if (a.score != b.score) return a.score > b.score;
            size_t la = beam[a.hyp].prog.instrs.size();
            size_t lb = beam[b.hyp].prog.instrs.size();
            if (la != lb) return la < lb;
            return a.order < b.order;
        });

        std::vector<Hyp> next;
        for (auto& s : exts) {
            if (next.size() >= cfg.beam) break;
            const Hyp& parent = beam[s.hyp];
            // execution filter plus the authoritative score and snapshot
            auto sc = model.score_instructions(enc, parent.snap, parent.exec, {s.instr});
            if (sc.per_instr.size() != 1) continue;  // unexecutable, pruned
            Hyp h;
            h.prog = parent.prog;
            h.prog.instrs.push_back(s.instr);
            h.exec = parent.exec;
            std::string err;
            if (!execute_instruction(s.instr, h.exec, &err)) continue;
            h.snap = std::move(sc.next);
            h.score = parent.score + sc.logprob;
            h.phase = parent.phase;
            h.letter = parent.letter;

            if (h.exec.out.size() > parent.exec.out.size()) {
                const std::string emitted = h.exec.out.back().surface();
                switch (h.phase) {
                    case 0:
                        if (emitted == kEor) h.phase = 1;
                        break;
                    case 1:
                        if (!is_option_letter(emitted)) continue;  // constraint
                        h.letter = emitted[0];
                        h.phase = 2;
                        break;
                    case 2:
                        if (emitted != kEos) continue;
                        h.phase = 3;
                        break;
                    default:
                        continue;
                }
            }
            if (h.phase == 3)
                finished.push_back(std::move(h));
            else
                next.push_back(std::move(h));
        }
        beam = std::move(next);
        if (finished.size() >= cfg.beam) break;
    }

    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.prog.instrs.size() < b.prog.instrs.size();
    };

    DecodeResult res;
    const Hyp* best = nullptr;
    if (!finished.empty()) {
        for (const auto& h : finished)
            if (!best || better(h, *best)) best = &h;
        res.fallback = false;
    } else {
        for (const auto& h : beam)
            if (!best || better(h, *best)) best = &h;
        res.fallback = true;
    }

    if (best) {
        res.program = best->prog;
        res.score = best->score;
        std::string rat;
        for (const auto& v : best->exec.out) {
            std::string s = v.surface();
            if (s == kEor) break;
            if (!rat.empty()) rat += " ";
            rat += s;
        }
        res.rationale = rat;
        res.chosen = best->letter;
    }
    if (res.fallback || res.chosen == '?') {
        // deterministic per problem and seed
        uint64_t mix = cfg.seed * 1099511628211ULL;
        for (const auto& t : x.tokens)
            for (unsigned char c : t.surface) mix = (mix ^ c) * 1099511628211ULL;
        res.chosen = static_cast<char>('A' + mix % 5);
        res.fallback = true;
    }
    return res;
}

ForceDecodeResult force_decode(const Model& model, const SourceSeq& x, const TargetSeq& y,
                               const OptionSet& options, const InductionConfig& icfg,
                               size_t beam_size) {
    EncoderState enc = model.encode(x);

    // the model's own vocabulary bounds what the filter may emit from words
    auto model_vocab = model.vocab().surface_set();
    InductionConfig cfg = icfg;
    cfg.vocab = &model_vocab;

    struct FHyp {
        Program prog;
        ExecutionState exec;
        DecSnapshot snap;
        double score = 0.0;
        std::vector<double> per_token;
        std::vector<double> per_token_mass;
        size_t unk_tokens = 0;
    };

    std::vector<FHyp> beam(1);
    beam[0].exec.x = &x;
    beam[0].exec.options = &options;
    beam[0].snap = model.start_decoder(enc);

    const size_t n = y.tokens.size();
    for (size_t k = 0; k < n; ++k) {
        const Token& target = y.tokens[k];
        bool require_check = (k + 2 == n);

        struct Ext {
            size_t hyp;
            std::vector<Instruction> instrs;
            double chain_lp;
            double mass;  // token emission mass across the parent's chains
            double score;
            DecSnapshot snap;
            size_t order;
            bool unk;
        };
        std::vector<Ext> exts;

        for (size_t hi = 0; hi < beam.size(); ++hi) {
            FHyp& h = beam[hi];
            auto cands = candidate_instructions(h.exec, target, cfg, require_check);
            size_t added = 0;
            size_t first_ext = exts.size();
            Vec chain_lps;
            for (const auto& c : cands.chains) {
                auto sc = model.score_instructions(enc, h.snap, h.exec, c.instrs);
                if (sc.per_instr.size() != c.instrs.size()) continue;
                chain_lps.push_back(sc.logprob);
                exts.push_back(Ext{hi, c.instrs, sc.logprob, 0.0, h.score + sc.logprob,
                                   std::move(sc.next), exts.size(), false});
                ++added;
            }
            if (added > 0) {
                double mass = log_sum_exp(chain_lps);
                for (size_t e = first_ext; e < exts.size(); ++e) exts[e].mass = mass;
            }
            if (added == 0) {
                // no chain explains the token: score as an <UNK> emission and
                // advance with the observed token
                double unk_lp = model.unk_emission_logprob(enc, h.snap, h.exec);
                Instruction teach{OperationId::Id, {Vocab{target.surface}}, Dest::Output};
                auto adv = model.score_instructions(enc, h.snap, h.exec, {teach});
                assert(adv.per_instr.size() == 1);
                exts.push_back(Ext{hi, {teach}, unk_lp, unk_lp, h.score + unk_lp,
                                   std::move(adv.next), exts.size(), true});
            }
        }

        std::stable_sort(exts.begin(), exts.end(), [](const Ext& a, const Ext& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.order < b.order;
        });

        std::vector<FHyp> next;
        for (auto& e : exts) {
            if (next.size() >= beam_size) break;
            const FHyp& parent = beam[e.hyp];
            FHyp h;
            h.prog = parent.prog;
            h.exec = parent.exec;
            bool ok = true;
            for (const auto& in : e.instrs) {
                h.prog.instrs.push_back(in);
                if (!execute_instruction(in, h.exec)) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            h.snap = std::move(e.snap);
            h.score = e.score;
            h.per_token = parent.per_token;
            h.per_token.push_back(e.chain_lp);
            h.per_token_mass = parent.per_token_mass;
            h.per_token_mass.push_back(e.mass);
            h.unk_tokens = parent.unk_tokens + (e.unk ? 1 : 0);
            next.push_back(std::move(h));
        }
        beam = std::move(next);
        if (beam.empty()) break;
    }

    ForceDecodeResult res;
    if (beam.empty()) return res;
    const FHyp* best = &beam[0];
    for (const auto& h : beam)
        if (h.score > best->score) best = &h;
    res.program = best->prog;
    res.total_logprob = best->score;
    res.per_token = best->per_token;
    res.per_token_mass = best->per_token_mass;
    res.unk_tokens = best->unk_tokens;
    return res;
}

namespace {
struct ScorerState {
    std::shared_ptr<const EncoderState> enc;
    DecSnapshot snap;
};
}  // namespace

std::shared_ptr<void> ModelChainScorer::start(const SourceSeq& x) {
    auto st = std::make_shared<ScorerState>();
    st->enc = std::make_shared<const EncoderState>(model_.encode(x));
    st->snap = model_.start_decoder(*st->enc);
    return st;
}

std::pair<double, std::shared_ptr<void>> ModelChainScorer::extend(
    const std::shared_ptr<void>& state, const ExecutionState& exec,
    const std::vector<Instruction>& chain) {
    auto st = std::static_pointer_cast<ScorerState>(state);
    auto sc = model_.score_instructions(*st->enc, st->snap, exec, chain);
    if (sc.per_instr.size() != chain.size())
        return {-1e30, state};  // unexecutable chains never win
    auto next = std::make_shared<ScorerState>();
    next->enc = st->enc;
    next->snap = std::move(sc.next);
    return {sc.logprob, next};
}

}  // namespace mwp
