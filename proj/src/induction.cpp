#include "mwp/induction.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <unistd.h>

namespace mwp {

namespace {

const std::vector<OperationId> kArithOps = {
    OperationId::Add,       OperationId::Subtract, OperationId::Multiply, OperationId::Divide,
    OperationId::Power,     OperationId::Log,      OperationId::Sqrt,     OperationId::Sine,
    OperationId::Cosine,    OperationId::Tangent,  OperationId::Factorial, OperationId::Choose,
    OperationId::Radians,   OperationId::Degrees};

constexpr double kMatchTol = 1e-4;  // computed value vs target number token

// One conversion per surface form: fractions, thousands-grouped, plain.
OperationId str_conv_for(const std::string& s) {
    if (s.find('/') != std::string::npos) return OperationId::FractionToFloat;
    if (s.find(',') != std::string::npos) return OperationId::ThousandsToFloat;
    return OperationId::StrToFloat;
}

OperationId emit_conv_for(const std::string& target_surface) {
    if (target_surface.find('/') != std::string::npos) return OperationId::FloatToFraction;
    if (target_surface.find(',') != std::string::npos) return OperationId::FloatToThousands;
    return OperationId::FloatToStr;
}

std::string num_repr(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string value_repr(const Value& v) {
    return v.is_num() ? "n:" + num_repr(v.num_value()) : "s:" + v.str_value();
}

// ---------------------------------------------------------------------------
// canonical operand pool
// ---------------------------------------------------------------------------

struct NumOperand {
    double value = 0.0;
    bool needs_conv = false;  // true when the source is a string
    std::string surface;      // conversion input; empty for direct floats
};

std::string operand_key(const NumOperand& o) {
    return num_repr(o.value) + "|" + (o.needs_conv ? "c" : "d") + "|" + o.surface;
}

struct Pool {
    std::vector<NumOperand> nums;
    std::vector<std::string> strs;
    std::unordered_map<std::string, ArgSource> num_prov;  // operand key -> earliest source
    std::unordered_map<std::string, ArgSource> str_prov;  // surface -> earliest source
    std::string fingerprint;
};

Pool build_pool(const ExecutionState& state) {
    Pool pool;
    auto add_str = [&](const std::string& s, const ArgSource& src) {
        if (pool.str_prov.emplace(s, src).second) pool.strs.push_back(s);
    };
    auto add_num = [&](const NumOperand& o, const ArgSource& src) {
        if (pool.num_prov.emplace(operand_key(o), src).second) pool.nums.push_back(o);
    };
    auto add_convertible = [&](const std::string& s, const ArgSource& src) {
        auto v = apply_operation(str_conv_for(s), {Value::str(s)}, *state.options);
        if (v) add_num(NumOperand{v->num_value(), true, s}, src);
    };
    // input copies come before output copies so the earliest provenance wins
    if (state.x) {
        for (size_t k = 0; k < state.x->tokens.size(); ++k) {
            const auto& s = state.x->tokens[k].surface;
            add_str(s, CopyInput{k});
            add_convertible(s, CopyInput{k});
        }
    }
    for (size_t j = 0; j < state.values.size(); ++j) {
        const Value& v = state.values[j];
        if (v.is_num()) {
            add_num(NumOperand{v.num_value(), false, ""}, CopyOutput{j});
        } else {
            add_str(v.str_value(), CopyOutput{j});
            add_convertible(v.str_value(), CopyOutput{j});
        }
    }
    std::sort(pool.nums.begin(), pool.nums.end(), [](const NumOperand& a, const NumOperand& b) {
        if (a.value != b.value) return a.value < b.value;
        if (a.needs_conv != b.needs_conv) return !a.needs_conv;
        return a.surface < b.surface;
    });
    std::sort(pool.strs.begin(), pool.strs.end());
    std::string fp;
    for (const auto& n : pool.nums) fp += operand_key(n) + ";";
    fp += "#";
    for (const auto& s : pool.strs) fp += std::to_string(s.size()) + ":" + s;
    pool.fingerprint = std::move(fp);
    return pool;
}

// ---------------------------------------------------------------------------
// chain enumeration in value space
// ---------------------------------------------------------------------------

struct VArg {
    enum Kind : uint8_t { TargetWord, RawOperand, RawString, Local } kind;
    size_t index = 0;
};

struct VInstr {
    OperationId op;
    std::vector<VArg> args;
    Dest dest;
    Value value;
};

struct VChain {
    std::vector<VInstr> instrs;
    size_t n_hidden = 0;
    std::string key;
    std::vector<size_t> req_nums;  // operand indices the chain references
    std::vector<size_t> req_strs;
};

struct EnumResult {
    std::vector<VChain> chains;
    bool budget_hit = false;
    bool capped = false;
};

class ChainEnumerator {
  public:
    ChainEnumerator(const Pool& pool, const Token& target, const InductionConfig& cfg,
                    const OptionSet& options, bool require_check)
        : pool_(pool), target_(target), cfg_(cfg), options_(options),
          require_check_(require_check) {
        size_t d = cfg.depth == 0 ? 1 : cfg.depth;
        max_arith_ = d - 1;
    }

    EnumResult run() {
        direct_stage();
        // iterative deepening: finish every shallower level before spending
        // budget on deeper chains
        for (size_t level = 1; level <= max_arith_ && !result_.budget_hit; ++level) {
            Partial base;
            arith_stage(base, level);
        }
        std::stable_sort(result_.chains.begin(), result_.chains.end(),
                         [](const VChain& a, const VChain& b) {
                             if (a.n_hidden != b.n_hidden) return a.n_hidden < b.n_hidden;
                             return a.key < b.key;
                         });
        if (result_.chains.size() > cfg_.candidate_cap) {
            result_.chains.resize(cfg_.candidate_cap);
            result_.capped = true;
        }
        return std::move(result_);
    }

  private:
    struct Partial {
        std::vector<VInstr> instrs;
        std::vector<size_t> arith_locals;  // instr indices holding arithmetic results
        std::vector<bool> consumed;        // parallel to arith_locals
        std::unordered_map<size_t, size_t> conv_local;  // operand index -> instr index
        size_t n_arith = 0;
    };

    bool spend(size_t n = 1) {
        if (result_.budget_hit) return false;
        nodes_ += n;
        if (nodes_ > cfg_.node_budget) {
            result_.budget_hit = true;
            return false;
        }
        return true;
    }

    bool in_vocab(const std::string& s) const { return !cfg_.vocab || cfg_.vocab->count(s) > 0; }

    void add_chain(std::vector<VInstr> instrs, size_t n_arith) {
        std::string key;
        for (const auto& in : instrs) {
            key += op_name(in.op);
            key += in.dest == Dest::Memory ? "/m(" : "/o(";
            for (size_t a = 0; a < in.args.size(); ++a) {
                if (a) key += ",";
                key += arg_repr(in.args[a], instrs);
            }
            key += ")";
        }
        if (!keys_.insert(key).second) return;
        VChain vc{std::move(instrs), n_arith, std::move(key), {}, {}};
        for (const auto& in : vc.instrs) {
            for (const auto& a : in.args) {
                if (a.kind == VArg::RawOperand) vc.req_nums.push_back(a.index);
                if (a.kind == VArg::RawString) vc.req_strs.push_back(a.index);
            }
        }
        result_.chains.push_back(std::move(vc));
    }

    std::string arg_repr(const VArg& a, const std::vector<VInstr>& instrs) const {
        switch (a.kind) {
            case VArg::TargetWord:
                return "s:" + target_.surface;
            case VArg::RawOperand: {
                const auto& o = pool_.nums[a.index];
                return o.needs_conv ? "s:" + o.surface : "n:" + num_repr(o.value);
            }
            case VArg::RawString:
                return "s:" + pool_.strs[a.index];
            case VArg::Local:
                return value_repr(instrs[a.index].value);
        }
        return "";
    }

    // Reference an operand inside a chain, materializing its conversion
    // instruction on first use.
    VArg operand_ref(Partial& p, size_t idx) {
        const auto& o = pool_.nums[idx];
        if (!o.needs_conv) return VArg{VArg::RawOperand, idx};
        auto it = p.conv_local.find(idx);
        if (it != p.conv_local.end()) return VArg{VArg::Local, it->second};
        p.instrs.push_back(VInstr{str_conv_for(o.surface),
                                  {VArg{VArg::RawOperand, idx}},
                                  Dest::Memory,
                                  Value::num(o.value)});
        size_t pos = p.instrs.size() - 1;
        p.conv_local.emplace(idx, pos);
        return VArg{VArg::Local, pos};
    }

    // Emissions of a float value: the conversion matching the target's
    // surface form, a Check over the value's plain string form, and the
    // vocabulary fallback after arithmetic. When operand_idx is set the value
    // is a pool operand; otherwise it is the newest arithmetic local of `base`.
    void float_emissions(const Partial& base, const std::optional<size_t>& operand_idx, double v) {
        bool conversion_matched = false;
        if (!require_check_) {
            OperationId conv = emit_conv_for(target_.surface);
            if (!spend()) return;
            auto s = apply_operation(conv, {Value::num(v)}, options_);
            if (s && s->str_value() == target_.surface) {
                conversion_matched = true;
                Partial p = base;
                VArg ref = operand_idx ? operand_ref(p, *operand_idx)
                                       : VArg{VArg::Local, p.arith_locals.back()};
                p.instrs.push_back(VInstr{conv, {ref}, Dest::Output, *s});
                add_chain(std::move(p.instrs), p.n_arith);
            }
        }
        {
            if (!spend()) return;
            auto s = apply_operation(OperationId::FloatToStr, {Value::num(v)}, options_);
            if (s) {
                if (!spend()) return;
                auto checked = apply_operation(OperationId::Check, {*s}, options_);
                if (checked && checked->str_value() == target_.surface) {
                    Partial p = base;
                    VArg ref = operand_idx ? operand_ref(p, *operand_idx)
                                           : VArg{VArg::Local, p.arith_locals.back()};
                    p.instrs.push_back(VInstr{OperationId::FloatToStr, {ref}, Dest::Memory, *s});
                    p.instrs.push_back(VInstr{OperationId::Check,
                                              {VArg{VArg::Local, p.instrs.size() - 1}},
                                              Dest::Output,
                                              *checked});
                    add_chain(std::move(p.instrs), p.n_arith);
                }
            }
        }
        // rounded rationale values: emit the target's own surface after
        // arithmetic when the conversion does not reproduce it exactly
        if (!require_check_ && !conversion_matched && base.n_arith > 0 &&
            target_.kind == TokenKind::Number && target_.numeric_value &&
            rel_close(v, *target_.numeric_value, kMatchTol) && in_vocab(target_.surface)) {
            Partial p = base;
            p.instrs.push_back(VInstr{OperationId::Id,
                                      {VArg{VArg::TargetWord, 0}},
                                      Dest::Output,
                                      Value::str(target_.surface)});
            add_chain(std::move(p.instrs), p.n_arith);
        }
    }

    void direct_stage() {
        if (!require_check_) {
            // copy emissions first: dedup keeps the earliest provenance
            for (size_t i = 0; i < pool_.strs.size(); ++i) {
                if (pool_.strs[i] != target_.surface) continue;
                std::vector<VInstr> instrs;
                instrs.push_back(VInstr{OperationId::Id,
                                        {VArg{VArg::RawString, i}},
                                        Dest::Output,
                                        Value::str(pool_.strs[i])});
                add_chain(std::move(instrs), 0);
            }
            if (in_vocab(target_.surface)) {
                std::vector<VInstr> instrs;
                instrs.push_back(VInstr{OperationId::Id,
                                        {VArg{VArg::TargetWord, 0}},
                                        Dest::Output,
                                        Value::str(target_.surface)});
                add_chain(std::move(instrs), 0);
            }
        }
        // Check over string sources and over the target word itself
        for (size_t i = 0; i < pool_.strs.size(); ++i) {
            if (!spend()) return;
            auto r = apply_operation(OperationId::Check, {Value::str(pool_.strs[i])}, options_);
            if (r && r->str_value() == target_.surface) {
                std::vector<VInstr> instrs;
                instrs.push_back(
                    VInstr{OperationId::Check, {VArg{VArg::RawString, i}}, Dest::Output, *r});
                add_chain(std::move(instrs), 0);
            }
        }
        if (in_vocab(target_.surface)) {
            if (!spend()) return;
            auto r = apply_operation(OperationId::Check, {Value::str(target_.surface)}, options_);
            if (r && r->str_value() == target_.surface) {
                std::vector<VInstr> instrs;
                instrs.push_back(
                    VInstr{OperationId::Check, {VArg{VArg::TargetWord, 0}}, Dest::Output, *r});
                add_chain(std::move(instrs), 0);
            }
        }
        // conversion-only emissions of pool floats
        for (size_t i = 0; i < pool_.nums.size(); ++i) {
            Partial p;
            float_emissions(p, i, pool_.nums[i].value);
            if (result_.budget_hit) return;
        }
    }

    std::vector<VArg> float_refs(const Partial& p) const {
        std::vector<VArg> refs;
        for (size_t i = 0; i < pool_.nums.size(); ++i) refs.push_back(VArg{VArg::RawOperand, i});
        for (size_t li : p.arith_locals) refs.push_back(VArg{VArg::Local, li});
        return refs;
    }

    double ref_value(const Partial& p, const VArg& a) const {
        if (a.kind == VArg::RawOperand) return pool_.nums[a.index].value;
        return p.instrs[a.index].value.num_value();
    }

    // Depth-first to exactly `level` arithmetic instructions. Emissions fire
    // from the newest value once every earlier one has been consumed.
    void arith_stage(Partial& p, size_t level) {
        if (result_.budget_hit) return;
        if (p.n_arith == level) {
            bool earlier_consumed = true;
            for (size_t i = 0; i + 1 < p.arith_locals.size(); ++i)
                if (!p.consumed[i]) earlier_consumed = false;
            if (earlier_consumed)
                float_emissions(p, std::nullopt, p.instrs[p.arith_locals.back()].value.num_value());
            return;
        }
        auto refs = float_refs(p);
        for (OperationId op : kArithOps) {
            size_t argc = arity(op);
            for (size_t ai = 0; ai < refs.size(); ++ai) {
                for (size_t bi = 0; bi < (argc == 2 ? refs.size() : size_t(1)); ++bi) {
                    if (!spend()) return;
                    std::vector<Value> argvals;
                    argvals.push_back(Value::num(ref_value(p, refs[ai])));
                    if (argc == 2) argvals.push_back(Value::num(ref_value(p, refs[bi])));
                    auto v = apply_operation(op, argvals, options_);
                    if (!v) continue;
                    Partial p2 = p;
                    std::vector<VArg> args;
                    args.push_back(materialize(p2, refs[ai]));
                    if (argc == 2) args.push_back(materialize(p2, refs[bi]));
                    for (const VArg& a : args) {
                        if (a.kind != VArg::Local) continue;
                        for (size_t i = 0; i < p2.arith_locals.size(); ++i)
                            if (p2.arith_locals[i] == a.index) p2.consumed[i] = true;
                    }
                    p2.instrs.push_back(VInstr{op, args, Dest::Memory, *v});
                    p2.arith_locals.push_back(p2.instrs.size() - 1);
                    p2.consumed.push_back(false);
                    p2.n_arith += 1;
                    arith_stage(p2, level);
                    if (result_.budget_hit) return;
                }
            }
        }
    }

    // Raw operands may need their conversion instruction; locals pass through.
    VArg materialize(Partial& p, const VArg& ref) {
        if (ref.kind == VArg::RawOperand) return operand_ref(p, ref.index);
        return ref;
    }

    const Pool& pool_;
    const Token& target_;
    const InductionConfig& cfg_;
    const OptionSet& options_;
    bool require_check_;
    size_t max_arith_ = 0;
    size_t nodes_ = 0;
    std::unordered_set<std::string> keys_;
    EnumResult result_;
};

// Whether every raw source the chain references exists in the hypothesis
// pool; chains are enumerated over a union pool shared by all hypotheses.
bool instantiable(const VChain& vc, const Pool& canon, const Pool& hyp) {
    for (size_t i : vc.req_nums)
        if (!hyp.num_prov.count(operand_key(canon.nums[i]))) return false;
    for (size_t i : vc.req_strs)
        if (!hyp.str_prov.count(canon.strs[i])) return false;
    return true;
}

// Instantiate a value-space chain: operand identity comes from the canonical
// pool, provenance from the hypothesis pool.
std::vector<Instruction> instantiate(const VChain& vc, const Pool& canon, const Pool& hyp,
                                     const Token& target, size_t base_len) {
    std::vector<Instruction> out;
    out.reserve(vc.instrs.size());
    for (const auto& vi : vc.instrs) {
        Instruction in;
        in.op = vi.op;
        in.dest = vi.dest;
        for (const auto& a : vi.args) {
            switch (a.kind) {
                case VArg::TargetWord:
                    in.args.push_back(Vocab{target.surface});
                    break;
                case VArg::RawOperand:
                    in.args.push_back(hyp.num_prov.at(operand_key(canon.nums[a.index])));
                    break;
                case VArg::RawString:
                    in.args.push_back(hyp.str_prov.at(canon.strs[a.index]));
                    break;
                case VArg::Local:
                    in.args.push_back(CopyOutput{base_len + a.index});
                    break;
            }
        }
        out.push_back(std::move(in));
    }
    return out;
}

// Merge hypothesis pools into one canonical pool (provenance maps carry a
// representative entry so the enumerator can probe conversions).
Pool union_pool(const std::vector<Pool>& pools) {
    if (pools.size() == 1) return pools[0];
    Pool u;
    for (const auto& p : pools) {
        for (const auto& n : p.nums) {
            auto key = operand_key(n);
            if (u.num_prov.emplace(key, p.num_prov.at(key)).second) u.nums.push_back(n);
        }
        for (const auto& s : p.strs) {
            if (u.str_prov.emplace(s, p.str_prov.at(s)).second) u.strs.push_back(s);
        }
    }
    std::sort(u.nums.begin(), u.nums.end(), [](const NumOperand& a, const NumOperand& b) {
        if (a.value != b.value) return a.value < b.value;
        if (a.needs_conv != b.needs_conv) return !a.needs_conv;
        return a.surface < b.surface;
    });
    std::sort(u.strs.begin(), u.strs.end());
    std::string fp;
    for (const auto& n : u.nums) fp += operand_key(n) + ";";
    fp += "#";
    for (const auto& s : u.strs) fp += std::to_string(s.size()) + ":" + s;
    u.fingerprint = std::move(fp);
    return u;
}

// Applies a chain to a copy of the state; the chain must emit exactly one
// output token equal to the target surface.
std::optional<ExecutionState> apply_chain(const ExecutionState& state,
                                          const std::vector<Instruction>& instrs,
                                          const std::string& target_surface) {
    ExecutionState next = state;
    size_t out_before = next.out.size();
    for (const auto& in : instrs) {
        if (!execute_instruction(in, next)) return std::nullopt;
    }
    if (next.out.size() != out_before + 1) return std::nullopt;
    if (next.out.back().surface() != target_surface) return std::nullopt;
    return next;
}

}  // namespace

CandidateSet candidate_instructions(const ExecutionState& state, const Token& target,
                                    const InductionConfig& cfg, bool require_check) {
    CandidateSet set;
    set.target = target;
    Pool pool = build_pool(state);
    ChainEnumerator en(pool, target, cfg, *state.options, require_check);
    EnumResult res = en.run();
    set.capped = res.capped;
    set.budget_hit = res.budget_hit;
    for (const auto& vc : res.chains) {
        auto instrs = instantiate(vc, pool, pool, target, state.values.size());
        if (!apply_chain(state, instrs, target.surface)) continue;  // verified on construction
        set.chains.push_back(CandidateChain{std::move(instrs), vc.n_hidden});
    }
    return set;
}

std::optional<std::string> chain_signature(const ExecutionState& base,
                                           const std::vector<Instruction>& chain) {
    ExecutionState state = base;
    std::string key;
    for (const auto& in : chain) {
        key += op_name(in.op);
        key += in.dest == Dest::Memory ? "/m(" : "/o(";
        for (size_t a = 0; a < in.args.size(); ++a) {
            if (a) key += ",";
            auto v = resolve(in.args[a], state);
            if (!v) return std::nullopt;
            key += value_repr(*v);
        }
        key += ")";
        if (!execute_instruction(in, state)) return std::nullopt;
    }
    return key;
}

InducedProgramSet induce_programs(const SourceSeq& x, const TargetSeq& y, const OptionSet& options,
                                  const InductionConfig& cfg, ChainScorer* scorer) {
    struct Hyp {
        Program prog;
        ExecutionState exec;
        double score = 0.0;
        std::shared_ptr<void> sstate;
    };

    InducedProgramSet result;
    // Enumeration results are value-space (operand indices into the sorted
    // canonical pool), so they are shareable across hypotheses with equal
    // fingerprints; provenance maps are per-hypothesis.
    std::unordered_map<std::string, std::shared_ptr<const EnumResult>> memo;

    std::vector<Hyp> beam;
    {
        Hyp h;
        h.exec.x = &x;
        h.exec.options = &options;
        if (scorer) h.sstate = scorer->start(x);
        beam.push_back(std::move(h));
    }

    const size_t n = y.tokens.size();
    for (size_t k = 0; k < n && !beam.empty(); ++k) {
        const Token& target = y.tokens[k];
        bool require_check = (k + 2 == n);  // the option letter before <EOS>

        // One enumeration per token over the union of hypothesis pools;
        // chains are value-space, so they instantiate against any hypothesis
        // holding the referenced sources.
        std::vector<Pool> pools;
        pools.reserve(beam.size());
        for (const auto& h : beam) pools.push_back(build_pool(h.exec));
        Pool canon = union_pool(pools);
        std::string mkey = canon.fingerprint + "##" + target.surface +
                           static_cast<char>('0' + static_cast<int>(target.kind)) +
                           (require_check ? "!c" : "");
        auto it = memo.find(mkey);
        if (it == memo.end()) {
            ChainEnumerator en(canon, target, cfg, options, require_check);
            it = memo.emplace(std::move(mkey), std::make_shared<const EnumResult>(en.run()))
                     .first;
        }
        const EnumResult& er = *it->second;
        result.candidate_capped = result.candidate_capped || er.capped;
        result.budget_hit = result.budget_hit || er.budget_hit;

        struct Ext {
            size_t hyp;
            size_t chain;
            double score = 0.0;
            std::shared_ptr<void> sstate;
            size_t rank = 0;  // candidate rank within the parent hypothesis
            size_t order = 0;
        };
        std::vector<Ext> exts;
        for (size_t hi = 0; hi < beam.size(); ++hi) {
            size_t rank = 0;
            for (size_t ci = 0; ci < er.chains.size(); ++ci) {
                if (!instantiable(er.chains[ci], canon, pools[hi])) continue;
                Ext e;
                e.hyp = hi;
                e.chain = ci;
                e.rank = rank++;
                e.order = exts.size();
                if (scorer) {
                    auto instrs = instantiate(er.chains[ci], canon, pools[hi], target,
                                              beam[hi].exec.values.size());
                    auto [lp, st] = scorer->extend(beam[hi].sstate, beam[hi].exec, instrs);
                    e.score = beam[hi].score + lp;
                    e.sstate = std::move(st);
                }
                exts.push_back(std::move(e));
            }
        }

        // Ties go round-robin across parents (each hypothesis keeps its best
        // extension before any gets a second) so the surviving set stays
        // diverse under the uniform scorer.
        std::stable_sort(exts.begin(), exts.end(), [&](const Ext& a, const Ext& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.rank != b.rank) return a.rank < b.rank;
            return a.order < b.order;
        });

        std::vector<Hyp> next;
        for (const auto& e : exts) {
            if (next.size() >= cfg.beam) break;
            auto instrs = instantiate(er.chains[e.chain], canon, pools[e.hyp], target,
                                      beam[e.hyp].exec.values.size());
            auto applied = apply_chain(beam[e.hyp].exec, instrs, target.surface);
            if (!applied) continue;
            Hyp h;
            h.prog = beam[e.hyp].prog;
            h.prog.instrs.insert(h.prog.instrs.end(), instrs.begin(), instrs.end());
            h.exec = std::move(*applied);
            h.score = e.score;
            h.sstate = e.sstate;
            next.push_back(std::move(h));
        }
        beam = std::move(next);
    }

    std::vector<std::string> want;
    want.reserve(y.tokens.size());
    for (const auto& t : y.tokens) want.push_back(t.surface);
    for (auto& h : beam) {
        auto res = execute_program(h.prog, x, options);
        if (!res.ok || res.out_tokens != want) continue;  // soundness re-check
        result.programs.push_back(InducedProgram{std::move(h.prog), h.score});
    }
    return result;
}

CoverageReport coverage_report(const std::vector<Problem>& problems, const InductionConfig& cfg,
                               size_t jobs, const std::string& cache_dir) {
    CoverageReport report;
    report.entries.resize(problems.size());
    if (jobs == 0) jobs = 1;
    std::atomic<size_t> cursor{0};

    auto worker = [&] {
        for (;;) {
            size_t i = cursor.fetch_add(1);
            if (i >= problems.size()) return;
            const Problem& p = problems[i];
            InducedProgramSet set;
            bool from_cache = false;
            std::string hash;
            if (!cache_dir.empty()) {
                hash = problem_hash(p);
                if (auto cached = load_cached_programs(cache_dir, hash)) {
                    set = std::move(*cached);
                    from_cache = true;
                }
            }
            if (!from_cache) {
                auto x = build_source(p);
                auto y = build_target(p);
                auto opts = make_options(p.options);
                set = induce_programs(x, y, opts, cfg);
                if (!cache_dir.empty()) store_cached_programs(cache_dir, hash, set);
            }
            CoverageEntry e;
            e.covered = !set.programs.empty();
            e.n_programs = set.programs.size();
            if (e.covered) e.first_program = print_program(set.programs.front().program);
            report.entries[i] = std::move(e);
        }
    };

    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(jobs);
        for (size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    for (const auto& e : report.entries)
        if (e.covered) ++report.n_covered;
    return report;
}

std::string problem_hash(const Problem& p) {
    uint64_t h = 1469598103934665603ULL;
    auto feed = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        h ^= 0x1f;
        h *= 1099511628211ULL;
    };
    feed(p.question);
    for (const auto& o : p.options) feed(o);
    feed(p.rationale);
    feed(std::string(1, p.correct));
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::optional<InducedProgramSet> load_cached_programs(const std::string& dir,
                                                      const std::string& hash) {
    std::ifstream in(dir + "/" + hash + ".progs");
    if (!in) return std::nullopt;
    InducedProgramSet set;
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    size_t count = 0;
    int capped = 0, budget = 0;
    if (std::sscanf(line.c_str(), "programs %zu capped %d budget %d", &count, &capped, &budget) !=
        3)
        return std::nullopt;
    set.candidate_capped = capped != 0;
    set.budget_hit = budget != 0;
    for (size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) return std::nullopt;
        double score = 0.0;
        if (std::sscanf(line.c_str(), "program %lf", &score) != 1) return std::nullopt;
        std::string body;
        while (std::getline(in, line) && !line.empty()) body += line + "\n";
        InducedProgram ip;
        ip.score = score;
        try {
            ip.program = parse_program(body);
        } catch (const std::exception&) {
            return std::nullopt;
        }
        set.programs.push_back(std::move(ip));
    }
    return set;
}

void store_cached_programs(const std::string& dir, const std::string& hash,
                           const InducedProgramSet& set) {
    std::filesystem::create_directories(dir);
    static std::atomic<uint64_t> counter{0};
    std::string tmp = dir + "/" + hash + ".tmp." + std::to_string(::getpid()) + "." +
                      std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp);
        out << "programs " << set.programs.size() << " capped " << (set.candidate_capped ? 1 : 0)
            << " budget " << (set.budget_hit ? 1 : 0) << "\n";
        char buf[40];
        for (const auto& ip : set.programs) {
            std::snprintf(buf, sizeof buf, "%.17g", ip.score);
            out << "program " << buf << "\n" << print_program(ip.program) << "\n";
        }
    }
    std::filesystem::rename(tmp, dir + "/" + hash + ".progs");
}

}  // namespace mwp
