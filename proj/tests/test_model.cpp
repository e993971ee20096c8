#include <fstream>
#include <map>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "mwp/induction.hpp"
#include "mwp/model.hpp"

using namespace mwp;

namespace {

Problem toy_problem() {
    Problem p;
    p.question = "A box holds 5 red pens and 7 blue pens. How many pens are in the box?";
    p.options = {"A) 12", "B) 13", "C) 35", "D) 2", "E) 57"};
    p.rationale = "5 + 7 = 12 . Answer is A";
    p.correct = 'A';
    return p;
}

struct ToySetup {
    Problem problem;
    SourceSeq x;
    TargetSeq y;
    OptionSet options;
    InducedProgramSet induced;
    std::vector<Program> programs;
};

ToySetup make_toy(size_t n_programs = 3) {
    ToySetup t;
    t.problem = toy_problem();
    t.x = build_source(t.problem);
    t.y = build_target(t.problem);
    t.options = make_options(t.problem.options);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.beam = 16;
    cfg.candidate_cap = 30;
    cfg.node_budget = 100000;
    t.induced = induce_programs(t.x, t.y, t.options, cfg);
    REQUIRE(!t.induced.programs.empty());
    for (size_t i = 0; i < t.induced.programs.size() && i < n_programs; ++i)
        t.programs.push_back(t.induced.programs[i].program);
    return t;
}

ModelConfig toy_config(uint64_t seed, size_t layers = 1) {
    ModelConfig cfg;
    cfg.hidden_size = 8;
    cfg.embed_size = 6;
    cfg.att_size = 5;
    cfg.vocab_size = 200;
    cfg.lstm_layers = layers;
    cfg.seed = seed;
    return cfg;
}

Model toy_model(const ToySetup& t, uint64_t seed, size_t layers = 1) {
    return Model(toy_config(seed, layers), Vocabulary::build({t.problem}, 200));
}

TrainExample example_of(const ToySetup& t) {
    TrainExample ex;
    ex.x = &t.x;
    ex.options = &t.options;
    for (const auto& p : t.programs) ex.programs.push_back(&p);
    return ex;
}

std::map<std::string, Matrix> snapshot_grads(const Model& m) {
    std::map<std::string, Matrix> out;
    for (const Tensor* t : m.params().all()) out[t->name] = t->grad;
    return out;
}

}  // namespace

TEST_CASE("vocabulary") {
    auto v = Vocabulary::build({toy_problem()}, 1000);
    CHECK(v.contains(kUnk));
    CHECK(v.contains(kEos));
    CHECK(v.contains("pens"));
    CHECK(v.contains("5"));
    CHECK(v.id("zzz-not-there") == v.unk_id());
    CHECK(v.word(v.id("pens")) == "pens");

    // frequency cap keeps the most frequent surfaces
    auto small = Vocabulary::build({toy_problem()}, 8);
    CHECK(small.size() <= 8);
    CHECK(small.contains(kUnk));
}

TEST_CASE("encoder shapes, determinism, prefix property") {
    auto t = make_toy();
    auto m = toy_model(t, 3);
    auto enc = m.encode(t.x);
    REQUIRE(enc.u.size() == t.x.tokens.size());
    for (const auto& u : enc.u) CHECK(u.size() == m.config().hidden_size);

    auto enc2 = m.encode(t.x);
    for (size_t i = 0; i < enc.u.size(); ++i) CHECK(enc.u[i] == enc2.u[i]);

    // unidirectional: changing position 3 leaves earlier states untouched
    SourceSeq altered = t.x;
    altered.tokens[3] = make_word("changed");
    auto enc3 = m.encode(altered);
    for (size_t i = 0; i < 3; ++i) CHECK(enc.u[i] == enc3.u[i]);
    CHECK(enc.u[3] != enc3.u[3]);
}

TEST_CASE("step distribution normalization") {
    auto t = make_toy();
    std::mt19937 rng(9);
    for (int seed = 0; seed < 5; ++seed) {
        auto m = toy_model(t, 100 + static_cast<uint64_t>(seed));
        auto enc = m.encode(t.x);
        auto snap = m.start_decoder(enc);

        // advance by a few random Id emissions to vary the state
        ExecutionState exec;
        exec.x = &t.x;
        exec.options = &t.options;
        size_t steps = rng() % 3;
        for (size_t s = 0; s < steps; ++s) {
            Instruction in{OperationId::Id, {Vocab{"pens"}}, Dest::Output};
            auto sc = m.score_instructions(enc, snap, exec, {in});
            REQUIRE(sc.per_instr.size() == 1);
            snap = sc.next;
            execute_instruction(in, exec);
        }

        auto dist = m.step_distribution(enc, snap);
        double sum_ops = 0.0;
        for (double p : dist.op_probs) sum_ops += p;
        CHECK(sum_ops == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(dist.op_probs.size() == kNumOperations);
        CHECK(dist.p_output > 0.0);
        CHECK(dist.p_output < 1.0);

        double sum_gate = dist.first_arg.gate[0] + dist.first_arg.gate[1] + dist.first_arg.gate[2];
        CHECK(sum_gate == doctest::Approx(1.0).epsilon(1e-6));
        if (steps == 0) CHECK(dist.first_arg.gate[kPredCopyOutput] == 0.0);

        double sum_vocab = 0.0;
        for (double p : dist.first_arg.softmax_probs) sum_vocab += p;
        CHECK(sum_vocab == doctest::Approx(1.0).epsilon(1e-6));
        double sum_ci = 0.0;
        for (double p : dist.first_arg.copy_input_probs) sum_ci += p;
        CHECK(sum_ci == doctest::Approx(1.0).epsilon(1e-6));
        if (steps > 0) {
            double sum_co = 0.0;
            for (double p : dist.first_arg.copy_output_probs) sum_co += p;
            CHECK(sum_co == doctest::Approx(1.0).epsilon(1e-6));
        }

        // reproducibility
        auto again = m.step_distribution(enc, snap);
        CHECK(again.op_probs == dist.op_probs);
    }
}

TEST_CASE("analytic logprob with zeroed parameters") {
    auto t = make_toy();
    auto m = toy_model(t, 5);
    for (Tensor* ten : m.params().all()) ten->value.zero();

    auto enc = m.encode(t.x);
    auto snap = m.start_decoder(enc);
    ExecutionState exec;
    exec.x = &t.x;
    exec.options = &t.options;

    const double V = static_cast<double>(m.vocab().size());
    const double n = static_cast<double>(t.x.tokens.size());

    // "5" is in the vocabulary and appears exactly once in x; no prior
    // outputs, so the mixture renormalizes over softmax and input copy
    size_t count5 = 0;
    for (const auto& tok : t.x.tokens)
        if (tok.surface == "5") ++count5;
    REQUIRE(count5 == 1);

    Instruction in{OperationId::Id, {Vocab{"5"}}, Dest::Output};
    auto sc = m.score_instructions(enc, snap, exec, {in});
    REQUIRE(sc.per_instr.size() == 1);
    double p_arg = 0.5 * (1.0 / V) + 0.5 * (1.0 / n);
    double want = std::log(1.0 / 22.0) + std::log(0.5) + std::log(p_arg);
    CHECK(sc.logprob == doctest::Approx(want).epsilon(1e-12));

    // marginalization is at least each single path
    CHECK(p_arg >= 0.5 * (1.0 / V));
    CHECK(p_arg >= 0.5 * (1.0 / n));

    // zeroed softmax symmetry: h is zero so W_op gets no gradient, b_op does
    TrainExample ex;
    ex.x = &t.x;
    ex.options = &t.options;
    Program prog;
    prog.instrs = {in};
    ex.programs = {&prog};
    m.params().zero_grads();
    m.example_loss_and_grads(ex, std::nullopt);
    const Tensor* wop = m.params().find("W_op");
    for (double g : wop->grad.data) CHECK(g == 0.0);
    const Tensor* bop = m.params().find("b_op");
    CHECK(bop->grad.data[static_cast<size_t>(OperationId::Id)] ==
          doctest::Approx(-(1.0 - 1.0 / 22.0)).epsilon(1e-12));
}

TEST_CASE("program logprob equals the sum of independently scored steps") {
    auto t = make_toy();
    auto m = toy_model(t, 7, 2);
    const Program& z = t.programs[0];

    std::vector<double> per_instr;
    double total = m.program_logprob(t.x, t.options, z, &per_instr);
    REQUIRE(per_instr.size() == z.instrs.size());
    double sum = 0.0;
    for (double lp : per_instr) sum += lp;
    CHECK(total == doctest::Approx(sum).epsilon(1e-12));

    // the cached training forward is an independent code path
    TrainExample ex;
    ex.x = &t.x;
    ex.options = &t.options;
    ex.programs = {&z};
    double loss = m.example_loss(ex);
    CHECK(-loss == doctest::Approx(total).epsilon(1e-9));

    // scoring one instruction at a time through fresh snapshots agrees too
    auto enc = m.encode(t.x);
    auto snap = m.start_decoder(enc);
    ExecutionState exec;
    exec.x = &t.x;
    exec.options = &t.options;
    double stepwise = 0.0;
    for (const auto& in : z.instrs) {
        auto sc = m.score_instructions(enc, snap, exec, {in});
        REQUIRE(sc.per_instr.size() == 1);
        stepwise += sc.logprob;
        snap = sc.next;
        REQUIRE(execute_instruction(in, exec));
    }
    CHECK(stepwise == doctest::Approx(total).epsilon(1e-9));
}

TEST_CASE("marginal loss identities") {
    auto t = make_toy(2);
    auto m = toy_model(t, 11);

    CHECK(log_sum_exp({-1.0, -2.0, -3.0}) == doctest::Approx(-0.59239).epsilon(1e-4));

    const Program& z = t.programs[0];
    TrainExample single;
    single.x = &t.x;
    single.options = &t.options;
    single.programs = {&z};
    double loss1 = m.example_loss(single);
    CHECK(loss1 == doctest::Approx(-m.program_logprob(t.x, t.options, z)).epsilon(1e-9));

    TrainExample dup = single;
    dup.programs = {&z, &z};
    double loss2 = m.example_loss(dup);
    CHECK(loss2 == doctest::Approx(loss1 - std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("gradient check at toy scale") {
    auto t = make_toy();
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        size_t layers = seed == 3 ? 2 : 1;
        auto m = toy_model(t, seed, layers);
        auto ex = example_of(t);
        std::string worst;
        double err = gradient_check(m, ex, 1e-4, &worst);
        INFO("seed ", seed, " worst tensor ", worst);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("staged equals unstaged when K covers the sequence") {
    auto t = make_toy();
    auto m = toy_model(t, 13, 2);
    auto ex = example_of(t);

    m.params().zero_grads();
    size_t passes_full = 0;
    double loss_full = m.example_loss_and_grads(ex, std::nullopt, &passes_full);
    auto grads_full = snapshot_grads(m);
    CHECK(passes_full == ex.programs.size());

    size_t max_len = 0;
    for (const auto* z : ex.programs) max_len = std::max(max_len, z->instrs.size());

    m.params().zero_grads();
    size_t passes_staged = 0;
    double loss_staged = m.example_loss_and_grads(ex, max_len + 10, &passes_staged);
    auto grads_staged = snapshot_grads(m);
    CHECK(passes_staged == ex.programs.size());
    CHECK(loss_staged == doctest::Approx(loss_full).epsilon(1e-12));

    for (const auto& [name, g] : grads_full) {
        const Matrix& h = grads_staged.at(name);
        for (size_t i = 0; i < g.data.size(); ++i) {
            double denom = std::max({std::abs(g.data[i]), std::abs(h.data[i]), 1e-12});
            CHECK(std::abs(g.data[i] - h.data[i]) / denom < 1e-9);
        }
    }
}

TEST_CASE("slice pass count and truncation effects") {
    auto t = make_toy();
    auto m = toy_model(t, 17);

    // |z| = 300 with K = 100 runs exactly 3 slice passes
    Program long_prog;
    for (int i = 0; i < 299; ++i)
        long_prog.instrs.push_back(Instruction{OperationId::Id, {Vocab{"pens"}}, Dest::Output});
    long_prog.instrs.push_back(Instruction{OperationId::Id, {Vocab{kEos}}, Dest::Output});
    REQUIRE(long_prog.instrs.size() == 300);
    TrainExample ex;
    ex.x = &t.x;
    ex.options = &t.options;
    ex.programs = {&long_prog};
    size_t passes = 0;
    m.params().zero_grads();
    m.example_loss_and_grads(ex, 100, &passes);
    CHECK(passes == 3);

    // short sequence: losses agree across K, gradients differ only through
    // cross-slice truncation
    Program four;
    four.instrs = {Instruction{OperationId::Id, {Vocab{"5"}}, Dest::Output},
                   Instruction{OperationId::Id, {Vocab{"+"}}, Dest::Output},
                   Instruction{OperationId::Id, {Vocab{"7"}}, Dest::Output},
                   Instruction{OperationId::Id, {Vocab{"5"}}, Dest::Output}};
    TrainExample ex4;
    ex4.x = &t.x;
    ex4.options = &t.options;
    ex4.programs = {&four};

    m.params().zero_grads();
    double l2 = m.example_loss_and_grads(ex4, 2, &passes);
    CHECK(passes == 2);
    auto g2 = snapshot_grads(m);
    m.params().zero_grads();
    double l4 = m.example_loss_and_grads(ex4, 4, &passes);
    CHECK(passes == 1);
    auto g4 = snapshot_grads(m);
    CHECK(l2 == doctest::Approx(l4).epsilon(1e-12));
    bool any_diff = false;
    for (const auto& [name, g] : g2)
        if (g.data != g4.at(name).data) any_diff = true;
    CHECK(any_diff);  // the copy-output pointer at step 3 reaches into slice 0
}

TEST_CASE("training reduces the loss") {
    auto t = make_toy(2);
    auto m = toy_model(t, 19);
    auto ex = example_of(t);

    double initial = m.example_loss(ex);
    double prev = initial;
    double lr = 0.1;
    for (int step = 0; step < 50; ++step) {
        auto stats = m.staged_train_step({ex}, 1000, lr);
        CHECK(stats.skipped == 0);
        double now = m.example_loss(ex);
        CHECK(now <= prev + 1e-6);
        prev = now;
    }
    CHECK(prev < 0.5 * initial);
    CHECK(m.params().all_finite());

    // empty program sets are skipped and counted
    TrainExample empty;
    empty.x = &t.x;
    empty.options = &t.options;
    auto stats = m.staged_train_step({empty}, 100, lr);
    CHECK(stats.skipped == 1);
}

TEST_CASE("checkpoint round trip is bit exact") {
    auto t = make_toy();
    auto m = toy_model(t, 23, 2);
    auto dir = std::filesystem::temp_directory_path() / "mwp_ckpt_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "model.bin").string();
    m.save(path);

    auto loaded = Model::load(path);
    CHECK(loaded.config().hidden_size == m.config().hidden_size);
    CHECK(loaded.vocab().size() == m.vocab().size());
    for (const Tensor* a : m.params().all()) {
        const Tensor* b = loaded.params().find(a->name);
        REQUIRE(b);
        CHECK(a->value.data == b->value.data);  // bit exact
    }
    double lp1 = m.program_logprob(t.x, t.options, t.programs[0]);
    double lp2 = loaded.program_logprob(t.x, t.options, t.programs[0]);
    CHECK(lp1 == lp2);

    // corrupt checkpoints are rejected
    {
        std::ofstream bad(dir / "bad.bin", std::ios::binary);
        bad << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(Model::load((dir / "bad.bin").string()), std::runtime_error);
    CHECK_THROWS_AS(Model::load((dir / "missing.bin").string()), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("unk fallback scoring") {
    auto t = make_toy();
    // tiny vocabulary: most words are unknown
    std::vector<std::string> words = {"5", "7", "+", "="};
    auto m = Model(toy_config(29), Vocabulary::from_words(words));
    auto enc = m.encode(t.x);
    auto snap = m.start_decoder(enc);
    ExecutionState exec;
    exec.x = &t.x;
    exec.options = &t.options;

    double unk_lp = m.unk_emission_logprob(enc, snap, exec);
    CHECK(std::isfinite(unk_lp));
    CHECK(unk_lp < 0.0);

    // a vocabulary word absent from x scores only through the softmax path;
    // an OOV word absent from x falls back to the UNK probability
    Instruction oov{OperationId::Id, {Vocab{"zebra"}}, Dest::Output};
    auto sc = m.score_instructions(enc, snap, exec, {oov});
    REQUIRE(sc.per_instr.size() == 1);
    CHECK(std::isfinite(sc.logprob));
}
