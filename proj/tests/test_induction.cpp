#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "mwp/induction.hpp"

#include "candidate_oracle.hpp"

using namespace mwp;

namespace {

Problem billy_problem() {
    Problem p;
    p.question =
        "Billy cut up each cake into 10 slices, and ended up with 120 slices altogether. How "
        "many cakes did she cut up?";
    p.options = {"A) 9", "B) 7", "C) 12", "D) 14", "E) 16"};
    p.rationale = "120 / 10 = 12 cakes . Answer is C";
    p.correct = 'C';
    return p;
}

std::set<std::string> search_candidates(const ExecutionState& state, const Token& target,
                                        const InductionConfig& cfg, bool require_check) {
    auto cs = candidate_instructions(state, target, cfg, require_check);
    REQUIRE(!cs.capped);
    REQUIRE(!cs.budget_hit);
    std::set<std::string> keys;
    for (const auto& c : cs.chains) {
        auto key = chain_signature(state, c.instrs);
        REQUIRE(key);
        keys.insert(*key);
    }
    // chains come back value-deduplicated
    CHECK(keys.size() == cs.chains.size());
    return keys;
}

}  // namespace

TEST_CASE("candidate oracle equivalence on random pools") {
    std::mt19937 rng(20250807);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.candidate_cap = 100000;
    cfg.node_budget = 100000000;

    auto opts = make_options({"A) 991", "B) 992", "C) 993", "D) 994", "E) 995"});

    for (size_t cases = 0; cases < 250; ++cases) {
        size_t pool_size = 1 + rng() % 4;
        std::vector<int> pool;
        std::string question = "numbers";
        for (size_t i = 0; i < pool_size; ++i) {
            int v = 1 + static_cast<int>(rng() % 12);
            pool.push_back(v);
            question += " " + std::to_string(v);
        }
        SourceSeq x;
        x.tokens = tokenize(question);

        ExecutionState state;
        state.x = &x;
        state.options = &opts;

        // sometimes seed prior instructions so output copies and memory
        // values participate
        if (rng() % 2 == 0) {
            size_t which = 1 + rng() % pool_size;
            execute_instruction(
                Instruction{OperationId::StrToFloat, {CopyInput{which}}, Dest::Memory}, state);
            execute_instruction(Instruction{OperationId::Id, {Vocab{"="}}, Dest::Output}, state);
        }

        // target: a value reachable by one arithmetic step, or a near miss
        int a = pool[rng() % pool.size()];
        int b = pool[rng() % pool.size()];
        int t = 0;
        switch (rng() % 4) {
            case 0: t = a + b; break;
            case 1: t = a * b; break;
            case 2: t = a - b; break;
            default: t = static_cast<int>(rng() % 150); break;
        }
        Token target = make_number(std::to_string(t), t);

        auto oracle = mwp::testing::oracle_candidates(state, target, cfg.depth, false, nullptr);
        auto mine = search_candidates(state, target, cfg, false);
        REQUIRE(oracle == mine);
    }
}

TEST_CASE("candidate oracle equivalence for option letters and check") {
    std::mt19937 rng(77);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.candidate_cap = 100000;
    cfg.node_budget = 100000000;

    for (int iter = 0; iter < 60; ++iter) {
        int r1 = 2 + static_cast<int>(rng() % 10);
        int r2 = 3 + static_cast<int>(rng() % 9);
        auto opts = make_options({"A) " + std::to_string(r1 * r2), "B) " + std::to_string(r1 + r2),
                                  "C) 777", "D) 778", "E) 779"});
        SourceSeq x;
        x.tokens = tokenize("given " + std::to_string(r1) + " and " + std::to_string(r2));
        ExecutionState state;
        state.x = &x;
        state.options = &opts;

        Token letter = make_word("A");
        for (bool require_check : {false, true}) {
            auto oracle = mwp::testing::oracle_candidates(state, letter, cfg.depth, require_check, nullptr);
            auto mine = search_candidates(state, letter, cfg, require_check);
            REQUIRE(oracle == mine);
            if (require_check) {
                for (const auto& k : oracle) CHECK(k.find("Check/o") != std::string::npos);
            }
        }
    }
}

TEST_CASE("candidate set basics") {
    auto opts = make_options({"A) 12", "B) 13", "C) 14", "D) 15", "E) 16"});
    SourceSeq x;
    x.tokens = tokenize("values 5 and 7");
    ExecutionState state;
    state.x = &x;
    state.options = &opts;
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.candidate_cap = 10000;
    cfg.node_budget = 10000000;

    SUBCASE("word target at start") {
        auto cs = candidate_instructions(state, make_word("Let"), cfg);
        REQUIRE(cs.chains.size() == 1);  // vocabulary only; no equal token anywhere
        CHECK(cs.chains[0].instrs.size() == 1);
        CHECK(cs.chains[0].instrs[0].op == OperationId::Id);
        CHECK(cs.chains[0].instrs[0].dest == Dest::Output);
        CHECK(std::get<Vocab>(cs.chains[0].instrs[0].args[0]).word == "Let");
    }

    SUBCASE("copy target keeps the earliest provenance") {
        auto cs = candidate_instructions(state, make_word("values"), cfg);
        REQUIRE(cs.chains.size() == 1);  // vocab emission deduped against the copy
        CHECK(std::holds_alternative<CopyInput>(cs.chains[0].instrs[0].args[0]));
    }

    SUBCASE("number reachable by one hidden instruction") {
        auto cs = candidate_instructions(state, make_number("12", 12.0), cfg);
        bool has_add = false;
        for (const auto& c : cs.chains) {
            for (const auto& in : c.instrs)
                if (in.op == OperationId::Add) has_add = true;
            CHECK(c.instrs.back().dest == Dest::Output);
        }
        CHECK(has_add);  // 5 + 7
        for (size_t i = 1; i < cs.chains.size(); ++i)
            CHECK(cs.chains[i - 1].n_hidden <= cs.chains[i].n_hidden);
    }

    SUBCASE("unreachable number with restricted vocabulary is empty") {
        std::set<std::string> vocab = {"Let", "x"};
        cfg.vocab = &vocab;
        auto cs = candidate_instructions(state, make_number("9999", 9999.0), cfg);
        CHECK(cs.chains.empty());
    }

    SUBCASE("candidate cap reported") {
        cfg.candidate_cap = 2;
        auto cs = candidate_instructions(state, make_number("12", 12.0), cfg);
        CHECK(cs.chains.size() == 2);
        CHECK(cs.capped);
    }
}

TEST_CASE("induce_programs solves the cake problem") {
    auto p = billy_problem();
    auto x = build_source(p);
    auto y = build_target(p);
    auto opts = make_options(p.options);
    InductionConfig cfg;
    cfg.depth = 5;
    cfg.beam = 50;
    cfg.candidate_cap = 50;
    cfg.node_budget = 200000;

    auto set = induce_programs(x, y, opts, cfg);
    REQUIRE(!set.programs.empty());

    std::vector<std::string> want;
    for (const auto& t : y.tokens) want.push_back(t.surface);

    bool any_divide = false;
    for (const auto& ip : set.programs) {
        auto res = execute_program(ip.program, x, opts);
        REQUIRE(res.ok);
        CHECK(res.out_tokens == want);
        auto text = print_program(ip.program);
        if (text.find("Divide(") != std::string::npos) any_divide = true;

        // the emission before <EOS> is a Check yielding the correct letter
        size_t letter_out = want.size() - 2;
        size_t seen = 0;
        for (size_t i = 0; i < ip.program.instrs.size(); ++i) {
            if (ip.program.instrs[i].dest != Dest::Output) continue;
            if (seen == letter_out) {
                CHECK(ip.program.instrs[i].op == OperationId::Check);
                break;
            }
            ++seen;
        }
    }
    CHECK(any_divide);
}

TEST_CASE("induce_programs reuses emitted values in two-step rationales") {
    Problem p;
    p.question = "Take 6 boxes of 7 pens and add 8 more pens. How many pens in total?";
    p.options = {"A) 49", "B) 50", "C) 51", "D) 42", "E) 40"};
    p.rationale = "6 * 7 = 42 . 42 + 8 = 50 . Answer is B";
    p.correct = 'B';
    auto x = build_source(p);
    auto y = build_target(p);
    auto opts = make_options(p.options);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.beam = 40;
    cfg.candidate_cap = 40;
    cfg.node_budget = 200000;

    auto set = induce_programs(x, y, opts, cfg);
    REQUIRE(!set.programs.empty());
    for (const auto& ip : set.programs) {
        auto res = execute_program(ip.program, x, opts);
        REQUIRE(res.ok);
        // 42 never appears in x, so any Add feeding 50 must copy a
        // previously generated value
        auto text = print_program(ip.program);
        if (text.find("Add(") != std::string::npos) CHECK(text.find("z[") != std::string::npos);
    }
}

TEST_CASE("plain-words rationale needs no arithmetic") {
    Problem p;
    p.question = "Which option says yes?";
    p.options = {"A) yes", "B) no", "C) maybe", "D) never", "E) always"};
    p.rationale = "The first option says yes . Answer is A";
    p.correct = 'A';
    auto x = build_source(p);
    auto y = build_target(p);
    auto opts = make_options(p.options);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.beam = 10;
    cfg.candidate_cap = 30;
    cfg.node_budget = 100000;

    auto set = induce_programs(x, y, opts, cfg);
    REQUIRE(!set.programs.empty());
    const auto& prog = set.programs[0].program;
    for (const auto& in : prog.instrs) {
        bool allowed = in.op == OperationId::Id || in.op == OperationId::Check;
        CHECK(allowed);
    }
}

TEST_CASE("monotone beam") {
    auto p = billy_problem();
    auto x = build_source(p);
    auto y = build_target(p);
    auto opts = make_options(p.options);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.candidate_cap = 60;
    cfg.node_budget = 200000;

    size_t prev = 0;
    for (size_t beam : {1, 2, 4, 8, 16, 32}) {
        cfg.beam = beam;
        auto set = induce_programs(x, y, opts, cfg);
        CHECK(set.programs.size() >= prev);
        prev = set.programs.size();
    }
}

TEST_CASE("coverage report and cache") {
    std::vector<Problem> problems;
    for (int i = 0; i < 3; ++i) {
        Problem p;
        int a = 3 + i, b = 4 + i;
        p.question = "What is " + std::to_string(a) + " plus " + std::to_string(b) + " ?";
        int r = a + b;
        p.options = {"A) " + std::to_string(r), "B) " + std::to_string(r + 1),
                     "C) " + std::to_string(r + 2), "D) " + std::to_string(r + 3),
                     "E) " + std::to_string(r + 4)};
        p.rationale = std::to_string(a) + " + " + std::to_string(b) + " = " + std::to_string(r);
        p.correct = 'A';
        problems.push_back(p);
    }
    // a problem whose rationale manipulates symbols outside the operation set
    Problem hard;
    hard.question =
        "Two trains running in opposite directions cross a man standing on the platform in 27 "
        "seconds and 17 seconds respectively and they cross each other in 23 seconds. The ratio "
        "of their speeds is:";
    hard.options = {"A) 3/7", "B) 3/2", "C) 3/88", "D) 3/8", "E) 2/2"};
    hard.rationale =
        "Let the speeds of the two trains be x and y . Then ( 27x + 17y ) / ( x + y ) = 23 so "
        "27x + 17y = 23x + 23y so 4x = 6y so x / y = 3/2";
    hard.correct = 'B';
    problems.push_back(hard);

    // restrict the vocabulary to question words: the symbolic tokens 27x, 17y,
    // ... are neither in it nor copyable, so the hard problem stays uncovered
    std::set<std::string> vocab;
    for (const auto& p : problems)
        for (const auto& t : tokenize(p.question)) vocab.insert(t.surface);
    for (const char* w : {"+", "-", "*", "/", "=", "so", "(", ")", "Answer", "is", kEor, kEos})
        vocab.insert(w);

    InductionConfig cfg;
    cfg.depth = 2;
    cfg.beam = 8;
    cfg.candidate_cap = 40;
    cfg.node_budget = 100000;
    cfg.vocab = &vocab;

    auto dir = std::filesystem::temp_directory_path() / "mwp_cache_test";
    std::filesystem::remove_all(dir);
    auto report = coverage_report(problems, cfg, 2, dir.string());
    REQUIRE(report.entries.size() == 4);
    CHECK(report.entries[0].covered);
    CHECK(report.entries[1].covered);
    CHECK(report.entries[2].covered);
    CHECK(!report.entries[3].covered);
    CHECK(report.n_covered == 3);
    CHECK(!report.entries[0].first_program.empty());

    // second run hits the cache and reports identically
    auto again = coverage_report(problems, cfg, 1, dir.string());
    CHECK(again.n_covered == 3);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(again.entries[i].covered == report.entries[i].covered);
        CHECK(again.entries[i].n_programs == report.entries[i].n_programs);
        CHECK(again.entries[i].first_program == report.entries[i].first_program);
    }

    CHECK(coverage_report({}, cfg).entries.empty());
    std::filesystem::remove_all(dir);
}

TEST_CASE("cache round trip") {
    auto p = billy_problem();
    auto x = build_source(p);
    auto y = build_target(p);
    auto opts = make_options(p.options);
    InductionConfig cfg;
    cfg.depth = 2;
    cfg.beam = 5;
    cfg.candidate_cap = 30;
    cfg.node_budget = 100000;
    auto set = induce_programs(x, y, opts, cfg);
    REQUIRE(!set.programs.empty());

    auto dir = std::filesystem::temp_directory_path() / "mwp_cache_rt";
    std::filesystem::remove_all(dir);
    auto hash = problem_hash(p);
    store_cached_programs(dir.string(), hash, set);
    auto loaded = load_cached_programs(dir.string(), hash);
    REQUIRE(loaded);
    REQUIRE(loaded->programs.size() == set.programs.size());
    for (size_t i = 0; i < set.programs.size(); ++i) {
        CHECK(loaded->programs[i].program == set.programs[i].program);
        CHECK(loaded->programs[i].score == set.programs[i].score);
    }
    CHECK(!load_cached_programs(dir.string(), "doesnotexist"));
    std::filesystem::remove_all(dir);
}
