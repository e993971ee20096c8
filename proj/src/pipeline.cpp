#include "mwp/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <thread>

namespace mwp {

namespace {

// Pick the training subset of an induced set: programs come back score-sorted
// with ties in search order, which front-loads copy-heavy explanations. The
// marginal needs the value-computing explanations too, so ties are broken by
// preferring programs whose operation signature is new.
std::vector<size_t> select_training_programs(const InducedProgramSet& set, size_t want) {
    std::vector<size_t> picked;
    if (set.programs.empty()) return picked;
    want = std::min(want, set.programs.size());
    std::set<std::string> signatures;
    auto signature = [](const Program& z) {
        std::set<std::string> ops;
        for (const auto& in : z.instrs) ops.insert(op_name(in.op));
        std::string s;
        for (const auto& o : ops) s += o + ",";
        return s;
    };
    std::vector<bool> used(set.programs.size(), false);
    for (size_t i = 0; i < set.programs.size() && picked.size() < want; ++i) {
        if (signatures.insert(signature(set.programs[i].program)).second) {
            picked.push_back(i);
            used[i] = true;
        }
    }
    for (size_t i = 0; i < set.programs.size() && picked.size() < want; ++i) {
        if (!used[i]) picked.push_back(i);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

}  // namespace

std::vector<InducedProgramSet> induce_corpus(const std::vector<Problem>& problems,
                                             const InductionConfig& cfg, size_t jobs,
                                             const std::string& cache_dir) {
    std::vector<InducedProgramSet> out(problems.size());
    if (jobs == 0) jobs = 1;
    std::atomic<size_t> cursor{0};
    auto worker = [&] {
        for (;;) {
            size_t i = cursor.fetch_add(1);
            if (i >= problems.size()) return;
            const Problem& p = problems[i];
            std::string hash;
            if (!cache_dir.empty()) {
                hash = problem_hash(p);
                if (auto cached = load_cached_programs(cache_dir, hash)) {
                    out[i] = std::move(*cached);
                    continue;
                }
            }
            auto x = build_source(p);
            auto y = build_target(p);
            auto opts = make_options(p.options);
            out[i] = induce_programs(x, y, opts, cfg);
            if (!cache_dir.empty()) store_cached_programs(cache_dir, hash, out[i]);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    return out;
}

Model train_pipeline(const std::vector<Problem>& train, const TrainPipelineConfig& cfg,
                     TrainOutcome* outcome) {
    Vocabulary vocab = Vocabulary::build(train, cfg.model.vocab_size);
    auto vocab_set = vocab.surface_set();
    InductionConfig icfg = cfg.induction;
    icfg.vocab = &vocab_set;

    auto induced = induce_corpus(train, icfg, cfg.jobs, cfg.cache_dir);

    // per-example prepared training data
    struct Prepared {
        SourceSeq x;
        OptionSet options;
        std::vector<Program> programs;
    };
    std::vector<Prepared> prepared;
    for (size_t i = 0; i < train.size(); ++i) {
        if (induced[i].programs.empty()) continue;
        Prepared pr;
        pr.x = build_source(train[i]);
        pr.options = make_options(train[i].options);
        for (size_t k : select_training_programs(induced[i], cfg.model.samples_per_example))
            pr.programs.push_back(induced[i].programs[k].program);
        prepared.push_back(std::move(pr));
    }

    Model model(cfg.model, std::move(vocab));

    std::ofstream log;
    if (!cfg.log_path.empty()) log.open(cfg.log_path, std::ios::app);

    double lr = cfg.model.learning_rate;
    double best_epoch_loss = 1e300;
    size_t stale_epochs = 0;
    const size_t patience = 3;
    size_t step = 0;
    double epoch_loss = 0.0;

    std::mt19937 order_rng(static_cast<uint32_t>(cfg.model.seed) ^ 0x9e3779b9u);
    std::vector<size_t> order(prepared.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (size_t epoch = 0; epoch < cfg.epochs && !prepared.empty(); ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        epoch_loss = 0.0;
        for (size_t oi : order) {
            const Prepared& pr = prepared[oi];
            TrainExample ex;
            ex.x = &pr.x;
            ex.options = &pr.options;
            for (const auto& z : pr.programs) ex.programs.push_back(&z);
            auto stats = model.staged_train_step({ex}, cfg.model.slice_k, lr);
            epoch_loss += stats.loss;
            ++step;
            if (log)
                log << "step " << step << " loss " << stats.loss << " grad_norm "
                    << stats.grad_norm << " lr " << lr << "\n";
        }
        epoch_loss /= static_cast<double>(prepared.size());
        if (log) log << "epoch " << epoch + 1 << " mean_loss " << epoch_loss << " lr " << lr
                     << "\n";
        // halve the rate after `patience` epochs without real improvement
        if (epoch_loss < best_epoch_loss * (1.0 - cfg.plateau_eps)) {
            best_epoch_loss = epoch_loss;
            stale_epochs = 0;
        } else if (++stale_epochs >= patience) {
            lr *= cfg.model.lr_decay;
            stale_epochs = 0;
        }
    }

    if (outcome) {
        outcome->covered = prepared.size();
        outcome->total = train.size();
        outcome->final_loss = epoch_loss;
        outcome->final_lr = lr;
    }
    return model;
}

std::vector<DecodedProblem> decode_corpus(const Model& model, const std::vector<Problem>& problems,
                                          const DecodeConfig& cfg, size_t jobs) {
    std::vector<DecodedProblem> out(problems.size());
    if (jobs == 0) jobs = 1;
    std::atomic<size_t> cursor{0};
    auto worker = [&] {
        for (;;) {
            size_t i = cursor.fetch_add(1);
            if (i >= problems.size()) return;
            auto x = build_source(problems[i]);
            auto opts = make_options(problems[i].options);
            out[i].index = i;
            out[i].result = beam_decode(model, x, opts, cfg);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    return out;
}

EvalReport evaluate_corpus(const Model& model, const std::vector<Problem>& problems,
                           const std::vector<DecodedProblem>& decodes, bool with_perplexity,
                           const InductionConfig& icfg, size_t force_beam, size_t jobs) {
    EvalReport report;
    report.n_examples = problems.size();

    std::vector<char> chosen, gold;
    std::vector<std::string> cands, refs;
    for (const auto& d : decodes) {
        const Problem& p = problems[d.index];
        chosen.push_back(d.result.chosen);
        gold.push_back(p.correct);
        cands.push_back(d.result.rationale);
        refs.push_back(p.rationale);
        if (d.result.fallback) ++report.n_fallback_choices;
    }
    report.accuracy = accuracy(chosen, gold);
    report.bleu4 = bleu4(cands, refs);

    if (with_perplexity) {
        std::vector<std::vector<double>> per_token(problems.size());
        if (jobs == 0) jobs = 1;
        std::atomic<size_t> cursor{0};
        auto worker = [&] {
            for (;;) {
                size_t i = cursor.fetch_add(1);
                if (i >= problems.size()) return;
                auto x = build_source(problems[i]);
                auto y = build_target(problems[i]);
                auto opts = make_options(problems[i].options);
                auto fd = force_decode(model, x, y, opts, icfg, force_beam);
                per_token[i] = fd.per_token;
            }
        };
        if (jobs == 1) {
            worker();
        } else {
            std::vector<std::thread> threads;
            for (size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
            for (auto& t : threads) t.join();
        }
        report.perplexity = perplexity(per_token);
    }
    return report;
}

}  // namespace mwp
