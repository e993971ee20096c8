#include "mwp/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "mwp/pipeline.hpp"
#include "mwp/synth.hpp"

namespace mwp {

namespace {

std::vector<Problem> load_or_die(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw std::runtime_error("missing input file: " + path);
    return load_corpus(path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write: " + path);
    out << text;
}

struct CommonOpts {
    size_t jobs = std::thread::hardware_concurrency();
    uint64_t seed = 1;
};

int run_stats(const std::string& input, const std::string& json_out) {
    auto problems = load_or_die(input);
    auto stats = compute_stats(problems);
    std::cout << stats_to_text(stats);
    if (!json_out.empty()) write_text(json_out, stats_to_json(stats) + "\n");
    return 0;
}

int run_dedup(const std::string& heldout_path, const std::string& train_path,
              const std::string& out_path, double threshold) {
    auto heldout = load_or_die(heldout_path);
    auto train = load_or_die(train_path);
    auto kept = levenshtein_dedup(heldout, train, threshold);
    save_corpus(kept, out_path);
    std::cerr << "kept " << kept.size() << " of " << train.size() << " training problems\n";
    return 0;
}

int run_gen_synth(size_t n, uint64_t seed, double two_step, const std::string& out_path) {
    SynthConfig cfg;
    cfg.n = n;
    cfg.seed = seed;
    cfg.two_step_fraction = two_step;
    auto problems = gen_synth(cfg);
    save_corpus(problems, out_path);
    std::cerr << "wrote " << problems.size() << " problems (seed " << seed << ")\n";
    return 0;
}

int run_induce(const std::string& input, const InductionConfig& icfg, size_t jobs,
               const std::string& cache_dir, const std::string& out_path) {
    auto problems = load_or_die(input);
    auto report = coverage_report(problems, icfg, jobs, cache_dir);
    std::cout << "covered " << report.n_covered << " / " << report.entries.size() << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw std::runtime_error("cannot write: " + out_path);
        for (size_t i = 0; i < report.entries.size(); ++i) {
            nlohmann::json j;
            j["index"] = i;
            j["covered"] = report.entries[i].covered;
            j["n_programs"] = report.entries[i].n_programs;
            j["first_program"] = report.entries[i].first_program;
            out << j.dump() << "\n";
        }
    }
    return 0;
}

int run_train(const std::string& input, TrainPipelineConfig cfg, const std::string& model_out) {
    auto problems = load_or_die(input);
    TrainOutcome outcome;
    Model model = train_pipeline(problems, cfg, &outcome);
    model.save(model_out);
    std::cerr << "covered " << outcome.covered << " / " << outcome.total << ", final loss "
              << outcome.final_loss << ", lr " << outcome.final_lr << ", seed "
              << cfg.model.seed << "\n";
    return 0;
}

int run_decode(const std::string& input, const std::string& model_path, DecodeConfig dcfg,
               size_t jobs, const std::string& out_path) {
    auto problems = load_or_die(input);
    if (!std::filesystem::exists(model_path))
        throw std::runtime_error("missing input file: " + model_path);
    Model model = Model::load(model_path);
    auto decodes = decode_corpus(model, problems, dcfg, jobs);
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write: " + out_path);
    for (const auto& d : decodes) {
        nlohmann::json j;
        j["index"] = d.index;
        j["program"] = print_program(d.result.program);
        j["rationale"] = d.result.rationale;
        j["chosen"] = std::string(1, d.result.chosen);
        j["score"] = d.result.score;
        j["fallback"] = d.result.fallback;
        j["seed"] = dcfg.seed;
        out << j.dump() << "\n";
    }
    return 0;
}

int run_eval(const std::string& gold_path, const std::string& decodes_path,
             const std::string& model_path, const InductionConfig& icfg, size_t force_beam,
             size_t jobs, const std::string& json_out) {
    auto problems = load_or_die(gold_path);
    if (!std::filesystem::exists(decodes_path))
        throw std::runtime_error("missing input file: " + decodes_path);

    std::vector<DecodedProblem> decodes;
    {
        std::ifstream in(decodes_path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const std::exception& e) {
                throw std::runtime_error("decodes line " + std::to_string(lineno) + ": " +
                                         e.what());
            }
            DecodedProblem d;
            d.index = j.at("index").get<size_t>();
            d.result.rationale = j.at("rationale").get<std::string>();
            d.result.chosen = j.at("chosen").get<std::string>().at(0);
            d.result.fallback = j.at("fallback").get<bool>();
            d.result.score = j.at("score").get<double>();
            decodes.push_back(std::move(d));
        }
    }
    if (decodes.size() != problems.size())
        throw std::runtime_error("decode record count does not match the gold corpus");

    EvalReport report;
    if (!model_path.empty()) {
        Model model = Model::load(model_path);
        report = evaluate_corpus(model, problems, decodes, true, icfg, force_beam, jobs);
    } else {
        // accuracy and BLEU need no model
        Model dummy(ModelConfig{.hidden_size = 1, .embed_size = 1, .att_size = 1, .vocab_size = 8,
                                .lstm_layers = 1},
                    Vocabulary());
        report = evaluate_corpus(dummy, problems, decodes, false, icfg, force_beam, jobs);
    }
    std::cout << report_to_text(report);
    if (!json_out.empty()) write_text(json_out, report_to_json(report) + "\n");
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"math word problem rationales: induction, training, decoding"};
    app.require_subcommand(1);

    CommonOpts common;

    // stats
    auto* stats = app.add_subcommand("stats", "corpus statistics");
    std::string stats_input, stats_json;
    stats->add_option("input", stats_input, "corpus jsonl")->required();
    stats->add_option("--json", stats_json, "also write a json report");

    // dedup
    auto* dedup = app.add_subcommand("dedup", "drop training replicas of heldout problems");
    std::string dd_heldout, dd_train, dd_out;
    double dd_threshold = 0.1;
    dedup->add_option("--heldout", dd_heldout)->required();
    dedup->add_option("--train", dd_train)->required();
    dedup->add_option("--out", dd_out)->required();
    dedup->add_option("--threshold", dd_threshold, "normalized edit distance");

    // gen-synth
    auto* synth = app.add_subcommand("gen-synth", "generate synthetic problems");
    size_t gs_n = 1000;
    double gs_two = 0.35;
    std::string gs_out;
    synth->add_option("--n", gs_n);
    synth->add_option("--seed", common.seed);
    synth->add_option("--two-step-frac", gs_two);
    synth->add_option("--out", gs_out)->required();

    // shared induction knobs
    InductionConfig icfg;
    auto add_induction_opts = [&](CLI::App* cmd) {
        cmd->add_option("--depth", icfg.depth);
        cmd->add_option("--beam", icfg.beam);
        cmd->add_option("--candidate-cap", icfg.candidate_cap);
        cmd->add_option("--node-budget", icfg.node_budget);
    };

    // induce
    auto* induce = app.add_subcommand("induce", "find programs explaining each rationale");
    std::string in_input, in_cache, in_out;
    induce->add_option("input", in_input)->required();
    add_induction_opts(induce);
    induce->add_option("--cache-dir", in_cache);
    induce->add_option("--out", in_out, "per-problem coverage jsonl");
    induce->add_option("--jobs", common.jobs);

    // train
    auto* train = app.add_subcommand("train", "train the instruction generator");
    TrainPipelineConfig tcfg;
    std::string tr_input, tr_model_out;
    train->add_option("input", tr_input)->required();
    train->add_option("--out", tr_model_out)->required();
    train->add_option("--epochs", tcfg.epochs);
    train->add_option("--hidden", tcfg.model.hidden_size);
    train->add_option("--embed", tcfg.model.embed_size);
    train->add_option("--att", tcfg.model.att_size);
    train->add_option("--layers", tcfg.model.lstm_layers);
    train->add_option("--vocab-size", tcfg.model.vocab_size);
    train->add_option("--K", tcfg.model.slice_k);
    train->add_option("--samples", tcfg.model.samples_per_example);
    train->add_option("--lr", tcfg.model.learning_rate);
    train->add_option("--seed", tcfg.model.seed);
    train->add_option("--depth", tcfg.induction.depth);
    train->add_option("--beam", tcfg.induction.beam);
    train->add_option("--candidate-cap", tcfg.induction.candidate_cap);
    train->add_option("--node-budget", tcfg.induction.node_budget);
    train->add_option("--cache-dir", tcfg.cache_dir);
    train->add_option("--log", tcfg.log_path);
    train->add_option("--jobs", tcfg.jobs);

    // decode
    auto* decode = app.add_subcommand("decode", "beam decode a corpus");
    DecodeConfig dcfg;
    std::string de_input, de_model, de_out;
    decode->add_option("input", de_input)->required();
    decode->add_option("--model", de_model)->required();
    decode->add_option("--out", de_out)->required();
    decode->add_option("--beam", dcfg.beam);
    decode->add_option("--max-len", dcfg.max_len);
    decode->add_option("--op-k", dcfg.op_k);
    decode->add_option("--arg-k", dcfg.arg_k);
    decode->add_option("--seed", dcfg.seed);
    decode->add_option("--jobs", common.jobs);

    // eval
    auto* eval = app.add_subcommand("eval", "score decode output against gold");
    std::string ev_gold, ev_decodes, ev_model, ev_json;
    size_t ev_force_beam = 4;
    eval->add_option("--gold", ev_gold)->required();
    eval->add_option("--decodes", ev_decodes)->required();
    eval->add_option("--model", ev_model, "enable perplexity via force decoding");
    add_induction_opts(eval);
    eval->add_option("--force-beam", ev_force_beam);
    eval->add_option("--jobs", common.jobs);
    eval->add_option("--json", ev_json);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*stats) return run_stats(stats_input, stats_json);
        if (*dedup) return run_dedup(dd_heldout, dd_train, dd_out, dd_threshold);
        if (*synth) return run_gen_synth(gs_n, common.seed, gs_two, gs_out);
        if (*induce) return run_induce(in_input, icfg, common.jobs, in_cache, in_out);
        if (*train) return run_train(tr_input, tcfg, tr_model_out);
        if (*decode) return run_decode(de_input, de_model, dcfg, common.jobs, de_out);
        if (*eval)
            return run_eval(ev_gold, ev_decodes, ev_model, icfg, ev_force_beam, common.jobs,
                            ev_json);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        if (msg.find("missing input file") != std::string::npos ||
            msg.find("cannot open") != std::string::npos)
            return 3;
        if (msg.find("checkpoint") != std::string::npos || msg.find("cache") != std::string::npos)
            return 4;
        return 1;
    }
    return 2;
}

}  // namespace mwp
