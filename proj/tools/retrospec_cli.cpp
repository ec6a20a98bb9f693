// Command-line front end: dataset generation, training, decoding,
// multi-step planning and the two benchmark protocols. Every run writes
// a manifest (config snapshot, seed, checkpoint hash, version) beside
// its outputs.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "retrospec/bench.hpp"
#include "retrospec/checkpoint.hpp"
#include "retrospec/corpus.hpp"
#include "retrospec/decode.hpp"
#include "retrospec/plan.hpp"
#include "retrospec/train.hpp"
#include "retrospec/version.hpp"

namespace fs = std::filesystem;
using namespace retrospec;
using json = nlohmann::json;

namespace {

void write_manifest(const std::string& dir_or_prefix, const std::string& subcommand,
                    json options, uint64_t seed, uint64_t checkpoint_hash = 0) {
    json m;
    m["tool"] = "retrospec";
    m["version"] = version_string;
    m["subcommand"] = subcommand;
    m["seed"] = seed;
    if (checkpoint_hash) m["checkpoint_hash"] = checkpoint_hash;
    m["options"] = std::move(options);
    fs::path p(dir_or_prefix);
    fs::path out = fs::is_directory(p) ? p / ("manifest_" + subcommand + ".json")
                                       : p.parent_path().empty()
                                             ? fs::path("manifest_" + subcommand + ".json")
                                             : p.parent_path() / ("manifest_" + subcommand + ".json");
    write_file(out.string(), m.dump(2) + "\n");
}

std::vector<corpus::ReactionPair> pairs_from_tsv(const std::string& path) {
    auto report = corpus::load_reactions(path);
    if (report.skipped > 0)
        std::cerr << "note: skipped " << report.skipped << " unusable lines in " << path << "\n";
    return std::move(report.pairs);
}

std::vector<model::RowExample> rows_from_pairs(const smiles::Vocabulary& vocab,
                                               const std::vector<corpus::ReactionPair>& pairs) {
    std::vector<model::RowExample> rows;
    rows.reserve(pairs.size());
    for (const auto& p : pairs)
        rows.push_back({vocab.encode_string(p.product), vocab.encode_string(p.reactants)});
    return rows;
}

struct LoadedModel {
    model::ModelParameters<float> params;
    smiles::Vocabulary vocab;
    uint64_t checkpoint_hash = 0;
};

LoadedModel load_model(const std::string& ckpt_path, const std::string& vocab_path) {
    LoadedModel lm;
    lm.vocab = smiles::Vocabulary::load(vocab_path);
    lm.params = model::load<float>(ckpt_path, lm.vocab.hash());
    lm.checkpoint_hash = model::file_hash(ckpt_path);
    return lm;
}

decode::DecodeConfig make_decode_config(const std::string& strategy, int beams, int max_len,
                                        double nucleus, int draft_len, int n_drafts) {
    decode::DecodeConfig cfg;
    cfg.strat = decode::parse_strategy(strategy);
    cfg.optimized = (cfg.strat == decode::strategy::bs_opt);
    cfg.beam_size = beams;
    if (max_len > 0) cfg.max_len = max_len;
    cfg.nucleus_p = nucleus;
    cfg.draft_len = draft_len;
    cfg.n_drafts = n_drafts;
    return cfg;
}

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, corpus::GrammarConfig cfg) {
    fs::create_directories(out_dir);
    auto data = corpus::gen_synthetic(cfg);
    corpus::write_reactions(out_dir + "/train.tsv", data.train);
    corpus::write_reactions(out_dir + "/valid.tsv", data.valid);
    corpus::write_reactions(out_dir + "/test.tsv", data.test);
    corpus::write_lines(out_dir + "/stock.txt", data.stock);
    std::vector<std::string> targets;
    for (const auto& p : data.test) targets.push_back(p.product);
    corpus::write_lines(out_dir + "/targets.txt", targets);

    std::vector<std::string> all;
    for (const auto& p : data.train) {
        all.push_back(p.product);
        all.push_back(p.reactants);
    }
    auto vocab = smiles::Vocabulary::build(all);
    vocab.save(out_dir + "/vocab.txt");

    auto manifest = corpus::dataset_manifest(data);
    manifest["vocab_size"] = vocab.size();
    write_file(out_dir + "/manifest_gen-data.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << data.train.size() << " train / " << data.valid.size() << " valid / "
              << data.test.size() << " test pairs, stock " << data.stock.size() << ", vocab "
              << vocab.size() << " to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrospec: speculative beam search for transformer retrosynthesis"};
    app.set_version_flag("--version", std::string(version_string));
    app.set_config("--config", "", "key-value config file; command-line flags take precedence");
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic reaction dataset");
    std::string gen_out = "data";
    corpus::GrammarConfig gcfg;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--size", gcfg.dataset_size, "number of reaction pairs");
    gen->add_option("--seed", gcfg.seed, "generation seed");
    gen->add_option("--terminals", gcfg.n_terminals, "stock fragment pool size");
    gen->add_option("--rules", gcfg.n_rules, "number of linker rules");
    gen->add_option("--max-depth", gcfg.max_depth, "maximum chain depth (<=5)");
    gen->add_option("--frag-min", gcfg.frag_len_min, "terminal length lower bound, tokens");
    gen->add_option("--frag-max", gcfg.frag_len_max, "terminal length upper bound, tokens");
    gen->add_option("--valid-frac", gcfg.valid_frac, "validation split fraction");
    gen->add_option("--test-frac", gcfg.test_frac, "test split fraction");

    // ---- train ----
    auto* train = app.add_subcommand("train", "train the model on a generated dataset");
    std::string train_data = "data", train_out = "model.ckpt", train_log;
    model::ModelConfig mcfg = model::ModelConfig::toy_preset(0);
    model::TrainSchedule sched;
    double target_em = 0.0;
    int eval_sample = 200;
    train->add_option("--data", train_data, "dataset directory from gen-data");
    train->add_option("--out", train_out, "checkpoint path");
    train->add_option("--log", train_log, "training log CSV path");
    train->add_option("--epochs", sched.epochs);
    train->add_option("--max-steps", sched.max_steps);
    train->add_option("--batch", sched.batch_size);
    train->add_option("--lr", sched.lr);
    train->add_option("--warmup", sched.warmup_steps);
    train->add_option("--clip", sched.grad_clip);
    train->add_option("--threads", sched.threads);
    train->add_option("--seed", mcfg.seed);
    train->add_option("--layers-enc", mcfg.layers_enc);
    train->add_option("--layers-dec", mcfg.layers_dec);
    train->add_option("--attn-heads", mcfg.attn_heads);
    train->add_option("--d-model", mcfg.d_model);
    train->add_option("--d-ff", mcfg.d_ff);
    train->add_option("--medusa-heads", mcfg.medusa_heads);
    train->add_option("--medusa-hidden", mcfg.medusa_hidden);
    train->add_option("--max-len", mcfg.max_len);
    train->add_option("--dropout", mcfg.dropout);
    train->add_option("--target-em", target_em,
                      "stop when validation greedy exact match reaches this value");
    train->add_option("--eval-sample", eval_sample, "validation sample size per epoch");

    // ---- decode ----
    auto* dec = app.add_subcommand("decode", "decode SMILES into ranked precursor predictions");
    std::string dec_ckpt = "model.ckpt", dec_vocab = "data/vocab.txt";
    std::string dec_input, dec_smiles, dec_metrics_out;
    std::string dec_strategy = "msbs";
    int dec_beams = 10, dec_batch = 1, dec_max_len = 0, dec_draft_len = 20, dec_drafts = 10;
    int dec_threads = 1;
    double dec_nucleus = 0.9975;
    dec->add_option("--checkpoint", dec_ckpt, "model checkpoint")->required();
    dec->add_option("--vocab", dec_vocab, "vocabulary file")->required();
    dec->add_option("--input", dec_input, "line-delimited SMILES file");
    dec->add_option("--smiles", dec_smiles, "single molecule");
    dec->add_option("--strategy", dec_strategy, "bs | bs-opt | hsbs | msbs");
    dec->add_option("--beams", dec_beams, "beam size K");
    dec->add_option("--batch", dec_batch, "sources decoded per lockstep batch");
    dec->add_option("--max-len", dec_max_len, "output length cap");
    dec->add_option("--nucleus", dec_nucleus, "verification nucleus parameter");
    dec->add_option("--draft-len", dec_draft_len, "draft length");
    dec->add_option("--drafts", dec_drafts, "heuristic draft count");
    dec->add_option("--threads", dec_threads, "backend threads");
    dec->add_option("--metrics-out", dec_metrics_out, "write the JSON metrics record here");

    // ---- plan ----
    auto* plan_cmd = app.add_subcommand("plan", "multi-step retrosynthesis planning");
    std::string plan_ckpt, plan_vocab, plan_stock, plan_targets_path, plan_single;
    std::string plan_algo = "retro-star", plan_strategy = "msbs";
    std::string plan_routes_out = "routes.jsonl", plan_summary_out;
    plan::PlanConfig pcfg;
    int plan_expansions = 10, plan_beams_max_len = 0, plan_draft_len = 20, plan_drafts = 10;
    double plan_nucleus = 0.9975;
    int plan_jobs = 1;
    plan_cmd->add_option("--checkpoint", plan_ckpt)->required();
    plan_cmd->add_option("--vocab", plan_vocab)->required();
    plan_cmd->add_option("--stock", plan_stock, "building-block file")->required();
    plan_cmd->add_option("--targets", plan_targets_path, "line-delimited target molecules");
    plan_cmd->add_option("--smiles", plan_single, "single target molecule");
    plan_cmd->add_option("--algo", plan_algo, "retro-star | dfs");
    plan_cmd->add_option("--beam-width", pcfg.beam_width, "frontier entries per iteration");
    plan_cmd->add_option("--time-limit", pcfg.time_limit_s, "seconds per target (0 = off)");
    plan_cmd->add_option("--max-iterations", pcfg.max_iterations);
    plan_cmd->add_option("--max-depth", pcfg.max_depth);
    plan_cmd->add_option("--call-budget", pcfg.model_call_budget, "model calls per target (0 = off)");
    plan_cmd->add_option("--expansions", plan_expansions, "precursor sets per expansion (K)");
    plan_cmd->add_option("--strategy", plan_strategy, "single-step decode strategy");
    plan_cmd->add_option("--max-len", plan_beams_max_len);
    plan_cmd->add_option("--nucleus", plan_nucleus);
    plan_cmd->add_option("--draft-len", plan_draft_len);
    plan_cmd->add_option("--drafts", plan_drafts);
    plan_cmd->add_option("--routes-out", plan_routes_out, "JSONL route output");
    plan_cmd->add_option("--summary-out", plan_summary_out, "summary CSV path");
    plan_cmd->add_option("--jobs", plan_jobs, "parallel workers");

    // ---- bench-single ----
    auto* bs_cmd = app.add_subcommand("bench-single", "single-step decoding benchmark");
    std::string bs_ckpt, bs_vocab, bs_data;
    std::string bs_strategies = "bs,bs-opt,hsbs,msbs", bs_batches = "1";
    std::string bs_json_out = "bench_single.json", bs_csv_out = "bench_single.csv";
    bench::SingleStepOptions bs_opt;
    int64_t bs_limit = 0;
    bs_cmd->add_option("--checkpoint", bs_ckpt)->required();
    bs_cmd->add_option("--vocab", bs_vocab)->required();
    bs_cmd->add_option("--data", bs_data, "reaction TSV (product<TAB>reactants)")->required();
    bs_cmd->add_option("--strategies", bs_strategies, "comma-separated strategy list");
    bs_cmd->add_option("--batch-sizes", bs_batches, "comma-separated batch sizes");
    bs_cmd->add_option("--runs", bs_opt.runs, "timing repetitions");
    bs_cmd->add_option("--beams", bs_opt.beam_size);
    bs_cmd->add_option("--max-len", bs_opt.max_len);
    bs_cmd->add_option("--nucleus", bs_opt.nucleus_p);
    bs_cmd->add_option("--draft-len", bs_opt.msbs_draft_len, "draft length for msbs");
    bs_cmd->add_option("--threads", bs_opt.backend_threads);
    bs_cmd->add_option("--limit", bs_limit, "use only the first N dataset rows");
    bs_cmd->add_option("--report-json", bs_json_out);
    bs_cmd->add_option("--report-csv", bs_csv_out);

    // ---- bench-multi ----
    auto* bm_cmd = app.add_subcommand("bench-multi", "multi-step planning benchmark");
    std::string bm_ckpt, bm_vocab, bm_stock, bm_targets;
    std::vector<std::string> bm_configs;
    std::string bm_rows_out = "bench_multi_rows.jsonl";
    std::string bm_json_out = "bench_multi.json", bm_csv_out = "bench_multi.csv";
    int64_t bm_limit = 0;
    int bm_jobs = 1, bm_expansions = 10, bm_max_len = 0;
    double bm_time_limit = 5.0;
    int64_t bm_call_budget = 0;
    bm_cmd->add_option("--checkpoint", bm_ckpt)->required();
    bm_cmd->add_option("--vocab", bm_vocab)->required();
    bm_cmd->add_option("--stock", bm_stock)->required();
    bm_cmd->add_option("--targets", bm_targets)->required();
    bm_cmd->add_option("--configs", bm_configs,
                       "name=algo:strategy:beam_width entries, e.g. rs-bs=retro-star:bs:1");
    bm_cmd->add_option("--time-limit", bm_time_limit, "seconds per target");
    bm_cmd->add_option("--call-budget", bm_call_budget, "model calls per target (0 = off)");
    bm_cmd->add_option("--expansions", bm_expansions);
    bm_cmd->add_option("--max-len", bm_max_len);
    bm_cmd->add_option("--limit", bm_limit, "use only the first N targets");
    bm_cmd->add_option("--jobs", bm_jobs);
    bm_cmd->add_option("--rows-out", bm_rows_out, "incremental per-target JSONL (resumable)");
    bm_cmd->add_option("--report-json", bm_json_out);
    bm_cmd->add_option("--report-csv", bm_csv_out);

    try {
        app.parse(argc, argv);

        if (gen->parsed()) {
            const int rc = cmd_gen_data(gen_out, gcfg);
            return rc;
        }

        if (train->parsed()) {
            auto vocab = smiles::Vocabulary::load(train_data + "/vocab.txt");
            auto train_pairs = pairs_from_tsv(train_data + "/train.tsv");
            auto valid_pairs = pairs_from_tsv(train_data + "/valid.tsv");
            mcfg.vocab_size = vocab.size();
            mcfg.validate();
            auto params = model::init<float>(mcfg, vocab.hash());
            auto rows = rows_from_pairs(vocab, train_pairs);
            if (target_em > 0) {
                sched.epoch_callback = [&](int epoch, int64_t step) {
                    double em = bench::greedy_exact_match(params, vocab, valid_pairs,
                                                          size_t(eval_sample), sched.threads);
                    std::cerr << "epoch " << epoch << " step " << step
                              << ": validation exact match " << em << "\n";
                    return em >= target_em;
                };
            }
            auto result = model::train_in_place(params, rows, sched);
            model::save(params, train_out);
            if (!train_log.empty()) write_file(train_log, result.to_csv());
            double em = bench::greedy_exact_match(params, vocab, valid_pairs, 0, sched.threads);
            std::cout << "trained " << result.steps << " steps; validation exact match " << em
                      << "; checkpoint " << train_out << "\n";
            write_manifest(train_out, "train",
                           json{{"data", train_data},
                                {"epochs", sched.epochs},
                                {"batch", sched.batch_size},
                                {"lr", sched.lr},
                                {"warmup", sched.warmup_steps},
                                {"threads", sched.threads},
                                {"config", model::config_to_json(mcfg)}},
                           mcfg.seed, model::file_hash(train_out));
            return 0;
        }

        if (dec->parsed()) {
            if (dec_input.empty() == dec_smiles.empty())
                throw config_error("decode: provide exactly one of --input or --smiles");
            auto lm = load_model(dec_ckpt, dec_vocab);
            std::vector<std::string> inputs;
            if (!dec_smiles.empty())
                inputs.push_back(dec_smiles);
            else
                for (auto& line : read_lines(dec_input))
                    if (!strip(line).empty()) inputs.push_back(strip(line));

            auto cfg = make_decode_config(dec_strategy, dec_beams, dec_max_len, dec_nucleus,
                                          dec_draft_len, dec_drafts);
            decode::TransformerBackend<float> backend(lm.params, dec_threads);
            decode::DecodeMetrics total;
            for (size_t start = 0; start < inputs.size(); start += size_t(dec_batch)) {
                const size_t end = std::min(inputs.size(), start + size_t(dec_batch));
                std::vector<std::vector<int>> sources;
                for (size_t i = start; i < end; ++i)
                    sources.push_back(lm.vocab.encode_string(inputs[i]));
                auto batch = decode::decode_batch(backend, sources, cfg);
                total.merge(batch.metrics);
                for (size_t i = start; i < end; ++i) {
                    const auto& hyps = batch.per_source[i - start];
                    for (size_t r = 0; r < hyps.size(); ++r)
                        std::cout << i << '\t' << r + 1 << '\t'
                                  << lm.vocab.decode_string(hyps[r].tokens) << '\t'
                                  << hyps[r].log_prob << "\n";
                }
            }
            json metrics{{"model_calls", total.model_calls},
                         {"drafted_tokens", total.drafted_tokens},
                         {"accepted_tokens", total.accepted_tokens},
                         {"acceptance_rate", total.acceptance_rate()},
                         {"mean_effective_batch", total.mean_effective_batch()},
                         {"wall_time_s", total.wall_time_s},
                         {"strategy", dec_strategy},
                         {"beam_size", dec_beams},
                         {"inputs", inputs.size()}};
            if (dec_metrics_out.empty())
                std::cerr << metrics.dump() << "\n";
            else
                write_file(dec_metrics_out, metrics.dump(2) + "\n");
            return 0;
        }

        if (plan_cmd->parsed()) {
            if (plan_targets_path.empty() == plan_single.empty())
                throw config_error("plan: provide exactly one of --targets or --smiles");
            auto lm = load_model(plan_ckpt, plan_vocab);
            auto stock = plan::Stock::load(plan_stock);
            std::cerr << "stock: " << stock.size() << " molecules (" << stock.raw_count
                      << " lines)\n";
            std::vector<std::string> targets;
            if (!plan_single.empty())
                targets.push_back(plan_single);
            else
                for (auto& line : read_lines(plan_targets_path))
                    if (!strip(line).empty()) targets.push_back(strip(line));

            pcfg.algorithm = plan_algo == "dfs" ? plan::PlanConfig::algo::dfs
                             : plan_algo == "retro-star"
                                 ? plan::PlanConfig::algo::retro_star
                                 : throw config_error("unknown --algo: " + plan_algo);
            auto dcfg = make_decode_config(plan_strategy, plan_expansions, plan_beams_max_len,
                                           plan_nucleus, plan_draft_len, plan_drafts);

            std::vector<bench::NamedPlanConfig> configs = {{"plan", pcfg, dcfg}};
            auto report = bench::bench_multi_step(lm.params, lm.vocab, targets, stock, configs,
                                                  plan_routes_out, plan_jobs);
            std::cout << bench::render_multi_step_table(report);
            if (!plan_summary_out.empty()) write_file(plan_summary_out, report.to_csv());
            write_manifest(plan_routes_out, "plan",
                           json{{"algo", plan_algo},
                                {"strategy", plan_strategy},
                                {"beam_width", pcfg.beam_width},
                                {"time_limit_s", pcfg.time_limit_s},
                                {"max_iterations", pcfg.max_iterations},
                                {"max_depth", pcfg.max_depth},
                                {"expansions", plan_expansions},
                                {"targets", targets.size()}},
                           lm.params.config.seed, lm.checkpoint_hash);
            return 0;
        }

        if (bs_cmd->parsed()) {
            auto lm = load_model(bs_ckpt, bs_vocab);
            auto pairs = pairs_from_tsv(bs_data);
            if (bs_limit > 0 && int64_t(pairs.size()) > bs_limit)
                pairs.resize(size_t(bs_limit));
            bs_opt.strategies.clear();
            for (auto& s : split(bs_strategies, ','))
                bs_opt.strategies.push_back(decode::parse_strategy(strip(s)));
            bs_opt.batch_sizes.clear();
            for (auto& b : split(bs_batches, ',')) bs_opt.batch_sizes.push_back(std::stoi(b));
            auto report = bench::bench_single_step(lm.params, lm.vocab, pairs, bs_opt);
            std::cout << bench::render_single_step_table(report);
            write_file(bs_json_out, report.to_json().dump(2) + "\n");
            write_file(bs_csv_out, report.to_csv());
            write_manifest(bs_json_out, "bench-single",
                           json{{"data", bs_data},
                                {"strategies", bs_strategies},
                                {"batch_sizes", bs_batches},
                                {"runs", bs_opt.runs},
                                {"beams", bs_opt.beam_size},
                                {"dataset_size", pairs.size()}},
                           lm.params.config.seed, lm.checkpoint_hash);
            return 0;
        }

        if (bm_cmd->parsed()) {
            auto lm = load_model(bm_ckpt, bm_vocab);
            auto stock = plan::Stock::load(bm_stock);
            std::vector<std::string> targets;
            for (auto& line : read_lines(bm_targets))
                if (!strip(line).empty()) targets.push_back(strip(line));
            if (bm_limit > 0 && int64_t(targets.size()) > bm_limit)
                targets.resize(size_t(bm_limit));

            if (bm_configs.empty())
                bm_configs = {"rs-bs=retro-star:bs:1", "rs-msbs=retro-star:msbs:1"};
            std::vector<bench::NamedPlanConfig> configs;
            for (const auto& entry : bm_configs) {
                auto eq = entry.find('=');
                if (eq == std::string::npos)
                    throw config_error("bad --configs entry (want name=algo:strategy:width): " +
                                       entry);
                auto parts = split(entry.substr(eq + 1), ':');
                if (parts.size() != 3)
                    throw config_error("bad --configs entry (want name=algo:strategy:width): " +
                                       entry);
                bench::NamedPlanConfig ncfg;
                ncfg.name = entry.substr(0, eq);
                ncfg.plan.algorithm = parts[0] == "dfs" ? plan::PlanConfig::algo::dfs
                                      : parts[0] == "retro-star"
                                          ? plan::PlanConfig::algo::retro_star
                                          : throw config_error("unknown algo: " + parts[0]);
                ncfg.plan.beam_width = std::stoi(parts[2]);
                ncfg.plan.time_limit_s = bm_time_limit;
                ncfg.plan.model_call_budget = bm_call_budget;
                ncfg.decode = make_decode_config(parts[1], bm_expansions, bm_max_len, 0.9975,
                                                 20, 10);
                configs.push_back(std::move(ncfg));
            }
            auto report = bench::bench_multi_step(lm.params, lm.vocab, targets, stock, configs,
                                                  bm_rows_out, bm_jobs);
            std::cout << bench::render_multi_step_table(report);
            write_file(bm_json_out, report.to_json().dump(2) + "\n");
            write_file(bm_csv_out, report.to_csv());
            write_manifest(bm_json_out, "bench-multi",
                           json{{"targets", targets.size()},
                                {"time_limit_s", bm_time_limit},
                                {"call_budget", bm_call_budget},
                                {"configs", bm_configs}},
                           lm.params.config.seed, lm.checkpoint_hash);
            return 0;
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "retrospec: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
