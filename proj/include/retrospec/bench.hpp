#pragma once

// Benchmark harness: single-step decoding comparisons (wall time, model
// calls, effective batch size, acceptance rate, top-N accuracy, invalid
// rate) and multi-step planning comparisons (solved sets, common-solved
// timing). Wall-time fields exclude tokenization; every non-timing field
// is reproducible for a fixed seed.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "retrospec/corpus.hpp"
#include "retrospec/decode.hpp"
#include "retrospec/plan.hpp"
#include "retrospec/train.hpp"

namespace retrospec::bench {

using json = nlohmann::json;

// Heuristic drafting plan per batch size: 10 drafts of length 10 at B=1,
// 3 of length 10 at B=4, otherwise a single draft of length 20.
inline std::pair<int, int> hsbs_drafts_for_batch(int batch_size) {
    if (batch_size == 1) return {10, 10};
    if (batch_size == 4) return {3, 10};
    return {1, 20};
}

// ---- greedy evaluation --------------------------------------------------

template <typename S>
double greedy_exact_match(const model::ModelParameters<S>& params,
                          const smiles::Vocabulary& vocab,
                          const std::vector<corpus::ReactionPair>& pairs, size_t limit = 0,
                          int threads = 1, int eval_batch = 16) {
    if (pairs.empty()) return 0.0;
    const size_t n = limit > 0 ? std::min(limit, pairs.size()) : pairs.size();
    decode::TransformerBackend<S> backend(params, threads);
    decode::DecodeConfig cfg;
    cfg.strat = decode::strategy::bs_opt;
    cfg.optimized = true;
    cfg.beam_size = 1;
    cfg.max_len = params.config.max_len - 1;
    size_t hits = 0;
    for (size_t start = 0; start < n; start += size_t(eval_batch)) {
        const size_t end = std::min(n, start + size_t(eval_batch));
        std::vector<std::vector<int>> sources;
        for (size_t i = start; i < end; ++i)
            sources.push_back(vocab.encode_string(pairs[i].product));
        auto batch = decode::decode_batch(backend, sources, cfg);
        for (size_t i = start; i < end; ++i) {
            const auto& hyps = batch.per_source[i - start];
            if (!hyps.empty() && vocab.decode_string(hyps[0].tokens) == pairs[i].reactants)
                ++hits;
        }
    }
    return double(hits) / double(n);
}

// ---- single-step benchmark ------------------------------------------------

struct SingleStepCell {
    std::string strategy;
    int batch_size = 1;
    int runs = 1;
    double wall_mean_s = 0.0;
    double wall_std_s = 0.0;  // meaningful only when runs >= 2
    int64_t model_calls = 0;
    double mean_effective_batch = 0.0;
    double acceptance_rate = 0.0;
    int64_t drafted_tokens = 0;
    int64_t accepted_tokens = 0;
    std::map<int, double> topn_accuracy;
    std::vector<double> invalid_rate_per_rank;  // index 0 = rank 1
};

struct SingleStepReport {
    int beam_size = 10;
    size_t dataset_size = 0;
    std::vector<int> topn = {1, 3, 5, 10};
    std::vector<SingleStepCell> cells;

    json to_json() const {
        json cells_json = json::array();
        for (const auto& c : cells) {
            json topn_json;
            for (auto& [n, acc] : c.topn_accuracy) topn_json[std::to_string(n)] = acc;
            cells_json.push_back({{"strategy", c.strategy},
                                  {"batch_size", c.batch_size},
                                  {"runs", c.runs},
                                  {"wall_mean_s", c.wall_mean_s},
                                  {"wall_std_s", c.wall_std_s},
                                  {"model_calls", c.model_calls},
                                  {"mean_effective_batch", c.mean_effective_batch},
                                  {"acceptance_rate", c.acceptance_rate},
                                  {"drafted_tokens", c.drafted_tokens},
                                  {"accepted_tokens", c.accepted_tokens},
                                  {"topn_accuracy", topn_json},
                                  {"invalid_rate_per_rank", c.invalid_rate_per_rank}});
        }
        return json{{"beam_size", beam_size},
                    {"dataset_size", dataset_size},
                    {"cells", cells_json}};
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "strategy,batch_size,runs,wall_mean_s,wall_std_s,model_calls,"
               "mean_effective_batch,acceptance_rate";
        for (int n : topn) out << ",top" << n << "_accuracy";
        out << "\n";
        for (const auto& c : cells) {
            out << c.strategy << ',' << c.batch_size << ',' << c.runs << ',' << std::fixed
                << std::setprecision(4) << c.wall_mean_s << ',' << c.wall_std_s << ','
                << c.model_calls << ',' << std::setprecision(2) << c.mean_effective_batch << ','
                << std::setprecision(4) << c.acceptance_rate;
            for (int n : topn) {
                auto it = c.topn_accuracy.find(n);
                out << ',' << (it == c.topn_accuracy.end() ? 0.0 : it->second);
            }
            out << "\n";
        }
        return out.str();
    }
};

struct SingleStepOptions {
    std::vector<decode::strategy> strategies = {decode::strategy::bs, decode::strategy::bs_opt,
                                                decode::strategy::hsbs, decode::strategy::msbs};
    std::vector<int> batch_sizes = {1};
    int runs = 1;
    int beam_size = 10;
    int max_len = 0;            // 0: model cap
    double nucleus_p = 0.9975;
    int msbs_draft_len = 20;
    int backend_threads = 1;
    std::vector<int> topn = {1, 3, 5, 10};
};

template <typename S>
SingleStepReport bench_single_step(const model::ModelParameters<S>& params,
                                   const smiles::Vocabulary& vocab,
                                   const std::vector<corpus::ReactionPair>& dataset,
                                   const SingleStepOptions& opt) {
    SingleStepReport report;
    report.beam_size = opt.beam_size;
    report.dataset_size = dataset.size();
    report.topn = opt.topn;
    if (dataset.empty()) return report;

    std::vector<std::vector<int>> sources;
    sources.reserve(dataset.size());
    for (const auto& p : dataset) sources.push_back(vocab.encode_string(p.product));

    for (auto strat : opt.strategies) {
        for (int B : opt.batch_sizes) {
            decode::DecodeConfig cfg;
            cfg.strat = strat;
            cfg.optimized = (strat == decode::strategy::bs_opt);
            cfg.beam_size = opt.beam_size;
            cfg.max_len = opt.max_len > 0 ? opt.max_len : params.config.max_len - 1;
            cfg.nucleus_p = opt.nucleus_p;
            if (strat == decode::strategy::hsbs) {
                auto [n_drafts, draft_len] = hsbs_drafts_for_batch(B);
                cfg.n_drafts = n_drafts;
                cfg.draft_len = draft_len;
            } else {
                cfg.draft_len = opt.msbs_draft_len;
            }

            SingleStepCell cell;
            cell.strategy = decode::to_string(strat);
            cell.batch_size = B;
            cell.runs = opt.runs;
            std::vector<double> walls;
            std::vector<int64_t> calls_per_run;
            std::vector<std::vector<std::string>> predictions(dataset.size());

            for (int run = 0; run < opt.runs; ++run) {
                decode::TransformerBackend<S> backend(params, opt.backend_threads);
                decode::DecodeMetrics total;
                stopwatch clock;
                for (size_t start = 0; start < sources.size(); start += size_t(B)) {
                    const size_t end = std::min(sources.size(), start + size_t(B));
                    std::vector<std::vector<int>> chunk(sources.begin() + long(start),
                                                        sources.begin() + long(end));
                    auto batch = decode::decode_batch(backend, chunk, cfg);
                    total.merge(batch.metrics);
                    if (run == 0) {
                        for (size_t i = start; i < end; ++i)
                            for (const auto& hyp : batch.per_source[i - start])
                                predictions[i].push_back(vocab.decode_string(hyp.tokens));
                    }
                }
                walls.push_back(clock.seconds());
                calls_per_run.push_back(total.model_calls);
                if (run == 0) {
                    cell.model_calls = total.model_calls;
                    cell.mean_effective_batch = total.mean_effective_batch();
                    cell.acceptance_rate = total.acceptance_rate();
                    cell.drafted_tokens = total.drafted_tokens;
                    cell.accepted_tokens = total.accepted_tokens;
                }
            }
            for (int64_t c : calls_per_run)
                if (c != cell.model_calls)
                    throw error("non-deterministic model call count in benchmark");

            double mean = 0;
            for (double w : walls) mean += w;
            mean /= double(walls.size());
            cell.wall_mean_s = mean;
            if (walls.size() >= 2) {
                double var = 0;
                for (double w : walls) var += (w - mean) * (w - mean);
                cell.wall_std_s = std::sqrt(var / double(walls.size() - 1));
            }

            for (int n : opt.topn) {
                size_t hits = 0;
                for (size_t i = 0; i < dataset.size(); ++i) {
                    const size_t upto = std::min(size_t(n), predictions[i].size());
                    for (size_t r = 0; r < upto; ++r)
                        if (predictions[i][r] == dataset[i].reactants) {
                            ++hits;
                            break;
                        }
                }
                cell.topn_accuracy[n] = double(hits) / double(dataset.size());
            }
            cell.invalid_rate_per_rank.assign(size_t(opt.beam_size), 0.0);
            for (size_t i = 0; i < dataset.size(); ++i)
                for (size_t r = 0; r < predictions[i].size() && r < size_t(opt.beam_size); ++r)
                    if (!smiles::validate_syntactic(predictions[i][r]).valid)
                        cell.invalid_rate_per_rank[r] += 1.0;
            for (auto& v : cell.invalid_rate_per_rank) v /= double(dataset.size());

            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

// Plain-text table in the four-panel layout: wall time, model calls,
// effective batch size, acceptance rate.
inline std::string render_single_step_table(const SingleStepReport& report) {
    std::vector<int> batches;
    std::vector<std::string> strategies;
    for (const auto& c : report.cells) {
        if (std::find(batches.begin(), batches.end(), c.batch_size) == batches.end())
            batches.push_back(c.batch_size);
        if (std::find(strategies.begin(), strategies.end(), c.strategy) == strategies.end())
            strategies.push_back(c.strategy);
    }
    auto cell = [&](const std::string& s, int b) -> const SingleStepCell* {
        for (const auto& c : report.cells)
            if (c.strategy == s && c.batch_size == b) return &c;
        return nullptr;
    };
    std::ostringstream out;
    auto panel = [&](const std::string& title, auto value) {
        out << title << "\n";
        out << std::left << std::setw(14) << "strategy";
        for (int b : batches) out << std::right << std::setw(14) << ("B=" + std::to_string(b));
        out << "\n";
        for (const auto& s : strategies) {
            out << std::left << std::setw(14) << s;
            for (int b : batches) {
                const auto* c = cell(s, b);
                out << std::right << std::setw(14) << (c ? value(*c) : std::string("-"));
            }
            out << "\n";
        }
        out << "\n";
    };
    auto fmt = [](double v, int prec) {
        std::ostringstream ss;
        ss << std::fixed << std::setprecision(prec) << v;
        return ss.str();
    };
    panel("(A) decoding wall time, s (K=" + std::to_string(report.beam_size) + ")",
          [&](const SingleStepCell& c) {
              return c.runs >= 2 ? fmt(c.wall_mean_s, 2) + "+-" + fmt(c.wall_std_s, 2)
                                 : fmt(c.wall_mean_s, 2);
          });
    panel("(B) model calls", [&](const SingleStepCell& c) { return std::to_string(c.model_calls); });
    panel("(C) average effective batch size",
          [&](const SingleStepCell& c) { return fmt(c.mean_effective_batch, 1); });
    panel("(D) acceptance rate, %", [&](const SingleStepCell& c) {
        return c.drafted_tokens > 0 ? fmt(100.0 * c.acceptance_rate, 1) : std::string("-");
    });
    out << "top-N accuracy, %\n";
    out << std::left << std::setw(14) << "strategy";
    for (int n : report.topn) out << std::right << std::setw(14) << ("top-" + std::to_string(n));
    out << "\n";
    for (const auto& s : strategies) {
        out << std::left << std::setw(14) << s;
        const auto* c = cell(s, batches.front());
        for (int n : report.topn) {
            double acc = c && c->topn_accuracy.count(n) ? c->topn_accuracy.at(n) : 0.0;
            out << std::right << std::setw(14) << fmt(100.0 * acc, 2);
        }
        out << "\n";
    }
    return out.str();
}

// ---- multi-step benchmark ---------------------------------------------------

struct MultiStepRow {
    std::string config_name;
    std::string target;
    bool solved = false;
    double wall_s = 0.0;
    int64_t iterations = 0;
    int64_t model_calls = 0;
    int64_t nodes = 0;
    json route;  // null when unsolved

    json to_json() const {
        return json{{"config", config_name},   {"target", target},
                    {"solved", solved},        {"wall_s", wall_s},
                    {"iterations", iterations}, {"model_calls", model_calls},
                    {"nodes", nodes},          {"route", route}};
    }
};

struct NamedPlanConfig {
    std::string name;
    plan::PlanConfig plan;
    decode::DecodeConfig decode;
};

struct MultiStepConfigSummary {
    std::string name;
    size_t targets = 0;
    size_t solved = 0;
    double solved_pct = 0.0;
    double total_wall_s = 0.0;
    double avg_time_solved_s = 0.0;
    // against the first configuration
    size_t common_solved = 0;
    double avg_time_common_s = 0.0;
    double avg_iterations_common = 0.0;
    int64_t total_model_calls = 0;
};

struct MultiStepReport {
    std::vector<MultiStepConfigSummary> configs;
    std::vector<MultiStepRow> rows;

    json to_json() const {
        json cfgs = json::array();
        for (const auto& c : configs)
            cfgs.push_back({{"name", c.name},
                            {"targets", c.targets},
                            {"solved", c.solved},
                            {"solved_pct", c.solved_pct},
                            {"total_wall_s", c.total_wall_s},
                            {"avg_time_solved_s", c.avg_time_solved_s},
                            {"common_solved", c.common_solved},
                            {"avg_time_common_s", c.avg_time_common_s},
                            {"avg_iterations_common", c.avg_iterations_common},
                            {"total_model_calls", c.total_model_calls}});
        return json{{"configs", cfgs}};
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "config,targets,solved,solved_pct,total_wall_s,avg_time_solved_s,"
               "common_solved,avg_time_common_s,avg_iterations_common,total_model_calls\n";
        for (const auto& c : configs)
            out << c.name << ',' << c.targets << ',' << c.solved << ',' << std::fixed
                << std::setprecision(4) << c.solved_pct << ',' << c.total_wall_s << ','
                << c.avg_time_solved_s << ',' << c.common_solved << ',' << c.avg_time_common_s
                << ',' << c.avg_iterations_common << ',' << c.total_model_calls << "\n";
        return out.str();
    }
};

// Expander factory so workers can own independent backends over shared
// parameters.
template <typename S>
struct PlannerSetup {
    const model::ModelParameters<S>* params = nullptr;
    const smiles::Vocabulary* vocab = nullptr;
};

namespace detail {

inline std::string row_key(const std::string& config, const std::string& target) {
    return config + "\t" + target;
}

}  // namespace detail

// Runs every target under every configuration. Rows are appended to
// `jsonl_path` (when non-empty) as they finish, so interrupted runs
// resume by skipping rows already present. Worker parallelism never
// changes a non-timing field.
template <typename S>
MultiStepReport bench_multi_step(const model::ModelParameters<S>& params,
                                 const smiles::Vocabulary& vocab,
                                 const std::vector<std::string>& targets,
                                 const plan::Stock& stock,
                                 const std::vector<NamedPlanConfig>& configs,
                                 const std::string& jsonl_path = "", int jobs = 1) {
    MultiStepReport report;
    std::map<std::string, MultiStepRow> done;
    if (!jsonl_path.empty()) {
        std::ifstream in(jsonl_path);
        std::string line;
        while (in && std::getline(in, line)) {
            if (strip(line).empty()) continue;
            try {
                json j = json::parse(line);
                MultiStepRow row;
                row.config_name = j.at("config").get<std::string>();
                row.target = j.at("target").get<std::string>();
                row.solved = j.at("solved").get<bool>();
                row.wall_s = j.at("wall_s").get<double>();
                row.iterations = j.at("iterations").get<int64_t>();
                row.model_calls = j.at("model_calls").get<int64_t>();
                row.nodes = j.at("nodes").get<int64_t>();
                row.route = j.at("route");
                done[detail::row_key(row.config_name, row.target)] = std::move(row);
            } catch (const json::exception&) {
                // ignore torn trailing line from an interrupted run
            }
        }
    }

    std::ofstream out;
    if (!jsonl_path.empty()) out.open(jsonl_path, std::ios::app);

    for (const auto& ncfg : configs) {
        std::vector<MultiStepRow> rows(targets.size());
        std::vector<char> pending(targets.size(), 1);
        for (size_t t = 0; t < targets.size(); ++t) {
            auto it = done.find(detail::row_key(ncfg.name, targets[t]));
            if (it != done.end()) {
                rows[t] = it->second;
                pending[t] = 0;
            }
        }

        const int workers = std::max(1, jobs);
        std::atomic<size_t> next{0};
        auto work = [&]() {
            decode::TransformerBackend<S> backend(params, 1);
            while (true) {
                const size_t t = next.fetch_add(1);
                if (t >= targets.size()) break;
                if (!pending[t]) continue;
                plan::NeuralExpander expander(backend, vocab, ncfg.decode);
                auto run = plan::plan_target(targets[t], expander, stock, ncfg.plan);
                MultiStepRow row;
                row.config_name = ncfg.name;
                row.target = targets[t];
                row.solved = run.result.solved;
                row.wall_s = run.result.wall_time_s;
                row.iterations = run.result.iterations;
                row.model_calls = run.result.model_calls;
                row.nodes = run.result.nodes_created;
                row.route = run.result.route ? run.result.route->to_json() : json(nullptr);
                rows[t] = std::move(row);
            }
        };
        if (workers == 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w) pool.emplace_back(work);
            for (auto& th : pool) th.join();
        }

        for (size_t t = 0; t < targets.size(); ++t) {
            if (pending[t] && out.is_open()) {
                out << rows[t].to_json().dump() << "\n";
                out.flush();
            }
            report.rows.push_back(rows[t]);
        }
    }

    // summaries against the first configuration
    auto rows_of = [&](const std::string& name) {
        std::map<std::string, const MultiStepRow*> by_target;
        for (const auto& r : report.rows)
            if (r.config_name == name) by_target[r.target] = &r;
        return by_target;
    };
    const auto base_rows = configs.empty() ? std::map<std::string, const MultiStepRow*>{}
                                           : rows_of(configs.front().name);
    for (const auto& ncfg : configs) {
        auto mine = rows_of(ncfg.name);
        MultiStepConfigSummary s;
        s.name = ncfg.name;
        s.targets = mine.size();
        double solved_time = 0.0;
        for (auto& [target, row] : mine) {
            s.total_wall_s += row->wall_s;
            s.total_model_calls += row->model_calls;
            if (row->solved) {
                ++s.solved;
                solved_time += row->wall_s;
            }
        }
        s.solved_pct = s.targets ? double(s.solved) / double(s.targets) : 0.0;
        s.avg_time_solved_s = s.solved ? solved_time / double(s.solved) : 0.0;
        double common_time = 0.0, common_iter = 0.0;
        for (auto& [target, row] : mine) {
            auto bit = base_rows.find(target);
            if (bit == base_rows.end() || !bit->second->solved || !row->solved) continue;
            ++s.common_solved;
            common_time += row->wall_s;
            common_iter += double(row->iterations);
        }
        if (s.common_solved) {
            s.avg_time_common_s = common_time / double(s.common_solved);
            s.avg_iterations_common = common_iter / double(s.common_solved);
        }
        report.configs.push_back(std::move(s));
    }
    return report;
}

inline std::string render_multi_step_table(const MultiStepReport& report) {
    std::ostringstream out;
    out << std::left << std::setw(24) << "configuration" << std::right << std::setw(10) << "solved"
        << std::setw(10) << "pct" << std::setw(12) << "time,s" << std::setw(14) << "avg/solved"
        << std::setw(12) << "common" << std::setw(14) << "avg/common" << std::setw(14)
        << "iters/common" << std::setw(12) << "calls" << "\n";
    for (const auto& c : report.configs) {
        out << std::left << std::setw(24) << c.name << std::right << std::setw(10) << c.solved
            << std::setw(9) << std::fixed << std::setprecision(1) << 100.0 * c.solved_pct << "%"
            << std::setw(12) << std::setprecision(1) << c.total_wall_s << std::setw(14)
            << std::setprecision(2) << c.avg_time_solved_s << std::setw(12) << c.common_solved
            << std::setw(14) << c.avg_time_common_s << std::setw(14) << std::setprecision(1)
            << c.avg_iterations_common << std::setw(12) << c.total_model_calls << "\n";
    }
    return out.str();
}

}  // namespace retrospec::bench
