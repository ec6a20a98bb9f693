#pragma once

// Multi-step retrosynthesis over an AND-OR tree: a molecule is solved
// when it is in stock or any of its reactions has all precursors solved.
// Search is either best-first on cumulative path cost (sum of -log p
// from the root, no learned value term) with a batched frontier pop, or
// depth-first in model-rank order. The search stops at the first route
// from the target to the stock, or at the iteration/time/call caps.

#include <optional>
#include <queue>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "retrospec/common.hpp"
#include "retrospec/decode.hpp"
#include "retrospec/smiles.hpp"

namespace retrospec::plan {

struct Stock {
    std::unordered_set<std::string> molecules;
    int64_t raw_count = 0;  // lines before deduplication

    bool contains(const std::string& m) const { return molecules.count(m) != 0; }
    size_t size() const { return molecules.size(); }

    static Stock from(const std::vector<std::string>& lines) {
        Stock s;
        for (const auto& raw : lines) {
            const std::string m = strip(raw);
            if (m.empty()) continue;
            ++s.raw_count;
            s.molecules.insert(m);
        }
        return s;
    }

    static Stock load(const std::string& path) { return from(read_lines(path)); }
};

inline bool in_stock(const std::string& molecule, const Stock& stock) {
    return stock.contains(molecule);
}

struct ReactionStep {
    std::string product;
    std::vector<std::string> precursors;
    double log_prob = 0.0;
    int rank = 0;  // 1-based rank among the model's K outputs
};

// Batched single-step expansion. One expand_batch over W molecules runs
// the underlying decodes in lockstep, so the shared forward passes are
// counted once.
class Expander {
public:
    virtual ~Expander() = default;
    virtual std::vector<std::vector<ReactionStep>> expand_batch(
        const std::vector<std::string>& molecules) = 0;
    virtual int64_t model_calls() const = 0;
};

// Post-processing of raw ranked predictions into reaction steps:
// syntactically invalid strings are dropped (and counted), precursor
// sets containing the product are dropped, duplicate precursor sets keep
// their best-ranked occurrence.
struct PredictionFilterStats {
    int64_t invalid = 0;
    int64_t self_loop = 0;
    int64_t duplicate = 0;
};

inline std::vector<ReactionStep> filter_predictions(
    const std::string& product, const std::vector<std::pair<std::string, double>>& ranked,
    PredictionFilterStats* stats = nullptr) {
    std::vector<ReactionStep> steps;
    std::set<std::vector<std::string>> seen;
    int rank = 0;
    for (const auto& [text, log_prob] : ranked) {
        ++rank;
        if (!smiles::validate_syntactic(text).valid) {
            if (stats) ++stats->invalid;
            continue;
        }
        std::vector<std::string> precursors;
        bool ok = true;
        for (auto& frag : split(text, '.')) {
            if (frag.empty()) {
                ok = false;
                break;
            }
            precursors.push_back(frag);
        }
        if (!ok || precursors.empty()) {
            if (stats) ++stats->invalid;
            continue;
        }
        bool self_loop = false;
        for (const auto& p : precursors)
            if (p == product) self_loop = true;
        if (self_loop) {
            if (stats) ++stats->self_loop;
            continue;
        }
        auto key = precursors;
        std::sort(key.begin(), key.end());
        if (seen.count(key)) {
            if (stats) ++stats->duplicate;
            continue;
        }
        seen.insert(key);
        steps.push_back({product, std::move(precursors), log_prob, rank});
    }
    return steps;
}

// Expansion through a decode backend: top-K hypotheses become candidate
// precursor sets. Decode failures (untokenizable molecule) yield an
// empty expansion.
class NeuralExpander : public Expander {
public:
    NeuralExpander(decode::Backend& backend, const smiles::Vocabulary& vocab,
                   decode::DecodeConfig cfg)
        : backend_(backend), vocab_(vocab), cfg_(std::move(cfg)) {}

    std::vector<std::vector<ReactionStep>> expand_batch(
        const std::vector<std::string>& molecules) override {
        std::vector<std::vector<int>> sources;
        std::vector<int> source_of(molecules.size(), -1);
        for (size_t i = 0; i < molecules.size(); ++i) {
            try {
                auto ids = vocab_.encode_string(molecules[i]);
                source_of[i] = int(sources.size());
                sources.push_back(std::move(ids));
            } catch (const smiles::tokenize_error&) {
                // untokenizable molecule: dead expansion
            }
        }
        std::vector<std::vector<ReactionStep>> out(molecules.size());
        if (sources.empty()) return out;
        auto batch = decode::decode_batch(backend_, sources, cfg_);
        metrics_.merge(batch.metrics);
        for (size_t i = 0; i < molecules.size(); ++i) {
            if (source_of[i] < 0) continue;
            std::vector<std::pair<std::string, double>> ranked;
            for (const auto& hyp : batch.per_source[size_t(source_of[i])])
                ranked.emplace_back(vocab_.decode_string(hyp.tokens), hyp.log_prob);
            out[i] = filter_predictions(molecules[i], ranked, &filter_stats_);
        }
        return out;
    }

    int64_t model_calls() const override { return metrics_.model_calls; }
    const decode::DecodeMetrics& metrics() const { return metrics_; }
    const PredictionFilterStats& filter_stats() const { return filter_stats_; }

private:
    decode::Backend& backend_;
    const smiles::Vocabulary& vocab_;
    decode::DecodeConfig cfg_;
    decode::DecodeMetrics metrics_;
    PredictionFilterStats filter_stats_;
};

inline std::vector<ReactionStep> expand(Expander& expander, const std::string& molecule) {
    return expander.expand_batch({molecule})[0];
}

struct PlanConfig {
    enum class algo { retro_star, dfs };
    algo algorithm = algo::retro_star;
    int max_depth = 5;
    int64_t max_iterations = 35000;
    double time_limit_s = 0.0;      // 0 = unlimited
    int beam_width = 1;             // frontier entries popped per iteration (retro*)
    int64_t model_call_budget = 0;  // 0 = unlimited

    void validate() const {
        if (max_depth < 1) throw config_error("max_depth must be >= 1");
        if (max_iterations < 1) throw config_error("max_iterations must be >= 1");
        if (beam_width < 1) throw config_error("beam_width must be >= 1");
        if (time_limit_s < 0 || model_call_budget < 0) throw config_error("negative limit");
    }
};

struct RouteTree {
    std::string molecule;
    bool in_stock = false;
    bool has_reaction = false;
    double reaction_log_prob = 0.0;
    int reaction_rank = 0;
    std::vector<RouteTree> children;

    double total_cost() const {
        double c = has_reaction ? -reaction_log_prob : 0.0;
        for (const auto& ch : children) c += ch.total_cost();
        return c;
    }

    bool all_leaves_in_stock() const {
        if (children.empty()) return in_stock;
        for (const auto& ch : children)
            if (!ch.all_leaves_in_stock()) return false;
        return true;
    }

    int depth() const {
        int d = 0;
        for (const auto& ch : children) d = std::max(d, ch.depth());
        return has_reaction ? d + 1 : d;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["molecule"] = molecule;
        j["in_stock"] = in_stock;
        if (has_reaction) {
            j["reaction"] = {{"log_prob", reaction_log_prob}, {"rank", reaction_rank}};
            nlohmann::json kids = nlohmann::json::array();
            for (const auto& ch : children) kids.push_back(ch.to_json());
            j["children"] = std::move(kids);
        }
        return j;
    }
};

struct PlanResult {
    bool solved = false;
    std::optional<RouteTree> route;
    int64_t iterations = 0;
    double wall_time_s = 0.0;
    int64_t model_calls = 0;
    int64_t nodes_created = 0;
    const char* stop_reason = "";
};

// ---- search tree ---------------------------------------------------------

struct SearchTree {
    struct Reaction {
        int product_node = -1;
        ReactionStep step;
        std::vector<int> children;  // molecule node ids
        int unsolved = 0;
        bool dead = false;
        bool solved() const { return unsolved == 0 && !dead; }
    };
    struct Node {
        std::string molecule;
        int depth = 0;        // shallowest discovery
        double cost = 0.0;    // cheapest root-path cost
        bool is_stock = false;
        bool solved = false;
        bool expanded = false;
        bool dead = false;
        int live_reactions = 0;
        std::vector<int> reactions;         // reactions expanding this node
        std::vector<int> parent_reactions;  // reactions this node feeds
        std::optional<RouteTree> witness;   // first complete route
    };

    std::vector<Node> nodes;
    std::vector<Reaction> reactions;
    std::unordered_map<std::string, int> registry;
    int root = -1;

    const Node& node(int id) const { return nodes[size_t(id)]; }
};

// Best-first frontier keyed by (cost, insertion order). Entries go stale
// when their node is expanded, solved, or re-keyed to a lower cost.
class Frontier {
public:
    void push(int node_id, double cost) {
        entries_.push(Entry{cost, seq_++, node_id});
    }

    // Pop up to `width` live open nodes, cheapest first, FIFO on ties.
    std::vector<int> pop_batch(const SearchTree& tree, int width) {
        std::vector<int> out;
        while (int(out.size()) < width && !entries_.empty()) {
            Entry e = entries_.top();
            entries_.pop();
            const auto& n = tree.node(e.node);
            if (n.expanded || n.solved || n.dead) continue;
            if (e.cost != n.cost) continue;  // stale: re-keyed cheaper
            bool dup = false;
            for (int got : out)
                if (got == e.node) dup = true;
            if (dup) continue;
            out.push_back(e.node);
        }
        return out;
    }

    bool empty_hint() const { return entries_.empty(); }

private:
    struct Entry {
        double cost;
        int64_t seq;
        int node;
        bool operator>(const Entry& o) const {
            if (cost != o.cost) return cost > o.cost;
            return seq > o.seq;
        }
    };
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> entries_;
    int64_t seq_ = 0;
};

namespace detail {

class Search {
public:
    Search(const std::string& target, Expander& expander, const Stock& stock,
           const PlanConfig& cfg)
        : expander_(expander), stock_(stock), cfg_(cfg) {
        cfg_.validate();
        if (target.empty()) throw config_error("empty target molecule");
        root_in_stock_ = stock_.contains(target);
        const int root = make_node(target, 0, 0.0);
        tree_.root = root;
    }

    PlanResult run() {
        stopwatch clock;
        const int64_t calls_at_start = expander_.model_calls();
        PlanResult result;
        if (root_in_stock_) {
            result.solved = true;
            result.route = tree_.nodes[size_t(tree_.root)].witness;
            result.stop_reason = "target in stock";
            return result;
        }

        while (true) {
            auto& root = tree_.nodes[size_t(tree_.root)];
            if (root.solved) {
                result.stop_reason = "solved";
                break;
            }
            if (root.dead) {
                result.stop_reason = "exhausted";
                break;
            }
            if (result.iterations >= cfg_.max_iterations) {
                result.stop_reason = "iteration cap";
                break;
            }
            if (cfg_.time_limit_s > 0 && clock.seconds() >= cfg_.time_limit_s) {
                result.stop_reason = "time limit";
                break;
            }
            if (cfg_.model_call_budget > 0 &&
                expander_.model_calls() - calls_at_start >= cfg_.model_call_budget) {
                result.stop_reason = "call budget";
                break;
            }

            std::vector<int> batch = cfg_.algorithm == PlanConfig::algo::dfs
                                         ? pop_deepest()
                                         : frontier_.pop_batch(tree_, cfg_.beam_width);
            if (batch.empty()) {
                result.stop_reason = "frontier exhausted";
                break;
            }
            ++result.iterations;

            std::vector<std::string> molecules;
            for (int id : batch) molecules.push_back(tree_.nodes[size_t(id)].molecule);
            auto expansions = expander_.expand_batch(molecules);
            for (size_t i = 0; i < batch.size(); ++i)
                apply_expansion(batch[i], expansions[i]);
        }

        auto& root = tree_.nodes[size_t(tree_.root)];
        result.solved = root.solved;
        if (root.solved) result.route = root.witness;
        result.wall_time_s = clock.seconds();
        result.model_calls = expander_.model_calls() - calls_at_start;
        result.nodes_created = int64_t(tree_.nodes.size());
        return result;
    }

    const SearchTree& tree() const { return tree_; }
    Frontier& frontier() { return frontier_; }

private:
    int make_node(const std::string& molecule, int depth, double cost) {
        auto it = tree_.registry.find(molecule);
        if (it != tree_.registry.end()) return it->second;
        SearchTree::Node n;
        n.molecule = molecule;
        n.depth = depth;
        n.cost = cost;
        n.is_stock = stock_.contains(molecule);
        if (n.is_stock) {
            n.solved = true;
            RouteTree leaf;
            leaf.molecule = molecule;
            leaf.in_stock = true;
            n.witness = std::move(leaf);
        }
        const int id = int(tree_.nodes.size());
        tree_.nodes.push_back(std::move(n));
        tree_.registry[molecule] = id;
        if (!tree_.nodes[size_t(id)].solved && depth < cfg_.max_depth) enqueue(id);
        return id;
    }

    void enqueue(int id) {
        const auto& n = tree_.nodes[size_t(id)];
        if (cfg_.algorithm == PlanConfig::algo::dfs)
            dfs_frontier_.insert({-n.depth, dfs_seq_++, id});
        else
            frontier_.push(id, n.cost);
    }

    std::vector<int> pop_deepest() {
        while (!dfs_frontier_.empty()) {
            auto it = dfs_frontier_.begin();
            const int id = std::get<2>(*it);
            dfs_frontier_.erase(it);
            const auto& n = tree_.nodes[size_t(id)];
            if (n.expanded || n.solved || n.dead) continue;
            return {id};
        }
        return {};
    }

    void apply_expansion(int node_id, const std::vector<ReactionStep>& steps) {
        auto& node = tree_.nodes[size_t(node_id)];
        if (node.expanded || node.solved || node.dead) return;
        node.expanded = true;
        if (steps.empty()) {
            kill_node(node_id);
            return;
        }
        for (const auto& step : steps) attach_reaction(node_id, step);
        if (!tree_.nodes[size_t(node_id)].solved &&
            tree_.nodes[size_t(node_id)].live_reactions == 0)
            kill_node(node_id);
    }

    void attach_reaction(int product_id, const ReactionStep& step) {
        const int rid = int(tree_.reactions.size());
        tree_.reactions.push_back({});
        auto& r = tree_.reactions[size_t(rid)];
        r.product_node = product_id;
        r.step = step;

        auto& product = tree_.nodes[size_t(product_id)];
        const int child_depth = product.depth + 1;
        const double child_cost = product.cost - step.log_prob;
        product.reactions.push_back(rid);
        ++product.live_reactions;

        bool any_dead = false;
        for (const auto& precursor : step.precursors) {
            const int cid = resolve_child(precursor, child_depth, child_cost);
            r.children.push_back(cid);
            auto& child = tree_.nodes[size_t(cid)];
            child.parent_reactions.push_back(rid);
            if (child.dead) any_dead = true;
            if (!child.solved) ++r.unsolved;
        }
        if (any_dead) {
            kill_reaction(rid);
            return;
        }
        if (r.unsolved == 0) complete_reaction(rid);
    }

    int resolve_child(const std::string& molecule, int depth, double cost) {
        auto it = tree_.registry.find(molecule);
        if (it == tree_.registry.end()) return make_node(molecule, depth, cost);
        const int id = it->second;
        auto& n = tree_.nodes[size_t(id)];
        // cheaper rediscovery re-keys an open node; shallower rediscovery
        // can make a depth-capped node expandable
        const bool was_expandable = n.depth < cfg_.max_depth;
        if (depth < n.depth) n.depth = depth;
        if (!n.expanded && !n.solved && !n.dead) {
            if (cost < n.cost) {
                n.cost = cost;
                enqueue(id);
            } else if (!was_expandable && n.depth < cfg_.max_depth) {
                enqueue(id);
            }
        }
        return id;
    }

    void complete_reaction(int rid) {
        auto& r = tree_.reactions[size_t(rid)];
        if (r.dead) return;
        auto& product = tree_.nodes[size_t(r.product_node)];
        if (product.solved) return;
        product.solved = true;
        RouteTree route;
        route.molecule = product.molecule;
        route.in_stock = product.is_stock;
        route.has_reaction = true;
        route.reaction_log_prob = r.step.log_prob;
        route.reaction_rank = r.step.rank;
        for (int cid : r.children) route.children.push_back(*tree_.nodes[size_t(cid)].witness);
        product.witness = std::move(route);
        // propagate upward
        for (int pr : product.parent_reactions) {
            auto& parent = tree_.reactions[size_t(pr)];
            if (parent.dead) continue;
            if (--parent.unsolved == 0) complete_reaction(pr);
        }
    }

    void kill_reaction(int rid) {
        auto& r = tree_.reactions[size_t(rid)];
        if (r.dead) return;
        r.dead = true;
        auto& product = tree_.nodes[size_t(r.product_node)];
        if (--product.live_reactions == 0 && product.expanded && !product.solved)
            kill_node(r.product_node);
    }

    void kill_node(int node_id) {
        auto& n = tree_.nodes[size_t(node_id)];
        if (n.dead || n.solved) return;
        n.dead = true;
        for (int pr : n.parent_reactions) kill_reaction(pr);
    }

    Expander& expander_;
    const Stock& stock_;
    PlanConfig cfg_;
    SearchTree tree_;
    Frontier frontier_;
    std::set<std::tuple<int, int64_t, int>> dfs_frontier_;  // (-depth, seq, node)
    int64_t dfs_seq_ = 0;
    bool root_in_stock_ = false;
};

}  // namespace detail

struct PlanRun {
    PlanResult result;
    SearchTree tree;
};

inline PlanRun plan_target(const std::string& target, Expander& expander, const Stock& stock,
                           const PlanConfig& cfg) {
    detail::Search search(target, expander, stock, cfg);
    PlanRun run;
    run.result = search.run();
    run.tree = search.tree();
    return run;
}

inline PlanResult retro_star(const std::string& target, Expander& expander, const Stock& stock,
                             PlanConfig cfg) {
    cfg.algorithm = PlanConfig::algo::retro_star;
    return plan_target(target, expander, stock, cfg).result;
}

inline PlanResult dfs_plan(const std::string& target, Expander& expander, const Stock& stock,
                           PlanConfig cfg) {
    cfg.algorithm = PlanConfig::algo::dfs;
    return plan_target(target, expander, stock, cfg).result;
}

// Up to `limit` distinct solved routes for the target, cheapest total
// cost first. Only complete routes (all leaves in stock) are
// enumerated; reactions revisiting an ancestor molecule are skipped.
inline std::vector<RouteTree> extract_solved_routes(const SearchTree& tree, int limit) {
    if (tree.root < 0 || limit <= 0) return {};

    struct Enumerator {
        const SearchTree& tree;
        int limit;

        std::vector<RouteTree> routes_for(int node_id, std::set<std::string>& ancestors) {
            const auto& n = tree.node(node_id);
            std::vector<RouteTree> out;
            if (n.is_stock) {
                RouteTree leaf;
                leaf.molecule = n.molecule;
                leaf.in_stock = true;
                out.push_back(std::move(leaf));
                return out;
            }
            if (!n.solved) return out;
            ancestors.insert(n.molecule);
            for (int rid : n.reactions) {
                const auto& r = tree.reactions[size_t(rid)];
                if (!r.solved()) continue;
                bool cyclic = false;
                for (int cid : r.children)
                    if (ancestors.count(tree.node(cid).molecule)) cyclic = true;
                if (cyclic) continue;
                // cross-product of child route lists, beam-limited
                std::vector<std::vector<RouteTree>> partial = {{}};
                for (int cid : r.children) {
                    auto child_routes = routes_for(cid, ancestors);
                    if (child_routes.empty()) {
                        partial.clear();
                        break;
                    }
                    std::vector<std::vector<RouteTree>> next;
                    for (const auto& pre : partial)
                        for (const auto& cr : child_routes) {
                            auto copy = pre;
                            copy.push_back(cr);
                            if (int(next.size()) < limit * 4) next.push_back(std::move(copy));
                        }
                    partial = std::move(next);
                }
                for (auto& combo : partial) {
                    RouteTree route;
                    route.molecule = n.molecule;
                    route.in_stock = n.is_stock;
                    route.has_reaction = true;
                    route.reaction_log_prob = r.step.log_prob;
                    route.reaction_rank = r.step.rank;
                    route.children = std::move(combo);
                    out.push_back(std::move(route));
                }
            }
            ancestors.erase(n.molecule);
            std::sort(out.begin(), out.end(), [](const RouteTree& a, const RouteTree& b) {
                return a.total_cost() < b.total_cost();
            });
            if (int(out.size()) > limit) out.resize(size_t(limit));
            return out;
        }
    };

    Enumerator e{tree, limit};
    std::set<std::string> ancestors;
    auto routes = e.routes_for(tree.root, ancestors);
    if (int(routes.size()) > limit) routes.resize(size_t(limit));
    return routes;
}

}  // namespace retrospec::plan
