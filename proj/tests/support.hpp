#pragma once

// Shared test fixtures: a scripted function backend, an independent
// naive beam-search reference, a brute-force verification oracle, and a
// backend whose lookahead heads echo the main head's greedy rollout.

#include <functional>

#include "retrospec/decode.hpp"
#include "retrospec/model.hpp"

namespace testsupport {

using retrospec::decode::Backend;

// Backend driven by a function (src, prefix-with-bos) -> per-head logits
// (head 0 = main, then extra heads). Caches are literal token prefixes.
class FnBackend : public Backend {
public:
    using LogitsFn = std::function<std::vector<std::vector<double>>(
        const std::vector<int>& src, const std::vector<int>& prefix)>;

    FnBackend(int vocab, int extra, int max_len, LogitsFn fn)
        : vocab_(vocab), extra_(extra), max_len_(max_len), fn_(std::move(fn)) {}

    int vocab_size() const override { return vocab_; }
    int extra_heads() const override { return extra_; }
    int max_len() const override { return max_len_; }

    int encode(const std::vector<int>& src) override {
        sources_.push_back(src);
        return int(sources_.size()) - 1;
    }
    void release_source(int) override {}

    int new_cache(int src) override {
        caches_.push_back({src, {}});
        return int(caches_.size()) - 1;
    }
    int clone_cache(int cache) override {
        caches_.push_back(caches_.at(size_t(cache)));
        return int(caches_.size()) - 1;
    }
    void truncate_cache(int cache, int len) override {
        auto& c = caches_.at(size_t(cache)).prefix;
        if (int(c.size()) > len) c.resize(size_t(len));
    }
    int cache_len(int cache) const override {
        return int(caches_.at(size_t(cache)).prefix.size());
    }
    void free_cache(int) override {}

    std::vector<RowOut> step(std::span<const Row> rows) override {
        std::vector<RowOut> outs(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) {
            auto& cache = caches_.at(size_t(rows[i].cache));
            const auto& src = sources_.at(size_t(cache.src));
            RowOut& out = outs[i];
            for (int tok : rows[i].tokens) {
                cache.prefix.push_back(tok);
                auto heads = fn_(src, cache.prefix);
                out.main.push_back(heads.at(0));
                if (rows[i].want_extra) {
                    out.extra_last.assign(heads.begin() + 1, heads.end());
                }
            }
        }
        return outs;
    }

private:
    struct Cache {
        int src;
        std::vector<int> prefix;
    };
    int vocab_, extra_, max_len_;
    LogitsFn fn_;
    std::vector<std::vector<int>> sources_;
    std::vector<Cache> caches_;
};

// Independent beam-search reference: no caches, no incremental steps;
// every step recomputes the full prefix and expands all vocabulary
// tokens (pad excluded, as in the engine). Finished hypotheses pass
// through the pool; ties break on lexicographic token order.
template <typename S>
std::vector<retrospec::decode::Hypothesis> naive_beam_search(
    const retrospec::model::ModelParameters<S>& params, const std::vector<int>& src, int beam_size,
    int max_len) {
    using retrospec::decode::Hypothesis;
    namespace smiles = retrospec::smiles;
    std::vector<Hypothesis> beams = {Hypothesis{}};
    while (true) {
        bool all_done = true;
        for (const auto& b : beams)
            if (!b.finished) all_done = false;
        if (all_done) break;

        std::vector<Hypothesis> pool;
        for (const auto& b : beams) {
            if (b.finished) {
                pool.push_back(b);
                continue;
            }
            std::vector<int> dec_in = {smiles::bos_id};
            dec_in.insert(dec_in.end(), b.tokens.begin(), b.tokens.end());
            auto block = retrospec::model::forward(params, {src}, {dec_in});
            auto lp = retrospec::nn::log_softmax_row(
                block.rows[0][0].row(Eigen::Index(dec_in.size()) - 1));
            for (int v = 0; v < int(lp.size()); ++v) {
                if (v == smiles::pad_id) continue;
                Hypothesis h;
                h.tokens = b.tokens;
                h.tokens.push_back(v);
                h.log_prob = b.log_prob + lp[size_t(v)];
                h.finished = (v == smiles::eos_id) || int(h.tokens.size()) >= max_len;
                pool.push_back(std::move(h));
            }
        }
        std::sort(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            return a.tokens < b.tokens;
        });
        if (int(pool.size()) > beam_size) pool.resize(size_t(beam_size));
        beams = std::move(pool);
    }
    std::sort(beams.begin(), beams.end(), [](const Hypothesis& a, const Hypothesis& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        return a.tokens < b.tokens;
    });
    return beams;
}

// Brute-force top-p verification oracle: sort tokens by descending
// probability with the draft token ahead of equal-probability peers,
// walk the prefix sum up to and including it.
inline int oracle_accepted_count(const std::vector<std::vector<double>>& probs,
                                 const std::vector<int>& draft, double p) {
    int accepted = 0;
    for (size_t i = 0; i < draft.size(); ++i) {
        const auto& dist = probs[i];
        const int tok = draft[i];
        std::vector<int> order(dist.size());
        for (size_t v = 0; v < order.size(); ++v) order[v] = int(v);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (dist[size_t(a)] != dist[size_t(b)]) return dist[size_t(a)] > dist[size_t(b)];
            // the draft token precedes equal-probability peers
            if ((a == tok) != (b == tok)) return a == tok;
            return a < b;
        });
        double cum = 0.0;
        bool inside = false;
        for (int v : order) {
            cum += dist[size_t(v)];
            if (v == tok) {
                inside = cum < p;
                break;
            }
        }
        const bool is_argmax = (order[0] == tok);
        if (!(inside || is_argmax)) break;
        accepted = int(i) + 1;
    }
    return accepted;
}

// Model-backed backend whose lookahead heads report the main head's
// greedy rollout as one-hot logits. Rollout compute happens out of band,
// so the engine's call accounting is unaffected.
template <typename S>
class GreedyEchoBackend : public Backend {
public:
    GreedyEchoBackend(const retrospec::model::ModelParameters<S>& params, int echo_heads)
        : inner_(params), echo_heads_(echo_heads), vocab_(params.config.vocab_size) {}

    int vocab_size() const override { return vocab_; }
    int extra_heads() const override { return echo_heads_; }
    int max_len() const override { return inner_.max_len(); }

    int encode(const std::vector<int>& src) override { return inner_.encode(src); }
    void release_source(int src) override { inner_.release_source(src); }
    int new_cache(int src) override { return inner_.new_cache(src); }
    int clone_cache(int cache) override { return inner_.clone_cache(cache); }
    void truncate_cache(int cache, int len) override { inner_.truncate_cache(cache, len); }
    int cache_len(int cache) const override { return inner_.cache_len(cache); }
    void free_cache(int cache) override { inner_.free_cache(cache); }

    std::vector<RowOut> step(std::span<const Row> rows) override {
        std::vector<Row> plain(rows.begin(), rows.end());
        for (auto& r : plain) r.want_extra = false;
        auto outs = inner_.step(plain);
        for (size_t i = 0; i < rows.size(); ++i) {
            if (!rows[i].want_extra) continue;
            // greedy rollout from the state after this row's tokens
            int scratch = inner_.clone_cache(rows[i].cache);
            std::vector<double> dist = outs[i].main.back();
            for (int k = 0; k < echo_heads_; ++k) {
                int argmax = 0;
                for (size_t v = 1; v < dist.size(); ++v)
                    if (dist[v] > dist[size_t(argmax)]) argmax = int(v);
                std::vector<double> onehot(dist.size(), -1e9);
                onehot[size_t(argmax)] = 0.0;
                outs[i].extra_last.push_back(onehot);
                if (argmax == retrospec::smiles::eos_id ||
                    inner_.cache_len(scratch) + 1 >= inner_.max_len()) {
                    // path ended; remaining heads keep echoing eos
                    dist.assign(dist.size(), -1e9);
                    dist[retrospec::smiles::eos_id] = 0.0;
                } else {
                    Row r{scratch, {argmax}, false};
                    auto out = inner_.step(std::span<const Row>(&r, 1));
                    dist = out[0].main.back();
                }
            }
            inner_.free_cache(scratch);
        }
        return outs;
    }

private:
    retrospec::decode::TransformerBackend<S> inner_;
    int echo_heads_;
    int vocab_;
};

inline retrospec::model::ModelConfig random_toy_config(uint64_t seed) {
    retrospec::model::ModelConfig c;
    c.layers_enc = 2;
    c.layers_dec = 2;
    c.attn_heads = 4;
    c.d_model = 32;
    c.d_ff = 64;
    c.medusa_heads = 0;
    c.vocab_size = 16;
    c.max_len = 48;
    c.seed = seed;
    return c;
}

}  // namespace testsupport
