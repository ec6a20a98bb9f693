#pragma once

// Generation strategies over an abstract decoder backend: beam search
// (standard and optimized), speculative beam search with heuristic
// query-fragment drafts (hsbs) and with lookahead-head drafts (msbs).
//
// A "model call" is one batched decoder forward pass; its effective
// batch size is the number of sequence rows in the pass. A speculative
// cycle takes two calls: one to produce drafts, one to verify them and
// expand candidates. Sessions for several sources run in lockstep so
// one call carries rows from every live session.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <thread>

#include "retrospec/common.hpp"
#include "retrospec/model.hpp"
#include "retrospec/smiles.hpp"

namespace retrospec::decode {

enum class strategy { bs, bs_opt, hsbs, msbs };

inline const char* to_string(strategy s) {
    switch (s) {
        case strategy::bs: return "bs";
        case strategy::bs_opt: return "bs-opt";
        case strategy::hsbs: return "hsbs";
        case strategy::msbs: return "msbs";
    }
    return "?";
}

inline strategy parse_strategy(std::string_view s) {
    if (s == "bs") return strategy::bs;
    if (s == "bs-opt") return strategy::bs_opt;
    if (s == "hsbs") return strategy::hsbs;
    if (s == "msbs") return strategy::msbs;
    throw config_error("unknown strategy: " + std::string(s) +
                       " (expected bs, bs-opt, hsbs, msbs)");
}

struct DecodeConfig {
    strategy strat = strategy::bs;
    int beam_size = 10;       // K
    int max_len = 128;        // output length cap, eos included
    double nucleus_p = 0.9975;
    int draft_len = 20;
    int n_drafts = 10;        // heuristic drafting only
    bool optimized = false;   // plain beam search: skip pad-feeding of finished rows

    void validate() const {
        if (beam_size < 1) throw config_error("beam_size must be >= 1");
        if (max_len < 1) throw config_error("max_len must be >= 1");
        if (nucleus_p < 0.0 || nucleus_p > 1.0) throw config_error("nucleus_p must be in [0,1]");
        if (draft_len < 1) throw config_error("draft_len must be >= 1");
        if (n_drafts < 1) throw config_error("n_drafts must be >= 1");
    }
};

struct DecodeMetrics {
    int64_t model_calls = 0;
    // drafted/accepted are counted at the commit verification (the
    // selection pass of heuristic drafting does not count)
    int64_t drafted_tokens = 0;
    int64_t accepted_tokens = 0;
    int64_t sbs_cycles = 0;
    std::vector<int> rows_per_call;
    double wall_time_s = 0.0;

    double acceptance_rate() const {
        return drafted_tokens > 0 ? double(accepted_tokens) / double(drafted_tokens) : 0.0;
    }
    double mean_effective_batch() const {
        if (rows_per_call.empty()) return 0.0;
        double s = 0;
        for (int r : rows_per_call) s += r;
        return s / double(rows_per_call.size());
    }
    void merge(const DecodeMetrics& o) {
        model_calls += o.model_calls;
        drafted_tokens += o.drafted_tokens;
        accepted_tokens += o.accepted_tokens;
        sbs_cycles += o.sbs_cycles;
        rows_per_call.insert(rows_per_call.end(), o.rows_per_call.begin(), o.rows_per_call.end());
        wall_time_s += o.wall_time_s;
    }
};

struct Hypothesis {
    std::vector<int> tokens;  // generated ids; ends with eos when finished naturally
    double log_prob = 0.0;
    bool finished = false;
};

struct Draft {
    std::vector<int> tokens;
    enum class origin { query_fragment, lookahead_heads } provenance = origin::query_fragment;
};

struct VerificationResult {
    int accepted = 0;
    int bonus = -1;                // argmax after the accepted prefix, -1 if unknown
    std::vector<uint8_t> flags;    // per-position acceptance, a prefix of ones
};

// ---- verification -----------------------------------------------------

// Top-p draft verification. Position i is accepted iff the cumulative
// probability down the descending-sorted distribution, up to and
// including draft[i], stays below p, or draft[i] is the argmax. Among
// equal probabilities the draft token sorts first, so the cumulative is
// the strictly-more-probable mass plus the token's own. Acceptance stops
// at the first rejection.
inline VerificationResult verify_draft(const std::vector<std::vector<double>>& probs,
                                       const std::vector<int>& draft, double p) {
    if (probs.size() < draft.size())
        throw error("verify_draft: need one distribution per draft position");
    VerificationResult res;
    res.flags.assign(draft.size(), 0);
    for (size_t i = 0; i < draft.size(); ++i) {
        const auto& dist = probs[i];
        const int tok = draft[i];
        if (tok < 0 || size_t(tok) >= dist.size()) break;
        double max_p = dist[0];
        for (double v : dist) max_p = std::max(max_p, v);
        // strictly-more-probable mass, summed in descending (prob, id) order
        std::vector<int> above;
        for (size_t v = 0; v < dist.size(); ++v)
            if (dist[v] > dist[size_t(tok)]) above.push_back(int(v));
        std::sort(above.begin(), above.end(), [&](int a, int b) {
            if (dist[size_t(a)] != dist[size_t(b)]) return dist[size_t(a)] > dist[size_t(b)];
            return a < b;
        });
        double cum = 0.0;
        for (int v : above) cum += dist[size_t(v)];
        cum += dist[size_t(tok)];
        const bool ok = (cum < p) || (dist[size_t(tok)] == max_p);
        if (!ok) break;
        res.flags[i] = 1;
        res.accepted = int(i) + 1;
    }
    if (size_t(res.accepted) < probs.size()) {
        const auto& dist = probs[size_t(res.accepted)];
        int argmax = 0;
        for (size_t v = 1; v < dist.size(); ++v)
            if (dist[v] > dist[size_t(argmax)]) argmax = int(v);
        res.bonus = argmax;
    }
    return res;
}

// ---- drafting ---------------------------------------------------------

// Query fragments as drafts: up to n fragments starting right after an
// occurrence of the last committed token in the source; evenly spaced
// offsets fill the remainder when there are not enough occurrences.
inline std::vector<Draft> extract_query_drafts(const std::vector<int>& src_tokens,
                                               int committed_tail_token, int n, int draft_len) {
    if (n < 1) throw error("extract_query_drafts: n must be >= 1");
    std::vector<Draft> drafts;
    if (src_tokens.empty()) return drafts;
    auto push_fragment = [&](size_t start) {
        if (start >= src_tokens.size()) return;
        Draft d;
        d.provenance = Draft::origin::query_fragment;
        const size_t end = std::min(src_tokens.size(), start + size_t(draft_len));
        d.tokens.assign(src_tokens.begin() + long(start), src_tokens.begin() + long(end));
        if (d.tokens.empty()) return;
        for (const auto& existing : drafts)
            if (existing.tokens == d.tokens) return;
        drafts.push_back(std::move(d));
    };
    if (committed_tail_token >= 0) {
        for (size_t i = 0; i < src_tokens.size() && int(drafts.size()) < n; ++i)
            if (src_tokens[i] == committed_tail_token) push_fragment(i + 1);
    }
    if (int(drafts.size()) < n) {
        const int n_fill = n - int(drafts.size());
        for (int j = 0; j < n_fill; ++j) {
            const size_t start = size_t(int64_t(j) * int64_t(src_tokens.size()) / n_fill);
            push_fragment(start);
        }
    }
    return drafts;
}

// Greedy one-draft generation from the lookahead heads: draft[k] is the
// argmax of head k (head 0 = main) at the last committed position, so
// draft position k sits k+1 tokens ahead. Cut at the first eos/pad.
inline Draft medusa_draft(const std::vector<std::vector<double>>& head_logits, int draft_len) {
    Draft d;
    d.provenance = Draft::origin::lookahead_heads;
    const int n = std::min<int>(draft_len, int(head_logits.size()));
    for (int k = 0; k < n; ++k) {
        const auto& row = head_logits[size_t(k)];
        int argmax = 0;
        for (size_t v = 1; v < row.size(); ++v)
            if (row[v] > row[size_t(argmax)]) argmax = int(v);
        if (argmax == smiles::eos_id || argmax == smiles::pad_id) break;
        d.tokens.push_back(argmax);
    }
    return d;
}

// ---- backend ----------------------------------------------------------

// One batched forward pass over rows of (cache, new tokens) is one model
// call. Logits come back as raw scores; the engine normalizes.
class Backend {
public:
    struct Row {
        int cache = -1;
        std::vector<int> tokens;
        bool want_extra = false;  // lookahead-head logits at the last new position
    };
    struct RowOut {
        std::vector<std::vector<double>> main;        // [new position][V]
        std::vector<std::vector<double>> extra_last;  // [extra head][V]
    };

    virtual ~Backend() = default;
    virtual int vocab_size() const = 0;
    virtual int extra_heads() const = 0;
    virtual int max_len() const = 0;

    virtual int encode(const std::vector<int>& src_ids) = 0;
    virtual void release_source(int src) = 0;

    virtual int new_cache(int src) = 0;
    virtual int clone_cache(int cache) = 0;
    virtual void truncate_cache(int cache, int len) = 0;
    virtual int cache_len(int cache) const = 0;
    virtual void free_cache(int cache) = 0;

    virtual std::vector<RowOut> step(std::span<const Row> rows) = 0;
};

// Transformer-backed implementation. Rows are independent, so step() may
// fan out across threads without changing any output.
template <typename S = float>
class TransformerBackend : public Backend {
public:
    explicit TransformerBackend(const model::ModelParameters<S>& params, int threads = 1)
        : params_(params), threads_(std::max(1, threads)) {}

    int vocab_size() const override { return params_.config.vocab_size; }
    int extra_heads() const override { return params_.config.medusa_heads; }
    int max_len() const override { return params_.config.max_len; }

    int encode(const std::vector<int>& src_ids) override {
        const int id = take_slot(enc_free_, enc_states_);
        enc_states_[size_t(id)] =
            std::make_unique<model::EncState<S>>(model::encode(params_, std::span<const int>(src_ids)));
        return id;
    }

    void release_source(int src) override { drop_slot(enc_free_, enc_states_, src); }

    int new_cache(int src) override {
        const int id = take_slot(cache_free_, caches_);
        caches_[size_t(id)] = std::make_unique<CacheSlot>();
        caches_[size_t(id)]->src = src;
        caches_[size_t(id)]->cache = model::make_cache(params_);
        return id;
    }

    int clone_cache(int cache) override {
        const int id = take_slot(cache_free_, caches_);
        caches_[size_t(id)] = std::make_unique<CacheSlot>(*slot(cache));
        return id;
    }

    void truncate_cache(int cache, int len) override { slot(cache)->cache.truncate(len); }
    int cache_len(int cache) const override { return slot(cache)->cache.len; }
    void free_cache(int cache) override { drop_slot(cache_free_, caches_, cache); }

    std::vector<RowOut> step(std::span<const Row> rows) override {
        std::vector<RowOut> outs(rows.size());
        auto run = [&](size_t i) {
            const Row& row = rows[i];
            auto* cs = slot(row.cache);
            const auto& enc = *enc_states_.at(size_t(cs->src));
            auto logits = model::decode_step(params_, enc, cs->cache,
                                             std::span<const int>(row.tokens),
                                             row.want_extra ? model::extra_heads_mode::last_only
                                                            : model::extra_heads_mode::none);
            RowOut& out = outs[i];
            out.main.resize(size_t(logits.main.rows()));
            for (Eigen::Index r = 0; r < logits.main.rows(); ++r) {
                out.main[size_t(r)].resize(size_t(logits.main.cols()));
                for (Eigen::Index v = 0; v < logits.main.cols(); ++v)
                    out.main[size_t(r)][size_t(v)] = double(logits.main(r, v));
            }
            out.extra_last.resize(logits.extra.size());
            for (size_t m = 0; m < logits.extra.size(); ++m) {
                const auto& em = logits.extra[m];
                out.extra_last[m].resize(size_t(em.cols()));
                for (Eigen::Index v = 0; v < em.cols(); ++v)
                    out.extra_last[m][size_t(v)] = double(em(em.rows() - 1, v));
            }
        };
        if (threads_ == 1 || rows.size() < 4) {
            for (size_t i = 0; i < rows.size(); ++i) run(i);
        } else {
            std::vector<std::thread> pool;
            const int T = threads_;
            for (int t = 0; t < T; ++t)
                pool.emplace_back([&, t]() {
                    for (size_t i = size_t(t); i < rows.size(); i += size_t(T)) run(i);
                });
            for (auto& th : pool) th.join();
        }
        return outs;
    }

private:
    struct CacheSlot {
        int src = -1;
        model::DecCache<S> cache;
    };

    template <typename T>
    static int take_slot(std::vector<int>& free_list, std::vector<std::unique_ptr<T>>& slots) {
        if (!free_list.empty()) {
            int id = free_list.back();
            free_list.pop_back();
            return id;
        }
        slots.emplace_back(nullptr);
        return int(slots.size()) - 1;
    }

    template <typename T>
    static void drop_slot(std::vector<int>& free_list, std::vector<std::unique_ptr<T>>& slots,
                          int id) {
        slots.at(size_t(id)).reset();
        free_list.push_back(id);
    }

    CacheSlot* slot(int id) { return caches_.at(size_t(id)).get(); }
    const CacheSlot* slot(int id) const { return caches_.at(size_t(id)).get(); }

    const model::ModelParameters<S>& params_;
    int threads_;
    std::vector<std::unique_ptr<model::EncState<S>>> enc_states_;
    std::vector<int> enc_free_;
    std::vector<std::unique_ptr<CacheSlot>> caches_;
    std::vector<int> cache_free_;
};

// ---- candidate pooling -------------------------------------------------

namespace detail {

struct Candidate {
    std::vector<int> tokens;
    double log_prob = 0.0;
    bool finished = false;
    int slot = -1;        // -1: pass-through of an already finished slot
    int prefix_len = 0;   // accepted draft tokens used
    int continuation = -1;
};

inline bool candidate_order(const Candidate& a, const Candidate& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;  // deterministic tie-break: lexicographic ids
}

// Candidates for one beam given the main-head log-prob distributions
// dists[0..a] along the accepted draft prefix: top-K one-token
// continuations at every accepted length. A continuation that merely
// replays the next accepted draft token is absorbed by the longer
// candidates it prefixes.
inline std::vector<Candidate> build_slot_candidates(
    const std::vector<int>& slot_tokens, double slot_log_prob, int slot_index,
    const std::vector<std::vector<double>>& dists, const std::vector<int>& draft, int accepted,
    int beam_size, int max_len) {
    std::vector<Candidate> out;
    double prefix_lp = slot_log_prob;
    for (int j = 0; j <= accepted; ++j) {
        if (int(slot_tokens.size()) + j + 1 > max_len) break;
        const auto& lp = dists[size_t(j)];
        std::vector<int> ids;
        ids.reserve(lp.size());
        for (size_t v = 0; v < lp.size(); ++v)
            if (int(v) != smiles::pad_id) ids.push_back(int(v));  // pad is never generated
        const size_t keep = std::min(ids.size(), size_t(beam_size));
        std::partial_sort(ids.begin(), ids.begin() + long(keep), ids.end(),
                          [&](int a, int b) {
                              if (lp[size_t(a)] != lp[size_t(b)]) return lp[size_t(a)] > lp[size_t(b)];
                              return a < b;
                          });
        for (size_t r = 0; r < keep; ++r) {
            const int c = ids[r];
            if (j < accepted && c == draft[size_t(j)]) continue;  // absorbed into longer chain
            Candidate cand;
            cand.slot = slot_index;
            cand.prefix_len = j;
            cand.continuation = c;
            cand.tokens.reserve(slot_tokens.size() + size_t(j) + 1);
            cand.tokens = slot_tokens;
            cand.tokens.insert(cand.tokens.end(), draft.begin(), draft.begin() + j);
            cand.tokens.push_back(c);
            cand.log_prob = prefix_lp + lp[size_t(c)];
            cand.finished = (c == smiles::eos_id) || (int(cand.tokens.size()) >= max_len);
            out.push_back(std::move(cand));
        }
        if (j < accepted) prefix_lp += dists[size_t(j)][size_t(draft[size_t(j)])];
    }
    return out;
}

// Global pool selection: identical token sequences keep their best score,
// then the top beam_size candidates win.
inline std::vector<Candidate> select_top(std::vector<Candidate> pool, int beam_size) {
    std::sort(pool.begin(), pool.end(), candidate_order);
    std::vector<Candidate> out;
    std::map<std::vector<int>, bool> seen;
    for (auto& c : pool) {
        if (int(out.size()) >= beam_size) break;
        if (seen.count(c.tokens)) continue;
        seen[c.tokens] = true;
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace detail

// ---- decode session -----------------------------------------------------

// One source, one strategy. The session exposes the rows it needs for
// its next model call; a driver pools rows across sessions, runs one
// backend step, and hands each session its outputs.
class DecodeSession {
public:
    DecodeSession(Backend& backend, const DecodeConfig& cfg, const std::vector<int>& src_ids)
        : backend_(backend), cfg_(cfg), src_tokens_(src_ids) {
        cfg_.validate();
        if (cfg_.beam_size > backend.vocab_size())
            throw config_error("beam_size exceeds vocabulary size");
        eff_max_len_ = std::min(cfg_.max_len, backend.max_len() - 1);
        src_ = backend_.encode(src_ids);
        Slot root;
        root.cache = backend_.new_cache(src_);
        root.pending = {smiles::bos_id};
        slots_.push_back(std::move(root));
        speculative_ = (cfg_.strat == strategy::hsbs || cfg_.strat == strategy::msbs);
        phase_ = speculative_ ? phase::draft : phase::beam;
    }

    ~DecodeSession() {
        for (auto& s : slots_) drop_cache(s);
        for (int c : scratch_caches_) backend_.free_cache(c);
        backend_.release_source(src_);
    }

    DecodeSession(const DecodeSession&) = delete;
    DecodeSession& operator=(const DecodeSession&) = delete;

    bool done() const { return phase_ == phase::finished; }

    std::vector<Backend::Row> pending_rows() {
        row_map_.clear();
        row_draft_.clear();
        std::vector<Backend::Row> rows;
        if (phase_ == phase::finished) return rows;
        switch (phase_) {
            case phase::beam: {
                for (size_t i = 0; i < slots_.size(); ++i) {
                    auto& s = slots_[i];
                    if (!s.hyp.finished) {
                        rows.push_back({s.cache, s.pending, false});
                        row_map_.push_back(int(i));
                    } else if (cfg_.strat == strategy::bs && !cfg_.optimized && s.cache >= 0 &&
                               backend_.cache_len(s.cache) < backend_.max_len()) {
                        // baseline pad-feeding keeps finished rows in the pass
                        rows.push_back({s.cache, {smiles::pad_id}, false});
                        row_map_.push_back(-1);
                    }
                }
                break;
            }
            case phase::draft: {
                if (cfg_.strat == strategy::msbs) {
                    for (size_t i = 0; i < slots_.size(); ++i) {
                        auto& s = slots_[i];
                        if (s.hyp.finished) continue;
                        rows.push_back({s.cache, s.pending, true});
                        row_map_.push_back(int(i));
                    }
                } else {
                    // heuristic selection pass: every draft appended to a
                    // throwaway clone of the beam cache
                    for (size_t i = 0; i < slots_.size(); ++i) {
                        auto& s = slots_[i];
                        if (s.hyp.finished) continue;
                        const int tail = s.hyp.tokens.empty() ? -1 : s.hyp.tokens.back();
                        const int budget = draft_budget(s);
                        s.heuristic_drafts =
                            budget > 0 ? extract_query_drafts(src_tokens_, tail, cfg_.n_drafts,
                                                              budget)
                                       : std::vector<Draft>{};
                        for (size_t n = 0; n < s.heuristic_drafts.size(); ++n) {
                            Backend::Row row;
                            row.cache = backend_.clone_cache(s.cache);
                            scratch_caches_.push_back(row.cache);
                            row.tokens = s.pending;
                            const auto& dt = s.heuristic_drafts[n].tokens;
                            row.tokens.insert(row.tokens.end(), dt.begin(), dt.end());
                            rows.push_back(std::move(row));
                            row_map_.push_back(int(i));
                            row_draft_.push_back(int(n));
                        }
                    }
                }
                break;
            }
            case phase::verify: {
                for (size_t i = 0; i < slots_.size(); ++i) {
                    auto& s = slots_[i];
                    if (s.hyp.finished) continue;
                    if (cfg_.strat == strategy::msbs) {
                        if (s.draft.tokens.empty()) continue;  // expand from stored d0
                        rows.push_back({s.cache, s.draft.tokens, false});
                        row_map_.push_back(int(i));
                    } else {
                        Backend::Row row;
                        row.cache = s.cache;
                        row.tokens = s.pending;
                        row.tokens.insert(row.tokens.end(), s.draft.tokens.begin(),
                                          s.draft.tokens.end());
                        rows.push_back(std::move(row));
                        row_map_.push_back(int(i));
                    }
                }
                break;
            }
            case phase::finished:
                break;
        }
        return rows;
    }

    void consume(std::span<const Backend::RowOut> outs) {
        switch (phase_) {
            case phase::beam:
                consume_beam(outs);
                break;
            case phase::draft:
                consume_draft(outs);
                break;
            case phase::verify:
                consume_verify(outs);
                break;
            case phase::finished:
                break;
        }
    }

    std::vector<Hypothesis> results() const {
        std::vector<Hypothesis> out;
        out.reserve(slots_.size());
        for (const auto& s : slots_) out.push_back(s.hyp);
        std::sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            return a.tokens < b.tokens;
        });
        return out;
    }

    int64_t drafted_tokens() const { return drafted_; }
    int64_t accepted_tokens() const { return accepted_; }
    int64_t cycles() const { return cycles_; }

private:
    enum class phase { beam, draft, verify, finished };

    struct Slot {
        Hypothesis hyp;
        int cache = -1;
        std::vector<int> pending;  // committed tokens not yet in the cache
        // per-cycle speculative state
        std::vector<double> d0;    // log-probs after the committed prefix
        Draft draft;
        std::vector<Draft> heuristic_drafts;
        std::vector<std::vector<double>> cycle_dists;  // d_0..d_L along the draft
    };

    int draft_budget(const Slot& s) const {
        const int budget = eff_max_len_ - int(s.hyp.tokens.size()) - 1;
        if (budget <= 0) return 0;
        if (cfg_.strat == strategy::msbs)
            return std::min({budget, cfg_.draft_len, backend_.extra_heads()});
        return std::min(budget, cfg_.draft_len);
    }

    void drop_cache(Slot& s) {
        if (s.cache >= 0) backend_.free_cache(s.cache);
        s.cache = -1;
    }

    void consume_beam(std::span<const Backend::RowOut> outs) {
        std::vector<detail::Candidate> pool;
        for (const auto& s : slots_) {
            if (!s.hyp.finished) continue;
            detail::Candidate c;
            c.tokens = s.hyp.tokens;
            c.log_prob = s.hyp.log_prob;
            c.finished = true;
            c.slot = -1;
            pool.push_back(std::move(c));
        }
        for (size_t r = 0; r < row_map_.size(); ++r) {
            const int slot_index = row_map_[r];
            if (slot_index < 0) continue;  // pad-feeding row, output ignored
            auto& s = slots_[size_t(slot_index)];
            auto lp = nn_log_softmax(outs[r].main.back());
            std::vector<int> empty_draft;
            std::vector<std::vector<double>> dists = {lp};
            auto cands = detail::build_slot_candidates(s.hyp.tokens, s.hyp.log_prob, slot_index,
                                                       dists, empty_draft, 0, cfg_.beam_size,
                                                       eff_max_len_);
            pool.insert(pool.end(), cands.begin(), cands.end());
            s.pending.clear();
        }
        adopt_selection(detail::select_top(std::move(pool), cfg_.beam_size));
    }

    void consume_draft(std::span<const Backend::RowOut> outs) {
        for (auto& s : slots_) s.cycle_dists.clear();
        if (cfg_.strat == strategy::msbs) {
            for (size_t r = 0; r < row_map_.size(); ++r) {
                auto& s = slots_[size_t(row_map_[r])];
                s.d0 = nn_log_softmax(outs[r].main.back());
                s.pending.clear();
                const int budget = draft_budget(s);
                std::vector<std::vector<double>> heads;
                heads.push_back(outs[r].main.back());
                for (const auto& e : outs[r].extra_last) heads.push_back(e);
                s.draft = budget > 0 ? medusa_draft(heads, budget) : Draft{};
                s.draft.provenance = Draft::origin::lookahead_heads;
            }
        } else {
            // pick the heuristic draft with the most accepted tokens;
            // ties stay with the lower draft index
            std::map<int, std::pair<int, int>> best;  // slot -> (accepted, draft index)
            for (size_t r = 0; r < row_map_.size(); ++r) {
                const int slot_index = row_map_[r];
                const int draft_index = row_draft_[r];
                auto& s = slots_[size_t(slot_index)];
                const auto& main = outs[r].main;
                const auto& draft = s.heuristic_drafts[size_t(draft_index)].tokens;
                std::vector<std::vector<double>> probs;
                for (size_t pos = s.pending.size() - 1;
                     pos < main.size() && probs.size() < draft.size(); ++pos)
                    probs.push_back(to_probs(nn_log_softmax(main[pos])));
                auto ver = verify_draft(probs, draft, cfg_.nucleus_p);
                auto it = best.find(slot_index);
                if (it == best.end() || ver.accepted > it->second.first)
                    best[slot_index] = {ver.accepted, draft_index};
            }
            for (auto& s : slots_) {
                if (s.hyp.finished) continue;
                auto it = best.find(int(&s - slots_.data()));
                s.draft = it != best.end() ? s.heuristic_drafts[size_t(it->second.second)]
                                           : Draft{};
            }
            for (int c : scratch_caches_) backend_.free_cache(c);
            scratch_caches_.clear();
        }

        // when every live beam has an empty draft, the msbs cycle
        // degrades to a single beam-search-like call from the stored d0
        bool any_draft = false;
        for (const auto& s : slots_)
            if (!s.hyp.finished && !s.draft.tokens.empty()) any_draft = true;
        if (cfg_.strat == strategy::msbs && !any_draft) {
            expand_speculative();
            return;
        }
        phase_ = phase::verify;
    }

    void consume_verify(std::span<const Backend::RowOut> outs) {
        for (size_t r = 0; r < row_map_.size(); ++r) {
            auto& s = slots_[size_t(row_map_[r])];
            const auto& main = outs[r].main;
            s.cycle_dists.clear();
            if (cfg_.strat == strategy::msbs) {
                s.cycle_dists.push_back(s.d0);
                for (const auto& row : main) s.cycle_dists.push_back(nn_log_softmax(row));
            } else {
                for (size_t pos = s.pending.size() - 1; pos < main.size(); ++pos)
                    s.cycle_dists.push_back(nn_log_softmax(main[pos]));
                s.pending.clear();
            }
        }
        expand_speculative();
    }

    void expand_speculative() {
        ++cycles_;
        std::vector<detail::Candidate> pool;
        for (const auto& s : slots_) {
            if (!s.hyp.finished) continue;
            detail::Candidate c;
            c.tokens = s.hyp.tokens;
            c.log_prob = s.hyp.log_prob;
            c.finished = true;
            c.slot = -1;
            pool.push_back(std::move(c));
        }
        for (size_t i = 0; i < slots_.size(); ++i) {
            auto& s = slots_[size_t(i)];
            if (s.hyp.finished) continue;
            std::vector<std::vector<double>> dists;
            if (!s.cycle_dists.empty()) {
                dists = s.cycle_dists;
            } else {
                dists.push_back(s.d0);  // empty draft: a plain beam step
            }
            int accepted = 0;
            if (!s.draft.tokens.empty()) {
                std::vector<std::vector<double>> probs;
                for (size_t j = 0; j < s.draft.tokens.size() && j < dists.size(); ++j)
                    probs.push_back(to_probs(dists[j]));
                auto ver = verify_draft(probs, s.draft.tokens, cfg_.nucleus_p);
                accepted = ver.accepted;
                drafted_ += int64_t(s.draft.tokens.size());
                accepted_ += accepted;
            }
            auto cands = detail::build_slot_candidates(s.hyp.tokens, s.hyp.log_prob, int(i),
                                                       dists, s.draft.tokens, accepted,
                                                       cfg_.beam_size, eff_max_len_);
            pool.insert(pool.end(), cands.begin(), cands.end());
        }
        adopt_selection(detail::select_top(std::move(pool), cfg_.beam_size));
        if (phase_ != phase::finished) phase_ = phase::draft;
    }

    // Replace the slot set with the selected candidates, rebuilding
    // caches: a winner's cache is its parent's, truncated to the
    // committed prefix it actually extends.
    void adopt_selection(std::vector<detail::Candidate> selected) {
        std::vector<Slot> next;
        next.reserve(selected.size());
        std::vector<int> old_caches;
        for (auto& s : slots_) {
            old_caches.push_back(s.cache);
            s.cache = -1;
        }
        for (auto& c : selected) {
            Slot ns;
            ns.hyp.tokens = std::move(c.tokens);
            ns.hyp.log_prob = c.log_prob;
            ns.hyp.finished = c.finished;
            if (c.slot < 0) {
                // pass-through finished slot; keep its (possibly absent) cache
                const size_t idx = passthrough_index(ns.hyp);
                ns.cache = old_caches[idx];
                old_caches[idx] = -1;
            } else if (!c.finished) {
                // the parent cache holds bos + its prefix + everything fed
                // this cycle; the winner keeps bos + all its tokens except
                // the pending continuation, which is fed next call
                ns.cache = backend_.clone_cache(old_caches[size_t(c.slot)]);
                backend_.truncate_cache(ns.cache, int(ns.hyp.tokens.size()));
                ns.pending = {c.continuation};
            } else if (cfg_.strat == strategy::bs && !cfg_.optimized) {
                // the pad-feeding baseline keeps finished rows in the pass
                ns.cache = backend_.clone_cache(old_caches[size_t(c.slot)]);
                backend_.truncate_cache(ns.cache, int(ns.hyp.tokens.size()));
            }
            next.push_back(std::move(ns));
        }
        for (int c : old_caches)
            if (c >= 0) backend_.free_cache(c);
        slots_ = std::move(next);

        bool all_finished = !slots_.empty();
        for (const auto& s : slots_)
            if (!s.hyp.finished) all_finished = false;
        if (all_finished || slots_.empty()) {
            for (auto& s : slots_) drop_cache(s);
            phase_ = phase::finished;
        }
    }

    size_t passthrough_index(const Hypothesis& hyp) const {
        for (size_t i = 0; i < slots_.size(); ++i)
            if (slots_[i].hyp.finished && slots_[i].hyp.tokens == hyp.tokens) return i;
        throw error("internal: pass-through candidate without matching slot");
    }

    static std::vector<double> nn_log_softmax(const std::vector<double>& logits) {
        double m = -std::numeric_limits<double>::infinity();
        for (double v : logits) m = std::max(m, v);
        double sum = 0;
        for (double v : logits) sum += std::exp(v - m);
        const double lse = m + std::log(sum);
        std::vector<double> out(logits.size());
        for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
        return out;
    }

    static std::vector<double> to_probs(const std::vector<double>& log_probs) {
        std::vector<double> out(log_probs.size());
        for (size_t i = 0; i < log_probs.size(); ++i) out[i] = std::exp(log_probs[i]);
        return out;
    }

    Backend& backend_;
    DecodeConfig cfg_;
    std::vector<int> src_tokens_;
    int src_ = -1;
    int eff_max_len_ = 0;
    bool speculative_ = false;
    phase phase_ = phase::beam;
    std::vector<Slot> slots_;
    std::vector<int> row_map_;
    std::vector<int> row_draft_;
    std::vector<int> scratch_caches_;
    int64_t drafted_ = 0;
    int64_t accepted_ = 0;
    int64_t cycles_ = 0;
};

// ---- drivers ------------------------------------------------------------

struct BatchDecodeResult {
    std::vector<std::vector<Hypothesis>> per_source;
    DecodeMetrics metrics;
};

// Lockstep decoding of several sources: each driver loop pools the rows
// every live session wants, runs them as one model call, and hands the
// slices back.
inline BatchDecodeResult decode_batch(Backend& backend,
                                      const std::vector<std::vector<int>>& sources,
                                      const DecodeConfig& cfg) {
    stopwatch clock;
    std::vector<std::unique_ptr<DecodeSession>> sessions;
    sessions.reserve(sources.size());
    for (const auto& src : sources)
        sessions.push_back(std::make_unique<DecodeSession>(backend, cfg, src));

    BatchDecodeResult result;
    result.metrics = DecodeMetrics{};
    while (true) {
        std::vector<Backend::Row> rows;
        std::vector<std::pair<size_t, size_t>> spans;  // session -> [begin, count)
        for (size_t s = 0; s < sessions.size(); ++s) {
            if (sessions[s]->done()) {
                spans.emplace_back(rows.size(), 0);
                continue;
            }
            auto mine = sessions[s]->pending_rows();
            spans.emplace_back(rows.size(), mine.size());
            for (auto& r : mine) rows.push_back(std::move(r));
        }
        if (rows.empty()) {
            // sessions that still owe a zero-row phase transition
            bool advanced = false;
            for (size_t s = 0; s < sessions.size(); ++s) {
                if (!sessions[s]->done() && spans[s].second == 0) {
                    sessions[s]->consume({});
                    advanced = true;
                }
            }
            if (!advanced) break;
            continue;
        }
        auto outs = backend.step(rows);
        ++result.metrics.model_calls;
        result.metrics.rows_per_call.push_back(int(rows.size()));
        for (size_t s = 0; s < sessions.size(); ++s) {
            if (sessions[s]->done()) continue;
            std::span<const Backend::RowOut> slice(outs.data() + spans[s].first, spans[s].second);
            sessions[s]->consume(slice);
        }
    }
    for (auto& session : sessions) {
        result.per_source.push_back(session->results());
        result.metrics.drafted_tokens += session->drafted_tokens();
        result.metrics.accepted_tokens += session->accepted_tokens();
        result.metrics.sbs_cycles += session->cycles();
    }
    result.metrics.wall_time_s = clock.seconds();
    return result;
}

inline std::pair<std::vector<Hypothesis>, DecodeMetrics> decode_one(
    Backend& backend, const std::vector<int>& src, const DecodeConfig& cfg) {
    auto batch = decode_batch(backend, {src}, cfg);
    return {std::move(batch.per_source[0]), std::move(batch.metrics)};
}

// Plain beam search over a transformer model. `bs-opt` differs from `bs`
// only in skipping the pad-feeding of finished rows; hypotheses and
// scores are identical.
template <typename S = float>
std::pair<std::vector<Hypothesis>, DecodeMetrics> beam_search(
    const model::ModelParameters<S>& params, const std::vector<int>& src, DecodeConfig cfg) {
    if (cfg.strat != strategy::bs && cfg.strat != strategy::bs_opt)
        throw config_error("beam_search expects strategy bs or bs-opt");
    if (cfg.strat == strategy::bs_opt) cfg.optimized = true;
    TransformerBackend<S> backend(params);
    return decode_one(backend, src, cfg);
}

// Speculative beam search (heuristic or lookahead-head drafts).
template <typename S = float>
std::pair<std::vector<Hypothesis>, DecodeMetrics> sbs_generate(
    const model::ModelParameters<S>& params, const std::vector<int>& src, const DecodeConfig& cfg) {
    if (cfg.strat != strategy::hsbs && cfg.strat != strategy::msbs)
        throw config_error("sbs_generate expects strategy hsbs or msbs");
    TransformerBackend<S> backend(params);
    return decode_one(backend, src, cfg);
}

}  // namespace retrospec::decode
