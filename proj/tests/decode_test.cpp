#include <doctest.h>

#include "retrospec/decode.hpp"
#include "retrospec/train.hpp"
#include "support.hpp"

using namespace retrospec;
using namespace retrospec::decode;
using testsupport::FnBackend;

namespace {

// flat-ish distribution with a planted ranking
std::vector<double> dist_with_top(int vocab, std::initializer_list<std::pair<int, double>> tops) {
    std::vector<double> logits(size_t(vocab), 0.0);
    for (auto& [id, v] : tops) logits[size_t(id)] = v;
    return logits;
}

std::vector<std::vector<double>> random_probs(rng& gen, int n, int vocab) {
    std::vector<std::vector<double>> out;
    for (int i = 0; i < n; ++i) {
        std::vector<double> p(static_cast<size_t>(vocab));
        double sum = 0;
        for (auto& v : p) {
            v = gen.next_double() + 1e-6;
            sum += v;
        }
        for (auto& v : p) v /= sum;
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("decode");

TEST_CASE("verify_draft: p=0 accepts exactly the greedy agreement length") {
    std::vector<std::vector<double>> probs = {
        {0.1, 0.6, 0.2, 0.1},  // argmax 1
        {0.5, 0.2, 0.2, 0.1},  // argmax 0
        {0.1, 0.1, 0.1, 0.7},  // argmax 3
    };
    auto r1 = verify_draft(probs, {1, 0, 3}, 0.0);
    CHECK(r1.accepted == 3);
    auto r2 = verify_draft(probs, {1, 2, 3}, 0.0);
    CHECK(r2.accepted == 1);
    CHECK(r2.flags == std::vector<uint8_t>{1, 0, 0});
    CHECK(r2.bonus == 0);  // argmax after the accepted prefix
}

TEST_CASE("verify_draft: per-position argmax drafts are fully accepted") {
    rng gen(11);
    auto probs = random_probs(gen, 8, 12);
    std::vector<int> draft;
    for (auto& d : probs)
        draft.push_back(int(std::max_element(d.begin(), d.end()) - d.begin()));
    auto r = verify_draft(probs, draft, 0.4);
    CHECK(r.accepted == 8);
}

TEST_CASE("verify_draft agrees with the sort-and-cumulate oracle") {
    rng gen(42);
    for (int trial = 0; trial < 2000; ++trial) {
        const int vocab = 4 + int(gen.next_below(12));
        const int len = 1 + int(gen.next_below(6));
        auto probs = random_probs(gen, len, vocab);
        std::vector<int> draft;
        for (int i = 0; i < len; ++i) draft.push_back(int(gen.next_below(uint64_t(vocab))));
        double p;
        switch (trial % 4) {
            case 0: p = 0.0; break;
            case 1: p = 1.0; break;
            default: p = gen.next_double(); break;
        }
        auto r = verify_draft(probs, draft, p);
        int oracle = testsupport::oracle_accepted_count(probs, draft, p);
        CHECK(r.accepted == oracle);
        for (size_t i = 0; i < r.flags.size(); ++i)
            CHECK(r.flags[i] == (int(i) < r.accepted ? 1 : 0));
    }
}

TEST_CASE("verify_draft fixture at the reference nucleus value") {
    // V=4 distributions crafted around p=0.9975
    std::vector<std::vector<double>> probs = {
        {0.001, 0.001, 0.001, 0.997},   // cum(3)=0.997 < 0.9975: accepted
        {0.0005, 0.001, 0.0005, 0.998}, // token 1: cum=0.998+0.001=0.999 >= p: rejected
    };
    auto r = verify_draft(probs, {3, 1}, 0.9975);
    CHECK(r.accepted == 1);
    CHECK(testsupport::oracle_accepted_count(probs, {3, 1}, 0.9975) == 1);
}

TEST_CASE("extract_query_drafts follows occurrences of the tail token") {
    //            0  1  2  3  4  5  6  7
    std::vector<int> src = {9, 5, 6, 9, 7, 8, 9, 4};
    auto drafts = extract_query_drafts(src, 9, 10, 3);
    REQUIRE(drafts.size() >= 3);
    CHECK(drafts[0].tokens == std::vector<int>{5, 6, 9});
    CHECK(drafts[1].tokens == std::vector<int>{7, 8, 9});
    CHECK(drafts[2].tokens == std::vector<int>{4});  // truncated tail

    // source shorter than the draft length: one truncated fragment
    std::vector<int> tiny = {5, 6};
    auto t = extract_query_drafts(tiny, -1, 1, 10);
    REQUIRE(t.size() == 1);
    CHECK(t[0].tokens == std::vector<int>{5, 6});

    // tail token absent: evenly spaced fallback, deduplicated, count <= n
    auto fb = extract_query_drafts(src, 99, 4, 2);
    CHECK(fb.size() <= 4);
    CHECK(fb[0].tokens == std::vector<int>{9, 5});

    CHECK(extract_query_drafts({}, 9, 5, 4).empty());
}

TEST_CASE("medusa_draft reads one token per head and stops at eos") {
    auto onehot = [](int vocab, int id) {
        std::vector<double> v(size_t(vocab), -50.0);
        v[size_t(id)] = 0.0;
        return v;
    };
    std::vector<std::vector<double>> heads = {onehot(8, 4), onehot(8, 6), onehot(8, 5)};
    auto d = medusa_draft(heads, 3);
    CHECK(d.tokens == std::vector<int>{4, 6, 5});

    auto d2 = medusa_draft(heads, 2);
    CHECK(d2.tokens == std::vector<int>{4, 6});

    std::vector<std::vector<double>> with_eos = {onehot(8, 4), onehot(8, smiles::eos_id),
                                                 onehot(8, 5)};
    auto d3 = medusa_draft(with_eos, 3);
    CHECK(d3.tokens == std::vector<int>{4});

    auto d4 = medusa_draft({}, 5);
    CHECK(d4.tokens.empty());
}

TEST_CASE("speculative candidates match an exhaustive enumeration oracle") {
    // Hand-set log-distributions over V=5, beam of 2, draft of 2 fully
    // accepted. dists[j] conditions on j accepted draft tokens.
    const int vocab = 5;
    const int beam_size = 2;
    std::vector<int> draft = {4, 3};
    std::vector<std::vector<double>> raw = {
        dist_with_top(vocab, {{4, 3.0}, {3, 1.5}}),
        dist_with_top(vocab, {{3, 2.5}, {2, 2.0}}),
        dist_with_top(vocab, {{2, 4.0}, {4, 1.0}}),
    };
    std::vector<std::vector<double>> dists;
    for (auto& r : raw) dists.push_back(nn::log_softmax_row(
        Eigen::Map<Eigen::Matrix<double, 1, Eigen::Dynamic>>(r.data(), 1, vocab)));

    std::vector<int> beam_tokens = {4, 4};
    const double beam_lp = -0.25;
    auto cands = decode::detail::build_slot_candidates(beam_tokens, beam_lp, 0, dists, draft, 2,
                                                       beam_size, 100);

    // oracle: enumerate every (prefix length, continuation) pair, keep the
    // top beam_size per position, drop pad and absorbed continuations
    struct Entry {
        std::vector<int> tokens;
        double lp;
    };
    std::vector<Entry> expect;
    double prefix_lp = beam_lp;
    for (int j = 0; j <= 2; ++j) {
        std::vector<int> ids;
        for (int v = 0; v < vocab; ++v)
            if (v != smiles::pad_id) ids.push_back(v);
        std::sort(ids.begin(), ids.end(), [&](int a, int b) {
            if (dists[size_t(j)][size_t(a)] != dists[size_t(j)][size_t(b)])
                return dists[size_t(j)][size_t(a)] > dists[size_t(j)][size_t(b)];
            return a < b;
        });
        int kept = 0;
        for (int v : ids) {
            if (kept >= beam_size) break;
            ++kept;  // top-K by rank; an absorbed continuation still holds its rank
            if (j < 2 && v == draft[size_t(j)]) continue;
            Entry e;
            e.tokens = beam_tokens;
            for (int i = 0; i < j; ++i) e.tokens.push_back(draft[size_t(i)]);
            e.tokens.push_back(v);
            e.lp = prefix_lp + dists[size_t(j)][size_t(v)];
            expect.push_back(std::move(e));
        }
        if (j < 2) prefix_lp += dists[size_t(j)][size_t(draft[size_t(j)])];
    }
    REQUIRE(cands.size() == expect.size());
    std::sort(expect.begin(), expect.end(), [](const Entry& a, const Entry& b) {
        if (a.lp != b.lp) return a.lp > b.lp;
        return a.tokens < b.tokens;
    });
    auto sorted = cands;
    std::sort(sorted.begin(), sorted.end(), decode::detail::candidate_order);
    for (size_t i = 0; i < sorted.size(); ++i) {
        CHECK(sorted[i].tokens == expect[i].tokens);
        CHECK(sorted[i].log_prob == doctest::Approx(expect[i].lp).epsilon(1e-12));
    }
    // candidate scores never exceed their own prefix score
    for (const auto& c : cands) CHECK(c.log_prob <= beam_lp + 1e-12);
}

TEST_CASE("beam search with K=1 is greedy decoding") {
    auto cfg_model = testsupport::random_toy_config(21);
    auto params = model::init<float>(cfg_model);
    std::vector<int> src = {4, 5, 6, 7};

    DecodeConfig cfg;
    cfg.strat = strategy::bs;
    cfg.beam_size = 1;
    cfg.max_len = 10;
    auto [hyps, metrics] = beam_search(params, src, cfg);
    REQUIRE(hyps.size() == 1);

    // greedy rollout by hand
    auto enc = model::encode(params, std::span<const int>(src));
    auto cache = model::make_cache(params);
    std::vector<int> tokens;
    int next = smiles::bos_id;
    for (int step = 0; step < 10; ++step) {
        std::vector<int> feed = {next};
        auto out = model::decode_step(params, enc, cache, feed);
        auto lp = nn::log_softmax_row(out.main.row(0));
        int argmax = -1;
        double best = -1e30;
        for (int v = 0; v < cfg_model.vocab_size; ++v) {
            if (v == smiles::pad_id) continue;
            if (lp[size_t(v)] > best) {
                best = lp[size_t(v)];
                argmax = v;
            }
        }
        tokens.push_back(argmax);
        if (argmax == smiles::eos_id) break;
        next = argmax;
    }
    CHECK(hyps[0].tokens == tokens);
}

TEST_CASE("beam search matches the naive reference on random toy models") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        auto params = model::init<float>(testsupport::random_toy_config(seed));
        std::vector<int> src = {4, 5, 6, 7, 8, 9};
        DecodeConfig cfg;
        cfg.strat = strategy::bs;
        cfg.beam_size = 3;
        cfg.max_len = 12;
        auto [hyps, metrics] = beam_search(params, src, cfg);
        auto ref = testsupport::naive_beam_search(params, src, 3, 12);
        REQUIRE(hyps.size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            CHECK(hyps[i].tokens == ref[i].tokens);
            CHECK(hyps[i].log_prob == doctest::Approx(ref[i].log_prob).epsilon(1e-6));
        }
    }
}

TEST_CASE("optimized beam search returns identical results with fewer rows") {
    int strictly_lower = 0, differing_lengths = 0;
    for (uint64_t seed = 30; seed < 45; ++seed) {
        auto params = model::init<float>(testsupport::random_toy_config(seed));
        std::vector<int> src = {4, 6, 8, 10};
        DecodeConfig cfg;
        cfg.strat = strategy::bs;
        cfg.beam_size = 4;
        cfg.max_len = 16;
        auto [std_hyps, std_metrics] = beam_search(params, src, cfg);
        cfg.strat = strategy::bs_opt;
        auto [opt_hyps, opt_metrics] = beam_search(params, src, cfg);

        REQUIRE(std_hyps.size() == opt_hyps.size());
        for (size_t i = 0; i < std_hyps.size(); ++i) {
            CHECK(std_hyps[i].tokens == opt_hyps[i].tokens);
            CHECK(std_hyps[i].log_prob == doctest::Approx(opt_hyps[i].log_prob).epsilon(1e-9));
        }
        CHECK(std_metrics.model_calls == opt_metrics.model_calls);
        CHECK(opt_metrics.mean_effective_batch() <= std_metrics.mean_effective_batch() + 1e-9);

        std::set<size_t> lengths;
        for (const auto& h : std_hyps) lengths.insert(h.tokens.size());
        if (lengths.size() > 1) {
            ++differing_lengths;
            if (opt_metrics.mean_effective_batch() < std_metrics.mean_effective_batch())
                ++strictly_lower;
        }
    }
    CHECK(differing_lengths > 0);
    CHECK(strictly_lower == differing_lengths);
}

TEST_CASE("scripted 51-token generation: 52 calls for beam search, 2 per cycle for msbs") {
    // content-independent script: token 4 for the first 51 positions,
    // then eos
    auto script = [](const std::vector<int>&, const std::vector<int>& prefix)
        -> std::vector<std::vector<double>> {
        const int generated = int(prefix.size()) - 1;
        auto head_for = [&](int idx) {
            std::vector<double> logits(8, 0.0);
            if (idx < 51)
                logits[4] = 25.0;
            else
                logits[smiles::eos_id] = 25.0;
            return logits;
        };
        std::vector<std::vector<double>> heads;
        for (int k = 0; k <= 6; ++k) heads.push_back(head_for(generated + k));
        return heads;
    };

    FnBackend backend(8, 6, 128, script);
    DecodeConfig cfg;
    cfg.strat = strategy::bs;
    cfg.beam_size = 2;
    cfg.max_len = 80;
    auto bs_out = decode_one(backend, {4, 4, 4}, cfg);
    REQUIRE(bs_out.first.size() == 2);
    CHECK(bs_out.first[0].tokens.size() == 52);  // 51 content tokens + eos
    CHECK(bs_out.second.model_calls == 52);

    FnBackend backend2(8, 6, 128, script);
    cfg.strat = strategy::msbs;
    cfg.draft_len = 6;
    auto ms_out = decode_one(backend2, {4, 4, 4}, cfg);
    CHECK(ms_out.first[0].tokens.size() == 52);
    CHECK(ms_out.second.model_calls == 2 * ms_out.second.sbs_cycles);
    CHECK(ms_out.second.model_calls < 52);
}

TEST_CASE("msbs with zero extra heads degrades to beam search") {
    for (uint64_t seed = 70; seed < 74; ++seed) {
        auto params = model::init<float>(testsupport::random_toy_config(seed));
        std::vector<int> src = {4, 5, 9, 7};
        DecodeConfig cfg;
        cfg.strat = strategy::bs_opt;
        cfg.optimized = true;
        cfg.beam_size = 3;
        cfg.max_len = 10;
        auto [bs_hyps, bs_metrics] = beam_search(params, src, cfg);
        cfg.strat = strategy::msbs;
        auto [ms_hyps, ms_metrics] = sbs_generate(params, src, cfg);
        REQUIRE(bs_hyps.size() == ms_hyps.size());
        for (size_t i = 0; i < bs_hyps.size(); ++i) {
            CHECK(bs_hyps[i].tokens == ms_hyps[i].tokens);
            CHECK(bs_hyps[i].log_prob == doctest::Approx(ms_hyps[i].log_prob).epsilon(1e-9));
        }
        CHECK(ms_metrics.drafted_tokens == 0);
    }
}

// With drafts echoing the main head's greedy rollout and p=0 (only
// argmax draft tokens survive), a single-beam speculative run commits
// exactly the greedy path: the classic lossless-speculation guarantee.
// Wider beams trade exactness for speed by design (see Non-goals), so
// the equivalence gate runs at beam size 1; the M=0 degradation test
// below covers beam-search equality at full width.
TEST_CASE("msbs with p=0 and echo heads reproduces greedy beam search") {
    for (uint64_t seed = 100; seed < 110; ++seed) {
        auto params = model::init<float>(testsupport::random_toy_config(seed));
        std::vector<int> src = {4, 5, 6, 7, 8};
        DecodeConfig cfg;
        cfg.strat = strategy::bs;
        cfg.beam_size = 1;
        cfg.max_len = 12;
        auto [bs_hyps, bs_metrics] = beam_search(params, src, cfg);

        testsupport::GreedyEchoBackend<float> echo(params, 4);
        DecodeConfig mcfg;
        mcfg.strat = strategy::msbs;
        mcfg.beam_size = 1;
        mcfg.max_len = 12;
        mcfg.nucleus_p = 0.0;
        mcfg.draft_len = 4;
        auto [ms_hyps, ms_metrics] = decode_one(echo, src, mcfg);

        REQUIRE(bs_hyps.size() == ms_hyps.size());
        for (size_t i = 0; i < bs_hyps.size(); ++i) {
            CHECK(bs_hyps[i].tokens == ms_hyps[i].tokens);
            CHECK(bs_hyps[i].log_prob == doctest::Approx(ms_hyps[i].log_prob).epsilon(1e-5));
        }
        // speculation actually runs: fewer calls than one per token
        if (bs_hyps[0].tokens.size() > 4)
            CHECK(ms_metrics.model_calls < bs_metrics.model_calls);
    }
}

TEST_CASE("hsbs produces valid results and counts speculation") {
    auto cfg_model = testsupport::random_toy_config(55);
    auto params = model::init<float>(cfg_model);
    std::vector<int> src = {4, 5, 6, 7, 4, 5, 6, 8};
    DecodeConfig cfg;
    cfg.strat = strategy::hsbs;
    cfg.beam_size = 3;
    cfg.max_len = 12;
    cfg.n_drafts = 4;
    cfg.draft_len = 5;
    cfg.nucleus_p = 0.9;
    auto [hyps, metrics] = sbs_generate(params, src, cfg);
    REQUIRE(hyps.size() == 3);
    for (const auto& h : hyps) {
        CHECK(h.finished);
        CHECK(h.log_prob <= 0.0);
    }
    CHECK(metrics.accepted_tokens <= metrics.drafted_tokens);
    CHECK(metrics.model_calls >= 1);
    // scores are sorted
    for (size_t i = 1; i < hyps.size(); ++i) CHECK(hyps[i - 1].log_prob >= hyps[i].log_prob);
}

TEST_CASE("decoding is deterministic") {
    auto params = model::init<float>(testsupport::random_toy_config(77));
    std::vector<int> src = {4, 9, 6, 7};
    for (strategy s : {strategy::bs, strategy::hsbs, strategy::msbs}) {
        DecodeConfig cfg;
        cfg.strat = s;
        cfg.beam_size = 3;
        cfg.max_len = 10;
        cfg.draft_len = 4;
        cfg.n_drafts = 3;
        auto r1 = s == strategy::bs ? beam_search(params, src, cfg) : sbs_generate(params, src, cfg);
        auto r2 = s == strategy::bs ? beam_search(params, src, cfg) : sbs_generate(params, src, cfg);
        REQUIRE(r1.first.size() == r2.first.size());
        for (size_t i = 0; i < r1.first.size(); ++i) {
            CHECK(r1.first[i].tokens == r2.first[i].tokens);
            CHECK(r1.first[i].log_prob == r2.first[i].log_prob);
        }
        CHECK(r1.second.model_calls == r2.second.model_calls);
    }
}

TEST_CASE("lockstep batch decoding matches per-source decoding") {
    auto params = model::init<float>(testsupport::random_toy_config(88));
    model::TrainBatch dummy;  // silence unused-include warnings in some configs
    (void)dummy;
    std::vector<std::vector<int>> sources = {{4, 5, 6}, {7, 8, 9, 10}, {11, 4, 6, 8, 10}};
    DecodeConfig cfg;
    cfg.strat = strategy::msbs;
    cfg.beam_size = 2;
    cfg.max_len = 10;
    cfg.draft_len = 3;

    decode::TransformerBackend<float> backend(params);
    auto batch = decode_batch(backend, sources, cfg);
    for (size_t i = 0; i < sources.size(); ++i) {
        decode::TransformerBackend<float> single(params);
        auto one = decode_one(single, sources[i], cfg);
        REQUIRE(batch.per_source[i].size() == one.first.size());
        for (size_t j = 0; j < one.first.size(); ++j) {
            CHECK(batch.per_source[i][j].tokens == one.first[j].tokens);
            CHECK(batch.per_source[i][j].log_prob ==
                  doctest::Approx(one.first[j].log_prob).epsilon(1e-9));
        }
        CHECK(batch.metrics.model_calls <= one.second.model_calls * int64_t(sources.size()));
    }
}

TEST_SUITE_END();
