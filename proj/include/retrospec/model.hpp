#pragma once

// Encoder-decoder transformer for token-sequence translation with M
// extra lookahead heads on the decoder. Head 0 is the ordinary
// next-token head; extra head k (1-based) predicts the token k+1
// positions ahead of the current input position. Pre-norm residual
// blocks, sinusoidal positions, tied input/output embedding.
//
// The inference path (encode / decode_step) is cache-based and
// allocation-light; the training path (forward_backward_row) keeps a
// tape per row and writes gradients into a mirrored ParamStore.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retrospec/common.hpp"
#include "retrospec/nn.hpp"
#include "retrospec/smiles.hpp"

namespace retrospec::model {

using nn::Mat;
using nn::ParamStore;
using nn::Vec;

struct ModelConfig {
    int layers_enc = 2;
    int layers_dec = 2;
    int attn_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int medusa_heads = 0;  // M extra heads; 0 = plain transformer
    int medusa_hidden = 64;
    int vocab_size = 0;
    int max_len = 128;
    double dropout = 0.0;
    uint64_t seed = 1;

    void validate() const {
        if (d_model <= 0 || attn_heads <= 0 || d_model % attn_heads != 0)
            throw config_error("d_model must be a positive multiple of attn_heads");
        if (layers_enc < 0 || layers_dec < 0) throw config_error("negative layer count");
        if (medusa_heads < 0) throw config_error("negative medusa_heads");
        if (medusa_heads > 0 && medusa_hidden <= 0)
            throw config_error("medusa_hidden must be positive when medusa_heads > 0");
        if (vocab_size < smiles::num_specials) throw config_error("vocab_size too small");
        if (max_len <= 1) throw config_error("max_len too small");
        if (dropout < 0.0 || dropout >= 1.0) throw config_error("dropout out of range");
    }

    // Architecture from the reference setup: 6+6 layers, 8 heads, 256/2048
    // widths, 20 extra heads. medusa_hidden=125 puts the extra-head budget
    // closest to 1.3M parameters.
    static ModelConfig reference_preset(int vocab) {
        ModelConfig c;
        c.layers_enc = 6;
        c.layers_dec = 6;
        c.attn_heads = 8;
        c.d_model = 256;
        c.d_ff = 2048;
        c.medusa_heads = 20;
        c.medusa_hidden = 125;
        c.vocab_size = vocab;
        c.max_len = 512;
        return c;
    }

    static ModelConfig toy_preset(int vocab) {
        ModelConfig c;
        c.layers_enc = 2;
        c.layers_dec = 2;
        c.attn_heads = 4;
        c.d_model = 64;
        c.d_ff = 256;
        c.medusa_heads = 8;
        c.medusa_hidden = 64;
        c.vocab_size = vocab;
        c.max_len = 160;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---- parameter layout -------------------------------------------------

namespace detail {

inline std::string enc_name(int layer, const char* field) {
    return "enc." + std::to_string(layer) + "." + field;
}
inline std::string dec_name(int layer, const char* field) {
    return "dec." + std::to_string(layer) + "." + field;
}
inline std::string medusa_name(int head, const char* field) {
    return "medusa." + std::to_string(head) + "." + field;
}

// Every tensor of the model, in allocation order. Drives init,
// counting, serialization.
template <typename S>
void build_layout(ParamStore<S>& store, const ModelConfig& c) {
    const int d = c.d_model;
    store.add("embed.tok", c.vocab_size, d);
    auto add_attn = [&](const std::string& prefix) {
        store.add(prefix + ".wq", d, d);
        store.add(prefix + ".bq", 1, d);
        store.add(prefix + ".wk", d, d);
        store.add(prefix + ".bk", 1, d);
        store.add(prefix + ".wv", d, d);
        store.add(prefix + ".bv", 1, d);
        store.add(prefix + ".wo", d, d);
        store.add(prefix + ".bo", 1, d);
    };
    auto add_ln = [&](const std::string& prefix) {
        store.add(prefix + ".g", 1, d);
        store.add(prefix + ".b", 1, d);
    };
    auto add_ff = [&](const std::string& prefix) {
        store.add(prefix + ".w1", d, c.d_ff);
        store.add(prefix + ".b1", 1, c.d_ff);
        store.add(prefix + ".w2", c.d_ff, d);
        store.add(prefix + ".b2", 1, d);
    };
    for (int l = 0; l < c.layers_enc; ++l) {
        add_ln(enc_name(l, "ln1"));
        add_attn(enc_name(l, "attn"));
        add_ln(enc_name(l, "ln2"));
        add_ff(enc_name(l, "ff"));
    }
    store.add("enc.final_ln.g", 1, d);
    store.add("enc.final_ln.b", 1, d);
    for (int l = 0; l < c.layers_dec; ++l) {
        add_ln(dec_name(l, "ln1"));
        add_attn(dec_name(l, "self"));
        add_ln(dec_name(l, "ln2"));
        add_attn(dec_name(l, "cross"));
        add_ln(dec_name(l, "ln3"));
        add_ff(dec_name(l, "ff"));
    }
    store.add("dec.final_ln.g", 1, d);
    store.add("dec.final_ln.b", 1, d);
    for (int m = 0; m < c.medusa_heads; ++m) {
        store.add(medusa_name(m, "w1"), d, c.medusa_hidden);
        store.add(medusa_name(m, "b1"), 1, c.medusa_hidden);
        store.add(medusa_name(m, "w2"), c.medusa_hidden, d);
        store.add(medusa_name(m, "b2"), 1, d);
        store.add(medusa_name(m, "ln.g"), 1, d);
        store.add(medusa_name(m, "ln.b"), 1, d);
    }
}

}  // namespace detail

template <typename S = float>
struct ModelParameters {
    ModelConfig config;
    uint64_t vocab_hash = 0;
    int64_t train_step = 0;
    ParamStore<S> store;
};

// Closed-form parameter count: (base transformer, extra heads).
// Must equal brute-force enumeration of the allocated tensors.
struct ParamCount {
    int64_t base = 0;
    int64_t medusa = 0;
    int64_t total() const { return base + medusa; }
    double medusa_ratio() const { return base > 0 ? double(medusa) / double(base) : 0.0; }
};

inline ParamCount count_params(const ModelConfig& c) {
    const int64_t d = c.d_model;
    const int64_t ff = c.d_ff;
    const int64_t attn = 4 * (d * d + d);            // wq,wk,wv,wo + biases
    const int64_t ln = 2 * d;                        // gain + bias
    const int64_t ffn = d * ff + ff + ff * d + d;    // w1,b1,w2,b2
    ParamCount pc;
    pc.base = int64_t(c.vocab_size) * d;             // tied embedding, counted once
    pc.base += c.layers_enc * (attn + 2 * ln + ffn);
    pc.base += c.layers_dec * (2 * attn + 3 * ln + ffn);
    pc.base += 2 * ln;                               // final norms, encoder + decoder
    const int64_t per_head = d * c.medusa_hidden + c.medusa_hidden  // w1,b1
                             + c.medusa_hidden * d + d              // w2,b2
                             + ln;                                  // head layer norm
    pc.medusa = int64_t(c.medusa_heads) * per_head;
    return pc;
}

// Deterministic Xavier-uniform init; biases and LN offsets zero, LN gains one.
template <typename S = float>
ModelParameters<S> init(const ModelConfig& config, uint64_t vocab_hash = 0) {
    config.validate();
    ModelParameters<S> p;
    p.config = config;
    p.vocab_hash = vocab_hash;
    detail::build_layout(p.store, config);
    rng gen(config.seed ^ 0x5eedf00d12345ull);
    for (auto& t : p.store.tensors()) {
        const bool is_ln_gain = t.name.ends_with("ln.g") || t.name.ends_with("ln1.g") ||
                                t.name.ends_with("ln2.g") || t.name.ends_with("ln3.g") ||
                                t.name.ends_with("final_ln.g");
        const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".bq") ||
                             t.name.ends_with(".bk") || t.name.ends_with(".bv") ||
                             t.name.ends_with(".bo") || t.name.ends_with(".b1") ||
                             t.name.ends_with(".b2");
        if (is_ln_gain) {
            t.value.setOnes();
        } else if (is_bias) {
            t.value.setZero();
        } else {
            const double limit =
                std::sqrt(6.0 / (double(t.value.rows()) + double(t.value.cols())));
            for (Eigen::Index j = 0; j < t.value.cols(); ++j)
                for (Eigen::Index i = 0; i < t.value.rows(); ++i)
                    t.value(i, j) = static_cast<S>(gen.next_range(-limit, limit));
        }
    }
    return p;
}

// ---- forward machinery -------------------------------------------------

// Logits for a batch of decoder rows: block[b][h] is (L x V), h = 0 is
// the main head, h = 1..M the lookahead heads.
template <typename S = float>
struct LogitsBlock {
    int batch = 0;
    int length = 0;
    int heads = 1;  // M + 1
    int vocab = 0;
    std::vector<std::vector<Mat<S>>> rows;  // [batch][head] -> (L x V)

    S at(int b, int l, int h, int v) const { return rows[size_t(b)][size_t(h)](l, v); }
};

template <typename S = float>
struct EncState {
    Mat<S> out;                    // (L_src x d), post final norm
    std::vector<Mat<S>> cross_k;   // per decoder layer, (L_src x d)
    std::vector<Mat<S>> cross_v;
    int len = 0;
};

// Per-layer cached self-attention keys/values for a committed decoder
// prefix.
template <typename S = float>
struct DecCache {
    std::vector<Mat<S>> self_k;
    std::vector<Mat<S>> self_v;
    int len = 0;

    void truncate(int n) {
        if (n >= len) return;
        for (auto& k : self_k) k.conservativeResize(n, Eigen::NoChange);
        for (auto& v : self_v) v.conservativeResize(n, Eigen::NoChange);
        len = n;
    }
};

// Main-head logits for every new position; extra-head logits where
// requested.
template <typename S = float>
struct StepLogits {
    Mat<S> main;                  // (m x V)
    std::vector<Mat<S>> extra;    // [M] -> (m x V) or (1 x V) in last-only mode
    bool extra_last_only = false;
};

enum class extra_heads_mode { none, last_only, all };

namespace detail {

template <typename S>
Mat<S> sinusoidal_positions(int offset, int count, int d) {
    Mat<S> pe(count, d);
    for (int i = 0; i < count; ++i) {
        const double pos = offset + i;
        for (int j = 0; j < d / 2; ++j) {
            const double freq = std::pow(10000.0, -2.0 * j / double(d));
            pe(i, 2 * j) = static_cast<S>(std::sin(pos * freq));
            pe(i, 2 * j + 1) = static_cast<S>(std::cos(pos * freq));
        }
        if (d % 2) pe(i, d - 1) = S(0);
    }
    return pe;
}

template <typename S>
Mat<S> embed_tokens(const ParamStore<S>& store, const ModelConfig& c,
                    std::span<const int> ids, int pos_offset) {
    const auto& emb = store.at("embed.tok");
    const S scale = static_cast<S>(std::sqrt(double(c.d_model)));
    Mat<S> x(ids.size(), c.d_model);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= c.vocab_size)
            throw error("token id out of range: " + std::to_string(ids[i]));
        x.row(Eigen::Index(i)) = emb.row(ids[i]) * scale;
    }
    x += sinusoidal_positions<S>(pos_offset, int(ids.size()), c.d_model);
    return x;
}

// Multi-head attention of queries (rows at absolute positions
// q_offset..q_offset+m) against keys/values (rows 0..n). With causal=true
// a query at absolute position p sees keys 0..p only.
template <typename S>
Mat<S> attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, int heads,
                 bool causal, int q_offset,
                 std::vector<Mat<S>>* probs_out = nullptr) {
    const int d = int(q.cols());
    const int dk = d / heads;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(double(dk)));
    Mat<S> out(q.rows(), d);
    if (probs_out) probs_out->resize(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * dk, dk);
        auto kh = k.middleCols(h * dk, dk);
        auto vh = v.middleCols(h * dk, dk);
        Mat<S> scores = (qh * kh.transpose()) * inv_sqrt;  // (m x n)
        if (causal) {
            for (Eigen::Index r = 0; r < scores.rows(); ++r) {
                const Eigen::Index visible = q_offset + r + 1;
                for (Eigen::Index cidx = visible; cidx < scores.cols(); ++cidx)
                    scores(r, cidx) = -std::numeric_limits<S>::infinity();
            }
        }
        nn::softmax_rows_inplace(scores);
        out.middleCols(h * dk, dk) = scores * vh;
        if (probs_out) (*probs_out)[size_t(h)] = std::move(scores);
    }
    return out;
}

template <typename S>
Mat<S> linear(const Mat<S>& x, const ParamStore<S>& store, const std::string& w,
              const std::string& b) {
    return (x * store.at(w)).rowwise() + store.at(b).row(0);
}

}  // namespace detail

template <typename S = float>
EncState<S> encode(const ModelParameters<S>& p, std::span<const int> src) {
    const auto& c = p.config;
    if (int(src.size()) > c.max_len) throw error("source length exceeds max_len");
    EncState<S> enc;
    enc.len = int(src.size());
    Mat<S> x = detail::embed_tokens(p.store, c, src, 0);
    for (int l = 0; l < c.layers_enc; ++l) {
        const auto ln1 = detail::enc_name(l, "ln1");
        const auto at = detail::enc_name(l, "attn");
        const auto ln2 = detail::enc_name(l, "ln2");
        const auto ff = detail::enc_name(l, "ff");
        Mat<S> n1 = nn::layer_norm<S>(x, p.store.at(ln1 + ".g"), p.store.at(ln1 + ".b"));
        Mat<S> q = detail::linear(n1, p.store, at + ".wq", at + ".bq");
        Mat<S> k = detail::linear(n1, p.store, at + ".wk", at + ".bk");
        Mat<S> v = detail::linear(n1, p.store, at + ".wv", at + ".bv");
        Mat<S> att = detail::attention(q, k, v, c.attn_heads, false, 0);
        x += detail::linear(att, p.store, at + ".wo", at + ".bo");
        Mat<S> n2 = nn::layer_norm<S>(x, p.store.at(ln2 + ".g"), p.store.at(ln2 + ".b"));
        Mat<S> h1 = detail::linear(n2, p.store, ff + ".w1", ff + ".b1");
        h1 = h1.cwiseMax(S(0));
        x += detail::linear(h1, p.store, ff + ".w2", ff + ".b2");
    }
    enc.out = nn::layer_norm<S>(x, p.store.at("enc.final_ln.g"), p.store.at("enc.final_ln.b"));
    enc.cross_k.resize(size_t(c.layers_dec));
    enc.cross_v.resize(size_t(c.layers_dec));
    for (int l = 0; l < c.layers_dec; ++l) {
        const auto cr = detail::dec_name(l, "cross");
        enc.cross_k[size_t(l)] = detail::linear(enc.out, p.store, cr + ".wk", cr + ".bk");
        enc.cross_v[size_t(l)] = detail::linear(enc.out, p.store, cr + ".wv", cr + ".bv");
    }
    return enc;
}

template <typename S = float>
DecCache<S> make_cache(const ModelParameters<S>& p) {
    DecCache<S> cache;
    cache.self_k.assign(size_t(p.config.layers_dec), Mat<S>(0, p.config.d_model));
    cache.self_v.assign(size_t(p.config.layers_dec), Mat<S>(0, p.config.d_model));
    return cache;
}

// Feed new_tokens after the cached prefix; the cache grows by
// new_tokens.size(). Logits with the cache match a full recompute of the
// whole prefix.
template <typename S = float>
StepLogits<S> decode_step(const ModelParameters<S>& p, const EncState<S>& enc,
                          DecCache<S>& cache, std::span<const int> new_tokens,
                          extra_heads_mode extras = extra_heads_mode::none) {
    const auto& c = p.config;
    const int m = int(new_tokens.size());
    if (m == 0) throw error("decode_step: empty token block");
    if (cache.len + m > c.max_len) throw error("decoder length exceeds max_len");
    Mat<S> x = detail::embed_tokens(p.store, c, new_tokens, cache.len);
    for (int l = 0; l < c.layers_dec; ++l) {
        const auto ln1 = detail::dec_name(l, "ln1");
        const auto self = detail::dec_name(l, "self");
        const auto ln2 = detail::dec_name(l, "ln2");
        const auto cross = detail::dec_name(l, "cross");
        const auto ln3 = detail::dec_name(l, "ln3");
        const auto ff = detail::dec_name(l, "ff");

        Mat<S> n1 = nn::layer_norm<S>(x, p.store.at(ln1 + ".g"), p.store.at(ln1 + ".b"));
        Mat<S> q = detail::linear(n1, p.store, self + ".wq", self + ".bq");
        Mat<S> k_new = detail::linear(n1, p.store, self + ".wk", self + ".bk");
        Mat<S> v_new = detail::linear(n1, p.store, self + ".wv", self + ".bv");
        auto& k_cat = cache.self_k[size_t(l)];
        auto& v_cat = cache.self_v[size_t(l)];
        const Eigen::Index old_rows = k_cat.rows();
        k_cat.conservativeResize(old_rows + m, c.d_model);
        v_cat.conservativeResize(old_rows + m, c.d_model);
        k_cat.bottomRows(m) = k_new;
        v_cat.bottomRows(m) = v_new;
        Mat<S> att = detail::attention<S>(q, k_cat, v_cat, c.attn_heads, true, cache.len);
        x += detail::linear(att, p.store, self + ".wo", self + ".bo");

        Mat<S> n2 = nn::layer_norm<S>(x, p.store.at(ln2 + ".g"), p.store.at(ln2 + ".b"));
        Mat<S> q2 = detail::linear(n2, p.store, cross + ".wq", cross + ".bq");
        Mat<S> att2 = detail::attention<S>(q2, enc.cross_k[size_t(l)], enc.cross_v[size_t(l)],
                                           c.attn_heads, false, 0);
        x += detail::linear(att2, p.store, cross + ".wo", cross + ".bo");

        Mat<S> n3 = nn::layer_norm<S>(x, p.store.at(ln3 + ".g"), p.store.at(ln3 + ".b"));
        Mat<S> h1 = detail::linear(n3, p.store, ff + ".w1", ff + ".b1");
        h1 = h1.cwiseMax(S(0));
        x += detail::linear(h1, p.store, ff + ".w2", ff + ".b2");
    }
    cache.len += m;
    Mat<S> h = nn::layer_norm<S>(x, p.store.at("dec.final_ln.g"), p.store.at("dec.final_ln.b"));

    const auto& emb = p.store.at("embed.tok");
    StepLogits<S> out;
    out.main = h * emb.transpose();
    if (extras == extra_heads_mode::none || c.medusa_heads == 0) return out;

    const bool last_only = (extras == extra_heads_mode::last_only);
    out.extra_last_only = last_only;
    Mat<S> base = last_only ? Mat<S>(h.bottomRows(1)) : h;
    out.extra.reserve(size_t(c.medusa_heads));
    for (int mh = 0; mh < c.medusa_heads; ++mh) {
        Mat<S> h1 = detail::linear(base, p.store, detail::medusa_name(mh, "w1"),
                                   detail::medusa_name(mh, "b1"));
        h1 = h1.cwiseMax(S(0));
        Mat<S> mo = detail::linear(h1, p.store, detail::medusa_name(mh, "w2"),
                                   detail::medusa_name(mh, "b2"));
        mo += base;
        mo = nn::layer_norm<S>(mo, p.store.at(detail::medusa_name(mh, "ln.g")),
                               p.store.at(detail::medusa_name(mh, "ln.b")));
        out.extra.push_back(mo * emb.transpose());
    }
    return out;
}

// Whole-prefix forward for a batch, as one logits block of shape
// (B, L, M+1, V). Rows shorter than the longest are zero-padded in the
// block; callers mask by length.
template <typename S = float>
LogitsBlock<S> forward(const ModelParameters<S>& p,
                       const std::vector<std::vector<int>>& src_batch,
                       const std::vector<std::vector<int>>& tgt_prefix_batch) {
    if (src_batch.size() != tgt_prefix_batch.size())
        throw error("forward: batch size mismatch");
    const auto& c = p.config;
    LogitsBlock<S> block;
    block.batch = int(src_batch.size());
    block.heads = c.medusa_heads + 1;
    block.vocab = c.vocab_size;
    for (const auto& t : tgt_prefix_batch)
        block.length = std::max(block.length, int(t.size()));
    block.rows.resize(src_batch.size());
    for (size_t b = 0; b < src_batch.size(); ++b) {
        auto enc = encode(p, std::span<const int>(src_batch[b]));
        auto cache = make_cache(p);
        auto step = decode_step<S>(p, enc, cache, std::span<const int>(tgt_prefix_batch[b]),
                                   extra_heads_mode::all);
        auto& row = block.rows[b];
        row.assign(size_t(block.heads), Mat<S>::Zero(block.length, c.vocab_size));
        row[0].topRows(step.main.rows()) = step.main;
        for (int mh = 0; mh < c.medusa_heads; ++mh)
            row[size_t(mh) + 1].topRows(step.extra[size_t(mh)].rows()) = step.extra[size_t(mh)];
    }
    return block;
}

}  // namespace retrospec::model
