#pragma once

// Training path: per-row tape forward, manual backprop, joint loss over
// the main head and the lookahead heads (head h weighted 1/(h+1), main
// head first), Adam loop with deterministic batching.

#include <atomic>
#include <functional>
#include <thread>

#include "retrospec/model.hpp"

namespace retrospec::model {

struct RowExample {
    std::vector<int> src;  // token ids, no specials
    std::vector<int> tgt;
};

// Teacher-forcing batch. Decoder input is [bos] + tgt, the gold stream
// is tgt + [eos]; head h's target at position i is gold[i + h], masked
// (-1) past the end of the sequence.
struct TrainBatch {
    std::vector<RowExample> rows;
    int heads = 1;  // M + 1
    std::vector<std::vector<std::vector<int>>> shifted_targets;  // [row][head][pos]

    static TrainBatch build(std::vector<RowExample> in_rows, int medusa_heads) {
        TrainBatch b;
        b.rows = std::move(in_rows);
        b.heads = medusa_heads + 1;
        b.shifted_targets.resize(b.rows.size());
        for (size_t r = 0; r < b.rows.size(); ++r) {
            const auto& tgt = b.rows[r].tgt;
            const int T = int(tgt.size()) + 1;
            std::vector<int> gold(tgt.begin(), tgt.end());
            gold.push_back(smiles::eos_id);
            auto& per_head = b.shifted_targets[r];
            per_head.assign(size_t(b.heads), std::vector<int>(size_t(T), -1));
            for (int h = 0; h < b.heads; ++h)
                for (int i = 0; i + h < T; ++i)
                    per_head[size_t(h)][size_t(i)] = gold[size_t(i + h)];
        }
        return b;
    }

    std::vector<std::vector<int>> decoder_inputs() const {
        std::vector<std::vector<int>> out(rows.size());
        for (size_t r = 0; r < rows.size(); ++r) {
            out[r].reserve(rows[r].tgt.size() + 1);
            out[r].push_back(smiles::bos_id);
            out[r].insert(out[r].end(), rows[r].tgt.begin(), rows[r].tgt.end());
        }
        return out;
    }

    // Unmasked positions per head over the whole batch.
    std::vector<int64_t> head_counts() const {
        std::vector<int64_t> n(size_t(heads), 0);
        for (const auto& per_head : shifted_targets)
            for (int h = 0; h < heads; ++h)
                for (int t : per_head[size_t(h)])
                    if (t >= 0) ++n[size_t(h)];
        return n;
    }
};

struct MedusaLoss {
    double total = 0.0;
    std::vector<double> per_head;  // mean cross-entropy per head, unweighted
};

// total = sum_h per_head[h] / (h + 1); per-head means ignore masked
// positions.
template <typename S>
MedusaLoss medusa_loss(const LogitsBlock<S>& block, const TrainBatch& batch) {
    if (block.batch != int(batch.rows.size())) throw error("medusa_loss: batch mismatch");
    if (block.heads != batch.heads) throw error("medusa_loss: head count mismatch");
    MedusaLoss out;
    out.per_head.assign(size_t(batch.heads), 0.0);
    auto counts = batch.head_counts();
    for (size_t r = 0; r < batch.rows.size(); ++r) {
        for (int h = 0; h < batch.heads; ++h) {
            const auto& targets = batch.shifted_targets[r][size_t(h)];
            const auto& logits = block.rows[r][size_t(h)];
            for (size_t i = 0; i < targets.size(); ++i) {
                if (targets[i] < 0) continue;
                auto lp = nn::log_softmax_row(logits.row(Eigen::Index(i)));
                out.per_head[size_t(h)] -= lp[size_t(targets[i])];
            }
        }
    }
    for (int h = 0; h < batch.heads; ++h) {
        if (counts[size_t(h)] > 0) out.per_head[size_t(h)] /= double(counts[size_t(h)]);
        out.total += out.per_head[size_t(h)] / double(h + 1);
    }
    return out;
}

namespace detail {

template <typename S>
struct AttnTrace {
    Mat<S> normed;  // LN output feeding q/k/v
    Mat<S> q, k, v;
    std::vector<Mat<S>> probs;
    Mat<S> concat;
};

template <typename S>
struct CrossTrace {
    Mat<S> normed;
    Mat<S> q;
    std::vector<Mat<S>> probs;
    Mat<S> concat;
};

template <typename S>
struct FfTrace {
    Mat<S> normed;
    Mat<S> pre1;
};

template <typename S>
struct EncLayerTrace {
    nn::LayerNormTrace<S> ln1, ln2;
    AttnTrace<S> att;
    FfTrace<S> ff;
    Mat<S> drop_att, drop_ff;  // empty when dropout is off
};

template <typename S>
struct DecLayerTrace {
    nn::LayerNormTrace<S> ln1, ln2, ln3;
    AttnTrace<S> self;
    CrossTrace<S> cross;
    FfTrace<S> ff;
    Mat<S> drop_self, drop_cross, drop_ff;
};

template <typename S>
struct MedusaTrace {
    Mat<S> pre1;
    Mat<S> ln_in_normed_out;  // LN output (head output before projection)
    nn::LayerNormTrace<S> ln;
};

template <typename S>
Mat<S> dropout_mask(rng* gen, double rate, Eigen::Index rows, Eigen::Index cols) {
    Mat<S> mask(rows, cols);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            mask(i, j) = gen->next_double() < rate ? S(0) : keep_scale;
    return mask;
}

// Backward through multi-head attention (shared q/k/v storage).
// d_concat -> (dq, dk, dv) given saved probabilities.
template <typename S>
void attention_backward(const AttnTrace<S>& tr, const Mat<S>& d_concat, int heads,
                        Mat<S>& dq, Mat<S>& dk, Mat<S>& dv) {
    const int d = int(tr.q.cols());
    const int dk_dim = d / heads;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(double(dk_dim)));
    dq.setZero(tr.q.rows(), d);
    dk.setZero(tr.k.rows(), d);
    dv.setZero(tr.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        auto qh = tr.q.middleCols(h * dk_dim, dk_dim);
        auto kh = tr.k.middleCols(h * dk_dim, dk_dim);
        auto vh = tr.v.middleCols(h * dk_dim, dk_dim);
        const auto& probs = tr.probs[size_t(h)];
        auto d_out_h = d_concat.middleCols(h * dk_dim, dk_dim);
        Mat<S> d_probs = d_out_h * vh.transpose();
        dv.middleCols(h * dk_dim, dk_dim) += probs.transpose() * d_out_h;
        Mat<S> d_scores = nn::softmax_rows_backward(probs, d_probs);
        dq.middleCols(h * dk_dim, dk_dim) += d_scores * kh * inv_sqrt;
        dk.middleCols(h * dk_dim, dk_dim) += d_scores.transpose() * qh * inv_sqrt;
    }
}

template <typename S>
Mat<S> linear_backward(const Mat<S>& d_out, const Mat<S>& input, const ParamStore<S>& params,
                       ParamStore<S>& grads, const std::string& w, const std::string& b) {
    grads.at(w) += input.transpose() * d_out;
    grads.at(b).row(0) += d_out.colwise().sum();
    return d_out * params.at(w).transpose();
}

}  // namespace detail

struct RowLossRaw {
    std::vector<double> head_loss_sum;  // sum of -log p over unmasked positions
    std::vector<int64_t> head_count;
};

// Forward + backward for one example. d_scale[h] multiplies head h's
// logit gradients (the train loop passes 1/((h+1) * N_h)). Gradients
// accumulate into `grads`; `gen` enables dropout when non-null and the
// config rate is positive.
template <typename S>
RowLossRaw forward_backward_row(const ModelParameters<S>& p, const RowExample& row,
                                const std::vector<double>& d_scale, ParamStore<S>& grads,
                                rng* gen = nullptr) {
    const auto& c = p.config;
    const int d = c.d_model;
    const int H = c.attn_heads;
    const int M = c.medusa_heads;
    const S emb_scale = static_cast<S>(std::sqrt(double(d)));
    const double rate = (gen != nullptr) ? c.dropout : 0.0;
    const auto& P = p.store;

    std::vector<int> dec_in;
    dec_in.reserve(row.tgt.size() + 1);
    dec_in.push_back(smiles::bos_id);
    dec_in.insert(dec_in.end(), row.tgt.begin(), row.tgt.end());
    std::vector<int> gold(row.tgt.begin(), row.tgt.end());
    gold.push_back(smiles::eos_id);
    const int T = int(dec_in.size());
    const int Ls = int(row.src.size());
    if (Ls == 0 || Ls > c.max_len || T > c.max_len) throw error("row length out of range");

    // ---- encoder forward ----
    Mat<S> x = detail::embed_tokens(P, c, std::span<const int>(row.src), 0);
    Mat<S> drop_emb_enc;
    if (rate > 0) {
        drop_emb_enc = detail::dropout_mask<S>(gen, rate, Ls, d);
        x = x.cwiseProduct(drop_emb_enc);
    }
    std::vector<detail::EncLayerTrace<S>> enc_tr(size_t(c.layers_enc));
    std::vector<Mat<S>> enc_x_in(size_t(c.layers_enc) + 1);  // residual stream snapshots
    for (int l = 0; l < c.layers_enc; ++l) {
        auto& tr = enc_tr[size_t(l)];
        enc_x_in[size_t(l)] = x;
        const auto ln1 = detail::enc_name(l, "ln1");
        const auto at = detail::enc_name(l, "attn");
        const auto ln2 = detail::enc_name(l, "ln2");
        const auto ff = detail::enc_name(l, "ff");
        tr.att.normed = nn::layer_norm<S>(x, P.at(ln1 + ".g"), P.at(ln1 + ".b"), &tr.ln1);
        tr.att.q = detail::linear(tr.att.normed, P, at + ".wq", at + ".bq");
        tr.att.k = detail::linear(tr.att.normed, P, at + ".wk", at + ".bk");
        tr.att.v = detail::linear(tr.att.normed, P, at + ".wv", at + ".bv");
        tr.att.concat = detail::attention(tr.att.q, tr.att.k, tr.att.v, H, false, 0, &tr.att.probs);
        Mat<S> sub = detail::linear(tr.att.concat, P, at + ".wo", at + ".bo");
        if (rate > 0) {
            tr.drop_att = detail::dropout_mask<S>(gen, rate, sub.rows(), sub.cols());
            sub = sub.cwiseProduct(tr.drop_att);
        }
        x += sub;
        tr.ff.normed = nn::layer_norm<S>(x, P.at(ln2 + ".g"), P.at(ln2 + ".b"), &tr.ln2);
        tr.ff.pre1 = detail::linear(tr.ff.normed, P, ff + ".w1", ff + ".b1");
        Mat<S> f1 = tr.ff.pre1.cwiseMax(S(0));
        Mat<S> sub2 = detail::linear(f1, P, ff + ".w2", ff + ".b2");
        if (rate > 0) {
            tr.drop_ff = detail::dropout_mask<S>(gen, rate, sub2.rows(), sub2.cols());
            sub2 = sub2.cwiseProduct(tr.drop_ff);
        }
        x += sub2;
    }
    enc_x_in[size_t(c.layers_enc)] = x;
    nn::LayerNormTrace<S> enc_fln_tr;
    Mat<S> enc_out = nn::layer_norm<S>(x, P.at("enc.final_ln.g"), P.at("enc.final_ln.b"), &enc_fln_tr);

    std::vector<Mat<S>> cross_k(size_t(c.layers_dec)), cross_v(size_t(c.layers_dec));
    for (int l = 0; l < c.layers_dec; ++l) {
        const auto cr = detail::dec_name(l, "cross");
        cross_k[size_t(l)] = detail::linear(enc_out, P, cr + ".wk", cr + ".bk");
        cross_v[size_t(l)] = detail::linear(enc_out, P, cr + ".wv", cr + ".bv");
    }

    // ---- decoder forward ----
    Mat<S> z = detail::embed_tokens(P, c, std::span<const int>(dec_in), 0);
    Mat<S> drop_emb_dec;
    if (rate > 0) {
        drop_emb_dec = detail::dropout_mask<S>(gen, rate, T, d);
        z = z.cwiseProduct(drop_emb_dec);
    }
    std::vector<detail::DecLayerTrace<S>> dec_tr(size_t(c.layers_dec));
    std::vector<Mat<S>> dec_z_in(size_t(c.layers_dec) + 1);
    for (int l = 0; l < c.layers_dec; ++l) {
        auto& tr = dec_tr[size_t(l)];
        dec_z_in[size_t(l)] = z;
        const auto ln1 = detail::dec_name(l, "ln1");
        const auto self = detail::dec_name(l, "self");
        const auto ln2 = detail::dec_name(l, "ln2");
        const auto cross = detail::dec_name(l, "cross");
        const auto ln3 = detail::dec_name(l, "ln3");
        const auto ff = detail::dec_name(l, "ff");

        tr.self.normed = nn::layer_norm<S>(z, P.at(ln1 + ".g"), P.at(ln1 + ".b"), &tr.ln1);
        tr.self.q = detail::linear(tr.self.normed, P, self + ".wq", self + ".bq");
        tr.self.k = detail::linear(tr.self.normed, P, self + ".wk", self + ".bk");
        tr.self.v = detail::linear(tr.self.normed, P, self + ".wv", self + ".bv");
        tr.self.concat =
            detail::attention(tr.self.q, tr.self.k, tr.self.v, H, true, 0, &tr.self.probs);
        Mat<S> sub = detail::linear(tr.self.concat, P, self + ".wo", self + ".bo");
        if (rate > 0) {
            tr.drop_self = detail::dropout_mask<S>(gen, rate, sub.rows(), sub.cols());
            sub = sub.cwiseProduct(tr.drop_self);
        }
        z += sub;

        tr.cross.normed = nn::layer_norm<S>(z, P.at(ln2 + ".g"), P.at(ln2 + ".b"), &tr.ln2);
        tr.cross.q = detail::linear(tr.cross.normed, P, cross + ".wq", cross + ".bq");
        {
            detail::AttnTrace<S> tmp;
            tmp.q = tr.cross.q;
            tmp.k = cross_k[size_t(l)];
            tmp.v = cross_v[size_t(l)];
            tr.cross.concat = detail::attention(tmp.q, tmp.k, tmp.v, H, false, 0, &tr.cross.probs);
        }
        Mat<S> sub2 = detail::linear(tr.cross.concat, P, cross + ".wo", cross + ".bo");
        if (rate > 0) {
            tr.drop_cross = detail::dropout_mask<S>(gen, rate, sub2.rows(), sub2.cols());
            sub2 = sub2.cwiseProduct(tr.drop_cross);
        }
        z += sub2;

        tr.ff.normed = nn::layer_norm<S>(z, P.at(ln3 + ".g"), P.at(ln3 + ".b"), &tr.ln3);
        tr.ff.pre1 = detail::linear(tr.ff.normed, P, ff + ".w1", ff + ".b1");
        Mat<S> f1 = tr.ff.pre1.cwiseMax(S(0));
        Mat<S> sub3 = detail::linear(f1, P, ff + ".w2", ff + ".b2");
        if (rate > 0) {
            tr.drop_ff = detail::dropout_mask<S>(gen, rate, sub3.rows(), sub3.cols());
            sub3 = sub3.cwiseProduct(tr.drop_ff);
        }
        z += sub3;
    }
    dec_z_in[size_t(c.layers_dec)] = z;
    nn::LayerNormTrace<S> dec_fln_tr;
    Mat<S> h = nn::layer_norm<S>(z, P.at("dec.final_ln.g"), P.at("dec.final_ln.b"), &dec_fln_tr);

    const auto& emb = P.at("embed.tok");

    // heads forward
    std::vector<detail::MedusaTrace<S>> med_tr(static_cast<size_t>(M));
    std::vector<Mat<S>> head_input(static_cast<size_t>(M));  // LN output per head (projection input)
    for (int m = 0; m < M; ++m) {
        auto& tr = med_tr[size_t(m)];
        tr.pre1 = detail::linear(h, P, detail::medusa_name(m, "w1"), detail::medusa_name(m, "b1"));
        Mat<S> a1 = tr.pre1.cwiseMax(S(0));
        Mat<S> mlp = detail::linear(a1, P, detail::medusa_name(m, "w2"), detail::medusa_name(m, "b2"));
        mlp += h;  // residual from the decoder hidden state
        head_input[size_t(m)] = nn::layer_norm<S>(mlp, P.at(detail::medusa_name(m, "ln.g")),
                                                  P.at(detail::medusa_name(m, "ln.b")), &tr.ln);
    }

    // ---- loss and logit gradients ----
    RowLossRaw result;
    result.head_loss_sum.assign(size_t(M + 1), 0.0);
    result.head_count.assign(size_t(M + 1), 0);

    Mat<S> dh = Mat<S>::Zero(T, d);
    Mat<S>& d_emb = grads.at("embed.tok");

    auto head_pass = [&](int head_index, const Mat<S>& input) {
        // logits = input * emb^T; softmax CE against shifted gold
        Mat<S> logits = input * emb.transpose();
        Mat<S> d_logits = Mat<S>::Zero(T, c.vocab_size);
        const double scale = d_scale[size_t(head_index)];
        for (int i = 0; i + head_index < T; ++i) {
            const int target = gold[size_t(i + head_index)];
            auto lp = nn::log_softmax_row(logits.row(i));
            result.head_loss_sum[size_t(head_index)] -= lp[size_t(target)];
            ++result.head_count[size_t(head_index)];
            for (int vtok = 0; vtok < c.vocab_size; ++vtok)
                d_logits(i, vtok) = static_cast<S>(std::exp(lp[size_t(vtok)]) * scale);
            d_logits(i, target) -= static_cast<S>(scale);
        }
        d_emb += d_logits.transpose() * input;
        return Mat<S>(d_logits * emb);  // gradient wrt head input
    };

    // main head
    dh += head_pass(0, h);
    // lookahead heads
    for (int m = 0; m < M; ++m) {
        Mat<S> d_head_out = head_pass(m + 1, head_input[size_t(m)]);
        auto& tr = med_tr[size_t(m)];
        Mat<S> d_res = nn::layer_norm_backward<S>(d_head_out, tr.ln,
                                                  P.at(detail::medusa_name(m, "ln.g")),
                                                  grads.at(detail::medusa_name(m, "ln.g")),
                                                  grads.at(detail::medusa_name(m, "ln.b")));
        dh += d_res;  // residual
        Mat<S> a1 = tr.pre1.cwiseMax(S(0));
        Mat<S> d_a1 = detail::linear_backward(d_res, a1, P, grads,
                                              detail::medusa_name(m, "w2"),
                                              detail::medusa_name(m, "b2"));
        Mat<S> d_pre1 = d_a1.cwiseProduct((tr.pre1.array() > S(0)).template cast<S>().matrix());
        dh += detail::linear_backward(d_pre1, h, P, grads, detail::medusa_name(m, "w1"),
                                      detail::medusa_name(m, "b1"));
    }

    // ---- decoder backward ----
    Mat<S> dz = nn::layer_norm_backward<S>(dh, dec_fln_tr, P.at("dec.final_ln.g"),
                                           grads.at("dec.final_ln.g"), grads.at("dec.final_ln.b"));
    std::vector<Mat<S>> d_cross_k(size_t(c.layers_dec)), d_cross_v(size_t(c.layers_dec));
    for (int l = c.layers_dec - 1; l >= 0; --l) {
        auto& tr = dec_tr[size_t(l)];
        const auto ln1 = detail::dec_name(l, "ln1");
        const auto self = detail::dec_name(l, "self");
        const auto ln2 = detail::dec_name(l, "ln2");
        const auto cross = detail::dec_name(l, "cross");
        const auto ln3 = detail::dec_name(l, "ln3");
        const auto ff = detail::dec_name(l, "ff");

        // ff block
        Mat<S> d_sub = rate > 0 ? dz.cwiseProduct(tr.drop_ff) : dz;
        Mat<S> f1 = tr.ff.pre1.cwiseMax(S(0));
        Mat<S> d_f1 = detail::linear_backward(d_sub, f1, P, grads, ff + ".w2", ff + ".b2");
        Mat<S> d_pre1 = d_f1.cwiseProduct((tr.ff.pre1.array() > S(0)).template cast<S>().matrix());
        Mat<S> d_n3 = detail::linear_backward(d_pre1, tr.ff.normed, P, grads, ff + ".w1", ff + ".b1");
        dz += nn::layer_norm_backward<S>(d_n3, tr.ln3, P.at(ln3 + ".g"), grads.at(ln3 + ".g"),
                                         grads.at(ln3 + ".b"));

        // cross attention block
        d_sub = rate > 0 ? dz.cwiseProduct(tr.drop_cross) : dz;
        Mat<S> d_concat2 =
            detail::linear_backward(d_sub, tr.cross.concat, P, grads, cross + ".wo", cross + ".bo");
        Mat<S> dq2, dk2, dv2;
        {
            detail::AttnTrace<S> tmp;
            tmp.q = tr.cross.q;
            tmp.k = cross_k[size_t(l)];
            tmp.v = cross_v[size_t(l)];
            tmp.probs = tr.cross.probs;
            detail::attention_backward(tmp, d_concat2, H, dq2, dk2, dv2);
        }
        d_cross_k[size_t(l)] = std::move(dk2);
        d_cross_v[size_t(l)] = std::move(dv2);
        Mat<S> d_n2 = detail::linear_backward(dq2, tr.cross.normed, P, grads, cross + ".wq",
                                              cross + ".bq");
        dz += nn::layer_norm_backward<S>(d_n2, tr.ln2, P.at(ln2 + ".g"), grads.at(ln2 + ".g"),
                                         grads.at(ln2 + ".b"));

        // self attention block
        d_sub = rate > 0 ? dz.cwiseProduct(tr.drop_self) : dz;
        Mat<S> d_concat =
            detail::linear_backward(d_sub, tr.self.concat, P, grads, self + ".wo", self + ".bo");
        Mat<S> dq, dk, dv;
        detail::attention_backward(tr.self, d_concat, H, dq, dk, dv);
        Mat<S> d_n1 = detail::linear_backward(dq, tr.self.normed, P, grads, self + ".wq", self + ".bq");
        d_n1 += detail::linear_backward(dk, tr.self.normed, P, grads, self + ".wk", self + ".bk");
        d_n1 += detail::linear_backward(dv, tr.self.normed, P, grads, self + ".wv", self + ".bv");
        dz += nn::layer_norm_backward<S>(d_n1, tr.ln1, P.at(ln1 + ".g"), grads.at(ln1 + ".g"),
                                         grads.at(ln1 + ".b"));
    }
    if (rate > 0) dz = dz.cwiseProduct(drop_emb_dec);
    for (int i = 0; i < T; ++i) d_emb.row(dec_in[size_t(i)]) += dz.row(i) * emb_scale;

    // ---- encoder backward ----
    Mat<S> d_enc_out = Mat<S>::Zero(Ls, d);
    for (int l = 0; l < c.layers_dec; ++l) {
        const auto cr = detail::dec_name(l, "cross");
        d_enc_out += detail::linear_backward(d_cross_k[size_t(l)], enc_out, P, grads,
                                             cr + ".wk", cr + ".bk");
        d_enc_out += detail::linear_backward(d_cross_v[size_t(l)], enc_out, P, grads,
                                             cr + ".wv", cr + ".bv");
    }
    Mat<S> dx = nn::layer_norm_backward<S>(d_enc_out, enc_fln_tr, P.at("enc.final_ln.g"),
                                           grads.at("enc.final_ln.g"), grads.at("enc.final_ln.b"));
    for (int l = c.layers_enc - 1; l >= 0; --l) {
        auto& tr = enc_tr[size_t(l)];
        const auto ln1 = detail::enc_name(l, "ln1");
        const auto at = detail::enc_name(l, "attn");
        const auto ln2 = detail::enc_name(l, "ln2");
        const auto ff = detail::enc_name(l, "ff");

        Mat<S> d_sub = rate > 0 ? dx.cwiseProduct(tr.drop_ff) : dx;
        Mat<S> f1 = tr.ff.pre1.cwiseMax(S(0));
        Mat<S> d_f1 = detail::linear_backward(d_sub, f1, P, grads, ff + ".w2", ff + ".b2");
        Mat<S> d_pre1 = d_f1.cwiseProduct((tr.ff.pre1.array() > S(0)).template cast<S>().matrix());
        Mat<S> d_n2 = detail::linear_backward(d_pre1, tr.ff.normed, P, grads, ff + ".w1", ff + ".b1");
        dx += nn::layer_norm_backward<S>(d_n2, tr.ln2, P.at(ln2 + ".g"), grads.at(ln2 + ".g"),
                                         grads.at(ln2 + ".b"));

        d_sub = rate > 0 ? dx.cwiseProduct(tr.drop_att) : dx;
        Mat<S> d_concat =
            detail::linear_backward(d_sub, tr.att.concat, P, grads, at + ".wo", at + ".bo");
        Mat<S> dq, dk, dv;
        detail::attention_backward(tr.att, d_concat, H, dq, dk, dv);
        Mat<S> d_n1 = detail::linear_backward(dq, tr.att.normed, P, grads, at + ".wq", at + ".bq");
        d_n1 += detail::linear_backward(dk, tr.att.normed, P, grads, at + ".wk", at + ".bk");
        d_n1 += detail::linear_backward(dv, tr.att.normed, P, grads, at + ".wv", at + ".bv");
        dx += nn::layer_norm_backward<S>(d_n1, tr.ln1, P.at(ln1 + ".g"), grads.at(ln1 + ".g"),
                                         grads.at(ln1 + ".b"));
    }
    if (rate > 0) dx = dx.cwiseProduct(drop_emb_enc);
    for (int i = 0; i < Ls; ++i) d_emb.row(row.src[size_t(i)]) += dx.row(i) * emb_scale;

    return result;
}

// ---- training loop ----------------------------------------------------

struct TrainSchedule {
    int epochs = 10;
    int64_t max_steps = 0;  // 0 = no cap
    int batch_size = 64;
    double lr = 1e-3;
    int warmup_steps = 200;
    double grad_clip = 1.0;
    int threads = 2;
    int64_t log_every = 50;
    // Called after every epoch; return true to stop early.
    std::function<bool(int epoch, int64_t step)> epoch_callback;
};

struct TrainLogEntry {
    int64_t step = 0;
    double total_loss = 0.0;
    std::vector<double> per_head;
};

struct TrainResult {
    std::vector<TrainLogEntry> log;
    int64_t steps = 0;

    // CSV: step,total_loss,loss_head_1..loss_head_{M+1}
    std::string to_csv() const {
        std::string out = "step,total_loss";
        if (!log.empty())
            for (size_t h = 0; h < log.front().per_head.size(); ++h)
                out += ",loss_head_" + std::to_string(h + 1);
        out += "\n";
        char buf[64];
        for (const auto& e : log) {
            out += std::to_string(e.step);
            snprintf(buf, sizeof buf, ",%.6f", e.total_loss);
            out += buf;
            for (double v : e.per_head) {
                snprintf(buf, sizeof buf, ",%.6f", v);
                out += buf;
            }
            out += "\n";
        }
        return out;
    }
};

// Deterministic for a fixed (config.seed, threads, batch order); rows are
// shuffled with a seeded permutation each epoch.
template <typename S>
TrainResult train_in_place(ModelParameters<S>& params, const std::vector<RowExample>& rows,
                           const TrainSchedule& sched) {
    if (rows.empty()) throw error("train: empty corpus");
    const auto& c = params.config;
    const int M = c.medusa_heads;
    const int n_threads = std::max(1, sched.threads);

    nn::Adam<S> opt(params.store, sched.lr);
    std::vector<ParamStore<S>> thread_grads;
    for (int t = 0; t < n_threads; ++t) thread_grads.push_back(params.store.zeros_like());

    TrainResult result;
    std::vector<size_t> order(rows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int64_t step = 0;
    rng shuffle_gen(c.seed ^ 0xba7c4f00dull);
    rng dropout_gen(c.seed ^ 0xd20b0a57ull);
    bool stop = false;
    for (int epoch = 0; epoch < sched.epochs && !stop; ++epoch) {
        // Fisher-Yates with the portable generator
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle_gen.next_below(i))]);

        for (size_t start = 0; start < rows.size() && !stop; start += size_t(sched.batch_size)) {
            const size_t end = std::min(rows.size(), start + size_t(sched.batch_size));
            const size_t bsz = end - start;

            // batch-level per-head counts fix the logit gradient scale
            std::vector<int64_t> head_n(size_t(M + 1), 0);
            for (size_t i = start; i < end; ++i) {
                const int T = int(rows[order[i]].tgt.size()) + 1;
                for (int h = 0; h <= M; ++h) head_n[size_t(h)] += std::max(0, T - h);
            }
            std::vector<double> d_scale(size_t(M + 1), 0.0);
            for (int h = 0; h <= M; ++h)
                if (head_n[size_t(h)] > 0)
                    d_scale[size_t(h)] = 1.0 / (double(h + 1) * double(head_n[size_t(h)]));

            // per-row dropout streams, pre-seeded so threading cannot
            // change the masks
            std::vector<uint64_t> row_seeds(bsz, 0);
            if (c.dropout > 0)
                for (size_t i = 0; i < bsz; ++i) row_seeds[i] = dropout_gen.next_u64();

            std::vector<RowLossRaw> row_losses(bsz);
            auto worker = [&](int tid) {
                auto& g = thread_grads[size_t(tid)];
                for (size_t i = size_t(tid); i < bsz; i += size_t(n_threads)) {
                    const auto& row = rows[order[start + i]];
                    if (c.dropout > 0) {
                        rng row_gen(row_seeds[i]);
                        row_losses[i] = forward_backward_row(params, row, d_scale, g, &row_gen);
                    } else {
                        row_losses[i] = forward_backward_row(params, row, d_scale, g, nullptr);
                    }
                }
            };
            if (n_threads == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
                for (auto& th : pool) th.join();
            }

            // reduce in thread order, then into grads[0]
            for (int t = 1; t < n_threads; ++t) {
                thread_grads[0].accumulate(thread_grads[size_t(t)]);
                thread_grads[size_t(t)].set_zero();
            }
            nn::clip_grad_norm(thread_grads[0], sched.grad_clip);

            const double lr_scale =
                sched.warmup_steps > 0
                    ? std::min(1.0, double(step + 1) / double(sched.warmup_steps))
                    : 1.0;
            opt.step(params.store, thread_grads[0], lr_scale);
            thread_grads[0].set_zero();
            ++step;
            params.train_step = step;

            // loss bookkeeping
            std::vector<double> head_loss(size_t(M + 1), 0.0);
            for (const auto& rl : row_losses)
                for (int h = 0; h <= M; ++h) head_loss[size_t(h)] += rl.head_loss_sum[size_t(h)];
            double total = 0.0;
            for (int h = 0; h <= M; ++h) {
                if (head_n[size_t(h)] > 0) head_loss[size_t(h)] /= double(head_n[size_t(h)]);
                total += head_loss[size_t(h)] / double(h + 1);
            }
            if (!std::isfinite(total))
                throw error("training diverged at step " + std::to_string(step) +
                            ": loss=" + std::to_string(total));
            if (sched.log_every > 0 && (step % sched.log_every == 0 || step == 1))
                result.log.push_back({step, total, head_loss});
            if (sched.max_steps > 0 && step >= sched.max_steps) stop = true;
        }
        if (sched.epoch_callback && !stop) stop = sched.epoch_callback(epoch, step);
    }
    result.steps = step;
    return result;
}

template <typename S = float>
std::pair<ModelParameters<S>, TrainResult> train(const std::vector<RowExample>& corpus,
                                                 const ModelConfig& config,
                                                 const TrainSchedule& sched,
                                                 uint64_t vocab_hash = 0) {
    auto params = init<S>(config, vocab_hash);
    auto log = train_in_place(params, corpus, sched);
    return {std::move(params), std::move(log)};
}

}  // namespace retrospec::model
