#pragma once

// Small neural-net primitives over Eigen matrices. Activations are
// (positions x features) matrices; weights are (in x out). Everything is
// templated on the scalar so float runs fast and double backs the
// finite-difference checks.

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "retrospec/common.hpp"

namespace retrospec::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct NamedTensor {
    std::string name;
    Mat<S> value;
};

// Ordered collection of named tensors. Order is the allocation order,
// which fixes initialization, serialization and Adam traversal.
template <typename S>
class ParamStore {
public:
    Mat<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        if (index_.count(name)) throw error("duplicate tensor name: " + name);
        index_[name] = tensors_.size();
        tensors_.push_back({name, Mat<S>::Zero(rows, cols)});
        return tensors_.back().value;
    }

    Mat<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw error("no such tensor: " + name);
        return tensors_[it->second].value;
    }

    const Mat<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw error("no such tensor: " + name);
        return tensors_[it->second].value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<NamedTensor<S>>& tensors() { return tensors_; }
    const std::vector<NamedTensor<S>>& tensors() const { return tensors_; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& t : tensors_) n += static_cast<size_t>(t.value.size());
        return n;
    }

    // Same layout, all zeros. Used for gradients and optimizer moments.
    ParamStore zeros_like() const {
        ParamStore out;
        for (const auto& t : tensors_) out.add(t.name, t.value.rows(), t.value.cols());
        return out;
    }

    void set_zero() {
        for (auto& t : tensors_) t.value.setZero();
    }

    void accumulate(const ParamStore& other) {
        for (size_t i = 0; i < tensors_.size(); ++i)
            tensors_[i].value += other.tensors_[i].value;
    }

private:
    std::vector<NamedTensor<S>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

// ---- layer norm ------------------------------------------------------

template <typename S>
struct LayerNormTrace {
    Mat<S> normed;   // (x - mean) / std, per row
    Vec<S> inv_std;  // per row
};

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias,
                  LayerNormTrace<S>* trace = nullptr) {
    const S eps = static_cast<S>(1e-5);
    Mat<S> out(x.rows(), x.cols());
    Mat<S> normed(x.rows(), x.cols());
    Vec<S> inv_std(x.rows());
    const S n = static_cast<S>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S mean = x.row(r).mean();
        S var = (x.row(r).array() - mean).square().sum() / n;
        S is = S(1) / std::sqrt(var + eps);
        normed.row(r) = ((x.row(r).array() - mean) * is).matrix();
        inv_std(r) = is;
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        out.row(r) = normed.row(r).cwiseProduct(gain.row(0)) + bias.row(0);
    if (trace) {
        trace->normed = std::move(normed);
        trace->inv_std = std::move(inv_std);
    }
    return out;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& d_out, const LayerNormTrace<S>& trace,
                           const Mat<S>& gain, Mat<S>& d_gain, Mat<S>& d_bias) {
    Mat<S> dx(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        Eigen::Matrix<S, 1, Eigen::Dynamic> dn = d_out.row(r).cwiseProduct(gain.row(0));
        S mean_dn = dn.mean();
        S mean_dn_x = dn.cwiseProduct(trace.normed.row(r)).mean();
        dx.row(r) = ((dn.array() - mean_dn - trace.normed.row(r).array() * mean_dn_x) *
                     trace.inv_std(r))
                        .matrix();
    }
    d_gain.row(0) += (d_out.cwiseProduct(trace.normed)).colwise().sum();
    d_bias.row(0) += d_out.colwise().sum();
    return dx;
}

// ---- softmax ---------------------------------------------------------

// Row-wise softmax, numerically stabilized.
template <typename S>
void softmax_rows_inplace(Mat<S>& x) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S m = x.row(r).maxCoeff();
        x.row(r) = (x.row(r).array() - m).exp().matrix();
        x.row(r) /= x.row(r).sum();
    }
}

// d_scores for out = softmax(scores): dS = P .* (dP - rowsum(dP .* P))
template <typename S>
Mat<S> softmax_rows_backward(const Mat<S>& probs, const Mat<S>& d_probs) {
    Mat<S> ds(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        S dot = probs.row(r).cwiseProduct(d_probs.row(r)).sum();
        ds.row(r) = (probs.row(r).array() * (d_probs.row(r).array() - dot)).matrix();
    }
    return ds;
}

// Stable log-softmax of one logits row (any Eigen row expression) into
// natural-log probabilities in double.
template <typename Derived>
std::vector<double> log_softmax_row(const Eigen::DenseBase<Derived>& row) {
    const Eigen::Index n = row.size();
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) m = std::max(m, static_cast<double>(row(i)));
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) sum += std::exp(static_cast<double>(row(i)) - m);
    double lse = m + std::log(sum);
    std::vector<double> out(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] = static_cast<double>(row(i)) - lse;
    return out;
}

// ---- Adam ------------------------------------------------------------

template <typename S>
class Adam {
public:
    Adam(const ParamStore<S>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : m_(params.zeros_like()), v_(params.zeros_like()),
          lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<S>& params, const ParamStore<S>& grads, double lr_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        const S lr = static_cast<S>(lr_ * lr_scale);
        for (size_t i = 0; i < params.tensors().size(); ++i) {
            auto& p = params.tensors()[i].value;
            const auto& g = grads.tensors()[i].value;
            auto& m = m_.tensors()[i].value;
            auto& v = v_.tensors()[i].value;
            m = static_cast<S>(beta1_) * m + static_cast<S>(1.0 - beta1_) * g;
            v = static_cast<S>(beta2_) * v + static_cast<S>(1.0 - beta2_) * g.cwiseProduct(g);
            auto m_hat = (m / static_cast<S>(bc1)).array();
            auto v_hat = (v / static_cast<S>(bc2)).array();
            p.array() -= lr * m_hat / (v_hat.sqrt() + static_cast<S>(eps_));
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    ParamStore<S> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Global gradient-norm clipping; returns the pre-clip norm.
template <typename S>
double clip_grad_norm(ParamStore<S>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& t : grads.tensors()) sq += static_cast<double>(t.value.squaredNorm());
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        S scale = static_cast<S>(max_norm / (norm + 1e-12));
        for (auto& t : grads.tensors()) t.value *= scale;
    }
    return norm;
}

}  // namespace retrospec::nn
