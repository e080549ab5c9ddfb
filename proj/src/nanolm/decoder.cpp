// SPDX-License-Identifier: Apache-2.0
#include "lgen/nanolm/decoder.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace lgen::lm {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;

template <typename T>
CMapR<T> as_mat(const Tensor<T>& t) {
    return CMapR<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatR<T> rms_rows(const MatR<T>& x, const Tensor<T>& weight) {
    const auto d = x.cols();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> g(weight.data().data(), d);
    MatR<T> out(x.rows(), d);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T ms = x.row(r).squaredNorm() / static_cast<T>(d);
        const T inv = T{1} / std::sqrt(ms + T(1e-5));
        out.row(r) = x.row(r).cwiseProduct(g) * inv;
    }
    return out;
}

}  // namespace

template <typename T>
KvDecoder<T>::KvDecoder(const NanoLmWeights<T>& weights) : w_(weights) {
    w_.config.validate();
    const auto n = w_.config.max_seq * w_.config.d_model;
    k_cache_.assign(w_.config.n_layers, std::vector<T>(n, T{0}));
    v_cache_.assign(w_.config.n_layers, std::vector<T>(n, T{0}));
}

template <typename T>
void KvDecoder<T>::reset() {
    pos_ = 0;
    logits_.clear();
}

template <typename T>
const std::vector<T>& KvDecoder<T>::append(std::span<const TokenId> ids) {
    const auto& cfg = w_.config;
    const auto n = static_cast<Eigen::Index>(ids.size());
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    if (n == 0) {
        throw std::invalid_argument("KvDecoder::append needs at least one token");
    }
    if (pos_ + ids.size() > cfg.max_seq) {
        throw std::length_error("decoder context of " + std::to_string(cfg.max_seq) + " tokens exhausted");
    }
    const auto tok = as_mat(w_.tok_emb);
    const auto posm = as_mat(w_.pos_emb);
    MatR<T> x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ids[i] >= cfg.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside the vocabulary");
        }
        x.row(i) = tok.row(ids[i]) + posm.row(static_cast<Eigen::Index>(pos_) + i);
    }

    const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
    const auto start = static_cast<Eigen::Index>(pos_);
    const auto total = start + n;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w_.layers[l];
        MatR<T> h = rms_rows<T>(x, lw.attn_norm);
        MatR<T> q = h * as_mat(lw.wq);
        MapR<T> kc(k_cache_[l].data(), static_cast<Eigen::Index>(cfg.max_seq), d);
        MapR<T> vc(v_cache_[l].data(), static_cast<Eigen::Index>(cfg.max_seq), d);
        kc.middleRows(start, n).noalias() = h * as_mat(lw.wk);
        vc.middleRows(start, n).noalias() = h * as_mat(lw.wv);
        MatR<T> att(n, d);
        for (Eigen::Index head = 0; head < static_cast<Eigen::Index>(cfg.n_heads); ++head) {
            const auto c0 = head * hd;
            MatR<T> scores = (q.middleCols(c0, hd) * kc.block(0, c0, total, hd).transpose()) * inv_sqrt;
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto visible = start + i + 1;
                const T mx = scores.row(i).head(visible).maxCoeff();
                T z{0};
                for (Eigen::Index j = 0; j < visible; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    z += scores(i, j);
                }
                for (Eigen::Index j = 0; j < total; ++j) {
                    scores(i, j) = j < visible ? scores(i, j) / z : T{0};
                }
            }
            att.middleCols(c0, hd).noalias() = scores * vc.block(0, c0, total, hd);
        }
        x.noalias() += att * as_mat(lw.wo);
        h = rms_rows<T>(x, lw.ffn_norm);
        MatR<T> g = h * as_mat(lw.w_gate);
        MatR<T> u = h * as_mat(lw.w_up);
        MatR<T> a = g.unaryExpr([](T v) { return v / (T{1} + std::exp(-v)); }).cwiseProduct(u);
        x.noalias() += a * as_mat(lw.w_down);
    }
    MatR<T> last = rms_rows<T>(x.bottomRows(1), w_.final_norm);
    logits_.resize(cfg.vocab_size);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> out(logits_.data(), static_cast<Eigen::Index>(cfg.vocab_size));
    out.noalias() = last * tok.transpose();
    pos_ += ids.size();
    return logits_;
}

template <typename T>
TokenId argmax_token(std::span<const T> logits) {
    if (logits.empty()) {
        throw std::invalid_argument("argmax over empty logits");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return static_cast<TokenId>(best);
}

template <typename T>
TokenSeq generate_greedy(const NanoLmWeights<T>& weights, const TokenSeq& prompt, std::size_t max_new) {
    if (prompt.empty()) {
        throw std::invalid_argument("generate_greedy needs a nonempty prompt");
    }
    TokenSeq out = prompt;
    if (max_new == 0) {
        return out;
    }
    KvDecoder<T> dec(weights);
    const auto* logits = &dec.append(prompt.ids);
    for (std::size_t i = 0; i < max_new && out.size() < dec.capacity(); ++i) {
        const TokenId next = argmax_token<T>(*logits);
        out.push_back(next, Segment::answer);
        if (next == kEndOfAnswer || out.size() >= dec.capacity() || i + 1 == max_new) {
            break;
        }
        logits = &dec.step(next);
    }
    return out;
}

template class KvDecoder<float>;
template class KvDecoder<double>;
template TokenId argmax_token<float>(std::span<const float>);
template TokenId argmax_token<double>(std::span<const double>);
template TokenSeq generate_greedy<float>(const NanoLmWeights<float>&, const TokenSeq&, std::size_t);
template TokenSeq generate_greedy<double>(const NanoLmWeights<double>&, const TokenSeq&, std::size_t);

}  // namespace lgen::lm
