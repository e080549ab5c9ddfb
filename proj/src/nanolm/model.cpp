// SPDX-License-Identifier: Apache-2.0
#include "lgen/nanolm/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "lgen/numcore/ops.hpp"
#include "lgen/numcore/random.hpp"

namespace lgen::lm {

namespace {

// Small models train far faster from a width-scaled init than from the usual fixed 0.02.
constexpr double kInitGain = 0.6;

template <typename T>
void check_shape(const Tensor<T>& t, const num::Shape& expected, const std::string& name) {
    if (!t.defined()) {
        throw std::invalid_argument("weight '" + name + "' is missing");
    }
    if (t.shape() != expected) {
        throw num::ShapeError("weight '" + name + "' has shape " + num::shape_str(t.shape()) + ", expected " +
                              num::shape_str(expected));
    }
    for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw std::domain_error("weight '" + name + "' holds a non-finite value");
        }
    }
}

}  // namespace

const char* proj_name(Proj p) {
    switch (p) {
        case Proj::q: return "wq";
        case Proj::k: return "wk";
        case Proj::v: return "wv";
        case Proj::o: return "wo";
        case Proj::gate: return "w_gate";
        case Proj::up: return "w_up";
        case Proj::down: return "w_down";
    }
    return "?";
}

template <typename T>
NanoLmWeights<T> NanoLmWeights<T>::init(const NanoLmConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(num::derive_seed(seed, "nanolm.init"));
    const auto d = config.d_model;
    const auto ff = config.d_ff;
    const double base_std = kInitGain / std::sqrt(static_cast<double>(d));
    const double resid_std = base_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    NanoLmWeights w;
    w.config = config;
    w.tok_emb = num::randn<T>({config.vocab_size, d}, base_std, rng);
    w.pos_emb = num::randn<T>({config.max_seq, d}, base_std / 2, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights<T> lw;
        lw.attn_norm = num::filled<T>({d}, T{1});
        lw.wq = num::randn<T>({d, d}, base_std, rng);
        lw.wk = num::randn<T>({d, d}, base_std, rng);
        lw.wv = num::randn<T>({d, d}, base_std, rng);
        lw.wo = num::randn<T>({d, d}, resid_std, rng);
        lw.ffn_norm = num::filled<T>({d}, T{1});
        lw.w_gate = num::randn<T>({d, ff}, base_std, rng);
        lw.w_up = num::randn<T>({d, ff}, base_std, rng);
        lw.w_down = num::randn<T>({ff, d}, resid_std, rng);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = num::filled<T>({d}, T{1});
    return w;
}

template <typename T>
NanoLmWeights<T> NanoLmWeights<T>::zeros(const NanoLmConfig& config) {
    config.validate();
    const auto d = config.d_model;
    const auto ff = config.d_ff;
    NanoLmWeights w;
    w.config = config;
    w.tok_emb = Tensor<T>({config.vocab_size, d});
    w.pos_emb = Tensor<T>({config.max_seq, d});
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights<T> lw;
        lw.attn_norm = Tensor<T>({d});
        lw.wq = Tensor<T>({d, d});
        lw.wk = Tensor<T>({d, d});
        lw.wv = Tensor<T>({d, d});
        lw.wo = Tensor<T>({d, d});
        lw.ffn_norm = Tensor<T>({d});
        lw.w_gate = Tensor<T>({d, ff});
        lw.w_up = Tensor<T>({d, ff});
        lw.w_down = Tensor<T>({ff, d});
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor<T>({d});
    return w;
}

template <typename T>
NanoLmWeights<T> NanoLmWeights<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
NanoLmWeights<U> NanoLmWeights<T>::cast() const {
    NanoLmWeights<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    for (const auto& lw : layers) {
        LayerWeights<U> o;
        o.attn_norm = lw.attn_norm.template cast<U>();
        o.wq = lw.wq.template cast<U>();
        o.wk = lw.wk.template cast<U>();
        o.wv = lw.wv.template cast<U>();
        o.wo = lw.wo.template cast<U>();
        o.ffn_norm = lw.ffn_norm.template cast<U>();
        o.w_gate = lw.w_gate.template cast<U>();
        o.w_up = lw.w_up.template cast<U>();
        o.w_down = lw.w_down.template cast<U>();
        out.layers.push_back(std::move(o));
    }
    out.final_norm = final_norm.template cast<U>();
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> NanoLmWeights<T>::named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto p = "layers." + std::to_string(l) + ".";
        const auto& lw = layers[l];
        out.emplace_back(p + "attn_norm", lw.attn_norm);
        out.emplace_back(p + "wq", lw.wq);
        out.emplace_back(p + "wk", lw.wk);
        out.emplace_back(p + "wv", lw.wv);
        out.emplace_back(p + "wo", lw.wo);
        out.emplace_back(p + "ffn_norm", lw.ffn_norm);
        out.emplace_back(p + "w_gate", lw.w_gate);
        out.emplace_back(p + "w_up", lw.w_up);
        out.emplace_back(p + "w_down", lw.w_down);
    }
    out.emplace_back("final_norm", final_norm);
    return out;
}

template <typename T>
Tensor<T>& NanoLmWeights<T>::projection(std::size_t layer, Proj p) {
    auto& lw = layers.at(layer);
    switch (p) {
        case Proj::q: return lw.wq;
        case Proj::k: return lw.wk;
        case Proj::v: return lw.wv;
        case Proj::o: return lw.wo;
        case Proj::gate: return lw.w_gate;
        case Proj::up: return lw.w_up;
        case Proj::down: return lw.w_down;
    }
    throw std::invalid_argument("unknown projection");
}

template <typename T>
const Tensor<T>& NanoLmWeights<T>::projection(std::size_t layer, Proj p) const {
    return const_cast<NanoLmWeights*>(this)->projection(layer, p);
}

template <typename T>
void NanoLmWeights<T>::set_requires_grad(bool flag) {
    for (auto& [name, t] : named_tensors()) {
        t.set_requires_grad(flag);
    }
}

template <typename T>
void NanoLmWeights<T>::validate() const {
    config.validate();
    if (layers.size() != config.n_layers) {
        throw num::ShapeError("weights hold " + std::to_string(layers.size()) + " layers, config says " +
                              std::to_string(config.n_layers));
    }
    const auto d = config.d_model;
    const auto ff = config.d_ff;
    for (const auto& [name, t] : named_tensors()) {
        num::Shape expected;
        if (name == "tok_emb") {
            expected = {config.vocab_size, d};
        } else if (name == "pos_emb") {
            expected = {config.max_seq, d};
        } else if (name.ends_with("norm")) {
            expected = {d};
        } else if (name.ends_with("w_gate") || name.ends_with("w_up")) {
            expected = {d, ff};
        } else if (name.ends_with("w_down")) {
            expected = {ff, d};
        } else {
            expected = {d, d};
        }
        check_shape(t, expected, name);
    }
}

PackedBatch PackedBatch::single(const std::vector<TokenId>& ids) {
    return PackedBatch{ids, {ids.size()}};
}

PackedBatch PackedBatch::pack(const std::vector<TokenSeq>& seqs) {
    PackedBatch b;
    for (const auto& s : seqs) {
        b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
        b.lengths.push_back(s.size());
    }
    return b;
}

std::size_t PackedBatch::offset(std::size_t i) const {
    std::size_t off = 0;
    for (std::size_t j = 0; j < i; ++j) {
        off += lengths.at(j);
    }
    return off;
}

template <typename T>
Tensor<T> forward_hidden(const NanoLmWeights<T>& w, const PackedBatch& batch, const ForwardHooks<T>* hooks) {
    const auto& cfg = w.config;
    if (batch.ids.empty()) {
        throw std::invalid_argument("forward on an empty batch");
    }
    std::vector<std::uint32_t> positions;
    positions.reserve(batch.total());
    std::size_t counted = 0;
    for (auto len : batch.lengths) {
        if (len == 0) {
            throw std::invalid_argument("packed batch holds an empty sequence");
        }
        if (len > cfg.max_seq) {
            throw std::length_error("sequence of " + std::to_string(len) + " tokens exceeds max_seq " +
                                    std::to_string(cfg.max_seq));
        }
        for (std::size_t p = 0; p < len; ++p) {
            positions.push_back(static_cast<std::uint32_t>(p));
        }
        counted += len;
    }
    if (counted != batch.total()) {
        throw std::invalid_argument("packed batch lengths do not cover its ids");
    }
    for (auto id : batch.ids) {
        if (id >= cfg.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside the vocabulary");
        }
    }

    auto linear = [&](std::size_t layer, Proj p, const Tensor<T>& x) {
        const auto& weight = w.projection(layer, p);
        if (hooks && hooks->linear) {
            return hooks->linear(layer, p, x, weight);
        }
        return num::matmul(x, weight);
    };

    Tensor<T> tok = num::embedding(w.tok_emb, std::span<const std::uint32_t>(batch.ids));
    if (hooks && hooks->embed) {
        tok = hooks->embed(tok, batch);
    }
    Tensor<T> x = num::add(tok, num::embedding(w.pos_emb, std::span<const std::uint32_t>(positions)));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        auto h = num::rmsnorm(x, lw.attn_norm);
        auto att = num::causal_attention(linear(l, Proj::q, h), linear(l, Proj::k, h), linear(l, Proj::v, h),
                                         cfg.n_heads, std::span<const std::size_t>(batch.lengths));
        x = num::add(x, linear(l, Proj::o, att));
        h = num::rmsnorm(x, lw.ffn_norm);
        auto inner = num::mul(num::silu(linear(l, Proj::gate, h)), linear(l, Proj::up, h));
        x = num::add(x, linear(l, Proj::down, inner));
    }
    return num::rmsnorm(x, w.final_norm);
}

template <typename T>
Tensor<T> forward_logits(const NanoLmWeights<T>& w, const PackedBatch& batch, const ForwardHooks<T>* hooks) {
    return num::matmul_bt(forward_hidden(w, batch, hooks), w.tok_emb);
}

template <typename T>
Tensor<T> forward_logits(const NanoLmWeights<T>& w, const TokenSeq& seq) {
    return forward_logits(w, PackedBatch::single(seq.ids));
}

template struct NanoLmWeights<float>;
template struct NanoLmWeights<double>;
template NanoLmWeights<double> NanoLmWeights<float>::cast<double>() const;
template NanoLmWeights<float> NanoLmWeights<double>::cast<float>() const;

#define LGEN_INSTANTIATE_LM(T)                                                                               \
    template Tensor<T> forward_hidden<T>(const NanoLmWeights<T>&, const PackedBatch&, const ForwardHooks<T>*); \
    template Tensor<T> forward_logits<T>(const NanoLmWeights<T>&, const PackedBatch&, const ForwardHooks<T>*); \
    template Tensor<T> forward_logits<T>(const NanoLmWeights<T>&, const TokenSeq&);
LGEN_INSTANTIATE_LM(float)
LGEN_INSTANTIATE_LM(double)
#undef LGEN_INSTANTIATE_LM

}  // namespace lgen::lm
