// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lgen/nanolm/config.hpp"
#include "lgen/nanolm/tokenizer.hpp"
#include "lgen/numcore/tensor.hpp"

namespace lgen::lm {

using num::Tensor;

/// Linear maps are stored input-major: y = x W with W of shape [d_in, d_out].
template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm;  // [d]
    Tensor<T> wq, wk, wv, wo;  // [d, d]
    Tensor<T> ffn_norm;  // [d]
    Tensor<T> w_gate, w_up;  // [d, d_ff]
    Tensor<T> w_down;  // [d_ff, d]
};

enum class Proj { q, k, v, o, gate, up, down };

const char* proj_name(Proj p);

template <typename T>
struct NanoLmWeights {
    NanoLmConfig config;
    Tensor<T> tok_emb;  // [V, d], also the output head
    Tensor<T> pos_emb;  // [max_seq, d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d]

    /// Gaussian init with std 0.6/sqrt(d_model) (positions half that, residual
    /// outputs scaled by 1/sqrt(2L)), unit norms.
    static NanoLmWeights init(const NanoLmConfig& config, std::uint64_t seed);
    static NanoLmWeights zeros(const NanoLmConfig& config);

    [[nodiscard]] NanoLmWeights clone() const;
    template <typename U>
    [[nodiscard]] NanoLmWeights<U> cast() const;

    /// Handles share storage with this weight set. Names are stable and used
    /// as checkpoint keys, e.g. "layers.2.w_up".
    [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    [[nodiscard]] Tensor<T>& projection(std::size_t layer, Proj p);
    [[nodiscard]] const Tensor<T>& projection(std::size_t layer, Proj p) const;
    void set_requires_grad(bool flag);
    /// Throws on wrong shapes or non-finite values.
    void validate() const;
};

/// Several token sequences laid end to end; attention never crosses a boundary.
struct PackedBatch {
    std::vector<TokenId> ids;
    std::vector<std::size_t> lengths;

    static PackedBatch single(const std::vector<TokenId>& ids);
    static PackedBatch pack(const std::vector<TokenSeq>& seqs);
    [[nodiscard]] std::size_t total() const { return ids.size(); }
    /// Row offset of sequence i.
    [[nodiscard]] std::size_t offset(std::size_t i) const;
};

/// Optional interception points used by the adapter paths. `linear` replaces
/// y = x W for the given layer and projection; `embed` rewrites the token
/// embeddings (before positions are added).
template <typename T>
struct ForwardHooks {
    std::function<Tensor<T>(std::size_t layer, Proj proj, const Tensor<T>& x, const Tensor<T>& w)> linear;
    std::function<Tensor<T>(const Tensor<T>& tok_embedded, const PackedBatch& batch)> embed;
};

/// Final-norm hidden states, [total, d]. Throws std::length_error when any
/// sequence exceeds max_seq.
template <typename T>
Tensor<T> forward_hidden(const NanoLmWeights<T>& w, const PackedBatch& batch, const ForwardHooks<T>* hooks = nullptr);

template <typename T>
Tensor<T> forward_logits(const NanoLmWeights<T>& w, const PackedBatch& batch, const ForwardHooks<T>* hooks = nullptr);

template <typename T>
Tensor<T> forward_logits(const NanoLmWeights<T>& w, const TokenSeq& seq);

extern template struct NanoLmWeights<float>;
extern template struct NanoLmWeights<double>;

}  // namespace lgen::lm
