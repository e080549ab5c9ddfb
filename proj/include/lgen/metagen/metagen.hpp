// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lgen/lorapool/pool.hpp"
#include "lgen/nanolm/model.hpp"
#include "lgen/numcore/ops.hpp"

namespace lgen::meta {

using num::Tensor;

enum class GateMode { keeptopk, gumbel };
enum class GenMode { meta, direct };

std::string to_string(GateMode m);
std::string to_string(GenMode m);
GateMode gate_mode_from_string(const std::string& s);
GenMode gen_mode_from_string(const std::string& s);

/// `prompt` followed by the L distinct meta tokens, labelled as the meta segment.
/// Throws std::length_error when the result would not fit in max_seq.
lm::TokenSeq append_meta(const lm::TokenSeq& prompt, std::size_t n_meta, std::size_t max_seq);

/// Trainable additions to the frozen cloud model: LoRA on the q and v
/// projections of every layer plus the input embeddings of the meta tokens.
template <typename T>
struct CloudAdapter {
    std::vector<lora::LoraBlock<T>> q, v;
    Tensor<T> meta_emb;  // [L, d_cloud]
    std::size_t rank = 16;
    double alpha = 16.0;
    double dropout = 0.05;

    [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank); }
    [[nodiscard]] std::size_t n_meta() const { return meta_emb.dim(0); }
    [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    void set_requires_grad(bool flag);
    [[nodiscard]] CloudAdapter clone() const;
    template <typename U>
    [[nodiscard]] CloudAdapter<U> cast() const;
};

/// LoRA A ~ N(0, 0.02), B = 0; meta embeddings start from the cloud's own
/// embedding rows for the meta tokens.
template <typename T>
CloudAdapter<T> init_cloud_adapter(const lm::NanoLmWeights<T>& cloud, std::size_t n_meta, std::size_t rank,
                                   double alpha, double dropout, std::uint64_t seed);

template <typename T>
struct MetaStates {
    Tensor<T> states;  // [L, d_cloud]
    std::size_t prompt_token_count = 0;
};

/// One cloud forward over sequences that each end in an n_meta block.
/// Returns the final-norm hidden states of the meta positions, stacked
/// sequence-major: [seqs.size() * n_meta, d_cloud]. With an adapter its LoRA
/// and meta embeddings are applied; `dropout_rng` enables LoRA dropout.
template <typename T>
Tensor<T> meta_hidden(const lm::NanoLmWeights<T>& cloud, const CloudAdapter<T>* adapter,
                      const std::vector<lm::TokenSeq>& seqs, std::size_t n_meta, std::mt19937_64* dropout_rng = nullptr);

template <typename T>
MetaStates<T> extract_meta_states(const lm::NanoLmWeights<T>& cloud, const lm::TokenSeq& seq, std::size_t n_meta,
                                  const CloudAdapter<T>* adapter = nullptr);

/// R = BN(f2(silu(f1(x)))) with biased linear maps; one router shared by all layers.
template <typename T>
struct RouterWeights {
    Tensor<T> f1_w, f1_b;  // [d_cloud, d_router], [d_router]
    Tensor<T> f2_w, f2_b;  // [d_router, n], [n]
    Tensor<T> bn_gamma, bn_beta;  // [n]
    num::BatchNormState<T> bn;

    [[nodiscard]] std::size_t n_experts() const { return f2_w.dim(1); }
    /// Trainable parameters; the running statistics are stored separately.
    [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    void set_requires_grad(bool flag);
    [[nodiscard]] RouterWeights clone() const;
    template <typename U>
    [[nodiscard]] RouterWeights<U> cast() const;
    [[nodiscard]] std::size_t parameter_count() const;
};

template <typename T>
RouterWeights<T> init_router(std::size_t d_cloud, std::size_t d_router, std::size_t n_experts, std::uint64_t seed);

/// Train mode normalizes over the rows given and updates the running
/// statistics; infer mode uses them and throws UninitializedStatistics
/// before any training batch has been seen.
template <typename T>
Tensor<T> route(RouterWeights<T>& router, const Tensor<T>& states, num::BatchNormMode mode);

template <typename T>
struct GateMatrix {
    Tensor<T> gates;  // [rows, n]
    std::size_t k_used = 0;
};

/// Per row: softmax, keep the K largest (ties to the lower index), renormalize
/// over the kept set. Gradients reach only the kept logits.
template <typename T>
GateMatrix<T> gates_keeptopk(const Tensor<T>& logits, std::size_t k);

/// Per row softmax(R + g) with independent Gumbel(0,1) noise per entry.
/// `zero_noise` replaces g by 0.
template <typename T>
GateMatrix<T> gates_gumbel(const Tensor<T>& logits, std::mt19937_64& rng, bool zero_noise = false);

template <typename T>
GateMatrix<T> compute_gates(GateMode mode, const Tensor<T>& logits, std::size_t k, std::mt19937_64* rng);

/// Maps each meta state straight to three (A, B) pairs per layer, bypassing
/// the pool and router. Output width per layer is 3 r (d_model + d_ff).
template <typename T>
struct DirectProjection {
    Tensor<T> w;  // [d_cloud, width]
    Tensor<T> b;  // [width]
    lm::NanoLmConfig edge;
    std::size_t rank = 16;
    double alpha = 16.0;

    [[nodiscard]] std::size_t width() const { return w.dim(1); }
    [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    void set_requires_grad(bool flag);
    [[nodiscard]] DirectProjection clone() const;
    [[nodiscard]] std::size_t parameter_count() const { return w.numel() + b.numel(); }
};

/// Columns producing A entries ~ N(0, 0.02), columns producing B entries 0,
/// so the initial generated delta is zero.
template <typename T>
DirectProjection<T> init_direct(std::size_t d_cloud, const lm::NanoLmConfig& edge, std::size_t rank, double alpha,
                                std::uint64_t seed);

/// Per-layer deltas from meta states [L, d_cloud]; differentiable.
template <typename T>
lora::GeneratedLoRA<T> direct_lora(const DirectProjection<T>& proj, const Tensor<T>& states);

template <typename T>
struct Specialized {
    lm::NanoLmWeights<T> weights;
    GateMatrix<T> gates;  // empty for direct generation
    std::size_t prompt_tokens = 0;
};

/// Everything that turns a system prompt into edge weights.
template <typename T>
struct Generator {
    lm::NanoLmWeights<T> cloud;
    CloudAdapter<T> adapter;
    RouterWeights<T> router;
    lora::ExpertPool<T> pool;
    DirectProjection<T> direct;  // used only with GenMode::direct
    GenMode gen_mode = GenMode::meta;
    GateMode gate_mode = GateMode::keeptopk;
    std::size_t top_k = 2;
};

/// append_meta -> one cloud forward -> route(infer) -> gates -> assemble ->
/// merge. Nothing passed in is modified; `rng` is needed only for Gumbel gates.
template <typename T>
Specialized<T> specialize(const Generator<T>& gen, const lm::NanoLmWeights<T>& edge, const lm::TokenSeq& system_prompt,
                          std::mt19937_64* rng = nullptr);

extern template struct CloudAdapter<float>;
extern template struct CloudAdapter<double>;
extern template struct RouterWeights<float>;
extern template struct RouterWeights<double>;
extern template struct DirectProjection<float>;
extern template struct DirectProjection<double>;

}  // namespace lgen::meta
