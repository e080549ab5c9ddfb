// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lgen/nanolm/model.hpp"
#include "lgen/numcore/tensor.hpp"

namespace lgen::lora {

using num::Tensor;

/// The three FFN projections an expert adapts.
enum class Block { gate = 0, up = 1, down = 2 };
inline constexpr std::array<Block, 3> kBlocks{Block::gate, Block::up, Block::down};

lm::Proj to_proj(Block b);
const char* block_name(Block b);
/// (d_in, d_out) of the edge projection a block targets.
std::pair<std::size_t, std::size_t> block_dims(Block b, const lm::NanoLmConfig& edge);

struct PoolConfig {
    std::size_t n_experts = 8;
    std::size_t rank = 16;
    double alpha = 16.0;
    double dropout = 0.05;
    /// One expert bank per edge layer instead of a single shared bank.
    bool per_layer = false;

    [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank); }
    void validate(const lm::NanoLmConfig& edge) const;
    bool operator==(const PoolConfig&) const = default;
};

void to_json(nlohmann::json& j, const PoolConfig& c);
void from_json(const nlohmann::json& j, PoolConfig& c);

/// Low-rank pair with delta (alpha/r) A B; A is [d_in, r], B is [r, d_out].
template <typename T>
struct LoraBlock {
    Tensor<T> A;
    Tensor<T> B;
};

template <typename T>
struct LoraExpert {
    std::array<LoraBlock<T>, 3> blocks;

    LoraBlock<T>& block(Block b) { return blocks[static_cast<std::size_t>(b)]; }
    const LoraBlock<T>& block(Block b) const { return blocks[static_cast<std::size_t>(b)]; }
};

template <typename T>
struct ExpertPool {
    PoolConfig config;
    lm::NanoLmConfig edge;
    /// banks[0] when shared; banks[layer] when per_layer.
    std::vector<std::vector<LoraExpert<T>>> banks;

    [[nodiscard]] std::size_t n() const { return config.n_experts; }
    [[nodiscard]] const std::vector<LoraExpert<T>>& bank(std::size_t layer) const;
    [[nodiscard]] const LoraExpert<T>& expert(std::size_t layer, std::size_t j) const { return bank(layer).at(j); }

    [[nodiscard]] ExpertPool clone() const;
    template <typename U>
    [[nodiscard]] ExpertPool<U> cast() const;
    /// Names like "bank0.expert3.up.A"; handles share storage.
    [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const;
    void set_requires_grad(bool flag);
    [[nodiscard]] std::size_t parameter_count() const;
};

/// A ~ N(0, 0.02), B = 0, so every fresh expert contributes a zero delta.
template <typename T>
ExpertPool<T> init_pool(const PoolConfig& config, const lm::NanoLmConfig& edge, std::uint64_t seed);

/// Dense per-layer deltas, each shaped like the projection it targets.
template <typename T>
struct GeneratedLoRA {
    std::vector<std::array<Tensor<T>, 3>> deltas;

    [[nodiscard]] const Tensor<T>& delta(std::size_t layer, Block b) const {
        return deltas.at(layer)[static_cast<std::size_t>(b)];
    }
    [[nodiscard]] std::size_t layers() const { return deltas.size(); }
};

/// Delta^i = sum_j G[i,j] (alpha/r) A_j B_j for every layer and block.
/// Differentiable in the gates and the expert factors. `gates` is [L, n].
template <typename T>
GeneratedLoRA<T> assemble(const ExpertPool<T>& pool, const Tensor<T>& gates);

/// Copy of `edge` with W + Delta on every FFN projection. Graph-connected to
/// the deltas when they carry gradients; `edge` itself is never modified.
template <typename T>
lm::NanoLmWeights<T> merge(const lm::NanoLmWeights<T>& edge, const GeneratedLoRA<T>& lora);

/// Unmerged reference path: every FFN projection computes
/// x W + sum_j G[i,j] (alpha/r) (x A_j) B_j without forming a dense delta.
template <typename T>
Tensor<T> adapter_forward(const lm::NanoLmWeights<T>& edge, const ExpertPool<T>& pool, const Tensor<T>& gates,
                          const lm::PackedBatch& batch);

/// Forward hooks computing x W + dropout(x) Delta on the FFN projections;
/// dropout is skipped when `rng` is null or p is 0.
template <typename T>
lm::ForwardHooks<T> delta_hooks(const GeneratedLoRA<T>& lora, double dropout_p, std::mt19937_64* rng);

extern template struct ExpertPool<float>;
extern template struct ExpertPool<double>;

}  // namespace lgen::lora
