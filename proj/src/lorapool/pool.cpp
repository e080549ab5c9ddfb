// SPDX-License-Identifier: Apache-2.0
#include "lgen/lorapool/pool.hpp"

#include <stdexcept>

#include "lgen/numcore/ops.hpp"
#include "lgen/numcore/random.hpp"

namespace lgen::lora {

namespace {

constexpr double kAStd = 0.02;

template <typename T>
void check_gates(const Tensor<T>& gates, std::size_t layers, std::size_t n) {
    if (gates.rank() != 2 || gates.dim(1) != n) {
        throw num::ShapeError("gate matrix " + num::shape_str(gates.shape()) + " does not have " + std::to_string(n) +
                              " expert columns");
    }
    if (gates.dim(0) != layers) {
        throw num::ShapeError("gate matrix has " + std::to_string(gates.dim(0)) + " rows for " +
                              std::to_string(layers) + " edge layers");
    }
}

}  // namespace

lm::Proj to_proj(Block b) {
    switch (b) {
        case Block::gate: return lm::Proj::gate;
        case Block::up: return lm::Proj::up;
        case Block::down: return lm::Proj::down;
    }
    throw std::invalid_argument("unknown block");
}

const char* block_name(Block b) {
    switch (b) {
        case Block::gate: return "gate";
        case Block::up: return "up";
        case Block::down: return "down";
    }
    return "?";
}

std::pair<std::size_t, std::size_t> block_dims(Block b, const lm::NanoLmConfig& edge) {
    if (b == Block::down) {
        return {edge.d_ff, edge.d_model};
    }
    return {edge.d_model, edge.d_ff};
}

void PoolConfig::validate(const lm::NanoLmConfig& edge) const {
    if (n_experts == 0) {
        throw std::invalid_argument("expert pool needs at least one expert");
    }
    if (rank == 0 || rank > std::min(edge.d_model, edge.d_ff)) {
        throw std::invalid_argument("LoRA rank " + std::to_string(rank) + " must lie in [1, min(d_model, d_ff)]");
    }
    if (!(alpha > 0.0)) {
        throw std::invalid_argument("LoRA alpha must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw std::invalid_argument("LoRA dropout must lie in [0, 1)");
    }
}

void to_json(nlohmann::json& j, const PoolConfig& c) {
    j = nlohmann::json{{"n_experts", c.n_experts},
                       {"rank", c.rank},
                       {"alpha", c.alpha},
                       {"dropout", c.dropout},
                       {"per_layer", c.per_layer}};
}

void from_json(const nlohmann::json& j, PoolConfig& c) {
    c.n_experts = j.value("n_experts", c.n_experts);
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    c.dropout = j.value("dropout", c.dropout);
    c.per_layer = j.value("per_layer", c.per_layer);
}

template <typename T>
const std::vector<LoraExpert<T>>& ExpertPool<T>::bank(std::size_t layer) const {
    return config.per_layer ? banks.at(layer) : banks.at(0);
}

template <typename T>
ExpertPool<T> ExpertPool<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
ExpertPool<U> ExpertPool<T>::cast() const {
    ExpertPool<U> out;
    out.config = config;
    out.edge = edge;
    for (const auto& bank : banks) {
        std::vector<LoraExpert<U>> b;
        for (const auto& e : bank) {
            LoraExpert<U> c;
            for (auto blk : kBlocks) {
                c.block(blk).A = e.block(blk).A.template cast<U>();
                c.block(blk).B = e.block(blk).B.template cast<U>();
            }
            b.push_back(std::move(c));
        }
        out.banks.push_back(std::move(b));
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ExpertPool<T>::named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t b = 0; b < banks.size(); ++b) {
        for (std::size_t j = 0; j < banks[b].size(); ++j) {
            for (auto blk : kBlocks) {
                const auto p = "bank" + std::to_string(b) + ".expert" + std::to_string(j) + "." + block_name(blk);
                out.emplace_back(p + ".A", banks[b][j].block(blk).A);
                out.emplace_back(p + ".B", banks[b][j].block(blk).B);
            }
        }
    }
    return out;
}

template <typename T>
void ExpertPool<T>::set_requires_grad(bool flag) {
    for (auto& [name, t] : named_tensors()) {
        t.set_requires_grad(flag);
    }
}

template <typename T>
std::size_t ExpertPool<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) {
        n += t.numel();
    }
    return n;
}

template <typename T>
ExpertPool<T> init_pool(const PoolConfig& config, const lm::NanoLmConfig& edge, std::uint64_t seed) {
    edge.validate();
    config.validate(edge);
    std::mt19937_64 rng(num::derive_seed(seed, "lorapool.init"));
    ExpertPool<T> pool;
    pool.config = config;
    pool.edge = edge;
    const std::size_t n_banks = config.per_layer ? edge.n_layers : 1;
    for (std::size_t b = 0; b < n_banks; ++b) {
        std::vector<LoraExpert<T>> bank;
        for (std::size_t j = 0; j < config.n_experts; ++j) {
            LoraExpert<T> e;
            for (auto blk : kBlocks) {
                const auto [din, dout] = block_dims(blk, edge);
                e.block(blk).A = num::randn<T>({din, config.rank}, kAStd, rng);
                e.block(blk).B = Tensor<T>({config.rank, dout});
            }
            bank.push_back(std::move(e));
        }
        pool.banks.push_back(std::move(bank));
    }
    return pool;
}

template <typename T>
GeneratedLoRA<T> assemble(const ExpertPool<T>& pool, const Tensor<T>& gates) {
    const auto L = pool.edge.n_layers;
    const auto n = pool.n();
    const auto r = pool.config.rank;
    check_gates(gates, L, n);
    const T s = static_cast<T>(pool.config.scaling());

    // Stacking A_j side by side and B_j on top of each other turns the gated
    // sum of products into one product with per-column gate scaling.
    struct Stacked {
        std::array<Tensor<T>, 3> a_cat, b_cat;
    };
    std::vector<Stacked> stacked;
    for (const auto& bank : pool.banks) {
        Stacked st;
        for (auto blk : kBlocks) {
            std::vector<Tensor<T>> as, bs;
            for (const auto& e : bank) {
                as.push_back(e.block(blk).A);
                bs.push_back(e.block(blk).B);
            }
            st.a_cat[static_cast<std::size_t>(blk)] = num::concat_cols(as);
            st.b_cat[static_cast<std::size_t>(blk)] = num::concat_rows(bs);
        }
        stacked.push_back(std::move(st));
    }

    GeneratedLoRA<T> out;
    for (std::size_t i = 0; i < L; ++i) {
        const auto& st = stacked[pool.config.per_layer ? i : 0];
        const auto col_scale = num::scale(num::repeat_each(num::slice_rows(gates, i, i + 1), r), s);
        std::array<Tensor<T>, 3> d;
        for (auto blk : kBlocks) {
            const auto k = static_cast<std::size_t>(blk);
            d[k] = num::matmul(num::mul(st.a_cat[k], col_scale), st.b_cat[k]);
        }
        out.deltas.push_back(std::move(d));
    }
    return out;
}

template <typename T>
lm::NanoLmWeights<T> merge(const lm::NanoLmWeights<T>& edge, const GeneratedLoRA<T>& lora) {
    if (lora.layers() != edge.config.n_layers) {
        throw num::ShapeError("generated LoRA covers " + std::to_string(lora.layers()) + " layers, edge model has " +
                              std::to_string(edge.config.n_layers));
    }
    auto out = edge.clone();
    for (std::size_t i = 0; i < edge.config.n_layers; ++i) {
        for (auto blk : kBlocks) {
            const auto& w = edge.projection(i, to_proj(blk));
            const auto& d = lora.delta(i, blk);
            if (d.shape() != w.shape()) {
                throw num::ShapeError("delta " + num::shape_str(d.shape()) + " cannot merge into " +
                                      std::string(block_name(blk)) + " weight " + num::shape_str(w.shape()));
            }
            // Only graph-connected when the delta tracks gradients; otherwise a plain leaf.
            auto merged = num::add(w, d);
            out.projection(i, to_proj(blk)) = merged.requires_grad() ? merged : merged.clone();
        }
    }
    return out;
}

template <typename T>
Tensor<T> adapter_forward(const lm::NanoLmWeights<T>& edge, const ExpertPool<T>& pool, const Tensor<T>& gates,
                          const lm::PackedBatch& batch) {
    check_gates(gates, edge.config.n_layers, pool.n());
    if (pool.edge != edge.config) {
        throw num::ShapeError("expert pool was built for a different edge configuration");
    }
    const T s = static_cast<T>(pool.config.scaling());
    lm::ForwardHooks<T> hooks;
    hooks.linear = [&](std::size_t layer, lm::Proj p, const Tensor<T>& x, const Tensor<T>& w) {
        auto y = num::matmul(x, w);
        if (p != lm::Proj::gate && p != lm::Proj::up && p != lm::Proj::down) {
            return y;
        }
        const auto blk = p == lm::Proj::gate ? Block::gate : p == lm::Proj::up ? Block::up : Block::down;
        const auto& bank = pool.bank(layer);
        for (std::size_t j = 0; j < bank.size(); ++j) {
            const T g = gates.at(layer, j);
            if (g == T{0}) {
                continue;
            }
            const auto& lb = bank[j].block(blk);
            y = num::add(y, num::scale(num::matmul(num::matmul(x, lb.A), lb.B), g * s));
        }
        return y;
    };
    return lm::forward_logits(edge, batch, &hooks);
}

template <typename T>
lm::ForwardHooks<T> delta_hooks(const GeneratedLoRA<T>& lora, double dropout_p, std::mt19937_64* rng) {
    lm::ForwardHooks<T> hooks;
    hooks.linear = [lora, dropout_p, rng](std::size_t layer, lm::Proj p, const Tensor<T>& x, const Tensor<T>& w) {
        auto y = num::matmul(x, w);
        if (p != lm::Proj::gate && p != lm::Proj::up && p != lm::Proj::down) {
            return y;
        }
        const auto blk = p == lm::Proj::gate ? Block::gate : p == lm::Proj::up ? Block::up : Block::down;
        const auto& x_in = (rng && dropout_p > 0.0) ? num::dropout(x, static_cast<T>(dropout_p), *rng) : x;
        return num::add(y, num::matmul(x_in, lora.delta(layer, blk)));
    };
    return hooks;
}

template struct ExpertPool<float>;
template struct ExpertPool<double>;
template ExpertPool<double> ExpertPool<float>::cast<double>() const;
template ExpertPool<float> ExpertPool<double>::cast<float>() const;

#define LGEN_INSTANTIATE_POOL(T)                                                                          \
    template ExpertPool<T> init_pool<T>(const PoolConfig&, const lm::NanoLmConfig&, std::uint64_t);        \
    template GeneratedLoRA<T> assemble<T>(const ExpertPool<T>&, const Tensor<T>&);                         \
    template lm::NanoLmWeights<T> merge<T>(const lm::NanoLmWeights<T>&, const GeneratedLoRA<T>&);          \
    template Tensor<T> adapter_forward<T>(const lm::NanoLmWeights<T>&, const ExpertPool<T>&, const Tensor<T>&, \
                                          const lm::PackedBatch&);                                         \
    template lm::ForwardHooks<T> delta_hooks<T>(const GeneratedLoRA<T>&, double, std::mt19937_64*);
LGEN_INSTANTIATE_POOL(float)
LGEN_INSTANTIATE_POOL(double)
#undef LGEN_INSTANTIATE_POOL

}  // namespace lgen::lora
