// SPDX-License-Identifier: Apache-2.0
#include "lgen/metagen/metagen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "lgen/numcore/random.hpp"

namespace lgen::meta {

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> row_vector_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    return num::add(x, bias);
}

template <typename T>
void set_all(std::vector<std::pair<std::string, Tensor<T>>> named, bool flag) {
    for (auto& [name, t] : named) {
        t.set_requires_grad(flag);
    }
}

}  // namespace

std::string to_string(GateMode m) { return m == GateMode::keeptopk ? "keeptopk" : "gumbel"; }
std::string to_string(GenMode m) { return m == GenMode::meta ? "meta" : "direct"; }

GateMode gate_mode_from_string(const std::string& s) {
    if (s == "keeptopk") {
        return GateMode::keeptopk;
    }
    if (s == "gumbel") {
        return GateMode::gumbel;
    }
    throw std::invalid_argument("unknown gate mode '" + s + "' (expected keeptopk or gumbel)");
}

GenMode gen_mode_from_string(const std::string& s) {
    if (s == "meta") {
        return GenMode::meta;
    }
    if (s == "direct") {
        return GenMode::direct;
    }
    throw std::invalid_argument("unknown generation mode '" + s + "' (expected meta or direct)");
}

lm::TokenSeq append_meta(const lm::TokenSeq& prompt, std::size_t n_meta, std::size_t max_seq) {
    if (n_meta > lm::kMaxMetaTokens) {
        throw std::invalid_argument("at most " + std::to_string(lm::kMaxMetaTokens) + " meta tokens exist");
    }
    if (prompt.size() + n_meta > max_seq) {
        throw std::length_error("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                std::to_string(n_meta) + " meta tokens exceeds max_seq " + std::to_string(max_seq));
    }
    lm::TokenSeq out = prompt;
    for (std::size_t i = 0; i < n_meta; ++i) {
        out.push_back(lm::meta_token(i), lm::Segment::meta);
    }
    return out;
}

// ---- cloud adapter ----

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> CloudAdapter<T>::named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t l = 0; l < q.size(); ++l) {
        const auto p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "q.A", q[l].A);
        out.emplace_back(p + "q.B", q[l].B);
        out.emplace_back(p + "v.A", v[l].A);
        out.emplace_back(p + "v.B", v[l].B);
    }
    out.emplace_back("meta_emb", meta_emb);
    return out;
}

template <typename T>
void CloudAdapter<T>::set_requires_grad(bool flag) {
    set_all(named_tensors(), flag);
}

template <typename T>
CloudAdapter<T> CloudAdapter<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
CloudAdapter<U> CloudAdapter<T>::cast() const {
    CloudAdapter<U> out;
    for (std::size_t l = 0; l < q.size(); ++l) {
        out.q.push_back({q[l].A.template cast<U>(), q[l].B.template cast<U>()});
        out.v.push_back({v[l].A.template cast<U>(), v[l].B.template cast<U>()});
    }
    out.meta_emb = meta_emb.template cast<U>();
    out.rank = rank;
    out.alpha = alpha;
    out.dropout = dropout;
    return out;
}

template <typename T>
CloudAdapter<T> init_cloud_adapter(const lm::NanoLmWeights<T>& cloud, std::size_t n_meta, std::size_t rank,
                                   double alpha, double dropout, std::uint64_t seed) {
    const auto d = cloud.config.d_model;
    if (n_meta == 0 || n_meta > lm::kMaxMetaTokens) {
        throw std::invalid_argument("meta token count must lie in [1, " + std::to_string(lm::kMaxMetaTokens) + "]");
    }
    if (rank == 0 || rank > d) {
        throw std::invalid_argument("cloud LoRA rank must lie in [1, d_model]");
    }
    std::mt19937_64 rng(num::derive_seed(seed, "metagen.cloud_adapter"));
    CloudAdapter<T> a;
    a.rank = rank;
    a.alpha = alpha;
    a.dropout = dropout;
    for (std::size_t l = 0; l < cloud.config.n_layers; ++l) {
        a.q.push_back({num::randn<T>({d, rank}, kInitStd, rng), Tensor<T>({rank, d})});
        a.v.push_back({num::randn<T>({d, rank}, kInitStd, rng), Tensor<T>({rank, d})});
    }
    std::vector<std::size_t> rows(n_meta);
    std::iota(rows.begin(), rows.end(), static_cast<std::size_t>(lm::kMetaBase));
    num::NoGradGuard guard;
    a.meta_emb = num::gather_rows(cloud.tok_emb, std::span<const std::size_t>(rows)).clone();
    return a;
}

template <typename T>
Tensor<T> meta_hidden(const lm::NanoLmWeights<T>& cloud, const CloudAdapter<T>* adapter,
                      const std::vector<lm::TokenSeq>& seqs, std::size_t n_meta, std::mt19937_64* dropout_rng) {
    if (seqs.empty()) {
        throw std::invalid_argument("meta_hidden needs at least one sequence");
    }
    if (adapter && adapter->n_meta() != n_meta) {
        throw num::ShapeError("cloud adapter holds " + std::to_string(adapter->n_meta()) + " meta embeddings, " +
                              std::to_string(n_meta) + " requested");
    }
    if (adapter && adapter->q.size() != cloud.config.n_layers) {
        throw num::ShapeError("cloud adapter does not match the cloud layer count");
    }
    const auto batch = lm::PackedBatch::pack(seqs);
    std::vector<std::size_t> meta_rows;
    std::size_t off = 0;
    for (const auto& s : seqs) {
        if (s.size() < n_meta) {
            throw std::invalid_argument("sequence is shorter than the meta block");
        }
        for (std::size_t i = 0; i < n_meta; ++i) {
            const auto pos = s.size() - n_meta + i;
            if (s.ids[pos] != lm::meta_token(i)) {
                throw std::invalid_argument("sequence does not end with the meta block");
            }
            meta_rows.push_back(off + pos);
        }
        off += s.size();
    }

    lm::ForwardHooks<T> hooks;
    if (adapter) {
        std::vector<std::size_t> src_rows(meta_rows.size());
        for (std::size_t r = 0; r < src_rows.size(); ++r) {
            src_rows[r] = r % n_meta;
        }
        hooks.embed = [adapter, src_rows, meta_rows](const Tensor<T>& tok, const lm::PackedBatch&) {
            const auto src = num::gather_rows(adapter->meta_emb, std::span<const std::size_t>(src_rows));
            return num::scatter_rows(tok, std::span<const std::size_t>(meta_rows), src);
        };
        const T s = static_cast<T>(adapter->scaling());
        hooks.linear = [adapter, s, dropout_rng](std::size_t layer, lm::Proj p, const Tensor<T>& x,
                                                 const Tensor<T>& w) {
            auto y = num::matmul(x, w);
            if (p != lm::Proj::q && p != lm::Proj::v) {
                return y;
            }
            const auto& blk = p == lm::Proj::q ? adapter->q[layer] : adapter->v[layer];
            const auto& x_in = (dropout_rng && adapter->dropout > 0.0)
                                   ? num::dropout(x, static_cast<T>(adapter->dropout), *dropout_rng)
                                   : x;
            return num::add(y, num::scale(num::matmul(num::matmul(x_in, blk.A), blk.B), s));
        };
    }
    const auto hidden = lm::forward_hidden(cloud, batch, adapter ? &hooks : nullptr);
    return num::gather_rows(hidden, std::span<const std::size_t>(meta_rows));
}

template <typename T>
MetaStates<T> extract_meta_states(const lm::NanoLmWeights<T>& cloud, const lm::TokenSeq& seq, std::size_t n_meta,
                                  const CloudAdapter<T>* adapter) {
    MetaStates<T> m;
    m.states = meta_hidden(cloud, adapter, {seq}, n_meta);
    m.prompt_token_count = seq.size() - n_meta;
    return m;
}

// ---- router ----

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> RouterWeights<T>::named_tensors() const {
    return {{"f1_w", f1_w}, {"f1_b", f1_b}, {"f2_w", f2_w}, {"f2_b", f2_b}, {"bn_gamma", bn_gamma}, {"bn_beta", bn_beta}};
}

template <typename T>
void RouterWeights<T>::set_requires_grad(bool flag) {
    set_all(named_tensors(), flag);
}

template <typename T>
RouterWeights<T> RouterWeights<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
RouterWeights<U> RouterWeights<T>::cast() const {
    RouterWeights<U> out;
    out.f1_w = f1_w.template cast<U>();
    out.f1_b = f1_b.template cast<U>();
    out.f2_w = f2_w.template cast<U>();
    out.f2_b = f2_b.template cast<U>();
    out.bn_gamma = bn_gamma.template cast<U>();
    out.bn_beta = bn_beta.template cast<U>();
    out.bn.running_mean.assign(bn.running_mean.begin(), bn.running_mean.end());
    out.bn.running_var.assign(bn.running_var.begin(), bn.running_var.end());
    out.bn.initialized = bn.initialized;
    out.bn.momentum = static_cast<U>(bn.momentum);
    out.bn.eps = static_cast<U>(bn.eps);
    return out;
}

template <typename T>
std::size_t RouterWeights<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) {
        n += t.numel();
    }
    return n;
}

template <typename T>
RouterWeights<T> init_router(std::size_t d_cloud, std::size_t d_router, std::size_t n_experts, std::uint64_t seed) {
    if (d_cloud == 0 || d_router == 0 || n_experts == 0) {
        throw std::invalid_argument("router extents must be positive");
    }
    std::mt19937_64 rng(num::derive_seed(seed, "metagen.router"));
    RouterWeights<T> r;
    r.f1_w = num::randn<T>({d_cloud, d_router}, 1.0 / std::sqrt(static_cast<double>(d_cloud)), rng);
    r.f1_b = Tensor<T>({d_router});
    r.f2_w = num::randn<T>({d_router, n_experts}, 1.0 / std::sqrt(static_cast<double>(d_router)), rng);
    r.f2_b = Tensor<T>({n_experts});
    r.bn_gamma = num::filled<T>({n_experts}, T{1});
    r.bn_beta = Tensor<T>({n_experts});
    r.bn = num::BatchNormState<T>::fresh(n_experts);
    return r;
}

template <typename T>
Tensor<T> route(RouterWeights<T>& router, const Tensor<T>& states, num::BatchNormMode mode) {
    if (states.rank() != 2 || states.dim(1) != router.f1_w.dim(0)) {
        throw num::ShapeError("router expects [rows, " + std::to_string(router.f1_w.dim(0)) + "] states, got " +
                              num::shape_str(states.shape()));
    }
    const auto h = num::silu(row_vector_bias(num::matmul(states, router.f1_w), router.f1_b));
    const auto z = row_vector_bias(num::matmul(h, router.f2_w), router.f2_b);
    return num::batchnorm(z, router.bn_gamma, router.bn_beta, router.bn, mode);
}

// ---- gates ----

template <typename T>
GateMatrix<T> gates_keeptopk(const Tensor<T>& logits, std::size_t k) {
    if (logits.rank() != 2) {
        throw num::ShapeError("gate logits must be [rows, n], got " + num::shape_str(logits.shape()));
    }
    const auto rows = logits.dim(0);
    const auto n = logits.dim(1);
    if (k == 0 || k > n) {
        throw std::invalid_argument("top-k of " + std::to_string(k) + " is outside [1, " + std::to_string(n) + "]");
    }
    // Selection is by logit, which orders entries exactly as the softmax does.
    std::vector<T> bias(rows * n, -std::numeric_limits<T>::infinity());
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = logits.data().subspan(r * n, n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
        for (std::size_t c = 0; c < k; ++c) {
            bias[r * n + order[c]] = T{0};
        }
    }
    GateMatrix<T> g;
    g.gates = num::softmax(num::add(logits, Tensor<T>(logits.shape(), std::move(bias))));
    g.k_used = k;
    return g;
}

template <typename T>
GateMatrix<T> gates_gumbel(const Tensor<T>& logits, std::mt19937_64& rng, bool zero_noise) {
    if (logits.rank() != 2) {
        throw num::ShapeError("gate logits must be [rows, n], got " + num::shape_str(logits.shape()));
    }
    std::vector<T> noise(logits.numel(), T{0});
    if (!zero_noise) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& g : noise) {
            double x = 0.0;
            while (x <= 0.0) {
                x = u(rng);
            }
            g = static_cast<T>(-std::log(-std::log(x)));
        }
    }
    GateMatrix<T> g;
    g.gates = num::softmax(num::add(logits, Tensor<T>(logits.shape(), std::move(noise))));
    g.k_used = logits.dim(1);
    return g;
}

template <typename T>
GateMatrix<T> compute_gates(GateMode mode, const Tensor<T>& logits, std::size_t k, std::mt19937_64* rng) {
    if (mode == GateMode::keeptopk) {
        return gates_keeptopk(logits, k);
    }
    if (!rng) {
        throw std::invalid_argument("Gumbel gating needs a random generator");
    }
    return gates_gumbel(logits, *rng);
}

// ---- direct generation ----

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DirectProjection<T>::named_tensors() const {
    return {{"w", w}, {"b", b}};
}

template <typename T>
void DirectProjection<T>::set_requires_grad(bool flag) {
    set_all(named_tensors(), flag);
}

template <typename T>
DirectProjection<T> DirectProjection<T>::clone() const {
    DirectProjection out = *this;
    out.w = w.clone();
    out.b = b.clone();
    return out;
}

namespace {

/// Column layout of one layer's projection output: per block, A then B.
struct DirectLayout {
    std::array<std::size_t, 3> a_off, b_off;
    std::size_t width = 0;
};

DirectLayout direct_layout(const lm::NanoLmConfig& edge, std::size_t r) {
    DirectLayout lay;
    std::size_t off = 0;
    for (auto blk : lora::kBlocks) {
        const auto [din, dout] = lora::block_dims(blk, edge);
        const auto k = static_cast<std::size_t>(blk);
        lay.a_off[k] = off;
        off += din * r;
        lay.b_off[k] = off;
        off += r * dout;
    }
    lay.width = off;
    return lay;
}

}  // namespace

template <typename T>
DirectProjection<T> init_direct(std::size_t d_cloud, const lm::NanoLmConfig& edge, std::size_t rank, double alpha,
                                std::uint64_t seed) {
    edge.validate();
    const auto lay = direct_layout(edge, rank);
    std::mt19937_64 rng(num::derive_seed(seed, "metagen.direct"));
    std::normal_distribution<double> nd(0.0, kInitStd / std::sqrt(static_cast<double>(d_cloud)));
    std::vector<T> w(d_cloud * lay.width, T{0});
    for (auto blk : lora::kBlocks) {
        const auto k = static_cast<std::size_t>(blk);
        for (std::size_t row = 0; row < d_cloud; ++row) {
            for (std::size_t c = lay.a_off[k]; c < lay.b_off[k]; ++c) {
                w[row * lay.width + c] = static_cast<T>(nd(rng));
            }
        }
    }
    DirectProjection<T> p;
    p.w = Tensor<T>({d_cloud, lay.width}, std::move(w));
    p.b = Tensor<T>({lay.width});
    p.edge = edge;
    p.rank = rank;
    p.alpha = alpha;
    return p;
}

template <typename T>
lora::GeneratedLoRA<T> direct_lora(const DirectProjection<T>& proj, const Tensor<T>& states) {
    const auto L = proj.edge.n_layers;
    const auto r = proj.rank;
    const auto lay = direct_layout(proj.edge, r);
    if (lay.width != proj.width()) {
        throw num::ShapeError("direct projection width " + std::to_string(proj.width()) + " does not match " +
                              std::to_string(lay.width) + " for this edge configuration");
    }
    if (states.rank() != 2 || states.dim(0) != L || states.dim(1) != proj.w.dim(0)) {
        throw num::ShapeError("direct projection expects [" + std::to_string(L) + ", " +
                              std::to_string(proj.w.dim(0)) + "] meta states, got " + num::shape_str(states.shape()));
    }
    const T s = static_cast<T>(proj.alpha / static_cast<double>(r));
    const auto out = num::add(num::matmul(states, proj.w), proj.b);
    lora::GeneratedLoRA<T> g;
    for (std::size_t i = 0; i < L; ++i) {
        const auto row = num::slice_rows(out, i, i + 1);
        std::array<Tensor<T>, 3> d;
        for (auto blk : lora::kBlocks) {
            const auto k = static_cast<std::size_t>(blk);
            const auto [din, dout] = lora::block_dims(blk, proj.edge);
            const auto A = num::reshape(num::slice_cols(row, lay.a_off[k], lay.b_off[k]), {din, r});
            const auto B = num::reshape(num::slice_cols(row, lay.b_off[k], lay.b_off[k] + r * dout), {r, dout});
            d[k] = num::scale(num::matmul(A, B), s);
        }
        g.deltas.push_back(std::move(d));
    }
    return g;
}

// ---- specialization ----

template <typename T>
Specialized<T> specialize(const Generator<T>& gen, const lm::NanoLmWeights<T>& edge, const lm::TokenSeq& system_prompt,
                          std::mt19937_64* rng) {
    num::NoGradGuard guard;
    const auto L = edge.config.n_layers;
    const auto seq = append_meta(system_prompt, L, gen.cloud.config.max_seq);
    const auto states = extract_meta_states(gen.cloud, seq, L, &gen.adapter);
    Specialized<T> out;
    out.prompt_tokens = system_prompt.size();
    if (gen.gen_mode == GenMode::direct) {
        out.weights = lora::merge(edge, direct_lora(gen.direct, states.states));
        return out;
    }
    auto router = gen.router.clone();
    const auto logits = route(router, states.states, num::BatchNormMode::infer);
    out.gates = compute_gates(gen.gate_mode, logits, gen.top_k, rng);
    out.weights = lora::merge(edge, lora::assemble(gen.pool, out.gates.gates));
    return out;
}

template struct CloudAdapter<float>;
template struct CloudAdapter<double>;
template struct RouterWeights<float>;
template struct RouterWeights<double>;
template struct DirectProjection<float>;
template struct DirectProjection<double>;
template CloudAdapter<double> CloudAdapter<float>::cast<double>() const;
template CloudAdapter<float> CloudAdapter<double>::cast<float>() const;
template RouterWeights<double> RouterWeights<float>::cast<double>() const;
template RouterWeights<float> RouterWeights<double>::cast<float>() const;

#define LGEN_INSTANTIATE_META(T)                                                                                   \
    template CloudAdapter<T> init_cloud_adapter<T>(const lm::NanoLmWeights<T>&, std::size_t, std::size_t, double,   \
                                                   double, std::uint64_t);                                         \
    template Tensor<T> meta_hidden<T>(const lm::NanoLmWeights<T>&, const CloudAdapter<T>*,                          \
                                      const std::vector<lm::TokenSeq>&, std::size_t, std::mt19937_64*);             \
    template MetaStates<T> extract_meta_states<T>(const lm::NanoLmWeights<T>&, const lm::TokenSeq&, std::size_t,    \
                                                  const CloudAdapter<T>*);                                         \
    template RouterWeights<T> init_router<T>(std::size_t, std::size_t, std::size_t, std::uint64_t);                 \
    template Tensor<T> route<T>(RouterWeights<T>&, const Tensor<T>&, num::BatchNormMode);                           \
    template GateMatrix<T> gates_keeptopk<T>(const Tensor<T>&, std::size_t);                                       \
    template GateMatrix<T> gates_gumbel<T>(const Tensor<T>&, std::mt19937_64&, bool);                              \
    template GateMatrix<T> compute_gates<T>(GateMode, const Tensor<T>&, std::size_t, std::mt19937_64*);            \
    template DirectProjection<T> init_direct<T>(std::size_t, const lm::NanoLmConfig&, std::size_t, double,          \
                                                std::uint64_t);                                                    \
    template lora::GeneratedLoRA<T> direct_lora<T>(const DirectProjection<T>&, const Tensor<T>&);                  \
    template Specialized<T> specialize<T>(const Generator<T>&, const lm::NanoLmWeights<T>&, const lm::TokenSeq&,   \
                                          std::mt19937_64*);
LGEN_INSTANTIATE_META(float)
LGEN_INSTANTIATE_META(double)
#undef LGEN_INSTANTIATE_META

}  // namespace lgen::meta
