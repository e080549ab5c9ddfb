#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lgen/lorapool/pool.hpp"
#include "lgen/numcore/gradcheck.hpp"
#include "lgen/numcore/ops.hpp"
#include "test_util.hpp"

using namespace lgen;
using lora::Block;
using lora::ExpertPool;
using num::Tensord;

namespace {

template <typename T>
void randomize_b(ExpertPool<T>& pool, std::mt19937_64& rng, double stddev = 0.05) {
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& [name, t] : pool.named_tensors()) {
        if (name.ends_with(".B")) {
            for (auto& v : t.data_mut()) {
                v = static_cast<T>(nd(rng));
            }
        }
    }
}

/// Rows summing to one with `k` random nonzero entries each.
Tensord random_gates(std::mt19937_64& rng, std::size_t rows, std::size_t n, std::size_t k) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::vector<double> g(rows * n, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        double tot = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            g[i * n + idx[c]] = u(rng);
            tot += g[i * n + idx[c]];
        }
        for (std::size_t c = 0; c < n; ++c) {
            g[i * n + c] /= tot;
        }
    }
    return Tensord({rows, n}, g);
}

/// (alpha/r) A B with plain loops.
std::vector<double> brute_delta(const lora::LoraBlock<double>& b, double s) {
    const auto din = b.A.dim(0), r = b.A.dim(1), dout = b.B.dim(1);
    std::vector<double> out(din * dout, 0.0);
    for (std::size_t i = 0; i < din; ++i) {
        for (std::size_t o = 0; o < dout; ++o) {
            double acc = 0.0;
            for (std::size_t c = 0; c < r; ++c) {
                acc += b.A.at(i, c) * b.B.at(c, o);
            }
            out[i * dout + o] = s * acc;
        }
    }
    return out;
}

lora::PoolConfig small_pool(std::size_t n = 4, std::size_t r = 4) {
    lora::PoolConfig pc;
    pc.n_experts = n;
    pc.rank = r;
    pc.alpha = 8.0;
    return pc;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace

TEST_SUITE("lorapool") {

TEST_CASE("init shapes and zero deltas") {
    const auto edge = lm::NanoLmConfig::edge_default();
    const auto pool = lora::init_pool<float>(lora::PoolConfig{}, edge, 1);
    REQUIRE(pool.banks.size() == 1);
    REQUIRE(pool.n() == 8);
    const auto& g = pool.expert(0, 3).block(Block::gate);
    CHECK(g.A.shape() == num::Shape{128, 16});
    CHECK(g.B.shape() == num::Shape{16, 512});
    CHECK(pool.expert(0, 0).block(Block::down).A.shape() == num::Shape{512, 16});
    CHECK(pool.expert(0, 0).block(Block::down).B.shape() == num::Shape{16, 128});

    const auto again = lora::init_pool<float>(lora::PoolConfig{}, edge, 1);
    const auto a = pool.named_tensors();
    const auto b = again.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].second.values() == b[i].second.values());
    }

    const auto tiny = lora::init_pool<double>(small_pool(), test::tiny_config(), 2);
    std::mt19937_64 rng(5);
    const auto lora = lora::assemble(tiny, random_gates(rng, 2, 4, 3));
    for (std::size_t i = 0; i < lora.layers(); ++i) {
        for (auto blk : lora::kBlocks) {
            for (double v : lora.delta(i, blk).values()) {
                REQUIRE(v == 0.0);
            }
        }
    }
}

TEST_CASE("pool config validation") {
    auto pc = small_pool();
    pc.rank = 17;
    CHECK_THROWS_AS(pc.validate(test::tiny_config()), std::invalid_argument);
    pc = small_pool();
    pc.n_experts = 0;
    CHECK_THROWS_AS(pc.validate(test::tiny_config()), std::invalid_argument);
}

TEST_CASE("one-hot gates select a single expert") {
    auto pool = lora::init_pool<double>(small_pool(), test::tiny_config(), 3);
    std::mt19937_64 rng(9);
    randomize_b(pool, rng);
    const double s = pool.config.scaling();
    for (std::size_t j = 0; j < pool.n(); ++j) {
        std::vector<double> g(2 * pool.n(), 0.0);
        g[j] = 1.0;
        g[pool.n() + j] = 1.0;
        const auto lora = lora::assemble(pool, Tensord({2, pool.n()}, g));
        for (std::size_t i = 0; i < 2; ++i) {
            for (auto blk : lora::kBlocks) {
                const auto& eb = pool.expert(i, j).block(blk);
                const auto scaled = num::matmul(num::scale(eb.A, s), eb.B);
                REQUIRE(lora.delta(i, blk).values() == scaled.values());
                REQUIRE(max_abs_diff(lora.delta(i, blk).values(), brute_delta(eb, s)) < 1e-14);
            }
        }
    }
}

TEST_CASE("identical experts make any convex gate row a no-op") {
    auto pool = lora::init_pool<double>(small_pool(), test::tiny_config(), 4);
    std::mt19937_64 rng(10);
    randomize_b(pool, rng);
    for (std::size_t j = 1; j < pool.n(); ++j) {
        for (auto blk : lora::kBlocks) {
            auto& dst = pool.banks[0][j].block(blk);
            const auto& src = pool.banks[0][0].block(blk);
            dst.A = src.A.clone();
            dst.B = src.B.clone();
        }
    }
    const auto lora = lora::assemble(pool, random_gates(rng, 2, pool.n(), 4));
    for (auto blk : lora::kBlocks) {
        const auto shared = brute_delta(pool.expert(0, 0).block(blk), pool.config.scaling());
        CHECK(max_abs_diff(lora.delta(1, blk).values(), shared) < 1e-13);
    }
}

TEST_CASE("half-half gates average two expert deltas") {
    auto pool = lora::init_pool<double>(small_pool(2, 3), test::tiny_config(), 6);
    std::mt19937_64 rng(11);
    randomize_b(pool, rng);
    const auto lora = lora::assemble(pool, Tensord({2, 2}, {0.5, 0.5, 0.5, 0.5}));
    for (auto blk : lora::kBlocks) {
        const auto d1 = brute_delta(pool.expert(0, 0).block(blk), pool.config.scaling());
        const auto d2 = brute_delta(pool.expert(0, 1).block(blk), pool.config.scaling());
        std::vector<double> avg(d1.size());
        for (std::size_t i = 0; i < d1.size(); ++i) {
            avg[i] = 0.5 * (d1[i] + d2[i]);
        }
        CHECK(max_abs_diff(lora.delta(0, blk).values(), avg) < 1e-14);
    }
}

TEST_CASE("assemble is linear in the gates") {
    auto pool = lora::init_pool<double>(small_pool(), test::tiny_config(), 12);
    std::mt19937_64 rng(12);
    randomize_b(pool, rng);
    const auto g1 = random_gates(rng, 2, 4, 2);
    const auto g2 = random_gates(rng, 2, 4, 3);
    const double lam = 0.3;
    const auto mix = num::add(num::scale(g1, lam), num::scale(g2, 1.0 - lam));
    const auto l1 = lora::assemble(pool, g1);
    const auto l2 = lora::assemble(pool, g2);
    const auto lm = lora::assemble(pool, mix);
    for (std::size_t i = 0; i < 2; ++i) {
        for (auto blk : lora::kBlocks) {
            const auto expect = num::add(num::scale(l1.delta(i, blk), lam), num::scale(l2.delta(i, blk), 1.0 - lam));
            CHECK(max_abs_diff(lm.delta(i, blk).values(), expect.values()) < 1e-14);
        }
    }
}

TEST_CASE("gate shape errors") {
    const auto pool = lora::init_pool<double>(small_pool(), test::tiny_config(), 1);
    CHECK_THROWS_AS(lora::assemble(pool, Tensord({2, 3})), num::ShapeError);
    CHECK_THROWS_AS(lora::assemble(pool, Tensord({3, 4})), num::ShapeError);
}

TEST_CASE("merge adds the delta into a copy") {
    lm::NanoLmConfig c{1, 2, 1, 2, lm::kVocabSize, 4, lm::Role::edge};
    auto edge = lm::NanoLmWeights<double>::zeros(c);
    edge.layers[0].w_gate = Tensord({2, 2}, {1, 0, 0, 1});
    lora::GeneratedLoRA<double> g;
    g.deltas.push_back({Tensord({2, 2}, {0, 2, 0, 0}), Tensord({2, 2}), Tensord({2, 2})});
    const auto merged = lora::merge(edge, g);
    CHECK(merged.layers[0].w_gate.values() == std::vector<double>{1, 2, 0, 1});
    CHECK(edge.layers[0].w_gate.values() == std::vector<double>{1, 0, 0, 1});

    lora::GeneratedLoRA<double> bad;
    bad.deltas.push_back({Tensord({2, 3}), Tensord({2, 2}), Tensord({2, 2})});
    CHECK_THROWS_AS(lora::merge(edge, bad), num::ShapeError);
}

TEST_CASE("zero deltas leave the forward bit-identical") {
    const auto edge = lm::NanoLmWeights<float>::init(test::tiny_config(), 21);
    const auto pool = lora::init_pool<float>(small_pool(), test::tiny_config(), 22);
    std::mt19937_64 rng(1);
    const auto gates = random_gates(rng, 2, 4, 2).cast<float>();
    const auto merged = lora::merge(edge, lora::assemble(pool, gates));
    const auto batch = lm::PackedBatch::single(test::random_tokens(rng, 20));
    CHECK(lm::forward_logits(merged, batch).values() == lm::forward_logits(edge, batch).values());
    CHECK(lora::adapter_forward(edge, pool, gates, batch).values() == lm::forward_logits(edge, batch).values());
}

TEST_CASE("merged and adapter forwards agree") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 8; ++trial) {
        const auto edge_d = lm::NanoLmWeights<double>::init(test::tiny_config(), 100 + trial);
        auto pool_d = lora::init_pool<double>(small_pool(), test::tiny_config(), 200 + trial);
        randomize_b(pool_d, rng);
        const auto gates_d = random_gates(rng, 2, 4, 2);
        const auto batch = lm::PackedBatch::single(test::random_tokens(rng, 16));

        const auto merged_d = lm::forward_logits(lora::merge(edge_d, lora::assemble(pool_d, gates_d)), batch);
        const auto adapter_d = lora::adapter_forward(edge_d, pool_d, gates_d, batch);
        CHECK(max_abs_diff(merged_d.values(), adapter_d.values()) < 1e-10);

        const auto edge_f = edge_d.cast<float>();
        const auto pool_f = pool_d.cast<float>();
        const auto gates_f = gates_d.cast<float>();
        const auto merged_f = lm::forward_logits(lora::merge(edge_f, lora::assemble(pool_f, gates_f)), batch);
        const auto adapter_f = lora::adapter_forward(edge_f, pool_f, gates_f, batch);
        float m = 0.f;
        for (std::size_t i = 0; i < merged_f.numel(); ++i) {
            m = std::max(m, std::abs(merged_f.at(i) - adapter_f.at(i)));
        }
        CHECK(m < 1e-5f);

        // the differentiable training hook computes the same function without dropout
        const auto hooks = lora::delta_hooks(lora::assemble(pool_d, gates_d), 0.0, nullptr);
        const auto hooked = lm::forward_logits(edge_d, batch, &hooks);
        CHECK(max_abs_diff(hooked.values(), merged_d.values()) < 1e-10);
    }
}

TEST_CASE("delta rank is bounded by K r") {
    lm::NanoLmConfig c{2, 8, 2, 12, lm::kVocabSize, 8, lm::Role::edge};
    auto pool = lora::init_pool<double>(small_pool(4, 2), c, 5);
    std::mt19937_64 rng(2);
    randomize_b(pool, rng, 1.0);
    for (std::size_t k = 1; k <= 4; ++k) {
        const auto lora = lora::assemble(pool, random_gates(rng, 2, 4, k));
        for (auto blk : lora::kBlocks) {
            const auto& d = lora.delta(0, blk);
            Eigen::MatrixXd m(d.dim(0), d.dim(1));
            for (std::size_t i = 0; i < d.dim(0); ++i) {
                for (std::size_t j = 0; j < d.dim(1); ++j) {
                    m(i, j) = d.at(i, j);
                }
            }
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
            const auto sv = svd.singularValues();
            std::size_t count = 0;
            for (Eigen::Index i = 0; i < sv.size(); ++i) {
                count += sv(i) > 1e-8 ? 1 : 0;
            }
            CHECK(count <= k * 2);
            CHECK(count == k * 2);  // generic factors reach the bound
        }
    }
}

TEST_CASE("gradients flow from the loss into expert factors") {
    auto pool = lora::init_pool<double>(small_pool(), test::tiny_config(), 7);
    std::mt19937_64 rng(3);
    randomize_b(pool, rng);
    const auto edge = lm::NanoLmWeights<double>::init(test::tiny_config(), 8);
    const auto gates = random_gates(rng, 2, 4, 2);
    const auto ids = test::random_tokens(rng, 10);
    std::vector<lm::TokenId> targets(ids.begin() + 1, ids.end());
    targets.push_back(lm::kEndOfAnswer);
    std::vector<std::uint8_t> mask(ids.size(), 1);
    // expert chosen by a gate that is nonzero in layer 0
    std::size_t j = 0;
    while (gates.at(0, j) == 0.0) {
        ++j;
    }
    for (auto blk : lora::kBlocks) {
        for (bool probe_a : {true, false}) {
            auto& lb = pool.banks[0][j].block(blk);
            const Tensord x = probe_a ? lb.A : lb.B;
            auto f = [&](const Tensord&) {
                const auto merged = lora::merge(edge, lora::assemble(pool, gates));
                const auto logits = lm::forward_logits(merged, lm::PackedBatch::single(ids));
                return num::cross_entropy_lm(logits, std::span<const lm::TokenId>(targets),
                                             std::span<const std::uint8_t>(mask));
            };
            std::vector<std::size_t> idx;
            for (int i = 0; i < 6; ++i) {
                idx.push_back(static_cast<std::size_t>(rng() % x.numel()));
            }
            const auto r = num::finite_diff_check_at(f, x, idx);
            CAPTURE(lora::block_name(blk));
            CHECK(r.max_rel_error < 1e-3);
            CHECK(std::abs(r.analytic) + std::abs(r.numeric) > 0.0);
        }
    }

    // and into the gates themselves
    auto fg = [&](const Tensord& g) {
        const auto logits = lm::forward_logits(lora::merge(edge, lora::assemble(pool, g)), lm::PackedBatch::single(ids));
        return num::cross_entropy_lm(logits, std::span<const lm::TokenId>(targets), std::span<const std::uint8_t>(mask));
    };
    CHECK(num::finite_diff_check(fg, gates.clone()).max_rel_error < 1e-3);
}

TEST_CASE("per-layer banks") {
    auto pc = small_pool();
    pc.per_layer = true;
    auto pool = lora::init_pool<double>(pc, test::tiny_config(), 13);
    CHECK(pool.banks.size() == 2);
    std::mt19937_64 rng(4);
    randomize_b(pool, rng);
    std::vector<double> g(8, 0.0);
    g[1] = 1.0;
    g[4 + 1] = 1.0;
    const auto lora = lora::assemble(pool, Tensord({2, 4}, g));
    const double s = pool.config.scaling();
    CHECK(max_abs_diff(lora.delta(1, Block::up).values(), brute_delta(pool.banks[1][1].block(Block::up), s)) < 1e-14);
    CHECK(max_abs_diff(lora.delta(0, Block::up).values(), brute_delta(pool.banks[0][1].block(Block::up), s)) < 1e-14);
}

}  // TEST_SUITE
