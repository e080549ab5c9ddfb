#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "lgen/metagen/metagen.hpp"
#include "lgen/numcore/gradcheck.hpp"
#include "test_util.hpp"

using namespace lgen;
using meta::GateMode;
using num::Tensord;

namespace {

lm::NanoLmConfig cloud_config() { return lm::NanoLmConfig{2, 24, 2, 48, lm::kVocabSize, 64, lm::Role::cloud}; }

meta::Generator<double> make_generator(std::uint64_t seed, bool random_b) {
    meta::Generator<double> g;
    g.cloud = lm::NanoLmWeights<double>::init(cloud_config(), seed);
    g.adapter = meta::init_cloud_adapter(g.cloud, 2, 4, 8.0, 0.0, seed + 1);
    g.router = meta::init_router<double>(24, 12, 4, seed + 2);
    lora::PoolConfig pc;
    pc.n_experts = 4;
    pc.rank = 4;
    pc.alpha = 8.0;
    g.pool = lora::init_pool<double>(pc, test::tiny_config(), seed + 3);
    g.direct = meta::init_direct<double>(24, test::tiny_config(), 4, 8.0, seed + 4);
    if (random_b) {
        std::mt19937_64 rng(seed + 5);
        std::normal_distribution<double> nd(0.0, 0.05);
        for (auto& [name, t] : g.pool.named_tensors()) {
            if (name.ends_with(".B")) {
                for (auto& v : t.data_mut()) {
                    v = nd(rng);
                }
            }
        }
    }
    // running statistics from one training-mode batch of prompts
    std::vector<lm::TokenSeq> seqs;
    for (auto text : {"alpha prompt", "beta", "a third prompt"}) {
        seqs.push_back(meta::append_meta(lm::tokenize(text, lm::Segment::system_prompt), 2, 64));
    }
    meta::route(g.router, meta::meta_hidden(g.cloud, &g.adapter, seqs, 2), num::BatchNormMode::train);
    return g;
}

std::vector<std::vector<double>> snapshot(const std::vector<std::pair<std::string, Tensord>>& named) {
    std::vector<std::vector<double>> out;
    for (const auto& [n, t] : named) {
        out.push_back(t.values());
    }
    return out;
}

}  // namespace

TEST_SUITE("metagen") {

TEST_CASE("append_meta") {
    const auto seq = meta::append_meta(lm::TokenSeq{}, 4, 16);
    REQUIRE(seq.size() == 4);
    std::set<lm::TokenId> ids(seq.ids.begin(), seq.ids.end());
    CHECK(ids.size() == 4);
    for (auto id : seq.ids) {
        CHECK(id >= lm::kByteVocab);
        CHECK(lm::is_meta_token(id));
    }
    const auto p = meta::append_meta(lm::tokenize("abc", lm::Segment::system_prompt), 2, 16);
    CHECK(p.size() == 5);
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK((p.segments[i] == lm::Segment::meta) == (i >= 3));
    }
    CHECK(p.count(lm::Segment::meta) == 2);
    CHECK_THROWS_AS(meta::append_meta(lm::tokenize("abcdefghijklmno"), 2, 16), std::length_error);
}

TEST_CASE("meta states") {
    const auto g = make_generator(1, false);
    const auto seq = meta::append_meta(lm::tokenize("reverse it", lm::Segment::system_prompt), 2, 64);
    const auto a = meta::extract_meta_states(g.cloud, seq, 2, &g.adapter);
    const auto b = meta::extract_meta_states(g.cloud, seq, 2, &g.adapter);
    CHECK(a.states.shape() == num::Shape{2, 24});
    CHECK(a.prompt_token_count == 10);
    CHECK(a.states.values() == b.states.values());

    // the states are the final hidden rows of a plain forward at the meta positions
    const auto plain = meta::extract_meta_states(g.cloud, seq, 2);
    const auto hidden = lm::forward_hidden(g.cloud, lm::PackedBatch::single(seq.ids));
    for (std::size_t c = 0; c < 24; ++c) {
        CHECK(plain.states.at(1, c) == hidden.at(11, c));
    }

    auto longer = lm::tokenize("x", lm::Segment::system_prompt);
    longer.append(lm::tokenize("reverse it", lm::Segment::system_prompt));
    const auto c = meta::extract_meta_states(g.cloud, meta::append_meta(longer, 2, 64), 2, &g.adapter);
    CHECK(c.states.values() != a.states.values());

    CHECK_THROWS_AS(meta::extract_meta_states(g.cloud, lm::tokenize("no meta"), 2), std::invalid_argument);
}

TEST_CASE("router examples") {
    auto r = meta::init_router<double>(6, 3, 4, 3);
    std::mt19937_64 rng(3);
    const auto states = test::random_tensor<double>({5, 6}, rng);
    CHECK_THROWS_AS(meta::route(r, states, num::BatchNormMode::infer), num::UninitializedStatistics);

    // f2 = 0: every logit equals the BN shift
    auto z = r.clone();
    for (auto& v : z.f2_w.data_mut()) {
        v = 0.0;
    }
    for (auto& v : z.bn_beta.data_mut()) {
        v = 0.25;
    }
    const auto out = meta::route(z, states, num::BatchNormMode::train);
    for (double v : out.values()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }
    const auto gates = meta::gates_keeptopk(out, 4).gates;
    for (double v : gates.values()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }

    // identical rows map to identical router rows
    Tensord twin({2, 6}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.1, -0.2, 0.3, 0.4, -0.5, 0.6});
    auto r2 = r.clone();
    const auto t = meta::route(r2, twin, num::BatchNormMode::train);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(t.at(0, c) == t.at(1, c));
    }
}

TEST_CASE("router matches a scalar recomputation") {
    auto r = meta::init_router<double>(3, 2, 2, 8);
    std::mt19937_64 rng(8);
    for (auto* t : {&r.f1_b, &r.f2_b, &r.bn_gamma, &r.bn_beta}) {
        for (auto& v : t->data_mut()) {
            v = std::uniform_real_distribution<double>(-1, 1)(rng);
        }
    }
    const auto x = test::random_tensor<double>({3, 3}, rng);
    auto oracle_pre = [&](std::size_t row, std::size_t e) {
        double acc2 = r.f2_b.at(e);
        for (std::size_t h = 0; h < 2; ++h) {
            double acc1 = r.f1_b.at(h);
            for (std::size_t i = 0; i < 3; ++i) {
                acc1 += x.at(row, i) * r.f1_w.at(i, h);
            }
            const double act = acc1 / (1.0 + std::exp(-acc1));
            acc2 += act * r.f2_w.at(h, e);
        }
        return acc2;
    };
    auto rt = r.clone();
    const auto out = meta::route(rt, x, num::BatchNormMode::train);
    for (std::size_t e = 0; e < 2; ++e) {
        double mu = 0.0;
        for (std::size_t row = 0; row < 3; ++row) {
            mu += oracle_pre(row, e) / 3.0;
        }
        double var = 0.0;
        for (std::size_t row = 0; row < 3; ++row) {
            var += (oracle_pre(row, e) - mu) * (oracle_pre(row, e) - mu) / 3.0;
        }
        for (std::size_t row = 0; row < 3; ++row) {
            const double expect = r.bn_gamma.at(e) * (oracle_pre(row, e) - mu) / std::sqrt(var + 1e-5) + r.bn_beta.at(e);
            CHECK(out.at(row, e) == doctest::Approx(expect).epsilon(1e-12));
        }
        CHECK(rt.bn.running_mean[e] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    }
    // infer mode now uses the running statistics
    const auto inf = meta::route(rt, x, num::BatchNormMode::infer);
    const double m0 = rt.bn.running_mean[0];
    const double v0 = rt.bn.running_var[0];
    CHECK(inf.at(1, 0) ==
          doctest::Approx(r.bn_gamma.at(0) * (oracle_pre(1, 0) - m0) / std::sqrt(v0 + 1e-5) + r.bn_beta.at(0))
              .epsilon(1e-12));
}

TEST_CASE("keeptopk examples") {
    const Tensord r({1, 4}, {std::log(4.0), std::log(2.0), 0.0, 0.0});
    const auto g = meta::gates_keeptopk(r, 2);
    CHECK(g.k_used == 2);
    CHECK(g.gates.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(g.gates.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(g.gates.at(2) == 0.0);
    CHECK(g.gates.at(3) == 0.0);

    const auto full = meta::gates_keeptopk(r, 4);
    const std::vector<double> expect{0.5, 0.25, 0.125, 0.125};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(full.gates.at(i) == doctest::Approx(expect[i]).epsilon(1e-15));
    }

    const auto tie = meta::gates_keeptopk(Tensord({1, 4}, {0.7, 0.7, 0.7, 0.7}), 2);
    CHECK(tie.gates.values() == std::vector<double>{0.5, 0.5, 0.0, 0.0});
    const auto tie2 = meta::gates_keeptopk(Tensord({1, 4}, {0.1, 0.9, 0.5, 0.9}), 2);
    CHECK(tie2.gates.values() == std::vector<double>{0.0, 0.5, 0.0, 0.5});

    CHECK_THROWS_AS(meta::gates_keeptopk(r, 5), std::invalid_argument);
    CHECK_THROWS_AS(meta::gates_keeptopk(r, 0), std::invalid_argument);
}

TEST_CASE("keeptopk row contract and invariances") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = test::random_extent(rng, 1, 10);
        const std::size_t k = test::random_extent(rng, 1, n);
        const auto r = test::random_tensor<double>({3, n}, rng, -4, 4);
        const auto g = meta::gates_keeptopk(r, k).gates;
        const auto shifted = meta::gates_keeptopk(num::add_scalar(r, 3.5), k).gates;
        for (std::size_t row = 0; row < 3; ++row) {
            std::size_t nz = 0;
            double sum = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                nz += g.at(row, c) > 0.0 ? 1 : 0;
                sum += g.at(row, c);
                REQUIRE((g.at(row, c) > 0.0) == (shifted.at(row, c) > 0.0));
                REQUIRE(std::abs(g.at(row, c) - shifted.at(row, c)) < 1e-12);
            }
            REQUIRE(nz == k);
            REQUIRE(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("keeptopk gradient reaches only kept logits") {
    std::mt19937_64 rng(5);
    const auto w = test::random_tensor<double>({2, 5}, rng);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = test::random_tensor<double>({2, 5}, rng, -2, 2, true);
        auto f = [&](const Tensord& in) { return num::sum(num::mul(meta::gates_keeptopk(in, 2).gates, w)); };
        const auto res = num::finite_diff_check(f, x.clone());
        CHECK(res.max_rel_error < 1e-6);
        auto loss = f(x);
        num::backward(loss);
        const auto g = meta::gates_keeptopk(x, 2).gates;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (g.at(i) == 0.0) {
                CHECK(x.grad()[i] == 0.0);
            }
        }
    }
}

TEST_CASE("gumbel gates") {
    std::mt19937_64 rng(17);
    const Tensord r({1, 4}, {std::log(4.0), std::log(2.0), 0.0, 0.0});
    const auto zero = meta::gates_gumbel(r, rng, true).gates;
    const auto soft = num::softmax(r);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(zero.at(i) == soft.at(i));
    }
    for (int trial = 0; trial < 50; ++trial) {
        const auto g = meta::gates_gumbel(test::random_tensor<double>({3, 6}, rng, -5, 5), rng).gates;
        for (std::size_t row = 0; row < 3; ++row) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                CHECK(g.at(row, c) > 0.0);
                sum += g.at(row, c);
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }

    // argmax of R + g samples softmax(R)
    const int draws = 100000;
    std::vector<int> counts(4, 0);
    const Tensord many({static_cast<std::size_t>(draws), 4}, [&] {
        std::vector<double> v;
        for (int i = 0; i < draws; ++i) {
            v.insert(v.end(), r.values().begin(), r.values().end());
        }
        return v;
    }());
    const auto g = meta::gates_gumbel(many, rng).gates;
    for (int i = 0; i < draws; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 4; ++c) {
            if (g.at(static_cast<std::size_t>(i), c) > g.at(static_cast<std::size_t>(i), best)) {
                best = c;
            }
        }
        ++counts[best];
    }
    const std::vector<double> p{0.5, 0.25, 0.125, 0.125};
    for (std::size_t c = 0; c < 4; ++c) {
        const double sigma = std::sqrt(draws * p[c] * (1 - p[c]));
        CAPTURE(c);
        CHECK(std::abs(counts[c] - draws * p[c]) < 3 * sigma);
    }
}

TEST_CASE("fresh pool specializes to the base model") {
    const auto g = make_generator(4, false);
    const auto edge = lm::NanoLmWeights<double>::init(test::tiny_config(), 40);
    const auto spec = meta::specialize(g, edge, lm::tokenize("copy", lm::Segment::system_prompt));
    const auto batch = lm::PackedBatch::single(lm::tokenize("hello=").ids);
    CHECK(lm::forward_logits(spec.weights, batch).values() == lm::forward_logits(edge, batch).values());
    CHECK(spec.gates.gates.shape() == num::Shape{2, 4});
    CHECK(spec.prompt_tokens == 4);
}

TEST_CASE("specialize is deterministic and leaves its inputs alone") {
    const auto g = make_generator(5, true);
    const auto edge = lm::NanoLmWeights<double>::init(test::tiny_config(), 50);
    const auto before = std::vector{snapshot(g.cloud.named_tensors()), snapshot(g.adapter.named_tensors()),
                                    snapshot(g.router.named_tensors()), snapshot(g.pool.named_tensors()),
                                    snapshot(edge.named_tensors())};
    const auto bn_before = g.router.bn.running_mean;
    const auto prompt = lm::tokenize("Write the input text backwards.", lm::Segment::system_prompt);
    const auto a = meta::specialize(g, edge, prompt);
    const auto b = meta::specialize(g, edge, prompt);
    CHECK(snapshot(a.weights.named_tensors()) == snapshot(b.weights.named_tensors()));
    CHECK(a.gates.gates.values() == b.gates.gates.values());
    const auto after = std::vector{snapshot(g.cloud.named_tensors()), snapshot(g.adapter.named_tensors()),
                                   snapshot(g.router.named_tensors()), snapshot(g.pool.named_tensors()),
                                   snapshot(edge.named_tensors())};
    CHECK(before == after);
    CHECK(bn_before == g.router.bn.running_mean);
    CHECK(snapshot(a.weights.named_tensors()) != snapshot(edge.named_tensors()));

    for (std::size_t row = 0; row < 2; ++row) {
        std::size_t nz = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            nz += a.gates.gates.at(row, c) > 0.0 ? 1 : 0;
        }
        CHECK(nz == 2);
    }

    auto gg = g;
    gg.gate_mode = GateMode::gumbel;
    CHECK_THROWS_AS(meta::specialize(gg, edge, prompt), std::invalid_argument);
    std::mt19937_64 rng(1);
    CHECK(meta::specialize(gg, edge, prompt, &rng).gates.k_used == 4);
}

TEST_CASE("expert permutation equivariance") {
    const auto g = make_generator(6, true);
    const auto edge = lm::NanoLmWeights<double>::init(test::tiny_config(), 60);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    auto p = g;
    p.router = g.router.clone();
    p.pool = g.pool.clone();
    auto permute_cols = [&](const Tensord& t) {
        const auto rows = t.rows();
        std::vector<double> v(t.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < 4; ++c) {
                v[r * 4 + c] = t.values()[r * 4 + perm[c]];
            }
        }
        return Tensord(t.shape(), v);
    };
    p.router.f2_w = permute_cols(g.router.f2_w);
    p.router.f2_b = permute_cols(g.router.f2_b);
    p.router.bn_gamma = permute_cols(g.router.bn_gamma);
    p.router.bn_beta = permute_cols(g.router.bn_beta);
    for (std::size_t c = 0; c < 4; ++c) {
        p.router.bn.running_mean[c] = g.router.bn.running_mean[perm[c]];
        p.router.bn.running_var[c] = g.router.bn.running_var[perm[c]];
        p.pool.banks[0][c] = g.pool.clone().banks[0][perm[c]];
    }
    const auto prompt = lm::tokenize("Shift each letter.", lm::Segment::system_prompt);
    const auto a = meta::specialize(g, edge, prompt);
    const auto b = meta::specialize(p, edge, prompt);
    const auto na = a.weights.named_tensors();
    const auto nb = b.weights.named_tensors();
    double worst = 0.0;
    for (std::size_t i = 0; i < na.size(); ++i) {
        for (std::size_t j = 0; j < na[i].second.numel(); ++j) {
            worst = std::max(worst, std::abs(na[i].second.at(j) - nb[i].second.at(j)));
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("direct generation") {
    auto g = make_generator(7, false);
    g.gen_mode = meta::GenMode::direct;
    const auto edge = lm::NanoLmWeights<double>::init(test::tiny_config(), 70);
    const auto prompt = lm::tokenize("Convert every letter to uppercase.", lm::Segment::system_prompt);
    const auto batch = lm::PackedBatch::single(lm::tokenize("abc=").ids);

    // fresh projection has zero B columns
    const auto fresh = meta::specialize(g, edge, prompt);
    CHECK(lm::forward_logits(fresh.weights, batch).values() == lm::forward_logits(edge, batch).values());

    auto zero = g;
    zero.direct = g.direct.clone();
    for (auto& v : zero.direct.w.data_mut()) {
        v = 0.0;
    }
    const auto z = meta::specialize(zero, edge, prompt);
    CHECK(lm::forward_logits(z.weights, batch).values() == lm::forward_logits(edge, batch).values());

    std::mt19937_64 rng(7);
    for (auto& v : g.direct.w.data_mut()) {
        v = std::normal_distribution<double>(0.0, 0.05)(rng);
    }
    const auto a = meta::specialize(g, edge, prompt);
    const auto b = meta::specialize(g, edge, prompt);
    CHECK(snapshot(a.weights.named_tensors()) == snapshot(b.weights.named_tensors()));
    CHECK(snapshot(a.weights.named_tensors()) != snapshot(edge.named_tensors()));

    const auto e = test::tiny_config();
    CHECK(g.direct.width() == 3 * 4 * (e.d_model + e.d_ff));

    // at the default desk shapes the projection dwarfs router plus pool
    const auto cloud = lm::NanoLmConfig::cloud_default();
    const auto edge_d = lm::NanoLmConfig::edge_default();
    const auto proj = meta::init_direct<float>(cloud.d_model, edge_d, 16, 16.0, 1);
    const auto router = meta::init_router<float>(cloud.d_model, cloud.d_model / 2, 8, 1);
    const auto pool = lora::init_pool<float>(lora::PoolConfig{}, edge_d, 1);
    CHECK(proj.parameter_count() > 5 * (router.parameter_count() + pool.parameter_count()));
}

}  // TEST_SUITE
