#pragma once

#include <random>
#include <vector>

#include "lgen/nanolm/config.hpp"
#include "lgen/nanolm/tokenizer.hpp"
#include "lgen/numcore/tensor.hpp"

namespace lgen::test {

template <typename T = double>
num::Tensor<T> random_tensor(num::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                             bool requires_grad = false) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> data(num::shape_numel(shape));
    for (auto& v : data) {
        v = static_cast<T>(u(rng));
    }
    return num::Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

inline std::size_t random_extent(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 8) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline lm::NanoLmConfig tiny_config(lm::Role role = lm::Role::edge) {
    return lm::NanoLmConfig{2, 16, 2, 32, lm::kVocabSize, 48, role};
}

inline std::vector<lm::TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, lm::TokenId hi = 255) {
    std::uniform_int_distribution<lm::TokenId> u(0, hi);
    std::vector<lm::TokenId> out(n);
    for (auto& t : out) {
        t = u(rng);
    }
    return out;
}

}  // namespace lgen::test
