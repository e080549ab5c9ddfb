// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "lgen/numcore/tensor.hpp"

namespace lgen::num {

/// Independent stream seed for a named consumer of the run seed.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

template <typename T>
Tensor<T> randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) {
        v = static_cast<T>(dist(rng));
    }
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> filled(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor<T>(std::move(shape), std::vector<T>(n, value), requires_grad);
}

}  // namespace lgen::num
