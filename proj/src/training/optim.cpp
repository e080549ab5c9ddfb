// SPDX-License-Identifier: Apache-2.0
#include "lgen/training/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lgen::train {

template <typename T>
void adamw_step(std::vector<num::Tensor<T>>& params, AdamWState& state, double lr, const AdamWConfig& config) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw std::invalid_argument("optimizer state was built for a different parameter list");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto data = p.data_mut();
        const auto grad = p.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != data.size()) {
            throw std::invalid_argument("optimizer state size mismatch for parameter " + std::to_string(i));
        }
        const bool has = grad.size() == data.size();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = has ? static_cast<double>(grad[j]) : 0.0;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            const double w = static_cast<double>(data[j]);
            data[j] = static_cast<T>(w - lr * (mh / (std::sqrt(vh) + config.eps) + config.weight_decay * w));
        }
    }
}

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total_steps, double peak_lr) {
    if (warmup > 0 && step < warmup) {
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (step >= total_steps) {
        return 0.0;
    }
    const double span = static_cast<double>(total_steps - warmup);
    const double progress = span > 0 ? static_cast<double>(step - warmup) / span : 1.0;
    return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double grad_norm(const std::vector<num::Tensor<T>>& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (T g : p.grad()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(std::vector<num::Tensor<T>>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (p.has_grad()) {
                for (auto& g : p.grad_mut()) {
                    g *= s;
                }
            }
        }
    }
    return norm;
}

template <typename T>
void zero_grads(std::vector<num::Tensor<T>>& params) {
    for (auto& p : params) {
        p.zero_grad();
    }
}

#define LGEN_INSTANTIATE_OPTIM(T)                                                                             \
    template void adamw_step<T>(std::vector<num::Tensor<T>>&, AdamWState&, double, const AdamWConfig&);      \
    template double grad_norm<T>(const std::vector<num::Tensor<T>>&);                                        \
    template double clip_grad_norm<T>(std::vector<num::Tensor<T>>&, double);                                 \
    template void zero_grads<T>(std::vector<num::Tensor<T>>&);
LGEN_INSTANTIATE_OPTIM(float)
LGEN_INSTANTIATE_OPTIM(double)
#undef LGEN_INSTANTIATE_OPTIM

}  // namespace lgen::train
