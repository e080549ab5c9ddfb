// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "lgen/numcore/tensor.hpp"

namespace lgen::train {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// First and second moments per parameter, in parameter order.
struct AdamWState {
    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias-corrected moments:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Parameters without a gradient are treated as having a zero gradient.
template <typename T>
void adamw_step(std::vector<num::Tensor<T>>& params, AdamWState& state, double lr, const AdamWConfig& config);

/// Linear warmup from 0 to peak over `warmup` steps, then cosine decay to 0
/// at `total_steps`.
double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total_steps, double peak_lr);

/// Global L2 norm over all gradients.
template <typename T>
double grad_norm(const std::vector<num::Tensor<T>>& params);

/// Rescales gradients so their global norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<num::Tensor<T>>& params, double max_norm);

template <typename T>
void zero_grads(std::vector<num::Tensor<T>>& params);

}  // namespace lgen::train
