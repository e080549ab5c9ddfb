// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "lgen/numcore/tensor.hpp"

namespace lgen::num {

// Binary elementwise ops. `b` either matches `a`'s shape, holds a single
// element, is a row vector ([n] or [1,n]) over `a`'s last axis, or is a
// column [rows,1]. The result always has `a`'s shape.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T offset);

template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

/// [m,k] x [k,n] -> [m,n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// [m,k] x [n,k]^T -> [m,n].
template <typename T> Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Sum over the last axis: [rows,cols] -> [rows,1].
template <typename T> Tensor<T> row_sum(const Tensor<T>& x);
/// Mean over rows: [rows,cols] -> [1,cols].
template <typename T> Tensor<T> col_mean(const Tensor<T>& x);

/// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

template <typename T> Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5));

enum class BatchNormMode { train, infer };

class UninitializedStatistics : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    bool initialized = false;
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNormState fresh(std::size_t features) {
        BatchNormState s;
        s.running_mean.assign(features, T{0});
        s.running_var.assign(features, T{1});
        return s;
    }
};

/// Per-feature normalization over rows. Train mode uses the population
/// variance of the batch and folds it into the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                    BatchNormMode mode);

/// Rows of `table` picked by `ids`: [V,d] -> [ids.size(),d].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const std::uint32_t> ids);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
/// Copy of `x` whose rows listed in `rows` are replaced by the rows of `src`.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> rows, const Tensor<T>& src);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Each element repeated `times` consecutively, as a [1, n*times] row.
template <typename T> Tensor<T> repeat_each(const Tensor<T>& x, std::size_t times);

/// Inverted dropout; identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937_64& rng);

/// Multi-head causal self-attention over packed sequences. q, k, v are
/// [sum(seq_lens), d]; heads split d into equal contiguous column blocks.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads,
                           std::span<const std::size_t> seq_lens);

/// Mean token NLL over positions whose mask flag is set.
template <typename T>
Tensor<T> cross_entropy_lm(const Tensor<T>& logits, std::span<const std::uint32_t> targets,
                           std::span<const std::uint8_t> mask);

}  // namespace lgen::num
