// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "lgen/nanolm/model.hpp"

namespace lgen::lm {

/// Incremental inference with a key/value cache. Reads the weights without
/// touching the autodiff graph; the weights must outlive the decoder.
template <typename T>
class KvDecoder {
public:
    explicit KvDecoder(const NanoLmWeights<T>& weights);

    void reset();
    [[nodiscard]] std::size_t position() const { return pos_; }
    [[nodiscard]] std::size_t capacity() const { return w_.config.max_seq; }

    /// Feeds a block of tokens and returns the logits after the last one.
    /// Throws std::length_error past max_seq.
    const std::vector<T>& append(std::span<const TokenId> ids);
    const std::vector<T>& step(TokenId id) { return append(std::span<const TokenId>(&id, 1)); }

private:
    const NanoLmWeights<T>& w_;
    std::size_t pos_ = 0;
    std::vector<std::vector<T>> k_cache_, v_cache_;  // per layer, [max_seq, d]
    std::vector<T> logits_;
};

/// Lowest id among the maxima.
template <typename T>
TokenId argmax_token(std::span<const T> logits);

/// Appends greedy tokens to `prompt` until max_new tokens, an end-of-answer
/// token (kept), or a full context. New positions are labelled as answer.
template <typename T>
TokenSeq generate_greedy(const NanoLmWeights<T>& weights, const TokenSeq& prompt, std::size_t max_new);

extern template class KvDecoder<float>;
extern template class KvDecoder<double>;

}  // namespace lgen::lm
