// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace lgen::lm {

using TokenId = std::uint32_t;

inline constexpr TokenId kByteVocab = 256;
inline constexpr TokenId kEndOfAnswer = 256;
inline constexpr TokenId kMetaBase = 257;
inline constexpr std::size_t kMaxMetaTokens = 16;
/// Bytes, end-of-answer, and the meta-token block.
inline constexpr std::size_t kVocabSize = kByteVocab + 1 + kMaxMetaTokens;

enum class Segment : std::uint8_t { system_prompt, meta, user_input, answer };

[[nodiscard]] constexpr bool is_meta_token(TokenId id) { return id >= kMetaBase && id < kMetaBase + kMaxMetaTokens; }
[[nodiscard]] TokenId meta_token(std::size_t index);

/// Token ids with a per-position segment label.
struct TokenSeq {
    std::vector<TokenId> ids;
    std::vector<Segment> segments;

    [[nodiscard]] std::size_t size() const { return ids.size(); }
    [[nodiscard]] bool empty() const { return ids.empty(); }
    void push_back(TokenId id, Segment seg) {
        ids.push_back(id);
        segments.push_back(seg);
    }
    void append(const TokenSeq& other);
    [[nodiscard]] std::size_t count(Segment seg) const;
};

/// Byte-level: every byte of `text` becomes one token labelled `seg`.
[[nodiscard]] TokenSeq tokenize(std::string_view text, Segment seg = Segment::user_input);
/// Inverse of tokenize for byte tokens; special tokens carry no bytes and are dropped.
[[nodiscard]] std::string detokenize(const TokenSeq& seq);
[[nodiscard]] std::string detokenize(const std::vector<TokenId>& ids);

}  // namespace lgen::lm
