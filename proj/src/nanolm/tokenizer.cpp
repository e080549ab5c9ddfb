// SPDX-License-Identifier: Apache-2.0
#include "lgen/nanolm/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace lgen::lm {

TokenId meta_token(std::size_t index) {
    if (index >= kMaxMetaTokens) {
        throw std::out_of_range("meta token index " + std::to_string(index) + " exceeds " +
                                std::to_string(kMaxMetaTokens));
    }
    return kMetaBase + static_cast<TokenId>(index);
}

void TokenSeq::append(const TokenSeq& other) {
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    segments.insert(segments.end(), other.segments.begin(), other.segments.end());
}

std::size_t TokenSeq::count(Segment seg) const {
    return static_cast<std::size_t>(std::count(segments.begin(), segments.end(), seg));
}

TokenSeq tokenize(std::string_view text, Segment seg) {
    TokenSeq out;
    out.ids.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<TokenId>(c), seg);
    }
    return out;
}

std::string detokenize(const std::vector<TokenId>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < kByteVocab) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::string detokenize(const TokenSeq& seq) { return detokenize(seq.ids); }

}  // namespace lgen::lm
