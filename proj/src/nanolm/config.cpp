// SPDX-License-Identifier: Apache-2.0
#include "lgen/nanolm/config.hpp"

#include <stdexcept>

namespace lgen::lm {

void NanoLmConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0) {
        throw std::invalid_argument("nano-LM config extents must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                    std::to_string(n_heads));
    }
    if (vocab_size < kVocabSize) {
        throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) + " below byte vocabulary plus " +
                                    "special tokens (" + std::to_string(kVocabSize) + ")");
    }
    if (n_layers > kMaxMetaTokens) {
        throw std::invalid_argument("at most " + std::to_string(kMaxMetaTokens) + " layers are addressable by meta tokens");
    }
}

std::size_t NanoLmConfig::parameter_count() const {
    const std::size_t per_layer = 4 * d_model * d_model + 3 * d_model * d_ff + 2 * d_model;
    return vocab_size * d_model + max_seq * d_model + n_layers * per_layer + d_model;
}

NanoLmConfig NanoLmConfig::edge_default() {
    return NanoLmConfig{4, 128, 4, 512, kVocabSize, 256, Role::edge};
}

NanoLmConfig NanoLmConfig::cloud_default() {
    return NanoLmConfig{6, 256, 4, 1024, kVocabSize, 256, Role::cloud};
}

std::string to_string(Role role) { return role == Role::cloud ? "cloud" : "edge"; }

Role role_from_string(const std::string& s) {
    if (s == "cloud") {
        return Role::cloud;
    }
    if (s == "edge") {
        return Role::edge;
    }
    throw std::invalid_argument("unknown model role '" + s + "'");
}

void to_json(nlohmann::json& j, const NanoLmConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                       {"role", to_string(c.role)}};
}

void from_json(const nlohmann::json& j, NanoLmConfig& c) {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq = j.value("max_seq", c.max_seq);
    if (j.contains("role")) {
        c.role = role_from_string(j.at("role").get<std::string>());
    }
}

}  // namespace lgen::lm
