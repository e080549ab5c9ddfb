// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "lgen/nanolm/tokenizer.hpp"

namespace lgen::lm {

enum class Role { cloud, edge };

struct NanoLmConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t vocab_size = kVocabSize;
    std::size_t max_seq = 256;
    Role role = Role::edge;

    /// Throws std::invalid_argument on a broken configuration.
    void validate() const;
    [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }
    [[nodiscard]] std::size_t parameter_count() const;

    static NanoLmConfig edge_default();
    static NanoLmConfig cloud_default();

    bool operator==(const NanoLmConfig&) const = default;
};

std::string to_string(Role role);
Role role_from_string(const std::string& s);

void to_json(nlohmann::json& j, const NanoLmConfig& c);
void from_json(const nlohmann::json& j, NanoLmConfig& c);

}  // namespace lgen::lm
