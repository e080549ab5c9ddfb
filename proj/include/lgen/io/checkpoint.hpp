// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgen/nanolm/model.hpp"
#include "lgen/numcore/tensor.hpp"

namespace lgen::io {

inline constexpr char kMagic[4] = {'L', 'G', 'E', 'N'};
inline constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TensorRecord {
    num::Shape shape;
    std::vector<float> data;

    bool operator==(const TensorRecord&) const = default;
};

/// Named f32 tensors plus free-form metadata. Layout on disk:
///   "LGEN" | u32 version | u64 header bytes | JSON header | payload
/// all little-endian. The header maps each name to {shape, dtype, offset}
/// (offset relative to the payload start) and carries "__metadata__".
struct Checkpoint {
    std::map<std::string, TensorRecord> tensors;
    nlohmann::json metadata = nlohmann::json::object();

    void put(const std::string& name, const num::Tensor<float>& t);
    void put(const std::string& name, const num::Tensor<double>& t);
    [[nodiscard]] bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    /// Throws CheckpointError when absent.
    [[nodiscard]] const TensorRecord& at(const std::string& name) const;
    template <typename T>
    [[nodiscard]] num::Tensor<T> tensor(const std::string& name) const;
    /// Names under `prefix`, with the prefix stripped.
    [[nodiscard]] std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
[[nodiscard]] std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on a missing file or malformed content.
[[nodiscard]] Checkpoint load_checkpoint(const std::filesystem::path& path);
[[nodiscard]] Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Weight set stored under `prefix` ("edge/", "cloud/", ...), config in metadata.
template <typename T>
void put_weights(Checkpoint& ckpt, const std::string& prefix, const lm::NanoLmWeights<T>& w);
template <typename T>
[[nodiscard]] lm::NanoLmWeights<T> get_weights(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace lgen::io
