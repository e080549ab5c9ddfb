// SPDX-License-Identifier: Apache-2.0
#include "lgen/io/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lgen::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) {
        throw CheckpointError("checkpoint truncated in fixed header");
    }
    U v;
    std::memcpy(&v, in.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
}

std::string config_key(const std::string& prefix) { return "config:" + prefix; }

}  // namespace

void Checkpoint::put(const std::string& name, const num::Tensor<float>& t) {
    tensors[name] = TensorRecord{t.shape(), t.values()};
}

void Checkpoint::put(const std::string& name, const num::Tensor<double>& t) {
    put(name, t.cast<float>());
}

const TensorRecord& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw CheckpointError("checkpoint has no tensor '" + name + "'");
    }
    return it->second;
}

template <typename T>
num::Tensor<T> Checkpoint::tensor(const std::string& name) const {
    const auto& rec = at(name);
    return num::Tensor<float>(rec.shape, rec.data).cast<T>();
}

std::vector<std::string> Checkpoint::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, rec] : tensors) {
        if (name.starts_with(prefix)) {
            out.push_back(name.substr(prefix.size()));
        }
    }
    return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, rec] : ckpt.tensors) {
        if (num::shape_numel(rec.shape) != rec.data.size()) {
            throw CheckpointError("tensor '" + name + "' shape does not match its data");
        }
        header[name] = {{"shape", rec.shape}, {"dtype", "f32"}, {"offset", offset}};
        offset += rec.data.size() * sizeof(float);
    }
    header["__metadata__"] = ckpt.metadata;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(16 + text.size() + offset);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_le<std::uint32_t>(out, kFormatVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, rec] : ckpt.tensors) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(rec.data.data());
        out.insert(out.end(), p, p + rec.data.size() * sizeof(float));
    }
    return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CheckpointError("not an LGEN checkpoint (bad magic)");
    }
    std::size_t pos = 4;
    const auto version = get_le<std::uint32_t>(bytes, pos);
    if (version != kFormatVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = get_le<std::uint64_t>(bytes, pos);
    if (header_len > bytes.size() - pos) {
        throw CheckpointError("checkpoint truncated in JSON header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    pos += header_len;
    const std::size_t payload = pos;

    Checkpoint ckpt;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            ckpt.metadata = entry;
            continue;
        }
        try {
            if (entry.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError("tensor '" + name + "' has unsupported dtype");
            }
            TensorRecord rec;
            rec.shape = entry.at("shape").get<num::Shape>();
            const auto off = entry.at("offset").get<std::uint64_t>();
            const auto n = num::shape_numel(rec.shape);
            if (off > bytes.size() - payload || n * sizeof(float) > bytes.size() - payload - off) {
                throw CheckpointError("tensor '" + name + "' runs past the end of the payload");
            }
            rec.data.resize(n);
            std::memcpy(rec.data.data(), bytes.data() + payload + off, n * sizeof(float));
            ckpt.tensors.emplace(name, std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError("malformed entry for tensor '" + name + "': " + e.what());
        }
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw CheckpointError("cannot open '" + path.string() + "' for writing");
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw CheckpointError("short write to '" + path.string() + "'");
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

template <typename T>
void put_weights(Checkpoint& ckpt, const std::string& prefix, const lm::NanoLmWeights<T>& w) {
    for (const auto& [name, t] : w.named_tensors()) {
        ckpt.put(prefix + name, t);
    }
    ckpt.metadata[config_key(prefix)] = w.config;
}

template <typename T>
lm::NanoLmWeights<T> get_weights(const Checkpoint& ckpt, const std::string& prefix) {
    const auto key = config_key(prefix);
    if (!ckpt.metadata.contains(key)) {
        throw CheckpointError("checkpoint holds no model under '" + prefix + "'");
    }
    lm::NanoLmWeights<T> w = lm::NanoLmWeights<T>::zeros(ckpt.metadata.at(key).get<lm::NanoLmConfig>());
    for (auto& [name, t] : w.named_tensors()) {
        const auto& rec = ckpt.at(prefix + name);
        if (rec.shape != t.shape()) {
            throw CheckpointError("tensor '" + prefix + name + "' has shape " + num::shape_str(rec.shape) +
                                  ", config expects " + num::shape_str(t.shape()));
        }
        auto dst = t.data_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = static_cast<T>(rec.data[i]);
        }
    }
    return w;
}

template num::Tensor<float> Checkpoint::tensor<float>(const std::string&) const;
template num::Tensor<double> Checkpoint::tensor<double>(const std::string&) const;
template void put_weights<float>(Checkpoint&, const std::string&, const lm::NanoLmWeights<float>&);
template void put_weights<double>(Checkpoint&, const std::string&, const lm::NanoLmWeights<double>&);
template lm::NanoLmWeights<float> get_weights<float>(const Checkpoint&, const std::string&);
template lm::NanoLmWeights<double> get_weights<double>(const Checkpoint&, const std::string&);

}  // namespace lgen::io
