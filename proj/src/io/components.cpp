// SPDX-License-Identifier: Apache-2.0
#include "lgen/io/components.hpp"

namespace lgen::io {

namespace {

void put_all(Checkpoint& ckpt, const std::string& prefix,
             const std::vector<std::pair<std::string, num::Tensor<float>>>& named) {
    for (const auto& [name, t] : named) {
        ckpt.put(prefix + name, t);
    }
}

void load_all(const Checkpoint& ckpt, const std::string& prefix,
              const std::vector<std::pair<std::string, num::Tensor<float>>>& named) {
    for (auto [name, t] : named) {
        const auto& rec = ckpt.at(prefix + name);
        if (rec.shape != t.shape()) {
            throw CheckpointError("tensor '" + prefix + name + "' has shape " + num::shape_str(rec.shape) +
                                  ", expected " + num::shape_str(t.shape()));
        }
        std::copy(rec.data.begin(), rec.data.end(), t.data_mut().begin());
    }
}

const nlohmann::json& section(const Checkpoint& ckpt, const char* key) {
    if (!ckpt.metadata.contains(key)) {
        throw CheckpointError(std::string("checkpoint has no '") + key + "' section");
    }
    return ckpt.metadata.at(key);
}

}  // namespace

void put_generator(Checkpoint& ckpt, const meta::Generator<float>& gen) {
    put_weights(ckpt, "cloud/", gen.cloud);
    put_all(ckpt, "adapter/", gen.adapter.named_tensors());
    ckpt.metadata["adapter"] = {{"rank", gen.adapter.rank},
                                {"alpha", gen.adapter.alpha},
                                {"dropout", gen.adapter.dropout},
                                {"n_meta", gen.adapter.n_meta()}};

    put_all(ckpt, "router/", gen.router.named_tensors());
    const auto n = gen.router.n_experts();
    ckpt.put("router/bn.running_mean", num::Tensor<float>({n}, gen.router.bn.running_mean));
    ckpt.put("router/bn.running_var", num::Tensor<float>({n}, gen.router.bn.running_var));
    ckpt.metadata["router"] = {{"d_router", gen.router.f1_w.dim(1)},
                               {"initialized", gen.router.bn.initialized},
                               {"momentum", gen.router.bn.momentum},
                               {"eps", gen.router.bn.eps}};

    put_all(ckpt, "pool/", gen.pool.named_tensors());
    ckpt.metadata["pool"] = gen.pool.config;
    ckpt.metadata["pool_edge"] = gen.pool.edge;

    if (gen.gen_mode == meta::GenMode::direct) {
        put_all(ckpt, "direct/", gen.direct.named_tensors());
        ckpt.metadata["direct"] = {{"rank", gen.direct.rank}, {"alpha", gen.direct.alpha}};
    }
    ckpt.metadata["generator"] = {{"gen_mode", meta::to_string(gen.gen_mode)},
                                  {"gate_mode", meta::to_string(gen.gate_mode)},
                                  {"top_k", gen.top_k}};
}

meta::Generator<float> get_generator(const Checkpoint& ckpt) {
    meta::Generator<float> gen;
    try {
        gen.cloud = get_weights<float>(ckpt, "cloud/");
        const auto& g = section(ckpt, "generator");
        gen.gen_mode = meta::gen_mode_from_string(g.at("gen_mode").get<std::string>());
        gen.gate_mode = meta::gate_mode_from_string(g.at("gate_mode").get<std::string>());
        gen.top_k = g.at("top_k").get<std::size_t>();

        const auto& a = section(ckpt, "adapter");
        gen.adapter = meta::init_cloud_adapter(gen.cloud, a.at("n_meta").get<std::size_t>(),
                                               a.at("rank").get<std::size_t>(), a.at("alpha").get<double>(),
                                               a.at("dropout").get<double>(), 0);
        load_all(ckpt, "adapter/", gen.adapter.named_tensors());

        const auto pool_config = section(ckpt, "pool").get<lora::PoolConfig>();
        const auto edge = section(ckpt, "pool_edge").get<lm::NanoLmConfig>();
        const auto& r = section(ckpt, "router");
        gen.router = meta::init_router<float>(gen.cloud.config.d_model, r.at("d_router").get<std::size_t>(),
                                              pool_config.n_experts, 0);
        load_all(ckpt, "router/", gen.router.named_tensors());
        const auto n = pool_config.n_experts;
        const auto& mean = ckpt.at("router/bn.running_mean");
        const auto& var = ckpt.at("router/bn.running_var");
        if (mean.data.size() != n || var.data.size() != n) {
            throw CheckpointError("router statistics do not match the expert count");
        }
        gen.router.bn.running_mean = mean.data;
        gen.router.bn.running_var = var.data;
        gen.router.bn.initialized = r.at("initialized").get<bool>();
        gen.router.bn.momentum = r.at("momentum").get<float>();
        gen.router.bn.eps = r.at("eps").get<float>();

        gen.pool = lora::init_pool<float>(pool_config, edge, 0);
        load_all(ckpt, "pool/", gen.pool.named_tensors());

        if (gen.gen_mode == meta::GenMode::direct) {
            const auto& d = section(ckpt, "direct");
            gen.direct = meta::init_direct<float>(gen.cloud.config.d_model, edge, d.at("rank").get<std::size_t>(),
                                                  d.at("alpha").get<double>(), 0);
            load_all(ckpt, "direct/", gen.direct.named_tensors());
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed generator metadata: ") + e.what());
    }
    return gen;
}

}  // namespace lgen::io
