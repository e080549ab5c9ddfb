// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgen/metagen/metagen.hpp"
#include "lgen/tasks/tasks.hpp"
#include "lgen/training/optim.hpp"

namespace lgen::train {

using num::Tensor;

/// alpha * (sigma / (mu + 1e-8))^2 over the per-expert mean gate of all rows
/// (batch x layers). Population standard deviation.
template <typename T>
Tensor<T> cv_aux_loss(const Tensor<T>& gates, double alpha);

template <typename T>
Tensor<T> total_loss(const Tensor<T>& lm_loss, const Tensor<T>& cv_loss);

struct TrainConfig {
    double learning_rate = 2e-5;
    /// Peak rate for GenMode::direct, whose single projection writes every
    /// LoRA entry directly and diverges at rates the router path tolerates.
    double direct_learning_rate = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.1;
    std::size_t warmup_steps = 50;
    std::string schedule = "cosine";  // cosine | constant
    std::size_t batch_size = 16;      // examples per step
    std::size_t group_size = 4;       // examples sharing one system prompt
    std::size_t epochs = 4;
    std::size_t max_length = 256;
    double aux_alpha = 0.01;
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    std::size_t lora_r = 16;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    std::size_t router_hidden = 64;
    double grad_clip = 1.0;
    std::size_t examples_per_task = 512;
    std::size_t kshot_min = 0;
    std::size_t kshot_max = 5;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t groups_per_batch() const { return batch_size / group_size; }
    [[nodiscard]] AdamWConfig adamw() const { return {beta1, beta2, 1e-8, weight_decay}; }
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Examples that share one system prompt.
struct TaskGroup {
    std::string task_id;
    std::string system_prompt;
    std::vector<tasks::TaskExample> examples;
};
using TrainBatch = std::vector<TaskGroup>;

/// Packed sequences with next-token targets. `answer_only` keeps the loss on
/// positions whose next token belongs to the answer segment.
struct LmBatch {
    lm::PackedBatch batch;
    std::vector<lm::TokenId> targets;
    std::vector<std::uint8_t> mask;
};
LmBatch make_lm_batch(const std::vector<lm::TokenSeq>& seqs, bool answer_only);

template <typename T>
struct PipelineOutput {
    Tensor<T> lm_loss;
    Tensor<T> cv_loss;
    Tensor<T> total;
    Tensor<T> gates;  // [groups * L, n]; undefined for direct generation
};

/// The training path for one batch: meta hidden states of every group's
/// prompt in one cloud forward, router in train mode over all groups' rows,
/// gates, per-group assembly and masked LM loss on the bare queries through
/// the adapted edge model. With `rng` LoRA dropout is active (and Gumbel gates
/// get noise); without it the path is deterministic. Throws on an empty batch.
template <typename T>
PipelineOutput<T> pipeline_loss(meta::Generator<T>& gen, const lm::NanoLmWeights<T>& edge, const TrainBatch& batch,
                                double aux_alpha, double dropout, std::mt19937_64* rng);

/// Fresh trainable components for the given frozen bases.
template <typename T>
meta::Generator<T> init_generator(const lm::NanoLmWeights<T>& cloud, const lm::NanoLmWeights<T>& edge,
                                  const TrainConfig& config, meta::GenMode gen_mode, meta::GateMode gate_mode);

struct StepMetrics {
    std::size_t step = 0;
    double lm_loss = 0.0;
    double cv_loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::vector<double> load;  // per-expert mean gate
};
void to_json(nlohmann::json& j, const StepMetrics& m);

/// Gradient norms per trainable group, taken before clipping.
struct GradAudit {
    double cloud_lora = 0.0;
    double meta_emb = 0.0;
    double router = 0.0;
    double pool = 0.0;
    double direct = 0.0;
};

/// Owns the trainables and optimizer state. Base weights are never updated.
class Trainer {
public:
    Trainer(meta::Generator<float> gen, lm::NanoLmWeights<float> edge, TrainConfig config, std::size_t total_steps);

    StepMetrics step(const TrainBatch& batch);

    [[nodiscard]] const meta::Generator<float>& generator() const { return gen_; }
    [[nodiscard]] const lm::NanoLmWeights<float>& edge() const { return edge_; }
    [[nodiscard]] const TrainConfig& config() const { return config_; }
    [[nodiscard]] const GradAudit& last_audit() const { return audit_; }
    [[nodiscard]] std::size_t steps_done() const { return step_; }
    [[nodiscard]] std::vector<Tensor<float>> trainables() const;

private:
    meta::Generator<float> gen_;
    lm::NanoLmWeights<float> edge_;
    TrainConfig config_;
    std::size_t total_steps_;
    std::size_t step_ = 0;
    AdamWState adam_;
    std::mt19937_64 rng_;
    GradAudit audit_;
};

/// One epoch of task-grouped batches over the given (seen) tasks. Every batch
/// holds groups_per_batch() groups in round-robin task order, so it spans
/// several tasks whenever more than one is given. Throws if an unseen task is
/// passed.
std::vector<TrainBatch> make_epoch(const std::vector<tasks::TaskSpec>& specs, const TrainConfig& config,
                                   std::size_t epoch);
std::size_t steps_per_epoch(const std::vector<tasks::TaskSpec>& specs, const TrainConfig& config);

using StepCallback = std::function<void(const Trainer&, const StepMetrics&)>;

/// Runs config.epochs epochs, writing one JSON line per step to `log` when given.
std::vector<StepMetrics> train_lora_gen(Trainer& trainer, const std::vector<tasks::TaskSpec>& specs,
                                        std::ostream* log = nullptr, const StepCallback& on_step = {});

/// Load entropy -sum p log p of a per-expert load vector normalized to sum 1.
double load_entropy(const std::vector<double>& load);

// ---------------------------------------------------------------------------
// Base-model pretraining.

struct PretrainConfig {
    std::size_t max_steps = 3000;
    /// Leading steps drawn from bare demonstrations only.
    std::size_t bare_only_steps = 0;
    std::size_t batch_size = 64;
    double learning_rate = 3e-3;
    std::size_t warmup_steps = 100;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    std::size_t kshot_max = 5;
    double bare_fraction = 0.6;
    std::size_t eval_every = 100;
    std::size_t eval_sequences = 128;
    double target_loss = 1.0;  // held-out nat/byte
    bool stop_at_target = false;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// A corpus sequence plus a flag per position marking bytes drawn uniformly
/// at random (task inputs). Those carry ln(26) nats of irreducible entropy and
/// are left out of the held-out score.
struct CorpusItem {
    lm::TokenSeq seq;
    std::vector<std::uint8_t> noise;
};

/// One corpus sequence: a task demonstration with 0..kshot_max shots after
/// its description, or (with probability bare_fraction) a bare "input=answer".
CorpusItem pretrain_sequence(std::mt19937_64& rng, const std::vector<tasks::TaskSpec>& specs, std::size_t kshot_max,
                             double bare_fraction);

/// Fixed held-out corpus drawn from a stream disjoint from the training one.
std::vector<CorpusItem> heldout_corpus(const PretrainConfig& config, const std::vector<tasks::TaskSpec>& specs);

/// Mean next-token NLL per byte over every position whose target is not a
/// random input byte.
double heldout_loss(const lm::NanoLmWeights<float>& weights, const std::vector<CorpusItem>& corpus);

struct PretrainMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double heldout = -1.0;  // negative when not evaluated at this step
};
void to_json(nlohmann::json& j, const PretrainMetrics& m);

struct PretrainResult {
    std::size_t steps = 0;
    double heldout = 0.0;
    bool reached_target = false;
};

/// Plain next-token objective over whole sequences, all weights trainable.
/// Evaluates every eval_every steps and at the end.
PretrainResult pretrain(lm::NanoLmWeights<float>& weights, const PretrainConfig& config,
                        const std::vector<tasks::TaskSpec>& specs, std::ostream* log = nullptr,
                        const std::function<void(const PretrainMetrics&)>& on_step = {});

}  // namespace lgen::train
