// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lgen/metagen/metagen.hpp"
#include "lgen/tasks/tasks.hpp"

namespace lgen::eval {

/// incontext: base edge model, system prompt before the input.
/// specialized: specialized edge model, bare input.
/// base: base edge model, bare input (the promptless reference).
enum class Mode { incontext, specialized, base };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

/// Maps an input sequence to the generated answer text (end token stripped).
using TextModel = std::function<std::string(const lm::TokenSeq&)>;

/// Greedy decoding with the KV cache; stops at the end-of-answer token.
TextModel greedy_model(const lm::NanoLmWeights<float>& weights, std::size_t max_new);

/// The edge input for one example. In incontext mode `system_prompt` (the
/// example's own prompt when empty) precedes "input="; otherwise the input is
/// bare and carries no system-prompt tokens.
lm::TokenSeq eval_input(const tasks::TaskExample& example, Mode mode, const std::string& system_prompt = {});

/// Exact-match fraction of greedy outputs over all examples. Examples are
/// split over up to `threads` workers (0: LGEN_THREADS or 1). Throws on an
/// empty example list.
double accuracy(const TextModel& model, const std::vector<tasks::TaskExample>& examples, Mode mode,
                const std::string& system_prompt = {}, std::size_t threads = 0);

/// Arithmetic and harmonic mean. The harmonic mean is 0 when any entry is 0.
/// Throws on an empty list or an entry outside [0, 1].
std::pair<double, double> ave_har(const std::vector<double>& accuracies);

struct LatencyStats {
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    std::size_t reps = 0;
    std::size_t input_tokens = 0;
    std::size_t generated_tokens = 0;

    bool operator==(const LatencyStats&) const = default;
};

struct BenchSettings {
    std::size_t warmup = 3;
    std::size_t reps = 20;
    std::size_t gen_tokens = 16;  // fixed, end token ignored
};

/// Per-request wall clock: fill the cache with `input`, then decode exactly
/// gen_tokens greedy tokens. Runs on the calling thread. Throws when
/// warmup < 3, reps < 10, or the generated tokens differ between reps.
LatencyStats latency_bench(const lm::NanoLmWeights<float>& weights, const lm::TokenSeq& input,
                           const BenchSettings& settings);

/// (prompt_tokens + user_tokens) / user_tokens. Throws when user_tokens is 0.
double compression_ratio(std::size_t prompt_tokens, std::size_t user_tokens);

struct TaskRow {
    std::string task_id;
    std::string condition;
    double accuracy = 0.0;
    double latency_ms = -1.0;  // negative when not measured

    bool operator==(const TaskRow&) const = default;
};

struct EvalReport {
    std::string condition;  // the mode the summary fields refer to
    std::map<std::string, double> per_task_accuracy;
    double ave = 0.0;
    double har = 0.0;
    std::map<std::string, LatencyStats> latency_ms;
    double compression_ratio = 1.0;
    std::size_t prompt_tokens = 0;
    std::size_t user_tokens = 0;
    std::vector<TaskRow> rows;
    std::string fingerprint;
    std::uint64_t seed = 0;

    bool operator==(const EvalReport&) const = default;
};

void to_json(nlohmann::json& j, const LatencyStats& s);
void from_json(const nlohmann::json& j, LatencyStats& s);
void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Hex FNV-1a 64 of the config serialized with sorted keys.
std::string fingerprint(const nlohmann::json& config);

/// Writes `path` (JSON) and the same path with extension .csv holding
/// task_id,condition,accuracy,latency_ms per row. Throws std::runtime_error
/// when either file cannot be written.
void emit_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

struct EvalSettings {
    std::vector<Mode> modes{Mode::specialized};
    std::size_t examples_per_task = 50;
    std::size_t kshot = 0;  // shots in the in-context prompt
    std::size_t max_new = 40;
    std::size_t threads = 0;
    std::uint64_t seed = 0;
    bool bench = false;
    BenchSettings bench_settings;
};

/// Accuracy for every task under every requested mode; specialized mode
/// specializes once per task from its (k-shot) prompt. Optional latency per
/// task and condition on the first example. The summary fields describe the
/// first mode; token counts and compression come from the first task.
EvalReport evaluate(const meta::Generator<float>* gen, const lm::NanoLmWeights<float>& edge,
                    const std::vector<tasks::TaskSpec>& specs, const EvalSettings& settings,
                    const nlohmann::json& config = nlohmann::json::object());

/// The prompt used for a task: its description plus `kshot` solved examples
/// from a stream keyed by the seed.
std::string task_prompt(const tasks::TaskSpec& spec, std::size_t kshot, std::uint64_t seed);

/// Effective worker count: `requested`, else LGEN_THREADS, else 1.
std::size_t worker_count(std::size_t requested = 0);

}  // namespace lgen::eval
