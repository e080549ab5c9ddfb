// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgen/evalbench/evalbench.hpp"
#include "lgen/training/training.hpp"

namespace lgen::cli {

/// Bad flag, bad config key or bad config value. Maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The merged run configuration: built-in defaults, then a JSON file, then
/// dotted-key overrides ("train.learning_rate=1e-3"), then dedicated flags.
/// Every key must already exist in the defaults.
class RunConfig {
public:
    RunConfig();

    /// Deep-merges a JSON object; throws UsageError on an unknown key or a
    /// value of a different JSON type than the default.
    void merge(const nlohmann::json& patch);
    void merge_file(const std::filesystem::path& path);
    /// `key` is a dotted path, `value` is parsed as JSON and taken as a plain
    /// string when that fails.
    void set(const std::string& key, const std::string& value);

    [[nodiscard]] const nlohmann::json& doc() const { return doc_; }
    [[nodiscard]] std::uint64_t seed() const;
    [[nodiscard]] std::filesystem::path out_dir() const;

    [[nodiscard]] lm::NanoLmConfig model_config(lm::Role role) const;
    /// Seeds of the returned sub-configs are derived from the run seed.
    [[nodiscard]] train::PretrainConfig pretrain_config(lm::Role role) const;
    [[nodiscard]] train::TrainConfig train_config() const;
    [[nodiscard]] meta::GateMode gate_mode() const;
    [[nodiscard]] meta::GenMode gen_mode() const;
    [[nodiscard]] std::vector<tasks::TaskSpec> train_tasks() const;
    [[nodiscard]] std::vector<tasks::TaskSpec> eval_tasks() const;
    [[nodiscard]] eval::EvalSettings eval_settings() const;
    [[nodiscard]] std::size_t checkpoint_every() const;

    /// Checks every typed view; throws UsageError with the first problem.
    void validate() const;

    /// Default location of each artifact under out_dir().
    [[nodiscard]] std::filesystem::path base_path(lm::Role role) const;
    [[nodiscard]] std::filesystem::path generator_path() const;

private:
    nlohmann::json doc_;
};

/// Entry point of the lgen executable. Returns the process exit code:
/// 0 success, 1 runtime failure (missing checkpoint, I/O), 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lgen::cli
