// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgen/nanolm/tokenizer.hpp"

namespace lgen::tasks {

enum class Family { seen, unseen };

std::string to_string(Family f);

struct TaskSpec {
    std::string task_id;
    /// First line of every system prompt for this task.
    std::string description;
    Family family = Family::seen;
    std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
    std::size_t min_len = 4;
    std::size_t max_len = 12;
    std::function<std::string(const std::string&)> rule;
    /// Draw input letters without replacement (needs max_len <= alphabet size).
    bool distinct = false;

    /// Zero-shot system prompt.
    [[nodiscard]] std::string system_prompt() const { return description + "\n"; }
};

struct TaskExample {
    std::string task_id;
    std::string system_prompt;
    std::string input;
    std::string target;

    bool operator==(const TaskExample&) const = default;
};

class TaskDataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Seen: copy, reverse, uppercase, caesar1. Unseen: caesar2, duplicate.
const std::vector<TaskSpec>& builtin_tasks();
std::vector<TaskSpec> tasks_in(Family f);
/// Throws std::out_of_range for an unknown id.
const TaskSpec& find_task(const std::string& task_id);

/// Deterministic per (spec, seed). Each example carries the zero-shot prompt.
std::vector<TaskExample> make_examples(const TaskSpec& spec, std::size_t count, std::uint64_t seed);

/// Zero-shot prompt followed by k solved examples, one "input=target" per
/// line. The shots come from their own stream keyed by `shot_seed`.
std::string format_fewshot(const TaskSpec& spec, std::size_t k, std::uint64_t shot_seed = 0);

/// Prompt tokens then "input=" (user segment).
lm::TokenSeq incontext_query(const std::string& system_prompt, const std::string& input);
/// "input=" alone, as fed to a specialized model.
lm::TokenSeq bare_query(const std::string& input);
/// Target bytes followed by the end-of-answer token.
lm::TokenSeq answer_tokens(const std::string& target);

void write_jsonl(const std::vector<TaskExample>& examples, const std::filesystem::path& path);
/// Throws TaskDataError naming the line (and field) of a malformed record.
std::vector<TaskExample> read_jsonl(const std::filesystem::path& path);

}  // namespace lgen::tasks
