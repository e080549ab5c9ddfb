// SPDX-License-Identifier: Apache-2.0
#include "lgen/tasks/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>

#include <json.hpp>

#include "lgen/numcore/random.hpp"

namespace lgen::tasks {

namespace {

std::string shift_letters(const std::string& s, int by) {
    std::string out = s;
    for (auto& c : out) {
        if (c >= 'a' && c <= 'z') {
            c = static_cast<char>('a' + (c - 'a' + by) % 26);
        }
    }
    return out;
}

std::vector<TaskSpec> make_builtins() {
    std::vector<TaskSpec> t;
    t.push_back({"copy", "Copy the input text exactly.", Family::seen, {}, 4, 12,
                 [](const std::string& s) { return s; }});
    t.push_back({"reverse", "Write the input text backwards.", Family::seen, {}, 4, 12,
                 [](const std::string& s) { return std::string(s.rbegin(), s.rend()); }});
    t.push_back({"uppercase", "Convert every letter to uppercase.", Family::seen, {}, 4, 12, [](const std::string& s) {
                     std::string out = s;
                     std::transform(out.begin(), out.end(), out.begin(),
                                    [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
                     return out;
                 }});
    t.push_back({"caesar1", "Shift each letter forward by one in the alphabet.", Family::seen, {}, 4, 12,
                 [](const std::string& s) { return shift_letters(s, 1); }});
    t.push_back({"caesar2", "Shift each letter forward by two in the alphabet.", Family::unseen, {}, 4, 12,
                 [](const std::string& s) { return shift_letters(s, 2); }});
    t.push_back({"duplicate", "Write every letter twice.", Family::unseen, {}, 4, 12, [](const std::string& s) {
                     std::string out;
                     for (char c : s) {
                         out += c;
                         out += c;
                     }
                     return out;
                 }});
    for (auto& spec : t) {
        spec.alphabet = "abcdefghijklmnopqrstuvwxyz";
    }
    return t;
}

std::string random_input(const TaskSpec& spec, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> len(spec.min_len, spec.max_len);
    std::uniform_int_distribution<std::size_t> pick(0, spec.alphabet.size() - 1);
    const auto n = len(rng);
    if (spec.distinct) {
        std::string pool = spec.alphabet;
        for (std::size_t i = 0; i < n; ++i) {
            std::uniform_int_distribution<std::size_t> at(i, pool.size() - 1);
            std::swap(pool[i], pool[at(rng)]);
        }
        return pool.substr(0, n);
    }
    std::string s(n, ' ');
    for (auto& c : s) {
        c = spec.alphabet[pick(rng)];
    }
    return s;
}

}  // namespace

std::string to_string(Family f) { return f == Family::seen ? "seen" : "unseen"; }

const std::vector<TaskSpec>& builtin_tasks() {
    static const std::vector<TaskSpec> tasks = make_builtins();
    return tasks;
}

std::vector<TaskSpec> tasks_in(Family f) {
    std::vector<TaskSpec> out;
    for (const auto& t : builtin_tasks()) {
        if (t.family == f) {
            out.push_back(t);
        }
    }
    return out;
}

const TaskSpec& find_task(const std::string& task_id) {
    for (const auto& t : builtin_tasks()) {
        if (t.task_id == task_id) {
            return t;
        }
    }
    throw std::out_of_range("unknown task '" + task_id + "'");
}

std::vector<TaskExample> make_examples(const TaskSpec& spec, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(num::derive_seed(seed, "tasks.examples." + spec.task_id));
    std::vector<TaskExample> out;
    out.reserve(count);
    const auto prompt = spec.system_prompt();
    for (std::size_t i = 0; i < count; ++i) {
        auto input = random_input(spec, rng);
        auto target = spec.rule(input);
        out.push_back({spec.task_id, prompt, std::move(input), std::move(target)});
    }
    return out;
}

std::string format_fewshot(const TaskSpec& spec, std::size_t k, std::uint64_t shot_seed) {
    std::string prompt = spec.system_prompt();
    std::mt19937_64 rng(num::derive_seed(shot_seed, "tasks.shots." + spec.task_id));
    for (std::size_t i = 0; i < k; ++i) {
        const auto input = random_input(spec, rng);
        prompt += input + "=" + spec.rule(input) + "\n";
    }
    return prompt;
}

lm::TokenSeq incontext_query(const std::string& system_prompt, const std::string& input) {
    auto seq = lm::tokenize(system_prompt, lm::Segment::system_prompt);
    seq.append(bare_query(input));
    return seq;
}

lm::TokenSeq bare_query(const std::string& input) { return lm::tokenize(input + "=", lm::Segment::user_input); }

lm::TokenSeq answer_tokens(const std::string& target) {
    auto seq = lm::tokenize(target, lm::Segment::answer);
    seq.push_back(lm::kEndOfAnswer, lm::Segment::answer);
    return seq;
}

void write_jsonl(const std::vector<TaskExample>& examples, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw TaskDataError("cannot open '" + path.string() + "' for writing");
    }
    for (const auto& e : examples) {
        nlohmann::json j{{"task_id", e.task_id}, {"system_prompt", e.system_prompt}, {"input", e.input}, {"target", e.target}};
        f << j.dump() << '\n';
    }
    if (!f) {
        throw TaskDataError("short write to '" + path.string() + "'");
    }
}

std::vector<TaskExample> read_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw TaskDataError("cannot open '" + path.string() + "'");
    }
    std::vector<TaskExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw TaskDataError(where + ": malformed JSON: " + e.what());
        }
        if (!j.is_object()) {
            throw TaskDataError(where + ": record is not a JSON object");
        }
        TaskExample ex;
        for (auto [field, dst] : {std::pair{"task_id", &ex.task_id}, std::pair{"system_prompt", &ex.system_prompt},
                                  std::pair{"input", &ex.input}, std::pair{"target", &ex.target}}) {
            if (!j.contains(field)) {
                throw TaskDataError(where + ": missing field \"" + field + "\"");
            }
            if (!j.at(field).is_string()) {
                throw TaskDataError(where + ": field \"" + field + "\" is not a string");
            }
            *dst = j.at(field).get<std::string>();
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace lgen::tasks
