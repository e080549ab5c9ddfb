// SPDX-License-Identifier: Apache-2.0
#include "lgen/evalbench/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "lgen/nanolm/decoder.hpp"
#include "lgen/numcore/random.hpp"

namespace lgen::eval {

std::string to_string(Mode m) {
    switch (m) {
    case Mode::incontext: return "incontext";
    case Mode::specialized: return "specialized";
    case Mode::base: return "base";
    }
    return "?";
}

Mode mode_from_string(const std::string& s) {
    for (auto m : {Mode::incontext, Mode::specialized, Mode::base}) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw std::invalid_argument("unknown evaluation mode '" + s + "'");
}

TextModel greedy_model(const lm::NanoLmWeights<float>& weights, std::size_t max_new) {
    return [&weights, max_new](const lm::TokenSeq& input) {
        const auto out = lm::generate_greedy(weights, input, max_new);
        std::vector<lm::TokenId> gen(out.ids.begin() + static_cast<std::ptrdiff_t>(input.size()), out.ids.end());
        if (!gen.empty() && gen.back() == lm::kEndOfAnswer) {
            gen.pop_back();
        }
        return lm::detokenize(gen);
    };
}

lm::TokenSeq eval_input(const tasks::TaskExample& example, Mode mode, const std::string& system_prompt) {
    if (mode == Mode::incontext) {
        return tasks::incontext_query(system_prompt.empty() ? example.system_prompt : system_prompt, example.input);
    }
    return tasks::bare_query(example.input);
}

std::size_t worker_count(std::size_t requested) {
    if (requested > 0) {
        return requested;
    }
    if (const char* env = std::getenv("LGEN_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) {
            return static_cast<std::size_t>(n);
        }
    }
    return 1;
}

double accuracy(const TextModel& model, const std::vector<tasks::TaskExample>& examples, Mode mode,
                const std::string& system_prompt, std::size_t threads) {
    if (examples.empty()) {
        throw std::invalid_argument("accuracy needs at least one example");
    }
    std::vector<std::uint8_t> hit(examples.size(), 0);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < examples.size(); i += stride) {
            const auto input = eval_input(examples[i], mode, system_prompt);
            if (mode != Mode::incontext &&
                std::any_of(input.segments.begin(), input.segments.end(),
                            [](lm::Segment s) { return s == lm::Segment::system_prompt; })) {
                throw std::logic_error("bare evaluation input carries system-prompt tokens");
            }
            hit[i] = model(input) == examples[i].target ? 1 : 0;
        }
    };
    const auto n = std::min(worker_count(threads), examples.size());
    if (n <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(n);
        for (std::size_t t = 0; t < n; ++t) {
            pool.emplace_back([&, t] {
                try {
                    work(t, n);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
        for (const auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }
    std::size_t correct = 0;
    for (auto h : hit) {
        correct += h;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::pair<double, double> ave_har(const std::vector<double>& accuracies) {
    if (accuracies.empty()) {
        throw std::invalid_argument("ave_har needs at least one accuracy");
    }
    double sum = 0.0;
    double inv = 0.0;
    bool zero = false;
    for (double a : accuracies) {
        if (!(a >= 0.0 && a <= 1.0)) {
            throw std::invalid_argument("accuracy outside [0, 1]");
        }
        sum += a;
        if (a == 0.0) {
            zero = true;
        } else {
            inv += 1.0 / a;
        }
    }
    const auto m = static_cast<double>(accuracies.size());
    const double ave = sum / m;
    // the harmonic mean never exceeds the arithmetic one; clamp rounding
    const double har = zero ? 0.0 : std::min(ave, m / inv);
    return {ave, har};
}

namespace {

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<lm::TokenId> decode_fixed(lm::KvDecoder<float>& dec, const lm::TokenSeq& input, std::size_t n) {
    dec.reset();
    std::vector<lm::TokenId> out;
    out.reserve(n);
    const auto* logits = &dec.append(input.ids);
    for (std::size_t i = 0; i < n; ++i) {
        const auto next = lm::argmax_token<float>(*logits);
        out.push_back(next);
        if (i + 1 < n) {
            logits = &dec.step(next);
        }
    }
    return out;
}

}  // namespace

LatencyStats latency_bench(const lm::NanoLmWeights<float>& weights, const lm::TokenSeq& input,
                           const BenchSettings& settings) {
    if (settings.warmup < 3 || settings.reps < 10) {
        throw std::invalid_argument("latency_bench needs warmup >= 3 and reps >= 10");
    }
    if (settings.gen_tokens == 0 || input.size() == 0) {
        throw std::invalid_argument("latency_bench needs a nonempty input and gen_tokens >= 1");
    }
    if (input.size() + settings.gen_tokens > weights.config.max_seq + 1) {
        throw std::length_error("input plus generation exceeds the context");
    }
    lm::KvDecoder<float> dec(weights);
    const auto reference = decode_fixed(dec, input, settings.gen_tokens);
    for (std::size_t i = 1; i < settings.warmup; ++i) {
        decode_fixed(dec, input, settings.gen_tokens);
    }
    std::vector<double> ms;
    ms.reserve(settings.reps);
    for (std::size_t i = 0; i < settings.reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = decode_fixed(dec, input, settings.gen_tokens);
        const auto t1 = std::chrono::steady_clock::now();
        if (out != reference) {
            throw std::logic_error("generation differs between benchmark repetitions");
        }
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    LatencyStats s;
    double total = 0.0;
    for (double v : ms) {
        total += v;
    }
    s.mean_ms = total / static_cast<double>(ms.size());
    s.p50_ms = percentile(ms, 0.50);
    s.p95_ms = percentile(ms, 0.95);
    s.reps = settings.reps;
    s.input_tokens = input.size();
    s.generated_tokens = settings.gen_tokens;
    return s;
}

double compression_ratio(std::size_t prompt_tokens, std::size_t user_tokens) {
    if (user_tokens == 0) {
        throw std::invalid_argument("compression_ratio needs at least one user token");
    }
    return static_cast<double>(prompt_tokens + user_tokens) / static_cast<double>(user_tokens);
}

void to_json(nlohmann::json& j, const LatencyStats& s) {
    j = nlohmann::json{{"mean", s.mean_ms},
                       {"p50", s.p50_ms},
                       {"p95", s.p95_ms},
                       {"reps", s.reps},
                       {"input_tokens", s.input_tokens},
                       {"generated_tokens", s.generated_tokens}};
}

void from_json(const nlohmann::json& j, LatencyStats& s) {
    j.at("mean").get_to(s.mean_ms);
    j.at("p50").get_to(s.p50_ms);
    j.at("p95").get_to(s.p95_ms);
    j.at("reps").get_to(s.reps);
    j.at("input_tokens").get_to(s.input_tokens);
    j.at("generated_tokens").get_to(s.generated_tokens);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"task_id", row.task_id},
                        {"condition", row.condition},
                        {"accuracy", row.accuracy},
                        {"latency_ms", row.latency_ms}});
    }
    j = nlohmann::json{{"condition", r.condition},
                       {"per_task_accuracy", r.per_task_accuracy},
                       {"ave", r.ave},
                       {"har", r.har},
                       {"latency_ms", r.latency_ms},
                       {"compression_ratio", r.compression_ratio},
                       {"token_counts", {{"prompt_tokens", r.prompt_tokens}, {"user_tokens", r.user_tokens}}},
                       {"rows", rows},
                       {"fingerprint", r.fingerprint},
                       {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
    j.at("condition").get_to(r.condition);
    j.at("per_task_accuracy").get_to(r.per_task_accuracy);
    j.at("ave").get_to(r.ave);
    j.at("har").get_to(r.har);
    j.at("latency_ms").get_to(r.latency_ms);
    j.at("compression_ratio").get_to(r.compression_ratio);
    j.at("token_counts").at("prompt_tokens").get_to(r.prompt_tokens);
    j.at("token_counts").at("user_tokens").get_to(r.user_tokens);
    r.rows.clear();
    for (const auto& row : j.at("rows")) {
        r.rows.push_back({row.at("task_id").get<std::string>(), row.at("condition").get<std::string>(),
                          row.at("accuracy").get<double>(), row.at("latency_ms").get<double>()});
    }
    j.at("fingerprint").get_to(r.fingerprint);
    j.at("seed").get_to(r.seed);
}

std::string fingerprint(const nlohmann::json& config) {
    // nlohmann objects keep keys sorted, so dump() is canonical
    const auto text = config.dump();
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void emit_report(const EvalReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    {
        std::ofstream f(path, std::ios::trunc);
        if (!f) {
            throw std::runtime_error("cannot write report '" + path.string() + "'");
        }
        f << nlohmann::json(report).dump(2) << '\n';
        if (!f) {
            throw std::runtime_error("short write to '" + path.string() + "'");
        }
    }
    auto csv_path = path;
    csv_path.replace_extension(".csv");
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) {
        throw std::runtime_error("cannot write report '" + csv_path.string() + "'");
    }
    csv << "task_id,condition,accuracy,latency_ms\n";
    for (const auto& row : report.rows) {
        csv << row.task_id << ',' << row.condition << ',' << nlohmann::json(row.accuracy).dump() << ','
            << nlohmann::json(row.latency_ms).dump() << '\n';
    }
    if (!csv) {
        throw std::runtime_error("short write to '" + csv_path.string() + "'");
    }
}

EvalReport read_report(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("cannot open report '" + path.string() + "'");
    }
    return nlohmann::json::parse(f).get<EvalReport>();
}

std::string task_prompt(const tasks::TaskSpec& spec, std::size_t kshot, std::uint64_t seed) {
    return tasks::format_fewshot(spec, kshot, num::derive_seed(seed, "eval.shots"));
}

EvalReport evaluate(const meta::Generator<float>* gen, const lm::NanoLmWeights<float>& edge,
                    const std::vector<tasks::TaskSpec>& specs, const EvalSettings& settings,
                    const nlohmann::json& config) {
    if (specs.empty() || settings.modes.empty()) {
        throw std::invalid_argument("evaluation needs at least one task and one mode");
    }
    EvalReport report;
    report.condition = to_string(settings.modes.front());
    report.seed = settings.seed;
    report.fingerprint = fingerprint(config);
    std::vector<double> summary;
    for (const auto& spec : specs) {
        const auto examples =
            tasks::make_examples(spec, settings.examples_per_task, num::derive_seed(settings.seed, "eval.examples"));
        const auto prompt = task_prompt(spec, settings.kshot, settings.seed);
        for (auto mode : settings.modes) {
            const lm::NanoLmWeights<float>* model = &edge;
            meta::Specialized<float> specialized;
            if (mode == Mode::specialized) {
                if (gen == nullptr) {
                    throw std::invalid_argument("specialized evaluation needs a trained generator");
                }
                std::mt19937_64 rng(num::derive_seed(settings.seed, "eval.gates." + spec.task_id));
                specialized = meta::specialize(*gen, edge, lm::tokenize(prompt, lm::Segment::system_prompt), &rng);
                model = &specialized.weights;
            }
            TaskRow row{spec.task_id, to_string(mode), 0.0, -1.0};
            row.accuracy = accuracy(greedy_model(*model, settings.max_new), examples, mode, prompt, settings.threads);
            const auto input = eval_input(examples.front(), mode, prompt);
            if (settings.bench) {
                const auto stats = latency_bench(*model, input, settings.bench_settings);
                row.latency_ms = stats.mean_ms;
                if (&spec == &specs.front()) {
                    report.latency_ms[row.condition] = stats;
                }
            }
            if (mode == settings.modes.front()) {
                report.per_task_accuracy[spec.task_id] = row.accuracy;
                summary.push_back(row.accuracy);
            }
            report.rows.push_back(std::move(row));
        }
        if (&spec == &specs.front()) {
            report.prompt_tokens = lm::tokenize(prompt).size();
            report.user_tokens = tasks::bare_query(examples.front().input).size();
            report.compression_ratio = compression_ratio(report.prompt_tokens, report.user_tokens);
        }
    }
    std::tie(report.ave, report.har) = ave_har(summary);
    return report;
}

}  // namespace lgen::eval
