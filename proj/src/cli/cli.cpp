// SPDX-License-Identifier: Apache-2.0
#include "lgen/cli/cli.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "lgen/io/components.hpp"
#include "lgen/numcore/random.hpp"

namespace lgen::cli {

namespace {

nlohmann::json default_doc() {
    const lm::NanoLmConfig edge{4, 64, 4, 256, lm::kVocabSize, 256, lm::Role::edge};
    const lm::NanoLmConfig cloud{4, 96, 4, 384, lm::kVocabSize, 256, lm::Role::cloud};

    train::PretrainConfig pe;
    // the specialized edge only ever reads bare inputs; the cloud must read descriptions
    pe.max_steps = 9000;
    pe.bare_only_steps = 9000;
    pe.batch_size = 64;
    pe.learning_rate = 3e-3;
    pe.kshot_max = 1;
    pe.bare_fraction = 1.0;
    pe.eval_every = 500;
    train::PretrainConfig pc = pe;
    pc.max_steps = 2000;
    pc.bare_only_steps = 500;
    pc.batch_size = 32;
    pc.bare_fraction = 0.5;
    pc.eval_every = 250;

    train::TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.direct_learning_rate = 2e-4;

    nlohmann::json doc;
    doc["seed"] = 0;
    doc["out"] = "runs/default";
    doc["models"] = {{"edge", edge}, {"cloud", cloud}};
    doc["pretrain"] = {{"edge", pe}, {"cloud", pc}};
    doc["train"] = tc;
    doc["gate_mode"] = "keeptopk";
    doc["gen_mode"] = "meta";
    doc["checkpoint_every"] = 128;
    doc["tasks"] = {{"train", {"copy", "reverse", "uppercase", "caesar1"}},
                    {"eval", {"copy", "reverse", "uppercase", "caesar1", "caesar2", "duplicate"}}};
    doc["eval"] = {{"modes", {"specialized", "incontext", "base"}},
                   {"examples_per_task", 50},
                   {"kshot", 5},
                   {"max_new", 40},
                   {"threads", 0},
                   {"warmup", 3},
                   {"reps", 20},
                   {"gen_tokens", 16}};
    // "seed" inside sub-configs is always derived from the run seed
    for (auto* sub : {&doc["pretrain"]["edge"], &doc["pretrain"]["cloud"], &doc["train"]}) {
        sub->erase("seed");
    }
    return doc;
}

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
    if (a.is_number() && b.is_number()) {
        return !(a.is_number_integer() && b.is_number_float());
    }
    return a.type() == b.type();
}

void merge_into(nlohmann::json& dst, const nlohmann::json& patch, const std::string& where) {
    if (!patch.is_object()) {
        throw UsageError("config" + (where.empty() ? std::string() : " key '" + where + "'") + " must be an object");
    }
    for (const auto& [key, value] : patch.items()) {
        const auto path = where.empty() ? key : where + "." + key;
        if (!dst.contains(key)) {
            throw UsageError("unknown config key '" + path + "'");
        }
        auto& slot = dst[key];
        if (slot.is_object()) {
            merge_into(slot, value, path);
        } else if (!same_kind(slot, value)) {
            throw UsageError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " +
                             value.type_name());
        } else {
            slot = value;
        }
    }
}

std::vector<tasks::TaskSpec> task_list(const nlohmann::json& ids) {
    std::vector<tasks::TaskSpec> out;
    for (const auto& id : ids) {
        try {
            out.push_back(tasks::find_task(id.get<std::string>()));
        } catch (const std::out_of_range& e) {
            throw UsageError(e.what());
        }
    }
    return out;
}

void write_gate_csv(const meta::GateMatrix<float>& gates, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    f << "layer,expert,gate\n";
    const auto rows = gates.gates.rows();
    const auto n = gates.gates.cols();
    const auto v = gates.gates.values();
    for (std::size_t l = 0; l < rows; ++l) {
        for (std::size_t e = 0; e < n; ++e) {
            f << l << ',' << e << ',' << nlohmann::json(v[l * n + e]).dump() << '\n';
        }
    }
}

std::string prompt_for(const RunConfig& rc, const std::string& prompt, const std::string& task, std::size_t kshot) {
    if (!prompt.empty() && !task.empty()) {
        throw UsageError("--prompt and --task are mutually exclusive");
    }
    if (!prompt.empty()) {
        return prompt;
    }
    if (task.empty()) {
        throw UsageError("one of --prompt or --task is required");
    }
    try {
        return eval::task_prompt(tasks::find_task(task), kshot, rc.seed());
    } catch (const std::out_of_range& e) {
        throw UsageError(e.what());
    }
}

lm::NanoLmWeights<float> load_base(const std::filesystem::path& path) {
    return io::get_weights<float>(io::load_checkpoint(path), "model/");
}

void ensure_dir(const std::filesystem::path& dir) { std::filesystem::create_directories(dir); }

struct Flags {
    std::string config;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    std::string out;
    std::string prompt;
    std::string task;
    std::string mode;
    std::string gate_mode;
    std::string gen_mode;
    int kshot = -1;
    std::string which = "both";
};

RunConfig resolve(const Flags& f, const CLI::App& sub) {
    RunConfig rc;
    if (!f.config.empty()) {
        rc.merge_file(f.config);
    }
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("--set expects key=value, got '" + s + "'");
        }
        rc.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (sub.count("--seed") > 0) {
        rc.set("seed", std::to_string(f.seed));
    }
    if (!f.out.empty()) {
        rc.merge({{"out", f.out}});
    }
    if (!f.gate_mode.empty()) {
        rc.merge({{"gate_mode", f.gate_mode}});
    }
    if (!f.gen_mode.empty()) {
        rc.merge({{"gen_mode", f.gen_mode}});
    }
    if (f.kshot >= 0) {
        rc.merge({{"eval", {{"kshot", f.kshot}}}});
    }
    rc.validate();
    return rc;
}

int cmd_pretrain(const RunConfig& rc, const std::string& which, std::ostream& out) {
    ensure_dir(rc.out_dir());
    for (auto role : {lm::Role::edge, lm::Role::cloud}) {
        const std::string name = role == lm::Role::edge ? "edge" : "cloud";
        if (which != "both" && which != name) {
            continue;
        }
        const auto pc = rc.pretrain_config(role);
        auto w = lm::NanoLmWeights<float>::init(rc.model_config(role), num::derive_seed(rc.seed(), "init." + name));
        std::ofstream log(rc.out_dir() / ("pretrain_" + name + ".jsonl"), std::ios::trunc);
        const auto t0 = std::chrono::steady_clock::now();
        const auto result = train::pretrain(w, pc, tasks::builtin_tasks(), &log);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        io::Checkpoint ck;
        io::put_weights(ck, "model/", w);
        ck.metadata["pretrain"] = {{"config", pc},
                                   {"steps", result.steps},
                                   {"heldout", result.heldout},
                                   {"reached_target", result.reached_target}};
        io::save_checkpoint(ck, rc.base_path(role));
        out << name << ": " << result.steps << " steps, held-out " << std::fixed << std::setprecision(3)
            << result.heldout << " nat/byte" << (result.reached_target ? "" : " (above target)") << ", "
            << std::setprecision(1) << secs << " s -> " << rc.base_path(role).string() << '\n';
    }
    return 0;
}

int cmd_train(const RunConfig& rc, std::ostream& out) {
    const auto cloud = load_base(rc.base_path(lm::Role::cloud));
    const auto edge = load_base(rc.base_path(lm::Role::edge));
    const auto tc = rc.train_config();
    const auto specs = rc.train_tasks();
    const auto total = tc.epochs * train::steps_per_epoch(specs, tc);
    train::Trainer trainer(train::init_generator(cloud, edge, tc, rc.gen_mode(), rc.gate_mode()), edge, tc, total);
    ensure_dir(rc.out_dir() / "checkpoints");
    std::ofstream log(rc.out_dir() / "train_metrics.jsonl", std::ios::trunc);
    const auto every = rc.checkpoint_every();
    const auto t0 = std::chrono::steady_clock::now();
    const auto history = train::train_lora_gen(trainer, specs, &log, [&](const train::Trainer& t, const train::StepMetrics& m) {
        if (every > 0 && (m.step + 1) % every == 0) {
            io::Checkpoint ck;
            io::put_generator(ck, t.generator());
            ck.metadata["step"] = m.step + 1;
            io::save_checkpoint(ck, rc.out_dir() / "checkpoints" / ("step_" + std::to_string(m.step + 1) + ".lgen"));
        }
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::Checkpoint ck;
    io::put_generator(ck, trainer.generator());
    ck.metadata["train"] = tc;
    ck.metadata["step"] = history.size();
    io::save_checkpoint(ck, rc.generator_path());
    out << "trained " << history.size() << " steps in " << std::fixed << std::setprecision(1) << secs
        << " s, final lm loss " << std::setprecision(4) << (history.empty() ? 0.0 : history.back().lm_loss) << " -> "
        << rc.generator_path().string() << '\n';
    return 0;
}

int cmd_specialize(const RunConfig& rc, const Flags& f, std::ostream& out) {
    const auto prompt = prompt_for(rc, f.prompt, f.task, rc.eval_settings().kshot);
    const auto gen = io::get_generator(io::load_checkpoint(rc.generator_path()));
    const auto edge = load_base(rc.base_path(lm::Role::edge));
    std::mt19937_64 rng(num::derive_seed(rc.seed(), "cli.specialize"));
    const auto s = meta::specialize(gen, edge, lm::tokenize(prompt, lm::Segment::system_prompt), &rng);
    const std::string name = f.task.empty() ? "prompt" : f.task;
    const auto dir = rc.out_dir() / "specialized";
    ensure_dir(dir);
    io::Checkpoint ck;
    io::put_weights(ck, "model/", s.weights);
    ck.metadata["specialized"] = {{"prompt", prompt}, {"prompt_tokens", s.prompt_tokens}, {"task", f.task}};
    const auto path = dir / (name + ".lgen");
    io::save_checkpoint(ck, path);
    out << "specialized edge model -> " << path.string() << '\n';
    if (s.gates.gates.defined()) {
        const auto csv = dir / (name + "_gates.csv");
        write_gate_csv(s.gates, csv);
        out << "gates -> " << csv.string() << '\n';
    }
    return 0;
}

int cmd_gates(const RunConfig& rc, const Flags& f, std::ostream& out) {
    const auto prompt = prompt_for(rc, f.prompt, f.task, rc.eval_settings().kshot);
    const auto gen = io::get_generator(io::load_checkpoint(rc.generator_path()));
    if (gen.gen_mode != meta::GenMode::meta) {
        throw UsageError("direct generation has no gates");
    }
    const auto edge = load_base(rc.base_path(lm::Role::edge));
    std::mt19937_64 rng(num::derive_seed(rc.seed(), "cli.specialize"));
    const auto s = meta::specialize(gen, edge, lm::tokenize(prompt, lm::Segment::system_prompt), &rng);
    const auto rows = s.gates.gates.rows();
    const auto n = s.gates.gates.cols();
    const auto v = s.gates.gates.values();
    out << "layer";
    for (std::size_t e = 0; e < n; ++e) {
        out << "  e" << e << "   ";
    }
    out << '\n' << std::fixed << std::setprecision(4);
    for (std::size_t l = 0; l < rows; ++l) {
        out << std::setw(5) << l;
        for (std::size_t e = 0; e < n; ++e) {
            out << ' ' << std::setw(6) << v[l * n + e];
        }
        out << '\n';
    }
    return 0;
}

int cmd_eval(const RunConfig& rc, const Flags& f, bool bench, std::ostream& out) {
    auto settings = rc.eval_settings();
    if (!f.mode.empty()) {
        if (f.mode != "incontext" && f.mode != "specialized") {
            throw UsageError("--mode must be incontext or specialized");
        }
        settings.modes = {eval::mode_from_string(f.mode)};
    }
    if (bench) {
        settings.modes = {eval::Mode::specialized, eval::Mode::incontext};
        settings.bench = true;
    }
    auto specs = rc.eval_tasks();
    if (!f.task.empty()) {
        specs = task_list(nlohmann::json::array({f.task}));
    }
    const bool needs_gen = std::find(settings.modes.begin(), settings.modes.end(), eval::Mode::specialized) !=
                           settings.modes.end();
    meta::Generator<float> gen;
    if (needs_gen) {
        gen = io::get_generator(io::load_checkpoint(rc.generator_path()));
    }
    const auto edge = load_base(rc.base_path(lm::Role::edge));
    const auto report = eval::evaluate(needs_gen ? &gen : nullptr, edge, specs, settings, rc.doc());
    const auto path = rc.out_dir() / (bench ? std::string("bench.json") : "eval_" + report.condition + ".json");
    eval::emit_report(report, path);
    out << std::fixed << std::setprecision(3);
    for (const auto& row : report.rows) {
        out << std::left << std::setw(10) << row.task_id << ' ' << std::setw(12) << row.condition << std::right
            << " acc " << row.accuracy;
        if (row.latency_ms >= 0.0) {
            out << "  latency " << row.latency_ms << " ms";
        }
        out << '\n';
    }
    out << report.condition << ": ave " << report.ave << " har " << report.har << ", compression "
        << report.compression_ratio << "x (" << report.prompt_tokens << " + " << report.user_tokens << " tokens)\n";
    for (const auto& [cond, s] : report.latency_ms) {
        out << cond << " latency mean " << s.mean_ms << " p50 " << s.p50_ms << " p95 " << s.p95_ms << " ms\n";
    }
    out << "report -> " << path.string() << '\n';
    return 0;
}

}  // namespace

RunConfig::RunConfig() : doc_(default_doc()) {}

void RunConfig::merge(const nlohmann::json& patch) { merge_into(doc_, patch, ""); }

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw UsageError("cannot read config '" + path.string() + "'");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    merge(j);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    nlohmann::json v;
    try {
        v = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
        v = value;
    }
    nlohmann::json patch = v;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
        parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (it->empty()) {
            throw UsageError("malformed config key '" + key + "'");
        }
        patch = nlohmann::json{{*it, patch}};
    }
    merge(patch);
}

std::uint64_t RunConfig::seed() const { return doc_.at("seed").get<std::uint64_t>(); }

std::filesystem::path RunConfig::out_dir() const { return doc_.at("out").get<std::string>(); }

lm::NanoLmConfig RunConfig::model_config(lm::Role role) const {
    auto c = doc_.at("models").at(role == lm::Role::edge ? "edge" : "cloud").get<lm::NanoLmConfig>();
    c.role = role;
    return c;
}

train::PretrainConfig RunConfig::pretrain_config(lm::Role role) const {
    const std::string name = role == lm::Role::edge ? "edge" : "cloud";
    auto c = doc_.at("pretrain").at(name).get<train::PretrainConfig>();
    c.seed = num::derive_seed(seed(), "pretrain." + name);
    return c;
}

train::TrainConfig RunConfig::train_config() const {
    auto c = doc_.at("train").get<train::TrainConfig>();
    c.seed = num::derive_seed(seed(), "train");
    return c;
}

meta::GateMode RunConfig::gate_mode() const {
    try {
        return meta::gate_mode_from_string(doc_.at("gate_mode").get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

meta::GenMode RunConfig::gen_mode() const {
    try {
        return meta::gen_mode_from_string(doc_.at("gen_mode").get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::vector<tasks::TaskSpec> RunConfig::train_tasks() const { return task_list(doc_.at("tasks").at("train")); }

std::vector<tasks::TaskSpec> RunConfig::eval_tasks() const { return task_list(doc_.at("tasks").at("eval")); }

eval::EvalSettings RunConfig::eval_settings() const {
    const auto& e = doc_.at("eval");
    eval::EvalSettings s;
    s.modes.clear();
    for (const auto& m : e.at("modes")) {
        try {
            s.modes.push_back(eval::mode_from_string(m.get<std::string>()));
        } catch (const std::invalid_argument& ex) {
            throw UsageError(ex.what());
        }
    }
    s.examples_per_task = e.at("examples_per_task").get<std::size_t>();
    s.kshot = e.at("kshot").get<std::size_t>();
    s.max_new = e.at("max_new").get<std::size_t>();
    s.threads = e.at("threads").get<std::size_t>();
    s.seed = num::derive_seed(seed(), "eval");
    s.bench_settings = {e.at("warmup").get<std::size_t>(), e.at("reps").get<std::size_t>(),
                        e.at("gen_tokens").get<std::size_t>()};
    return s;
}

std::size_t RunConfig::checkpoint_every() const { return doc_.at("checkpoint_every").get<std::size_t>(); }

void RunConfig::validate() const {
    try {
        for (auto role : {lm::Role::edge, lm::Role::cloud}) {
            model_config(role).validate();
            pretrain_config(role).validate();
        }
        train_config().validate();
        static_cast<void>(gate_mode());
        static_cast<void>(gen_mode());
        const auto seen = train_tasks();
        if (seen.empty()) {
            throw UsageError("tasks.train is empty");
        }
        for (const auto& t : seen) {
            if (t.family != tasks::Family::seen) {
                throw UsageError("task '" + t.task_id + "' is held out and cannot be trained on");
            }
        }
        if (eval_tasks().empty()) {
            throw UsageError("tasks.eval is empty");
        }
        const auto e = eval_settings();
        if (e.modes.empty() || e.examples_per_task == 0 || e.max_new == 0) {
            throw UsageError("eval needs modes, examples and max_new");
        }
        if (e.bench_settings.warmup < 3 || e.bench_settings.reps < 10 || e.bench_settings.gen_tokens == 0) {
            throw UsageError("eval.warmup must be >= 3, eval.reps >= 10, eval.gen_tokens >= 1");
        }
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& ex) {
        throw UsageError(std::string("invalid config: ") + ex.what());
    }
}

std::filesystem::path RunConfig::base_path(lm::Role role) const {
    return out_dir() / (role == lm::Role::edge ? "edge.lgen" : "cloud.lgen");
}

std::filesystem::path RunConfig::generator_path() const { return out_dir() / "generator.lgen"; }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"LoRA generation for nano language models", "lgen"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&f](CLI::App* sub) {
        sub->add_option("--config", f.config, "JSON run configuration");
        sub->add_option("--seed", f.seed, "Run seed; every other seed derives from it");
        sub->add_option("--out", f.out, "Output directory");
        sub->add_option("--set", f.sets, "Config override key=value with a dotted key, repeatable");
        sub->add_option("--gate-mode", f.gate_mode, "keeptopk | gumbel")->check(CLI::IsMember({"keeptopk", "gumbel"}));
        sub->add_option("--gen-mode", f.gen_mode, "meta | direct")->check(CLI::IsMember({"meta", "direct"}));
        sub->add_option("--kshot", f.kshot, "Solved examples in task prompts")->check(CLI::NonNegativeNumber);
    };
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the edge and cloud base models");
    common(pretrain);
    pretrain->add_option("--which", f.which, "edge | cloud | both")->check(CLI::IsMember({"edge", "cloud", "both"}));
    auto* train_cmd = app.add_subcommand("train", "Train the LoRA generator on the seen tasks");
    common(train_cmd);
    auto* spec_cmd = app.add_subcommand("specialize", "Write a specialized edge checkpoint and its gates");
    common(spec_cmd);
    auto* eval_cmd = app.add_subcommand("eval", "Accuracy report");
    common(eval_cmd);
    auto* bench_cmd = app.add_subcommand("bench", "Latency and compression report");
    common(bench_cmd);
    auto* gates_cmd = app.add_subcommand("gates", "Print the layer x expert gate matrix for a prompt");
    common(gates_cmd);
    for (auto* sub : {spec_cmd, eval_cmd, bench_cmd, gates_cmd}) {
        sub->add_option("--prompt", f.prompt, "System prompt text");
        sub->add_option("--task", f.task, "Task id");
    }
    eval_cmd->add_option("--mode", f.mode, "incontext | specialized")
        ->check(CLI::IsMember({"incontext", "specialized"}));

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        const auto* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << "lgen: " << e.what() << '\n' << failed->help();
        return 2;
    }

    auto* sub = app.get_subcommands().front();
    try {
        const auto rc = resolve(f, *sub);
        const auto name = sub->get_name();
        if (name == "pretrain") {
            return cmd_pretrain(rc, f.which, out);
        }
        if (name == "train") {
            return cmd_train(rc, out);
        }
        if (name == "specialize") {
            return cmd_specialize(rc, f, out);
        }
        if (name == "gates") {
            return cmd_gates(rc, f, out);
        }
        return cmd_eval(rc, f, name == "bench", out);
    } catch (const UsageError& e) {
        err << "lgen: " << e.what() << '\n';
        return 2;
    } catch (const io::CheckpointError& e) {
        err << "lgen: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "lgen: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace lgen::cli
