// SPDX-License-Identifier: Apache-2.0
#include "lgen/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "lgen/numcore/random.hpp"

namespace lgen::train {

template <typename T>
Tensor<T> cv_aux_loss(const Tensor<T>& gates, double alpha) {
    if (gates.rank() != 2 || gates.rows() == 0) {
        throw std::invalid_argument("cv_aux_loss expects a non-empty [rows, n] gate matrix, got " +
                                    num::shape_str(gates.shape()));
    }
    const auto load = num::col_mean(gates);  // [1, n]
    const auto mu = num::mean(load);
    const auto var = num::mean(num::square(num::sub(load, mu)));
    const auto denom = num::square(num::add_scalar(mu, T(1e-8)));
    return num::scale(num::div(var, denom), static_cast<T>(alpha));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& lm_loss, const Tensor<T>& cv_loss) {
    if (lm_loss.numel() != 1 || cv_loss.numel() != 1) {
        throw std::invalid_argument("total_loss expects two scalars");
    }
    return num::add(cv_loss, lm_loss);
}

void TrainConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) {
            throw std::invalid_argument(std::string("train config: ") + name + " must be positive");
        }
    };
    positive(learning_rate, "learning_rate");
    positive(direct_learning_rate, "direct_learning_rate");
    positive(static_cast<double>(batch_size), "batch_size");
    positive(static_cast<double>(group_size), "group_size");
    positive(static_cast<double>(epochs), "epochs");
    positive(static_cast<double>(max_length), "max_length");
    positive(static_cast<double>(n_experts), "n_experts");
    positive(static_cast<double>(top_k), "top_k");
    positive(static_cast<double>(lora_r), "lora_r");
    positive(lora_alpha, "lora_alpha");
    positive(static_cast<double>(router_hidden), "router_hidden");
    positive(grad_clip, "grad_clip");
    positive(static_cast<double>(examples_per_task), "examples_per_task");
    if (top_k > n_experts) {
        throw std::invalid_argument("train config: top_k must not exceed n_experts");
    }
    if (batch_size % group_size != 0) {
        throw std::invalid_argument("train config: batch_size must be a multiple of group_size");
    }
    if (examples_per_task < group_size) {
        throw std::invalid_argument("train config: examples_per_task must cover at least one group");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw std::invalid_argument("train config: betas must lie in [0, 1)");
    }
    if (weight_decay < 0.0 || aux_alpha < 0.0) {
        throw std::invalid_argument("train config: weight_decay and aux_alpha must be non-negative");
    }
    if (lora_dropout < 0.0 || lora_dropout >= 1.0) {
        throw std::invalid_argument("train config: lora_dropout must lie in [0, 1)");
    }
    if (kshot_min > kshot_max) {
        throw std::invalid_argument("train config: kshot_min exceeds kshot_max");
    }
    if (schedule != "cosine" && schedule != "constant") {
        throw std::invalid_argument("train config: unknown schedule '" + schedule + "'");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"direct_learning_rate", c.direct_learning_rate},
                       {"betas", {c.beta1, c.beta2}},
                       {"weight_decay", c.weight_decay},
                       {"warmup_steps", c.warmup_steps},
                       {"schedule", c.schedule},
                       {"batch_size", c.batch_size},
                       {"group_size", c.group_size},
                       {"epochs", c.epochs},
                       {"max_length", c.max_length},
                       {"aux_alpha", c.aux_alpha},
                       {"n_experts", c.n_experts},
                       {"top_k", c.top_k},
                       {"lora_r", c.lora_r},
                       {"lora_alpha", c.lora_alpha},
                       {"lora_dropout", c.lora_dropout},
                       {"router_hidden", c.router_hidden},
                       {"grad_clip", c.grad_clip},
                       {"examples_per_task", c.examples_per_task},
                       {"kshot_min", c.kshot_min},
                       {"kshot_max", c.kshot_max},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.direct_learning_rate = j.value("direct_learning_rate", c.direct_learning_rate);
    if (j.contains("betas")) {
        const auto& b = j.at("betas");
        if (!b.is_array() || b.size() != 2) {
            throw std::invalid_argument("train config: betas must be a two-element array");
        }
        c.beta1 = b[0].get<double>();
        c.beta2 = b[1].get<double>();
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.schedule = j.value("schedule", c.schedule);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.group_size = j.value("group_size", c.group_size);
    c.epochs = j.value("epochs", c.epochs);
    c.max_length = j.value("max_length", c.max_length);
    c.aux_alpha = j.value("aux_alpha", c.aux_alpha);
    c.n_experts = j.value("n_experts", c.n_experts);
    c.top_k = j.value("top_k", c.top_k);
    c.lora_r = j.value("lora_r", c.lora_r);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    c.lora_dropout = j.value("lora_dropout", c.lora_dropout);
    c.router_hidden = j.value("router_hidden", c.router_hidden);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.examples_per_task = j.value("examples_per_task", c.examples_per_task);
    c.kshot_min = j.value("kshot_min", c.kshot_min);
    c.kshot_max = j.value("kshot_max", c.kshot_max);
    c.seed = j.value("seed", c.seed);
}

LmBatch make_lm_batch(const std::vector<lm::TokenSeq>& seqs, bool answer_only) {
    LmBatch out;
    out.batch = lm::PackedBatch::pack(seqs);
    out.targets.reserve(out.batch.total());
    out.mask.reserve(out.batch.total());
    for (const auto& s : seqs) {
        for (std::size_t t = 0; t < s.size(); ++t) {
            if (t + 1 < s.size()) {
                out.targets.push_back(s.ids[t + 1]);
                out.mask.push_back(!answer_only || s.segments[t + 1] == lm::Segment::answer ? 1 : 0);
            } else {
                out.targets.push_back(0);
                out.mask.push_back(0);
            }
        }
    }
    return out;
}

template <typename T>
PipelineOutput<T> pipeline_loss(meta::Generator<T>& gen, const lm::NanoLmWeights<T>& edge, const TrainBatch& batch,
                                double aux_alpha, double dropout, std::mt19937_64* rng) {
    if (batch.empty()) {
        throw std::invalid_argument("training batch has no task groups");
    }
    const auto L = edge.config.n_layers;
    std::vector<lm::TokenSeq> prompts;
    prompts.reserve(batch.size());
    for (const auto& g : batch) {
        if (g.examples.empty()) {
            throw std::invalid_argument("task group '" + g.task_id + "' has no examples");
        }
        prompts.push_back(meta::append_meta(lm::tokenize(g.system_prompt, lm::Segment::system_prompt), L,
                                            gen.cloud.config.max_seq));
    }
    const auto states = meta::meta_hidden(gen.cloud, &gen.adapter, prompts, L, rng);

    PipelineOutput<T> out;
    if (gen.gen_mode == meta::GenMode::meta) {
        const auto logits = meta::route(gen.router, states, num::BatchNormMode::train);
        if (gen.gate_mode == meta::GateMode::gumbel && rng == nullptr) {
            std::mt19937_64 unused(0);
            out.gates = meta::gates_gumbel(logits, unused, true).gates;
        } else {
            out.gates = meta::compute_gates(gen.gate_mode, logits, gen.top_k, rng).gates;
        }
        out.cv_loss = cv_aux_loss(out.gates, aux_alpha);
    } else {
        out.cv_loss = Tensor<T>::scalar(T(0));
    }

    Tensor<T> lm_sum;
    for (std::size_t g = 0; g < batch.size(); ++g) {
        const auto lora = gen.gen_mode == meta::GenMode::meta
                              ? lora::assemble(gen.pool, num::slice_rows(out.gates, g * L, (g + 1) * L))
                              : meta::direct_lora(gen.direct, num::slice_rows(states, g * L, (g + 1) * L));
        const auto hooks = lora::delta_hooks(lora, rng ? dropout : 0.0, rng);
        std::vector<lm::TokenSeq> seqs;
        for (const auto& e : batch[g].examples) {
            auto s = tasks::bare_query(e.input);
            s.append(tasks::answer_tokens(e.target));
            seqs.push_back(std::move(s));
        }
        const auto lb = make_lm_batch(seqs, true);
        const auto logits = lm::forward_logits(edge, lb.batch, &hooks);
        const auto loss = num::cross_entropy_lm(logits, lb.targets, lb.mask);
        lm_sum = lm_sum.defined() ? num::add(lm_sum, loss) : loss;
    }
    out.lm_loss = num::scale(lm_sum, static_cast<T>(1.0 / static_cast<double>(batch.size())));
    out.total = total_loss(out.lm_loss, out.cv_loss);
    return out;
}

template <typename T>
meta::Generator<T> init_generator(const lm::NanoLmWeights<T>& cloud, const lm::NanoLmWeights<T>& edge,
                                  const TrainConfig& config, meta::GenMode gen_mode, meta::GateMode gate_mode) {
    config.validate();
    const auto L = edge.config.n_layers;
    meta::Generator<T> gen;
    gen.cloud = cloud;
    gen.adapter = meta::init_cloud_adapter(cloud, L, config.lora_r, config.lora_alpha, config.lora_dropout,
                                           num::derive_seed(config.seed, "train.adapter"));
    gen.router = meta::init_router<T>(cloud.config.d_model, config.router_hidden, config.n_experts,
                                      num::derive_seed(config.seed, "train.router"));
    lora::PoolConfig pc;
    pc.n_experts = config.n_experts;
    pc.rank = config.lora_r;
    pc.alpha = config.lora_alpha;
    pc.dropout = config.lora_dropout;
    gen.pool = lora::init_pool<T>(pc, edge.config, num::derive_seed(config.seed, "train.pool"));
    if (gen_mode == meta::GenMode::direct) {
        gen.direct = meta::init_direct<T>(cloud.config.d_model, edge.config, config.lora_r, config.lora_alpha,
                                          num::derive_seed(config.seed, "train.direct"));
    }
    gen.gen_mode = gen_mode;
    gen.gate_mode = gate_mode;
    gen.top_k = config.top_k;
    return gen;
}

void to_json(nlohmann::json& j, const StepMetrics& m) {
    j = nlohmann::json{{"step", m.step},   {"lm_loss", m.lm_loss},     {"cv_loss", m.cv_loss},
                       {"lr", m.lr},       {"grad_norm", m.grad_norm}, {"load", m.load}};
}

namespace {

double norm_of(const std::vector<std::pair<std::string, Tensor<float>>>& named, bool (*pick)(const std::string&)) {
    double sq = 0.0;
    for (const auto& [name, t] : named) {
        if (pick(name)) {
            for (float g : t.grad()) {
                sq += static_cast<double>(g) * g;
            }
        }
    }
    return std::sqrt(sq);
}

bool any_name(const std::string&) { return true; }
bool meta_emb_name(const std::string& n) { return n == "meta_emb"; }
bool adapter_lora_name(const std::string& n) { return n != "meta_emb"; }

}  // namespace

Trainer::Trainer(meta::Generator<float> gen, lm::NanoLmWeights<float> edge, TrainConfig config,
                 std::size_t total_steps)
    : gen_(std::move(gen)),
      edge_(std::move(edge)),
      config_(std::move(config)),
      total_steps_(total_steps),
      rng_(num::derive_seed(config_.seed, "train.step")) {
    config_.validate();
    if (gen_.pool.edge.n_layers != edge_.config.n_layers || gen_.adapter.n_meta() != edge_.config.n_layers) {
        throw std::invalid_argument("trainable components were built for a different edge model");
    }
    gen_.cloud.set_requires_grad(false);
    edge_.set_requires_grad(false);
    gen_.adapter.set_requires_grad(true);
    if (gen_.gen_mode == meta::GenMode::meta) {
        gen_.router.set_requires_grad(true);
        gen_.pool.set_requires_grad(true);
    } else {
        gen_.direct.set_requires_grad(true);
    }
}

std::vector<Tensor<float>> Trainer::trainables() const {
    std::vector<Tensor<float>> out;
    auto take = [&out](const auto& named) {
        for (const auto& nt : named) {
            out.push_back(nt.second);
        }
    };
    take(gen_.adapter.named_tensors());
    if (gen_.gen_mode == meta::GenMode::meta) {
        take(gen_.router.named_tensors());
        take(gen_.pool.named_tensors());
    } else {
        take(gen_.direct.named_tensors());
    }
    return out;
}

StepMetrics Trainer::step(const TrainBatch& batch) {
    const double peak =
        gen_.gen_mode == meta::GenMode::direct ? config_.direct_learning_rate : config_.learning_rate;
    const double lr = config_.schedule == "cosine"
                          ? lr_schedule(step_ + 1, config_.warmup_steps, total_steps_, peak)
                          : peak * std::min(1.0, static_cast<double>(step_ + 1) /
                                                     static_cast<double>(std::max<std::size_t>(1, config_.warmup_steps)));
    auto params = trainables();
    zero_grads(params);
    const auto out = pipeline_loss(gen_, edge_, batch, config_.aux_alpha, config_.lora_dropout, &rng_);
    num::backward(out.total);

    const auto adapter_named = gen_.adapter.named_tensors();
    audit_ = GradAudit{};
    audit_.cloud_lora = norm_of(adapter_named, adapter_lora_name);
    audit_.meta_emb = norm_of(adapter_named, meta_emb_name);
    if (gen_.gen_mode == meta::GenMode::meta) {
        audit_.router = norm_of(gen_.router.named_tensors(), any_name);
        audit_.pool = norm_of(gen_.pool.named_tensors(), any_name);
    } else {
        audit_.direct = norm_of(gen_.direct.named_tensors(), any_name);
    }

    StepMetrics m;
    m.step = step_;
    m.lm_loss = static_cast<double>(out.lm_loss.item());
    m.cv_loss = static_cast<double>(out.cv_loss.item());
    m.lr = lr;
    m.grad_norm = clip_grad_norm(params, config_.grad_clip);
    if (out.gates.defined()) {
        const auto n = out.gates.cols();
        const auto rows = out.gates.rows();
        m.load.assign(n, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                m.load[j] += static_cast<double>(out.gates.at(r, j)) / static_cast<double>(rows);
            }
        }
    }
    adamw_step(params, adam_, lr, config_.adamw());
    zero_grads(params);
    ++step_;
    return m;
}

std::vector<TrainBatch> make_epoch(const std::vector<tasks::TaskSpec>& specs, const TrainConfig& config,
                                   std::size_t epoch) {
    config.validate();
    if (specs.empty()) {
        throw std::invalid_argument("no training tasks given");
    }
    std::mt19937_64 rng(num::derive_seed(config.seed, "train.epoch." + std::to_string(epoch)));
    std::vector<std::vector<TaskGroup>> per_task;
    for (const auto& spec : specs) {
        if (spec.family != tasks::Family::seen) {
            throw std::invalid_argument("task '" + spec.task_id + "' belongs to the unseen family");
        }
        auto examples = tasks::make_examples(spec, config.examples_per_task, num::derive_seed(config.seed, "train.data"));
        std::shuffle(examples.begin(), examples.end(), rng);
        std::vector<TaskGroup> groups;
        std::uniform_int_distribution<std::size_t> kshot(config.kshot_min, config.kshot_max);
        for (std::size_t i = 0; i + config.group_size <= examples.size(); i += config.group_size) {
            TaskGroup g;
            g.task_id = spec.task_id;
            const auto k = kshot(rng);
            g.system_prompt = tasks::format_fewshot(spec, k, rng());
            g.examples.assign(examples.begin() + static_cast<std::ptrdiff_t>(i),
                              examples.begin() + static_cast<std::ptrdiff_t>(i + config.group_size));
            for (auto& e : g.examples) {
                e.system_prompt = g.system_prompt;
            }
            groups.push_back(std::move(g));
        }
        per_task.push_back(std::move(groups));
    }

    std::vector<TaskGroup> order;
    std::vector<std::size_t> task_order(specs.size());
    for (std::size_t round = 0;; ++round) {
        bool any = false;
        for (std::size_t t = 0; t < task_order.size(); ++t) {
            task_order[t] = t;
        }
        std::shuffle(task_order.begin(), task_order.end(), rng);
        for (auto t : task_order) {
            if (round < per_task[t].size()) {
                order.push_back(std::move(per_task[t][round]));
                any = true;
            }
        }
        if (!any) {
            break;
        }
    }

    const auto G = config.groups_per_batch();
    std::vector<TrainBatch> batches;
    for (std::size_t i = 0; i + G <= order.size(); i += G) {
        batches.emplace_back(std::make_move_iterator(order.begin() + static_cast<std::ptrdiff_t>(i)),
                             std::make_move_iterator(order.begin() + static_cast<std::ptrdiff_t>(i + G)));
    }
    return batches;
}

std::size_t steps_per_epoch(const std::vector<tasks::TaskSpec>& specs, const TrainConfig& config) {
    return specs.size() * (config.examples_per_task / config.group_size) / config.groups_per_batch();
}

std::vector<StepMetrics> train_lora_gen(Trainer& trainer, const std::vector<tasks::TaskSpec>& specs,
                                        std::ostream* log, const StepCallback& on_step) {
    std::vector<StepMetrics> history;
    for (std::size_t epoch = 0; epoch < trainer.config().epochs; ++epoch) {
        for (const auto& batch : make_epoch(specs, trainer.config(), epoch)) {
            auto m = trainer.step(batch);
            if (log) {
                *log << nlohmann::json(m).dump() << '\n';
            }
            if (on_step) {
                on_step(trainer, m);
            }
            history.push_back(std::move(m));
        }
    }
    if (log) {
        log->flush();
    }
    return history;
}

double load_entropy(const std::vector<double>& load) {
    double total = 0.0;
    for (double v : load) {
        total += v;
    }
    if (!(total > 0.0)) {
        throw std::invalid_argument("load vector has no mass");
    }
    double h = 0.0;
    for (double v : load) {
        const double p = v / total;
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (max_steps == 0 || batch_size == 0 || eval_every == 0 || eval_sequences == 0) {
        throw std::invalid_argument("pretrain config: steps, batch size and evaluation sizes must be positive");
    }
    if (!(learning_rate > 0.0) || !(grad_clip > 0.0)) {
        throw std::invalid_argument("pretrain config: learning_rate and grad_clip must be positive");
    }
    if (bare_fraction < 0.0 || bare_fraction > 1.0) {
        throw std::invalid_argument("pretrain config: bare_fraction must lie in [0, 1]");
    }
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"max_steps", c.max_steps},
                       {"bare_only_steps", c.bare_only_steps},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"warmup_steps", c.warmup_steps},
                       {"weight_decay", c.weight_decay},
                       {"grad_clip", c.grad_clip},
                       {"kshot_max", c.kshot_max},
                       {"bare_fraction", c.bare_fraction},
                       {"eval_every", c.eval_every},
                       {"eval_sequences", c.eval_sequences},
                       {"target_loss", c.target_loss},
                       {"stop_at_target", c.stop_at_target},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    c.max_steps = j.value("max_steps", c.max_steps);
    c.bare_only_steps = j.value("bare_only_steps", c.bare_only_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.kshot_max = j.value("kshot_max", c.kshot_max);
    c.bare_fraction = j.value("bare_fraction", c.bare_fraction);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_sequences = j.value("eval_sequences", c.eval_sequences);
    c.target_loss = j.value("target_loss", c.target_loss);
    c.stop_at_target = j.value("stop_at_target", c.stop_at_target);
    c.seed = j.value("seed", c.seed);
}

namespace {

// Marks the input part (line start up to '=') of every "input=target" line.
std::vector<std::uint8_t> input_bytes(const std::string& text, std::size_t first_line) {
    std::vector<std::uint8_t> noise(text.size(), 0);
    std::size_t start = first_line;
    while (start < text.size()) {
        const auto eq = text.find('=', start);
        const auto nl = text.find('\n', start);
        if (eq == std::string::npos || (nl != std::string::npos && nl < eq)) {
            break;
        }
        for (std::size_t i = start; i < eq; ++i) {
            noise[i] = 1;
        }
        if (nl == std::string::npos) {
            break;
        }
        start = nl + 1;
    }
    return noise;
}

}  // namespace

CorpusItem pretrain_sequence(std::mt19937_64& rng, const std::vector<tasks::TaskSpec>& specs, std::size_t kshot_max,
                             double bare_fraction) {
    if (specs.empty()) {
        throw std::invalid_argument("pretraining corpus needs at least one task");
    }
    const auto& spec = specs[std::uniform_int_distribution<std::size_t>(0, specs.size() - 1)(rng)];
    const auto ex = tasks::make_examples(spec, 1, rng()).front();
    CorpusItem item;
    std::string text;
    std::size_t first_line = 0;
    if (std::bernoulli_distribution(bare_fraction)(rng)) {
        item.seq = tasks::bare_query(ex.input);
        text = ex.input + "=";
    } else {
        const auto k = std::uniform_int_distribution<std::size_t>(0, kshot_max)(rng);
        const auto prompt = tasks::format_fewshot(spec, k, rng());
        item.seq = tasks::incontext_query(prompt, ex.input);
        text = prompt + ex.input + "=";
        first_line = spec.system_prompt().size();
    }
    item.noise = input_bytes(text, first_line);
    const auto answer = tasks::answer_tokens(ex.target);
    item.seq.append(answer);
    item.noise.resize(item.seq.size(), 0);
    return item;
}

std::vector<CorpusItem> heldout_corpus(const PretrainConfig& config, const std::vector<tasks::TaskSpec>& specs) {
    std::mt19937_64 rng(num::derive_seed(config.seed, "pretrain.heldout"));
    std::vector<CorpusItem> out;
    for (std::size_t i = 0; i < config.eval_sequences; ++i) {
        out.push_back(pretrain_sequence(rng, specs, config.kshot_max, config.bare_fraction));
    }
    return out;
}

double heldout_loss(const lm::NanoLmWeights<float>& weights, const std::vector<CorpusItem>& corpus) {
    num::NoGradGuard guard;
    constexpr std::size_t kChunk = 32;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < corpus.size(); i += kChunk) {
        const auto end = std::min(i + kChunk, corpus.size());
        std::vector<lm::TokenSeq> seqs;
        std::vector<std::uint8_t> mask;
        for (std::size_t s = i; s < end; ++s) {
            auto seq = corpus[s].seq;
            if (seq.size() > weights.config.max_seq) {
                seq.ids.resize(weights.config.max_seq);
                seq.segments.resize(weights.config.max_seq);
            }
            const auto& noise = corpus[s].noise;
            for (std::size_t t = 0; t < seq.size(); ++t) {
                mask.push_back(t + 1 < seq.size() && noise[t + 1] == 0 ? 1 : 0);
            }
            seqs.push_back(std::move(seq));
        }
        auto lb = make_lm_batch(seqs, false);
        std::size_t n = 0;
        for (auto m : mask) {
            n += m;
        }
        if (n == 0) {
            continue;
        }
        const auto logits = lm::forward_logits(weights, lb.batch);
        total += static_cast<double>(num::cross_entropy_lm(logits, lb.targets, mask).item()) * static_cast<double>(n);
        count += n;
    }
    if (count == 0) {
        throw std::invalid_argument("held-out corpus has no scored positions");
    }
    return total / static_cast<double>(count);
}

void to_json(nlohmann::json& j, const PretrainMetrics& m) {
    j = nlohmann::json{{"step", m.step}, {"loss", m.loss}, {"lr", m.lr}};
    if (m.heldout >= 0.0) {
        j["heldout"] = m.heldout;
    }
}

PretrainResult pretrain(lm::NanoLmWeights<float>& weights, const PretrainConfig& config,
                        const std::vector<tasks::TaskSpec>& specs, std::ostream* log,
                        const std::function<void(const PretrainMetrics&)>& on_step) {
    config.validate();
    const auto heldout = heldout_corpus(config, specs);
    std::mt19937_64 rng(num::derive_seed(config.seed, "pretrain.stream"));
    weights.set_requires_grad(true);
    std::vector<Tensor<float>> params;
    for (const auto& nt : weights.named_tensors()) {
        params.push_back(nt.second);
    }
    AdamWState state;
    const AdamWConfig adam{0.9, 0.999, 1e-8, config.weight_decay};
    PretrainResult result;
    for (std::size_t step = 0; step < config.max_steps; ++step) {
        const double bare = step < config.bare_only_steps ? 1.0 : config.bare_fraction;
        std::vector<lm::TokenSeq> seqs;
        for (std::size_t i = 0; i < config.batch_size; ++i) {
            auto s = pretrain_sequence(rng, specs, config.kshot_max, bare).seq;
            if (s.size() > weights.config.max_seq) {
                s.ids.resize(weights.config.max_seq);
                s.segments.resize(weights.config.max_seq);
            }
            seqs.push_back(std::move(s));
        }
        const auto lb = make_lm_batch(seqs, false);
        zero_grads(params);
        const auto loss = num::cross_entropy_lm(lm::forward_logits(weights, lb.batch), lb.targets, lb.mask);
        num::backward(loss);
        clip_grad_norm(params, config.grad_clip);
        PretrainMetrics m;
        m.step = step;
        m.loss = static_cast<double>(loss.item());
        m.lr = lr_schedule(step + 1, config.warmup_steps, config.max_steps, config.learning_rate);
        adamw_step(params, state, m.lr, adam);
        zero_grads(params);
        result.steps = step + 1;
        bool stop = false;
        if ((step + 1) % config.eval_every == 0 || step + 1 == config.max_steps) {
            m.heldout = heldout_loss(weights, heldout);
            result.heldout = m.heldout;
            stop = config.stop_at_target && m.heldout < config.target_loss;
        }
        if (log) {
            *log << nlohmann::json(m).dump() << '\n';
        }
        if (on_step) {
            on_step(m);
        }
        if (stop) {
            break;
        }
    }
    weights.set_requires_grad(false);
    result.reached_target = result.heldout < config.target_loss;
    if (log) {
        log->flush();
    }
    return result;
}

#define LGEN_INSTANTIATE_TRAIN(T)                                                                              \
    template Tensor<T> cv_aux_loss<T>(const Tensor<T>&, double);                                              \
    template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&);                                     \
    template PipelineOutput<T> pipeline_loss<T>(meta::Generator<T>&, const lm::NanoLmWeights<T>&,              \
                                                const TrainBatch&, double, double, std::mt19937_64*);          \
    template meta::Generator<T> init_generator<T>(const lm::NanoLmWeights<T>&, const lm::NanoLmWeights<T>&,    \
                                                  const TrainConfig&, meta::GenMode, meta::GateMode);
LGEN_INSTANTIATE_TRAIN(float)
LGEN_INSTANTIATE_TRAIN(double)
#undef LGEN_INSTANTIATE_TRAIN

}  // namespace lgen::train
