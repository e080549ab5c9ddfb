// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "lgen/cli/cli.hpp"
#include "lgen/evalbench/evalbench.hpp"
#include "lgen/io/components.hpp"
#include "lgen/training/training.hpp"

namespace py = pybind11;
using namespace lgen;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

num::Tensord to_tensor(const Array& a) {
    if (a.ndim() != 2) {
        throw std::invalid_argument("expected a 2-d array");
    }
    const auto* p = a.data();
    return num::Tensord({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                        std::vector<double>(p, p + a.size()));
}

template <typename T>
Array to_array(const num::Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

py::dict task_dict(const tasks::TaskSpec& s) {
    py::dict d;
    d["task_id"] = s.task_id;
    d["description"] = s.description;
    d["family"] = tasks::to_string(s.family);
    d["alphabet"] = s.alphabet;
    return d;
}

/// A trained generator next to its frozen edge base.
class PyGenerator {
public:
    PyGenerator(const std::filesystem::path& generator, const std::filesystem::path& edge)
        : gen_(io::get_generator(io::load_checkpoint(generator))),
          edge_(io::get_weights<float>(io::load_checkpoint(edge), "model/")) {}

    /// Gate matrix [layers, experts] for a system prompt.
    Array gates(const std::string& prompt) const {
        std::mt19937_64 rng(0);
        return to_array(meta::specialize(gen_, edge_, lm::tokenize(prompt, lm::Segment::system_prompt), &rng).gates.gates);
    }

    /// Specializes for `prompt` and answers `input` greedily without the prompt
    /// in context. Bytes, since an undertrained model may emit invalid UTF-8.
    py::bytes answer(const std::string& prompt, const std::string& input, std::size_t max_new) const {
        std::mt19937_64 rng(0);
        const auto s = meta::specialize(gen_, edge_, lm::tokenize(prompt, lm::Segment::system_prompt), &rng);
        return eval::greedy_model(s.weights, max_new)(tasks::bare_query(input));
    }

    /// The unadapted edge model with the prompt in context.
    py::bytes answer_incontext(const std::string& prompt, const std::string& input, std::size_t max_new) const {
        return eval::greedy_model(edge_, max_new)(tasks::incontext_query(prompt, input));
    }

    std::size_t n_experts() const { return gen_.pool.config.n_experts; }
    std::string gate_mode() const { return meta::to_string(gen_.gate_mode); }
    std::string gen_mode() const { return meta::to_string(gen_.gen_mode); }

private:
    meta::Generator<float> gen_;
    lm::NanoLmWeights<float> edge_;
};

}  // namespace

PYBIND11_MODULE(_lgen, m) {
    m.doc() = "LoRA generation on tiny byte-level transformers";

    m.def("tokenize", [](const std::string& text) { return lm::tokenize(text).ids; });
    m.def("detokenize", [](const std::vector<lm::TokenId>& ids) { return lm::detokenize(ids); });

    m.def("builtin_tasks", [] {
        py::list out;
        for (const auto& s : tasks::builtin_tasks()) {
            out.append(task_dict(s));
        }
        return out;
    });
    m.def(
        "make_examples",
        [](const std::string& task_id, std::size_t count, std::uint64_t seed) {
            py::list out;
            for (const auto& e : tasks::make_examples(tasks::find_task(task_id), count, seed)) {
                py::dict d;
                d["task_id"] = e.task_id;
                d["system_prompt"] = e.system_prompt;
                d["input"] = e.input;
                d["target"] = e.target;
                out.append(d);
            }
            return out;
        },
        py::arg("task_id"), py::arg("count"), py::arg("seed") = 0);
    m.def(
        "format_fewshot",
        [](const std::string& task_id, std::size_t k, std::uint64_t seed) {
            return tasks::format_fewshot(tasks::find_task(task_id), k, seed);
        },
        py::arg("task_id"), py::arg("k"), py::arg("seed") = 0);

    m.def(
        "gates_keeptopk", [](const Array& logits, std::size_t k) { return to_array(meta::gates_keeptopk(to_tensor(logits), k).gates); },
        py::arg("logits"), py::arg("k"));
    m.def(
        "cv_aux_loss", [](const Array& gates, double alpha) { return train::cv_aux_loss(to_tensor(gates), alpha).item(); },
        py::arg("gates"), py::arg("alpha") = 0.01);
    m.def("load_entropy", &train::load_entropy, py::arg("load"));
    m.def("ave_har", &eval::ave_har, py::arg("accuracies"));
    m.def("compression_ratio", &eval::compression_ratio, py::arg("prompt_tokens"), py::arg("user_tokens"));

    m.def(
        "load_checkpoint",
        [](const std::filesystem::path& path) {
            const auto ck = io::load_checkpoint(path);
            py::dict tensors;
            for (const auto& [name, rec] : ck.tensors) {
                tensors[py::str(name)] = to_array(num::Tensor<float>(rec.shape, rec.data));
            }
            return py::make_tuple(tensors, py::module_::import("json").attr("loads")(ck.metadata.dump()));
        },
        py::arg("path"), "Returns (tensors by name as float64 arrays, metadata dict).");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs an lgen subcommand; returns (exit code, stdout, stderr).");

    py::class_<PyGenerator>(m, "Generator")
        .def(py::init<const std::filesystem::path&, const std::filesystem::path&>(), py::arg("generator"),
             py::arg("edge"))
        .def("gates", &PyGenerator::gates, py::arg("prompt"))
        .def("answer", &PyGenerator::answer, py::arg("prompt"), py::arg("input"), py::arg("max_new") = 40)
        .def("answer_incontext", &PyGenerator::answer_incontext, py::arg("prompt"), py::arg("input"),
             py::arg("max_new") = 40)
        .def_property_readonly("n_experts", &PyGenerator::n_experts)
        .def_property_readonly("gate_mode", &PyGenerator::gate_mode)
        .def_property_readonly("gen_mode", &PyGenerator::gen_mode);
}
