// SPDX-License-Identifier: Apache-2.0
#include "lgen/numcore/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace lgen::num {

namespace {
thread_local std::uint64_t g_next_id = 1;
thread_local bool g_grad_enabled = true;
}  // namespace

std::uint64_t next_node_id() { return g_next_id++; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : Tensor(shape, std::vector<T>(shape_numel(shape), T{0})) {}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one extent");
    }
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                         " elements");
    }
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->id = next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    return numel() / node_->shape.back();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    return node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
    if (flag && node_->backward) {
        throw GradError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = flag;
    return *this;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(node_->shape, node_->value);
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
    Tape tape;
    std::unordered_set<const Node<T>*> seen;
    std::vector<Node<T>*> stack{&root.node()};
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) {
            continue;
        }
        tape.nodes_.push_back(n);
        for (auto& p : n->parents) {
            stack.push_back(p.get());
        }
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
    return tape;
}

template <typename T>
void Tape<T>::run_backward() const {
    for (Node<T>* n : nodes_) {
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
        }
    }
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw GradError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw GradError("backward() on a tensor that does not require grad");
    }
    auto tape = Tape<T>::record(loss);
    loss.node().ensure_grad();
    loss.node().grad[0] += T{1};
    tape.run_backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace lgen::num
