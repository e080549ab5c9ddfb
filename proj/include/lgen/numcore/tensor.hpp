// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgen::num {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GradError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Graph node owned jointly by the tensors that refer to it. `id` grows
/// monotonically per thread, so parents always carry smaller ids than children.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T{0});
        }
    }
};

std::uint64_t next_node_id();

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node, mirroring
/// the usual autograd-framework semantics; use clone() for a deep copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    /// Zero-filled.
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);

    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    [[nodiscard]] bool defined() const { return node_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
    /// Product of all extents but the last; a rank-1 tensor is one row.
    [[nodiscard]] std::size_t rows() const;
    [[nodiscard]] std::size_t cols() const;

    [[nodiscard]] std::span<const T> data() const { return node_->value; }
    /// Direct mutation is meant for leaves (parameters, finite-difference probes).
    [[nodiscard]] std::span<T> data_mut() { return node_->value; }
    [[nodiscard]] const std::vector<T>& values() const { return node_->value; }
    [[nodiscard]] T item() const;
    [[nodiscard]] T at(std::size_t i) const { return node_->value.at(i); }
    [[nodiscard]] T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool flag);
    [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
    [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
    [[nodiscard]] std::span<T> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    [[nodiscard]] std::uint64_t node_id() const { return node_->id; }
    [[nodiscard]] Node<T>& node() const { return *node_; }
    [[nodiscard]] const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    /// Fresh leaf holding a copy of the values; never requires grad.
    [[nodiscard]] Tensor clone() const;
    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        std::vector<U> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<U>(node_->value[i]);
        }
        return Tensor<U>(shape(), std::move(out));
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Reverse-topological record of the nodes reachable from a root.
template <typename T>
class Tape {
public:
    static Tape record(const Tensor<T>& root);

    [[nodiscard]] const std::vector<Node<T>*>& nodes() const { return nodes_; }
    /// Runs every node's backward rule exactly once, children before parents.
    void run_backward() const;

private:
    std::vector<Node<T>*> nodes_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates into every requires_grad leaf.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace lgen::num
