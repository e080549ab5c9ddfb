// SPDX-License-Identifier: Apache-2.0
#include "lgen/numcore/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <type_traits>

namespace lgen::num {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

// dst (+)= a * b. At 64-bit every output element sums its inner index in
// ascending order, so values never depend on the other extents (exact
// causality and batch independence); 32-bit uses Eigen's blocked kernels.
template <typename Dst, typename A, typename B>
void gemm(Dst&& dst, const A& a, const B& b, bool accumulate = false) {
    using T = typename std::decay_t<Dst>::Scalar;
    if constexpr (std::is_same_v<T, double>) {
        if (!accumulate) {
            dst.setZero();
        }
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            for (Eigen::Index k = 0; k < a.cols(); ++k) {
                const T s = a(i, k);
                dst.row(i) += s * b.row(k);
            }
        }
    } else if (accumulate) {
        dst.noalias() += a * b;
    } else {
        dst.noalias() = a * b;
    }
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    for (auto* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

template <typename T>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
            std::type_identity_t<std::function<void(Node<T>&)>> fn) {
    auto& n = out.node();
    n.requires_grad = true;
    for (auto* t : inputs) {
        if (t->requires_grad()) {
            n.parents.push_back(t->node_ptr());
        }
    }
    n.backward = std::move(fn);
}

template <typename T>
void attach_many(Tensor<T>& out, const std::vector<Tensor<T>>& inputs,
                 std::type_identity_t<std::function<void(Node<T>&)>> fn) {
    auto& n = out.node();
    n.requires_grad = true;
    for (auto& t : inputs) {
        if (t.requires_grad()) {
            n.parents.push_back(t.node_ptr());
        }
    }
    n.backward = std::move(fn);
}

template <typename T>
std::vector<T>* grad_of(const std::shared_ptr<Node<T>>& n) {
    if (!n->requires_grad) {
        return nullptr;
    }
    n->ensure_grad();
    return &n->grad;
}

void require_rank2(const Shape& s, const char* op) {
    if (s.size() != 2) {
        throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(s));
    }
}

enum class Bcast { same, scalar, row, col };

template <typename T>
Bcast classify(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) {
        return Bcast::same;
    }
    if (b.numel() == 1) {
        return Bcast::scalar;
    }
    const bool b_row = (b.rank() == 1) || (b.rank() == 2 && b.dim(0) == 1);
    if (b_row && b.numel() == a.cols()) {
        return Bcast::row;
    }
    if (b.rank() == 2 && b.dim(1) == 1 && b.dim(0) == a.rows()) {
        return Bcast::col;
    }
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
}

inline std::size_t bindex(Bcast m, std::size_t i, std::size_t cols) {
    switch (m) {
        case Bcast::same: return i;
        case Bcast::scalar: return 0;
        case Bcast::row: return i % cols;
        case Bcast::col: return i / cols;
    }
    return 0;
}

enum class BinOp { add, sub, mul, div };

template <typename T, BinOp Op>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name) {
    const Bcast mode = classify(a, b, name);
    const std::size_t n = a.numel();
    const std::size_t cols = a.cols();
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[i];
        const T y = bv[bindex(mode, i, cols)];
        if constexpr (Op == BinOp::add) {
            out[i] = x + y;
        } else if constexpr (Op == BinOp::sub) {
            out[i] = x - y;
        } else if constexpr (Op == BinOp::mul) {
            out[i] = x * y;
        } else {
            out[i] = x / y;
        }
    }
    Tensor<T> result(a.shape(), std::move(out));
    if (tracking({&a, &b})) {
        attach(result, {&a, &b}, [pa = a.node_ptr(), pb = b.node_ptr(), mode, cols](Node<T>& self) {
            const auto& g = self.grad;
            const auto& av = pa->value;
            const auto& bv = pb->value;
            if (auto* ga = grad_of(pa)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const T y = bv[bindex(mode, i, cols)];
                    if constexpr (Op == BinOp::add || Op == BinOp::sub) {
                        (*ga)[i] += g[i];
                    } else if constexpr (Op == BinOp::mul) {
                        (*ga)[i] += g[i] * y;
                    } else {
                        (*ga)[i] += g[i] / y;
                    }
                }
            }
            if (auto* gb = grad_of(pb)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t j = bindex(mode, i, cols);
                    if constexpr (Op == BinOp::add) {
                        (*gb)[j] += g[i];
                    } else if constexpr (Op == BinOp::sub) {
                        (*gb)[j] -= g[i];
                    } else if constexpr (Op == BinOp::mul) {
                        (*gb)[j] += g[i] * av[i];
                    } else {
                        (*gb)[j] -= g[i] * av[i] / (bv[j] * bv[j]);
                    }
                }
            }
        });
    }
    return result;
}

/// Elementwise map where the derivative is expressed through input and output.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D d) {
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = f(xv[i]);
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), d](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gx)[i] += self.grad[i] * d(px->value[i], self.value[i]);
                }
            }
        });
    }
    return result;
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T{0}) {
        return T{1} / (T{1} + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T{1} + e);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary<T, BinOp::add>(a, b, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary<T, BinOp::sub>(a, b, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary<T, BinOp::mul>(a, b, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary<T, BinOp::div>(a, b, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
    return unary(x, [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return unary(
        x, [](T v) { return v * sigmoid_scalar(v); },
        [](T v, T) {
            const T s = sigmoid_scalar(v);
            return s * (T{1} + v * (T{1} - s));
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul");
    require_rank2(b.shape(), "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner extents disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<T> out(static_cast<std::size_t>(m * n));
    gemm(MapR<T>(out.data(), m, n), CMapR<T>(a.values().data(), m, k), CMapR<T>(b.values().data(), k, n));
    Tensor<T> result({a.dim(0), b.dim(1)}, std::move(out));
    if (tracking({&a, &b})) {
        attach(result, {&a, &b}, [pa = a.node_ptr(), pb = b.node_ptr(), m, k, n](Node<T>& self) {
            CMapR<T> g(self.grad.data(), m, n);
            if (auto* ga = grad_of(pa)) {
                gemm(MapR<T>(ga->data(), m, k), g, CMapR<T>(pb->value.data(), k, n).transpose(), true);
            }
            if (auto* gb = grad_of(pb)) {
                gemm(MapR<T>(gb->data(), k, n), CMapR<T>(pa->value.data(), m, k).transpose(), g, true);
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul_bt");
    require_rank2(b.shape(), "matmul_bt");
    if (a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_bt: inner extents disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(0));
    std::vector<T> out(static_cast<std::size_t>(m * n));
    gemm(MapR<T>(out.data(), m, n), CMapR<T>(a.values().data(), m, k), CMapR<T>(b.values().data(), n, k).transpose());
    Tensor<T> result({a.dim(0), b.dim(0)}, std::move(out));
    if (tracking({&a, &b})) {
        attach(result, {&a, &b}, [pa = a.node_ptr(), pb = b.node_ptr(), m, k, n](Node<T>& self) {
            CMapR<T> g(self.grad.data(), m, n);
            if (auto* ga = grad_of(pa)) {
                gemm(MapR<T>(ga->data(), m, k), g, CMapR<T>(pb->value.data(), n, k), true);
            }
            if (auto* gb = grad_of(pb)) {
                gemm(MapR<T>(gb->data(), n, k), g.transpose(), CMapR<T>(pa->value.data(), m, k), true);
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require_rank2(x.shape(), "transpose");
    const auto r = static_cast<Eigen::Index>(x.dim(0));
    const auto c = static_cast<Eigen::Index>(x.dim(1));
    std::vector<T> out(x.numel());
    MapR<T>(out.data(), c, r) = CMapR<T>(x.values().data(), r, c).transpose();
    Tensor<T> result({x.dim(1), x.dim(0)}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), r, c](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                MapR<T>(gx->data(), r, c) += CMapR<T>(self.grad.data(), c, r).transpose();
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{0};
    for (T v : x.values()) {
        acc += v;
    }
    Tensor<T> result = Tensor<T>::scalar(acc);
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr()](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (auto& gi : *gx) {
                    gi += self.grad[0];
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> row_sum(const Tensor<T>& x) {
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    std::vector<T> out(rows, T{0});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r] += x.values()[r * cols + c];
        }
    }
    Tensor<T> result({rows, 1}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), rows, cols](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        (*gx)[r * cols + c] += self.grad[r];
                    }
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> col_mean(const Tensor<T>& x) {
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    std::vector<T> out(cols, T{0});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] += x.values()[r * cols + c];
        }
    }
    const T inv = T{1} / static_cast<T>(rows);
    for (auto& v : out) {
        v *= inv;
    }
    Tensor<T> result({1, cols}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), rows, cols, inv](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        (*gx)[r * cols + c] += self.grad[c] * inv;
                    }
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int rank = static_cast<int>(x.rank());
    const int ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (int i = 0; i < ax; ++i) {
        outer *= x.dim(static_cast<std::size_t>(i));
    }
    for (int i = ax + 1; i < rank; ++i) {
        inner *= x.dim(static_cast<std::size_t>(i));
    }
    const std::size_t len = x.dim(static_cast<std::size_t>(ax));
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                mx = std::max(mx, xv[base + j * inner]);
            }
            T total{0};
            for (std::size_t j = 0; j < len; ++j) {
                const T e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), outer, inner, len](Node<T>& self) {
            auto* gx = grad_of(px);
            if (!gx) {
                return;
            }
            const auto& y = self.value;
            const auto& g = self.grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot{0};
                    for (std::size_t j = 0; j < len; ++j) {
                        dot += g[base + j * inner] * y[base + j * inner];
                    }
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        (*gx)[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    if (weight.numel() != cols) {
        throw ShapeError("rmsnorm: weight " + shape_str(weight.shape()) + " does not match " + shape_str(x.shape()));
    }
    const auto& xv = x.values();
    const auto& wv = weight.values();
    std::vector<T> out(xv.size());
    std::vector<T> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ms{0};
        for (std::size_t c = 0; c < cols; ++c) {
            ms += xv[r * cols + c] * xv[r * cols + c];
        }
        inv_rms[r] = T{1} / std::sqrt(ms / static_cast<T>(cols) + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xv[r * cols + c] * inv_rms[r] * wv[c];
        }
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (tracking({&x, &weight})) {
        attach(result, {&x, &weight},
               [px = x.node_ptr(), pw = weight.node_ptr(), inv_rms = std::move(inv_rms), rows, cols](Node<T>& self) {
                   const auto& g = self.grad;
                   const auto& xv = px->value;
                   const auto& wv = pw->value;
                   auto* gx = grad_of(px);
                   auto* gw = grad_of(pw);
                   for (std::size_t r = 0; r < rows; ++r) {
                       const T ir = inv_rms[r];
                       T dot{0};
                       for (std::size_t c = 0; c < cols; ++c) {
                           const std::size_t i = r * cols + c;
                           const T xh = xv[i] * ir;
                           if (gw) {
                               (*gw)[c] += g[i] * xh;
                           }
                           dot += g[i] * wv[c] * xh;
                       }
                       if (gx) {
                           dot /= static_cast<T>(cols);
                           for (std::size_t c = 0; c < cols; ++c) {
                               const std::size_t i = r * cols + c;
                               (*gx)[i] += ir * (g[i] * wv[c] - xv[i] * ir * dot);
                           }
                       }
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                    BatchNormMode mode) {
    const std::size_t rows = x.rows();
    const std::size_t cols = x.cols();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError("batchnorm: affine parameters do not match " + shape_str(x.shape()));
    }
    if (state.running_mean.size() != cols || state.running_var.size() != cols) {
        throw ShapeError("batchnorm: running statistics do not match " + shape_str(x.shape()));
    }
    const auto& xv = x.values();
    std::vector<T> mu(cols, T{0});
    std::vector<T> var(cols, T{0});
    if (mode == BatchNormMode::train) {
        if (rows < 2) {
            throw std::invalid_argument("batchnorm: train mode needs at least 2 rows");
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                mu[c] += xv[r * cols + c];
            }
        }
        for (auto& m : mu) {
            m /= static_cast<T>(rows);
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const T d = xv[r * cols + c] - mu[c];
                var[c] += d * d;
            }
        }
        for (auto& v : var) {
            v /= static_cast<T>(rows);
        }
        const T m = state.momentum;
        for (std::size_t c = 0; c < cols; ++c) {
            state.running_mean[c] = (T{1} - m) * state.running_mean[c] + m * mu[c];
            state.running_var[c] = (T{1} - m) * state.running_var[c] + m * var[c];
        }
        state.initialized = true;
    } else {
        if (!state.initialized) {
            throw UninitializedStatistics("batchnorm: inference before any training-mode statistics");
        }
        mu = state.running_mean;
        var = state.running_var;
    }
    std::vector<T> inv_std(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        inv_std[c] = T{1} / std::sqrt(var[c] + state.eps);
    }
    std::vector<T> xhat(xv.size());
    std::vector<T> out(xv.size());
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            xhat[i] = (xv[i] - mu[c]) * inv_std[c];
            out[i] = gv[c] * xhat[i] + bv[c];
        }
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (tracking({&x, &gamma, &beta})) {
        const bool train = mode == BatchNormMode::train;
        attach(result, {&x, &gamma, &beta},
               [px = x.node_ptr(), pg = gamma.node_ptr(), pb = beta.node_ptr(), xhat = std::move(xhat),
                inv_std = std::move(inv_std), rows, cols, train](Node<T>& self) {
                   const auto& g = self.grad;
                   const auto& gv = pg->value;
                   if (auto* gg = grad_of(pg)) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           (*gg)[i % cols] += g[i] * xhat[i];
                       }
                   }
                   if (auto* gb = grad_of(pb)) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           (*gb)[i % cols] += g[i];
                       }
                   }
                   auto* gx = grad_of(px);
                   if (!gx) {
                       return;
                   }
                   if (!train) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           (*gx)[i] += g[i] * gv[i % cols] * inv_std[i % cols];
                       }
                       return;
                   }
                   const T n = static_cast<T>(rows);
                   std::vector<T> sum_g(cols, T{0});
                   std::vector<T> sum_gx(cols, T{0});
                   for (std::size_t i = 0; i < g.size(); ++i) {
                       const T gh = g[i] * gv[i % cols];
                       sum_g[i % cols] += gh;
                       sum_gx[i % cols] += gh * xhat[i];
                   }
                   for (std::size_t i = 0; i < g.size(); ++i) {
                       const std::size_t c = i % cols;
                       const T gh = g[i] * gv[c];
                       (*gx)[i] += inv_std[c] / n * (n * gh - sum_g[c] - xhat[i] * sum_gx[c]);
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::uint32_t> ids) {
    require_rank2(table.shape(), "embedding");
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    if (ids.empty()) {
        throw ShapeError("embedding: empty id list");
    }
    std::vector<T> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Tensor<T> result({ids.size(), d}, std::move(out));
    if (tracking({&table})) {
        attach(result, {&table},
               [pt = table.node_ptr(), idv = std::vector<std::uint32_t>(ids.begin(), ids.end()), d](Node<T>& self) {
                   if (auto* gt = grad_of(pt)) {
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                           for (std::size_t c = 0; c < d; ++c) {
                               (*gt)[idv[i] * d + c] += self.grad[i * d + c];
                           }
                       }
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    const std::size_t cols = x.cols();
    const std::size_t nrows = x.rows();
    if (rows.empty()) {
        throw ShapeError("gather_rows: empty row list");
    }
    std::vector<T> out(rows.size() * cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= nrows) {
            throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                                    shape_str(x.shape()));
        }
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(rows[i] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    Tensor<T> result({rows.size(), cols}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x},
               [px = x.node_ptr(), rv = std::vector<std::size_t>(rows.begin(), rows.end()), cols](Node<T>& self) {
                   if (auto* gx = grad_of(px)) {
                       for (std::size_t i = 0; i < rv.size(); ++i) {
                           for (std::size_t c = 0; c < cols; ++c) {
                               (*gx)[rv[i] * cols + c] += self.grad[i * cols + c];
                           }
                       }
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> rows, const Tensor<T>& src) {
    const std::size_t cols = x.cols();
    if (src.cols() != cols || src.rows() != rows.size()) {
        throw ShapeError("scatter_rows: source " + shape_str(src.shape()) + " does not fit " +
                         std::to_string(rows.size()) + " rows of " + shape_str(x.shape()));
    }
    std::vector<T> out = x.values();
    std::vector<std::uint8_t> replaced(x.rows(), 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows() || replaced[rows[i]]) {
            throw std::out_of_range("scatter_rows: invalid or repeated row " + std::to_string(rows[i]));
        }
        replaced[rows[i]] = 1;
        std::copy_n(src.values().begin() + static_cast<std::ptrdiff_t>(i * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(rows[i] * cols));
    }
    Tensor<T> result(x.shape(), std::move(out));
    if (tracking({&x, &src})) {
        attach(result, {&x, &src},
               [px = x.node_ptr(), ps = src.node_ptr(), rv = std::vector<std::size_t>(rows.begin(), rows.end()),
                replaced = std::move(replaced), cols](Node<T>& self) {
                   if (auto* gx = grad_of(px)) {
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                           if (!replaced[i / cols]) {
                               (*gx)[i] += self.grad[i];
                           }
                       }
                   }
                   if (auto* gs = grad_of(ps)) {
                       for (std::size_t i = 0; i < rv.size(); ++i) {
                           for (std::size_t c = 0; c < cols; ++c) {
                               (*gs)[i * cols + c] += self.grad[rv[i] * cols + c];
                           }
                       }
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: nothing to concatenate");
    }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        }
        rows += p.rows();
    }
    std::vector<T> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    Tensor<T> result({rows, cols}, std::move(out));
    bool any = grad_enabled() && std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
    if (any) {
        std::vector<std::shared_ptr<Node<T>>> nodes;
        for (const auto& p : parts) {
            nodes.push_back(p.node_ptr());
        }
        attach_many(result, parts, [nodes = std::move(nodes)](Node<T>& self) {
            std::size_t off = 0;
            for (const auto& n : nodes) {
                const std::size_t len = n->value.size();
                if (auto* g = grad_of(n)) {
                    for (std::size_t i = 0; i < len; ++i) {
                        (*g)[i] += self.grad[off + i];
                    }
                }
                off += len;
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: nothing to concatenate");
    }
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        }
        cols += p.cols();
    }
    std::vector<T> out(rows * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                        out.begin() + static_cast<std::ptrdiff_t>(r * cols + off));
        }
        off += pc;
    }
    Tensor<T> result({rows, cols}, std::move(out));
    bool any = grad_enabled() && std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
    if (any) {
        std::vector<std::shared_ptr<Node<T>>> nodes;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node_ptr());
            widths.push_back(p.cols());
        }
        attach_many(result, parts, [nodes = std::move(nodes), widths = std::move(widths), rows, cols](Node<T>& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const std::size_t pc = widths[k];
                if (auto* g = grad_of(nodes[k])) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < pc; ++c) {
                            (*g)[r * pc + c] += self.grad[r * cols + off + c];
                        }
                    }
                }
                off += pc;
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(x.shape()));
    }
    const std::size_t cols = x.cols();
    std::vector<T> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                       x.values().begin() + static_cast<std::ptrdiff_t>(end * cols));
    Tensor<T> result({end - begin, cols}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), off = begin * cols](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gx)[off + i] += self.grad[i];
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const std::size_t cols = x.cols();
    const std::size_t rows = x.rows();
    if (begin >= end || end > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(x.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<T> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(r * cols + begin), w,
                    out.begin() + static_cast<std::ptrdiff_t>(r * w));
    }
    Tensor<T> result({rows, w}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), rows, cols, begin, w](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) {
                        (*gx)[r * cols + begin + c] += self.grad[r * w + c];
                    }
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor<T> result(std::move(shape), x.values());
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr()](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gx)[i] += self.grad[i];
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> repeat_each(const Tensor<T>& x, std::size_t times) {
    if (times == 0) {
        throw ShapeError("repeat_each: times must be positive");
    }
    const std::size_t n = x.numel();
    std::vector<T> out(n * times);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * times), times, x.values()[i]);
    }
    Tensor<T> result({1, n * times}, std::move(out));
    if (tracking({&x})) {
        attach(result, {&x}, [px = x.node_ptr(), times](Node<T>& self) {
            if (auto* gx = grad_of(px)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gx)[i / times] += self.grad[i];
                }
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937_64& rng) {
    if (p <= T{0}) {
        return x;
    }
    if (p >= T{1}) {
        throw std::invalid_argument("dropout: p must be < 1");
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep_scale = T{1} / (T{1} - p);
    std::vector<T> mask(x.numel());
    for (auto& m : mask) {
        m = u(rng) >= static_cast<double>(p) ? keep_scale : T{0};
    }
    return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads,
                           std::span<const std::size_t> seq_lens) {
    require_rank2(q.shape(), "causal_attention");
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
        throw ShapeError("causal_attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const std::size_t d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
    }
    const std::size_t total = std::accumulate(seq_lens.begin(), seq_lens.end(), std::size_t{0});
    if (total != q.dim(0)) {
        throw ShapeError("causal_attention: sequence lengths sum to " + std::to_string(total) + " but q has " +
                         std::to_string(q.dim(0)) + " rows");
    }
    const std::size_t dh = d / n_heads;
    const T sc = T{1} / std::sqrt(static_cast<T>(dh));
    const auto D = static_cast<Eigen::Index>(d);
    std::vector<T> out(q.numel(), T{0});
    // Saved probabilities, per sequence then per head, each n x n.
    std::vector<T> probs;
    std::size_t prob_size = 0;
    for (auto n : seq_lens) {
        prob_size += n * n * n_heads;
    }
    probs.resize(prob_size);
    std::size_t off = 0;
    std::size_t poff = 0;
    for (const auto n_sz : seq_lens) {
        const auto n = static_cast<Eigen::Index>(n_sz);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t col = h * dh;
            CStridedMap<T> Q(q.values().data() + off * d + col, n, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(D));
            CStridedMap<T> K(k.values().data() + off * d + col, n, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(D));
            CStridedMap<T> V(v.values().data() + off * d + col, n, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(D));
            StridedMap<T> O(out.data() + off * d + col, n, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(D));
            MapR<T> P(probs.data() + poff, n, n);
            gemm(P, Q, K.transpose());
            P *= sc;
            for (Eigen::Index i = 0; i < n; ++i) {
                T mx = P(i, 0);
                for (Eigen::Index j = 1; j <= i; ++j) {
                    mx = std::max(mx, P(i, j));
                }
                T tot{0};
                for (Eigen::Index j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    tot += P(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) {
                    P(i, j) /= tot;
                }
                for (Eigen::Index j = i + 1; j < n; ++j) {
                    P(i, j) = T{0};
                }
            }
            gemm(O, P, V);
            poff += n_sz * n_sz;
        }
        off += n_sz;
    }
    Tensor<T> result(q.shape(), std::move(out));
    if (tracking({&q, &k, &v})) {
        attach(result, {&q, &k, &v},
               [pq = q.node_ptr(), pk = k.node_ptr(), pv = v.node_ptr(), probs = std::move(probs),
                lens = std::vector<std::size_t>(seq_lens.begin(), seq_lens.end()), n_heads, dh, d, sc](Node<T>& self) {
                   auto* gq = grad_of(pq);
                   auto* gk = grad_of(pk);
                   auto* gv = grad_of(pv);
                   const auto D = static_cast<Eigen::Index>(d);
                   const auto DH = static_cast<Eigen::Index>(dh);
                   std::size_t off = 0;
                   std::size_t poff = 0;
                   MatR<T> dP;
                   for (const auto n_sz : lens) {
                       const auto n = static_cast<Eigen::Index>(n_sz);
                       for (std::size_t h = 0; h < n_heads; ++h) {
                           const std::size_t base = off * d + h * dh;
                           CMapR<T> P(probs.data() + poff, n, n);
                           CStridedMap<T> G(self.grad.data() + base, n, DH, Eigen::OuterStride<>(D));
                           CStridedMap<T> Q(pq->value.data() + base, n, DH, Eigen::OuterStride<>(D));
                           CStridedMap<T> K(pk->value.data() + base, n, DH, Eigen::OuterStride<>(D));
                           CStridedMap<T> V(pv->value.data() + base, n, DH, Eigen::OuterStride<>(D));
                           if (gv) {
                               gemm(StridedMap<T>(gv->data() + base, n, DH, Eigen::OuterStride<>(D)), P.transpose(), G,
                                    true);
                           }
                           if (gq || gk) {
                               dP.resize(n, n);
                               gemm(dP, G, V.transpose());
                               for (Eigen::Index i = 0; i < n; ++i) {
                                   T dot{0};
                                   for (Eigen::Index j = 0; j <= i; ++j) {
                                       dot += dP(i, j) * P(i, j);
                                   }
                                   for (Eigen::Index j = 0; j < n; ++j) {
                                       dP(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * sc : T{0};
                                   }
                               }
                               if (gq) {
                                   gemm(StridedMap<T>(gq->data() + base, n, DH, Eigen::OuterStride<>(D)), dP, K, true);
                               }
                               if (gk) {
                                   gemm(StridedMap<T>(gk->data() + base, n, DH, Eigen::OuterStride<>(D)), dP.transpose(), Q,
                                    true);
                               }
                           }
                           poff += n_sz * n_sz;
                       }
                       off += n_sz;
                   }
               });
    }
    return result;
}

template <typename T>
Tensor<T> cross_entropy_lm(const Tensor<T>& logits, std::span<const std::uint32_t> targets,
                           std::span<const std::uint8_t> mask) {
    require_rank2(logits.shape(), "cross_entropy_lm");
    const std::size_t rows = logits.dim(0);
    const std::size_t vocab = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw ShapeError("cross_entropy_lm: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask flags for logits " + shape_str(logits.shape()));
    }
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r]) {
            if (targets[r] >= vocab) {
                throw std::out_of_range("cross_entropy_lm: target " + std::to_string(targets[r]) +
                                        " outside vocabulary of " + std::to_string(vocab));
            }
            ++count;
        }
    }
    if (count == 0) {
        throw std::invalid_argument("cross_entropy_lm: mask selects no supervised positions");
    }
    const auto& lv = logits.values();
    std::vector<T> lse(rows, T{0});
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) {
            continue;
        }
        const T* row = lv.data() + r * vocab;
        const T mx = *std::max_element(row, row + vocab);
        T s{0};
        for (std::size_t c = 0; c < vocab; ++c) {
            s += std::exp(row[c] - mx);
        }
        lse[r] = mx + std::log(s);
        total += lse[r] - row[targets[r]];
    }
    const T inv = T{1} / static_cast<T>(count);
    Tensor<T> result = Tensor<T>::scalar(total * inv);
    if (tracking({&logits})) {
        attach(result, {&logits},
               [pl = logits.node_ptr(), tv = std::vector<std::uint32_t>(targets.begin(), targets.end()),
                mv = std::vector<std::uint8_t>(mask.begin(), mask.end()), lse = std::move(lse), vocab,
                inv](Node<T>& self) {
                   auto* gl = grad_of(pl);
                   if (!gl) {
                       return;
                   }
                   const T g = self.grad[0] * inv;
                   for (std::size_t r = 0; r < mv.size(); ++r) {
                       if (!mv[r]) {
                           continue;
                       }
                       const T* row = pl->value.data() + r * vocab;
                       T* grow = gl->data() + r * vocab;
                       for (std::size_t c = 0; c < vocab; ++c) {
                           grow[c] += g * std::exp(row[c] - lse[r]);
                       }
                       grow[tv[r]] -= g;
                   }
               });
    }
    return result;
}

#define LGEN_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> scale(const Tensor<T>&, T);                                                                \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                           \
    template Tensor<T> silu(const Tensor<T>&);                                                                    \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                 \
    template Tensor<T> exp(const Tensor<T>&);                                                                     \
    template Tensor<T> log(const Tensor<T>&);                                                                     \
    template Tensor<T> sqrt(const Tensor<T>&);                                                                    \
    template Tensor<T> square(const Tensor<T>&);                                                                  \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                \
    template Tensor<T> matmul_bt(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> transpose(const Tensor<T>&);                                                               \
    template Tensor<T> sum(const Tensor<T>&);                                                                     \
    template Tensor<T> mean(const Tensor<T>&);                                                                    \
    template Tensor<T> row_sum(const Tensor<T>&);                                                                 \
    template Tensor<T> col_mean(const Tensor<T>&);                                                                \
    template Tensor<T> softmax(const Tensor<T>&, int);                                                            \
    template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                                            \
    template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,        \
                                 BatchNormMode);                                                                  \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const std::uint32_t>);                               \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                               \
    template Tensor<T> scatter_rows(const Tensor<T>&, std::span<const std::size_t>, const Tensor<T>&);            \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                                \
    template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                                \
    template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                                    \
    template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                                    \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
    template Tensor<T> repeat_each(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64&);                                            \
    template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                        std::span<const std::size_t>);                                            \
    template Tensor<T> cross_entropy_lm(const Tensor<T>&, std::span<const std::uint32_t>,                         \
                                        std::span<const std::uint8_t>);

LGEN_INSTANTIATE_OPS(float)
LGEN_INSTANTIATE_OPS(double)

#undef LGEN_INSTANTIATE_OPS

}  // namespace lgen::num
