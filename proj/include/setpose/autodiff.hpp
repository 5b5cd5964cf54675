#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "setpose/errors.hpp"
#include "setpose/rng.hpp"

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every tensor is rank 2 (a scalar is 1x1). Each op records its inputs and a
// local backward rule on a node; the graph is rebuilt on every forward pass.
// backward() orders the reachable nodes by creation id, which is a valid
// reverse topological order because a node is always created after its
// inputs.

namespace setpose::ad {

namespace detail {
inline std::uint64_t& node_counter() {
    thread_local std::uint64_t counter = 0;
    return counter;
}
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    std::uint64_t id = 0;
    bool requires_grad = false;

    std::size_t size() const { return rows * cols; }
    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using Scalar = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
        if (values.size() != rows * cols) throw ShapeMismatch("value count does not match shape");
        auto n = std::make_shared<Node<T>>();
        n->rows = rows;
        n->cols = cols;
        n->value = std::move(values);
        n->id = ++detail::node_counter();
        return Tensor(std::move(n));
    }
    static Tensor zeros(std::size_t rows, std::size_t cols) {
        return constant(rows, cols, std::vector<T>(rows * cols, T(0)));
    }
    static Tensor full(std::size_t rows, std::size_t cols, T v) {
        return constant(rows, cols, std::vector<T>(rows * cols, v));
    }
    static Tensor scalar(T v) { return constant(1, 1, {v}); }
    /// Leaf that accumulates gradients.
    static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<T> values) {
        Tensor t = constant(rows, cols, std::move(values));
        t.node_->requires_grad = true;
        t.node_->ensure_grad();
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& mutable_value() { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
    T operator()(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
    T item() const {
        if (size() != 1) throw NotScalar("item() on a non-scalar tensor");
        return node_->value[0];
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    /// Same values, cut from the graph.
    Tensor detach() const { return constant(rows(), cols(), value()); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

/// Creates the output node; records parents and the backward rule only when
/// some input participates in differentiation.
template <typename T, typename Backward>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> value,
                      std::vector<Tensor<T>> inputs, Backward&& bw) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    n->id = ++node_counter();
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward = std::forward<Backward>(bw);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void check(bool ok, const char* what) {
    if (!ok) throw ShapeMismatch(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    check(a.cols() == b.rows(), "matmul: inner dimensions differ");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(m * n);
    MapMat<T>(out.data(), m, n).noalias() =
        CMapMat<T>(a.value().data(), m, k) * CMapMat<T>(b.value().data(), k, n);
    return make_result<T>(m, n, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        CMapMat<T> g(self.grad.data(), m, n);
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad)
            MapMat<T>(A.ensure_grad().data(), m, k).noalias() +=
                g * CMapMat<T>(B.value.data(), k, n).transpose();
        if (B.requires_grad)
            MapMat<T>(B.ensure_grad().data(), k, n).noalias() +=
                CMapMat<T>(A.value.data(), m, k).transpose() * g;
    });
}

/// x * W + b with W [in, out] and b [1, out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
    using namespace detail;
    check(x.cols() == W.rows() && b.rows() == 1 && b.cols() == W.cols(), "linear: shape mismatch");
    const std::size_t m = x.rows(), k = x.cols(), n = W.cols();
    std::vector<T> out(m * n);
    MapMat<T> O(out.data(), m, n);
    O.noalias() = CMapMat<T>(x.value().data(), m, k) * CMapMat<T>(W.value().data(), k, n);
    O.rowwise() += CMapMat<T>(b.value().data(), 1, n).row(0);
    return make_result<T>(m, n, std::move(out), {x, W, b}, [m, k, n](Node<T>& self) {
        CMapMat<T> g(self.grad.data(), m, n);
        auto& X = *self.parents[0];
        auto& Wn = *self.parents[1];
        auto& Bn = *self.parents[2];
        if (X.requires_grad)
            MapMat<T>(X.ensure_grad().data(), m, k).noalias() +=
                g * CMapMat<T>(Wn.value.data(), k, n).transpose();
        if (Wn.requires_grad)
            MapMat<T>(Wn.ensure_grad().data(), k, n).noalias() +=
                CMapMat<T>(X.value.data(), m, k).transpose() * g;
        if (Bn.requires_grad) {
            // Row-ordered loop; Eigen's colwise sum is address dependent.
            T* gb = Bn.ensure_grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    using namespace detail;
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(m * n);
    MapMat<T>(out.data(), n, m) = CMapMat<T>(a.value().data(), m, n).transpose();
    return make_result<T>(n, m, std::move(out), {a}, [m, n](Node<T>& self) {
        auto& A = *self.parents[0];
        MapMat<T>(A.ensure_grad().data(), m, n) += CMapMat<T>(self.grad.data(), n, m).transpose();
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops with 2D broadcasting (an extent of 1 broadcasts)

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
    const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    check(ar == br || ar == 1 || br == 1, "broadcast: row extents incompatible");
    check(ac == bc || ac == 1 || bc == 1, "broadcast: column extents incompatible");
    const std::size_t r = std::max(ar, br), c = std::max(ac, bc);
    std::vector<T> out(r * c);
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = f(av[(ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j)],
                               bv[(br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j)]);
    return make_result<T>(r, c, std::move(out), {a, b},
                          [=](Node<T>& self) {
                              auto& A = *self.parents[0];
                              auto& B = *self.parents[1];
                              T* ga = A.requires_grad ? A.ensure_grad().data() : nullptr;
                              T* gb = B.requires_grad ? B.ensure_grad().data() : nullptr;
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < c; ++j) {
                                      const std::size_t ia = (ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j);
                                      const std::size_t ib = (br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j);
                                      const T g = self.grad[i * c + j];
                                      const T x = A.value[ia], y = B.value[ib];
                                      if (ga) ga[ia] += g * da(x, y);
                                      if (gb) gb[ib] += g * db(x, y);
                                  }
                          });
}

template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& a, F f, D d) {
    std::vector<T> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_result<T>(a.rows(), a.cols(), std::move(out), {a}, [d](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& ga = A.ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * d(A.value[i], self.value[i]);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}
/// Elementwise max; the gradient goes to `a` on ties.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x >= y ? x : y; }, [](T x, T y) { return x >= y ? T(1) : T(0); },
        [](T x, T y) { return x >= y ? T(0) : T(1); });
}
/// Elementwise min; the gradient goes to `a` on ties.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x <= y ? x : y; }, [](T x, T y) { return x <= y ? T(1) : T(0); },
        [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary_op(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return scale(a, T(-1)); }
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                            [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::abs(x); },
                            [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}
template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
/// Huber-style smooth L1 with transition at |x| = 1.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5); },
        [](T x, T) { return std::abs(x) < T(1) ? x : (x > T(0) ? T(1) : T(-1)); });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    double s = 0.0;
    for (T v : a.value()) s += v;
    return detail::make_result<T>(1, 1, {T(s)}, {a}, [](Node<T>& self) {
        auto& ga = self.parents[0]->ensure_grad();
        for (auto& g : ga) g += self.grad[0];
    });
}

/// Sum along an axis: axis 0 collapses rows ([1, cols]), axis 1 collapses
/// columns ([rows, 1]).
template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis) {
    const std::size_t r = a.rows(), c = a.cols();
    const auto& v = a.value();
    if (axis == 0) {
        std::vector<double> acc(c, 0.0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) acc[j] += v[i * c + j];
        return detail::make_result<T>(1, c, std::vector<T>(acc.begin(), acc.end()), {a},
                                      [r, c](Node<T>& self) {
                                          auto& ga = self.parents[0]->ensure_grad();
                                          for (std::size_t i = 0; i < r; ++i)
                                              for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j];
                                      });
    }
    std::vector<T> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += v[i * c + j];
        out[i] = T(s);
    }
    return detail::make_result<T>(r, 1, std::move(out), {a}, [r, c](Node<T>& self) {
        auto& ga = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[i];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.size() == 0) return Tensor<T>::scalar(T(0));
    return scale(sum(a), T(1) / T(a.size()));
}
template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
    const std::size_t n = axis == 0 ? a.rows() : a.cols();
    return scale(sum(a, axis), T(1) / T(n));
}
/// Sum of absolute values.
template <typename T>
Tensor<T> l1(const Tensor<T>& a) { return sum(abs(a)); }
/// Sum of squares.
template <typename T>
Tensor<T> l2sq(const Tensor<T>& a) { return sum(square(a)); }

/// Minimum along axis 1 ([rows, 1]); the gradient goes to the first argmin.
template <typename T>
Tensor<T> min_cols(const Tensor<T>& a) {
    const std::size_t r = a.rows(), c = a.cols();
    detail::check(c > 0, "min over an empty axis");
    std::vector<T> out(r);
    std::vector<std::size_t> arg(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (a.value()[i * c + j] < a.value()[i * c + best]) best = j;
        arg[i] = best;
        out[i] = a.value()[i * c + best];
    }
    return detail::make_result<T>(r, 1, std::move(out), {a}, [c, arg](Node<T>& self) {
        auto& ga = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < arg.size(); ++i) ga[i * c + arg[i]] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along axis 1 (each row sums to 1) or axis 0 (each column).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = 1) {
    const std::size_t r = a.rows(), c = a.cols();
    const std::size_t lines = axis == 1 ? r : c, len = axis == 1 ? c : r;
    const std::size_t stride = axis == 1 ? 1 : c, line_step = axis == 1 ? c : 1;
    std::vector<T> out(a.size());
    const auto& v = a.value();
    for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * line_step;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, v[base + k * stride]);
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) s += out[base + k * stride] = std::exp(v[base + k * stride] - mx);
        for (std::size_t k = 0; k < len; ++k) out[base + k * stride] = T(out[base + k * stride] / s);
    }
    return detail::make_result<T>(r, c, std::move(out), {a}, [=](Node<T>& self) {
        auto& ga = self.parents[0]->ensure_grad();
        for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t base = l * line_step;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k)
                dot += double(self.grad[base + k * stride]) * self.value[base + k * stride];
            for (std::size_t k = 0; k < len; ++k) {
                const std::size_t i = base + k * stride;
                ga[i] += self.value[i] * T(self.grad[i] - dot);
            }
        }
    });
}

/// Row-wise log-softmax.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(a.size());
    const auto& v = a.value();
    for (std::size_t i = 0; i < r; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, v[i * c + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(double(v[i * c + j] - mx));
        const double lse = double(mx) + std::log(s);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = T(v[i * c + j] - lse);
    }
    return detail::make_result<T>(r, c, std::move(out), {a}, [r, c](Node<T>& self) {
        auto& ga = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                ga[i * c + j] += T(self.grad[i * c + j] - std::exp(double(self.value[i * c + j])) * gs);
        }
    });
}

/// Row-wise layer normalization with affine gamma/beta of shape [1, cols].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t r = x.rows(), c = x.cols();
    detail::check(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c,
                  "layer_norm: affine parameters must be [1, cols]");
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(r);
    const auto& v = x.value();
    for (std::size_t i = 0; i < r; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += v[i * c + j];
        m /= double(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (v[i * c + j] - m) * (v[i * c + j] - m);
        var /= double(c);
        inv_std[i] = T(1.0 / std::sqrt(var + double(eps)));
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = T((v[i * c + j] - m) * inv_std[i]);
            out[i * c + j] = xhat[i * c + j] * gamma.value()[j] + beta.value()[j];
        }
    }
    return detail::make_result<T>(
        r, c, std::move(out), {x, gamma, beta}, [r, c, xhat = std::move(xhat), inv_std](Node<T>& self) {
            auto& X = *self.parents[0];
            auto& G = *self.parents[1];
            auto& B = *self.parents[2];
            if (G.requires_grad || B.requires_grad) {
                auto& gg = G.ensure_grad();
                auto& gb = B.ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        gg[j] += self.grad[i * c + j] * xhat[i * c + j];
                        gb[j] += self.grad[i * c + j];
                    }
            }
            if (X.requires_grad) {
                auto& gx = X.ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = double(self.grad[i * c + j]) * G.value[j];
                        s1 += d;
                        s2 += d * xhat[i * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = double(self.grad[i * c + j]) * G.value[j];
                        gx[i * c + j] += T(inv_std[i] * (d - s1 / c - xhat[i * c + j] * s2 / c));
                    }
                }
            }
        });
}

/// Inverted dropout: scales kept units by 1/(1-p) in training, identity
/// otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, RngStream& rng) {
    if (!train || p <= 0.0) return x;
    if (p >= 1.0) throw InvalidArgument("dropout probability must be < 1");
    const T keep_scale = T(1.0 / (1.0 - p));
    std::vector<T> mask(x.size());
    for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : T(0);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
    return detail::make_result<T>(x.rows(), x.cols(), std::move(out), {x},
                                  [mask = std::move(mask)](Node<T>& self) {
                                      auto& g = self.parents[0]->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                                  });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenation along axis 0 (stack rows) or axis 1 (side by side).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    detail::check(!parts.empty(), "concat of nothing");
    std::size_t r = 0, c = 0;
    if (axis == 0) {
        c = parts.front().cols();
        for (const auto& p : parts) {
            detail::check(p.cols() == c, "concat rows: column extents differ");
            r += p.rows();
        }
    } else {
        r = parts.front().rows();
        for (const auto& p : parts) {
            detail::check(p.rows() == r, "concat cols: row extents differ");
            c += p.cols();
        }
    }
    std::vector<T> out(r * c);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        for (std::size_t i = 0; i < p.rows(); ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) {
                const std::size_t oi = axis == 0 ? off + i : i;
                const std::size_t oj = axis == 0 ? j : off + j;
                out[oi * c + oj] = p.value()[i * p.cols() + j];
            }
        off += axis == 0 ? p.rows() : p.cols();
    }
    return detail::make_result<T>(r, c, std::move(out), parts, [axis, c, offsets](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& P = *self.parents[k];
            if (!P.requires_grad) continue;
            auto& g = P.ensure_grad();
            for (std::size_t i = 0; i < P.rows; ++i)
                for (std::size_t j = 0; j < P.cols; ++j) {
                    const std::size_t oi = axis == 0 ? offsets[k] + i : i;
                    const std::size_t oj = axis == 0 ? j : offsets[k] + j;
                    g[i * P.cols + j] += self.grad[oi * c + oj];
                }
        }
    });
}

/// Half-open range [begin, end) along an axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t r = a.rows(), c = a.cols();
    detail::check(begin <= end && end <= (axis == 0 ? r : c), "slice out of range");
    const std::size_t orows = axis == 0 ? end - begin : r;
    const std::size_t ocols = axis == 0 ? c : end - begin;
    std::vector<T> out(orows * ocols);
    for (std::size_t i = 0; i < orows; ++i)
        for (std::size_t j = 0; j < ocols; ++j)
            out[i * ocols + j] = axis == 0 ? a.value()[(begin + i) * c + j] : a.value()[i * c + begin + j];
    return detail::make_result<T>(orows, ocols, std::move(out), {a}, [=](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < orows; ++i)
            for (std::size_t j = 0; j < ocols; ++j) {
                const std::size_t src = axis == 0 ? (begin + i) * c + j : i * c + begin + j;
                g[src] += self.grad[i * ocols + j];
            }
    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
    const std::size_t c = a.cols();
    std::vector<T> out(idx.size() * c);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        detail::check(idx[i] < a.rows(), "gather_rows: index out of range");
        std::copy_n(a.value().begin() + idx[i] * c, c, out.begin() + i * c);
    }
    return detail::make_result<T>(idx.size(), c, std::move(out), {a}, [idx, c](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
    });
}

template <typename T>
Tensor<T> gather_cols(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
    const std::size_t r = a.rows(), c = a.cols(), n = idx.size();
    for (auto j : idx) detail::check(j < c, "gather_cols: index out of range");
    std::vector<T> out(r * n);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t k = 0; k < n; ++k) out[i * n + k] = a.value()[i * c + idx[k]];
    return detail::make_result<T>(r, n, std::move(out), {a}, [idx, r, c, n](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < n; ++k) g[i * c + idx[k]] += self.grad[i * n + k];
    });
}

/// Repeats the whole tensor `times` times along axis 0.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, std::size_t times) {
    const std::size_t n = a.size();
    std::vector<T> out(n * times);
    for (std::size_t t = 0; t < times; ++t) std::copy(a.value().begin(), a.value().end(), out.begin() + t * n);
    return detail::make_result<T>(a.rows() * times, a.cols(), std::move(out), {a}, [n, times](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[t * n + i];
    });
}

/// Row-major reinterpretation with a new shape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::size_t rows, std::size_t cols) {
    detail::check(rows * cols == a.size(), "reshape: element count differs");
    return detail::make_result<T>(rows, cols, a.value(), {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Pairwise L1 distances between the rows of a [m, d] and b [n, d] -> [m, n].
template <typename T>
Tensor<T> pairwise_l1(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.cols() == b.cols(), "pairwise_l1: row widths differ");
    const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T s = 0;
            for (std::size_t k = 0; k < d; ++k) s += std::abs(a.value()[i * d + k] - b.value()[j * d + k]);
            out[i * n + j] = s;
        }
    return detail::make_result<T>(m, n, std::move(out), {a, b}, [m, n, d](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        T* ga = A.requires_grad ? A.ensure_grad().data() : nullptr;
        T* gb = B.requires_grad ? B.ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const T g = self.grad[i * n + j];
                if (g == T(0)) continue;
                for (std::size_t k = 0; k < d; ++k) {
                    const T diff = A.value[i * d + k] - B.value[j * d + k];
                    const T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
                    if (ga) ga[i * d + k] += g * s;
                    if (gb) gb[j * d + k] -= g * s;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Attention

/// Attention probabilities recorded by a forward pass, laid out as
/// [batch][head][query][key].
template <typename T>
struct AttentionMaps {
    std::size_t batch = 0, heads = 0, queries = 0, keys = 0;
    std::vector<T> weights;

    T at(std::size_t b, std::size_t h, std::size_t q, std::size_t k) const {
        return weights[((b * heads + h) * queries + q) * keys + k];
    }
};

/// Scaled dot-product multi-head attention over `batch` independent blocks.
/// q is [batch*Tq, d]; k and v are [batch*Tk, d]; d splits evenly into
/// `heads` slices. Returns [batch*Tq, d]; if `maps` is given the attention
/// probabilities are copied into it.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, std::size_t batch, AttentionMaps<T>* maps = nullptr) {
    using namespace detail;
    const std::size_t d = q.cols();
    check(k.cols() == d && v.cols() == d, "attention: embedding widths differ");
    check(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
    check(batch > 0 && q.rows() % batch == 0 && k.rows() % batch == 0 && k.rows() == v.rows(),
          "attention: rows not divisible by batch");
    const std::size_t tq = q.rows() / batch, tk = k.rows() / batch, dh = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
    using StridedOut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

    auto probs = std::make_shared<std::vector<T>>(batch * heads * tq * tk);
    std::vector<T> out(q.rows() * d);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            Strided Q(q.value().data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
            Strided K(k.value().data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
            Strided V(v.value().data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
            MapMat<T> P(probs->data() + (b * heads + h) * tq * tk, tq, tk);
            P.noalias() = (Q * K.transpose()) * inv_sqrt;
            // Scalar loops: Eigen's packet paths peel by address, which breaks bit reproducibility.
            for (std::size_t i = 0; i < tq; ++i) {
                T* row = &P(Eigen::Index(i), 0);
                const T mx = *std::max_element(row, row + tk);
                T sum = T(0);
                for (std::size_t j = 0; j < tk; ++j) sum += row[j] = std::exp(row[j] - mx);
                for (std::size_t j = 0; j < tk; ++j) row[j] /= sum;
            }
            StridedOut O(out.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
            O.noalias() = P * V;
        }
    if (maps) {
        maps->batch = batch;
        maps->heads = heads;
        maps->queries = tq;
        maps->keys = tk;
        maps->weights = *probs;
    }
    return make_result<T>(q.rows(), d, std::move(out), {q, k, v}, [=](Node<T>& self) {
        auto& Qn = *self.parents[0];
        auto& Kn = *self.parents[1];
        auto& Vn = *self.parents[2];
        T* gq = Qn.requires_grad ? Qn.ensure_grad().data() : nullptr;
        T* gk = Kn.requires_grad ? Kn.ensure_grad().data() : nullptr;
        T* gv = Vn.requires_grad ? Vn.ensure_grad().data() : nullptr;
        RowMat<T> dP(tq, tk);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t qo = b * tq * d + h * dh, ko = b * tk * d + h * dh;
                Strided Q(Qn.value.data() + qo, tq, dh, Eigen::OuterStride<>(d));
                Strided K(Kn.value.data() + ko, tk, dh, Eigen::OuterStride<>(d));
                Strided V(Vn.value.data() + ko, tk, dh, Eigen::OuterStride<>(d));
                Strided dO(self.grad.data() + qo, tq, dh, Eigen::OuterStride<>(d));
                CMapMat<T> P(probs->data() + (b * heads + h) * tq * tk, tq, tk);
                if (gv) StridedOut(gv + ko, tk, dh, Eigen::OuterStride<>(d)).noalias() += P.transpose() * dO;
                dP.noalias() = dO * V.transpose();
                // Softmax backward, then the 1/sqrt(dh) scale.
                for (std::size_t i = 0; i < tq; ++i) {
                    T* g = &dP(Eigen::Index(i), 0);
                    const T* p = P.data() + i * tk;
                    T dot = T(0);
                    for (std::size_t j = 0; j < tk; ++j) dot += g[j] * p[j];
                    for (std::size_t j = 0; j < tk; ++j) g[j] = p[j] * (g[j] - dot) * inv_sqrt;
                }
                if (gq) StridedOut(gq + qo, tq, dh, Eigen::OuterStride<>(d)).noalias() += dP * K;
                if (gk) StridedOut(gk + ko, tk, dh, Eigen::OuterStride<>(d)).noalias() += dP.transpose() * Q;
            }
    });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Reachable differentiable nodes in reverse creation order.
template <typename T>
std::vector<Node<T>*> tape_order(const Tensor<T>& root) {
    std::vector<Node<T>*> order;
    std::vector<Node<T>*> stack{root.node().get()};
    std::unordered_set<const Node<T>*> seen;
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
    return order;
}

/// Accumulates d(loss)/d(leaf) into every reachable parameter. Intermediate
/// gradients are released afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw NotScalar("backward from a tensor with " + std::to_string(loss.size()) + " elements");
    if (!loss.requires_grad()) return;
    auto order = tape_order(loss);
    loss.node()->ensure_grad()[0] += T(1);
    for (Node<T>* n : order)
        if (n->backward) n->backward(*n);
    for (Node<T>* n : order)
        if (n->backward) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
}

}  // namespace setpose::ad
