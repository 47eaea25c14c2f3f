#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto an immutable node. Leaves created with
// Tensor::parameter() belong to a Tape; every operation whose inputs require
// gradients appends its output node to that same tape, so the tape is in
// topological order by construction. backward() walks it once in reverse and
// then clears it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "calibre/errors.hpp"

namespace calibre {

using Shape = std::vector<std::size_t>;

/// Floor added to the norm in the l2 normalization denominator.
inline constexpr double kNormEpsilon = 1e-12;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct TapeState;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::shared_ptr<TapeState> tape;
    std::function<void(const Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

struct TapeState {
    std::vector<NodePtr> nodes;

    void clear() {
        for (auto& node : nodes) {
            node->backward = nullptr;
            node->tape.reset();
            node->requires_grad = false;
        }
        nodes.clear();
    }
};

} // namespace detail

class Tensor;
void backward(const Tensor& loss);

/// Append-only record of differentiable operations for one logical update.
class Tape {
public:
    Tape() : state_(std::make_shared<detail::TapeState>()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() { state_->clear(); }

    std::size_t size() const { return state_->nodes.size(); }
    void clear() { state_->clear(); }

private:
    friend class Tensor;
    std::shared_ptr<detail::TapeState> state_;
};

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    static Tensor constant(Shape shape, std::vector<double> data) {
        if (numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        for (double v : data)
            if (!std::isfinite(v)) throw DomainError("tensor data must be finite");
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        return Tensor(std::move(node));
    }

    static Tensor scalar(double value) { return constant({}, {value}); }

    static Tensor zeros(Shape shape) {
        const auto n = numel(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    /// Leaf that accumulates gradients; recorded operations land on `tape`.
    static Tensor parameter(Tape& tape, Shape shape, std::vector<double> data) {
        Tensor t = constant(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        t.node_->tape = tape.state_;
        t.node_->ensure_grad();
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const { return rank() >= 1 ? node_->shape[0] : 1; }
    std::size_t cols() const { return rank() >= 2 ? node_->shape[1] : 1; }

    std::span<const double> data() const { return node_->data; }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Accumulated gradient, or an empty span when none was ever produced.
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Same values, cut from any tape.
    Tensor detach() const { return constant(shape(), node_->data); }

    std::vector<double> to_vector() const { return node_->data; }

    // Internal: used by operation implementations.
    const detail::NodePtr& node() const { return node_; }
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    friend void backward(const Tensor& loss);
    detail::NodePtr node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) throw DomainError(std::string(op) + " produced a non-finite value");
    }
}

/// Wraps a forward result; when any input needs gradients the node is
/// recorded on the shared tape with `bw` as its backward rule.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(const Node&)> bw) {
    check_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);

    std::shared_ptr<TapeState> tape;
    bool needs_grad = false;
    for (const Tensor* in : inputs) {
        const auto& n = in->node();
        if (!n->requires_grad) continue;
        needs_grad = true;
        if (!tape) {
            tape = n->tape;
        } else if (n->tape && n->tape != tape) {
            throw ContractError(std::string(op) + ": inputs recorded on different tapes");
        }
    }
    if (needs_grad && tape) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->tape = tape;
        node->backward = std::move(bw);
        tape->nodes.push_back(node);
    }
    return Tensor(std::move(node));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + " expects rank " + std::to_string(r) + ", got " +
                             shape_str(t.shape()));
    }
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

/// Accumulate into a parent's gradient if it participates in differentiation.
template <typename F>
inline void accumulate(const NodePtr& parent, F&& f) {
    if (!parent->requires_grad) return;
    parent->ensure_grad();
    f(parent->grad);
}

} // namespace detail

/// Reverse pass from a scalar loss; gradients accumulate on every leaf that
/// requires them. The tape is cleared afterwards.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1 || loss.rank() != 0) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    auto tape = loss.node_->tape;
    if (!tape || !loss.requires_grad()) return;  // constant loss: leaves keep zero gradients

    loss.node_->ensure_grad();
    loss.node_->grad[0] += 1.0;
    auto& nodes = tape->nodes;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        const auto& node = *it;
        if (node->grad.empty() || !node->backward) continue;
        node->backward(*node);
    }
    tape->clear();
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

inline Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (is_scalar(a)) return b.shape();
    if (is_scalar(b)) return a.shape();
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename Fwd>
inline std::vector<double> binary_forward(const Tensor& a, const Tensor& b, std::size_t n, Fwd f) {
    std::vector<double> out(n);
    const bool sa = a.size() == 1;
    const bool sb = b.size() == 1;
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[sa ? 0 : i], b[sb ? 0 : i]);
    return out;
}

/// Reduce a full-shape gradient onto an operand that may be a broadcast scalar.
inline void add_grad(std::vector<double>& dst, const std::vector<double>& src, double scale = 1.0) {
    if (dst.size() == src.size()) {
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += scale * src[i];
    } else {
        double s = 0.0;
        for (double v : src) s += v;
        dst[0] += scale * s;
    }
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto shape = detail::binary_shape(a, b, "add");
    auto out = detail::binary_forward(a, b, numel(shape), [](double x, double y) { return x + y; });
    auto na = a.node(), nb = b.node();
    return detail::make_result("add", std::move(shape), std::move(out), {&a, &b}, [na, nb](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) { detail::add_grad(g, self.grad); });
        detail::accumulate(nb, [&](auto& g) { detail::add_grad(g, self.grad); });
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto shape = detail::binary_shape(a, b, "sub");
    auto out = detail::binary_forward(a, b, numel(shape), [](double x, double y) { return x - y; });
    auto na = a.node(), nb = b.node();
    return detail::make_result("sub", std::move(shape), std::move(out), {&a, &b}, [na, nb](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) { detail::add_grad(g, self.grad); });
        detail::accumulate(nb, [&](auto& g) { detail::add_grad(g, self.grad, -1.0); });
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto shape = detail::binary_shape(a, b, "mul");
    const auto n = numel(shape);
    auto out = detail::binary_forward(a, b, n, [](double x, double y) { return x * y; });
    auto na = a.node(), nb = b.node();
    return detail::make_result("mul", std::move(shape), std::move(out), {&a, &b}, [na, nb, n](const detail::Node& self) {
        const bool sa = na->data.size() == 1, sb = nb->data.size() == 1;
        detail::accumulate(na, [&](auto& g) {
            std::vector<double> part(n);
            for (std::size_t i = 0; i < n; ++i) part[i] = self.grad[i] * nb->data[sb ? 0 : i];
            detail::add_grad(g, part);
        });
        detail::accumulate(nb, [&](auto& g) {
            std::vector<double> part(n);
            for (std::size_t i = 0; i < n; ++i) part[i] = self.grad[i] * na->data[sa ? 0 : i];
            detail::add_grad(g, part);
        });
    });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
    auto na = a.node();
    return detail::make_result("scale", a.shape(), std::move(out), {&a}, [na, factor](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
        });
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    auto na = a.node();
    return detail::make_result("relu", a.shape(), std::move(out), {&a}, [na](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (na->data[i] > 0.0) g[i] += self.grad[i];
        });
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
    auto na = a.node();
    return detail::make_result("exp", a.shape(), out, {&a}, [na, out](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out[i] * self.grad[i];
        });
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(a[i] > 0.0)) {
            std::ostringstream os;
            os << "log of non-positive value " << a[i] << " at index " << i;
            throw DomainError(os.str());
        }
        out[i] = std::log(a[i]);
    }
    auto na = a.node();
    return detail::make_result("log", a.shape(), std::move(out), {&a}, [na](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / na->data[i];
        });
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto na = a.node();
    return detail::make_result("sum", {}, {s}, {&a}, [na](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (auto& v : g) v += self.grad[0];
        });
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Σ_i weights[i]·v[i] with constant weights.
inline Tensor weighted_sum(const Tensor& v, std::vector<double> weights) {
    if (weights.size() != v.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor " +
                             shape_str(v.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
    auto nv = v.node();
    return detail::make_result("weighted_sum", {}, {s}, {&v}, [nv, w = std::move(weights)](const detail::Node& self) {
        detail::accumulate(nv, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[i] * self.grad[0];
        });
    });
}

// ---------------------------------------------------------------------------
// Matrix operations

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bd[p * n + j];
        }
    auto na = a.node(), nb = b.node();
    return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](const detail::Node& self) {
        const auto& g = self.grad;
        detail::accumulate(na, [&](auto& ga) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * nb->data[p * n + j];
                    ga[i * k + p] += s;
                }
        });
        detail::accumulate(nb, [&](auto& gb) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = na->data[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
                }
        });
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a(i, j);
    auto na = a.node();
    return detail::make_result("transpose", {n, m}, std::move(out), {&a}, [na, m, n](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
        });
    });
}

/// x[M×in]·wᵀ + b with w[out×in], b[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear");
    detail::require_rank(b, 1, "linear");
    const std::size_t m = x.rows(), in = x.cols(), out_dim = w.rows();
    if (w.cols() != in || b.size() != out_dim) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                             ", bias " + shape_str(b.shape()));
    }
    std::vector<double> out(m * out_dim);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = b[o];
            for (std::size_t p = 0; p < in; ++p) s += x(i, p) * w(o, p);
            out[i * out_dim + o] = s;
        }
    auto nx = x.node(), nw = w.node(), nb = b.node();
    return detail::make_result("linear", {m, out_dim}, std::move(out), {&x, &w, &b},
                               [nx, nw, nb, m, in, out_dim](const detail::Node& self) {
        const auto& g = self.grad;
        detail::accumulate(nx, [&](auto& gx) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double go = g[i * out_dim + o];
                    for (std::size_t p = 0; p < in; ++p) gx[i * in + p] += go * nw->data[o * in + p];
                }
        });
        detail::accumulate(nw, [&](auto& gw) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double go = g[i * out_dim + o];
                    for (std::size_t p = 0; p < in; ++p) gw[o * in + p] += go * nx->data[i * in + p];
                }
        });
        detail::accumulate(nb, [&](auto& gb) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[i * out_dim + o];
        });
    });
}

namespace detail {

// y = v/(r+ε); dy/dv applied to g: g/(r+ε) − v·(v·g)/(r·(r+ε)²)
inline void normalize_span(std::span<const double> v, std::span<double> out, const char* op) {
    double r2 = 0.0;
    for (double x : v) r2 += x * x;
    const double r = std::sqrt(r2);
    if (!(r > kNormEpsilon)) {
        std::ostringstream os;
        os << op << ": vector norm " << r << " is not above " << kNormEpsilon;
        throw DegenerateVectorError(os.str());
    }
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / (r + kNormEpsilon);
}

inline void normalize_backward(std::span<const double> v, std::span<const double> g, std::span<double> gv) {
    double r2 = 0.0, vg = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        r2 += v[i] * v[i];
        vg += v[i] * g[i];
    }
    const double r = std::sqrt(r2);
    const double d = r + kNormEpsilon;
    const double c = vg / (r * d * d);
    for (std::size_t i = 0; i < v.size(); ++i) gv[i] += g[i] / d - v[i] * c;
}

} // namespace detail

inline Tensor l2_normalize(const Tensor& v) {
    detail::require_rank(v, 1, "l2_normalize");
    std::vector<double> out(v.size());
    detail::normalize_span(v.data(), out, "l2_normalize");
    auto nv = v.node();
    return detail::make_result("l2_normalize", v.shape(), std::move(out), {&v}, [nv](const detail::Node& self) {
        detail::accumulate(nv, [&](auto& g) { detail::normalize_backward(nv->data, self.grad, g); });
    });
}

/// Row-wise l2 normalization of a matrix.
inline Tensor normalize_rows(const Tensor& m) {
    detail::require_rank(m, 2, "normalize_rows");
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        detail::normalize_span(m.data().subspan(i * c, c), std::span<double>(out).subspan(i * c, c), "normalize_rows");
    auto nm = m.node();
    return detail::make_result("normalize_rows", m.shape(), std::move(out), {&m}, [nm, r, c](const detail::Node& self) {
        detail::accumulate(nm, [&](auto& g) {
            for (std::size_t i = 0; i < r; ++i)
                detail::normalize_backward(std::span<const double>(nm->data).subspan(i * c, c),
                                           std::span<const double>(self.grad).subspan(i * c, c),
                                           std::span<double>(g).subspan(i * c, c));
        });
    });
}

/// Row-wise dot product of two equally shaped matrices.
inline Tensor row_dot(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "row_dot");
    if (a.shape() != b.shape()) {
        throw DimensionError("row_dot: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += a(i, j) * b(i, j);
    auto na = a.node(), nb = b.node();
    return detail::make_result("row_dot", {r}, std::move(out), {&a, &b}, [na, nb, r, c](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i] * nb->data[i * c + j];
        });
        detail::accumulate(nb, [&](auto& g) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i] * na->data[i * c + j];
        });
    });
}

/// Gathers rows by index (indices may repeat).
inline Tensor take_rows(const Tensor& m, std::vector<std::size_t> indices) {
    detail::require_rank(m, 2, "take_rows");
    const std::size_t c = m.cols();
    std::vector<double> out(indices.size() * c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m.rows()) throw DimensionError("take_rows: row index out of range");
        std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    auto nm = m.node();
    const std::size_t count = indices.size();
    return detail::make_result("take_rows", {count, c}, std::move(out), {&m}, [nm, c, idx = std::move(indices)](const detail::Node& self) {
        detail::accumulate(nm, [&](auto& g) {
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
        });
    });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "concat_rows");
    detail::require_rank(b, 2, "concat_rows");
    if (a.cols() != b.cols()) {
        throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto na = a.node(), nb = b.node();
    const std::size_t split = a.size();
    return detail::make_result("concat_rows", {a.rows() + b.rows(), a.cols()}, std::move(out), {&a, &b},
                               [na, nb, split](const detail::Node& self) {
        detail::accumulate(na, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
        detail::accumulate(nb, [&](auto& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
        });
    });
}

/// Per-segment row means: out[k] = mean of rows i with segment[i] == k.
inline Tensor segment_mean(const Tensor& m, const std::vector<std::size_t>& segment, std::size_t segments) {
    detail::require_rank(m, 2, "segment_mean");
    if (segment.size() != m.rows()) throw DimensionError("segment_mean: one segment id per row required");
    const std::size_t c = m.cols();
    std::vector<std::size_t> counts(segments, 0);
    for (auto s : segment) {
        if (s >= segments) throw ContractError("segment_mean: segment id out of range");
        ++counts[s];
    }
    for (std::size_t k = 0; k < segments; ++k)
        if (counts[k] == 0) throw ContractError("segment_mean: segment " + std::to_string(k) + " is empty");
    std::vector<double> out(segments * c, 0.0);
    for (std::size_t i = 0; i < segment.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out[segment[i] * c + j] += m(i, j);
    for (std::size_t k = 0; k < segments; ++k)
        for (std::size_t j = 0; j < c; ++j) out[k * c + j] /= static_cast<double>(counts[k]);
    auto nm = m.node();
    return detail::make_result("segment_mean", {segments, c}, std::move(out), {&m},
                               [nm, c, seg = segment, counts](const detail::Node& self) {
        detail::accumulate(nm, [&](auto& g) {
            for (std::size_t i = 0; i < seg.size(); ++i) {
                const double w = 1.0 / static_cast<double>(counts[seg[i]]);
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * self.grad[seg[i] * c + j];
            }
        });
    });
}

/// out[i][k] = ‖a_i − b_k‖².
inline Tensor pairwise_sq_distance(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "pairwise_sq_distance");
    detail::require_rank(b, 2, "pairwise_sq_distance");
    if (a.cols() != b.cols()) {
        throw DimensionError("pairwise_sq_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = b.rows(), d = a.cols();
    std::vector<double> out(m * k, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < d; ++p) {
                const double diff = a(i, p) - b(j, p);
                s += diff * diff;
            }
            out[i * k + j] = s;
        }
    auto na = a.node(), nb = b.node();
    return detail::make_result("pairwise_sq_distance", {m, k}, std::move(out), {&a, &b},
                               [na, nb, m, k, d](const detail::Node& self) {
        const bool ga_needed = na->requires_grad, gb_needed = nb->requires_grad;
        if (ga_needed) na->ensure_grad();
        if (gb_needed) nb->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const double g = 2.0 * self.grad[i * k + j];
                for (std::size_t p = 0; p < d; ++p) {
                    const double diff = na->data[i * d + p] - nb->data[j * d + p];
                    if (ga_needed) na->grad[i * d + p] += g * diff;
                    if (gb_needed) nb->grad[j * d + p] -= g * diff;
                }
            }
    });
}

/// One cross-entropy term: −log( exp(L[row,target]) / Σ_{c∈candidates} exp(L[row,c]) ).
/// The target need not be among the candidates.
struct NllItem {
    std::size_t row = 0;
    std::size_t target = 0;
    std::vector<std::size_t> candidates;
};

/// Vector of per-item negative log-likelihoods over row-wise candidate softmaxes.
inline Tensor masked_nll(const Tensor& logits, std::vector<NllItem> items) {
    detail::require_rank(logits, 2, "masked_nll");
    const std::size_t cols = logits.cols();
    std::vector<double> out(items.size());
    std::vector<double> lse(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        if (it.row >= logits.rows() || it.target >= cols) throw DimensionError("masked_nll: item index out of range");
        if (it.candidates.empty()) throw ContractError("masked_nll: empty candidate set");
        double mx = -std::numeric_limits<double>::infinity();
        for (auto c : it.candidates) {
            if (c >= cols) throw DimensionError("masked_nll: candidate index out of range");
            mx = std::max(mx, logits(it.row, c));
        }
        double s = 0.0;
        for (auto c : it.candidates) s += std::exp(logits(it.row, c) - mx);
        lse[i] = mx + std::log(s);
        out[i] = lse[i] - logits(it.row, it.target);
    }
    auto nl = logits.node();
    const std::size_t count = items.size();
    return detail::make_result("masked_nll", {count}, std::move(out), {&logits},
                               [nl, cols, its = std::move(items), lse](const detail::Node& self) {
        detail::accumulate(nl, [&](auto& g) {
            for (std::size_t i = 0; i < its.size(); ++i) {
                const auto& it = its[i];
                const double gi = self.grad[i];
                for (auto c : it.candidates)
                    g[it.row * cols + c] += gi * std::exp(nl->data[it.row * cols + c] - lse[i]);
                g[it.row * cols + it.target] -= gi;
            }
        });
    });
}

} // namespace calibre
