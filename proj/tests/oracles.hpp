#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the tape; every value is recomputed with plain
// loops so that a shared bug cannot make library and oracle agree.

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "calibre/tensor.hpp"

namespace oracle {

using calibre::Shape;
using calibre::Tensor;

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor& t) {
    Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    return dot(a, b) / ((norm(a) + calibre::kNormEpsilon) * (norm(b) + calibre::kNormEpsilon));
}

/// NT-Xent by enumerating every ordered positive pair and every candidate.
inline double ntxent(const Matrix& h, double tau) {
    const std::size_t m = h.size();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pos = (i % 2 == 0) ? i + 1 : i - 1;
        double denom = 0.0;
        for (std::size_t a = 0; a < m; ++a)
            if (a != i) denom += std::exp(cosine(h[i], h[a]) / tau);
        total += -std::log(std::exp(cosine(h[i], h[pos]) / tau) / denom);
    }
    return total / static_cast<double>(m);
}

inline double two_pass_variance(const std::vector<double>& a) {
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    double s = 0.0;
    for (double x : a) s += (x - mean) * (x - mean);
    return s / static_cast<double>(a.size());
}

/// Dense ReLU network written as nested loops; weights are out×in row-major.
struct PlainLayer {
    std::size_t in, out;
    std::vector<double> w, b;
};

inline std::vector<double> mlp_forward(const std::vector<PlainLayer>& layers, std::vector<double> x) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        std::vector<double> y(L.out);
        for (std::size_t o = 0; o < L.out; ++o) {
            double s = L.b[o];
            for (std::size_t i = 0; i < L.in; ++i) s += L.w[o * L.in + i] * x[i];
            y[o] = (l + 1 < layers.size()) ? std::max(0.0, s) : s;
        }
        x = std::move(y);
    }
    return x;
}

/// Leaves for a gradient check: one shape and one value vector per input.
struct Leaves {
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;
};

using LossBuilder = std::function<Tensor(const std::vector<Tensor>&)>;

inline double evaluate(const Leaves& leaves, const LossBuilder& fn) {
    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < leaves.shapes.size(); ++i)
        inputs.push_back(Tensor::constant(leaves.shapes[i], leaves.values[i]));
    return fn(inputs).item();
}

/// Relative error ‖g_tape − g_fd‖ / (‖g_tape‖ + ‖g_fd‖) between the tape
/// gradient and central finite differences over every leaf entry.
inline double gradient_check(const Leaves& leaves, const LossBuilder& fn, double step = 1e-5) {
    calibre::Tape tape;
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < leaves.shapes.size(); ++i)
        params.push_back(Tensor::parameter(tape, leaves.shapes[i], leaves.values[i]));
    calibre::backward(fn(params));

    double diff2 = 0.0, tape2 = 0.0, fd2 = 0.0;
    Leaves probe = leaves;
    for (std::size_t i = 0; i < leaves.shapes.size(); ++i) {
        for (std::size_t j = 0; j < leaves.values[i].size(); ++j) {
            const double x0 = leaves.values[i][j];
            probe.values[i][j] = x0 + step;
            const double up = evaluate(probe, fn);
            probe.values[i][j] = x0 - step;
            const double down = evaluate(probe, fn);
            probe.values[i][j] = x0;
            const double fd = (up - down) / (2.0 * step);
            const double g = params[i].grad()[j];
            diff2 += (g - fd) * (g - fd);
            tape2 += g * g;
            fd2 += fd * fd;
        }
    }
    const double denom = std::sqrt(tape2) + std::sqrt(fd2);
    return denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
}

inline std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

} // namespace oracle
