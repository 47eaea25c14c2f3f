#pragma once

// MLP encoder f_b and projector f_h, stored as plain parameter values and
// bound onto a tape for each differentiable forward pass.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calibre/errors.hpp"
#include "calibre/rng.hpp"
#include "calibre/tensor.hpp"

namespace calibre {

/// Dense layer y = W·x + b with W stored row-major as out×in.
struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weight;
    std::vector<double> bias;

    bool operator==(const Layer&) const = default;
};

/// ReLU between consecutive layers, none after the last.
struct Mlp {
    std::vector<Layer> layers;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in; }
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    void validate(const char* name) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.weight.size() != l.in * l.out || l.bias.size() != l.out) {
                throw DimensionError(std::string(name) + " layer " + std::to_string(i) + " storage does not match " +
                                     std::to_string(l.out) + "x" + std::to_string(l.in));
            }
            if (i > 0 && layers[i - 1].out != l.in) {
                throw DimensionError(std::string(name) + " layer " + std::to_string(i) + " expects input " +
                                     std::to_string(l.in) + " but layer " + std::to_string(i - 1) + " emits " +
                                     std::to_string(layers[i - 1].out));
            }
        }
    }

    bool operator==(const Mlp&) const = default;
};

struct GlobalModel {
    Mlp encoder;
    Mlp projector;
    std::size_t version = 0;

    std::size_t parameter_count() const { return encoder.parameter_count() + projector.parameter_count(); }

    bool operator==(const GlobalModel&) const = default;
};

struct ModelShape {
    std::size_t input_dim = 0;
    std::vector<std::size_t> encoder_hidden;
    std::size_t embedding_dim = 0;

    bool operator==(const ModelShape&) const = default;
};

/// He-normal weights, zero biases.
inline Mlp make_mlp(const std::vector<std::size_t>& dims, Rng& rng) {
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        Layer l;
        l.in = dims[i];
        l.out = dims[i + 1];
        std::normal_distribution<double> init(0.0, std::sqrt(2.0 / static_cast<double>(l.in)));
        l.weight.resize(l.in * l.out);
        for (auto& w : l.weight) w = init(rng);
        l.bias.assign(l.out, 0.0);
        mlp.layers.push_back(std::move(l));
    }
    return mlp;
}

/// Encoder input→hidden…→d_z; projector d_z→d_z→d_z/2.
inline GlobalModel make_model(const ModelShape& shape, std::uint64_t seed) {
    if (shape.input_dim == 0 || shape.embedding_dim < 2) {
        throw ParameterError("model needs input_dim >= 1 and embedding_dim >= 2");
    }
    Rng rng(derive_seed(seed, Stream::model_init));
    std::vector<std::size_t> enc{shape.input_dim};
    enc.insert(enc.end(), shape.encoder_hidden.begin(), shape.encoder_hidden.end());
    enc.push_back(shape.embedding_dim);
    GlobalModel m;
    m.encoder = make_mlp(enc, rng);
    m.projector = make_mlp({shape.embedding_dim, shape.embedding_dim, shape.embedding_dim / 2}, rng);
    return m;
}

// ---------------------------------------------------------------------------
// Flat parameter vectors, in declaration order: encoder layers then projector
// layers, each as weight then bias.

inline std::vector<double> flatten(const GlobalModel& m) {
    std::vector<double> out;
    out.reserve(m.parameter_count());
    for (const Mlp* mlp : {&m.encoder, &m.projector})
        for (const auto& l : mlp->layers) {
            out.insert(out.end(), l.weight.begin(), l.weight.end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
    return out;
}

inline void unflatten(GlobalModel& m, std::span<const double> values) {
    if (values.size() != m.parameter_count()) {
        throw DimensionError("parameter vector of length " + std::to_string(values.size()) + " for a model with " +
                             std::to_string(m.parameter_count()) + " parameters");
    }
    std::size_t pos = 0;
    for (Mlp* mlp : {&m.encoder, &m.projector})
        for (auto& l : mlp->layers) {
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), l.weight.size(), l.weight.begin());
            pos += l.weight.size();
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(), l.bias.begin());
            pos += l.bias.size();
        }
}

// ---------------------------------------------------------------------------
// Forward passes

struct BoundLayer {
    Tensor weight;
    Tensor bias;
};

using BoundMlp = std::vector<BoundLayer>;

struct BoundModel {
    BoundMlp encoder;
    BoundMlp projector;
};

/// Parameters as tape leaves when `tape` is given, constants otherwise.
inline BoundMlp bind(const Mlp& mlp, Tape* tape) {
    BoundMlp out;
    for (const auto& l : mlp.layers) {
        if (tape) {
            out.push_back({Tensor::parameter(*tape, {l.out, l.in}, l.weight), Tensor::parameter(*tape, {l.out}, l.bias)});
        } else {
            out.push_back({Tensor::constant({l.out, l.in}, l.weight), Tensor::constant({l.out}, l.bias)});
        }
    }
    return out;
}

inline BoundModel bind(const GlobalModel& m, Tape* tape) { return {bind(m.encoder, tape), bind(m.projector, tape)}; }

/// Batched forward over rows of x.
inline Tensor forward(const BoundMlp& mlp, const Tensor& x) {
    Tensor h = x;
    for (std::size_t i = 0; i < mlp.size(); ++i) {
        h = linear(h, mlp[i].weight, mlp[i].bias);
        if (i + 1 < mlp.size()) h = relu(h);
    }
    return h;
}

inline Tensor forward_encoder(const BoundModel& m, const Tensor& x) { return forward(m.encoder, x); }
inline Tensor forward_projector(const BoundModel& m, const Tensor& z) { return forward(m.projector, z); }

/// Single-vector convenience: z = f_b(x).
inline Tensor forward_encoder(const GlobalModel& m, std::span<const double> x) {
    const auto z = forward(bind(m.encoder, nullptr), Tensor::constant({1, x.size()}, {x.begin(), x.end()}));
    return Tensor::constant({z.cols()}, z.to_vector());
}

inline Tensor forward_projector(const GlobalModel& m, std::span<const double> z) {
    const auto h = forward(bind(m.projector, nullptr), Tensor::constant({1, z.size()}, {z.begin(), z.end()}));
    return Tensor::constant({h.cols()}, h.to_vector());
}

/// Collects the accumulated leaf gradients as a flat vector in declaration
/// order.
inline std::vector<double> gradients(const BoundModel& m) {
    std::vector<double> out;
    for (const BoundMlp* mlp : {&m.encoder, &m.projector})
        for (const auto& l : *mlp)
            for (const Tensor* t : {&l.weight, &l.bias}) {
                if (t->has_grad()) {
                    out.insert(out.end(), t->grad().begin(), t->grad().end());
                } else {
                    out.insert(out.end(), t->size(), 0.0);
                }
            }
    return out;
}

} // namespace calibre
