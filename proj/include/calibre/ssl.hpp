#pragma once

// Base self-supervised objectives: NT-Xent (SimCLR) and the cosine-pair loss.

#include <cstddef>
#include <numeric>
#include <vector>

#include "calibre/errors.hpp"
#include "calibre/tensor.hpp"

namespace calibre {

/// NT-Xent over 2N row embeddings where rows (2i, 2i+1) are the two views of
/// sample i. Each anchor's softmax runs over every other row (the positive
/// included); the result is the mean over all 2N anchors.
inline Tensor ntxent(const Tensor& h, double temperature) {
    if (h.rank() != 2) throw DimensionError("ntxent expects a 2N x d matrix, got " + shape_str(h.shape()));
    if (!(temperature > 0.0)) throw ContractError("ntxent temperature must be > 0");
    if (h.rows() % 2 != 0) throw ContractError("ntxent needs an even number of views");
    if (h.rows() < 4) throw ContractError("ntxent needs N >= 2 samples so that negatives exist");

    const std::size_t n2 = h.rows();
    const auto p = normalize_rows(h);
    const auto sim = scale(matmul(p, transpose(p)), 1.0 / temperature);

    std::vector<NllItem> items(n2);
    for (std::size_t i = 0; i < n2; ++i) {
        items[i].row = i;
        items[i].target = i ^ 1U;
        items[i].candidates.reserve(n2 - 1);
        for (std::size_t a = 0; a < n2; ++a)
            if (a != i) items[i].candidates.push_back(a);
    }
    return mean(masked_nll(sim, std::move(items)));
}

/// 2 − 2·cos(h₁ᵢ, h₂ᵢ) averaged over rows.
inline Tensor cosine_pair_loss(const Tensor& h1, const Tensor& h2) {
    if (h1.shape() != h2.shape() || h1.rank() != 2) {
        throw DimensionError("cosine_pair_loss: shapes " + shape_str(h1.shape()) + " and " + shape_str(h2.shape()));
    }
    const auto cos = row_dot(normalize_rows(h1), normalize_rows(h2));
    return add(Tensor::scalar(2.0), scale(mean(cos), -2.0));
}

} // namespace calibre
