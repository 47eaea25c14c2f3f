#pragma once

// Prototype calibration of SSL representations.
//
// Per batch: two augmented views of every sample are encoded (z) and
// projected (h). KMeans over the 2N encodings yields pseudo labels; both
// views of a sample share one cluster. Two regularizers are built on the
// resulting prototypes:
//
//   L_n  encodings of the first views are contrasted against prototypes
//        computed from the second views (InfoNCE over samples outside the
//        cluster, or a softmax over negative squared distances);
//   L_p  NT-Xent over the 2K per-view prototypes of projector outputs.
//
// The batch loss is l_s + α·(l_p + l_n). Cluster assignments are constants of
// the backward pass; gradients flow through z, h and the prototype means.
// The mean sample-to-centroid distance is reported as the client's
// divergence score for server-side weighting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "calibre/data.hpp"
#include "calibre/errors.hpp"
#include "calibre/model.hpp"
#include "calibre/rng.hpp"
#include "calibre/ssl.hpp"
#include "calibre/tensor.hpp"

namespace calibre {

// ---------------------------------------------------------------------------
// KMeans

struct PrototypeSet {
    std::size_t dim = 0;
    /// K×dim, row-major.
    std::vector<double> centroids;
    std::vector<std::size_t> assignments;
    std::vector<std::size_t> counts;
    double inertia = 0.0;
    /// Inertia after the seeding assignment and after every Lloyd update.
    std::vector<double> inertia_history;
    std::size_t iterations = 0;

    std::size_t size() const { return counts.size(); }
    std::span<const double> centroid(std::size_t k) const {
        return std::span<const double>(centroids).subspan(k * dim, dim);
    }
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline std::span<const double> row(const Tensor& m, std::size_t i) { return m.data().subspan(i * m.cols(), m.cols()); }

/// Greedy k-means++: each new center is the best of 2+⌊ln K⌋ candidates drawn
/// proportionally to squared distance.
inline std::vector<double> kmeanspp_seed(const Tensor& z, std::size_t k, Rng& rng) {
    const std::size_t n = z.rows(), d = z.cols();
    std::vector<double> centers;
    centers.reserve(k * d);
    const auto first = uniform_index(rng, n);
    centers.insert(centers.end(), row(z, first).begin(), row(z, first).end());

    std::vector<double> closest(n);
    for (std::size_t i = 0; i < n; ++i) closest[i] = sq_dist(row(z, i), row(z, first));
    const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (std::size_t c = 1; c < k; ++c) {
        const double potential = std::accumulate(closest.begin(), closest.end(), 0.0);
        std::size_t best = 0;
        double best_potential = std::numeric_limits<double>::infinity();
        std::vector<double> best_closest;
        for (std::size_t t = 0; t < trials; ++t) {
            std::size_t cand = 0;
            if (potential > 0.0) {
                const double target = unit(rng) * potential;
                double acc = 0.0;
                cand = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += closest[i];
                    if (acc > target) {
                        cand = i;
                        break;
                    }
                }
            } else {
                cand = uniform_index(rng, n);
            }
            std::vector<double> next(n);
            double pot = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                next[i] = std::min(closest[i], sq_dist(row(z, i), row(z, cand)));
                pot += next[i];
            }
            if (pot < best_potential) {
                best_potential = pot;
                best = cand;
                best_closest = std::move(next);
            }
        }
        centers.insert(centers.end(), row(z, best).begin(), row(z, best).end());
        closest = std::move(best_closest);
    }
    return centers;
}

} // namespace detail

/// Lloyd's algorithm with k-means++ seeding over the rows of `z`. Stops when
/// assignments no longer change or after 100 iterations. An empty cluster is
/// refilled with the member of the largest cluster farthest from its centroid.
inline PrototypeSet kmeans(const Tensor& z, std::size_t k, std::uint64_t seed) {
    if (z.rank() != 2) throw DimensionError("kmeans expects an N x d matrix, got " + shape_str(z.shape()));
    const std::size_t n = z.rows(), d = z.cols();
    if (k == 0) throw ContractError("kmeans needs K >= 1");
    if (n < k) {
        throw ContractError("kmeans needs at least K samples: N=" + std::to_string(n) + ", K=" + std::to_string(k));
    }
    constexpr std::size_t kMaxIterations = 100;

    Rng rng(seed);
    PrototypeSet ps;
    ps.dim = d;
    ps.centroids = detail::kmeanspp_seed(z, k, rng);
    ps.assignments.assign(n, std::numeric_limits<std::size_t>::max());
    ps.counts.assign(k, 0);

    const auto inertia_now = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += detail::sq_dist(detail::row(z, i), ps.centroid(ps.assignments[i]));
        return s;
    };

    for (std::size_t iter = 0; iter < kMaxIterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double dist = detail::sq_dist(detail::row(z, i), ps.centroid(c));
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            if (ps.assignments[i] != best) {
                ps.assignments[i] = best;
                changed = true;
            }
        }
        if (iter == 0) ps.inertia_history.push_back(inertia_now());
        if (!changed) break;
        ps.iterations = iter + 1;

        std::fill(ps.counts.begin(), ps.counts.end(), 0);
        for (auto a : ps.assignments) ++ps.counts[a];
        for (std::size_t e = 0; e < k; ++e) {
            if (ps.counts[e] > 0) continue;
            const auto largest = static_cast<std::size_t>(std::max_element(ps.counts.begin(), ps.counts.end()) - ps.counts.begin());
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (ps.assignments[i] != largest) continue;
                const double dist = detail::sq_dist(detail::row(z, i), ps.centroid(largest));
                if (dist > far_d) {
                    far_d = dist;
                    far = i;
                }
            }
            ps.assignments[far] = e;
            --ps.counts[largest];
            ++ps.counts[e];
        }

        std::fill(ps.centroids.begin(), ps.centroids.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) ps.centroids[ps.assignments[i] * d + j] += z(i, j);
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t j = 0; j < d; ++j) ps.centroids[c * d + j] /= static_cast<double>(ps.counts[c]);
        ps.inertia_history.push_back(inertia_now());
    }

    std::fill(ps.counts.begin(), ps.counts.end(), 0);
    for (auto a : ps.assignments) ++ps.counts[a];
    ps.inertia = inertia_now();
    return ps;
}

/// Per-cluster means of `values` rows; differentiable in `values`.
inline Tensor compute_prototypes(const Tensor& values, const std::vector<std::size_t>& assignments, std::size_t k) {
    return segment_mean(values, assignments, k);
}

/// Mean Euclidean distance from each row of `z` to its assigned centroid.
inline double divergence(const Tensor& z, const PrototypeSet& protos) {
    if (z.rows() != protos.assignments.size() || z.cols() != protos.dim) {
        throw DimensionError("divergence: encodings " + shape_str(z.shape()) + " do not match the prototype set");
    }
    if (z.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i)
        total += std::sqrt(detail::sq_dist(detail::row(z, i), protos.centroid(protos.assignments[i])));
    return total / static_cast<double>(z.rows());
}

// ---------------------------------------------------------------------------
// Configuration

enum class LnKernel {
    /// InfoNCE: the numerator term also appears in the denominator.
    dot_infonce,
    /// Denominator over off-cluster samples only, exactly as printed in the
    /// reference pseudocode; individual terms may be negative.
    dot_strict,
    /// Cross-entropy of softmax(−‖z − v_k‖²/τ) against the pseudo label.
    neg_euclidean_softmax,
};

enum class SslLoss { ntxent, cosine_pair };

enum class Method {
    /// l_s + α·(l_p + l_n)
    calibre,
    /// Plain SSL objective without any prototype term.
    pfl_ssl,
};

struct CalibreConfig {
    Method method = Method::calibre;
    SslLoss ssl_loss = SslLoss::ntxent;
    double alpha = 0.3;
    /// 0 selects max(2, min(10, N/4)) for a batch of N samples.
    std::size_t clusters = 0;
    double temperature = 0.5;
    double proto_temperature = 0.5;
    LnKernel ln_kernel = LnKernel::dot_infonce;
    bool use_ln = true;
    bool use_lp = true;

    void validate() const {
        if (!(alpha >= 0.0)) throw ParameterError("calibre.alpha must satisfy α ≥ 0");
        if (clusters == 1) throw ParameterError("calibre.clusters must be >= 2 (or 0 for automatic)");
        if (!(temperature > 0.0)) throw ParameterError("calibre.temperature must be > 0");
        if (!(proto_temperature > 0.0)) throw ParameterError("calibre.proto_temperature must be > 0");
    }

    std::size_t clusters_for(std::size_t batch) const {
        if (clusters != 0) return clusters;
        return std::max<std::size_t>(2, std::min<std::size_t>(10, batch / 4));
    }

    bool regularized() const { return method == Method::calibre && alpha > 0.0 && (use_ln || use_lp); }

    bool operator==(const CalibreConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Regularizers

/// L_n. `z_first`/`z_second` hold the encodings of the first and second view
/// of each sample (row i = sample i). Prototypes are means of `z_second` per
/// cluster; rows of `z_first` are scored against them.
inline Tensor loss_ln(const Tensor& z_first, const Tensor& z_second, const std::vector<std::size_t>& assignments,
                      std::size_t k, double temperature, LnKernel kernel) {
    if (z_first.shape() != z_second.shape()) {
        throw DimensionError("loss_ln: view encodings " + shape_str(z_first.shape()) + " vs " + shape_str(z_second.shape()));
    }
    if (assignments.size() != z_first.rows()) throw DimensionError("loss_ln: one assignment per sample required");
    if (!(temperature > 0.0)) throw ContractError("loss_ln temperature must be > 0");
    std::vector<std::size_t> counts(k, 0);
    for (auto a : assignments) {
        if (a >= k) throw ContractError("loss_ln: assignment out of range");
        ++counts[a];
    }
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] == 0) throw ClusterCoverageError("loss_ln: cluster " + std::to_string(c) + " has no scored samples");

    const std::size_t n = assignments.size();
    const auto protos = compute_prototypes(z_second, assignments, k);
    std::vector<double> weights(n);
    for (std::size_t j = 0; j < n; ++j) weights[j] = 1.0 / static_cast<double>(counts[assignments[j]]);

    if (kernel == LnKernel::neg_euclidean_softmax) {
        const auto logits = scale(pairwise_sq_distance(z_first, protos), -1.0 / temperature);
        std::vector<NllItem> items(n);
        for (std::size_t j = 0; j < n; ++j) {
            items[j].row = j;
            items[j].target = assignments[j];
            items[j].candidates.resize(k);
            std::iota(items[j].candidates.begin(), items[j].candidates.end(), std::size_t{0});
        }
        return weighted_sum(masked_nll(logits, std::move(items)), std::move(weights));
    }

    if (std::all_of(counts.begin(), counts.end(), [n](std::size_t c) { return c == n; })) {
        throw ClusterCoverageError("loss_ln: no off-cluster samples to contrast against");
    }
    // scores[k][a] = v_k · z_a / τ
    const auto scores = scale(matmul(protos, transpose(z_first)), 1.0 / temperature);
    std::vector<NllItem> items(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t c = assignments[j];
        items[j].row = c;
        items[j].target = j;
        if (kernel == LnKernel::dot_infonce) items[j].candidates.push_back(j);
        for (std::size_t a = 0; a < n; ++a)
            if (assignments[a] != c) items[j].candidates.push_back(a);
    }
    return weighted_sum(masked_nll(scores, std::move(items)), std::move(weights));
}

/// L_p: NT-Xent over per-cluster means of the projector outputs of each view,
/// ordered (ν₁ of view one, ν₁ of view two, ν₂ of view one, …).
inline Tensor loss_lp(const Tensor& h_first, const Tensor& h_second, const std::vector<std::size_t>& assignments,
                      std::size_t k, double temperature) {
    if (k < 2) throw ContractError("loss_lp needs at least 2 clusters so that negatives exist");
    const auto nu_first = compute_prototypes(h_first, assignments, k);
    const auto nu_second = compute_prototypes(h_second, assignments, k);
    std::vector<std::size_t> order(2 * k);
    for (std::size_t c = 0; c < k; ++c) {
        order[2 * c] = c;
        order[2 * c + 1] = k + c;
    }
    return ntxent(take_rows(concat_rows(nu_first, nu_second), std::move(order)), temperature);
}

// ---------------------------------------------------------------------------
// Batch loss

struct LossParts {
    double l_s = 0.0;
    double l_p = 0.0;
    double l_n = 0.0;
    double total = 0.0;
};

/// Clustering of one batch: KMeans over all 2N view encodings plus the
/// per-sample assignment shared by both views.
struct ClusterPlan {
    PrototypeSet prototypes;
    /// Per sample, compacted to [0, clusters).
    std::vector<std::size_t> shared;
    std::size_t clusters = 0;
};

/// Majority vote over a sample's two view labels; a tie keeps the first
/// view's label. Clusters left empty are dropped and labels compacted.
inline std::vector<std::size_t> share_assignments(const std::vector<std::size_t>& view_labels, std::size_t k,
                                                  std::size_t* clusters_out = nullptr) {
    if (view_labels.size() % 2 != 0) throw ContractError("share_assignments: expected two views per sample");
    const std::size_t n = view_labels.size() / 2;
    std::vector<std::size_t> shared(n);
    for (std::size_t i = 0; i < n; ++i) {
        // two voters: agreement wins, disagreement is a tie
        shared[i] = view_labels[2 * i];
    }
    std::vector<std::size_t> remap(k, std::numeric_limits<std::size_t>::max());
    std::size_t next = 0;
    for (std::size_t c = 0; c < k; ++c)
        if (std::find(shared.begin(), shared.end(), c) != shared.end()) remap[c] = next++;
    for (auto& s : shared) s = remap[s];
    if (clusters_out) *clusters_out = next;
    return shared;
}

inline ClusterPlan plan_clusters(const Tensor& z_values, const CalibreConfig& config, std::uint64_t seed) {
    const std::size_t n = z_values.rows() / 2;
    ClusterPlan plan;
    plan.prototypes = kmeans(z_values, std::min(config.clusters_for(n), z_values.rows()), seed);
    plan.shared = share_assignments(plan.prototypes.assignments, plan.prototypes.size(), &plan.clusters);
    return plan;
}

struct CalibreLoss {
    Tensor loss;
    LossParts parts;
    double divergence = 0.0;
    ClusterPlan plan;
};

namespace detail {

inline std::vector<std::size_t> view_rows(std::size_t n, std::size_t which) {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = 2 * i + which;
    return out;
}

inline Tensor ssl_term(const Tensor& h, const CalibreConfig& config) {
    if (config.ssl_loss == SslLoss::cosine_pair) {
        const std::size_t n = h.rows() / 2;
        return cosine_pair_loss(take_rows(h, view_rows(n, 0)), take_rows(h, view_rows(n, 1)));
    }
    return ntxent(h, config.temperature);
}

} // namespace detail

/// Composite loss from interleaved encodings z and projections h (rows 2i and
/// 2i+1 are the views of sample i) under a fixed cluster plan. With fewer
/// than two non-empty shared clusters the prototype terms contribute zero.
inline CalibreLoss calibre_loss_from_encodings(const Tensor& z, const Tensor& h, const CalibreConfig& config,
                                               ClusterPlan plan) {
    CalibreLoss out;
    const auto l_s = detail::ssl_term(h, config);
    out.parts.l_s = l_s.item();
    out.loss = l_s;

    if (config.regularized() && plan.clusters >= 2) {
        const std::size_t n = z.rows() / 2;
        const auto first = detail::view_rows(n, 0), second = detail::view_rows(n, 1);
        Tensor reg = Tensor::scalar(0.0);
        if (config.use_lp) {
            const auto l_p = loss_lp(take_rows(h, first), take_rows(h, second), plan.shared, plan.clusters,
                                     config.proto_temperature);
            out.parts.l_p = l_p.item();
            reg = add(reg, l_p);
        }
        if (config.use_ln) {
            const auto l_n = loss_ln(take_rows(z, first), take_rows(z, second), plan.shared, plan.clusters,
                                     config.proto_temperature, config.ln_kernel);
            out.parts.l_n = l_n.item();
            reg = add(reg, l_n);
        }
        out.loss = add(l_s, scale(reg, config.alpha));
    }
    out.parts.total = out.loss.item();
    out.divergence = divergence(z.detach(), plan.prototypes);
    out.plan = std::move(plan);
    return out;
}

/// 2N×d matrix of augmented views; rows 2i and 2i+1 come from sample i.
inline Tensor make_views(std::span<const std::span<const double>> batch, const AugmentationPolicy& policy, Rng& rng) {
    if (batch.empty()) throw ContractError("empty batch");
    const std::size_t d = batch.front().size();
    std::vector<double> data;
    data.reserve(2 * batch.size() * d);
    for (const auto& x : batch) {
        if (x.size() != d) throw DimensionError("batch rows differ in dimensionality");
        auto [a, b] = augment_pair(x, policy, rng);
        data.insert(data.end(), a.begin(), a.end());
        data.insert(data.end(), b.begin(), b.end());
    }
    return Tensor::constant({2 * batch.size(), d}, std::move(data));
}

/// One Calibre loss evaluation: augment, encode, project, cluster, combine.
/// Draws the views first and then the clustering seed from `rng`.
inline CalibreLoss calibre_batch_loss(const BoundModel& model, std::span<const std::span<const double>> batch,
                                      const AugmentationPolicy& policy, const CalibreConfig& config, Rng& rng) {
    const std::size_t n = batch.size();
    if (n < std::max<std::size_t>(2, config.clusters_for(n))) {
        throw ContractError("batch of " + std::to_string(n) + " samples is smaller than max(2, K_r)");
    }
    const auto views = make_views(batch, policy, rng);
    const std::uint64_t cluster_seed = rng();
    const auto z = forward_encoder(model, views);
    const auto h = forward_projector(model, z);
    return calibre_loss_from_encodings(z, h, config, plan_clusters(z.detach(), config, cluster_seed));
}

/// The uncalibrated SSL baseline: only l_s is optimized. Consumes `rng`
/// exactly like calibre_batch_loss and clusters the encodings for the
/// divergence score only.
inline CalibreLoss ssl_batch_loss(const BoundModel& model, std::span<const std::span<const double>> batch,
                                  const AugmentationPolicy& policy, const CalibreConfig& config, Rng& rng) {
    const std::size_t n = batch.size();
    if (n < std::max<std::size_t>(2, config.clusters_for(n))) {
        throw ContractError("batch of " + std::to_string(n) + " samples is smaller than max(2, K_r)");
    }
    const auto views = make_views(batch, policy, rng);
    const std::uint64_t cluster_seed = rng();
    const auto z = forward_encoder(model, views);
    const auto h = forward_projector(model, z);

    CalibreLoss out;
    out.loss = detail::ssl_term(h, config);
    out.parts.l_s = out.parts.total = out.loss.item();
    const auto zv = z.detach();
    out.plan.prototypes = kmeans(zv, std::min(config.clusters_for(n), zv.rows()), cluster_seed);
    out.divergence = divergence(zv, out.plan.prototypes);
    return out;
}

} // namespace calibre
