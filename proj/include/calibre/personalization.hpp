#pragma once

// Personalization stage: every client freezes the trained encoder, fits a
// linear softmax head on its own encoded training samples and reports test
// accuracy. Fairness is the population variance of those accuracies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "calibre/data.hpp"
#include "calibre/errors.hpp"
#include "calibre/format.hpp"
#include "calibre/model.hpp"
#include "calibre/rng.hpp"
#include "calibre/tensor.hpp"

namespace calibre {

struct HeadConfig {
    std::size_t epochs = 10;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ParameterError("personalization.epochs must be >= 1");
        if (batch_size < 1) throw ParameterError("personalization.batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw ParameterError("personalization.learning_rate must be >= 0");
    }

    bool operator==(const HeadConfig&) const = default;
};

/// Linear classifier over encoder features; output size is the global class
/// count.
struct PersonalHead {
    std::size_t client_id = 0;
    std::size_t num_classes = 0;
    std::size_t feature_dim = 0;
    /// num_classes × feature_dim, row-major.
    std::vector<double> weight;
    std::vector<double> bias;

    std::size_t predict(std::span<const double> features) const {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < num_classes; ++c) {
            double s = bias[c];
            for (std::size_t j = 0; j < feature_dim; ++j) s += weight[c * feature_dim + j] * features[j];
            if (s > best_score) {  // strict: ties keep the lowest class index
                best_score = s;
                best = c;
            }
        }
        return best;
    }
};

/// f_b applied to every sample without augmentation or tape.
inline Tensor extract_features(const Mlp& encoder, const std::vector<Sample>& samples) {
    if (samples.empty()) return Tensor::zeros({0, encoder.output_dim()});
    const std::size_t d = samples.front().features.size();
    if (d != encoder.input_dim()) {
        throw DimensionError("extract_features: samples have " + std::to_string(d) + " features, encoder expects " +
                             std::to_string(encoder.input_dim()));
    }
    std::vector<double> data;
    data.reserve(samples.size() * d);
    for (const auto& s : samples) {
        if (s.features.size() != d) throw DimensionError("extract_features: ragged sample features");
        data.insert(data.end(), s.features.begin(), s.features.end());
    }
    return forward(bind(encoder, nullptr), Tensor::constant({samples.size(), d}, std::move(data)));
}

/// Raw features as a matrix; the local-only baseline's "identity encoder".
inline Tensor raw_features(const std::vector<Sample>& samples, std::size_t dim) {
    std::vector<double> data;
    data.reserve(samples.size() * dim);
    for (const auto& s : samples) data.insert(data.end(), s.features.begin(), s.features.end());
    return Tensor::constant({samples.size(), dim}, std::move(data));
}

inline std::vector<std::size_t> labels_of(const std::vector<Sample>& samples) {
    std::vector<std::size_t> out(samples.size());
    std::transform(samples.begin(), samples.end(), out.begin(), [](const Sample& s) { return s.label; });
    return out;
}

/// Mean softmax cross-entropy of a linear head; `w`/`b` are the tape leaves.
inline Tensor head_cross_entropy(const Tensor& features, const std::vector<std::size_t>& labels, const Tensor& w,
                                 const Tensor& b) {
    const auto logits = linear(features, w, b);
    std::vector<NllItem> items(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        items[i].row = i;
        items[i].target = labels[i];
        items[i].candidates.resize(logits.cols());
        std::iota(items[i].candidates.begin(), items[i].candidates.end(), std::size_t{0});
    }
    return mean(masked_nll(logits, std::move(items)));
}

/// Zero-initialised head trained with mini-batch SGD on cross-entropy. Sample
/// order is reshuffled every epoch; the last batch may be partial.
inline PersonalHead train_head(const Tensor& features, const std::vector<std::size_t>& labels, std::size_t num_classes,
                               const HeadConfig& config, std::size_t client_id = 0) {
    config.validate();
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw DimensionError("train_head: " + std::to_string(labels.size()) + " labels for features " +
                             shape_str(features.shape()));
    }
    if (labels.empty()) throw ContractError("train_head: empty training set");
    for (auto y : labels)
        if (y >= num_classes) throw ContractError("train_head: label " + std::to_string(y) + " out of range");

    const std::size_t n = labels.size(), d = features.cols();
    PersonalHead head;
    head.client_id = client_id;
    head.num_classes = num_classes;
    head.feature_dim = d;
    head.weight.assign(num_classes * d, 0.0);
    head.bias.assign(num_classes, 0.0);

    Rng rng(config.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t end = std::min(n, start + config.batch_size);
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<std::size_t> batch_labels(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) batch_labels[i] = labels[rows[i]];

            Tape tape;
            const auto w = Tensor::parameter(tape, {num_classes, d}, head.weight);
            const auto b = Tensor::parameter(tape, {num_classes}, head.bias);
            const auto loss = head_cross_entropy(take_rows(features, rows), batch_labels, w, b);
            backward(loss);
            for (std::size_t i = 0; i < head.weight.size(); ++i) head.weight[i] -= config.learning_rate * w.grad()[i];
            for (std::size_t i = 0; i < head.bias.size(); ++i) head.bias[i] -= config.learning_rate * b.grad()[i];
        }
    }
    return head;
}

/// Fraction of argmax-correct predictions.
inline double evaluate(const PersonalHead& head, const Tensor& features, const std::vector<std::size_t>& labels) {
    if (labels.empty()) throw ContractError("evaluate: empty test set");
    if (features.rows() != labels.size() || features.cols() != head.feature_dim) {
        throw DimensionError("evaluate: features " + shape_str(features.shape()) + " for " +
                             std::to_string(labels.size()) + " labels and a head over " +
                             std::to_string(head.feature_dim) + " features");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (head.predict(features.data().subspan(i * features.cols(), features.cols())) == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double evaluate(const PersonalHead& head, const Mlp& encoder, const std::vector<Sample>& test) {
    if (test.empty()) throw ContractError("evaluate: empty test set");
    return evaluate(head, extract_features(encoder, test), labels_of(test));
}

struct FairnessStats {
    double mean = 0.0;
    double variance = 0.0;
    double std = 0.0;
    std::size_t count = 0;
};

/// Population mean, variance and standard deviation (Welford's update).
inline FairnessStats fairness_stats(std::span<const double> accuracies) {
    FairnessStats s;
    double m2 = 0.0;
    for (double a : accuracies) {
        ++s.count;
        const double delta = a - s.mean;
        s.mean += delta / static_cast<double>(s.count);
        m2 += delta * (a - s.mean);
    }
    if (s.count > 0) {
        s.variance = m2 / static_cast<double>(s.count);
        s.std = std::sqrt(s.variance);
    }
    return s;
}

enum class ClientSplit { participant, novel };

inline const char* to_string(ClientSplit s) { return s == ClientSplit::participant ? "participant" : "novel"; }

struct ClientAccuracy {
    std::size_t client_id = 0;
    ClientSplit split = ClientSplit::participant;
    double accuracy = 0.0;
    /// Head on raw features, when the local-only baseline was requested.
    std::optional<double> local_only;
};

struct PersonalizationReport {
    std::vector<ClientAccuracy> clients;
    FairnessStats participants;
    FairnessStats novel;
    FairnessStats combined;
    std::optional<FairnessStats> local_only;
};

/// Local-only baseline: the head is trained on raw features.
inline double local_only_baseline(const ClientDataset& client, std::size_t num_classes, const HeadConfig& config) {
    if (client.train.empty()) throw ContractError("local_only_baseline: empty training set");
    if (client.test.empty()) throw ContractError("local_only_baseline: empty test set");
    const std::size_t dim = client.train.front().features.size();
    HeadConfig cfg = config;
    cfg.seed = derive_seed(config.seed, Stream::personalization, {client.client_id, 1});
    const auto head = train_head(raw_features(client.train, dim), labels_of(client.train), num_classes, cfg, client.client_id);
    return evaluate(head, raw_features(client.test, dim), labels_of(client.test));
}

struct PersonalizationOptions {
    HeadConfig head;
    bool local_only_baseline = false;
};

/// Personalizes every participant and novel client against the frozen
/// encoder and summarizes each split and their union.
inline PersonalizationReport run_personalization_stage(const GlobalModel& model, std::size_t num_classes,
                                                       const std::vector<ClientDataset>& participants,
                                                       const std::vector<ClientDataset>& novel,
                                                       const PersonalizationOptions& options) {
    options.head.validate();
    PersonalizationReport report;
    const auto run = [&](const ClientDataset& client, ClientSplit split) {
        if (client.train.empty() || client.test.empty()) {
            throw ContractError("client " + std::to_string(client.client_id) + " needs non-empty train and test sets");
        }
        HeadConfig cfg = options.head;
        cfg.seed = derive_seed(options.head.seed, Stream::personalization, {client.client_id, 0});
        const auto head = train_head(extract_features(model.encoder, client.train), labels_of(client.train),
                                     num_classes, cfg, client.client_id);
        ClientAccuracy acc{client.client_id, split, evaluate(head, model.encoder, client.test), std::nullopt};
        if (options.local_only_baseline) acc.local_only = local_only_baseline(client, num_classes, options.head);
        report.clients.push_back(acc);
    };
    for (const auto& c : participants) run(c, ClientSplit::participant);
    for (const auto& c : novel) run(c, ClientSplit::novel);

    std::vector<double> part, nov, all, local;
    for (const auto& c : report.clients) {
        (c.split == ClientSplit::participant ? part : nov).push_back(c.accuracy);
        all.push_back(c.accuracy);
        if (c.local_only) local.push_back(*c.local_only);
    }
    report.participants = fairness_stats(part);
    report.novel = fairness_stats(nov);
    report.combined = fairness_stats(all);
    if (options.local_only_baseline) report.local_only = fairness_stats(local);
    return report;
}

/// Writes `embeddings_{client}.csv`: client_id, label, then the encoder
/// features of each test sample.
inline std::filesystem::path write_embeddings_csv(const std::filesystem::path& dir, const ClientDataset& client,
                                                  const Mlp& encoder) {
    std::filesystem::create_directories(dir);
    const auto path = dir / ("embeddings_" + std::to_string(client.client_id) + ".csv");
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    const auto features = extract_features(encoder, client.test);
    for (std::size_t i = 0; i < client.test.size(); ++i) {
        os << client.client_id << ',' << client.test[i].label;
        for (std::size_t j = 0; j < features.cols(); ++j) os << ',' << format_double(features(i, j));
        os << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
    return path;
}

} // namespace calibre
