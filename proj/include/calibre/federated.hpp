#pragma once

// Training stage of the two-stage protocol: client sampling, local SGD on the
// calibrated SSL loss, and server aggregation of parameter deltas.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "calibre/calibre_loss.hpp"
#include "calibre/data.hpp"
#include "calibre/errors.hpp"
#include "calibre/model.hpp"
#include "calibre/rng.hpp"
#include "calibre/tensor.hpp"

namespace calibre {

enum class Aggregation { fedavg, divergence_weighted };

struct TrainingConfig {
    std::size_t num_clients = 100;
    std::size_t rounds = 200;
    std::size_t clients_per_round = 10;
    std::size_t local_epochs = 3;
    std::size_t batch_size = 256;
    double learning_rate = 0.05;
    Aggregation aggregation = Aggregation::divergence_weighted;
    /// Divergence-weighting temperature; 0 uses the round's mean divergence.
    double divergence_temperature = 0.0;
    /// Write a checkpoint every this many rounds (0 disables).
    std::size_t checkpoint_every = 0;
    std::size_t workers = 1;
    std::uint64_t seed = 0;

    void validate() const {
        for (auto [name, v] : {std::pair{"num_clients", num_clients}, {"clients_per_round", clients_per_round},
                               {"local_epochs", local_epochs}, {"batch_size", batch_size}, {"workers", workers}}) {
            if (v < 1) throw ParameterError(std::string("training.") + name + " must be >= 1");
        }
        if (clients_per_round > num_clients) {
            throw ParameterError("training.clients_per_round must satisfy clients_per_round ≤ num_clients");
        }
        if (!(learning_rate >= 0.0)) throw ParameterError("training.learning_rate must be >= 0");
        if (!(divergence_temperature >= 0.0)) throw ParameterError("training.divergence_temperature must be >= 0");
    }

    bool operator==(const TrainingConfig&) const = default;
};

struct ClientRoundStats {
    std::size_t client_id = 0;
    LossParts loss;
    double divergence = 0.0;
    std::size_t samples = 0;
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<std::size_t> selected_clients;
    std::vector<ClientRoundStats> per_client;
    std::vector<double> aggregation_weights;
};

// ---------------------------------------------------------------------------

/// Uniform sample without replacement, returned in ascending id order.
/// Depends only on (seed, round).
inline std::vector<std::size_t> sample_clients(std::size_t round, const TrainingConfig& config) {
    std::vector<std::size_t> ids(config.num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, Stream::client_sampling, {round}));
    for (std::size_t i = 0; i < config.clients_per_round; ++i) {
        const std::size_t j = i + uniform_index(rng, config.num_clients - i);
        std::swap(ids[i], ids[j]);
    }
    ids.resize(config.clients_per_round);
    std::sort(ids.begin(), ids.end());
    return ids;
}

struct LocalUpdate {
    std::vector<double> delta;
    ClientRoundStats stats;
};

/// Copies the global model and runs `local_epochs` of SGD over shuffled
/// batches (the trailing partial batch is dropped). Loss parts and divergence
/// are averaged over the final epoch.
inline LocalUpdate local_update(const GlobalModel& global, const ClientDataset& client, const TrainingConfig& config,
                                const CalibreConfig& calibre, const AugmentationPolicy& policy, std::size_t round) {
    std::vector<std::span<const double>> pool;
    pool.reserve(client.train.size() + client.unlabeled.size());
    for (const auto& s : client.train) pool.emplace_back(s.features);
    for (const auto& u : client.unlabeled) pool.emplace_back(u);
    if (pool.size() < config.batch_size) {
        throw ContractError("client " + std::to_string(client.client_id) + " holds " + std::to_string(pool.size()) +
                            " training samples, fewer than one batch of " + std::to_string(config.batch_size));
    }

    Rng rng(derive_seed(config.seed, Stream::local_update, {round, client.client_id, policy.seed}));
    GlobalModel local = global;
    std::vector<double> params = flatten(local);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t batches = pool.size() / config.batch_size;

    LocalUpdate out;
    out.stats.client_id = client.client_id;
    out.stats.samples = pool.size();
    std::vector<std::span<const double>> batch(config.batch_size);

    for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossParts sum;
        double div_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            for (std::size_t i = 0; i < config.batch_size; ++i) batch[i] = pool[order[b * config.batch_size + i]];

            Tape tape;
            CalibreLoss result;
            std::vector<double> grad;
            try {
                const auto bound = bind(local, &tape);
                result = calibre.method == Method::pfl_ssl ? ssl_batch_loss(bound, batch, policy, calibre, rng)
                                                           : calibre_batch_loss(bound, batch, policy, calibre, rng);
                if (!std::isfinite(result.parts.total)) throw DomainError("non-finite loss");
                backward(result.loss);
                grad = gradients(bound);
            } catch (const Error& e) {
                // numeric blow-ups (non-finite values, collapsed embeddings) become training failures
                if (!dynamic_cast<const DomainError*>(&e) && !dynamic_cast<const DegenerateVectorError*>(&e)) throw;
                throw DivergenceFailureError("round " + std::to_string(round) + ", client " +
                                             std::to_string(client.client_id) + ", epoch " + std::to_string(epoch) +
                                             ", batch " + std::to_string(b) + ": " + e.what());
            }
            for (std::size_t p = 0; p < params.size(); ++p) params[p] -= config.learning_rate * grad[p];
            unflatten(local, params);

            sum.l_s += result.parts.l_s;
            sum.l_p += result.parts.l_p;
            sum.l_n += result.parts.l_n;
            sum.total += result.parts.total;
            div_sum += result.divergence;
        }
        const double nb = static_cast<double>(batches);
        out.stats.loss = {sum.l_s / nb, sum.l_p / nb, sum.l_n / nb, sum.total / nb};
        out.stats.divergence = div_sum / nb;
    }

    const auto base = flatten(global);
    out.delta.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) out.delta[p] = params[p] - base[p];
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation

inline std::vector<double> fedavg_weights(std::span<const std::size_t> samples) {
    if (samples.empty()) throw ContractError("aggregation needs at least one client");
    double total = 0.0;
    for (auto n : samples) total += static_cast<double>(n);
    if (!(total > 0.0)) throw ContractError("aggregation needs a positive total sample count");
    std::vector<double> w(samples.size());
    for (std::size_t c = 0; c < samples.size(); ++c) w[c] = static_cast<double>(samples[c]) / total;
    return w;
}

/// w_c ∝ n_c·exp(−δ_c/T). Computed as n_c·exp(−(δ_c − min δ)/T), which
/// normalizes to the same weights and is exactly n_c when all δ agree.
/// T ≤ 0 selects the mean divergence; a zero mean leaves the weights at FedAvg.
inline std::vector<double> divergence_weights(std::span<const std::size_t> samples, std::span<const double> divergences,
                                              double temperature = 0.0) {
    if (samples.size() != divergences.size()) throw DimensionError("one divergence per client required");
    if (samples.empty()) throw ContractError("aggregation needs at least one client");
    for (double d : divergences)
        if (!(d >= 0.0)) throw ContractError("divergence scores must be >= 0");

    double t = temperature;
    if (!(t > 0.0)) t = std::accumulate(divergences.begin(), divergences.end(), 0.0) / static_cast<double>(divergences.size());
    const double dmin = *std::min_element(divergences.begin(), divergences.end());

    std::vector<double> raw(samples.size());
    for (std::size_t c = 0; c < samples.size(); ++c) {
        const double shift = divergences[c] - dmin;
        raw[c] = static_cast<double>(samples[c]) * (t > 0.0 ? std::exp(-shift / t) : 1.0);
    }
    double total = 0.0;
    for (double r : raw) total += r;
    for (auto& r : raw) r /= total;
    return raw;
}

/// global + Σ_c w_c·delta_c.
inline GlobalModel apply_weighted_deltas(const GlobalModel& global, const std::vector<std::vector<double>>& deltas,
                                         std::span<const double> weights) {
    if (deltas.size() != weights.size()) throw DimensionError("one weight per delta required");
    auto params = flatten(global);
    for (const auto& d : deltas) {
        if (d.size() != params.size()) {
            throw DimensionError("delta of length " + std::to_string(d.size()) + " for a model with " +
                                 std::to_string(params.size()) + " parameters");
        }
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        double acc = 0.0;
        for (std::size_t c = 0; c < deltas.size(); ++c) acc += weights[c] * deltas[c][p];
        params[p] += acc;
    }
    GlobalModel out = global;
    unflatten(out, params);
    return out;
}

inline GlobalModel aggregate_fedavg(const GlobalModel& global, const std::vector<std::vector<double>>& deltas,
                                    std::span<const std::size_t> samples) {
    return apply_weighted_deltas(global, deltas, fedavg_weights(samples));
}

struct Aggregated {
    GlobalModel model;
    std::vector<double> weights;
};

inline Aggregated aggregate_divergence_weighted(const GlobalModel& global, const std::vector<std::vector<double>>& deltas,
                                                std::span<const std::size_t> samples, std::span<const double> divergences,
                                                double temperature = 0.0) {
    auto w = divergence_weights(samples, divergences, temperature);
    return {apply_weighted_deltas(global, deltas, w), std::move(w)};
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then every parameter as a little-endian
// float64 in declaration order.

inline void save_checkpoint(const GlobalModel& m, const std::filesystem::path& path) {
    const auto shapes = [](const Mlp& mlp) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& l : mlp.layers) arr.push_back({l.out, l.in});
        return arr;
    };
    const nlohmann::json header{{"format", "calibre-model"},
                                {"version", m.version},
                                {"encoder", shapes(m.encoder)},
                                {"projector", shapes(m.projector)},
                                {"parameter_count", m.parameter_count()}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os << header.dump() << '\n';
    for (double v : flatten(m)) detail::write_le(os, v);
    if (!os) throw IoError("failed writing checkpoint " + path.string());
}

inline GlobalModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint " + path.string());
    std::string line;
    std::getline(is, line);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint header: " + std::string(e.what()));
    }
    if (header.value("format", "") != "calibre-model") throw IoError("not a calibre model checkpoint");
    const auto build = [](const nlohmann::json& shapes) {
        Mlp mlp;
        for (const auto& s : shapes) {
            Layer l;
            l.out = s.at(0).get<std::size_t>();
            l.in = s.at(1).get<std::size_t>();
            l.weight.assign(l.out * l.in, 0.0);
            l.bias.assign(l.out, 0.0);
            mlp.layers.push_back(std::move(l));
        }
        return mlp;
    };
    GlobalModel m;
    m.version = header.at("version").get<std::size_t>();
    m.encoder = build(header.at("encoder"));
    m.projector = build(header.at("projector"));
    m.encoder.validate("encoder");
    m.projector.validate("projector");
    if (header.at("parameter_count").get<std::size_t>() != m.parameter_count()) {
        throw IoError("checkpoint parameter_count disagrees with its layer shapes");
    }
    std::vector<double> values(m.parameter_count());
    for (auto& v : values) v = detail::read_le<double>(is);
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint parameters");
    unflatten(m, values);
    return m;
}

// ---------------------------------------------------------------------------
// Round loop

struct TrainingResult {
    GlobalModel model;
    std::vector<RoundReport> reports;
    std::vector<std::filesystem::path> checkpoints;
};

namespace detail {

/// Runs fn(i) for i in [0, count) on up to `workers` threads.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> threads;
    const std::size_t used = std::min(workers, count);
    for (std::size_t t = 0; t < used; ++t) {
        threads.emplace_back([&, t] {
            for (std::size_t i = t; i < count; i += used) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

/// Executes `config.rounds` rounds starting from `initial`. `participants`
/// must hold at least `config.num_clients` clients; client ids index into it.
inline TrainingResult run_training_stage(const GlobalModel& initial, const std::vector<ClientDataset>& participants,
                                         const TrainingConfig& config, const CalibreConfig& calibre,
                                         const AugmentationPolicy& policy,
                                         const std::filesystem::path& checkpoint_dir = {}) {
    config.validate();
    calibre.validate();
    policy.validate();
    if (participants.empty()) throw ContractError("training stage needs at least one client");
    if (participants.size() < config.num_clients) {
        throw ContractError("training config names " + std::to_string(config.num_clients) + " clients but only " +
                            std::to_string(participants.size()) + " partitions exist");
    }

    TrainingResult result;
    result.model = initial;
    for (std::size_t round = 0; round < config.rounds; ++round) {
        RoundReport report;
        report.round = round + 1;
        report.selected_clients = sample_clients(round, config);

        std::vector<LocalUpdate> updates(report.selected_clients.size());
        detail::parallel_for(updates.size(), config.workers, [&](std::size_t i) {
            updates[i] = local_update(result.model, participants[report.selected_clients[i]], config, calibre, policy, round);
        });

        std::vector<std::vector<double>> deltas;
        std::vector<std::size_t> samples;
        std::vector<double> divs;
        for (auto& u : updates) {
            deltas.push_back(std::move(u.delta));
            samples.push_back(u.stats.samples);
            divs.push_back(u.stats.divergence);
            report.per_client.push_back(u.stats);
        }
        if (config.aggregation == Aggregation::fedavg) {
            report.aggregation_weights = fedavg_weights(samples);
            result.model = apply_weighted_deltas(result.model, deltas, report.aggregation_weights);
        } else {
            auto agg = aggregate_divergence_weighted(result.model, deltas, samples, divs, config.divergence_temperature);
            result.model = std::move(agg.model);
            report.aggregation_weights = std::move(agg.weights);
        }
        result.model.version = round + 1;
        result.reports.push_back(std::move(report));

        const bool last = round + 1 == config.rounds;
        if (!checkpoint_dir.empty() && config.checkpoint_every > 0 &&
            ((round + 1) % config.checkpoint_every == 0 || last)) {
            std::filesystem::create_directories(checkpoint_dir);
            auto path = checkpoint_dir / ("round_" + std::to_string(round + 1) + ".model");
            save_checkpoint(result.model, path);
            result.checkpoints.push_back(std::move(path));
        }
    }
    return result;
}

} // namespace calibre
