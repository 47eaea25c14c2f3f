#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "calibre/federated.hpp"

using namespace calibre;

namespace {

struct Fixture {
    Dataset ds;
    std::vector<ClientDataset> clients;
    GlobalModel model;
};

Fixture make_fixture(std::size_t num_clients, std::size_t per_client, std::uint64_t seed = 1) {
    Fixture f;
    f.ds = make_synthetic_dataset(4, 6, 200, 0.05, seed);
    f.clients = partition_quantity(f.ds, num_clients, 2, per_client, seed);
    f.model = make_model({6, {12}, 8}, seed);
    return f;
}

TrainingConfig small_config(std::size_t clients, std::size_t per_round) {
    TrainingConfig c;
    c.num_clients = clients;
    c.clients_per_round = per_round;
    c.rounds = 3;
    c.local_epochs = 1;
    c.batch_size = 16;
    c.learning_rate = 0.05;
    return c;
}

CalibreConfig calibre_config() {
    CalibreConfig c;
    c.clusters = 3;
    return c;
}

} // namespace

TEST(SampleClients, FullParticipationSelectsEveryone) {
    TrainingConfig c;
    c.num_clients = 7;
    c.clients_per_round = 7;
    EXPECT_EQ(sample_clients(3, c), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(SampleClients, DeterministicPerSeedAndRound) {
    TrainingConfig c;
    c.seed = 12;
    EXPECT_EQ(sample_clients(5, c), sample_clients(5, c));
    EXPECT_NE(sample_clients(5, c), sample_clients(6, c));
    EXPECT_EQ(sample_clients(5, c).size(), 10u);
}

TEST(SampleClients, SelectionFrequencyWithinThreeSigma) {
    TrainingConfig c;  // 100 clients, 10 per round
    std::vector<int> hits(100, 0);
    for (std::size_t r = 0; r < 1000; ++r)
        for (auto id : sample_clients(r, c)) ++hits[id];
    const double sigma = std::sqrt(1000 * 0.1 * 0.9);
    for (int h : hits) EXPECT_LE(std::abs(h - 100.0), 3 * sigma);
}

TEST(Aggregation, OppositeDeltasCancel) {
    const auto f = make_fixture(2, 32);
    auto v = flatten(f.model);
    std::vector<double> neg(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
    const std::vector<std::size_t> n{5, 5};
    EXPECT_EQ(flatten(aggregate_fedavg(f.model, {v, neg}, n)), flatten(f.model));
}

TEST(Aggregation, SingleClientAddsDelta) {
    const auto f = make_fixture(2, 32);
    const auto base = flatten(f.model);
    std::vector<double> delta(base.size(), 0.125);
    const std::vector<std::size_t> n{17};
    const auto out = flatten(aggregate_fedavg(f.model, {delta}, n));
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(out[i], base[i] + 0.125);
}

TEST(Aggregation, WeightsOneAndThree) {
    const auto f = make_fixture(2, 32);
    const auto base = flatten(f.model);
    std::vector<double> a(base.size()), b(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        a[i] = 0.01 * static_cast<double>(i);
        b[i] = -0.02 * static_cast<double>(i % 7);
    }
    const std::vector<std::size_t> n{1, 3};
    const auto out = flatten(aggregate_fedavg(f.model, {a, b}, n));
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(out[i], base[i] + (a[i] + 3 * b[i]) / 4, 1e-15);
}

TEST(Aggregation, MismatchedDeltaIsDimensionError) {
    const auto f = make_fixture(2, 32);
    const std::vector<std::size_t> n{1};
    EXPECT_THROW(aggregate_fedavg(f.model, {std::vector<double>(3, 0.0)}, n), DimensionError);
}

TEST(DivergenceWeighting, UniformDivergenceIsBitwiseFedAvg) {
    const auto f = make_fixture(2, 32);
    const auto base = flatten(f.model);
    std::vector<std::vector<double>> deltas(3, std::vector<double>(base.size()));
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < base.size(); ++i) deltas[c][i] = std::sin(static_cast<double>(i * (c + 1)));
    const std::vector<std::size_t> n{10, 25, 7};
    for (double delta : {0.0, 0.37, 5.0}) {
        const std::vector<double> divs(3, delta);
        const auto weighted = aggregate_divergence_weighted(f.model, deltas, n, divs);
        EXPECT_EQ(weighted.weights, fedavg_weights(n));
        EXPECT_EQ(flatten(weighted.model), flatten(aggregate_fedavg(f.model, deltas, n)));
    }
}

TEST(DivergenceWeighting, LnTwoGapGivesTwoThirdsOneThird) {
    const double t = 0.8;
    const std::vector<std::size_t> n{50, 50};
    const std::vector<double> divs{0.0, t * std::log(2.0)};
    const auto w = divergence_weights(n, divs, t);
    EXPECT_NEAR(w[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(w[1], 1.0 / 3.0, 1e-12);
}

TEST(DivergenceWeighting, WeightsSumToOne) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::size_t> n(7);
        std::vector<double> divs(7);
        for (std::size_t i = 0; i < 7; ++i) {
            n[i] = 1 + rng() % 500;
            divs[i] = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
        }
        const auto w = divergence_weights(n, divs);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
        // a lower divergence never receives less weight per sample
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t j = 0; j < 7; ++j)
                if (divs[i] < divs[j]) {
                    EXPECT_GE(w[i] / n[i], w[j] / n[j]);
                }
    }
}

TEST(DivergenceWeighting, NegativeDivergenceRejected) {
    const std::vector<std::size_t> n{1, 1};
    const std::vector<double> divs{0.1, -0.1};
    EXPECT_THROW(divergence_weights(n, divs), ContractError);
}

TEST(LocalUpdate, ZeroLearningRateGivesZeroDelta) {
    const auto f = make_fixture(2, 32);
    auto cfg = small_config(2, 2);
    cfg.learning_rate = 0.0;
    const auto u = local_update(f.model, f.clients[0], cfg, calibre_config(), {}, 0);
    for (double d : u.delta) EXPECT_EQ(d, 0.0);
    EXPECT_GT(u.stats.divergence, 0.0);
    EXPECT_EQ(u.stats.samples, 32u);
}

TEST(LocalUpdate, SingleBatchMatchesExplicitSgdStep) {
    const auto f = make_fixture(2, 16);
    auto cfg = small_config(2, 2);
    cfg.learning_rate = 0.1;
    const AugmentationPolicy policy;
    const auto cal = calibre_config();
    const std::size_t round = 4;
    const auto& client = f.clients[1];
    const auto u = local_update(f.model, client, cfg, cal, policy, round);

    // replay the same randomness by hand: shuffle, then views and cluster seed
    Rng rng(derive_seed(cfg.seed, Stream::local_update, {round, client.client_id, policy.seed}));
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::span<const double>> batch;
    for (auto i : order) batch.emplace_back(client.train[i].features);
    Tape tape;
    const auto bound = bind(f.model, &tape);
    const auto res = calibre_batch_loss(bound, batch, policy, cal, rng);
    backward(res.loss);
    const auto g = gradients(bound);

    ASSERT_EQ(u.delta.size(), g.size());
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(u.delta[i], -0.1 * g[i], 1e-10);
    EXPECT_EQ(u.stats.loss.total, res.parts.total);
    EXPECT_EQ(u.stats.divergence, res.divergence);
}

TEST(LocalUpdate, IdenticalClientsGiveIdenticalDeltas) {
    const auto f = make_fixture(2, 32);
    const auto cfg = small_config(2, 2);
    const auto a = local_update(f.model, f.clients[0], cfg, calibre_config(), {}, 1);
    const auto b = local_update(f.model, f.clients[0], cfg, calibre_config(), {}, 1);
    EXPECT_EQ(a.delta, b.delta);
}

TEST(LocalUpdate, TooFewSamplesForABatch) {
    const auto f = make_fixture(2, 8);
    EXPECT_THROW(local_update(f.model, f.clients[0], small_config(2, 2), calibre_config(), {}, 0), ContractError);
}

TEST(LocalUpdate, ExplodingStepReportsLocation) {
    const auto f = make_fixture(2, 64);
    auto cfg = small_config(2, 2);
    cfg.learning_rate = 1e300;
    try {
        local_update(f.model, f.clients[1], cfg, calibre_config(), {}, 2);
        FAIL() << "expected DivergenceFailureError";
    } catch (const DivergenceFailureError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("round 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("client 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
    }
}

TEST(TrainingStage, ZeroRoundsReturnsInitialModel) {
    const auto f = make_fixture(4, 32);
    auto cfg = small_config(4, 2);
    cfg.rounds = 0;
    const auto res = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    EXPECT_EQ(flatten(res.model), flatten(f.model));
    EXPECT_TRUE(res.reports.empty());
}

TEST(TrainingStage, ZeroLearningRateKeepsModelBitwise) {
    const auto f = make_fixture(4, 32);
    auto cfg = small_config(4, 2);
    cfg.rounds = 2;
    cfg.learning_rate = 0.0;
    const auto res = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    EXPECT_EQ(flatten(res.model), flatten(f.model));
    EXPECT_EQ(res.reports.size(), 2u);
}

TEST(TrainingStage, SslLossDecreasesOnTinyRun) {
    const auto f = make_fixture(4, 64);
    auto cfg = small_config(4, 4);
    cfg.rounds = 3;
    cfg.local_epochs = 2;
    const auto res = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    const auto mean_ls = [](const RoundReport& r) {
        double s = 0.0;
        for (const auto& c : r.per_client) s += c.loss.l_s;
        return s / static_cast<double>(r.per_client.size());
    };
    EXPECT_LT(mean_ls(res.reports[2]), mean_ls(res.reports[0]));
}

TEST(TrainingStage, ReportsAreWellFormed) {
    const auto f = make_fixture(5, 32);
    const auto cfg = small_config(5, 3);
    const auto res = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    ASSERT_EQ(res.reports.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
        const auto& rep = res.reports[r];
        EXPECT_EQ(rep.round, r + 1);
        EXPECT_EQ(rep.selected_clients.size(), 3u);
        EXPECT_TRUE(std::is_sorted(rep.selected_clients.begin(), rep.selected_clients.end()));
        EXPECT_NEAR(std::accumulate(rep.aggregation_weights.begin(), rep.aggregation_weights.end(), 0.0), 1.0, 1e-9);
        for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(rep.per_client[i].client_id, rep.selected_clients[i]);
    }
    EXPECT_EQ(res.model.version, 3u);
}

TEST(TrainingStage, WorkersDoNotChangeResults) {
    const auto f = make_fixture(6, 32);
    auto cfg = small_config(6, 4);
    const auto serial = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    cfg.workers = 4;
    const auto parallel = run_training_stage(f.model, f.clients, cfg, calibre_config(), {});
    EXPECT_EQ(flatten(serial.model), flatten(parallel.model));
    for (std::size_t r = 0; r < serial.reports.size(); ++r)
        EXPECT_EQ(serial.reports[r].aggregation_weights, parallel.reports[r].aggregation_weights);
}

TEST(TrainingStage, AlphaZeroMatchesSslBaselineBitwise) {
    const auto f = make_fixture(4, 32);
    const auto cfg = small_config(4, 4);
    auto cal = calibre_config();
    cal.alpha = 0.0;
    auto base = calibre_config();
    base.method = Method::pfl_ssl;
    const auto a = run_training_stage(f.model, f.clients, cfg, cal, {});
    const auto b = run_training_stage(f.model, f.clients, cfg, base, {});
    EXPECT_EQ(flatten(a.model), flatten(b.model));
}

TEST(TrainingStage, TooFewPartitionsIsContractError) {
    const auto f = make_fixture(2, 32);
    EXPECT_THROW(run_training_stage(f.model, f.clients, small_config(3, 2), calibre_config(), {}), ContractError);
}

TEST(Checkpoint, RoundTripAndLayout) {
    const auto f = make_fixture(4, 32);
    auto cfg = small_config(4, 2);
    cfg.rounds = 5;
    cfg.checkpoint_every = 2;
    const auto dir = std::filesystem::temp_directory_path() / "calibre_test_ckpt";
    std::filesystem::remove_all(dir);
    const auto res = run_training_stage(f.model, f.clients, cfg, calibre_config(), {}, dir);
    ASSERT_EQ(res.checkpoints.size(), 3u);
    EXPECT_EQ(res.checkpoints.back().filename(), "round_5.model");

    const auto loaded = load_checkpoint(res.checkpoints.back());
    EXPECT_EQ(flatten(loaded), flatten(res.model));
    EXPECT_EQ(loaded.version, 5u);

    std::ifstream is(res.checkpoints.back(), std::ios::binary);
    std::string header;
    std::getline(is, header);
    const auto payload = std::filesystem::file_size(res.checkpoints.back()) - header.size() - 1;
    EXPECT_EQ(payload, res.model.parameter_count() * 8);
    EXPECT_NE(header.find("\"encoder\":[[12,6],[8,12]]"), std::string::npos) << header;
}

TEST(Checkpoint, CorruptFileRejected) {
    const auto path = std::filesystem::temp_directory_path() / "calibre_test_bad.model";
    std::ofstream(path) << "{\"format\":\"other\"}\n";
    EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(TrainingConfig, Validation) {
    TrainingConfig c;
    c.clients_per_round = 101;
    EXPECT_THROW(c.validate(), ParameterError);
    c.clients_per_round = 0;
    EXPECT_THROW(c.validate(), ParameterError);
    c.clients_per_round = 10;
    c.learning_rate = -1;
    EXPECT_THROW(c.validate(), ParameterError);
}
