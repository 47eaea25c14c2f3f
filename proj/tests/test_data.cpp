#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "calibre/data.hpp"

using namespace calibre;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("calibre_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::set<std::size_t> classes_of(const ClientDataset& c) {
    std::set<std::size_t> out;
    for (const auto& s : c.train) out.insert(s.label);
    return out;
}

// Mean over clients of Σ_k (p_k − q_k)² / q_k, with p the client's training
// label distribution and q the global one.
double mean_chi_square(const Dataset& ds, const std::vector<ClientDataset>& clients) {
    const auto counts = ds.class_counts();
    const double total = static_cast<double>(ds.samples.size());
    double acc = 0.0;
    for (const auto& c : clients) {
        const double n = static_cast<double>(c.train.size());
        double chi = 0.0;
        for (std::size_t k = 0; k < ds.num_classes; ++k) {
            const double q = static_cast<double>(counts[k]) / total;
            const double p = static_cast<double>(c.class_histogram[k]) / n;
            chi += (p - q) * (p - q) / q;
        }
        acc += chi;
    }
    return acc / static_cast<double>(clients.size());
}

void expect_disjoint_and_complete(const Dataset& ds, const std::vector<ClientDataset>& clients, bool complete) {
    std::vector<int> seen(ds.samples.size(), 0);
    for (const auto& c : clients) {
        for (auto i : c.train_indices) ++seen[i];
        for (auto i : c.test_indices) ++seen[i];
        std::size_t hist = 0;
        for (auto h : c.class_histogram) hist += h;
        EXPECT_EQ(hist, c.train.size());
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
        EXPECT_LE(seen[i], 1) << "sample " << i << " duplicated";
        if (complete) {
            EXPECT_EQ(seen[i], 1) << "sample " << i << " dropped";
        }
    }
}

} // namespace

TEST(SyntheticDataset, NearestCentroidSeparatesFourClasses) {
    const auto ds = make_synthetic_dataset(4, 16, 200, 0.1, 7);
    // class means estimated on the first half of each class, scored on the rest
    std::vector<std::vector<double>> means(4, std::vector<double>(16, 0.0));
    std::vector<std::size_t> fit(4, 0);
    const auto idx = ds.class_indices();
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < idx[k].size() / 2; ++j) {
            for (std::size_t d = 0; d < 16; ++d) means[k][d] += ds.samples[idx[k][j]].features[d];
            ++fit[k];
        }
    for (std::size_t k = 0; k < 4; ++k)
        for (auto& v : means[k]) v /= static_cast<double>(fit[k]);

    std::size_t correct = 0, total = 0;
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = idx[k].size() / 2; j < idx[k].size(); ++j) {
            const auto& x = ds.samples[idx[k][j]].features;
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t c = 0; c < 4; ++c) {
                double s = 0.0;
                for (std::size_t d = 0; d < 16; ++d) s += (x[d] - means[c][d]) * (x[d] - means[c][d]);
                if (s < best_d) {
                    best_d = s;
                    best = c;
                }
            }
            correct += best == k;
            ++total;
        }
    EXPECT_EQ(correct, total);
}

TEST(SyntheticDataset, SingleClassHasOneLabel) {
    const auto ds = make_synthetic_dataset(1, 4, 30, 0.05, 1);
    for (const auto& s : ds.samples) EXPECT_EQ(s.label, 0u);
}

TEST(SyntheticDataset, SeedsGiveDifferentMeans) {
    const auto a = make_synthetic_dataset(3, 8, 10, 0.05, 1);
    const auto b = make_synthetic_dataset(3, 8, 10, 0.05, 2);
    EXPECT_NE(a.samples.front().features, b.samples.front().features);
    const auto c = make_synthetic_dataset(3, 8, 10, 0.05, 1);
    EXPECT_EQ(a.samples, c.samples);
}

TEST(SyntheticDataset, FeaturesInUnitCube) {
    const auto ds = make_synthetic_dataset(6, 8, 100, 0.05, 3);
    for (const auto& s : ds.samples) {
        EXPECT_EQ(s.features.size(), 8u);
        for (double v : s.features) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(DatasetFile, RoundTripIsFloat32Exact) {
    auto ds = make_synthetic_dataset(3, 5, 7, 0.05, 9);
    ds.unlabeled.push_back(std::vector<double>(5, 0.25));
    const auto dir = scratch_dir("dataset_roundtrip");
    save_dataset(ds, dir);
    EXPECT_EQ(std::filesystem::file_size(dir / "features.bin"), 22u * 5u * 4u);
    EXPECT_EQ(std::filesystem::file_size(dir / "labels.bin"), 22u * 2u);

    const auto back = load_dataset(dir);
    EXPECT_EQ(back.dim, 5u);
    EXPECT_EQ(back.num_classes, 3u);
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
        for (std::size_t d = 0; d < 5; ++d)
            EXPECT_EQ(back.samples[i].features[d], static_cast<double>(static_cast<float>(ds.samples[i].features[d])));
    }
    ASSERT_EQ(back.unlabeled.size(), 1u);
    EXPECT_EQ(back.unlabeled[0], std::vector<double>(5, 0.25));
}

TEST(DatasetFile, LittleEndianLayout) {
    Dataset ds;
    ds.dim = 1;
    ds.num_classes = 2;
    ds.samples.push_back({{1.0}, 1});
    const auto dir = scratch_dir("dataset_layout");
    save_dataset(ds, dir);
    std::ifstream f(dir / "features.bin", std::ios::binary);
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    // 1.0f = 0x3F800000
    EXPECT_EQ(b[0], 0x00);
    EXPECT_EQ(b[3], 0x3F);
    std::ifstream l(dir / "labels.bin", std::ios::binary);
    unsigned char lb[2];
    l.read(reinterpret_cast<char*>(lb), 2);
    EXPECT_EQ(lb[0], 1);
    EXPECT_EQ(lb[1], 0);
}

TEST(DatasetFile, TruncatedFeaturesAreRejected) {
    const auto ds = make_synthetic_dataset(2, 3, 4, 0.05, 1);
    const auto dir = scratch_dir("dataset_truncated");
    save_dataset(ds, dir);
    std::filesystem::resize_file(dir / "features.bin", 10);
    EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(QuantityPartition, TwoClassesFiveHundredSamples) {
    const auto ds = make_synthetic_dataset(10, 4, 6500, 0.05, 3);
    const auto clients = partition_quantity(ds, 100, 2, 500, 11);
    ASSERT_EQ(clients.size(), 100u);
    for (const auto& c : clients) {
        EXPECT_EQ(classes_of(c).size(), 2u);
        EXPECT_EQ(c.train.size(), 500u);
        EXPECT_EQ(c.num_classes_present(), 2u);
        for (const auto& s : c.test) EXPECT_TRUE(classes_of(c).count(s.label));
    }
    expect_disjoint_and_complete(ds, clients, false);
}

TEST(QuantityPartition, AllClassesOneClientIsIid) {
    const auto ds = make_synthetic_dataset(5, 3, 40, 0.05, 3);
    const auto clients = partition_quantity(ds, 1, 5, 100, 1);
    EXPECT_EQ(classes_of(clients[0]).size(), 5u);
}

TEST(QuantityPartition, SeededDrawIsReproducible) {
    const auto ds = make_synthetic_dataset(4, 3, 100, 0.05, 3);
    const auto a = partition_quantity(ds, 2, 2, 40, 5);
    const auto b = partition_quantity(ds, 2, 2, 40, 5);
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_EQ(classes_of(a[c]).size(), 2u);
        EXPECT_EQ(a[c].train_indices, b[c].train_indices);
        EXPECT_EQ(a[c].test_indices, b[c].test_indices);
    }
    // two clients over a four-class ring take disjoint class windows
    std::set<std::size_t> both = classes_of(a[0]);
    for (auto k : classes_of(a[1])) EXPECT_FALSE(both.count(k));
}

TEST(QuantityPartition, InfeasibleRequestNamesClass) {
    const auto ds = make_synthetic_dataset(4, 3, 50, 0.05, 3);
    try {
        // 180 of 200 samples overall, but every class is wanted by two clients
        partition_quantity(ds, 6, 1, 30, 1);
        FAIL() << "expected PartitionInfeasibleError";
    } catch (const PartitionInfeasibleError& e) {
        EXPECT_NE(std::string(e.what()).find("class "), std::string::npos);
    }
    EXPECT_THROW(partition_quantity(ds, 2, 5, 10, 1), ParameterError);
    EXPECT_THROW(partition_quantity(ds, 8, 1, 30, 1), PartitionInfeasibleError);
}

TEST(QuantityPartition, RemainderPoolHoldsUnusedSamples) {
    const auto ds = make_synthetic_dataset(4, 3, 100, 0.05, 3);
    const auto clients = partition_quantity(ds, 2, 2, 40, 5);
    std::size_t used = 0;
    for (const auto& c : clients) used += c.train.size() + c.test.size();
    EXPECT_EQ(remainder_pool(ds, clients).size() + used, ds.samples.size());
}

TEST(QuantityPartition, TestSplitIsTwentyPercentStratified) {
    const auto ds = make_synthetic_dataset(10, 3, 600, 0.05, 3);
    const auto clients = partition_quantity(ds, 10, 2, 200, 4);
    for (const auto& c : clients) {
        EXPECT_EQ(c.test.size(), 50u);  // 200 train + 50 test: 20% of 250
        std::vector<std::size_t> test_hist(10, 0);
        for (const auto& s : c.test) ++test_hist[s.label];
        for (std::size_t k = 0; k < 10; ++k) {
            const double expected = static_cast<double>(c.class_histogram[k]) * 0.25;
            EXPECT_LE(std::abs(static_cast<double>(test_hist[k]) - expected), 1.0);
        }
    }
}

TEST(DirichletPartition, ConservesEveryClassExactly) {
    const auto ds = make_synthetic_dataset(10, 3, 300, 0.05, 3);
    const auto clients = partition_dirichlet(ds, 20, 0.3, 8);
    std::vector<std::size_t> totals(10, 0);
    for (const auto& c : clients) {
        for (const auto& s : c.train) ++totals[s.label];
        for (const auto& s : c.test) ++totals[s.label];
    }
    EXPECT_EQ(totals, ds.class_counts());
    expect_disjoint_and_complete(ds, clients, true);
}

TEST(DirichletPartition, LowConcentrationIsMoreSkewedOverTwentySeeds) {
    const auto ds = make_synthetic_dataset(10, 4, 600, 0.05, 3);
    double skewed = 0.0, flat = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        skewed += mean_chi_square(ds, partition_dirichlet(ds, 100, 0.3, seed));
        flat += mean_chi_square(ds, partition_dirichlet(ds, 100, 100.0, seed));
    }
    EXPECT_GT(skewed / 20.0, flat / 20.0);
}

TEST(DirichletPartition, HugeConcentrationMatchesGlobalProportions) {
    const auto ds = make_synthetic_dataset(5, 2, 2000, 0.05, 3);
    const auto clients = partition_dirichlet(ds, 2, 1e6, 4);
    for (const auto& c : clients) {
        const double n = static_cast<double>(c.train.size());
        for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(static_cast<double>(c.class_histogram[k]) / n, 0.2, 0.02);
    }
}

TEST(DirichletPartition, RejectsNonPositiveConcentration) {
    const auto ds = make_synthetic_dataset(2, 2, 10, 0.05, 3);
    EXPECT_THROW(partition_dirichlet(ds, 2, 0.0, 1), ParameterError);
    EXPECT_THROW(partition_dirichlet(ds, 2, -1.0, 1), ParameterError);
}

TEST(DirichletPartition, MinimumTrainSizeIsEnforced) {
    const auto ds = make_synthetic_dataset(10, 4, 100, 0.05, 3);
    for (const auto& c : partition_dirichlet(ds, 10, 0.3, 2, 20)) EXPECT_GE(c.train.size(), 20u);
    EXPECT_THROW(partition_dirichlet(ds, 10, 0.3, 2, 500), PartitionInfeasibleError);
}

TEST(DirichletPartition, PureFunctionOfSeed) {
    const auto ds = make_synthetic_dataset(4, 2, 100, 0.05, 3);
    const auto a = partition_dirichlet(ds, 5, 0.5, 17);
    const auto b = partition_dirichlet(ds, 5, 0.5, 17);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(a[c].train_indices, b[c].train_indices);
}

TEST(Unlabeled, DealtRoundRobin) {
    auto ds = make_synthetic_dataset(2, 2, 20, 0.05, 3);
    for (int i = 0; i < 7; ++i) ds.unlabeled.push_back({0.1 * i, 0.0});
    auto clients = partition_dirichlet(ds, 3, 1.0, 1);
    distribute_unlabeled(ds, clients, 5);
    EXPECT_EQ(clients[0].unlabeled.size(), 3u);
    EXPECT_EQ(clients[1].unlabeled.size(), 2u);
    EXPECT_EQ(clients[2].unlabeled.size(), 2u);
}

TEST(Augmentation, ZeroStrengthReturnsInput) {
    const std::vector<double> x{0.1, 0.5, 0.9, 0.3};
    Rng rng(1);
    const auto [a, b] = augment_pair(x, {0.0, 0.0, 1.0, 0}, rng);
    EXPECT_EQ(a, x);
    EXPECT_EQ(b, x);
}

TEST(Augmentation, JitterStaysWithinFiveSigma) {
    const std::vector<double> x{0.1, 0.5, 0.9, 0.3, 0.7};
    const AugmentationPolicy policy{0.1, 0.0, 1.0, 0};
    Rng rng(2);
    std::size_t differing = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto [a, b] = augment_pair(x, policy, rng);
        differing += a != b;
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_LE(std::abs(a[i] - x[i]), 0.5);
            EXPECT_LE(std::abs(b[i] - x[i]), 0.5);
        }
    }
    EXPECT_EQ(differing, 1000u);
}

TEST(Augmentation, ReplayIsIdentical) {
    const std::vector<double> x{0.1, 0.5, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4};
    const AugmentationPolicy policy;
    Rng r1(42), r2(42);
    EXPECT_EQ(augment_pair(x, policy, r1), augment_pair(x, policy, r2));
}

TEST(Augmentation, PolicyValidation) {
    EXPECT_THROW((AugmentationPolicy{0.1, 1.5, 0.5, 0}).validate(), ParameterError);
    EXPECT_THROW((AugmentationPolicy{0.1, 0.5, 0.0, 0}).validate(), ParameterError);
    EXPECT_NO_THROW((AugmentationPolicy{0.1, 1.0, 1.0, 0}).validate());
}

TEST(Augmentation, CropStaysInsideSourceRange) {
    const std::vector<double> x{0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0};
    const AugmentationPolicy policy{0.0, 0.0, 0.5, 0};
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const auto v = augment(x, policy, rng);
        // a window of 4 consecutive coordinates stretched back to 8
        EXPECT_NEAR(v.back() - v.front(), 3.0, 1e-12);
        EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
    }
}
