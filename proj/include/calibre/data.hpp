#pragma once

// Datasets, non-i.i.d. client partitions and paired stochastic augmentation.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "calibre/errors.hpp"
#include "calibre/rng.hpp"

namespace calibre {

/// Label value marking an unlabeled sample in the on-disk format.
inline constexpr std::uint16_t kUnlabeled = 0xFFFF;

struct Sample {
    std::vector<double> features;
    std::size_t label = 0;

    bool operator==(const Sample&) const = default;
};

struct Dataset {
    std::size_t dim = 0;
    std::size_t num_classes = 0;
    std::vector<Sample> samples;
    /// Feature vectors without labels; usable only by the training stage.
    std::vector<std::vector<double>> unlabeled;

    /// Indices of the labeled samples of each class, in dataset order.
    std::vector<std::vector<std::size_t>> class_indices() const {
        std::vector<std::vector<std::size_t>> out(num_classes);
        for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].label].push_back(i);
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> out(num_classes, 0);
        for (const auto& s : samples) ++out[s.label];
        return out;
    }
};

struct ClientDataset {
    std::size_t client_id = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;
    /// Per-class counts of `train`.
    std::vector<std::size_t> class_histogram;
    /// Dataset indices backing `train` and `test`.
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
    std::vector<std::vector<double>> unlabeled;

    std::size_t num_classes_present() const {
        return static_cast<std::size_t>(
            std::count_if(class_histogram.begin(), class_histogram.end(), [](std::size_t c) { return c > 0; }));
    }
};

struct AugmentationPolicy {
    double jitter_std = 0.05;
    double mask_prob = 0.1;
    double crop_fraction = 0.875;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(jitter_std >= 0.0)) throw ParameterError("augmentation.jitter_std must be >= 0");
        if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ParameterError("augmentation.mask_prob must be in [0, 1]");
        if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) {
            throw ParameterError("augmentation.crop_fraction must be in (0, 1]");
        }
    }

    bool operator==(const AugmentationPolicy&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic blobs

/// One Gaussian blob per class inside the unit cube. Class means are pairwise
/// at least 6·cluster_spread apart; features are clamped to [0, 1].
inline Dataset make_synthetic_dataset(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                                      double cluster_spread, std::uint64_t seed) {
    if (!(cluster_spread > 0.0)) throw ParameterError("cluster_spread must be > 0");
    if (num_classes == 0 || dim == 0) throw ParameterError("num_classes and dim must be >= 1");

    Rng rng(derive_seed(seed, Stream::dataset));
    const double margin = std::min(3.0 * cluster_spread, 0.5);
    std::uniform_real_distribution<double> coord(margin, 1.0 - margin);
    const double min_sep = 6.0 * cluster_spread;

    std::vector<std::vector<double>> means;
    constexpr int kMaxTries = 100000;
    for (std::size_t c = 0; c < num_classes; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
            std::vector<double> m(dim);
            for (auto& v : m) v = coord(rng);
            placed = std::all_of(means.begin(), means.end(), [&](const auto& other) {
                double d2 = 0.0;
                for (std::size_t j = 0; j < dim; ++j) d2 += (m[j] - other[j]) * (m[j] - other[j]);
                return std::sqrt(d2) >= min_sep;
            });
            if (placed) means.push_back(std::move(m));
        }
        if (!placed) {
            throw ParameterError("cannot place " + std::to_string(num_classes) + " class means " +
                                 std::to_string(min_sep) + " apart in " + std::to_string(dim) + " dims");
        }
    }

    Dataset ds;
    ds.dim = dim;
    ds.num_classes = num_classes;
    ds.samples.reserve(num_classes * samples_per_class);
    std::normal_distribution<double> noise(0.0, cluster_spread);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            Sample s;
            s.label = c;
            s.features.resize(dim);
            for (std::size_t j = 0; j < dim; ++j) s.features[j] = std::clamp(means[c][j] + noise(rng), 0.0, 1.0);
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk format: meta.json, features.bin (f32 LE), labels.bin (u16 LE)

namespace detail {

template <typename T>
inline void write_le(std::ostream& os, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    const U bits = std::bit_cast<U>(value);
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(bytes, sizeof(U));
}

template <typename T>
inline T read_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("unexpected end of binary data");
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
    return std::bit_cast<T>(bits);
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::size_t count = ds.samples.size() + ds.unlabeled.size();
    {
        std::ofstream meta(dir / "meta.json");
        if (!meta) throw IoError("cannot write " + (dir / "meta.json").string());
        meta << nlohmann::json{{"dim", ds.dim}, {"num_classes", ds.num_classes}, {"count", count}}.dump(2) << '\n';
    }
    std::ofstream features(dir / "features.bin", std::ios::binary);
    std::ofstream labels(dir / "labels.bin", std::ios::binary);
    if (!features || !labels) throw IoError("cannot write dataset binaries in " + dir.string());
    for (const auto& s : ds.samples) {
        for (double v : s.features) detail::write_le(features, static_cast<float>(v));
        detail::write_le(labels, static_cast<std::uint16_t>(s.label));
    }
    for (const auto& u : ds.unlabeled) {
        for (double v : u) detail::write_le(features, static_cast<float>(v));
        detail::write_le(labels, kUnlabeled);
    }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw IoError("cannot read " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed meta.json: " + std::string(e.what()));
    }
    for (const char* key : {"dim", "num_classes", "count"}) {
        if (!meta.contains(key) || !meta[key].is_number_unsigned()) {
            throw IoError(std::string("meta.json: missing or invalid field '") + key + "'");
        }
    }
    Dataset ds;
    ds.dim = meta["dim"].get<std::size_t>();
    ds.num_classes = meta["num_classes"].get<std::size_t>();
    const auto count = meta["count"].get<std::size_t>();
    if (ds.dim == 0 || ds.num_classes == 0) throw IoError("meta.json: dim and num_classes must be >= 1");

    std::ifstream features(dir / "features.bin", std::ios::binary);
    std::ifstream labels(dir / "labels.bin", std::ios::binary);
    if (!features || !labels) throw IoError("cannot read dataset binaries in " + dir.string());
    const auto expect_size = [&](const std::filesystem::path& p, std::uintmax_t bytes) {
        if (std::filesystem::file_size(p) != bytes) {
            throw IoError(p.filename().string() + ": expected " + std::to_string(bytes) + " bytes, found " +
                          std::to_string(std::filesystem::file_size(p)));
        }
    };
    expect_size(dir / "features.bin", count * ds.dim * 4);
    expect_size(dir / "labels.bin", count * 2);

    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> x(ds.dim);
        for (auto& v : x) v = detail::read_le<float>(features);
        const auto label = detail::read_le<std::uint16_t>(labels);
        if (label == kUnlabeled) {
            ds.unlabeled.push_back(std::move(x));
        } else if (label >= ds.num_classes) {
            throw IoError("labels.bin: label " + std::to_string(label) + " at row " + std::to_string(i) +
                          " exceeds num_classes " + std::to_string(ds.num_classes));
        } else {
            ds.samples.push_back({std::move(x), label});
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Partitioners

namespace detail {

/// Stratified split of one class slice: the first round(n·test_fraction)
/// indices become test samples.
inline std::size_t test_share(std::size_t n, double test_fraction) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
}

inline void add_samples(ClientDataset& client, const Dataset& ds, std::span<const std::size_t> train,
                        std::span<const std::size_t> test) {
    for (auto i : train) {
        client.train.push_back(ds.samples[i]);
        client.train_indices.push_back(i);
        ++client.class_histogram[ds.samples[i].label];
    }
    for (auto i : test) {
        client.test.push_back(ds.samples[i]);
        client.test_indices.push_back(i);
    }
}

inline ClientDataset empty_client(std::size_t id, std::size_t num_classes) {
    ClientDataset c;
    c.client_id = id;
    c.class_histogram.assign(num_classes, 0);
    return c;
}

} // namespace detail

/// Quantity-based label skew: each client holds exactly `classes_per_client`
/// classes and exactly `samples_per_client` training samples, split evenly
/// across its classes. Test samples are drawn from the same classes in the
/// same proportions so that they make up `test_fraction` of the allocation.
/// Samples not handed out stay in a global remainder pool.
inline std::vector<ClientDataset> partition_quantity(const Dataset& ds, std::size_t num_clients,
                                                     std::size_t classes_per_client, std::size_t samples_per_client,
                                                     std::uint64_t seed, double test_fraction = 0.2) {
    const std::size_t k = ds.num_classes;
    if (num_clients == 0) throw ParameterError("num_clients must be >= 1");
    if (classes_per_client == 0 || classes_per_client > k) {
        throw ParameterError("classes_per_client must be in [1, " + std::to_string(k) + "]");
    }
    if (samples_per_client < classes_per_client) {
        throw ParameterError("samples_per_client must be >= classes_per_client");
    }
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ParameterError("test_fraction must be in [0, 1)");
    if (num_clients * samples_per_client > ds.samples.size()) {
        throw PartitionInfeasibleError("requested " + std::to_string(num_clients * samples_per_client) +
                                       " training samples but the dataset holds " + std::to_string(ds.samples.size()));
    }

    Rng rng(derive_seed(seed, Stream::partition, {0}));
    auto pools = ds.class_indices();
    for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
    std::vector<std::size_t> cursor(k, 0);

    // Consecutive windows over a shuffled class ring: distinct classes per
    // client, each class used by an equal share (±1) of clients.
    std::vector<std::size_t> ring(k);
    std::iota(ring.begin(), ring.end(), std::size_t{0});
    std::shuffle(ring.begin(), ring.end(), rng);
    const double test_ratio = test_fraction / (1.0 - test_fraction);

    std::vector<ClientDataset> clients;
    clients.reserve(num_clients);
    for (std::size_t c = 0; c < num_clients; ++c) {
        auto client = detail::empty_client(c, k);
        for (std::size_t j = 0; j < classes_per_client; ++j) {
            const std::size_t cls = ring[(c * classes_per_client + j) % k];
            const std::size_t n_train =
                samples_per_client / classes_per_client + (j < samples_per_client % classes_per_client ? 1 : 0);
            const std::size_t n_test = detail::test_share(n_train, test_ratio);
            if (cursor[cls] + n_train + n_test > pools[cls].size()) {
                throw PartitionInfeasibleError("class " + std::to_string(cls) + " has too few samples: client " +
                                               std::to_string(c) + " needs " + std::to_string(n_train + n_test) +
                                               ", " + std::to_string(pools[cls].size() - cursor[cls]) + " remain");
            }
            const std::span<const std::size_t> slice(pools[cls].data() + cursor[cls], n_train + n_test);
            detail::add_samples(client, ds, slice.subspan(n_test), slice.first(n_test));
            cursor[cls] += n_train + n_test;
        }
        clients.push_back(std::move(client));
    }
    return clients;
}

/// Dataset indices of labeled samples not allocated to any client.
inline std::vector<std::size_t> remainder_pool(const Dataset& ds, const std::vector<ClientDataset>& clients) {
    std::vector<bool> used(ds.samples.size(), false);
    for (const auto& c : clients) {
        for (auto i : c.train_indices) used[i] = true;
        for (auto i : c.test_indices) used[i] = true;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < used.size(); ++i)
        if (!used[i]) out.push_back(i);
    return out;
}

/// Dirichlet label skew: each class is split across clients with proportions
/// drawn from Dir(β·1). Every labeled sample lands on exactly one client. The
/// whole draw is repeated when any client ends up with fewer than
/// `min_train_samples` training samples (at most 100 attempts).
inline std::vector<ClientDataset> partition_dirichlet(const Dataset& ds, std::size_t num_clients, double concentration,
                                                      std::uint64_t seed, std::size_t min_train_samples = 1,
                                                      double test_fraction = 0.2) {
    if (!(concentration > 0.0)) throw ParameterError("Dirichlet concentration must be > 0");
    if (num_clients == 0) throw ParameterError("num_clients must be >= 1");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ParameterError("test_fraction must be in [0, 1)");

    constexpr int kMaxAttempts = 100;
    const auto base_pools = ds.class_indices();
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Rng rng(derive_seed(seed, Stream::partition, {1, static_cast<std::uint64_t>(attempt)}));
        std::gamma_distribution<double> gamma(concentration, 1.0);

        std::vector<ClientDataset> clients;
        for (std::size_t c = 0; c < num_clients; ++c) clients.push_back(detail::empty_client(c, ds.num_classes));

        for (auto pool : base_pools) {
            std::shuffle(pool.begin(), pool.end(), rng);
            std::vector<double> p(num_clients);
            double total = 0.0;
            for (auto& v : p) total += (v = gamma(rng));
            if (!(total > 0.0)) {
                // every gamma draw underflowed: the limit of Dir(β→0) is a single vertex
                std::fill(p.begin(), p.end(), 0.0);
                p[uniform_index(rng, num_clients)] = 1.0;
                total = 1.0;
            }
            const std::size_t n = pool.size();
            double cum = 0.0;
            std::size_t start = 0;
            for (std::size_t c = 0; c < num_clients; ++c) {
                cum += p[c] / total;
                const std::size_t end =
                    c + 1 == num_clients ? n : std::min(n, static_cast<std::size_t>(std::llround(cum * static_cast<double>(n))));
                if (end <= start) continue;
                const std::span<const std::size_t> slice(pool.data() + start, end - start);
                const std::size_t n_test = detail::test_share(slice.size(), test_fraction);
                detail::add_samples(clients[c], ds, slice.subspan(n_test), slice.first(n_test));
                start = end;
            }
        }

        const bool feasible = std::all_of(clients.begin(), clients.end(),
                                          [&](const ClientDataset& c) { return c.train.size() >= min_train_samples; });
        if (feasible) return clients;
    }
    throw PartitionInfeasibleError("Dirichlet partition left a client with fewer than " +
                                   std::to_string(min_train_samples) + " training samples after " +
                                   std::to_string(kMaxAttempts) + " draws");
}

/// Deals the dataset's unlabeled pool round-robin over a seeded shuffle.
inline void distribute_unlabeled(const Dataset& ds, std::vector<ClientDataset>& clients, std::uint64_t seed) {
    if (clients.empty() || ds.unlabeled.empty()) return;
    std::vector<std::size_t> order(ds.unlabeled.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, Stream::unlabeled));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) clients[i % clients.size()].unlabeled.push_back(ds.unlabeled[order[i]]);
}

// ---------------------------------------------------------------------------
// Augmentation

/// One stochastic view: random contiguous window resized back to full length
/// (crop), random coordinate masking (erasing), then Gaussian jitter.
inline std::vector<double> augment(std::span<const double> x, const AugmentationPolicy& policy, Rng& rng) {
    const std::size_t d = x.size();
    std::vector<double> out(x.begin(), x.end());
    if (d == 0) return out;

    const auto window = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(policy.crop_fraction * static_cast<double>(d))));
    if (window < d) {
        const std::size_t start = uniform_index(rng, d - window + 1);
        for (std::size_t i = 0; i < d; ++i) {
            const double pos = d == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(window - 1) / static_cast<double>(d - 1);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, window - 1);
            const double t = pos - static_cast<double>(lo);
            out[i] = (1.0 - t) * x[start + lo] + t * x[start + hi];
        }
    }
    if (policy.mask_prob > 0.0) {
        std::bernoulli_distribution drop(policy.mask_prob);
        for (auto& v : out)
            if (drop(rng)) v = 0.0;
    }
    if (policy.jitter_std > 0.0) {
        std::normal_distribution<double> noise(0.0, policy.jitter_std);
        for (auto& v : out) v += noise(rng);
    }
    return out;
}

/// Two independent views of the same sample.
inline std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> x,
                                                                        const AugmentationPolicy& policy, Rng& rng) {
    auto first = augment(x, policy, rng);
    auto second = augment(x, policy, rng);
    return {std::move(first), std::move(second)};
}

} // namespace calibre
