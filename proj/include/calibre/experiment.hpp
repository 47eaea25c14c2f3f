#pragma once

// Experiment configuration, the end-to-end pipeline and report files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "calibre/calibre_loss.hpp"
#include "calibre/data.hpp"
#include "calibre/errors.hpp"
#include "calibre/federated.hpp"
#include "calibre/format.hpp"
#include "calibre/model.hpp"
#include "calibre/personalization.hpp"

namespace calibre {

using nlohmann::json;

struct SyntheticSource {
    std::size_t num_classes = 10;
    std::size_t dim = 32;
    std::size_t samples_per_class = 600;
    double cluster_spread = 0.05;

    bool operator==(const SyntheticSource&) const = default;
};

struct FileSource {
    std::string path;

    bool operator==(const FileSource&) const = default;
};

struct QuantityPartition {
    std::size_t classes_per_client = 2;
    std::size_t samples_per_client = 500;

    bool operator==(const QuantityPartition&) const = default;
};

struct DirichletPartition {
    double concentration = 0.3;

    bool operator==(const DirichletPartition&) const = default;
};

struct ExperimentConfig {
    std::variant<SyntheticSource, FileSource> dataset;
    std::variant<QuantityPartition, DirichletPartition> partition = DirichletPartition{};
    double test_fraction = 0.2;
    std::size_t novel_clients = 50;
    std::vector<std::size_t> encoder_hidden{64};
    std::size_t embedding_dim = 32;
    AugmentationPolicy augmentation;
    TrainingConfig training;
    CalibreConfig calibre;
    HeadConfig personalization;
    bool local_only_baseline = true;
    bool export_embeddings = true;
    std::string output_dir = "calibre_out";
    std::uint64_t seed = 0;

    bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Enum spellings

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<Aggregation> {
    static constexpr std::pair<Aggregation, const char*> values[] = {{Aggregation::fedavg, "fedavg"},
                                                                     {Aggregation::divergence_weighted, "divergence-weighted"}};
};
template <>
struct EnumNames<LnKernel> {
    static constexpr std::pair<LnKernel, const char*> values[] = {{LnKernel::dot_infonce, "dot-infonce"},
                                                                  {LnKernel::dot_strict, "dot-strict"},
                                                                  {LnKernel::neg_euclidean_softmax, "neg-euclidean-softmax"}};
};
template <>
struct EnumNames<SslLoss> {
    static constexpr std::pair<SslLoss, const char*> values[] = {{SslLoss::ntxent, "ntxent"},
                                                                 {SslLoss::cosine_pair, "cosine-pair"}};
};
template <>
struct EnumNames<Method> {
    static constexpr std::pair<Method, const char*> values[] = {{Method::calibre, "calibre"}, {Method::pfl_ssl, "pfl-ssl"}};
};

template <typename E>
std::string enum_name(E e) {
    for (const auto& [v, name] : EnumNames<E>::values)
        if (v == e) return name;
    return "?";
}

template <typename E>
E enum_from(const std::string& s, const std::string& field) {
    std::string options;
    for (const auto& [v, name] : EnumNames<E>::values) {
        if (s == name) return v;
        options += options.empty() ? name : std::string(", ") + name;
    }
    throw ConfigError(field + ": unknown value '" + s + "' (expected one of " + options + ")");
}

// Values built in code are stored as signed even when they are positive.
inline bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Reads one JSON object, remembering which keys were consumed so that
/// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError((path_.empty() ? std::string("config") : path_) + " must be an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <typename T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError(field(key) + " must be a boolean");
                out = v.get<bool>();
            } else if constexpr (std::is_integral_v<T>) {
                if (!non_negative_integer(v)) throw ConfigError(field(key) + " must be a non-negative integer");
                out = v.get<T>();
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError(field(key) + " must be a number");
                out = v.get<T>();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError(field(key) + " must be a string");
                out = v.get<std::string>();
            } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
                if (!v.is_array()) throw ConfigError(field(key) + " must be an array of non-negative integers");
                for (const auto& e : v)
                    if (!non_negative_integer(e)) throw ConfigError(field(key) + " must be an array of non-negative integers");
                out = v.get<T>();
            } else {
                out = v.get<T>();
            }
        } catch (const json::exception& e) {
            throw ConfigError(field(key) + ": " + e.what());
        }
    }

    template <typename E>
    void get_enum(const char* key, E& out) {
        std::string s;
        if (!j_.contains(key)) return;
        get(key, s);
        out = enum_from<E>(s, field(key));
    }

    Section sub(const char* key) {
        seen_.insert(key);
        return Section(j_.at(key), field(key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown key '" + field(k.c_str()) + "'");
    }

    std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    if (const auto* s = std::get_if<SyntheticSource>(&c.dataset)) {
        j["dataset"] = {{"synthetic",
                         {{"num_classes", s->num_classes},
                          {"dim", s->dim},
                          {"samples_per_class", s->samples_per_class},
                          {"cluster_spread", s->cluster_spread}}}};
    } else {
        j["dataset"] = {{"path", std::get<FileSource>(c.dataset).path}};
    }
    if (const auto* q = std::get_if<QuantityPartition>(&c.partition)) {
        j["partition"] = {{"kind", "quantity"},
                          {"classes_per_client", q->classes_per_client},
                          {"samples_per_client", q->samples_per_client},
                          {"test_fraction", c.test_fraction}};
    } else {
        j["partition"] = {{"kind", "dirichlet"},
                          {"concentration", std::get<DirichletPartition>(c.partition).concentration},
                          {"test_fraction", c.test_fraction}};
    }
    j["novel_clients"] = c.novel_clients;
    j["model"] = {{"encoder_hidden", c.encoder_hidden}, {"embedding_dim", c.embedding_dim}};
    j["augmentation"] = {{"jitter_std", c.augmentation.jitter_std},
                         {"mask_prob", c.augmentation.mask_prob},
                         {"crop_fraction", c.augmentation.crop_fraction}};
    const auto& t = c.training;
    j["training"] = {{"num_clients", t.num_clients},
                     {"rounds", t.rounds},
                     {"clients_per_round", t.clients_per_round},
                     {"local_epochs", t.local_epochs},
                     {"batch_size", t.batch_size},
                     {"learning_rate", t.learning_rate},
                     {"aggregation", detail::enum_name(t.aggregation)},
                     {"divergence_temperature", t.divergence_temperature},
                     {"checkpoint_every", t.checkpoint_every},
                     {"workers", t.workers}};
    const auto& k = c.calibre;
    j["calibre"] = {{"method", detail::enum_name(k.method)},
                    {"ssl_loss", detail::enum_name(k.ssl_loss)},
                    {"alpha", k.alpha},
                    {"clusters", k.clusters},
                    {"temperature", k.temperature},
                    {"proto_temperature", k.proto_temperature},
                    {"ln_kernel", detail::enum_name(k.ln_kernel)},
                    {"use_ln", k.use_ln},
                    {"use_lp", k.use_lp}};
    j["personalization"] = {{"epochs", c.personalization.epochs},
                            {"learning_rate", c.personalization.learning_rate},
                            {"batch_size", c.personalization.batch_size},
                            {"local_only_baseline", c.local_only_baseline},
                            {"export_embeddings", c.export_embeddings}};
    return j;
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

/// Validates every cross-field invariant; throws ConfigError naming the field.
inline void validate(const ExperimentConfig& c) {
    try {
        c.augmentation.validate();
        c.training.validate();
        c.calibre.validate();
        c.personalization.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
        throw ConfigError("partition.test_fraction must be in (0, 1)");
    }
    if (c.embedding_dim < 2) throw ConfigError("model.embedding_dim must be >= 2");
    for (auto h : c.encoder_hidden)
        if (h == 0) throw ConfigError("model.encoder_hidden entries must be >= 1");
    if (const auto* s = std::get_if<SyntheticSource>(&c.dataset)) {
        if (s->num_classes == 0 || s->dim == 0 || s->samples_per_class == 0) {
            throw ConfigError("dataset.synthetic: num_classes, dim and samples_per_class must be >= 1");
        }
        if (!(s->cluster_spread > 0.0)) throw ConfigError("dataset.synthetic.cluster_spread must be > 0");
    } else {
        const auto& p = std::get<FileSource>(c.dataset).path;
        if (!std::filesystem::is_directory(p)) throw ConfigError("dataset.path: directory '" + p + "' does not exist");
    }
    if (const auto* q = std::get_if<QuantityPartition>(&c.partition)) {
        if (q->classes_per_client == 0) throw ConfigError("partition.classes_per_client must be >= 1");
        if (q->samples_per_client < c.training.batch_size) {
            throw ConfigError("partition.samples_per_client must be >= training.batch_size");
        }
    } else if (!(std::get<DirichletPartition>(c.partition).concentration > 0.0)) {
        throw ConfigError("partition.concentration must be > 0");
    }
    const std::size_t batch = c.training.batch_size;
    if (batch < std::max<std::size_t>(2, c.calibre.clusters_for(batch))) {
        throw ConfigError("training.batch_size must be >= max(2, calibre.clusters)");
    }
}

/// Parses a config document; missing keys keep their defaults. Relative
/// dataset paths resolve against `base_dir`.
inline ExperimentConfig parse_config_json(const json& root, const std::filesystem::path& base_dir = {}) {
    ExperimentConfig c;
    detail::Section top(root, "");
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    top.get("novel_clients", c.novel_clients);

    if (!top.has("dataset")) throw ConfigError("missing required key 'dataset'");
    {
        auto ds = top.sub("dataset");
        if (ds.has("synthetic") == ds.has("path")) {
            throw ConfigError("dataset must name exactly one of 'synthetic' or 'path'");
        }
        if (ds.has("synthetic")) {
            SyntheticSource s;
            auto syn = ds.sub("synthetic");
            syn.get("num_classes", s.num_classes);
            syn.get("dim", s.dim);
            syn.get("samples_per_class", s.samples_per_class);
            syn.get("cluster_spread", s.cluster_spread);
            syn.finish();
            c.dataset = s;
        } else {
            FileSource f;
            ds.get("path", f.path);
            std::filesystem::path p(f.path);
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            f.path = p.lexically_normal().string();
            c.dataset = f;
        }
        ds.finish();
    }
    if (top.has("partition")) {
        auto p = top.sub("partition");
        std::string kind = "dirichlet";
        p.get("kind", kind);
        p.get("test_fraction", c.test_fraction);
        if (kind == "quantity") {
            QuantityPartition q;
            p.get("classes_per_client", q.classes_per_client);
            p.get("samples_per_client", q.samples_per_client);
            c.partition = q;
        } else if (kind == "dirichlet") {
            DirichletPartition d;
            p.get("concentration", d.concentration);
            c.partition = d;
        } else {
            throw ConfigError("partition.kind: unknown value '" + kind + "' (expected quantity or dirichlet)");
        }
        p.finish();
    }
    if (top.has("model")) {
        auto m = top.sub("model");
        m.get("encoder_hidden", c.encoder_hidden);
        m.get("embedding_dim", c.embedding_dim);
        m.finish();
    }
    if (top.has("augmentation")) {
        auto a = top.sub("augmentation");
        a.get("jitter_std", c.augmentation.jitter_std);
        a.get("mask_prob", c.augmentation.mask_prob);
        a.get("crop_fraction", c.augmentation.crop_fraction);
        a.finish();
    }
    if (top.has("training")) {
        auto t = top.sub("training");
        auto& tc = c.training;
        t.get("num_clients", tc.num_clients);
        t.get("rounds", tc.rounds);
        t.get("clients_per_round", tc.clients_per_round);
        t.get("local_epochs", tc.local_epochs);
        t.get("batch_size", tc.batch_size);
        t.get("learning_rate", tc.learning_rate);
        t.get_enum("aggregation", tc.aggregation);
        t.get("divergence_temperature", tc.divergence_temperature);
        t.get("checkpoint_every", tc.checkpoint_every);
        t.get("workers", tc.workers);
        t.finish();
    }
    if (top.has("calibre")) {
        auto k = top.sub("calibre");
        auto& kc = c.calibre;
        k.get_enum("method", kc.method);
        k.get_enum("ssl_loss", kc.ssl_loss);
        k.get("alpha", kc.alpha);
        k.get("clusters", kc.clusters);
        k.get("temperature", kc.temperature);
        k.get("proto_temperature", kc.proto_temperature);
        k.get_enum("ln_kernel", kc.ln_kernel);
        k.get("use_ln", kc.use_ln);
        k.get("use_lp", kc.use_lp);
        k.finish();
    }
    if (top.has("personalization")) {
        auto p = top.sub("personalization");
        p.get("epochs", c.personalization.epochs);
        p.get("learning_rate", c.personalization.learning_rate);
        p.get("batch_size", c.personalization.batch_size);
        p.get("local_only_baseline", c.local_only_baseline);
        p.get("export_embeddings", c.export_embeddings);
        p.finish();
    }
    top.finish();

    c.training.seed = c.seed;
    c.personalization.seed = derive_seed(c.seed, Stream::personalization);
    validate(c);
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {}) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return parse_config_json(root, base_dir);
}

/// Sets a dot-path key ("training.rounds") in a config document. The value is
/// read as JSON when it parses, otherwise as a string.
inline void apply_override(json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &root;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = json::object();
    }
    if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
    (*node)[parts.back()] = value;
}

/// "ln,lp", "ln", "lp" or "none": which prototype regularizers stay on.
inline void apply_ablation(json& root, const std::string& terms) {
    bool ln = false, lp = false;
    std::stringstream ss(terms);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "ln") {
            ln = true;
        } else if (item == "lp") {
            lp = true;
        } else if (item != "none" && !item.empty()) {
            throw ConfigError("--ablation: unknown term '" + item + "' (expected ln, lp or none)");
        }
    }
    root["calibre"]["use_ln"] = ln;
    root["calibre"]["use_lp"] = lp;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    return parse_config_json(read_json_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const FairnessStats& s) {
    return {{"count", s.count}, {"mean", s.mean}, {"variance", s.variance}, {"std", s.std}};
}

inline json to_json(const RoundReport& r) {
    json clients = json::array();
    for (const auto& c : r.per_client) {
        clients.push_back({{"client_id", c.client_id},
                           {"l_s", c.loss.l_s},
                           {"l_p", c.loss.l_p},
                           {"l_n", c.loss.l_n},
                           {"loss", c.loss.total},
                           {"divergence", c.divergence},
                           {"samples", c.samples}});
    }
    return {{"round", r.round},
            {"selected_clients", r.selected_clients},
            {"aggregation_weights", r.aggregation_weights},
            {"clients", clients}};
}

inline json to_json(const PersonalizationReport& p) {
    json clients = json::array();
    for (const auto& c : p.clients) {
        json row{{"client_id", c.client_id}, {"split", to_string(c.split)}, {"accuracy", c.accuracy}};
        if (c.local_only) row["local_only_accuracy"] = *c.local_only;
        clients.push_back(std::move(row));
    }
    json out{{"clients", clients},
             {"participants", to_json(p.participants)},
             {"novel", to_json(p.novel)},
             {"combined", to_json(p.combined)}};
    if (p.local_only) out["local_only"] = to_json(*p.local_only);
    return out;
}

inline json metrics_json(const ExperimentConfig& config, const std::vector<RoundReport>& rounds,
                         const PersonalizationReport& personalization) {
    json r = json::array();
    for (const auto& rep : rounds) r.push_back(to_json(rep));
    return {{"config", to_json(config)}, {"rounds", r}, {"personalization", to_json(personalization)}};
}

inline std::string accuracies_csv(const PersonalizationReport& p) {
    std::string out = "client_id,split,accuracy\n";
    for (const auto& c : p.clients)
        out += std::to_string(c.client_id) + "," + to_string(c.split) + "," + format_double(c.accuracy) + "\n";
    return out;
}

namespace detail {

inline std::filesystem::path write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
    return path;
}

} // namespace detail

/// Writes metrics.json and accuracies.csv into `outdir`.
inline std::vector<std::filesystem::path> emit_reports(const ExperimentConfig& config,
                                                       const std::vector<RoundReport>& rounds,
                                                       const PersonalizationReport& personalization,
                                                       const std::filesystem::path& outdir) {
    std::error_code ec;
    std::filesystem::create_directories(outdir, ec);
    if (ec) throw IoError("cannot create output directory " + outdir.string() + ": " + ec.message());
    return {detail::write_text(outdir / "metrics.json", metrics_json(config, rounds, personalization).dump(2) + "\n"),
            detail::write_text(outdir / "accuracies.csv", accuracies_csv(personalization))};
}

// ---------------------------------------------------------------------------
// Pipeline

struct ExperimentOutcome {
    int exit_code = 0;
    std::string failed_stage;
    std::string error;
    GlobalModel initial_model;
    TrainingResult training;
    PersonalizationReport personalization;
    std::vector<std::filesystem::path> artifacts;
};

inline Dataset load_experiment_dataset(const ExperimentConfig& c) {
    if (const auto* s = std::get_if<SyntheticSource>(&c.dataset)) {
        return make_synthetic_dataset(s->num_classes, s->dim, s->samples_per_class, s->cluster_spread, c.seed);
    }
    return load_dataset(std::get<FileSource>(c.dataset).path);
}

/// Participants first (ids [0, num_clients)), then novel clients.
inline std::vector<ClientDataset> partition_experiment(const ExperimentConfig& c, const Dataset& ds) {
    const std::size_t total = c.training.num_clients + c.novel_clients;
    std::vector<ClientDataset> clients;
    if (const auto* q = std::get_if<QuantityPartition>(&c.partition)) {
        clients = partition_quantity(ds, total, q->classes_per_client, q->samples_per_client, c.seed, c.test_fraction);
    } else {
        clients = partition_dirichlet(ds, total, std::get<DirichletPartition>(c.partition).concentration, c.seed,
                                      std::max<std::size_t>(c.training.batch_size, 1), c.test_fraction);
    }
    std::vector<ClientDataset> participants(clients.begin(),
                                            clients.begin() + static_cast<std::ptrdiff_t>(c.training.num_clients));
    distribute_unlabeled(ds, participants, c.seed);
    std::move(participants.begin(), participants.end(), clients.begin());
    return clients;
}

/// Runs both stages and writes every artifact into config.output_dir. A
/// failing stage yields a nonzero exit code and a status.json naming it.
inline ExperimentOutcome run_experiment(const ExperimentConfig& config) {
    ExperimentOutcome out;
    const std::filesystem::path outdir = config.output_dir;
    std::string stage = "setup";
    try {
        validate(config);
        std::filesystem::create_directories(outdir);

        stage = "data";
        const auto dataset = load_experiment_dataset(config);
        auto clients = partition_experiment(config, dataset);
        const std::vector<ClientDataset> participants(clients.begin(),
                                                      clients.begin() + static_cast<std::ptrdiff_t>(config.training.num_clients));
        const std::vector<ClientDataset> novel(clients.begin() + static_cast<std::ptrdiff_t>(config.training.num_clients),
                                               clients.end());

        stage = "training";
        out.initial_model = make_model({dataset.dim, config.encoder_hidden, config.embedding_dim}, config.seed);
        out.training = run_training_stage(out.initial_model, participants, config.training, config.calibre,
                                          config.augmentation, outdir / "checkpoints");
        out.artifacts.insert(out.artifacts.end(), out.training.checkpoints.begin(), out.training.checkpoints.end());

        stage = "personalization";
        PersonalizationOptions opts{config.personalization, config.local_only_baseline};
        out.personalization = run_personalization_stage(out.training.model, dataset.num_classes, participants, novel, opts);

        stage = "reports";
        if (config.export_embeddings) {
            for (const auto& c : clients)
                out.artifacts.push_back(write_embeddings_csv(outdir / "embeddings", c, out.training.model.encoder));
        }
        for (auto& p : emit_reports(config, out.training.reports, out.personalization, outdir)) out.artifacts.push_back(p);
    } catch (const std::exception& e) {
        out.exit_code = 1;
        out.failed_stage = stage;
        out.error = e.what();
    }

    json status{{"status", out.exit_code == 0 ? "ok" : "failed"}, {"partial", out.exit_code != 0}};
    if (out.exit_code != 0) {
        status["stage"] = out.failed_stage;
        status["error"] = out.error;
    }
    json artifacts = json::array();
    for (const auto& p : out.artifacts) artifacts.push_back(p.lexically_relative(outdir).generic_string());
    status["artifacts"] = artifacts;
    try {
        std::filesystem::create_directories(outdir);
        detail::write_text(outdir / "status.json", status.dump(2) + "\n");
    } catch (const std::exception& e) {
        if (out.exit_code == 0) {
            out.exit_code = 1;
            out.failed_stage = "reports";
            out.error = e.what();
        }
    }
    return out;
}

struct AblationRow {
    bool use_ln = false;
    bool use_lp = false;
    FairnessStats participants;
    FairnessStats combined;
    int exit_code = 0;
};

/// The four {L_n, L_p} on/off combinations, each in its own subdirectory,
/// summarized in `ablation.csv`.
inline std::vector<AblationRow> run_ablation_sweep(const ExperimentConfig& base) {
    std::vector<AblationRow> rows;
    const std::filesystem::path outdir = base.output_dir;
    for (bool ln : {false, true})
        for (bool lp : {false, true}) {
            ExperimentConfig c = base;
            c.calibre.use_ln = ln;
            c.calibre.use_lp = lp;
            c.output_dir = (outdir / (std::string("ln") + (ln ? "1" : "0") + "_lp" + (lp ? "1" : "0"))).string();
            const auto res = run_experiment(c);
            rows.push_back({ln, lp, res.personalization.participants, res.personalization.combined, res.exit_code});
        }
    std::string csv = "use_ln,use_lp,participant_mean,participant_variance,combined_mean,combined_variance,exit_code\n";
    for (const auto& r : rows) {
        csv += std::string(r.use_ln ? "1" : "0") + "," + (r.use_lp ? "1" : "0") + "," + format_double(r.participants.mean) +
               "," + format_double(r.participants.variance) + "," + format_double(r.combined.mean) + "," +
               format_double(r.combined.variance) + "," + std::to_string(r.exit_code) + "\n";
    }
    std::filesystem::create_directories(outdir);
    detail::write_text(outdir / "ablation.csv", csv);
    return rows;
}

} // namespace calibre
