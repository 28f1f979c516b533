#ifndef CALAB_HARNESS_HPP
#define CALAB_HARNESS_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calab/calibration.hpp"
#include "calab/checkpoint.hpp"
#include "calab/data.hpp"
#include "calab/ensemble.hpp"
#include "calab/errors.hpp"
#include "calab/parallel.hpp"
#include "calab/strategy.hpp"

namespace calab {

enum class StrategyKind {
    none,
    mixup,
    label_smooth,
    augmix,
    augmixup,
    camixup,
    augcamixup,
    forgetting_camixup,
};

inline std::string strategy_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::none: return "none";
        case StrategyKind::mixup: return "mixup";
        case StrategyKind::label_smooth: return "label_smooth";
        case StrategyKind::augmix: return "augmix";
        case StrategyKind::augmixup: return "augmixup";
        case StrategyKind::camixup: return "camixup";
        case StrategyKind::augcamixup: return "augcamixup";
        case StrategyKind::forgetting_camixup: return "forgetting_camixup";
    }
    throw config_error("unknown strategy kind");
}

inline StrategyKind strategy_from_name(const std::string& name) {
    for (auto kind : {StrategyKind::none, StrategyKind::mixup, StrategyKind::label_smooth,
                      StrategyKind::augmix, StrategyKind::augmixup, StrategyKind::camixup,
                      StrategyKind::augcamixup, StrategyKind::forgetting_camixup})
        if (strategy_name(kind) == name) return kind;
    throw config_error("unknown strategy: " + name);
}

inline bool strategy_uses_policy(StrategyKind kind) {
    return kind == StrategyKind::camixup || kind == StrategyKind::augcamixup;
}

struct DatasetConfig {
    std::size_t n_clusters = 5;
    std::size_t samples_per_cluster = 120;
    std::size_t test_samples_per_cluster = 500;
    double val_fraction = 0.05;
    double ring_radius = 3.0;
    std::vector<double> radii;  // empty -> 0.2 .. 1.0 defaults

    ClusterSpec cluster_spec(std::size_t samples, std::uint64_t seed) const {
        ClusterSpec spec;
        spec.n_clusters = n_clusters;
        spec.centers = ring_centers(n_clusters, ring_radius);
        spec.radii = radii.empty() ? default_radii(n_clusters) : radii;
        spec.samples_per_cluster = samples;
        spec.seed = seed;
        return spec;
    }
};

struct StrategyConfig {
    StrategyKind kind = StrategyKind::none;
    double mixup_a = 1.0;
    double smooth_alpha = 0.1;
    int augmix_k = 3;
    double augmix_dirichlet_a = 1.0;
    double augmix_beta_a = 1.0;
    double augmix_intensity = 0.3;
    ConfDefinition conf_definition = ConfDefinition::max_prob;
};

struct MetricsConfig {
    int bins = 15;
    double tace_threshold = 0.01;
    bool fit_temperature = true;
};

struct ExperimentConfig {
    std::string name = "baseline";
    std::string output_dir = "out/baseline";
    DatasetConfig dataset;
    EnsembleMode ensemble_mode = EnsembleMode::deep;
    int ensemble_size = 4;
    StrategyConfig strategy;
    TrainConfig train;
    NetSpec net;
    MetricsConfig metrics;
    bool eval_corruptions = true;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    void validate() const {
        train.validate();
        if (seeds.empty()) throw config_error("ExperimentConfig: need at least one seed");
        if (ensemble_size < 1) throw config_error("ExperimentConfig: K must be >= 1");
        if (metrics.bins < 1) throw config_error("ExperimentConfig: bins must be >= 1");
        if (strategy.kind == StrategyKind::label_smooth &&
            (strategy.smooth_alpha < 0.0 || strategy.smooth_alpha >= 1.0))
            throw config_error("ExperimentConfig: smooth_alpha must be in [0,1)");
    }
};

// --- JSON (de)serialization with defaults -----------------------------------

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["name"] = c.name;
    j["output_dir"] = c.output_dir;
    j["dataset"] = {{"n_clusters", c.dataset.n_clusters},
                    {"samples_per_cluster", c.dataset.samples_per_cluster},
                    {"test_samples_per_cluster", c.dataset.test_samples_per_cluster},
                    {"val_fraction", c.dataset.val_fraction},
                    {"ring_radius", c.dataset.ring_radius},
                    {"radii", c.dataset.radii}};
    j["ensemble"] = {{"mode", ensemble_mode_name(c.ensemble_mode)}, {"size", c.ensemble_size}};
    j["strategy"] = {{"kind", strategy_name(c.strategy.kind)},
                     {"mixup_a", c.strategy.mixup_a},
                     {"smooth_alpha", c.strategy.smooth_alpha},
                     {"augmix_k", c.strategy.augmix_k},
                     {"augmix_dirichlet_a", c.strategy.augmix_dirichlet_a},
                     {"augmix_beta_a", c.strategy.augmix_beta_a},
                     {"augmix_intensity", c.strategy.augmix_intensity},
                     {"conf_definition", c.strategy.conf_definition == ConfDefinition::max_prob
                                             ? "max_prob"
                                             : "true_class_prob"}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"base_lr", c.train.base_lr},
                  {"lr_decay_ratio", c.train.lr_decay_ratio},
                  {"lr_decay_epochs", c.train.lr_decay_epochs},
                  {"momentum", c.train.momentum},
                  {"l2", c.train.l2},
                  {"batch_size", c.train.batch_size},
                  {"hidden", c.net.hidden},
                  {"dropout_rate", c.net.dropout_rate},
                  {"factor_init_std", c.net.factor_init_std}};
    j["metrics"] = {{"bins", c.metrics.bins},
                    {"tace_threshold", c.metrics.tace_threshold},
                    {"fit_temperature", c.metrics.fit_temperature}};
    j["eval_corruptions"] = c.eval_corruptions;
    j["seeds"] = c.seeds;
    return j;
}

template <typename T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    maybe_get(j, "name", c.name);
    maybe_get(j, "output_dir", c.output_dir);
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        maybe_get(d, "n_clusters", c.dataset.n_clusters);
        maybe_get(d, "samples_per_cluster", c.dataset.samples_per_cluster);
        maybe_get(d, "test_samples_per_cluster", c.dataset.test_samples_per_cluster);
        maybe_get(d, "val_fraction", c.dataset.val_fraction);
        maybe_get(d, "ring_radius", c.dataset.ring_radius);
        maybe_get(d, "radii", c.dataset.radii);
    }
    if (j.contains("ensemble")) {
        const auto& e = j.at("ensemble");
        if (e.contains("mode")) c.ensemble_mode = ensemble_mode_from_name(e.at("mode"));
        maybe_get(e, "size", c.ensemble_size);
    }
    if (j.contains("strategy")) {
        const auto& s = j.at("strategy");
        if (s.contains("kind")) c.strategy.kind = strategy_from_name(s.at("kind"));
        maybe_get(s, "mixup_a", c.strategy.mixup_a);
        maybe_get(s, "smooth_alpha", c.strategy.smooth_alpha);
        maybe_get(s, "augmix_k", c.strategy.augmix_k);
        maybe_get(s, "augmix_dirichlet_a", c.strategy.augmix_dirichlet_a);
        maybe_get(s, "augmix_beta_a", c.strategy.augmix_beta_a);
        maybe_get(s, "augmix_intensity", c.strategy.augmix_intensity);
        if (s.contains("conf_definition")) {
            const std::string cd = s.at("conf_definition");
            if (cd == "max_prob")
                c.strategy.conf_definition = ConfDefinition::max_prob;
            else if (cd == "true_class_prob")
                c.strategy.conf_definition = ConfDefinition::true_class_prob;
            else
                throw config_error("unknown conf_definition: " + cd);
        }
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        maybe_get(t, "epochs", c.train.epochs);
        maybe_get(t, "base_lr", c.train.base_lr);
        maybe_get(t, "lr_decay_ratio", c.train.lr_decay_ratio);
        maybe_get(t, "lr_decay_epochs", c.train.lr_decay_epochs);
        maybe_get(t, "momentum", c.train.momentum);
        maybe_get(t, "l2", c.train.l2);
        maybe_get(t, "batch_size", c.train.batch_size);
        maybe_get(t, "hidden", c.net.hidden);
        maybe_get(t, "dropout_rate", c.net.dropout_rate);
        maybe_get(t, "factor_init_std", c.net.factor_init_std);
    }
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        maybe_get(m, "bins", c.metrics.bins);
        maybe_get(m, "tace_threshold", c.metrics.tace_threshold);
        maybe_get(m, "fit_temperature", c.metrics.fit_temperature);
    }
    maybe_get(j, "eval_corruptions", c.eval_corruptions);
    maybe_get(j, "seeds", c.seeds);
    return c;
}

/// Dotted leaf keys mirrored as CLI flags (--train.epochs, ...).
inline const std::vector<std::pair<std::string, std::string>>& config_flag_keys() {
    static const std::vector<std::pair<std::string, std::string>> keys = {
        {"name", "run label used in comparison tables"},
        {"output_dir", "where records are written"},
        {"dataset.n_clusters", "number of Gaussian clusters / classes"},
        {"dataset.samples_per_cluster", "training-pool samples per cluster"},
        {"dataset.test_samples_per_cluster", "held-out test samples per cluster"},
        {"dataset.val_fraction", "stratified validation fraction"},
        {"dataset.ring_radius", "cluster-center ring radius"},
        {"dataset.radii", "per-cluster standard deviations (JSON list)"},
        {"ensemble.mode", "deep | mc_dropout | batch_ensemble"},
        {"ensemble.size", "ensemble size K"},
        {"strategy.kind", "none|mixup|label_smooth|augmix|augmixup|camixup|augcamixup|forgetting_camixup"},
        {"strategy.mixup_a", "Mixup Beta concentration"},
        {"strategy.smooth_alpha", "label smoothing coefficient"},
        {"strategy.augmix_k", "AugMix branch count"},
        {"strategy.augmix_dirichlet_a", "AugMix Dirichlet concentration"},
        {"strategy.augmix_beta_a", "AugMix Beta concentration"},
        {"strategy.augmix_intensity", "AugMix op intensity"},
        {"strategy.conf_definition", "max_prob | true_class_prob"},
        {"train.epochs", "training epochs"},
        {"train.base_lr", "base learning rate"},
        {"train.lr_decay_ratio", "step-schedule decay ratio"},
        {"train.lr_decay_epochs", "decay epochs (JSON list)"},
        {"train.momentum", "SGD momentum"},
        {"train.l2", "weight decay"},
        {"train.batch_size", "minibatch size"},
        {"train.hidden", "hidden layer widths (JSON list)"},
        {"train.dropout_rate", "dropout rate after hidden layers"},
        {"train.factor_init_std", "BatchEnsemble factor init std"},
        {"metrics.bins", "calibration bin count M"},
        {"metrics.tace_threshold", "TACE inclusion threshold"},
        {"metrics.fit_temperature", "fit temperature on validation"},
        {"eval_corruptions", "evaluate the corruption grid"},
        {"seeds", "seeds (JSON list)"},
    };
    return keys;
}

/// Sets a dotted-path key; the value string is parsed as JSON when possible,
/// else taken verbatim.
inline void apply_config_override(nlohmann::json& j, const std::string& dotted,
                                  const std::string& value) {
    std::string pointer = "/";
    for (char ch : dotted) pointer += ch == '.' ? '/' : ch;
    pointer.insert(0, "");
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
        parsed = value;
    }
    j[nlohmann::json::json_pointer(pointer)] = parsed;
}

/// FNV-1a of the canonical config dump, skipping fields that cannot change
/// any computed number (name, output directory).
inline std::string config_hash(const ExperimentConfig& config) {
    nlohmann::json j = config_to_json(config);
    j.erase("name");
    j.erase("output_dir");
    const std::string dump = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : dump) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << h;
    return hex.str();
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct CorruptedCell {
    CorruptionFamily family;
    int intensity = 0;
    double accuracy = 0.0;
    double ece = 0.0;
};

struct RunRecord {
    std::string config_hash;
    std::uint64_t seed = 0;
    bool aborted = false;
    std::string abort_reason;
    CalibrationReport clean;
    double acc_conf_gap = 0.0;  // accuracy - mean confidence on the test set
    std::optional<double> fitted_temperature;
    double val_nll_t1 = 0.0;
    double val_nll_fitted = 0.0;
    double test_ece_scaled = 0.0;
    std::vector<CorruptedCell> corrupted;
    double corrupted_accuracy = 0.0;  // cA: mean over families x intensities
    double corrupted_ece = 0.0;       // cE
    std::vector<double> member_initial_loss;
    std::vector<double> member_final_loss;
};

inline nlohmann::json record_to_json(const RunRecord& r) {
    nlohmann::json j;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    j["aborted"] = r.aborted;
    if (r.aborted) {
        j["abort_reason"] = r.abort_reason;
        return j;
    }
    j["clean"] = report_to_json(r.clean);
    j["clean"]["acc_conf_gap"] = r.acc_conf_gap;
    if (r.fitted_temperature) {
        j["temperature"] = {{"fitted", *r.fitted_temperature},
                            {"val_nll_t1", r.val_nll_t1},
                            {"val_nll_fitted", r.val_nll_fitted},
                            {"test_ece_scaled", r.test_ece_scaled}};
    } else {
        j["temperature"] = nullptr;
    }
    j["corrupted"] = nlohmann::json::array();
    for (const auto& cell : r.corrupted)
        j["corrupted"].push_back({{"family", corruption_name(cell.family)},
                                  {"intensity", cell.intensity},
                                  {"accuracy", cell.accuracy},
                                  {"ece", cell.ece}});
    if (!r.corrupted.empty())
        j["corrupted_aggregate"] = {{"accuracy", r.corrupted_accuracy}, {"ece", r.corrupted_ece}};
    j["train_loss"] = {{"initial", r.member_initial_loss}, {"final", r.member_final_loss}};
    return j;
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

inline StrategyFactory strategy_factory(const ExperimentConfig& config, std::size_t num_classes,
                                        std::size_t train_size, std::ostream* warnings = nullptr) {
    const StrategyConfig s = config.strategy;
    const AugmixParams augmix_params{default_opset(s.augmix_intensity), s.augmix_k,
                                     s.augmix_dirichlet_a, s.augmix_beta_a};
    switch (s.kind) {
        case StrategyKind::none:
            return [] { return std::make_unique<NoAugment>(); };
        case StrategyKind::mixup:
            return [s] { return std::make_unique<MixupStrategy>(s.mixup_a); };
        case StrategyKind::label_smooth:
            return [s] { return std::make_unique<LabelSmoothStrategy>(s.smooth_alpha); };
        case StrategyKind::augmix:
            return [augmix_params] { return std::make_unique<AugMixStrategy>(augmix_params); };
        case StrategyKind::augmixup:
            return [augmix_params, s] {
                return std::make_unique<AugMixupStrategy>(augmix_params, s.mixup_a);
            };
        case StrategyKind::camixup:
            return [s, num_classes, warnings] {
                return std::make_unique<CAMixupStrategy>(num_classes, s.mixup_a,
                                                         s.conf_definition, warnings);
            };
        case StrategyKind::augcamixup:
            return [s, num_classes, augmix_params, warnings] {
                return std::make_unique<AugCAMixupStrategy>(num_classes, s.mixup_a, augmix_params,
                                                            s.conf_definition, warnings);
            };
        case StrategyKind::forgetting_camixup:
            return [s, train_size] {
                return std::make_unique<ForgettingCAMixupStrategy>(train_size, s.mixup_a);
            };
    }
    throw config_error("unknown strategy kind");
}

struct SeedData {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
};

inline SeedData build_seed_data(const ExperimentConfig& config, std::uint64_t seed) {
    const auto pool = make_clusters(
        config.dataset.cluster_spec(config.dataset.samples_per_cluster, derive_seed(seed, "data")));
    auto parts = split(pool, config.dataset.val_fraction, derive_seed(seed, "split"));
    auto test = make_clusters(config.dataset.cluster_spec(config.dataset.test_samples_per_cluster,
                                                          derive_seed(seed, "test")));
    return {std::move(parts.train), std::move(parts.val), std::move(test)};
}

/// Trains and evaluates one (config, seed) cell. Everything downstream of the
/// seed is derived deterministically.
inline RunRecord run_seed(const ExperimentConfig& config, std::uint64_t seed,
                          EnsembleTrainOutput* trained_out = nullptr,
                          std::ostream* warnings = nullptr) {
    RunRecord record;
    record.config_hash = config_hash(config);
    record.seed = seed;

    const SeedData data = build_seed_data(config, seed);
    TrainConfig train_config = config.train;
    train_config.seed = derive_seed(seed, "train");

    EnsembleTrainOutput trained;
    try {
        trained = train_ensemble(config.ensemble_mode, config.ensemble_size, data.train, data.val,
                                 train_config, config.net,
                                 strategy_factory(config, data.train.num_classes,
                                                  data.train.size(), warnings));
    } catch (const divergence_error& e) {
        record.aborted = true;
        record.abort_reason = e.what();
        return record;
    }
    for (const auto& result : trained.results) {
        record.member_initial_loss.push_back(result.initial_loss());
        record.member_final_loss.push_back(result.final_loss());
    }

    RngStream predict_rng(derive_seed(seed, "predict-test"));
    const PredictionBatch test_preds = predict_ensemble(trained.model, data.test.x, predict_rng);
    record.clean = make_report(test_preds, data.test.labels, config.metrics.bins,
                               config.metrics.tace_threshold, config.strategy.conf_definition);
    record.acc_conf_gap = record.clean.accuracy - record.clean.mean_confidence;

    if (config.metrics.fit_temperature) {
        RngStream val_rng(derive_seed(seed, "predict-val"));
        const PredictionBatch val_preds = predict_ensemble(trained.model, data.val.x, val_rng);
        const Matrix val_scores = log_prob_scores(val_preds);
        const double t = temperature_fit(val_scores, data.val.labels);
        record.fitted_temperature = t;
        record.clean.fitted_temperature = t;
        record.val_nll_t1 = nll_at_temperature(val_scores, data.val.labels, 1.0);
        record.val_nll_fitted = nll_at_temperature(val_scores, data.val.labels, t);
        const PredictionBatch scaled = apply_temperature(log_prob_scores(test_preds), t);
        record.test_ece_scaled = ece(scaled, data.test.labels, config.metrics.bins);
    }

    if (config.eval_corruptions) {
        std::size_t cell_index = 0;
        for (auto family : all_corruption_families()) {
            for (int intensity = 1; intensity <= 5; ++intensity, ++cell_index) {
                CorruptionSpec spec{family, intensity, derive_seed(seed, "corrupt", cell_index)};
                const auto corrupted = corrupt(data.test, spec);
                RngStream cell_rng(derive_seed(seed, "predict-corrupt", cell_index));
                const auto preds = predict_ensemble(trained.model, corrupted.x, cell_rng);
                CorruptedCell cell;
                cell.family = family;
                cell.intensity = intensity;
                cell.accuracy = accuracy(preds, corrupted.labels);
                cell.ece = ece(preds, corrupted.labels, config.metrics.bins);
                record.corrupted.push_back(cell);
            }
        }
        for (const auto& cell : record.corrupted) {
            record.corrupted_accuracy += cell.accuracy / record.corrupted.size();
            record.corrupted_ece += cell.ece / record.corrupted.size();
        }
    }

    if (trained_out) *trained_out = std::move(trained);
    return record;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open for writing: " + path.string());
    out << content;
}

inline std::string policy_log_csv(const EnsembleTrainOutput& trained) {
    std::ostringstream out;
    out << "member,epoch,class,enabled\n";
    for (std::size_t k = 0; k < trained.strategies.size(); ++k)
        for (const auto& row : trained.strategies[k]->policy_log())
            out << k << ',' << row.epoch << ',' << row.cls << ',' << (row.enabled ? 1 : 0) << '\n';
    return out.str();
}

inline std::string coeff_log_csv(const EnsembleTrainOutput& trained) {
    std::ostringstream out;
    out << "member,epoch,example,coeff\n";
    out.precision(17);
    for (std::size_t k = 0; k < trained.strategies.size(); ++k)
        for (const auto& row : trained.strategies[k]->coeff_log())
            out << k << ',' << row.epoch << ',' << row.example << ',' << row.coeff << '\n';
    return out.str();
}

/// Runs every seed of the config (in parallel up to `workers`), writes
/// per-seed records plus logs under output_dir, and a manifest at the top.
inline std::vector<RunRecord> run(const ExperimentConfig& config,
                                  std::size_t workers = default_workers(),
                                  std::ostream* warnings = nullptr) {
    config.validate();
    namespace fs = std::filesystem;
    const fs::path out_dir(config.output_dir);
    fs::create_directories(out_dir);
    write_text_file(out_dir / "config.json", config_to_json(config).dump(2) + "\n");

    std::vector<RunRecord> records(config.seeds.size());
    std::vector<double> wall_clock(config.seeds.size(), 0.0);
    parallel_for(config.seeds.size(), workers, [&](std::size_t i) {
        const std::uint64_t seed = config.seeds[i];
        const auto started = std::chrono::steady_clock::now();
        EnsembleTrainOutput trained;
        records[i] = run_seed(config, seed, &trained, warnings);
        wall_clock[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                            .count();

        const fs::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
        fs::create_directories(seed_dir);
        write_text_file(seed_dir / "record.json", record_to_json(records[i]).dump(2) + "\n");
        if (!records[i].aborted) {
            write_text_file(seed_dir / "reliability.csv", reliability_csv(records[i].clean.bins));
            save_checkpoint(trained.model, (seed_dir / "checkpoint.json").string());
            if (strategy_uses_policy(config.strategy.kind))
                write_text_file(seed_dir / "policy_log.csv", policy_log_csv(trained));
            if (config.strategy.kind == StrategyKind::forgetting_camixup)
                write_text_file(seed_dir / "coeff_log.csv", coeff_log_csv(trained));
        }
    });

    nlohmann::json manifest;
    manifest["config"] = config_to_json(config);
    manifest["config_hash"] = config_hash(config);
    manifest["records"] = nlohmann::json::array();
    for (std::size_t i = 0; i < config.seeds.size(); ++i)
        manifest["records"].push_back(
            {{"seed", config.seeds[i]},
             {"path", "seed_" + std::to_string(config.seeds[i]) + "/record.json"},
             {"aborted", records[i].aborted},
             {"wall_clock_seconds", wall_clock[i]}});
    write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
    return records;
}

// ---------------------------------------------------------------------------
// Comparison and plot data
// ---------------------------------------------------------------------------

struct LoadedRun {
    std::string name;
    nlohmann::json config;
    std::filesystem::path dir;
    std::vector<nlohmann::json> records;  // non-aborted only
};

inline std::vector<LoadedRun> load_runs(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<fs::path> manifests;
    const fs::path root(dir);
    if (!fs::exists(root)) throw io_error("no such directory: " + dir);
    if (fs::exists(root / "manifest.json")) manifests.push_back(root / "manifest.json");
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
            manifests.push_back(entry.path() / "manifest.json");
    std::sort(manifests.begin(), manifests.end());

    std::vector<LoadedRun> runs;
    for (const auto& manifest_path : manifests) {
        std::ifstream in(manifest_path);
        nlohmann::json manifest;
        in >> manifest;
        LoadedRun run;
        run.config = manifest.at("config");
        run.name = run.config.at("name").get<std::string>();
        run.dir = manifest_path.parent_path();
        for (const auto& entry : manifest.at("records")) {
            if (entry.at("aborted").get<bool>()) continue;
            std::ifstream rec_in(run.dir / entry.at("path").get<std::string>());
            if (!rec_in) throw io_error("missing record listed in manifest");
            nlohmann::json record;
            rec_in >> record;
            run.records.push_back(std::move(record));
        }
        runs.push_back(std::move(run));
    }
    if (runs.empty()) throw io_error("no run manifests found under " + dir);
    return runs;
}

struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;
    bool present = false;
};

inline MetricSummary summarize(const std::vector<double>& values) {
    MetricSummary s;
    if (values.empty()) return s;
    s.present = true;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    for (double v : values) s.stddev += (v - s.mean) * (v - s.mean);
    s.stddev = values.size() > 1
                   ? std::sqrt(s.stddev / static_cast<double>(values.size() - 1))
                   : 0.0;
    return s;
}

inline const std::vector<std::string>& compare_metrics() {
    static const std::vector<std::string> metrics = {"accuracy", "ece", "ace",  "sce",
                                                     "tace",     "nll", "cA",   "cE"};
    return metrics;
}

inline std::map<std::string, MetricSummary> summarize_run(const LoadedRun& run) {
    std::map<std::string, std::vector<double>> values;
    for (const auto& record : run.records) {
        const auto& clean = record.at("clean").at("metrics");
        for (const auto& metric : {"accuracy", "ece", "ace", "sce", "tace", "nll"})
            values[metric].push_back(clean.at(metric).get<double>());
        if (record.contains("corrupted_aggregate")) {
            values["cA"].push_back(record.at("corrupted_aggregate").at("accuracy").get<double>());
            values["cE"].push_back(record.at("corrupted_aggregate").at("ece").get<double>());
        }
    }
    std::map<std::string, MetricSummary> out;
    for (const auto& metric : compare_metrics()) out[metric] = summarize(values[metric]);
    return out;
}

/// Per-strategy mean +/- std for every metric plus deltas vs the baseline
/// run; returns the aligned text table and writes compare.csv next to the
/// records.
inline std::string compare(const std::string& dir, const std::string& baseline_name) {
    const auto runs = load_runs(dir);
    for (const auto& run : runs)
        if (run.config.at("dataset") != runs.front().config.at("dataset"))
            throw config_error("compare: runs use different dataset specs");
    const auto baseline_it =
        std::find_if(runs.begin(), runs.end(),
                     [&](const LoadedRun& r) { return r.name == baseline_name; });
    if (baseline_it == runs.end())
        throw config_error("compare: baseline run not found: " + baseline_name);
    const auto baseline_summary = summarize_run(*baseline_it);

    std::ostringstream text, csv;
    csv << "strategy,metric,mean,std,delta_vs_baseline\n";
    text << std::left << std::setw(22) << "strategy";
    for (const auto& metric : compare_metrics()) text << std::setw(22) << metric;
    text << '\n';
    for (const auto& run : runs) {
        const auto summary = summarize_run(run);
        text << std::setw(22) << run.name;
        for (const auto& metric : compare_metrics()) {
            const auto& s = summary.at(metric);
            std::ostringstream cell;
            if (!s.present) {
                cell << "absent";
            } else {
                cell << std::fixed << std::setprecision(4) << s.mean << "+/-" << s.stddev;
                if (baseline_summary.at(metric).present) {
                    const double delta = s.mean - baseline_summary.at(metric).mean;
                    cell << " (" << (delta >= 0 ? "+" : "") << std::setprecision(4) << delta << ")";
                }
            }
            text << std::setw(22) << cell.str();
            csv << run.name << ',' << metric << ',';
            if (s.present) {
                csv << std::setprecision(17) << s.mean << ',' << s.stddev << ',';
                if (baseline_summary.at(metric).present)
                    csv << (s.mean - baseline_summary.at(metric).mean);
            } else {
                csv << ",,";
            }
            csv << '\n';
        }
        text << '\n';
    }
    write_text_file(std::filesystem::path(dir) / "compare.csv", csv.str());
    return text.str();
}

enum class PlotKind { reliability, shift_curve, policy_counts };

inline PlotKind plot_kind_from_name(const std::string& name) {
    if (name == "reliability") return PlotKind::reliability;
    if (name == "shift_curve") return PlotKind::shift_curve;
    if (name == "policy_counts") return PlotKind::policy_counts;
    throw config_error("unknown plot kind: " + name);
}

/// Emits a stable-schema CSV for the requested figure type; returns the
/// output path.
inline std::string emit_plot_data(const std::string& dir, PlotKind kind) {
    namespace fs = std::filesystem;
    const auto runs = load_runs(dir);
    std::ostringstream out;
    std::string filename;
    switch (kind) {
        case PlotKind::reliability: {
            filename = "plot_reliability.csv";
            out << "bin_mid,gap,count,strategy,seed\n";
            out.precision(17);
            for (const auto& run : runs)
                for (const auto& record : run.records) {
                    const auto& bins = record.at("clean").at("bins");
                    const std::uint64_t seed = record.at("seed").get<std::uint64_t>();
                    for (const auto& bin : bins) {
                        const std::size_t count = bin.at("count").get<std::size_t>();
                        const double gap =
                            count == 0 ? 0.0
                                       : bin.at("accuracy").get<double>() -
                                             bin.at("confidence").get<double>();
                        const double mid =
                            (bin.at("lo").get<double>() + bin.at("hi").get<double>()) / 2.0;
                        out << mid << ',' << gap << ',' << count << ',' << run.name << ','
                            << seed << '\n';
                    }
                }
            break;
        }
        case PlotKind::shift_curve: {
            filename = "plot_shift_curve.csv";
            out << "intensity";
            for (const auto& run : runs) out << ',' << run.name << "_acc," << run.name << "_ece";
            out << '\n';
            out.precision(17);
            for (int intensity = 0; intensity <= 5; ++intensity) {
                out << intensity;
                for (const auto& run : runs) {
                    std::vector<double> accs, eces;
                    for (const auto& record : run.records) {
                        if (intensity == 0) {
                            accs.push_back(record.at("clean").at("metrics").at("accuracy"));
                            eces.push_back(record.at("clean").at("metrics").at("ece"));
                        } else if (record.contains("corrupted")) {
                            for (const auto& cell : record.at("corrupted"))
                                if (cell.at("intensity").get<int>() == intensity) {
                                    accs.push_back(cell.at("accuracy"));
                                    eces.push_back(cell.at("ece"));
                                }
                        }
                    }
                    out << ',' << summarize(accs).mean << ',' << summarize(eces).mean;
                }
                out << '\n';
            }
            break;
        }
        case PlotKind::policy_counts: {
            filename = "plot_policy_counts.csv";
            out << "strategy,seed,member,class,epochs_enabled\n";
            for (const auto& run : runs) {
                for (const auto& record : run.records) {
                    const std::uint64_t seed = record.at("seed").get<std::uint64_t>();
                    const fs::path log_path =
                        run.dir / ("seed_" + std::to_string(seed)) / "policy_log.csv";
                    if (!fs::exists(log_path)) continue;
                    std::ifstream log(log_path);
                    std::string line;
                    std::getline(log, line);  // header
                    std::map<std::pair<int, int>, int> counts;
                    while (std::getline(log, line)) {
                        if (line.empty()) continue;
                        int member, epoch, cls, enabled;
                        if (std::sscanf(line.c_str(), "%d,%d,%d,%d", &member, &epoch, &cls,
                                        &enabled) == 4 &&
                            enabled)
                            counts[{member, cls}] += 1;
                    }
                    for (const auto& [key, count] : counts)
                        out << run.name << ',' << seed << ',' << key.first << ',' << key.second
                            << ',' << count << '\n';
                }
            }
            break;
        }
    }
    const fs::path out_path = fs::path(dir) / filename;
    write_text_file(out_path, out.str());
    return out_path.string();
}

} // namespace calab

#endif // CALAB_HARNESS_HPP
