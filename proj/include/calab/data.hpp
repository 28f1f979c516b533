#ifndef CALAB_DATA_HPP
#define CALAB_DATA_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "calab/errors.hpp"
#include "calab/matrix.hpp"
#include "calab/net.hpp"
#include "calab/rng.hpp"

namespace calab {

struct LabeledDataset {
    Matrix x;                 // (N x d)
    std::vector<int> labels;  // hard labels in [0, num_classes)
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return x.cols(); }
};

/// Isotropic Gaussian clusters in the plane, one class per cluster.
struct ClusterSpec {
    std::size_t n_clusters = 5;
    std::vector<std::array<double, 2>> centers;  // defaults to a ring if empty
    std::vector<double> radii;                   // per-cluster standard deviation
    std::size_t samples_per_cluster = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_clusters == 0) throw config_error("ClusterSpec: need at least one cluster");
        if (samples_per_cluster == 0) throw config_error("ClusterSpec: empty clusters");
        if (!centers.empty() && centers.size() != n_clusters)
            throw config_error("ClusterSpec: centers length mismatch");
        if (!radii.empty()) {
            if (radii.size() != n_clusters) throw config_error("ClusterSpec: radii length mismatch");
            for (double r : radii)
                if (r < 0.0) throw config_error("ClusterSpec: negative radius");
        }
    }
};

/// Default layout: centers on a ring of radius 3, radii 0.2 .. 1.0.
inline std::vector<std::array<double, 2>> ring_centers(std::size_t n, double ring_radius = 3.0) {
    std::vector<std::array<double, 2>> centers(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double angle = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n);
        centers[i] = {ring_radius * std::cos(angle), ring_radius * std::sin(angle)};
    }
    return centers;
}

inline std::vector<double> default_radii(std::size_t n) {
    std::vector<double> radii(n);
    for (std::size_t i = 0; i < n; ++i)
        radii[i] = 0.2 * static_cast<double>(i + 1);
    return radii;
}

inline LabeledDataset make_clusters(const ClusterSpec& spec) {
    spec.validate();
    const auto centers = spec.centers.empty() ? ring_centers(spec.n_clusters) : spec.centers;
    const auto radii = spec.radii.empty() ? default_radii(spec.n_clusters) : spec.radii;
    RngStream rng(spec.seed);

    LabeledDataset ds;
    ds.num_classes = spec.n_clusters;
    const std::size_t n = spec.n_clusters * spec.samples_per_cluster;
    ds.x = Matrix(n, 2);
    ds.labels.resize(n);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.n_clusters; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_cluster; ++s, ++row) {
            ds.x(row, 0) = centers[c][0] + radii[c] * rng.normal();
            ds.x(row, 1) = centers[c][1] + radii[c] * rng.normal();
            ds.labels[row] = static_cast<int>(c);
        }
    }
    return ds;
}

inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices) {
    LabeledDataset out;
    out.num_classes = ds.num_classes;
    out.x = Matrix(indices.size(), ds.dim());
    out.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy(ds.x.row(indices[i]), ds.x.row(indices[i]) + ds.dim(), out.x.row(i));
        out.labels[i] = ds.labels[indices[i]];
    }
    return out;
}

struct TrainValSplit {
    LabeledDataset train;
    LabeledDataset val;
};

/// Disjoint, exhaustive, class-stratified split; the validation share of each
/// class is floor(class_size * val_fraction).
inline TrainValSplit split(const LabeledDataset& ds, double val_fraction, std::uint64_t seed) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw config_error("split: val_fraction must be in (0,1)");
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

    RngStream rng(seed);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        if (members.empty()) continue;
        const auto perm = rng.permutation(members.size());
        const auto n_val = static_cast<std::size_t>(
            std::floor(static_cast<double>(members.size()) * val_fraction + 1e-9));
        if (n_val == 0)
            throw config_error("split: class " + std::to_string(c) +
                               " would have no validation examples");
        if (n_val == members.size())
            throw config_error("split: class " + std::to_string(c) +
                               " would have no training examples");
        for (std::size_t i = 0; i < members.size(); ++i)
            (i < n_val ? val_idx : train_idx).push_back(members[perm[i]]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {subset(ds, train_idx), subset(ds, val_idx)};
}

// ---------------------------------------------------------------------------
// Corruption benchmark
// ---------------------------------------------------------------------------

enum class CorruptionFamily {
    gaussian_noise,
    rotation,
    coordinate_scale,
    translation,
    feature_dropout,
};

inline const std::vector<CorruptionFamily>& all_corruption_families() {
    static const std::vector<CorruptionFamily> families = {
        CorruptionFamily::gaussian_noise, CorruptionFamily::rotation,
        CorruptionFamily::coordinate_scale, CorruptionFamily::translation,
        CorruptionFamily::feature_dropout};
    return families;
}

inline std::string corruption_name(CorruptionFamily family) {
    switch (family) {
        case CorruptionFamily::gaussian_noise: return "gaussian_noise";
        case CorruptionFamily::rotation: return "rotation";
        case CorruptionFamily::coordinate_scale: return "coordinate_scale";
        case CorruptionFamily::translation: return "translation";
        case CorruptionFamily::feature_dropout: return "feature_dropout";
    }
    throw config_error("unknown corruption family");
}

inline CorruptionFamily corruption_from_name(const std::string& name) {
    for (auto family : all_corruption_families())
        if (corruption_name(family) == name) return family;
    throw config_error("unknown corruption family: " + name);
}

/// Intensity 1..5 -> transform magnitude. Tables are frozen so the severe end
/// (intensity 5) pushes a plain model well below 70% accuracy on the toy task.
inline double corruption_magnitude(CorruptionFamily family, int intensity) {
    if (intensity < 0 || intensity > 5)
        throw config_error("corruption intensity must be in 0..5");
    if (intensity == 0) return 0.0;  // identity, valid in tests only
    static const double noise[5] = {0.1, 0.25, 0.5, 1.0, 2.0};
    static const double angle[5] = {0.0873, 0.2618, 0.5236, 1.0472, 2.0944};  // 5..120 degrees
    static const double scale[5] = {1.15, 1.35, 1.6, 2.0, 2.6};
    static const double shift[5] = {0.25, 0.5, 1.0, 2.0, 4.0};
    static const double drop[5] = {0.05, 0.1, 0.2, 0.35, 0.5};
    switch (family) {
        case CorruptionFamily::gaussian_noise: return noise[intensity - 1];
        case CorruptionFamily::rotation: return angle[intensity - 1];
        case CorruptionFamily::coordinate_scale: return scale[intensity - 1];
        case CorruptionFamily::translation: return shift[intensity - 1];
        case CorruptionFamily::feature_dropout: return drop[intensity - 1];
    }
    throw config_error("unknown corruption family");
}

struct CorruptionSpec {
    CorruptionFamily family = CorruptionFamily::gaussian_noise;
    int intensity = 1;
    std::uint64_t seed = 0;
};

/// Applies the corruption to every feature vector; labels and sizes are
/// never touched.
inline LabeledDataset corrupt(const LabeledDataset& ds, const CorruptionSpec& spec) {
    const double mag = corruption_magnitude(spec.family, spec.intensity);
    LabeledDataset out = ds;
    if (spec.intensity == 0) return out;
    RngStream rng(spec.seed);
    const std::size_t d = ds.dim();
    switch (spec.family) {
        case CorruptionFamily::gaussian_noise:
            for (auto& v : out.x.data()) v += mag * rng.normal();
            break;
        case CorruptionFamily::rotation: {
            // Deterministic rotation in the plane of the first two coordinates.
            if (d < 2) break;
            const double c = std::cos(mag), s = std::sin(mag);
            for (std::size_t i = 0; i < out.x.rows(); ++i) {
                double* r = out.x.row(i);
                const double x0 = r[0], x1 = r[1];
                r[0] = c * x0 - s * x1;
                r[1] = s * x0 + c * x1;
            }
            break;
        }
        case CorruptionFamily::coordinate_scale:
            // Anisotropic: even coordinates stretch by mag, odd ones shrink.
            for (std::size_t i = 0; i < out.x.rows(); ++i) {
                double* r = out.x.row(i);
                for (std::size_t j = 0; j < d; ++j) r[j] *= (j % 2 == 0) ? mag : 1.0 / mag;
            }
            break;
        case CorruptionFamily::translation: {
            // Fixed diagonal shift of length mag.
            const double per_coord = mag / std::sqrt(static_cast<double>(d));
            for (auto& v : out.x.data()) v += per_coord;
            break;
        }
        case CorruptionFamily::feature_dropout:
            for (auto& v : out.x.data())
                if (rng.bernoulli(mag)) v = 0.0;
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Minibatching
// ---------------------------------------------------------------------------

struct Minibatch {
    std::vector<std::size_t> indices;  // positions in the source split
    Matrix x;
    std::vector<int> labels;
};

/// Seeded per-epoch shuffle; the final partial batch is included. Indices are
/// positions within the split so per-example trackers stay aligned.
inline std::vector<Minibatch> minibatches(const LabeledDataset& split, std::size_t batch_size,
                                          std::uint64_t seed, int epoch) {
    if (batch_size == 0 || batch_size > split.size())
        throw config_error("minibatches: batch size must be in [1, split size]");
    RngStream rng(derive_seed(seed, "epoch-shuffle", static_cast<std::uint64_t>(epoch)));
    const auto perm = rng.permutation(split.size());
    std::vector<Minibatch> batches;
    for (std::size_t start = 0; start < perm.size(); start += batch_size) {
        const std::size_t stop = std::min(start + batch_size, perm.size());
        Minibatch batch;
        batch.indices.assign(perm.begin() + start, perm.begin() + stop);
        batch.x = Matrix(stop - start, split.dim());
        batch.labels.resize(stop - start);
        for (std::size_t i = 0; i < batch.indices.size(); ++i) {
            std::copy(split.x.row(batch.indices[i]), split.x.row(batch.indices[i]) + split.dim(),
                      batch.x.row(i));
            batch.labels[i] = split.labels[batch.indices[i]];
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// CSV dump/load
// ---------------------------------------------------------------------------

inline void save_dataset_csv(const LabeledDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.precision(17);
    for (std::size_t j = 0; j < ds.dim(); ++j) out << 'x' << j << ',';
    out << "label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) out << ds.x(i, j) << ',';
        out << ds.labels[i] << '\n';
    }
}

inline LabeledDataset load_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw io_error("empty dataset file: " + path);
    const std::size_t dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    std::vector<double> values;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        for (std::size_t j = 0; j < dim; ++j) {
            if (!std::getline(row, cell, ',')) throw io_error("short row in " + path);
            values.push_back(std::stod(cell));
        }
        if (!std::getline(row, cell, ',')) throw io_error("missing label in " + path);
        labels.push_back(std::stoi(cell));
    }
    LabeledDataset ds;
    ds.labels = std::move(labels);
    ds.x = Matrix(ds.labels.size(), dim);
    std::copy(values.begin(), values.end(), ds.x.data().begin());
    int max_label = -1;
    for (int y : ds.labels) max_label = std::max(max_label, y);
    ds.num_classes = static_cast<std::size_t>(max_label + 1);
    return ds;
}

} // namespace calab

#endif // CALAB_DATA_HPP
