#ifndef CALAB_AUGMENT_HPP
#define CALAB_AUGMENT_HPP

#include <algorithm>
#include <cmath>
#include <iostream>
#include <optional>
#include <vector>

#include "calab/calibration.hpp"
#include "calab/errors.hpp"
#include "calab/matrix.hpp"
#include "calab/net.hpp"
#include "calab/rng.hpp"

namespace calab {

struct MixedBatch {
    Matrix x;
    Matrix y;  // soft labels, one row per example
};

namespace detail {

/// Shared Mixup core. lambda == 0 means "leave (x_i, y_i) untouched" -- the
/// pass-through convention used by the class-gated and per-example variants
/// (a disabled example keeps its own features and hard label; it does not
/// collapse onto its partner).
inline MixedBatch mixup_core(const Matrix& x, const Matrix& y,
                             const std::vector<std::size_t>& partner,
                             const std::vector<double>& lambdas,
                             const std::vector<bool>* enabled) {
    MixedBatch out;
    out.x = Matrix(x.rows(), x.cols());
    out.y = Matrix(y.rows(), y.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double lam = lambdas[i];
        const bool active = (enabled == nullptr || (*enabled)[i]) && lam != 0.0;
        const std::size_t j = partner[i];
        double* xo = out.x.row(i);
        double* yo = out.y.row(i);
        if (!active || lam == 1.0) {
            std::copy(x.row(i), x.row(i) + x.cols(), xo);
            std::copy(y.row(i), y.row(i) + y.cols(), yo);
            continue;
        }
        const double* xi = x.row(i);
        const double* xj = x.row(j);
        for (std::size_t c = 0; c < x.cols(); ++c) xo[c] = lam * xi[c] + (1.0 - lam) * xj[c];
        const double* yi = y.row(i);
        const double* yj = y.row(j);
        for (std::size_t c = 0; c < y.cols(); ++c) yo[c] = lam * yi[c] + (1.0 - lam) * yj[c];
    }
    return out;
}

inline void check_mixup_batch(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw shape_error("mixup: feature/label row counts differ");
    if (x.rows() < 2) throw config_error("mixup: batch size must be >= 2");
}

} // namespace detail

/// Mixup over a minibatch: partners come from a random permutation of the
/// same batch and each example draws its own lambda ~ Beta(a, a), unless an
/// override vector is supplied (entry 0 leaves that example untouched).
inline MixedBatch mixup_batch(const Matrix& x, const Matrix& y, double concentration,
                              RngStream& rng,
                              const std::optional<std::vector<double>>& lambda_override =
                                  std::nullopt) {
    detail::check_mixup_batch(x, y);
    const auto partner = rng.permutation(x.rows());
    std::vector<double> lambdas;
    if (lambda_override) {
        if (lambda_override->size() != x.rows())
            throw shape_error("mixup: lambda override length mismatch");
        lambdas = *lambda_override;
    } else {
        if (concentration <= 0.0) throw config_error("mixup: concentration must be > 0");
        lambdas.resize(x.rows());
        for (auto& l : lambdas) l = rng.beta(concentration, concentration);
    }
    return detail::mixup_core(x, y, partner, lambdas, nullptr);
}

/// Label smoothing: true class keeps 1 - alpha, the remainder is spread
/// equally over the other classes.
inline Matrix label_smooth(const Matrix& y_onehot, double alpha) {
    if (alpha < 0.0 || alpha >= 1.0)
        throw config_error("label_smooth: alpha must be in [0,1)");
    if (alpha == 0.0) return y_onehot;
    const std::size_t c = y_onehot.cols();
    if (c < 2) throw config_error("label_smooth: need at least two classes");
    const double off = alpha / static_cast<double>(c - 1);
    Matrix out(y_onehot.rows(), c);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = (1.0 - alpha - off) * y_onehot.data()[i] + off;
    return out;
}

// ---------------------------------------------------------------------------
// AugMix for vector data
// ---------------------------------------------------------------------------

/// Label-preserving transforms on feature vectors; at intensity 0 every op
/// is the exact identity.
enum class OpKind { rotate_2d, gaussian_noise, coordinate_scale, coordinate_translate };

struct AugmentOp {
    OpKind kind;
    double intensity = 0.0;
};

using AugmentOpSet = std::vector<AugmentOp>;

inline AugmentOpSet default_opset(double intensity = 0.3) {
    return {{OpKind::rotate_2d, intensity},
            {OpKind::gaussian_noise, intensity},
            {OpKind::coordinate_scale, intensity},
            {OpKind::coordinate_translate, intensity}};
}

inline void apply_op(const AugmentOp& op, const double* x, double* out, std::size_t dim,
                     RngStream& rng) {
    std::copy(x, x + dim, out);
    switch (op.kind) {
        case OpKind::rotate_2d: {
            if (dim < 2) return;
            // Random pair of axes spanning the rotation plane.
            const std::size_t i = rng.uniform_index(dim);
            std::size_t j = rng.uniform_index(dim - 1);
            if (j >= i) ++j;
            const double angle = rng.uniform(-op.intensity, op.intensity);
            const double c = std::cos(angle), s = std::sin(angle);
            const double xi = out[i], xj = out[j];
            out[i] = c * xi - s * xj;
            out[j] = s * xi + c * xj;
            break;
        }
        case OpKind::gaussian_noise:
            for (std::size_t d = 0; d < dim; ++d) out[d] += op.intensity * rng.normal();
            break;
        case OpKind::coordinate_scale:
            for (std::size_t d = 0; d < dim; ++d) out[d] *= std::exp(op.intensity * rng.normal());
            break;
        case OpKind::coordinate_translate: {
            std::vector<double> dir(dim);
            double norm = 0.0;
            for (auto& v : dir) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm == 0.0) return;
            for (std::size_t d = 0; d < dim; ++d) out[d] += op.intensity * dir[d] / norm;
            break;
        }
    }
}

/// Deterministic AugMix core: x_aug = sum_i w_i op_i(x), blended as
/// m*x + (1-m)*x_aug. m == 1 returns x bit-exactly.
inline void augmix_row_given(const double* x, std::size_t dim, const AugmentOpSet& opset,
                             const std::vector<std::size_t>& op_indices,
                             const std::vector<double>& weights, double m, RngStream& rng,
                             double* out) {
    if (m == 1.0) {
        std::copy(x, x + dim, out);
        return;
    }
    std::vector<double> aug(dim, 0.0), tmp(dim);
    for (std::size_t i = 0; i < op_indices.size(); ++i) {
        apply_op(opset[op_indices[i]], x, tmp.data(), dim, rng);
        for (std::size_t d = 0; d < dim; ++d) aug[d] += weights[i] * tmp[d];
    }
    for (std::size_t d = 0; d < dim; ++d) out[d] = m * x[d] + (1.0 - m) * aug[d];
}

inline void augmix_row(const double* x, std::size_t dim, const AugmentOpSet& opset, int k,
                       double dirichlet_a, double beta_a, RngStream& rng, double* out) {
    if (opset.empty()) throw config_error("augmix: empty op set");
    if (k < 1) throw config_error("augmix: k must be >= 1");
    const auto weights = rng.dirichlet(static_cast<std::size_t>(k), dirichlet_a);
    std::vector<std::size_t> op_indices(static_cast<std::size_t>(k));
    for (auto& idx : op_indices) idx = rng.uniform_index(opset.size());
    const double m = rng.beta(beta_a, beta_a);
    augmix_row_given(x, dim, opset, op_indices, weights, m, rng, out);
}

/// Batch AugMix; labels are untouched by construction.
inline Matrix augmix(const Matrix& x, const AugmentOpSet& opset, int k, double dirichlet_a,
                     double beta_a, RngStream& rng) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        augmix_row(x.row(i), x.cols(), opset, k, dirichlet_a, beta_a, rng, out.row(i));
    return out;
}

/// AugMix + Mixup: both partners are AugMixed independently, then blended
/// with a shared lambda; labels interpolate exactly as plain Mixup. The
/// Mixup permutation and lambdas are drawn before any AugMix randomness, so
/// with an identity op set the result coincides with mixup_batch on the same
/// stream. An optional per-example mask restricts the Mixup stage (masked-out
/// examples still receive AugMix).
inline MixedBatch augmixup(const Matrix& x, const Matrix& y, const AugmentOpSet& opset, int k,
                           double dirichlet_a, double beta_a, double mixup_a, RngStream& rng,
                           const std::vector<bool>* mixup_enabled = nullptr) {
    detail::check_mixup_batch(x, y);
    if (mixup_a <= 0.0) throw config_error("augmixup: concentration must be > 0");
    const auto partner = rng.permutation(x.rows());
    std::vector<double> lambdas(x.rows());
    for (auto& l : lambdas) l = rng.beta(mixup_a, mixup_a);

    const Matrix anchor_aug = augmix(x, opset, k, dirichlet_a, beta_a, rng);
    const Matrix partner_aug = augmix(x, opset, k, dirichlet_a, beta_a, rng);

    MixedBatch out;
    out.x = Matrix(x.rows(), x.cols());
    out.y = Matrix(y.rows(), y.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const bool active = mixup_enabled == nullptr || (*mixup_enabled)[i];
        const double lam = lambdas[i];
        const std::size_t j = partner[i];
        double* xo = out.x.row(i);
        double* yo = out.y.row(i);
        if (!active || lam == 1.0) {
            std::copy(anchor_aug.row(i), anchor_aug.row(i) + x.cols(), xo);
            std::copy(y.row(i), y.row(i) + y.cols(), yo);
            continue;
        }
        for (std::size_t c = 0; c < x.cols(); ++c)
            xo[c] = lam * anchor_aug(i, c) + (1.0 - lam) * partner_aug(j, c);
        for (std::size_t c = 0; c < y.cols(); ++c)
            yo[c] = lam * y(i, c) + (1.0 - lam) * y(j, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CAMixup
// ---------------------------------------------------------------------------

/// Per-class Mixup gate, refreshed from validation statistics each epoch.
struct MixupPolicy {
    std::vector<bool> per_class_enabled;
    double concentration = 1.0;
    int last_refresh_epoch = -1;
};

inline MixupPolicy make_policy(std::size_t num_classes, double concentration = 1.0) {
    MixupPolicy policy;
    policy.per_class_enabled.assign(num_classes, true);
    policy.concentration = concentration;
    return policy;
}

/// Re-derives the per-class gate from validation predictions: Mixup stays on
/// for class i iff Acc(C_i) <= Conf(C_i) (the model is not under-confident
/// there). Classes with no validation examples keep their previous flag and
/// emit a warning.
inline MixupPolicy camixup_refresh(const MixupPolicy& policy, const PredictionBatch& val_preds,
                                   const std::vector<int>& val_labels, int epoch,
                                   ConfDefinition conf_def = ConfDefinition::max_prob,
                                   std::ostream* warnings = &std::cerr) {
    if (val_preds.num_classes() != policy.per_class_enabled.size())
        throw shape_error("camixup_refresh: class count mismatch");
    if (epoch < policy.last_refresh_epoch)
        throw config_error("camixup_refresh: refresh epochs must be monotone");
    const auto stats = per_class_stats(val_preds, val_labels, conf_def);
    MixupPolicy next = policy;
    for (std::size_t c = 0; c < stats.size(); ++c) {
        if (stats[c].count == 0) {
            if (warnings)
                *warnings << "camixup_refresh: class " << c
                          << " has no validation examples; flag unchanged\n";
            continue;
        }
        next.per_class_enabled[c] = stats[c].accuracy <= stats[c].confidence;
    }
    next.last_refresh_epoch = epoch;
    return next;
}

/// Class-gated Mixup. Examples whose true class is disabled pass through
/// bit-for-bit; enabled examples receive standard Mixup. The gate keys on
/// the anchor example's class, and the stream consumption matches
/// mixup_batch so an all-enabled policy reproduces it exactly.
inline MixedBatch camixup_apply(const Matrix& x, const Matrix& y_onehot,
                                const MixupPolicy& policy, double concentration,
                                RngStream& rng) {
    detail::check_mixup_batch(x, y_onehot);
    if (y_onehot.cols() != policy.per_class_enabled.size())
        throw shape_error("camixup_apply: policy length does not match class count");
    if (concentration <= 0.0) throw config_error("camixup_apply: concentration must be > 0");
    const auto partner = rng.permutation(x.rows());
    std::vector<double> lambdas(x.rows());
    for (auto& l : lambdas) l = rng.beta(concentration, concentration);
    std::vector<bool> enabled(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* yi = y_onehot.row(i);
        std::size_t anchor_class = 0;
        for (std::size_t c = 1; c < y_onehot.cols(); ++c)
            if (yi[c] > yi[anchor_class]) anchor_class = c;
        enabled[i] = policy.per_class_enabled[anchor_class];
    }
    return detail::mixup_core(x, y_onehot, partner, lambdas, &enabled);
}

// ---------------------------------------------------------------------------
// Forgetting-count CAMixup
// ---------------------------------------------------------------------------

/// Per-example forgetting statistics over the training set.
struct ForgettingTracker {
    std::vector<bool> prev_correct;
    std::vector<int> forget_count;
    std::vector<double> mixup_coeff;

    explicit ForgettingTracker(std::size_t n = 0)
        : prev_correct(n, false), forget_count(n, 0), mixup_coeff(n, 0.0) {}

    std::size_t size() const { return forget_count.size(); }
};

/// Counts correct -> incorrect transitions; the previous-correctness flag is
/// always advanced to the current observation.
inline void forgetting_update(ForgettingTracker& tracker,
                              const std::vector<std::size_t>& indices,
                              const std::vector<bool>& correct) {
    if (indices.size() != correct.size())
        throw shape_error("forgetting_update: indices/correct size mismatch");
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::size_t i = indices[b];
        if (i >= tracker.size()) throw input_error("forgetting_update: index out of range");
        if (tracker.prev_correct[i] && !correct[b]) tracker.forget_count[i] += 1;
        tracker.prev_correct[i] = correct[b];
    }
}

/// Enables Mixup (coefficient a) exactly for examples whose forgetting count
/// strictly exceeds threshold = sorted(T)[N/2]; everyone else gets 0.
inline void forgetting_policy(ForgettingTracker& tracker, double concentration) {
    if (tracker.size() == 0) return;
    std::vector<int> ranked = tracker.forget_count;
    std::sort(ranked.begin(), ranked.end());
    const int threshold = ranked[ranked.size() / 2];
    for (std::size_t i = 0; i < tracker.size(); ++i)
        tracker.mixup_coeff[i] = tracker.forget_count[i] > threshold ? concentration : 0.0;
}

} // namespace calab

#endif // CALAB_AUGMENT_HPP
