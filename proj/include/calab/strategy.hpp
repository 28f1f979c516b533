#ifndef CALAB_STRATEGY_HPP
#define CALAB_STRATEGY_HPP

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "calab/augment.hpp"
#include "calab/net.hpp"

namespace calab {

struct PolicyLogRow {
    int epoch = 0;
    int cls = 0;
    bool enabled = false;
};

struct CoeffLogRow {
    int epoch = 0;
    std::size_t example = 0;
    double coeff = 0.0;
};

/// Per-training-run augmentation hook. The trainer drives it once per epoch
/// and once per batch; stateful strategies (CAMixup, forgetting counts) keep
/// their policy here. Deep-ensemble members each own a fresh instance.
class AugmentStrategy {
public:
    using ValEval = std::function<PredictionBatch()>;

    virtual ~AugmentStrategy() = default;

    /// Start of each epoch; eval_val yields current-model validation predictions.
    virtual void begin_epoch(int /*epoch*/, const ValEval& /*eval_val*/,
                             const std::vector<int>& /*val_labels*/) {}

    virtual MixedBatch apply(int epoch, const std::vector<std::size_t>& indices, const Matrix& x,
                             const Matrix& y_onehot, RngStream& rng) = 0;

    /// Training-batch predictions right after the forward pass.
    virtual void observe(const std::vector<std::size_t>& /*indices*/,
                         const PredictionBatch& /*preds*/, const std::vector<int>& /*labels*/) {}

    /// After the gradient update of each batch.
    virtual void end_batch() {}

    virtual void end_epoch(int /*epoch*/) {}

    const std::vector<PolicyLogRow>& policy_log() const { return policy_log_; }
    const std::vector<CoeffLogRow>& coeff_log() const { return coeff_log_; }

protected:
    std::vector<PolicyLogRow> policy_log_;
    std::vector<CoeffLogRow> coeff_log_;
};

class NoAugment final : public AugmentStrategy {
public:
    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream&) override {
        return {x, y};
    }
};

class MixupStrategy final : public AugmentStrategy {
public:
    explicit MixupStrategy(double concentration) : concentration_(concentration) {}
    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream& rng) override {
        return mixup_batch(x, y, concentration_, rng);
    }

private:
    double concentration_;
};

class LabelSmoothStrategy final : public AugmentStrategy {
public:
    explicit LabelSmoothStrategy(double alpha) : alpha_(alpha) {}
    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream&) override {
        return {x, label_smooth(y, alpha_)};
    }

private:
    double alpha_;
};

struct AugmixParams {
    AugmentOpSet opset = default_opset();
    int k = 3;
    double dirichlet_a = 1.0;
    double beta_a = 1.0;
};

class AugMixStrategy final : public AugmentStrategy {
public:
    explicit AugMixStrategy(AugmixParams params) : params_(std::move(params)) {}
    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream& rng) override {
        return {augmix(x, params_.opset, params_.k, params_.dirichlet_a, params_.beta_a, rng), y};
    }

private:
    AugmixParams params_;
};

class AugMixupStrategy final : public AugmentStrategy {
public:
    AugMixupStrategy(AugmixParams params, double concentration)
        : params_(std::move(params)), concentration_(concentration) {}
    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream& rng) override {
        return augmixup(x, y, params_.opset, params_.k, params_.dirichlet_a, params_.beta_a,
                        concentration_, rng);
    }

private:
    AugmixParams params_;
    double concentration_;
};

/// Class-gated Mixup with a per-epoch validation refresh. The gate starts
/// all-enabled (plain Mixup) and is re-derived from validation accuracy vs
/// confidence before every epoch after the first.
class CAMixupStrategy final : public AugmentStrategy {
public:
    CAMixupStrategy(std::size_t num_classes, double concentration,
                    ConfDefinition conf_def = ConfDefinition::max_prob,
                    std::ostream* warnings = &std::cerr)
        : policy_(make_policy(num_classes, concentration)),
          conf_def_(conf_def),
          warnings_(warnings) {}

    void begin_epoch(int epoch, const ValEval& eval_val,
                     const std::vector<int>& val_labels) override {
        if (epoch > 0)
            policy_ = camixup_refresh(policy_, eval_val(), val_labels, epoch, conf_def_, warnings_);
        log_policy(epoch);
    }

    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream& rng) override {
        return camixup_apply(x, y, policy_, policy_.concentration, rng);
    }

    const MixupPolicy& policy() const { return policy_; }

private:
    void log_policy(int epoch) {
        for (std::size_t c = 0; c < policy_.per_class_enabled.size(); ++c)
            policy_log_.push_back({epoch, static_cast<int>(c), policy_.per_class_enabled[c]});
    }

    MixupPolicy policy_;
    ConfDefinition conf_def_;
    std::ostream* warnings_;
};

/// AugMix everywhere, Mixup gated per class by the CAMixup policy. Disabled
/// examples keep their hard label but still receive the label-preserving
/// AugMix transform.
class AugCAMixupStrategy final : public AugmentStrategy {
public:
    AugCAMixupStrategy(std::size_t num_classes, double concentration, AugmixParams params,
                       ConfDefinition conf_def = ConfDefinition::max_prob,
                       std::ostream* warnings = &std::cerr)
        : policy_(make_policy(num_classes, concentration)),
          params_(std::move(params)),
          conf_def_(conf_def),
          warnings_(warnings) {}

    void begin_epoch(int epoch, const ValEval& eval_val,
                     const std::vector<int>& val_labels) override {
        if (epoch > 0)
            policy_ = camixup_refresh(policy_, eval_val(), val_labels, epoch, conf_def_, warnings_);
        for (std::size_t c = 0; c < policy_.per_class_enabled.size(); ++c)
            policy_log_.push_back({epoch, static_cast<int>(c), policy_.per_class_enabled[c]});
    }

    MixedBatch apply(int, const std::vector<std::size_t>&, const Matrix& x, const Matrix& y,
                     RngStream& rng) override {
        std::vector<bool> enabled(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const double* yi = y.row(i);
            std::size_t cls = 0;
            for (std::size_t c = 1; c < y.cols(); ++c)
                if (yi[c] > yi[cls]) cls = c;
            enabled[i] = policy_.per_class_enabled[cls];
        }
        return augmixup(x, y, params_.opset, params_.k, params_.dirichlet_a, params_.beta_a,
                        policy_.concentration, rng, &enabled);
    }

    const MixupPolicy& policy() const { return policy_; }

private:
    MixupPolicy policy_;
    AugmixParams params_;
    ConfDefinition conf_def_;
    std::ostream* warnings_;
};

/// Forgetting-count CAMixup: Mixup is applied per example, enabled only where
/// the forgetting count exceeds the running median; the threshold is
/// recomputed after every gradient step.
class ForgettingCAMixupStrategy final : public AugmentStrategy {
public:
    ForgettingCAMixupStrategy(std::size_t train_size, double concentration)
        : tracker_(train_size), concentration_(concentration) {}

    MixedBatch apply(int, const std::vector<std::size_t>& indices, const Matrix& x,
                     const Matrix& y, RngStream& rng) override {
        std::vector<double> lambdas(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const double coeff = tracker_.mixup_coeff[indices[i]];
            lambdas[i] = coeff > 0.0 ? rng.beta(coeff, coeff) : 0.0;
        }
        return mixup_batch(x, y, concentration_, rng, lambdas);
    }

    void observe(const std::vector<std::size_t>& indices, const PredictionBatch& preds,
                 const std::vector<int>& labels) override {
        std::vector<bool> correct(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i)
            correct[i] = preds.predicted[i] == labels[i];
        forgetting_update(tracker_, indices, correct);
    }

    void end_batch() override { forgetting_policy(tracker_, concentration_); }

    void end_epoch(int epoch) override {
        for (std::size_t i = 0; i < tracker_.size(); ++i)
            coeff_log_.push_back({epoch, i, tracker_.mixup_coeff[i]});
    }

    const ForgettingTracker& tracker() const { return tracker_; }

private:
    ForgettingTracker tracker_;
    double concentration_;
};

} // namespace calab

#endif // CALAB_STRATEGY_HPP
