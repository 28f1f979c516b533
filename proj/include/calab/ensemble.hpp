#ifndef CALAB_ENSEMBLE_HPP
#define CALAB_ENSEMBLE_HPP

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "calab/data.hpp"
#include "calab/errors.hpp"
#include "calab/net.hpp"
#include "calab/parallel.hpp"
#include "calab/rng.hpp"
#include "calab/strategy.hpp"

namespace calab {

enum class EnsembleMode { deep, mc_dropout, batch_ensemble };

inline std::string ensemble_mode_name(EnsembleMode mode) {
    switch (mode) {
        case EnsembleMode::deep: return "deep";
        case EnsembleMode::mc_dropout: return "mc_dropout";
        case EnsembleMode::batch_ensemble: return "batch_ensemble";
    }
    throw config_error("unknown ensemble mode");
}

inline EnsembleMode ensemble_mode_from_name(const std::string& name) {
    if (name == "deep") return EnsembleMode::deep;
    if (name == "mc_dropout") return EnsembleMode::mc_dropout;
    if (name == "batch_ensemble") return EnsembleMode::batch_ensemble;
    throw config_error("unknown ensemble mode: " + name);
}

/// One member's rank-1 perturbation of a shared layer: the effective weight
/// is W with row j scaled by r[j] and column i scaled by s[i].
struct RankOneFactors {
    std::vector<double> r;  // (out_dim)
    std::vector<double> s;  // (in_dim)
};

/// Materialized F = r s^T, for tests that compare against the explicit
/// element-wise product.
inline Matrix rank_one_product(const RankOneFactors& f) {
    Matrix out(f.r.size(), f.s.size());
    for (std::size_t i = 0; i < f.r.size(); ++i)
        for (std::size_t j = 0; j < f.s.size(); ++j) out(i, j) = f.r[i] * f.s[j];
    return out;
}

struct EnsembleModel {
    EnsembleMode mode = EnsembleMode::deep;
    int ensemble_size = 1;
    std::vector<DenseNet> members;                     // deep: K nets; others: 1
    std::vector<std::vector<RankOneFactors>> factors;  // batch_ensemble: [K][layer]
    std::uint64_t seed = 0;

    const DenseNet& shared() const { return members.front(); }
    DenseNet& shared() { return members.front(); }

    void validate() const {
        if (ensemble_size < 1) throw config_error("EnsembleModel: K must be >= 1");
        if (mode == EnsembleMode::deep) {
            if (members.size() != static_cast<std::size_t>(ensemble_size))
                throw config_error("EnsembleModel: deep mode needs K member nets");
        } else if (members.size() != 1) {
            throw config_error("EnsembleModel: shared-weight modes carry one net");
        }
        if (mode == EnsembleMode::batch_ensemble) {
            if (factors.size() != static_cast<std::size_t>(ensemble_size))
                throw config_error("EnsembleModel: need factors for each member");
            for (const auto& member : factors) {
                if (member.size() != shared().layers.size())
                    throw config_error("EnsembleModel: factors per layer mismatch");
                for (std::size_t l = 0; l < member.size(); ++l) {
                    if (member[l].r.size() != shared().layers[l].out_dim() ||
                        member[l].s.size() != shared().layers[l].in_dim())
                        throw shape_error("EnsembleModel: factor dims mismatch at layer " +
                                          std::to_string(l));
                }
            }
        }
        for (const auto& net : members) net.validate();
    }
};

// ---------------------------------------------------------------------------
// BatchEnsemble forward/backward
// ---------------------------------------------------------------------------

struct BatchEnsembleTrace {
    Matrix input;
    std::vector<Matrix> scaled_inputs;    // u = input o s, per layer
    std::vector<Matrix> matmul_outs;      // z = u W^T, per layer (before r and bias)
    std::vector<Matrix> pre_activations;  // z o r + b, per layer
    std::vector<Matrix> activations;      // hidden layers, post ReLU (+dropout)
    std::vector<Matrix> dropout_masks;
    Matrix logits;
    Matrix probs;
};

/// Member forward through the shared net with per-layer rank-1 factors,
/// computed as ((x o s) W^T) o r + b -- F_k is never materialized.
inline BatchEnsembleTrace be_forward_trace(const DenseNet& shared,
                                           const std::vector<RankOneFactors>& member_factors,
                                           const Matrix& x, Mode mode, RngStream& rng) {
    detail::check_forward_input(shared, x);
    if (member_factors.size() != shared.layers.size())
        throw shape_error("be_forward: factors per layer mismatch");
    const bool sample_dropout = dropout_active(mode, shared.dropout_rate);
    const double keep = 1.0 - shared.dropout_rate;

    BatchEnsembleTrace trace;
    trace.input = x;
    const Matrix* current = &trace.input;
    const std::size_t num_layers = shared.layers.size();
    for (std::size_t l = 0; l < num_layers; ++l) {
        const auto& layer = shared.layers[l];
        const auto& f = member_factors[l];
        Matrix u = *current;
        for (std::size_t i = 0; i < u.rows(); ++i) {
            double* r = u.row(i);
            for (std::size_t j = 0; j < u.cols(); ++j) r[j] *= f.s[j];
        }
        Matrix z = matmul_nt(u, layer.weights);
        trace.scaled_inputs.push_back(std::move(u));
        trace.matmul_outs.push_back(z);
        for (std::size_t i = 0; i < z.rows(); ++i) {
            double* r = z.row(i);
            for (std::size_t j = 0; j < z.cols(); ++j) r[j] = r[j] * f.r[j] + layer.bias[j];
        }
        trace.pre_activations.push_back(z);
        if (l + 1 == num_layers) {
            trace.logits = std::move(z);
            break;
        }
        Matrix h = std::move(z);
        for (auto& v : h.data()) v = v > 0.0 ? v : 0.0;
        if (sample_dropout) {
            Matrix mask(h.rows(), h.cols());
            for (std::size_t i = 0; i < mask.size(); ++i)
                mask.data()[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
            for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] *= mask.data()[i];
            trace.dropout_masks.push_back(std::move(mask));
        }
        trace.activations.push_back(std::move(h));
        current = &trace.activations.back();
    }
    trace.probs = trace.logits;
    softmax_rows_inplace(trace.probs);
    return trace;
}

inline PredictionBatch be_forward(const DenseNet& shared,
                                  const std::vector<RankOneFactors>& member_factors,
                                  const Matrix& x, Mode mode, RngStream& rng) {
    return PredictionBatch(be_forward_trace(shared, member_factors, x, mode, rng).probs);
}

inline PredictionBatch be_forward(const DenseNet& shared,
                                  const std::vector<RankOneFactors>& member_factors,
                                  const Matrix& x) {
    RngStream unused(0);
    return be_forward(shared, member_factors, x, Mode::eval, unused);
}

/// Member-k forward of a BatchEnsemble model.
inline PredictionBatch batchensemble_forward(const EnsembleModel& model, int k, const Matrix& x) {
    if (model.mode != EnsembleMode::batch_ensemble)
        throw config_error("batchensemble_forward: model is not a BatchEnsemble");
    if (k < 0 || k >= model.ensemble_size)
        throw config_error("batchensemble_forward: member index out of range");
    return be_forward(model.shared(), model.factors[static_cast<std::size_t>(k)], x);
}

struct BatchEnsembleGradients {
    Gradients shared;                     // dW, db
    std::vector<RankOneFactors> factors;  // dr, ds per layer
};

/// Gradient of soft_cross_entropy through the factorized forward with respect
/// to the shared weights, biases and this member's r/s vectors. Weight decay
/// is left to the caller so a joint multi-member loss applies it once.
inline BatchEnsembleGradients be_backward(const DenseNet& shared,
                                          const std::vector<RankOneFactors>& member_factors,
                                          const BatchEnsembleTrace& trace, const Matrix& targets) {
    if (!trace.probs.same_shape(targets))
        throw shape_error("be_backward: prediction/target shapes differ");
    const std::size_t num_layers = shared.layers.size();
    const double inv_b = 1.0 / static_cast<double>(trace.probs.rows());

    BatchEnsembleGradients grads;
    grads.shared.layers.resize(num_layers);
    grads.factors.resize(num_layers);

    Matrix delta(trace.probs.rows(), trace.probs.cols());
    for (std::size_t i = 0; i < delta.size(); ++i)
        delta.data()[i] = (trace.probs.data()[i] - targets.data()[i]) * inv_b;

    for (std::size_t l = num_layers; l-- > 0;) {
        const auto& layer = shared.layers[l];
        const auto& f = member_factors[l];
        auto& g = grads.shared.layers[l];
        auto& gf = grads.factors[l];

        // delta is dL/d(pre-activation) = dL/d(z o r + b).
        gf.r.assign(layer.out_dim(), 0.0);
        g.d_bias.assign(layer.out_dim(), 0.0);
        for (std::size_t i = 0; i < delta.rows(); ++i) {
            const double* dr = delta.row(i);
            const double* zr = trace.matmul_outs[l].row(i);
            for (std::size_t j = 0; j < delta.cols(); ++j) {
                g.d_bias[j] += dr[j];
                gf.r[j] += dr[j] * zr[j];
            }
        }
        Matrix dz = delta;  // dL/dz = delta o r
        for (std::size_t i = 0; i < dz.rows(); ++i) {
            double* row = dz.row(i);
            for (std::size_t j = 0; j < dz.cols(); ++j) row[j] *= f.r[j];
        }
        g.d_weights = matmul_tn(dz, trace.scaled_inputs[l]);
        Matrix du = matmul_nn(dz, layer.weights);  // dL/du, u = input o s
        const Matrix& layer_input = (l == 0) ? trace.input : trace.activations[l - 1];
        gf.s.assign(layer.in_dim(), 0.0);
        for (std::size_t i = 0; i < du.rows(); ++i) {
            const double* dur = du.row(i);
            const double* xr = layer_input.row(i);
            for (std::size_t j = 0; j < du.cols(); ++j) gf.s[j] += dur[j] * xr[j];
        }
        if (l == 0) break;

        Matrix dh = std::move(du);  // becomes dL/d(layer input)
        for (std::size_t i = 0; i < dh.rows(); ++i) {
            double* row = dh.row(i);
            for (std::size_t j = 0; j < dh.cols(); ++j) row[j] *= f.s[j];
        }
        if (!trace.dropout_masks.empty())
            for (std::size_t i = 0; i < dh.size(); ++i)
                dh.data()[i] *= trace.dropout_masks[l - 1].data()[i];
        const Matrix& z_prev = trace.pre_activations[l - 1];
        for (std::size_t i = 0; i < dh.size(); ++i)
            if (z_prev.data()[i] <= 0.0) dh.data()[i] = 0.0;
        delta = std::move(dh);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Architecture knobs shared by all ensemble modes.
struct NetSpec {
    std::vector<std::size_t> hidden = {64, 64};
    double dropout_rate = 0.0;
    double factor_init_std = 0.5;  // BatchEnsemble r/s ~ N(1, std^2)

    std::vector<std::size_t> dims(std::size_t in_dim, std::size_t num_classes) const {
        std::vector<std::size_t> d{in_dim};
        d.insert(d.end(), hidden.begin(), hidden.end());
        d.push_back(num_classes);
        return d;
    }
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean training loss per epoch

    double initial_loss() const { return epoch_loss.front(); }
    double final_loss() const { return epoch_loss.back(); }
};

using StrategyFactory = std::function<std::unique_ptr<AugmentStrategy>()>;

namespace detail {

inline void check_finite_loss(double loss, int epoch) {
    if (!std::isfinite(loss))
        throw divergence_error("training diverged at epoch " + std::to_string(epoch));
}

} // namespace detail

/// Single-model SGD loop; the strategy hook sees every batch and epoch.
inline TrainResult train_single(DenseNet& net, const LabeledDataset& train,
                                const LabeledDataset& val, const TrainConfig& config,
                                AugmentStrategy& strategy, std::uint64_t seed) {
    config.validate();
    const std::size_t num_classes = net.num_classes();
    RngStream rng_aug(derive_seed(seed, "augment"));
    RngStream rng_dropout(derive_seed(seed, "dropout"));
    const std::uint64_t shuffle_seed = derive_seed(seed, "shuffle");
    SgdState state = SgdState::zeros_like(net);
    const auto eval_val = [&] { return forward(net, val.x); };

    TrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        strategy.begin_epoch(epoch, eval_val, val.labels);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& batch :
             minibatches(train, static_cast<std::size_t>(config.batch_size), shuffle_seed, epoch)) {
            const Matrix y = one_hot(batch.labels, num_classes);
            const MixedBatch mixed = strategy.apply(epoch, batch.indices, batch.x, y, rng_aug);
            const ForwardTrace trace = forward_trace(net, mixed.x, Mode::train, rng_dropout);
            const double loss = soft_cross_entropy(trace.probs, mixed.y);
            detail::check_finite_loss(loss, epoch);
            loss_sum += loss;
            ++batches;
            strategy.observe(batch.indices, PredictionBatch(trace.probs), batch.labels);
            const Gradients grads = backward(net, trace, mixed.y, config.l2);
            sgd_step(net, grads, state, config, epoch);
            strategy.end_batch();
        }
        strategy.end_epoch(epoch);
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    return result;
}

/// Joint BatchEnsemble training: every member sees the same (already
/// augmented) minibatch, per-member losses are summed, the shared weights
/// accumulate all members' gradients plus one weight-decay term.
inline TrainResult train_batch_ensemble(DenseNet& shared,
                                        std::vector<std::vector<RankOneFactors>>& factors,
                                        const LabeledDataset& train, const LabeledDataset& val,
                                        const TrainConfig& config, AugmentStrategy& strategy,
                                        std::uint64_t seed) {
    config.validate();
    const std::size_t num_classes = shared.num_classes();
    RngStream rng_aug(derive_seed(seed, "augment"));
    RngStream rng_dropout(derive_seed(seed, "dropout"));
    const std::uint64_t shuffle_seed = derive_seed(seed, "shuffle");
    SgdState shared_state = SgdState::zeros_like(shared);
    std::vector<std::vector<RankOneFactors>> factor_state(factors.size());
    for (std::size_t k = 0; k < factors.size(); ++k)
        for (const auto& f : factors[k])
            factor_state[k].push_back({std::vector<double>(f.r.size(), 0.0),
                                       std::vector<double>(f.s.size(), 0.0)});

    const auto eval_val = [&] {
        Matrix mean(val.size(), num_classes);
        RngStream unused(0);
        for (const auto& member : factors) {
            const auto trace = be_forward_trace(shared, member, val.x, Mode::eval, unused);
            for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] += trace.probs.data()[i];
        }
        for (auto& v : mean.data()) v /= static_cast<double>(factors.size());
        return PredictionBatch(std::move(mean));
    };

    TrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        strategy.begin_epoch(epoch, eval_val, val.labels);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& batch :
             minibatches(train, static_cast<std::size_t>(config.batch_size), shuffle_seed, epoch)) {
            const Matrix y = one_hot(batch.labels, num_classes);
            const MixedBatch mixed = strategy.apply(epoch, batch.indices, batch.x, y, rng_aug);

            Gradients shared_grads;
            shared_grads.layers.resize(shared.layers.size());
            for (std::size_t l = 0; l < shared.layers.size(); ++l) {
                shared_grads.layers[l].d_weights =
                    Matrix(shared.layers[l].out_dim(), shared.layers[l].in_dim());
                shared_grads.layers[l].d_bias.assign(shared.layers[l].out_dim(), 0.0);
            }
            std::vector<BatchEnsembleGradients> member_grads;
            member_grads.reserve(factors.size());

            double joint_loss = 0.0;
            Matrix mean_probs(mixed.x.rows(), num_classes);
            for (std::size_t k = 0; k < factors.size(); ++k) {
                const auto trace =
                    be_forward_trace(shared, factors[k], mixed.x, Mode::train, rng_dropout);
                joint_loss += soft_cross_entropy(trace.probs, mixed.y);
                for (std::size_t i = 0; i < mean_probs.size(); ++i)
                    mean_probs.data()[i] += trace.probs.data()[i] / static_cast<double>(factors.size());
                member_grads.push_back(be_backward(shared, factors[k], trace, mixed.y));
            }
            detail::check_finite_loss(joint_loss, epoch);
            loss_sum += joint_loss;
            ++batches;
            strategy.observe(batch.indices, PredictionBatch(std::move(mean_probs)), batch.labels);

            for (std::size_t k = 0; k < factors.size(); ++k)
                for (std::size_t l = 0; l < shared.layers.size(); ++l) {
                    auto& acc = shared_grads.layers[l];
                    const auto& g = member_grads[k].shared.layers[l];
                    for (std::size_t i = 0; i < acc.d_weights.size(); ++i)
                        acc.d_weights.data()[i] += g.d_weights.data()[i];
                    for (std::size_t i = 0; i < acc.d_bias.size(); ++i)
                        acc.d_bias[i] += g.d_bias[i];
                }
            if (config.l2 != 0.0)
                for (std::size_t l = 0; l < shared.layers.size(); ++l) {
                    const auto& w = shared.layers[l].weights.data();
                    auto& gw = shared_grads.layers[l].d_weights.data();
                    for (std::size_t i = 0; i < w.size(); ++i) gw[i] += config.l2 * w[i];
                }

            const double lr = learning_rate(config, epoch);
            sgd_step(shared, shared_grads, shared_state, config, epoch);
            for (std::size_t k = 0; k < factors.size(); ++k)
                for (std::size_t l = 0; l < factors[k].size(); ++l) {
                    auto& f = factors[k][l];
                    auto& v = factor_state[k][l];
                    const auto& g = member_grads[k].factors[l];
                    for (std::size_t i = 0; i < f.r.size(); ++i) {
                        v.r[i] = config.momentum * v.r[i] + g.r[i];
                        f.r[i] -= lr * v.r[i];
                    }
                    for (std::size_t i = 0; i < f.s.size(); ++i) {
                        v.s[i] = config.momentum * v.s[i] + g.s[i];
                        f.s[i] -= lr * v.s[i];
                    }
                }
            strategy.end_batch();
        }
        strategy.end_epoch(epoch);
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    return result;
}

inline std::vector<RankOneFactors> init_factors(const DenseNet& shared, double std, RngStream& rng) {
    std::vector<RankOneFactors> factors;
    for (const auto& layer : shared.layers) {
        RankOneFactors f;
        f.r.resize(layer.out_dim());
        f.s.resize(layer.in_dim());
        for (auto& v : f.r) v = rng.normal(1.0, std);
        for (auto& v : f.s) v = rng.normal(1.0, std);
        factors.push_back(std::move(f));
    }
    return factors;
}

struct EnsembleTrainOutput {
    EnsembleModel model;
    std::vector<TrainResult> results;                          // per member (deep) or single
    std::vector<std::unique_ptr<AugmentStrategy>> strategies;  // same arity
};

/// Trains an ensemble. Deep members run independently (optionally in
/// parallel; each owns a derived seed so the schedule cannot change results),
/// MC-Dropout trains one net with dropout active, BatchEnsemble trains
/// jointly with per-member rank-1 factors.
inline EnsembleTrainOutput train_ensemble(EnsembleMode mode, int ensemble_size,
                                          const LabeledDataset& train, const LabeledDataset& val,
                                          const TrainConfig& config, const NetSpec& net_spec,
                                          const StrategyFactory& make_strategy,
                                          std::size_t workers = 1) {
    if (ensemble_size < 1) throw config_error("train_ensemble: K must be >= 1");
    if (train.size() == 0) throw config_error("train_ensemble: empty training split");
    const auto dims = net_spec.dims(train.dim(), train.num_classes);
    const std::uint64_t seed = config.seed;

    EnsembleTrainOutput out;
    out.model.mode = mode;
    out.model.ensemble_size = ensemble_size;
    out.model.seed = seed;

    switch (mode) {
        case EnsembleMode::deep: {
            out.model.members.resize(ensemble_size);
            out.results.resize(ensemble_size);
            out.strategies.resize(ensemble_size);
            parallel_for(static_cast<std::size_t>(ensemble_size), workers, [&](std::size_t k) {
                const std::uint64_t member_seed = derive_seed(seed, "member", k);
                RngStream rng_init(derive_seed(member_seed, "init"));
                DenseNet net = make_net(dims, rng_init, net_spec.dropout_rate);
                auto strategy = make_strategy();
                out.results[k] = train_single(net, train, val, config, *strategy, member_seed);
                out.model.members[k] = std::move(net);
                out.strategies[k] = std::move(strategy);
            });
            break;
        }
        case EnsembleMode::mc_dropout: {
            if (net_spec.dropout_rate <= 0.0)
                throw config_error("train_ensemble: mc_dropout needs dropout_rate > 0");
            const std::uint64_t member_seed = derive_seed(seed, "member", 0);
            RngStream rng_init(derive_seed(member_seed, "init"));
            DenseNet net = make_net(dims, rng_init, net_spec.dropout_rate);
            auto strategy = make_strategy();
            out.results.push_back(train_single(net, train, val, config, *strategy, member_seed));
            out.model.members.push_back(std::move(net));
            out.strategies.push_back(std::move(strategy));
            break;
        }
        case EnsembleMode::batch_ensemble: {
            RngStream rng_init(derive_seed(seed, "shared-init"));
            DenseNet shared = make_net(dims, rng_init, net_spec.dropout_rate);
            RngStream rng_factors(derive_seed(seed, "factors"));
            std::vector<std::vector<RankOneFactors>> factors;
            for (int k = 0; k < ensemble_size; ++k)
                factors.push_back(init_factors(shared, net_spec.factor_init_std, rng_factors));
            auto strategy = make_strategy();
            out.results.push_back(train_batch_ensemble(shared, factors, train, val, config,
                                                       *strategy, derive_seed(seed, "joint")));
            out.model.members.push_back(std::move(shared));
            out.model.factors = std::move(factors);
            out.strategies.push_back(std::move(strategy));
            break;
        }
    }
    out.model.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Arithmetic mean of the K member probability vectors. MC-Dropout samples K
/// dropout masks from the provided stream.
inline PredictionBatch predict_ensemble(const EnsembleModel& model, const Matrix& x,
                                        RngStream& rng) {
    model.validate();
    const std::size_t num_classes = model.members.front().num_classes();
    Matrix mean(x.rows(), num_classes);
    const auto accumulate = [&](const Matrix& probs) {
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean.data()[i] += probs.data()[i] / static_cast<double>(model.ensemble_size);
    };
    switch (model.mode) {
        case EnsembleMode::deep:
            for (const auto& member : model.members) accumulate(forward(member, x).probs);
            break;
        case EnsembleMode::mc_dropout:
            for (int k = 0; k < model.ensemble_size; ++k)
                accumulate(forward(model.shared(), x, Mode::mc_sample, rng).probs);
            break;
        case EnsembleMode::batch_ensemble:
            for (const auto& member : model.factors)
                accumulate(be_forward(model.shared(), member, x).probs);
            break;
    }
    return PredictionBatch(std::move(mean));
}

inline PredictionBatch predict_ensemble(const EnsembleModel& model, const Matrix& x) {
    RngStream rng(derive_seed(model.seed, "predict"));
    return predict_ensemble(model, x, rng);
}

/// Extra parameters a BatchEnsemble adds on top of the shared net:
/// K * (out_dim + in_dim) per layer.
inline std::size_t batch_ensemble_extra_parameters(const EnsembleModel& model) {
    std::size_t count = 0;
    for (const auto& member : model.factors)
        for (const auto& f : member) count += f.r.size() + f.s.size();
    return count;
}

} // namespace calab

#endif // CALAB_ENSEMBLE_HPP
