#ifndef CALAB_NET_HPP
#define CALAB_NET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "calab/errors.hpp"
#include "calab/matrix.hpp"
#include "calab/rng.hpp"

namespace calab {

constexpr double kLogEps = 1e-12;

/// How a forward pass treats dropout. `mc_sample` exists so the MC-Dropout
/// ensembler can keep sampling masks at prediction time while ordinary
/// evaluation stays deterministic.
enum class Mode { train, eval, mc_sample };

inline bool dropout_active(Mode mode, double rate) {
    return rate > 0.0 && (mode == Mode::train || mode == Mode::mc_sample);
}

struct DenseLayer {
    Matrix weights;             // (out_dim x in_dim)
    std::vector<double> bias;   // (out_dim)

    std::size_t in_dim() const { return weights.cols(); }
    std::size_t out_dim() const { return weights.rows(); }
};

/// Fully connected net: ReLU on hidden layers, softmax on the output layer,
/// optional dropout after each hidden activation.
struct DenseNet {
    std::vector<DenseLayer> layers;
    double dropout_rate = 0.0;

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }
    std::size_t num_classes() const { return out_dim(); }

    void validate() const {
        if (layers.empty()) throw config_error("DenseNet: no layers");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw config_error("DenseNet: dropout_rate must be in [0,1)");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].bias.size() != layers[l].out_dim())
                throw shape_error("DenseNet: bias length mismatch in layer " + std::to_string(l));
            if (l + 1 < layers.size() && layers[l].out_dim() != layers[l + 1].in_dim())
                throw shape_error("DenseNet: layer dimensions do not chain at layer " +
                                  std::to_string(l));
        }
    }
};

/// He initialization: N(0, sqrt(2/fan_in)) weights, zero biases.
inline DenseNet make_net(const std::vector<std::size_t>& dims, RngStream& rng,
                         double dropout_rate = 0.0) {
    if (dims.size() < 2) throw config_error("make_net: need at least input and output dims");
    DenseNet net;
    net.dropout_rate = dropout_rate;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        layer.weights = Matrix(dims[l + 1], dims[l]);
        const double std = std::sqrt(2.0 / static_cast<double>(dims[l]));
        for (auto& w : layer.weights.data()) w = rng.normal(0.0, std);
        layer.bias.assign(dims[l + 1], 0.0);
        net.layers.push_back(std::move(layer));
    }
    net.validate();
    return net;
}

/// Per-example class probabilities with the derived label and confidence.
struct PredictionBatch {
    Matrix probs;                    // (B x C)
    std::vector<int> predicted;      // argmax per row
    std::vector<double> confidence;  // max probability per row

    PredictionBatch() = default;
    explicit PredictionBatch(Matrix p) : probs(std::move(p)) {
        predicted.resize(probs.rows());
        confidence.resize(probs.rows());
        for (std::size_t i = 0; i < probs.rows(); ++i) {
            const double* r = probs.row(i);
            std::size_t best = 0;
            for (std::size_t c = 1; c < probs.cols(); ++c)
                if (r[c] > r[best]) best = c;
            predicted[i] = static_cast<int>(best);
            confidence[i] = r[best];
        }
    }

    std::size_t size() const { return probs.rows(); }
    std::size_t num_classes() const { return probs.cols(); }
};

inline void softmax_rows_inplace(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double* r = m.row(i);
        double mx = r[0];
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, r[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (std::size_t j = 0; j < m.cols(); ++j) r[j] /= sum;
    }
}

/// All intermediates of one forward pass; backward() consumes this so the
/// same dropout masks are reused, and tests can freeze masks explicitly.
struct ForwardTrace {
    Matrix input;
    std::vector<Matrix> pre_activations;   // z per layer
    std::vector<Matrix> activations;       // post ReLU+dropout per hidden layer
    std::vector<Matrix> dropout_masks;     // multiplier (0 or 1/keep); empty if inactive
    Matrix logits;
    Matrix probs;
};

namespace detail {

inline void check_forward_input(const DenseNet& net, const Matrix& x) {
    if (x.cols() != net.in_dim())
        throw shape_error("forward: input has " + std::to_string(x.cols()) +
                          " columns, net expects " + std::to_string(net.in_dim()));
    if (!x.all_finite()) throw input_error("forward: non-finite input");
}

} // namespace detail

inline ForwardTrace forward_trace(const DenseNet& net, const Matrix& x, Mode mode,
                                  RngStream& rng) {
    detail::check_forward_input(net, x);
    const bool sample_dropout = dropout_active(mode, net.dropout_rate);
    const double keep = 1.0 - net.dropout_rate;

    ForwardTrace trace;
    trace.input = x;
    const Matrix* current = &trace.input;
    for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
        Matrix z = matmul_nt(*current, net.layers[l].weights);
        for (std::size_t i = 0; i < z.rows(); ++i) {
            double* r = z.row(i);
            for (std::size_t j = 0; j < z.cols(); ++j) r[j] += net.layers[l].bias[j];
        }
        trace.pre_activations.push_back(z);
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

    Matrix logits = matmul_nt(*current, net.layers.back().weights);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double* r = logits.row(i);
        for (std::size_t j = 0; j < logits.cols(); ++j) r[j] += net.layers.back().bias[j];
    }
    trace.pre_activations.push_back(logits);
    trace.logits = std::move(logits);
    trace.probs = trace.logits;
    softmax_rows_inplace(trace.probs);
    return trace;
}

inline Matrix forward_logits(const DenseNet& net, const Matrix& x, Mode mode, RngStream& rng) {
    return forward_trace(net, x, mode, rng).logits;
}

inline PredictionBatch forward(const DenseNet& net, const Matrix& x, Mode mode, RngStream& rng) {
    return PredictionBatch(forward_trace(net, x, mode, rng).probs);
}

/// Eval-mode forward without an RNG (no dropout is ever sampled).
inline PredictionBatch forward(const DenseNet& net, const Matrix& x) {
    RngStream unused(0);
    return forward(net, x, Mode::eval, unused);
}

inline bool is_soft_label_row(const double* row, std::size_t c, double tol = 1e-9) {
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        if (row[j] < 0.0) return false;
        sum += row[j];
    }
    return std::abs(sum - 1.0) <= tol;
}

inline void validate_soft_labels(const Matrix& y) {
    for (std::size_t i = 0; i < y.rows(); ++i)
        if (!is_soft_label_row(y.row(i), y.cols()))
            throw input_error("soft labels: row " + std::to_string(i) +
                              " is not a probability distribution");
}

inline Matrix one_hot(const std::vector<int>& labels, std::size_t num_classes) {
    Matrix y(labels.size(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw input_error("one_hot: label out of range");
        y(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return y;
}

/// Mean over the batch of -sum_c target_c * log(p_c + eps).
inline double soft_cross_entropy(const Matrix& probs, const Matrix& targets) {
    if (!probs.same_shape(targets))
        throw shape_error("soft_cross_entropy: prediction/target shapes differ");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const double* p = probs.row(i);
        const double* t = targets.row(i);
        for (std::size_t c = 0; c < probs.cols(); ++c)
            if (t[c] != 0.0) total -= t[c] * std::log(p[c] + kLogEps);
    }
    return total / static_cast<double>(probs.rows());
}

inline double soft_cross_entropy(const PredictionBatch& pred, const Matrix& targets) {
    return soft_cross_entropy(pred.probs, targets);
}

struct LayerGrad {
    Matrix d_weights;
    std::vector<double> d_bias;
};

struct Gradients {
    std::vector<LayerGrad> layers;
};

/// Exact gradient of soft_cross_entropy(forward(net, x), targets) plus the
/// (l2/2)*||W||^2 weight decay term, reusing the trace's dropout masks.
inline Gradients backward(const DenseNet& net, const ForwardTrace& trace, const Matrix& targets,
                          double l2 = 0.0) {
    if (!trace.probs.same_shape(targets))
        throw shape_error("backward: prediction/target shapes differ");
    const std::size_t num_layers = net.layers.size();
    const double inv_b = 1.0 / static_cast<double>(trace.probs.rows());

    Gradients grads;
    grads.layers.resize(num_layers);

    // Softmax with cross-entropy: dL/dlogits = (p - y) / B.
    Matrix delta(trace.probs.rows(), trace.probs.cols());
    for (std::size_t i = 0; i < delta.size(); ++i)
        delta.data()[i] = (trace.probs.data()[i] - targets.data()[i]) * inv_b;

    for (std::size_t l = num_layers; l-- > 0;) {
        const Matrix& layer_input = (l == 0) ? trace.input : trace.activations[l - 1];
        LayerGrad& g = grads.layers[l];
        g.d_weights = matmul_tn(delta, layer_input);
        if (l2 != 0.0) {
            const auto& w = net.layers[l].weights.data();
            for (std::size_t i = 0; i < w.size(); ++i) g.d_weights.data()[i] += l2 * w[i];
        }
        g.d_bias.assign(net.layers[l].out_dim(), 0.0);
        for (std::size_t i = 0; i < delta.rows(); ++i) {
            const double* r = delta.row(i);
            for (std::size_t j = 0; j < delta.cols(); ++j) g.d_bias[j] += r[j];
        }
        if (l == 0) break;

        Matrix dh = matmul_nn(delta, net.layers[l].weights);
        if (!trace.dropout_masks.empty())
            for (std::size_t i = 0; i < dh.size(); ++i)
                dh.data()[i] *= trace.dropout_masks[l - 1].data()[i];
        const Matrix& z = trace.pre_activations[l - 1];
        for (std::size_t i = 0; i < dh.size(); ++i)
            if (z.data()[i] <= 0.0) dh.data()[i] = 0.0;
        delta = std::move(dh);
    }
    return grads;
}

/// Dropout-free gradient (eval-mode forward under the hood).
inline Gradients backward(const DenseNet& net, const Matrix& x, const Matrix& targets,
                          double l2 = 0.0) {
    RngStream unused(0);
    return backward(net, forward_trace(net, x, Mode::eval, unused), targets, l2);
}

struct TrainConfig {
    int epochs = 200;
    double base_lr = 0.1;
    double lr_decay_ratio = 0.1;
    std::vector<int> lr_decay_epochs = {80, 160};
    double momentum = 0.9;
    double l2 = 1e-4;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs <= 0) throw config_error("TrainConfig: epochs must be > 0");
        if (base_lr <= 0.0) throw config_error("TrainConfig: base_lr must be > 0");
        if (batch_size < 2) throw config_error("TrainConfig: batch_size must be >= 2");
        for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
            if (lr_decay_epochs[i] >= epochs)
                throw config_error("TrainConfig: decay epoch beyond training length");
            if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])
                throw config_error("TrainConfig: decay epochs must be strictly increasing");
        }
    }
};

/// Step schedule: base_lr * decay_ratio^(number of decay epochs passed).
inline double learning_rate(const TrainConfig& config, int epoch) {
    int passed = 0;
    for (int d : config.lr_decay_epochs)
        if (epoch >= d) ++passed;
    return config.base_lr * std::pow(config.lr_decay_ratio, passed);
}

/// Momentum buffers matching the net's parameter shapes.
struct SgdState {
    std::vector<LayerGrad> velocity;

    static SgdState zeros_like(const DenseNet& net) {
        SgdState state;
        for (const auto& layer : net.layers) {
            LayerGrad v;
            v.d_weights = Matrix(layer.out_dim(), layer.in_dim());
            v.d_bias.assign(layer.out_dim(), 0.0);
            state.velocity.push_back(std::move(v));
        }
        return state;
    }
};

/// v <- momentum*v + g;  w <- w - lr(epoch)*v.
inline void sgd_step(DenseNet& net, const Gradients& grads, SgdState& state,
                     const TrainConfig& config, int epoch) {
    const double lr = learning_rate(config, epoch);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& v = state.velocity[l];
        const auto& g = grads.layers[l];
        auto& w = net.layers[l].weights.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            v.d_weights.data()[i] = config.momentum * v.d_weights.data()[i] + g.d_weights.data()[i];
            w[i] -= lr * v.d_weights.data()[i];
        }
        auto& b = net.layers[l].bias;
        for (std::size_t i = 0; i < b.size(); ++i) {
            v.d_bias[i] = config.momentum * v.d_bias[i] + g.d_bias[i];
            b[i] -= lr * v.d_bias[i];
        }
    }
}

inline std::size_t parameter_count(const DenseNet& net) {
    std::size_t n = 0;
    for (const auto& layer : net.layers) n += layer.weights.size() + layer.bias.size();
    return n;
}

} // namespace calab

#endif // CALAB_NET_HPP
