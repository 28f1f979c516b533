#ifndef CALAB_CALIBRATION_HPP
#define CALAB_CALIBRATION_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calab/errors.hpp"
#include "calab/net.hpp"

namespace calab {

/// Which per-example quantity Conf(C_i) averages: the predicted-class
/// probability (the usual confidence) or the probability of the true class.
enum class ConfDefinition { max_prob, true_class_prob };

/// Equal-width confidence bins over (0,1]. Bin m (1-based) covers
/// ((m-1)/M, m/M]; confidence exactly 0 is assigned to bin 1.
struct BinStats {
    int num_bins = 0;
    std::vector<std::size_t> count;
    std::vector<double> accuracy;
    std::vector<double> confidence;
    std::size_t total = 0;

    double bin_lo(int m) const { return static_cast<double>(m) / num_bins; }       // m is 0-based
    double bin_hi(int m) const { return static_cast<double>(m + 1) / num_bins; }
    double bin_mid(int m) const { return (m + 0.5) / num_bins; }
};

/// 0-based index of the right-closed interval ((m-1)/M, m/M] holding `conf`.
inline int confidence_bin(double conf, int num_bins) {
    int m = static_cast<int>(std::ceil(conf * num_bins));
    m = std::clamp(m, 1, num_bins);
    // Settle floating-point boundary cases exactly on the interval definition.
    while (m > 1 && conf <= static_cast<double>(m - 1) / num_bins) --m;
    while (m < num_bins && conf > static_cast<double>(m) / num_bins) ++m;
    return m - 1;
}

inline void check_labels(const PredictionBatch& preds, const std::vector<int>& labels) {
    if (labels.size() != preds.size())
        throw shape_error("labels/predictions size mismatch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= preds.num_classes())
            throw input_error("label out of range");
}

inline BinStats bin_predictions(const PredictionBatch& preds, const std::vector<int>& labels,
                                int num_bins) {
    if (num_bins < 1) throw config_error("bin_predictions: need at least one bin");
    if (preds.size() == 0) throw metric_error("bin_predictions: empty prediction set");
    check_labels(preds, labels);

    BinStats bins;
    bins.num_bins = num_bins;
    bins.count.assign(num_bins, 0);
    bins.total = preds.size();
    std::vector<double> sum_correct(num_bins, 0.0), sum_conf(num_bins, 0.0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int m = confidence_bin(preds.confidence[i], num_bins);
        bins.count[m] += 1;
        sum_correct[m] += preds.predicted[i] == labels[i] ? 1.0 : 0.0;
        sum_conf[m] += preds.confidence[i];
    }
    bins.accuracy.assign(num_bins, 0.0);
    bins.confidence.assign(num_bins, 0.0);
    for (int m = 0; m < num_bins; ++m) {
        if (bins.count[m] == 0) continue;
        bins.accuracy[m] = sum_correct[m] / static_cast<double>(bins.count[m]);
        bins.confidence[m] = sum_conf[m] / static_cast<double>(bins.count[m]);
    }
    return bins;
}

/// ECE = sum_m (|B_m|/N) * |Acc(B_m) - Conf(B_m)|.
inline double ece(const BinStats& bins) {
    if (bins.total == 0) throw metric_error("ece: no predictions");
    double total = 0.0;
    for (int m = 0; m < bins.num_bins; ++m) {
        if (bins.count[m] == 0) continue;
        const double weight = static_cast<double>(bins.count[m]) / static_cast<double>(bins.total);
        total += weight * std::abs(bins.accuracy[m] - bins.confidence[m]);
    }
    return total;
}

inline double ece(const PredictionBatch& preds, const std::vector<int>& labels, int num_bins) {
    return ece(bin_predictions(preds, labels, num_bins));
}

namespace detail {

/// Ranks sorted ascending by key with index tiebreak, so binning is
/// deterministic under duplicated values.
inline std::vector<std::size_t> sorted_order(const std::vector<double>& keys) {
    std::vector<std::size_t> order(keys.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b]) return keys[a] < keys[b];
        return a < b;
    });
    return order;
}

/// Adaptive-binned calibration term over (value, correct) pairs: equal-count
/// bins by rank, weighted |frequency - mean value| gaps, weights |B|/denom.
inline double adaptive_gap_term(const std::vector<double>& values,
                                const std::vector<double>& correct, int num_bins,
                                double denom) {
    const std::size_t n = values.size();
    const int bins = std::min<int>(num_bins, static_cast<int>(n));
    const auto order = sorted_order(values);
    double total = 0.0;
    std::size_t start = 0;
    for (int m = 0; m < bins; ++m) {
        // Ranks [m*n/bins, (m+1)*n/bins): occupancies differ by at most one.
        const std::size_t stop = (static_cast<std::size_t>(m) + 1) * n / bins;
        double sum_val = 0.0, sum_correct = 0.0;
        for (std::size_t r = start; r < stop; ++r) {
            sum_val += values[order[r]];
            sum_correct += correct[order[r]];
        }
        const auto count = stop - start;
        if (count > 0) {
            const double gap = std::abs(sum_correct / count - sum_val / count);
            total += (static_cast<double>(count) / denom) * gap;
        }
        start = stop;
    }
    return total;
}

} // namespace detail

/// Adaptive calibration error: equal-count bins by confidence rank, then the
/// same weighted-gap formula as ECE.
inline double ace(const PredictionBatch& preds, const std::vector<int>& labels, int num_bins) {
    if (num_bins < 1) throw config_error("ace: need at least one bin");
    if (preds.size() < static_cast<std::size_t>(num_bins))
        throw metric_error("ace: fewer predictions than bins");
    check_labels(preds, labels);
    std::vector<double> correct(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        correct[i] = preds.predicted[i] == labels[i] ? 1.0 : 0.0;
    return detail::adaptive_gap_term(preds.confidence, correct, num_bins,
                                     static_cast<double>(preds.size()));
}

/// Occupancies of the ACE bins, exposed for the equal-count invariant.
inline std::vector<std::size_t> ace_bin_occupancy(std::size_t n, int num_bins) {
    const int bins = std::min<int>(num_bins, static_cast<int>(n));
    std::vector<std::size_t> occ(bins, 0);
    std::size_t start = 0;
    for (int m = 0; m < bins; ++m) {
        const std::size_t stop = (static_cast<std::size_t>(m) + 1) * n / bins;
        occ[m] = stop - start;
        start = stop;
    }
    return occ;
}

/// Per-class contribution to SCE with equal-width bins over class-c
/// probabilities: sum_m (|B_m|/N) * |freq(y = c in B_m) - mean p_c in B_m|.
inline double sce_class_term(const PredictionBatch& preds, const std::vector<int>& labels,
                             int num_bins, int cls) {
    std::vector<double> sum_p(num_bins, 0.0), sum_match(num_bins, 0.0);
    std::vector<std::size_t> count(num_bins, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double p = preds.probs(i, static_cast<std::size_t>(cls));
        const int m = confidence_bin(p, num_bins);
        count[m] += 1;
        sum_p[m] += p;
        sum_match[m] += labels[i] == cls ? 1.0 : 0.0;
    }
    double total = 0.0;
    for (int m = 0; m < num_bins; ++m) {
        if (count[m] == 0) continue;
        const double gap = std::abs(sum_match[m] / count[m] - sum_p[m] / count[m]);
        total += (static_cast<double>(count[m]) / static_cast<double>(preds.size())) * gap;
    }
    return total;
}

/// Static calibration error: ECE extended over every class, averaged.
inline double sce(const PredictionBatch& preds, const std::vector<int>& labels, int num_bins) {
    if (num_bins < 1) throw config_error("sce: need at least one bin");
    if (preds.size() == 0) throw metric_error("sce: empty prediction set");
    check_labels(preds, labels);
    double total = 0.0;
    for (std::size_t c = 0; c < preds.num_classes(); ++c)
        total += sce_class_term(preds, labels, num_bins, static_cast<int>(c));
    return total / static_cast<double>(preds.num_classes());
}

/// Thresholded adaptive calibration error: SCE restricted to class
/// probabilities above `threshold`, with equal-count bins per class.
inline double tace(const PredictionBatch& preds, const std::vector<int>& labels, int num_bins,
                   double threshold) {
    if (threshold < 0.0 || threshold >= 1.0)
        throw config_error("tace: threshold must be in [0,1)");
    if (num_bins < 1) throw config_error("tace: need at least one bin");
    if (preds.size() == 0) throw metric_error("tace: empty prediction set");
    check_labels(preds, labels);

    double total = 0.0;
    std::size_t classes_counted = 0;
    for (std::size_t c = 0; c < preds.num_classes(); ++c) {
        std::vector<double> values, correct;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const double p = preds.probs(i, c);
            if (p > threshold) {
                values.push_back(p);
                correct.push_back(labels[i] == static_cast<int>(c) ? 1.0 : 0.0);
            }
        }
        if (values.empty()) continue;
        total += detail::adaptive_gap_term(values, correct, num_bins,
                                           static_cast<double>(values.size()));
        ++classes_counted;
    }
    if (classes_counted == 0)
        throw metric_error("tace: no probability survives the threshold");
    return total / static_cast<double>(classes_counted);
}

inline double accuracy(const PredictionBatch& preds, const std::vector<int>& labels) {
    if (preds.size() == 0) throw metric_error("accuracy: empty prediction set");
    check_labels(preds, labels);
    double correct = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds.predicted[i] == labels[i]) correct += 1.0;
    return correct / static_cast<double>(preds.size());
}

inline double mean_confidence(const PredictionBatch& preds) {
    if (preds.size() == 0) throw metric_error("mean_confidence: empty prediction set");
    double sum = 0.0;
    for (double c : preds.confidence) sum += c;
    return sum / static_cast<double>(preds.size());
}

/// Mean negative log-likelihood of the true label.
inline double nll(const PredictionBatch& preds, const std::vector<int>& labels) {
    if (preds.size() == 0) throw metric_error("nll: empty prediction set");
    check_labels(preds, labels);
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        total -= std::log(preds.probs(i, static_cast<std::size_t>(labels[i])) + kLogEps);
    return total / static_cast<double>(preds.size());
}

/// One reliability-diagram point; positive gap = under-confident.
struct ReliabilityPoint {
    double bin_mid = 0.0;
    double gap = 0.0;  // Acc - Conf
    std::size_t count = 0;
};

inline std::vector<ReliabilityPoint> reliability_data(const BinStats& bins) {
    std::vector<ReliabilityPoint> series(bins.num_bins);
    for (int m = 0; m < bins.num_bins; ++m) {
        series[m].bin_mid = bins.bin_mid(m);
        series[m].count = bins.count[m];
        series[m].gap = bins.count[m] == 0 ? 0.0 : bins.accuracy[m] - bins.confidence[m];
    }
    return series;
}

struct PerClassStat {
    std::size_t count = 0;
    double accuracy = 0.0;
    double confidence = 0.0;
    double gap = 0.0;  // accuracy - confidence
};

/// Acc(C_i) and Conf(C_i) grouped by true class.
inline std::vector<PerClassStat> per_class_stats(const PredictionBatch& preds,
                                                 const std::vector<int>& labels,
                                                 ConfDefinition conf_def = ConfDefinition::max_prob) {
    check_labels(preds, labels);
    std::vector<PerClassStat> stats(preds.num_classes());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto& s = stats[static_cast<std::size_t>(labels[i])];
        s.count += 1;
        s.accuracy += preds.predicted[i] == labels[i] ? 1.0 : 0.0;
        s.confidence += conf_def == ConfDefinition::max_prob
                            ? preds.confidence[i]
                            : preds.probs(i, static_cast<std::size_t>(labels[i]));
    }
    for (auto& s : stats) {
        if (s.count == 0) continue;
        s.accuracy /= static_cast<double>(s.count);
        s.confidence /= static_cast<double>(s.count);
        s.gap = s.accuracy - s.confidence;
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Temperature scaling
// ---------------------------------------------------------------------------

/// Mean NLL of softmax(scores / T); scores may be logits or log-probabilities.
inline double nll_at_temperature(const Matrix& scores, const std::vector<int>& labels, double t) {
    if (scores.rows() != labels.size())
        throw shape_error("nll_at_temperature: scores/labels size mismatch");
    if (t <= 0.0) throw config_error("nll_at_temperature: T must be > 0");
    double total = 0.0;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const double* z = scores.row(i);
        double mx = z[0] / t;
        for (std::size_t c = 1; c < scores.cols(); ++c) mx = std::max(mx, z[c] / t);
        double lse = 0.0;
        for (std::size_t c = 0; c < scores.cols(); ++c) lse += std::exp(z[c] / t - mx);
        lse = std::log(lse) + mx;
        total += lse - z[static_cast<std::size_t>(labels[i])] / t;
    }
    return total / static_cast<double>(scores.rows());
}

/// Fits T > 0 minimizing validation NLL of softmax(scores/T). Coarse grid
/// over log T in [-3, 3], then golden-section refinement to 1e-4; the result
/// never does worse than T = 1.
inline double temperature_fit(const Matrix& scores, const std::vector<int>& labels) {
    if (scores.rows() == 0) throw metric_error("temperature_fit: empty validation set");
    if (scores.rows() != labels.size())
        throw shape_error("temperature_fit: scores/labels size mismatch");
    const int first = labels.front();
    if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == first; }))
        throw metric_error("temperature_fit: degenerate single-class validation set");

    const auto objective = [&](double u) { return nll_at_temperature(scores, labels, std::exp(u)); };

    constexpr double lo = -3.0, hi = 3.0;
    constexpr int grid_points = 121;  // step 0.05, includes u = 0 exactly
    double best_u = 0.0, best_f = objective(0.0);
    const double step = (hi - lo) / (grid_points - 1);
    for (int i = 0; i < grid_points; ++i) {
        const double u = lo + i * step;
        const double f = objective(u);
        if (f < best_f) {
            best_f = f;
            best_u = u;
        }
    }

    // Golden-section refinement inside the bracketing grid cell.
    constexpr double phi = 0.6180339887498949;
    double a = std::max(lo, best_u - step), b = std::min(hi, best_u + step);
    double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
    double f1 = objective(x1), f2 = objective(x2);
    while (b - a > 1e-4) {
        if (f1 < f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = objective(x2);
        }
    }
    const double refined_u = (a + b) / 2.0;
    if (objective(refined_u) < best_f) best_u = refined_u;

    // Contract: NLL at the fitted temperature never exceeds NLL at T = 1.
    if (nll_at_temperature(scores, labels, std::exp(best_u)) >
        nll_at_temperature(scores, labels, 1.0))
        return 1.0;
    return std::exp(best_u);
}

inline PredictionBatch apply_temperature(const Matrix& scores, double t) {
    if (t <= 0.0) throw config_error("apply_temperature: T must be > 0");
    Matrix scaled = scores;
    for (auto& v : scaled.data()) v /= t;
    softmax_rows_inplace(scaled);
    return PredictionBatch(std::move(scaled));
}

/// Natural scores for post-hoc scaling of an ensemble: the log of the
/// aggregated probabilities acts as the logit vector.
inline Matrix log_prob_scores(const PredictionBatch& preds) {
    Matrix scores = preds.probs;
    for (auto& v : scores.data()) v = std::log(v + kLogEps);
    return scores;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct CalibrationReport {
    double ece = 0.0;
    double ace = 0.0;
    double sce = 0.0;
    double tace = 0.0;
    double nll = 0.0;
    double accuracy = 0.0;
    double mean_confidence = 0.0;
    BinStats bins;
    std::vector<PerClassStat> per_class;
    std::optional<double> fitted_temperature;
};

inline CalibrationReport make_report(const PredictionBatch& preds, const std::vector<int>& labels,
                                     int num_bins = 15, double tace_threshold = 0.01,
                                     ConfDefinition conf_def = ConfDefinition::max_prob) {
    CalibrationReport report;
    report.bins = bin_predictions(preds, labels, num_bins);
    report.ece = ece(report.bins);
    report.ace = ace(preds, labels, num_bins);
    report.sce = sce(preds, labels, num_bins);
    report.tace = tace(preds, labels, num_bins, tace_threshold);
    report.nll = nll(preds, labels);
    report.accuracy = accuracy(preds, labels);
    report.mean_confidence = mean_confidence(preds);
    report.per_class = per_class_stats(preds, labels, conf_def);
    return report;
}

inline nlohmann::json report_to_json(const CalibrationReport& report) {
    nlohmann::json j;
    j["metrics"] = {{"ece", report.ece},       {"ace", report.ace},
                    {"sce", report.sce},       {"tace", report.tace},
                    {"nll", report.nll},       {"accuracy", report.accuracy},
                    {"mean_confidence", report.mean_confidence}};
    j["bins"] = nlohmann::json::array();
    for (int m = 0; m < report.bins.num_bins; ++m) {
        j["bins"].push_back({{"lo", report.bins.bin_lo(m)},
                             {"hi", report.bins.bin_hi(m)},
                             {"count", report.bins.count[m]},
                             {"accuracy", report.bins.accuracy[m]},
                             {"confidence", report.bins.confidence[m]}});
    }
    j["per_class"] = nlohmann::json::array();
    for (const auto& s : report.per_class) {
        j["per_class"].push_back({{"count", s.count},
                                  {"accuracy", s.accuracy},
                                  {"confidence", s.confidence},
                                  {"gap", s.gap}});
    }
    if (report.fitted_temperature)
        j["fitted_temperature"] = *report.fitted_temperature;
    else
        j["fitted_temperature"] = nullptr;
    return j;
}

inline std::string reliability_csv(const BinStats& bins) {
    std::ostringstream out;
    out << "bin_mid,gap,count\n";
    out.precision(17);
    for (const auto& pt : reliability_data(bins))
        out << pt.bin_mid << ',' << pt.gap << ',' << pt.count << '\n';
    return out.str();
}

} // namespace calab

#endif // CALAB_CALIBRATION_HPP
