#pragma once

// Likelihood-based evaluation: Gaussian fits of NLL values, likelihood
// quantiles, quantile drop, forgotten-point test, bits per dimension, the
// Kolmogorov-Smirnov normality check and sampled label fractions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/random.hpp"

#include <nlohmann/json.hpp>

namespace flowtame {

// Smallest standard deviation (nats) accepted for an NLL distribution.
inline constexpr double kSigmaFloor = 1e-6;

struct GaussianFit {
    double mu = 0.0;
    double sigma = 1.0;
};

inline void check_sigma(double sigma) {
    if (!(sigma > kSigmaFloor))
        throw DegenerateStatsError("sigma " + std::to_string(sigma) + " is not above the floor");
}

// Standard normal CDF and upper tail; erfc keeps the tail accurate.
inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
inline double std_normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

inline double normal_cdf(double x, double mu, double sigma) {
    if (!(sigma > 0.0)) throw DegenerateStatsError("normal_cdf needs sigma > 0");
    return std_normal_cdf((x - mu) / sigma);
}

// 1 - Phi(delta): the likelihood quantile at the forgetting threshold.
inline double threshold_quantile(double delta) { return std_normal_sf(delta); }

// Sample mean and population (1/n) standard deviation.
inline GaussianFit fit_gaussian(std::span<const double> values) {
    if (values.size() < 2) throw InsufficientDataError("need at least 2 values to fit a Gaussian");
    const double n = static_cast<double>(values.size());
    double mu = 0.0;
    for (double v : values) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : values) var += (v - mu) * (v - mu);
    GaussianFit fit{mu, std::sqrt(var / n)};
    check_sigma(fit.sigma);
    return fit;
}

inline GaussianFit fit_gaussian(const Eigen::VectorXd& values) {
    return fit_gaussian(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
}

// q = 1 - F_{mu,sigma}(nll)
inline double likelihood_quantile(double nll, const GaussianFit& stats) {
    check_sigma(stats.sigma);
    return std_normal_sf((nll - stats.mu) / stats.sigma);
}

// Mean quantile over a set of NLL values.
inline double likelihood_quantile(const Eigen::VectorXd& nlls, const GaussianFit& stats) {
    if (nlls.size() == 0) throw EmptyInputError("likelihood quantile of an empty set");
    double acc = 0.0;
    for (double v : nlls) acc += likelihood_quantile(v, stats);
    return acc / static_cast<double>(nlls.size());
}

inline double likelihood_quantile(const FlowModel& model, const Batch& set, const GaussianFit& stats) {
    return likelihood_quantile(nll_values(model, set), stats);
}

// Forgotten iff the NLL is at least delta standard deviations above mu,
// i.e. 1 - F(nll) <= 1 - Phi(delta).
inline bool is_forgotten(double nll, const GaussianFit& stats, double delta) {
    check_sigma(stats.sigma);
    return nll >= stats.mu + delta * stats.sigma;
}

inline bool is_forgotten(const FlowModel& model, const Batch& point, const GaussianFit& stats,
                         double delta) {
    if (point.rows() != 1) throw ShapeError("is_forgotten expects a single point");
    return is_forgotten(nll_values(model, point)(0), stats, delta);
}

// Gaussian fit of a model's NLL values on a remember set.
inline GaussianFit remember_stats(const FlowModel& model, const Batch& remember) {
    return fit_gaussian(nll_values(model, remember));
}

struct QuantileDrop {
    double q_base = 0.0;
    double q_tamed = 0.0;
    double drop = 0.0;
};

// q_base(S) - q_tamed(S); each model's quantile uses its own remember stats.
inline QuantileDrop quantile_drop(const FlowModel& base, const FlowModel& tamed, const Batch& set,
                                  const Batch& remember) {
    if (base.dim != tamed.dim) throw ShapeError("quantile_drop: models differ in dim");
    QuantileDrop out;
    out.q_base = likelihood_quantile(base, set, remember_stats(base, remember));
    out.q_tamed = likelihood_quantile(tamed, set, remember_stats(tamed, remember));
    out.drop = out.q_base - out.q_tamed;
    return out;
}

inline double bpd(double nll_nats, int dim) {
    if (dim <= 0) throw ConfigError("bpd needs dim > 0");
    return nll_nats / (static_cast<double>(dim) * std::numbers::ln2);
}

// ------------------------------------------------------------ KS normality

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

// Asymptotic Kolmogorov survival function Q(lambda) = P(K > lambda).
inline double kolmogorov_sf(double lambda) {
    if (lambda <= 0.0) return 1.0;
    if (lambda < 1.18) {
        // Jacobi-theta form converges fast for small lambda.
        const double pi2 = std::numbers::pi * std::numbers::pi;
        double acc = 0.0;
        for (int k = 1; k <= 50; ++k) {
            const double j = 2.0 * k - 1.0;
            acc += std::exp(-j * j * pi2 / (8.0 * lambda * lambda));
        }
        const double cdf = std::sqrt(2.0 * std::numbers::pi) / lambda * acc;
        return std::clamp(1.0 - cdf, 0.0, 1.0);
    }
    double acc = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * k * k * lambda * lambda);
        acc += (k % 2 == 1) ? term : -term;
        if (term < 1e-300) break;
    }
    return std::clamp(2.0 * acc, 0.0, 1.0);
}

// One-sample KS test against N(mu_hat, sigma_hat^2) fitted from the same
// values. No Lilliefors correction, so the p-value is approximate (and
// conservative).
inline KsResult ks_normality_test(std::span<const double> values) {
    if (values.size() < 20) throw InsufficientDataError("KS test needs at least 20 values");
    const GaussianFit fit = fit_gaussian(values);
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double f = std_normal_cdf((sorted[i] - fit.mu) / fit.sigma);
        d = std::max(d, static_cast<double>(i + 1) / n - f);
        d = std::max(d, f - static_cast<double>(i) / n);
    }
    return {d, kolmogorov_sf(std::sqrt(n) * d), sorted.size()};
}

inline KsResult ks_normality_test(const Eigen::VectorXd& values) {
    return ks_normality_test(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
}

// ------------------------------------------------------------ histograms

struct HistogramBin {
    double left;
    double right;
    double density;
};

// Equal-width bins over [min, max]; densities integrate to 1.
inline std::vector<HistogramBin> histogram(const Eigen::VectorXd& values, int bins) {
    if (values.size() == 0) throw EmptyInputError("histogram of an empty set");
    if (bins <= 0) throw ConfigError("histogram needs at least one bin");
    double lo = values.minCoeff();
    double hi = values.maxCoeff();
    if (hi <= lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double width = (hi - lo) / bins;
    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    for (double v : values) {
        auto b = static_cast<int>((v - lo) / width);
        counts[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))] += 1.0;
    }
    std::vector<HistogramBin> out;
    const double n = static_cast<double>(values.size());
    for (int b = 0; b < bins; ++b)
        out.push_back({lo + b * width, lo + (b + 1) * width, counts[static_cast<std::size_t>(b)] / (n * width)});
    return out;
}

// ------------------------------------------------------------ label fractions

using Classifier = std::function<int(const Eigen::RowVectorXd&)>;

// Nearest component mean; stands in for an attribute classifier.
struct NearestMean {
    Batch means;

    int operator()(const Eigen::RowVectorXd& x) const {
        int best = 0;
        double best_d = (means.row(0) - x).squaredNorm();
        for (Eigen::Index k = 1; k < means.rows(); ++k) {
            const double d = (means.row(k) - x).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(k);
            }
        }
        return best;
    }
};

inline std::vector<double> label_fractions(const Batch& points, const Classifier& classify, int n_labels) {
    std::vector<double> frac(static_cast<std::size_t>(n_labels), 0.0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const int label = classify(points.row(i));
        if (label < 0 || label >= n_labels)
            throw ConfigError("classifier returned label " + std::to_string(label));
        frac[static_cast<std::size_t>(label)] += 1.0;
    }
    for (double& f : frac) f /= static_cast<double>(points.rows());
    return frac;
}

inline std::vector<double> attribute_fraction(const FlowModel& model, const Classifier& classify,
                                              int n_labels, int n_samples, Rng& rng) {
    if (n_samples <= 0) throw InvalidCountError("attribute_fraction needs n_samples > 0");
    return label_fractions(sample(model, static_cast<std::size_t>(n_samples), rng), classify, n_labels);
}

// ------------------------------------------------------------ report

struct QuantileEntry {
    std::string set_name;
    double q_base = 0.0;
    double q_tamed = 0.0;
    double quantile_drop = 0.0;
};

struct QuantileReport {
    std::vector<QuantileEntry> entries;
    bool threshold_met = false;
    double delta = 0.0;
    double epsilon = 0.0;
    GaussianFit base_remember;
    GaussianFit tamed_remember;
};

inline nlohmann::json to_json(const QuantileReport& r) {
    nlohmann::json sets = nlohmann::json::array();
    for (const auto& e : r.entries)
        sets.push_back({{"set_name", e.set_name},
                        {"q_base", e.q_base},
                        {"q_tamed", e.q_tamed},
                        {"quantile_drop", e.quantile_drop}});
    return {{"sets", sets},
            {"threshold_met", r.threshold_met},
            {"delta", r.delta},
            {"epsilon", r.epsilon},
            {"threshold_quantile", threshold_quantile(r.delta)},
            {"stats_source", "per-model remember-set fit"},
            {"base_remember_fit", {{"mu", r.base_remember.mu}, {"sigma", r.base_remember.sigma}}},
            {"tamed_remember_fit", {{"mu", r.tamed_remember.mu}, {"sigma", r.tamed_remember.sigma}}}};
}

}  // namespace flowtame
