#pragma once

// Taming: fine-tune a trained base flow so that the NLL of every point in a
// forget set lands within epsilon (in remember-set standard deviations) of
// mu_R + delta * sigma_R, while a remember loss keeps the NLL distribution of
// the remember set close to the base model's.
//
//   dist(x)  = (nll(x) - (mu_R + delta * sigma_R)) / sigma_R
//   L_F      = mean_x sigmoid(sigma_R^2 * dist(x)^2)
//   L_R      = (1 - gamma) * A(X_R) + gamma * (KL(base || tamed) + KL(tamed || base))
//   L        = alpha * L_F + (1 - alpha) * L_R
//
// where the KL terms compare Gaussian fits of remember NLLs. The loop stops
// as soon as |dist| < epsilon for every point of the full forget set.
// Negative delta pulls the forget set towards higher likelihood instead.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flowtame/autodiff.hpp"
#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/metrics.hpp"
#include "flowtame/optim.hpp"
#include "flowtame/random.hpp"
#include "flowtame/train.hpp"

namespace flowtame {

// Which parts of the remember loss participate.
struct AblationFlags {
    bool use_remember_loss = true;
    bool use_forward_kl = true;
    bool use_reverse_kl = true;
    bool use_nll_anchor = true;
};

struct TamingConfig {
    double delta = 4.0;
    double epsilon = 0.6;
    double alpha = 0.6;
    double gamma = 0.6;
    double learning_rate = 5e-4;
    int forget_batch = 10;
    int remember_batch = 256;
    int stats_refresh = 10;
    int max_iterations = 5000;
    OptimizerKind optimizer = OptimizerKind::adam;
    AblationFlags flags;
    std::uint64_t seed = 1;

    void validate() const {
        if (!std::isfinite(delta) || delta == 0.0) throw ConfigError("delta must be a nonzero finite value");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (!(epsilon < std::abs(delta))) throw ConfigError("epsilon must be smaller than |delta|");
        // alpha == 1 is the forget-only ablation; gamma endpoints are allowed.
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in (0, 1]");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (forget_batch <= 0 || remember_batch <= 1) throw ConfigError("batch sizes too small");
        if (stats_refresh <= 0) throw ConfigError("stats_refresh must be positive");
        if (max_iterations <= 0) throw ConfigError("max_iterations must be positive");
    }
};

// (mu_R, sigma_R) of remember NLLs. Nodes are differentiable right after a
// refresh and tape constants in between.
struct NllStats {
    Var mu;
    Var sigma;

    [[nodiscard]] double mu_value() const { return mu.item(); }
    [[nodiscard]] double sigma_value() const { return sigma.item(); }
    [[nodiscard]] GaussianFit fit() const { return {mu_value(), sigma_value()}; }
};

// nlls: n x 1 node of per-point NLLs.
inline NllStats estimate_nll_stats(const Var& nlls) {
    if (nlls.value().size() < 2) throw InsufficientDataError("need at least 2 NLLs to estimate stats");
    Var mu = ad::mean(nlls);
    Var var = ad::mean(ad::square(nlls - mu));
    if (!(std::sqrt(var.item()) > kSigmaFloor))
        throw DegenerateStatsError("sigma_R " + std::to_string(std::sqrt(var.item())) +
                                   " is not above the floor");
    return {mu, ad::sqrt(var)};
}

template <typename Model>
NllStats estimate_nll_stats(Tape& tape, Model& model, const Batch& batch) {
    return estimate_nll_stats(-log_prob(tape, model, batch));
}

inline NllStats constant_stats(Tape& tape, const GaussianFit& fit) {
    check_sigma(fit.sigma);
    return {tape.constant(fit.mu), tape.constant(fit.sigma)};
}

inline double signed_distance(double nll, const GaussianFit& stats, double delta) {
    check_sigma(stats.sigma);
    return (nll - (stats.mu + delta * stats.sigma)) / stats.sigma;
}

inline Var signed_distance(const Var& nlls, const NllStats& stats, double delta) {
    return (nlls - (stats.mu + stats.sigma * delta)) / stats.sigma;
}

// mean sigmoid(sigma_R^2 * dist^2) over the forget NLLs (n x 1).
inline Var forget_loss(const Var& forget_nlls, const NllStats& stats, double delta) {
    if (forget_nlls.value().size() == 0) throw EmptyInputError("forget batch is empty");
    Var d = signed_distance(forget_nlls, stats, delta);
    return ad::mean(ad::sigmoid(ad::square(stats.sigma) * ad::square(d)));
}

template <typename Model>
Var forget_loss(Tape& tape, Model& model, const Batch& forget, const NllStats& stats, double delta) {
    if (forget.rows() == 0) throw EmptyInputError("forget batch is empty");
    return forget_loss(-log_prob(tape, model, forget), stats, delta);
}

// KL(N(p.mu, p.sigma^2) || N(q.mu, q.sigma^2)).
inline double gaussian_kl(const GaussianFit& p, const GaussianFit& q) {
    if (!(p.sigma > 0.0) || !(q.sigma > 0.0)) throw DegenerateStatsError("gaussian_kl needs sigmas > 0");
    const double dm = p.mu - q.mu;
    return std::log(q.sigma / p.sigma) + (p.sigma * p.sigma + dm * dm) / (2.0 * q.sigma * q.sigma) - 0.5;
}

inline Var gaussian_kl(const Var& p_mu, const Var& p_sigma, const Var& q_mu, const Var& q_sigma) {
    if (!(p_sigma.item() > 0.0) || !(q_sigma.item() > 0.0))
        throw DegenerateStatsError("gaussian_kl needs sigmas > 0");
    return ad::log(q_sigma) - ad::log(p_sigma) +
           (ad::square(p_sigma) + ad::square(p_mu - q_mu)) / (ad::square(q_sigma) * 2.0) - 0.5;
}

struct RememberTerms {
    Var loss;
    double anchor = 0.0;      // A(X_R)
    double kl_forward = 0.0;  // KL(base || tamed)
    double kl_reverse = 0.0;  // KL(tamed || base)
};

// Remember loss from the remember-batch NLLs (n x 1). The tamed-side fit is
// differentiable; `base` is a frozen constant.
inline RememberTerms remember_loss(const Var& remember_nlls, const GaussianFit& base, double gamma,
                                   const AblationFlags& flags) {
    if (remember_nlls.value().size() == 0) throw EmptyInputError("remember batch is empty");
    check_sigma(base.sigma);
    Tape& tape = remember_nlls.tape();
    RememberTerms out;
    Var anchor = ad::mean(remember_nlls);
    out.anchor = anchor.item();
    Var loss = tape.constant(0.0);
    if (flags.use_nll_anchor) loss = loss + anchor * (1.0 - gamma);
    if (flags.use_forward_kl || flags.use_reverse_kl) {
        NllStats tamed = estimate_nll_stats(remember_nlls);
        Var base_mu = tape.constant(base.mu);
        Var base_sigma = tape.constant(base.sigma);
        Var kl_f = gaussian_kl(base_mu, base_sigma, tamed.mu, tamed.sigma);
        Var kl_r = gaussian_kl(tamed.mu, tamed.sigma, base_mu, base_sigma);
        out.kl_forward = kl_f.item();
        out.kl_reverse = kl_r.item();
        if (flags.use_forward_kl) loss = loss + kl_f * gamma;
        if (flags.use_reverse_kl) loss = loss + kl_r * gamma;
    }
    out.loss = loss;
    return out;
}

template <typename Model>
RememberTerms remember_loss(Tape& tape, Model& model, const Batch& remember, const GaussianFit& base,
                            double gamma, const AblationFlags& flags) {
    if (remember.rows() == 0) throw EmptyInputError("remember batch is empty");
    return remember_loss(-log_prob(tape, model, remember), base, gamma, flags);
}

struct StoppingCheck {
    bool met = false;
    Eigen::VectorXd dists;
    double max_abs_dist = 0.0;
};

// Strict band test |dist| < epsilon over the whole forget set.
inline StoppingCheck stopping_met(const Eigen::VectorXd& forget_nlls, const GaussianFit& stats,
                                  double delta, double epsilon) {
    if (forget_nlls.size() == 0) throw EmptyInputError("forget set is empty");
    StoppingCheck out;
    out.dists.resize(forget_nlls.size());
    for (Eigen::Index i = 0; i < forget_nlls.size(); ++i)
        out.dists(i) = signed_distance(forget_nlls(i), stats, delta);
    out.max_abs_dist = out.dists.cwiseAbs().maxCoeff();
    out.met = out.max_abs_dist < epsilon;
    return out;
}

inline StoppingCheck stopping_met(const FlowModel& model, const Batch& forget, const GaussianFit& stats,
                                  double delta, double epsilon) {
    if (forget.rows() == 0) throw EmptyInputError("forget set is empty");
    return stopping_met(nll_values(model, forget), stats, delta, epsilon);
}

struct TraceRow {
    int iteration;
    double loss_forget;
    double loss_remember;
    double max_abs_dist;
    double mu_R;
    double sigma_R;
};

enum class TamingStatus { threshold_met, max_iterations };

struct TamingResult {
    FlowModel model;
    std::vector<TraceRow> trace;
    TamingStatus status = TamingStatus::max_iterations;
    int iterations = 0;          // iterations executed (rows in trace)
    GaussianFit base_stats;      // fit of base NLLs on the full remember set
    GaussianFit exit_stats;      // (mu_R, sigma_R) used at the final stopping check
    Eigen::VectorXd exit_dists;  // forget-set distances at the final check

    [[nodiscard]] bool converged() const { return status == TamingStatus::threshold_met; }
};

class MaxIterationsExceeded : public Error {
public:
    explicit MaxIterationsExceeded(TamingResult result)
        : Error("MaxIterationsExceeded: stopping criterion not met after " +
                std::to_string(result.iterations) + " iterations"),
          result_(std::move(result)) {}
    [[nodiscard]] const TamingResult& result() const { return result_; }

private:
    TamingResult result_;
};

inline TamingResult require_converged(TamingResult r) {
    if (!r.converged()) throw MaxIterationsExceeded(std::move(r));
    return r;
}

// Optional observer called with the current tamed parameters every
// `every` iterations (before the update of that iteration) and at exit.
struct TamingObserver {
    int every = 0;
    std::function<void(int iteration, const FlowModel&)> callback;
};

// One evaluation of L = alpha * L_F + (1 - alpha) * L_R on sampled batches.
// With `held` null the NllStats are estimated from the remember batch and stay
// differentiable; otherwise they are constants with the held values.
struct Objective {
    Var total;
    Var forget;
    double remember = 0.0;
    NllStats stats;
};

template <typename Model>
Objective taming_objective(Tape& tape, Model& model, const Batch& forget_batch, const Batch& remember_batch,
                           const GaussianFit& base_stats, const TamingConfig& config,
                           const GaussianFit* held = nullptr) {
    Objective out;
    Var remember_nlls = -log_prob(tape, model, remember_batch);
    out.stats = held ? constant_stats(tape, *held) : estimate_nll_stats(remember_nlls);
    out.forget = forget_loss(-log_prob(tape, model, forget_batch), out.stats, config.delta);
    out.total = out.forget * config.alpha;
    if (config.flags.use_remember_loss) {
        RememberTerms rt = remember_loss(remember_nlls, base_stats, config.gamma, config.flags);
        out.remember = rt.loss.item();
        out.total = out.total + rt.loss * (1.0 - config.alpha);
    }
    return out;
}

inline void check_disjoint(const Batch& a, const Batch& b) {
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            if (a.row(i) == b.row(j)) throw OverlapError("forget and remember sets share a point");
}

inline TamingResult tame(const FlowModel& base, const Batch& forget, const Batch& remember,
                         const TamingConfig& config, const TamingObserver& observer = {}) {
    config.validate();
    if (forget.rows() == 0) throw EmptyInputError("forget set is empty");
    if (remember.rows() < 2) throw InsufficientDataError("remember set needs at least 2 points");
    if (forget.cols() != base.dim || remember.cols() != base.dim)
        throw ShapeError("forget/remember width does not match model dim");
    check_disjoint(forget, remember);

    TamingResult result;
    result.model = base;
    result.base_stats = remember_stats(base, remember);
    FlowModel& model = result.model;
    auto params = model.parameters();
    OptimizerState opt(config.optimizer, config.learning_rate);
    Rng rng = make_rng(config.seed, "tame.batches");
    GaussianFit held{};

    for (int it = 1; it <= config.max_iterations; ++it) {
        if (observer.callback && observer.every > 0 && (it - 1) % observer.every == 0)
            observer.callback(it - 1, model);

        const Batch xf = sample_rows(forget, config.forget_batch, rng);
        const Batch xr = sample_rows(remember, config.remember_batch, rng);
        ad::zero_grad(params);

        Tape tape;
        const bool refresh = (it - 1) % config.stats_refresh == 0;
        Objective obj = taming_objective(tape, model, xf, xr, result.base_stats, config,
                                         refresh ? nullptr : &held);
        if (refresh) held = obj.stats.fit();

        const StoppingCheck check = stopping_met(model, forget, held, config.delta, config.epsilon);
        result.trace.push_back({it, obj.forget.item(), obj.remember, check.max_abs_dist, held.mu, held.sigma});
        result.iterations = it;
        result.exit_stats = held;
        result.exit_dists = check.dists;
        if (check.met) {
            result.status = TamingStatus::threshold_met;
            break;
        }
        if (!std::isfinite(obj.total.item()))
            throw NonFiniteError("taming loss is not finite at iteration " + std::to_string(it));
        tape.backward(obj.total);
        step(opt, params);
    }
    if (observer.callback) observer.callback(result.iterations, model);
    return result;
}

}  // namespace flowtame
