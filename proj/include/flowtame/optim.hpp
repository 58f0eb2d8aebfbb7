#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowtame/autodiff.hpp"
#include "flowtame/errors.hpp"

namespace flowtame {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

// Optimizer plus its per-parameter moments. Moments are sized lazily on the
// first step and must keep matching the parameter list afterwards.
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step_count = 0;
    std::vector<ad::Array> first_moment;
    std::vector<ad::Array> second_moment;

    OptimizerState() = default;
    OptimizerState(OptimizerKind k, double lr) : kind(k), learning_rate(lr) {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    }
};

// One update of every parameter from its accumulated gradient.
//   sgd:  p <- p - lr * g
//   adam: bias-corrected moments, p <- p - lr * m_hat / (sqrt(v_hat) + eps)
inline void step(OptimizerState& opt, std::span<ad::Parameter* const> params) {
    for (const ad::Parameter* p : params)
        if (!p->grad.allFinite()) throw NonFiniteGradError("gradient of '" + p->name + "' is not finite");

    if (opt.kind == OptimizerKind::sgd) {
        for (ad::Parameter* p : params) p->value -= opt.learning_rate * p->grad;
        ++opt.step_count;
        return;
    }

    if (opt.first_moment.empty()) {
        for (const ad::Parameter* p : params) {
            opt.first_moment.push_back(ad::Array::Zero(p->value.rows(), p->value.cols()));
            opt.second_moment.push_back(ad::Array::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (opt.first_moment.size() != params.size())
        throw ShapeError("optimizer state holds " + std::to_string(opt.first_moment.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");

    ++opt.step_count;
    const double t = static_cast<double>(opt.step_count);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Parameter& p = *params[i];
        ad::Array& m = opt.first_moment[i];
        ad::Array& v = opt.second_moment[i];
        if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
            throw ShapeError("moment shape mismatch for '" + p.name + "'");
        m = opt.beta1 * m + (1.0 - opt.beta1) * p.grad;
        v = opt.beta2 * v + (1.0 - opt.beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= opt.learning_rate * (m.array() / c1) /
                           ((v.array() / c2).sqrt() + opt.epsilon);
    }
}

}  // namespace flowtame
