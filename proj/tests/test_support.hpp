#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "flowtame/flowtame.hpp"

namespace flowtame::oracle {

// Five-point central differences over every entry of every parameter:
// O(h^4) truncation, and a step large enough that roundoff stays ~1e-13.
inline std::vector<Array> numeric_grad(std::span<ad::Parameter* const> params,
                                       const std::function<double()>& f, double h = 1e-3) {
    std::vector<Array> out;
    for (ad::Parameter* p : params) {
        Array g = Array::Zero(p->value.rows(), p->value.cols());
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double keep = p->value(i);
            auto at = [&](double dx) {
                p->value(i) = keep + dx;
                return f();
            };
            g(i) = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
            p->value(i) = keep;
        }
        out.push_back(g);
    }
    return out;
}

// Largest |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is ~0 from turning rounding noise into huge relative errors.
inline double max_rel_error(std::span<ad::Parameter* const> params, const std::vector<Array>& numeric,
                            double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (Eigen::Index i = 0; i < numeric[k].size(); ++i) {
            const double a = params[k]->grad(i);
            const double n = numeric[k](i);
            worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
        }
    }
    return worst;
}

// Overwrite every parameter with N(0, scale^2) so a fresh model is not the identity.
inline void randomize(FlowModel& model, Rng& rng, double scale) {
    std::normal_distribution<double> normal(0.0, scale);
    for (ad::Parameter* p : model.parameters())
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value(i) = normal(rng);
}

inline FlowModel random_model(int dim, int layers, int hidden, std::uint64_t seed, double scale = 0.3) {
    Rng rng = make_rng(seed, "test.model");
    FlowModel m = build_model(dim, layers, hidden, rng);
    randomize(m, rng, scale);
    return m;
}

inline Batch normal_batch(Eigen::Index n, Eigen::Index dim, std::uint64_t seed, double scale = 1.0) {
    Rng rng = make_rng(seed, "test.batch");
    std::normal_distribution<double> normal(0.0, scale);
    Batch b(n, dim);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = normal(rng);
    return b;
}

}  // namespace flowtame::oracle
