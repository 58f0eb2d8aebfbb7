#pragma once

// RealNVP-style normalizing flow on M-dimensional points.
//
// The generative direction maps a latent batch z to data x (`forward`), the
// density direction maps x back to z (`inverse`). Every coupling layer keeps
// the coordinates with mask == 1 and applies
//
//     x = z * exp(s(m*z)) + t(m*z)        on the coordinates with mask == 0
//
// where s is the log-scale, squashed to (-scale_clamp, scale_clamp) with
// clamp * tanh(raw / clamp). Both s and t are zeroed on masked coordinates so
// the formula above holds for the full row. The Jacobian is triangular and
// log|det| is the row sum of s.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "flowtame/autodiff.hpp"
#include "flowtame/errors.hpp"
#include "flowtame/random.hpp"

namespace flowtame {

using ad::Array;
using ad::Parameter;
using ad::Tape;
using ad::Var;

// n x M batch of points, one per row.
using Batch = Eigen::MatrixXd;

inline constexpr int kCheckpointVersion = 1;

// Two-hidden-layer tanh perceptron: in -> hidden -> hidden -> out.
struct Mlp {
    Parameter w1, b1, w2, b2, w3, b3;

    [[nodiscard]] std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
    [[nodiscard]] std::vector<const Parameter*> parameters() const {
        return {&w1, &b1, &w2, &b2, &w3, &b3};
    }
};

struct CouplingLayer {
    Eigen::VectorXd mask;  // 1 = passes through unchanged
    Mlp scale_net;
    Mlp shift_net;
};

// Diagonal Gaussian N(mu, diag(exp(log_sigma))^2), both stored as 1 x M rows.
struct Prior {
    Parameter mu;
    Parameter log_sigma;
};

struct FlowModel {
    int dim = 0;
    int hidden_width = 0;
    double scale_clamp = 3.0;
    int version = kCheckpointVersion;
    std::vector<CouplingLayer> layers;
    Prior prior;

    [[nodiscard]] int n_layers() const { return static_cast<int>(layers.size()); }

    [[nodiscard]] std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& layer : layers) {
            for (Parameter* p : layer.scale_net.parameters()) out.push_back(p);
            for (Parameter* p : layer.shift_net.parameters()) out.push_back(p);
        }
        out.push_back(&prior.mu);
        out.push_back(&prior.log_sigma);
        return out;
    }

    [[nodiscard]] std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (const auto& layer : layers) {
            for (const Parameter* p : layer.scale_net.parameters()) out.push_back(p);
            for (const Parameter* p : layer.shift_net.parameters()) out.push_back(p);
        }
        out.push_back(&prior.mu);
        out.push_back(&prior.log_sigma);
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
        return n;
    }
};

// Alternating parity masks: even layers keep even coordinates.
inline Eigen::VectorXd parity_mask(int dim, int layer_index) {
    Eigen::VectorXd m(dim);
    for (int i = 0; i < dim; ++i) m(i) = ((i % 2) == (layer_index % 2)) ? 1.0 : 0.0;
    return m;
}

namespace detail {

inline Parameter glorot(const std::string& name, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Array w(fan_in, fan_out);
    for (int i = 0; i < fan_in; ++i)
        for (int j = 0; j < fan_out; ++j) w(i, j) = u(rng);
    return Parameter(name, std::move(w));
}

inline Mlp make_mlp(const std::string& prefix, int in, int hidden, int out, Rng& rng) {
    Mlp net;
    net.w1 = glorot(prefix + ".w1", in, hidden, rng);
    net.b1 = Parameter(prefix + ".b1", Array::Zero(1, hidden));
    net.w2 = glorot(prefix + ".w2", hidden, hidden, rng);
    net.b2 = Parameter(prefix + ".b2", Array::Zero(1, hidden));
    // Zero output layer: the untrained flow is the identity map.
    net.w3 = Parameter(prefix + ".w3", Array::Zero(hidden, out));
    net.b3 = Parameter(prefix + ".b3", Array::Zero(1, out));
    return net;
}

// Binds parameters to a tape: tracked for mutable models, constants otherwise.
template <typename Model>
struct Binder {
    Tape& tape;
    template <typename P>
    Var operator()(P& p) const {
        if constexpr (std::is_const_v<Model> || std::is_const_v<P>) {
            return tape.constant(p.value);
        } else {
            return tape.param(p);
        }
    }
};

template <typename Model, typename Net>
Var mlp_apply(const Binder<Model>& bind, Net& net, const Var& x) {
    Var h = ad::tanh(ad::affine(x, bind(net.w1), bind(net.b1)));
    h = ad::tanh(ad::affine(h, bind(net.w2), bind(net.b2)));
    return ad::affine(h, bind(net.w3), bind(net.b3));
}

struct ScaleShift {
    Var log_scale;  // n x M, zero on masked coordinates
    Var shift;      // n x M, zero on masked coordinates
};

template <typename Model, typename Layer>
ScaleShift coupling_params(const Binder<Model>& bind, Layer& layer, double clamp, const Var& input) {
    const Eigen::VectorXd keep = layer.mask;
    const Eigen::VectorXd change = Eigen::VectorXd::Ones(keep.size()) - keep;
    Var conditioner = ad::scale_columns(input, keep);
    Var raw = mlp_apply(bind, layer.scale_net, conditioner);
    Var s = ad::tanh(raw / clamp) * clamp;
    Var t = mlp_apply(bind, layer.shift_net, conditioner);
    return {ad::scale_columns(s, change), ad::scale_columns(t, change)};
}

inline void check_batch(const Batch& b, int dim, const char* what) {
    if (b.cols() != dim)
        throw ShapeError(std::string(what) + ": expected width " + std::to_string(dim) + ", got " +
                         std::to_string(b.cols()));
    if (!b.allFinite()) throw NonFiniteError(std::string(what) + ": input has NaN or Inf");
}

}  // namespace detail

inline FlowModel build_model(int dim, int n_layers, int hidden_width, Rng& rng,
                             double scale_clamp = 3.0) {
    if (dim < 2) throw ConfigError("dim must be >= 2 so each mask has a 0 and a 1 entry");
    if (n_layers < 2 || n_layers % 2 != 0)
        throw ConfigError("n_layers must be even and >= 2, got " + std::to_string(n_layers));
    if (hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
    if (!(scale_clamp > 0.0)) throw ConfigError("scale_clamp must be positive");

    FlowModel m;
    m.dim = dim;
    m.hidden_width = hidden_width;
    m.scale_clamp = scale_clamp;
    for (int k = 0; k < n_layers; ++k) {
        const std::string prefix = "layer" + std::to_string(k);
        CouplingLayer layer;
        layer.mask = parity_mask(dim, k);
        layer.scale_net = detail::make_mlp(prefix + ".scale_net", dim, hidden_width, dim, rng);
        layer.shift_net = detail::make_mlp(prefix + ".shift_net", dim, hidden_width, dim, rng);
        m.layers.push_back(std::move(layer));
    }
    m.prior.mu = Parameter("prior.mu", Array::Zero(1, dim));
    m.prior.log_sigma = Parameter("prior.log_sigma", Array::Zero(1, dim));
    return m;
}

// Result of pushing a batch through the flow: mapped points plus the per-row
// log|det J| of the map that was applied (n x 1).
struct FlowPass {
    Var out;
    Var logdet;
};

// z -> x. Pass a non-const model to record gradients for its parameters.
template <typename Model>
FlowPass forward(Tape& tape, Model& model, const Batch& z) {
    detail::check_batch(z, model.dim, "forward");
    detail::Binder<Model> bind{tape};
    Var x = tape.constant(z);
    Var logdet = tape.constant(Array::Zero(z.rows(), 1));
    for (auto& layer : model.layers) {
        auto [s, t] = detail::coupling_params(bind, layer, model.scale_clamp, x);
        x = x * ad::exp(s) + t;
        logdet = logdet + ad::row_sums(s);
    }
    return {x, logdet};
}

// x -> z, with logdet = log|det J_{f^-1}(x)|.
template <typename Model>
FlowPass inverse(Tape& tape, Model& model, const Batch& x) {
    detail::check_batch(x, model.dim, "inverse");
    detail::Binder<Model> bind{tape};
    Var z = tape.constant(x);
    Var logdet = tape.constant(Array::Zero(x.rows(), 1));
    for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
        auto [s, t] = detail::coupling_params(bind, *it, model.scale_clamp, z);
        z = (z - t) * ad::exp(-s);
        logdet = logdet - ad::row_sums(s);
    }
    return {z, logdet};
}

// Sum over coordinates of log N(z_i; mu_i, sigma_i^2), one value per row.
template <typename PriorT>
Var prior_log_prob(Tape& tape, PriorT& prior, const Var& z) {
    using Model = std::conditional_t<std::is_const_v<PriorT>, const FlowModel, FlowModel>;
    detail::Binder<Model> bind{tape};
    const Eigen::Index dim = prior.mu.value.cols();
    if (z.cols() != dim)
        throw ShapeError("prior_log_prob: expected width " + std::to_string(dim) + ", got " +
                         std::to_string(z.cols()));
    const Eigen::Index n = z.rows();
    Var mu = ad::broadcast_rows(bind(prior.mu), n);
    Var log_sigma = ad::broadcast_rows(bind(prior.log_sigma), n);
    Var u = (z - mu) / ad::exp(log_sigma);
    const double norm = 0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
    return ad::row_sums(ad::square(u)) * -0.5 - ad::row_sums(log_sigma) - norm;
}

// log p(x) = log p_Z(f^-1(x)) + log|det J_{f^-1}(x)|, n x 1.
template <typename Model>
Var log_prob(Tape& tape, Model& model, const Batch& x) {
    auto [z, logdet] = inverse(tape, model, x);
    return prior_log_prob(tape, model.prior, z) + logdet;
}

// --------------------------------------------------------- value-only helpers

struct Mapped {
    Batch points;
    Eigen::VectorXd logdet;
};

inline Mapped forward_values(const FlowModel& model, const Batch& z) {
    Tape tape;
    auto pass = forward(tape, model, z);
    return {pass.out.value(), pass.logdet.value().col(0)};
}

inline Mapped inverse_values(const FlowModel& model, const Batch& x) {
    Tape tape;
    auto pass = inverse(tape, model, x);
    return {pass.out.value(), pass.logdet.value().col(0)};
}

inline Eigen::VectorXd log_prob_values(const FlowModel& model, const Batch& x) {
    Tape tape;
    return log_prob(tape, model, x).value().col(0);
}

inline Eigen::VectorXd nll_values(const FlowModel& model, const Batch& x) {
    return -log_prob_values(model, x);
}

inline Eigen::VectorXd prior_log_prob_values(const Prior& prior, const Batch& z) {
    Tape tape;
    return prior_log_prob(tape, prior, tape.constant(z)).value().col(0);
}

// Latent draws z ~ N(mu, sigma^2 I) in row-major order.
inline Batch sample_latent(const Prior& prior, std::size_t n, Rng& rng) {
    const Eigen::Index dim = prior.mu.value.cols();
    std::normal_distribution<double> normal(0.0, 1.0);
    Batch z(static_cast<Eigen::Index>(n), dim);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (Eigen::Index j = 0; j < dim; ++j)
            z(i, j) = prior.mu.value(0, j) + std::exp(prior.log_sigma.value(0, j)) * normal(rng);
    return z;
}

inline Batch sample(const FlowModel& model, std::size_t n, Rng& rng) {
    if (n == 0) throw InvalidCountError("sample count must be positive");
    return forward_values(model, sample_latent(model.prior, n, rng)).points;
}

}  // namespace flowtame
