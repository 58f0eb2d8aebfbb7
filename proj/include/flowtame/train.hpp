#pragma once

// Maximum-likelihood fitting of a FlowModel: minimise the average negative
// log-likelihood of minibatches drawn with replacement from the data.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "flowtame/autodiff.hpp"
#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/optim.hpp"
#include "flowtame/random.hpp"

namespace flowtame {

// Loss above this is treated as divergence.
inline constexpr double kDivergenceNll = 1e6;

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 256;
    double learning_rate = 5e-4;
    std::uint64_t seed = 1;
    int eval_every = 100;
    OptimizerKind optimizer = OptimizerKind::adam;

    void validate() const {
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (eval_every <= 0) throw ConfigError("eval_every must be positive");
    }
};

struct CurvePoint {
    int iteration;
    double nll;
};

struct TrainResult {
    FlowModel model;
    std::vector<CurvePoint> curve;       // minibatch NLL before each update
    std::vector<CurvePoint> eval_curve;  // full-data NLL every eval_every iterations
};

// Thrown when the loss or a gradient stops being finite (or the loss exceeds
// kDivergenceNll). Carries the parameters from before the failing update.
class NonFiniteLossError : public Error {
public:
    NonFiniteLossError(const std::string& what, FlowModel last_good, int iteration)
        : Error("NonFiniteLossError: " + what), last_good_(std::move(last_good)), iteration_(iteration) {}

    [[nodiscard]] const FlowModel& last_good() const { return last_good_; }
    [[nodiscard]] int iteration() const { return iteration_; }

private:
    FlowModel last_good_;
    int iteration_;
};

// Fresh model whose weights come from the "model.init" stream of `seed`.
inline FlowModel init_model(int dim, int n_layers, int hidden_width, std::uint64_t seed,
                            double scale_clamp = 3.0) {
    Rng rng = make_rng(seed, "model.init");
    return build_model(dim, n_layers, hidden_width, rng, scale_clamp);
}

// Average NLL over the rows of `batch`, differentiable wrt the model.
template <typename Model>
Var nll(Tape& tape, Model& model, const Batch& batch) {
    if (batch.rows() == 0) throw EmptyInputError("nll of an empty batch");
    return -ad::mean(log_prob(tape, model, batch));
}

inline double mean_nll(const FlowModel& model, const Batch& data) {
    if (data.rows() == 0) throw EmptyInputError("mean_nll of an empty set");
    return nll_values(model, data).mean();
}

// Rows of `data` picked uniformly with replacement.
inline Batch sample_rows(const Batch& data, int count, Rng& rng) {
    if (data.rows() == 0) throw EmptyInputError("cannot sample from an empty set");
    std::uniform_int_distribution<Eigen::Index> pick(0, data.rows() - 1);
    Batch out(count, data.cols());
    for (int i = 0; i < count; ++i) out.row(i) = data.row(pick(rng));
    return out;
}

inline TrainResult train(FlowModel model, const Batch& data, const TrainConfig& config) {
    config.validate();
    if (data.rows() == 0) throw EmptyInputError("training set is empty");
    if (data.cols() != model.dim)
        throw ShapeError("training data width " + std::to_string(data.cols()) +
                         " does not match model dim " + std::to_string(model.dim));

    Rng rng = make_rng(config.seed, "train.batches");
    OptimizerState opt(config.optimizer, config.learning_rate);
    TrainResult result;
    auto params = model.parameters();

    for (int it = 0; it < config.iterations; ++it) {
        if (it % config.eval_every == 0) result.eval_curve.push_back({it, mean_nll(model, data)});

        const Batch batch = sample_rows(data, config.batch_size, rng);
        FlowModel last_good = model;
        ad::zero_grad(params);
        double loss = 0.0;
        {
            Tape tape;
            Var l = nll(tape, model, batch);
            loss = l.item();
            if (!std::isfinite(loss) || loss > kDivergenceNll)
                throw NonFiniteLossError("training loss " + std::to_string(loss) + " at iteration " +
                                             std::to_string(it),
                                         std::move(last_good), it);
            tape.backward(l);
        }
        result.curve.push_back({it, loss});
        try {
            step(opt, params);
        } catch (const NonFiniteGradError& e) {
            throw NonFiniteLossError(e.what(), std::move(last_good), it);
        }
    }
    if (config.iterations > 0) result.eval_curve.push_back({config.iterations, mean_nll(model, data)});
    result.model = std::move(model);
    return result;
}

}  // namespace flowtame
