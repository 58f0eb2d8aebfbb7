#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "flowtame/flow.hpp"
#include "test_support.hpp"

using namespace flowtame;

namespace {

FlowModel fresh(int dim, int layers, int hidden, std::uint64_t seed = 3) {
    Rng rng = make_rng(seed, "test.fresh");
    return build_model(dim, layers, hidden, rng);
}

}  // namespace

TEST(Flow, FreshModelIsIdentity) {
    const FlowModel m = fresh(2, 4, 8);
    const Batch z = oracle::normal_batch(16, 2, 1);
    const Mapped f = forward_values(m, z);
    EXPECT_EQ((f.points - z).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(f.logdet.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Flow, MasksAlternate) {
    const FlowModel m = fresh(3, 4, 4);
    ASSERT_EQ(m.n_layers(), 4);
    EXPECT_EQ(m.layers[0].mask, (Eigen::VectorXd(3) << 1, 0, 1).finished());
    EXPECT_EQ(m.layers[1].mask, (Eigen::VectorXd(3) << 0, 1, 0).finished());
    EXPECT_EQ(m.layers[2].mask, m.layers[0].mask);
    EXPECT_EQ(m.layers[0].scale_net.w1.name, "layer0.scale_net.w1");
    EXPECT_EQ(m.prior.log_sigma.name, "prior.log_sigma");
}

TEST(Flow, ParameterCount) {
    const FlowModel m = fresh(2, 2, 8);
    // per net: 2*8+8 + 8*8+8 + 8*2+2 = 114; 4 nets + prior 4
    EXPECT_EQ(m.parameter_count(), 4u * 114u + 4u);
}

TEST(Flow, ShiftOnlyLayerTranslatesUnmaskedCoordinate) {
    FlowModel m = fresh(2, 2, 4);
    m.layers[0].shift_net.b3.value << 5.0, 7.0;  // layer 0 keeps coordinate 0
    Batch z(2, 2);
    z << 0.5, -1.0, 2.0, 3.0;
    const Mapped f = forward_values(m, z);
    Batch expect = z;
    expect.col(1).array() += 7.0;
    EXPECT_LT((f.points - expect).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(f.logdet.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Flow, ScaleIsClamped) {
    FlowModel m = fresh(2, 2, 4);
    m.layers[0].scale_net.b3.value << 100.0, 100.0;
    const Mapped f = forward_values(m, Batch::Zero(1, 2));
    EXPECT_LE(f.logdet(0), m.scale_clamp + 1e-12);
    EXPECT_GT(f.logdet(0), m.scale_clamp - 1e-6);
}

TEST(Flow, RoundTripAndLogdetAntisymmetry) {
    const FlowModel m = oracle::random_model(2, 6, 16, 11, 0.4);
    const Batch z = oracle::normal_batch(200, 2, 2, 2.0);
    const Mapped f = forward_values(m, z);
    const Mapped g = inverse_values(m, f.points);
    EXPECT_LT((g.points - z).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((f.logdet + g.logdet).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Flow, LogdetMatchesBruteForceJacobian) {
    const FlowModel m = oracle::random_model(2, 4, 8, 5, 0.4);
    const Batch z = oracle::normal_batch(10, 2, 9);
    const Mapped f = forward_values(m, z);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Matrix2d jac;
        for (int j = 0; j < 2; ++j) {
            Batch up = z.row(i);
            Batch down = z.row(i);
            up(0, j) += h;
            down(0, j) -= h;
            jac.col(j) = ((forward_values(m, up).points - forward_values(m, down).points) / (2 * h)).transpose();
        }
        EXPECT_NEAR(std::log(std::abs(jac.determinant())), f.logdet(i), 1e-6);
    }
}

TEST(Flow, StandardPriorAtOrigin) {
    const FlowModel m = fresh(2, 2, 4);
    EXPECT_NEAR(log_prob_values(m, Batch::Zero(1, 2))(0), -1.8378770664093454836, 1e-15);
}

TEST(Flow, PriorClosedForm) {
    FlowModel m = fresh(3, 2, 4);
    m.prior.mu.value << 1.0, -2.0, 0.5;
    m.prior.log_sigma.value << std::log(2.0), 0.0, std::log(0.5);
    Batch x(1, 3);
    x << 2.0, 0.0, 0.0;
    // sum_i log N(x_i; mu_i, s_i^2)
    double expect = 0.0;
    const double mu[3] = {1.0, -2.0, 0.5};
    const double s[3] = {2.0, 1.0, 0.5};
    for (int i = 0; i < 3; ++i) {
        const double u = (x(0, i) - mu[i]) / s[i];
        expect += -0.5 * u * u - std::log(s[i]) - 0.5 * std::log(2 * std::numbers::pi);
    }
    EXPECT_NEAR(log_prob_values(m, x)(0), expect, 1e-13);
}

TEST(Flow, DensityIntegratesToOne) {
    const FlowModel m = oracle::random_model(2, 4, 8, 21, 0.25);
    const double lo = -12.0;
    const double step = 0.05;
    const int n = 480;
    Batch grid(n * n, 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) grid.row(i * n + j) << lo + (i + 0.5) * step, lo + (j + 0.5) * step;
    const double mass = log_prob_values(m, grid).array().exp().sum() * step * step;
    EXPECT_GT(mass, 0.98);
    EXPECT_LT(mass, 1.02);
}

TEST(Flow, LogProbGradientMatchesFiniteDifferences) {
    FlowModel m = oracle::random_model(2, 4, 6, 8, 0.4);
    const Batch x = oracle::normal_batch(12, 2, 4, 1.5);
    auto params = m.parameters();
    ad::zero_grad(params);
    {
        Tape t;
        t.backward(ad::mean(log_prob(t, m, x)));
    }
    const auto numeric = oracle::numeric_grad(params, [&] { return log_prob_values(m, x).mean(); });
    EXPECT_LT(oracle::max_rel_error(params, numeric), 1e-5);
}

TEST(Flow, SamplingIsDeterministicPerSeed) {
    const FlowModel m = oracle::random_model(2, 4, 8, 2, 0.3);
    Rng a = make_rng(42, "sample");
    Rng b = make_rng(42, "sample");
    Rng c = make_rng(43, "sample");
    const Batch sa = sample(m, 50, a);
    EXPECT_EQ(sa, sample(m, 50, b));
    EXPECT_NE(sa, sample(m, 50, c));
}

TEST(Flow, SampleMomentsOfIdentityFlowFollowPrior) {
    FlowModel m = fresh(2, 2, 4);
    m.prior.mu.value << 1.0, -2.0;
    m.prior.log_sigma.value << std::log(2.0), 0.0;
    Rng rng = make_rng(5, "sample");
    const int n = 20000;
    const Batch s = sample(m, n, rng);
    const Eigen::RowVectorXd mean = s.colwise().mean();
    EXPECT_NEAR(mean(0), 1.0, 4 * 2.0 / std::sqrt(n));
    EXPECT_NEAR(mean(1), -2.0, 4 * 1.0 / std::sqrt(n));
    const double sd0 = std::sqrt((s.col(0).array() - mean(0)).square().mean());
    EXPECT_NEAR(sd0, 2.0, 0.05);
}

TEST(Flow, Errors) {
    Rng rng = make_rng(1, "x");
    EXPECT_THROW(build_model(1, 2, 4, rng), ConfigError);
    EXPECT_THROW(build_model(2, 3, 4, rng), ConfigError);
    EXPECT_THROW(build_model(2, 0, 4, rng), ConfigError);
    EXPECT_THROW(build_model(2, 2, 0, rng), ConfigError);
    const FlowModel m = fresh(2, 2, 4);
    EXPECT_THROW(forward_values(m, Batch::Zero(3, 3)), ShapeError);
    Batch bad = Batch::Zero(1, 2);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(log_prob_values(m, bad), NonFiniteError);
    EXPECT_THROW(sample(m, 0, rng), InvalidCountError);
}
