#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "flowtame/flowtame.hpp"

using namespace flowtame;

TEST(Mixture, PresetShapes) {
    const LabeledDataset five = generate_preset("five-gaussians", 7);
    EXPECT_EQ(five.size(), 1000);
    EXPECT_EQ(five.dim(), 2);
    EXPECT_EQ(five.n_components(), 5);
    EXPECT_EQ(five.component_means.row(0), Eigen::RowVector2d(0, 0));
    EXPECT_EQ(five.labels.front(), 0);
    EXPECT_EQ(five.labels.back(), 4);
    const LabeledDataset two = generate_preset("two-gaussians-80-20", 7);
    EXPECT_EQ(two.size(), 1000);
    EXPECT_EQ(std::count(two.labels.begin(), two.labels.end(), 1), 200);
    EXPECT_EQ(generate_preset("five-gaussians-shifted", 7).n_components(), 4);
    EXPECT_THROW(generate_preset("six-gaussians", 7), ConfigError);
    EXPECT_EQ(preset_names().size(), 3u);
}

TEST(Mixture, ComponentMomentsMatchSpec) {
    Batch means(2, 2);
    means << 1, -1, 5, 5;
    const Eigen::Vector2d sigmas(0.5, 2.0);
    const int n = 20000;
    const LabeledDataset ds = generate_mixture(2, n, means, sigmas, 3);
    for (int k = 0; k < 2; ++k) {
        const Batch block = ds.points.middleRows(k * n, n);
        const Eigen::RowVectorXd m = block.colwise().mean();
        for (int j = 0; j < 2; ++j) {
            EXPECT_NEAR(m(j), means(k, j), 4 * sigmas(k) / std::sqrt(n));
            const double sd = std::sqrt((block.col(j).array() - m(j)).square().mean());
            EXPECT_NEAR(sd, sigmas(k), 0.03 * sigmas(k));
        }
    }
}

TEST(Mixture, DeterministicPerSeed) {
    EXPECT_EQ(generate_preset("five-gaussians", 1).points, generate_preset("five-gaussians", 1).points);
    EXPECT_NE(generate_preset("five-gaussians", 1).points, generate_preset("five-gaussians", 2).points);
}

TEST(Mixture, Errors) {
    Batch means(2, 2);
    means << 0, 0, 0, 0;
    EXPECT_THROW(generate_mixture(2, 10, means, Eigen::Vector2d(1, 1), 1), ConfigError);
    means << 0, 0, 1, 1;
    EXPECT_THROW(generate_mixture(2, 0, means, Eigen::Vector2d(1, 1), 1), ConfigError);
    EXPECT_THROW(generate_mixture(2, 10, means, Eigen::Vector2d(1, -1), 1), ConfigError);
    EXPECT_THROW(generate_mixture(3, 10, means, Eigen::Vector2d(1, 1), 1), ConfigError);
}

TEST(Split, ByLabel) {
    const LabeledDataset ds = generate_preset("five-gaussians", 7);
    SplitSpec spec;
    spec.forget_labels = {0};
    const Split s = split(ds, spec);
    EXPECT_EQ(s.forget.rows(), 200);
    EXPECT_EQ(s.remember.rows(), 800);
    EXPECT_EQ(s.holdout.rows(), 0);
    EXPECT_TRUE(s.remember_is_training);
}

TEST(Split, ForgetLimitMovesRestToHoldout) {
    const LabeledDataset ds = generate_preset("five-gaussians", 7);
    SplitSpec spec;
    spec.forget_labels = {0};
    spec.forget_limit = 10;
    const Split s = split(ds, spec);
    EXPECT_EQ(s.forget.rows(), 10);
    EXPECT_EQ(s.holdout.rows(), 190);
    EXPECT_EQ(s.remember.rows(), 800);
    EXPECT_EQ(s.forget_idx.front(), 0u);
    EXPECT_EQ(s.forget.row(3), ds.points.row(3));
}

TEST(Split, ByIndex) {
    const LabeledDataset ds = generate_preset("two-gaussians-80-20", 7);
    SplitSpec spec;
    spec.mode = SplitMode::by_index;
    spec.forget_indices = {3, 900, 5};
    const Split s = split(ds, spec);
    EXPECT_EQ(s.forget.rows(), 3);
    EXPECT_EQ(s.remember.rows(), 997);
    EXPECT_EQ(s.forget.row(1), ds.points.row(900));
    const std::set<std::size_t> rem(s.remember_idx.begin(), s.remember_idx.end());
    EXPECT_FALSE(rem.contains(900));
}

TEST(Split, ExternalRememberSet) {
    const LabeledDataset ds = generate_preset("five-gaussians", 7);
    const LabeledDataset shifted = generate_preset("five-gaussians-shifted", 8);
    SplitSpec spec;
    spec.mode = SplitMode::external_file;
    spec.forget_labels = {0};
    spec.forget_limit = 10;
    spec.remember_source = &shifted;
    const Split s = split(ds, spec);
    EXPECT_EQ(s.forget.rows(), 10);
    EXPECT_EQ(s.remember.rows(), 1000);
    EXPECT_FALSE(s.remember_is_training);
    EXPECT_TRUE(s.remember_idx.empty());
}

TEST(Split, Errors) {
    const LabeledDataset ds = generate_preset("five-gaussians", 7);
    SplitSpec none;
    none.forget_labels = {9};
    EXPECT_THROW(split(ds, none), EmptySplitError);
    SplitSpec all;
    all.forget_labels = {0, 1, 2, 3, 4};
    EXPECT_THROW(split(ds, all), EmptySplitError);
    SplitSpec out;
    out.mode = SplitMode::by_index;
    out.forget_indices = {1000};
    EXPECT_THROW(split(ds, out), ConfigError);
    SplitSpec dup;
    dup.mode = SplitMode::by_index;
    dup.forget_indices = {1, 1};
    EXPECT_THROW(split(ds, dup), OverlapError);
    SplitSpec ext;
    ext.mode = SplitMode::external_file;
    ext.forget_labels = {0};
    ext.remember_source = &ds;  // remember set contains the forget points
    EXPECT_THROW(split(ds, ext), OverlapError);
    ext.remember_source = nullptr;
    EXPECT_THROW(split(ds, ext), ConfigError);
}
