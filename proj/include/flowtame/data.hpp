#pragma once

// Labeled Gaussian-mixture datasets and forget/remember splits.

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/random.hpp"

namespace flowtame {

struct MixtureSpec {
    Batch means;              // k x M
    Eigen::VectorXd sigmas;   // isotropic sigma per component
    std::vector<int> counts;  // points per component
};

struct LabeledDataset {
    Batch points;             // n x M
    std::vector<int> labels;  // component id per row
    Batch component_means;
    Eigen::VectorXd component_sigmas;
    std::vector<int> counts;
    std::uint64_t seed = 0;
    std::string preset;
    // False for a remember set that was not the base model's training data.
    bool remember_is_training = true;

    [[nodiscard]] Eigen::Index size() const { return points.rows(); }
    [[nodiscard]] int dim() const { return static_cast<int>(points.cols()); }
    [[nodiscard]] int n_components() const { return static_cast<int>(component_means.rows()); }
};

inline void validate(const MixtureSpec& spec) {
    const Eigen::Index k = spec.means.rows();
    if (k == 0) throw ConfigError("mixture needs at least one component");
    if (spec.sigmas.size() != k || static_cast<Eigen::Index>(spec.counts.size()) != k)
        throw ConfigError("means, sigmas and counts must have one entry per component");
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!(spec.sigmas(i) > 0.0)) throw ConfigError("component sigmas must be positive");
        if (spec.counts[static_cast<std::size_t>(i)] <= 0)
            throw ConfigError("points_per_component must be positive");
        for (Eigen::Index j = 0; j < i; ++j)
            if (spec.means.row(i) == spec.means.row(j)) throw ConfigError("component means must be distinct");
    }
}

// Component-major draws: all points of component 0, then 1, ...
inline LabeledDataset generate_mixture(const MixtureSpec& spec, std::uint64_t seed) {
    validate(spec);
    Rng rng = make_rng(seed, "data.mixture");
    std::normal_distribution<double> normal(0.0, 1.0);
    int n = 0;
    for (int c : spec.counts) n += c;
    const Eigen::Index dim = spec.means.cols();

    LabeledDataset ds;
    ds.points.resize(n, dim);
    ds.labels.reserve(static_cast<std::size_t>(n));
    Eigen::Index row = 0;
    for (Eigen::Index k = 0; k < spec.means.rows(); ++k) {
        for (int i = 0; i < spec.counts[static_cast<std::size_t>(k)]; ++i, ++row) {
            for (Eigen::Index j = 0; j < dim; ++j)
                ds.points(row, j) = spec.means(k, j) + spec.sigmas(k) * normal(rng);
            ds.labels.push_back(static_cast<int>(k));
        }
    }
    ds.component_means = spec.means;
    ds.component_sigmas = spec.sigmas;
    ds.counts = spec.counts;
    ds.seed = seed;
    return ds;
}

inline LabeledDataset generate_mixture(int n_components, int points_per_component, const Batch& means,
                                       const Eigen::VectorXd& sigmas, std::uint64_t seed) {
    if (n_components != means.rows()) throw ConfigError("n_components does not match means");
    return generate_mixture(
        MixtureSpec{means, sigmas, std::vector<int>(static_cast<std::size_t>(n_components), points_per_component)},
        seed);
}

// Preset geometry. Label 0 is the centre of the five-Gaussian square.
inline MixtureSpec preset_spec(const std::string& name) {
    if (name == "five-gaussians") {
        Batch means(5, 2);
        means << 0, 0, -4, -4, 4, -4, -4, 4, 4, 4;
        return {means, Eigen::VectorXd::Constant(5, 0.5), std::vector<int>(5, 200)};
    }
    if (name == "five-gaussians-shifted") {
        // Outer four modes only, displaced and widened: a stand-in for data
        // from a similar but different distribution.
        Batch means(4, 2);
        means << -3.7, -4.2, 4.3, -4.2, -3.7, 3.8, 4.3, 3.8;
        return {means, Eigen::VectorXd::Constant(4, 0.6), std::vector<int>(4, 250)};
    }
    if (name == "two-gaussians-80-20") {
        Batch means(2, 2);
        means << -2, 0, 2, 0;
        return {means, Eigen::VectorXd::Constant(2, 0.5), std::vector<int>{800, 200}};
    }
    throw ConfigError("unknown preset '" + name + "'");
}

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"five-gaussians", "five-gaussians-shifted",
                                                "two-gaussians-80-20"};
    return names;
}

inline LabeledDataset generate_preset(const std::string& name, std::uint64_t seed) {
    LabeledDataset ds = generate_mixture(preset_spec(name), seed);
    ds.preset = name;
    return ds;
}

// ------------------------------------------------------------ splits

enum class SplitMode { by_label, by_index, external_file };

struct SplitSpec {
    SplitMode mode = SplitMode::by_label;
    std::vector<int> forget_labels;
    std::vector<std::size_t> forget_indices;
    // by_label: keep only the first `forget_limit` matching rows in the forget
    // set (0 = all); the rest of the matching rows become the holdout set.
    std::size_t forget_limit = 0;
    // external_file: remember set replaced by this dataset.
    const LabeledDataset* remember_source = nullptr;
};

struct Split {
    Batch forget;
    Batch remember;
    Batch holdout;  // matching rows excluded by forget_limit
    std::vector<std::size_t> forget_idx;
    std::vector<std::size_t> remember_idx;  // empty for external remember sets
    std::vector<std::size_t> holdout_idx;
    bool remember_is_training = true;
};

inline Batch gather_rows(const Batch& points, const std::vector<std::size_t>& idx) {
    Batch out(static_cast<Eigen::Index>(idx.size()), points.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(idx[i]));
    return out;
}

inline Split split(const LabeledDataset& ds, const SplitSpec& spec) {
    const auto n = static_cast<std::size_t>(ds.size());
    std::vector<char> in_forget(n, 0);
    std::vector<char> in_holdout(n, 0);
    Split out;

    const bool by_index = spec.mode == SplitMode::by_index ||
                          (spec.mode == SplitMode::external_file && !spec.forget_indices.empty());
    if (by_index) {
        std::set<std::size_t> seen;
        for (std::size_t i : spec.forget_indices) {
            if (i >= n) throw ConfigError("forget index " + std::to_string(i) + " out of range");
            if (!seen.insert(i).second) throw OverlapError("forget index " + std::to_string(i) + " listed twice");
            in_forget[i] = 1;
            out.forget_idx.push_back(i);
        }
    } else {
        const std::set<int> labels(spec.forget_labels.begin(), spec.forget_labels.end());
        for (std::size_t i = 0; i < n; ++i) {
            if (!labels.contains(ds.labels[i])) continue;
            if (spec.forget_limit == 0 || out.forget_idx.size() < spec.forget_limit) {
                in_forget[i] = 1;
                out.forget_idx.push_back(i);
            } else {
                in_holdout[i] = 1;
                out.holdout_idx.push_back(i);
            }
        }
    }
    if (out.forget_idx.empty()) throw EmptySplitError("forget selector matched no points");
    out.forget = gather_rows(ds.points, out.forget_idx);
    out.holdout = gather_rows(ds.points, out.holdout_idx);

    if (spec.mode == SplitMode::external_file) {
        if (spec.remember_source == nullptr) throw ConfigError("external_file split needs a remember set");
        if (spec.remember_source->dim() != ds.dim()) throw ShapeError("remember set dim differs from dataset");
        out.remember = spec.remember_source->points;
        out.remember_is_training = false;
    } else {
        for (std::size_t i = 0; i < n; ++i)
            if (!in_forget[i] && !in_holdout[i]) out.remember_idx.push_back(i);
        out.remember = gather_rows(ds.points, out.remember_idx);
    }
    if (out.remember.rows() == 0) throw EmptySplitError("remember set is empty");
    for (Eigen::Index i = 0; i < out.forget.rows(); ++i)
        for (Eigen::Index j = 0; j < out.remember.rows(); ++j)
            if (out.forget.row(i) == out.remember.row(j))
                throw OverlapError("a forget point also appears in the remember set");
    return out;
}

}  // namespace flowtame
