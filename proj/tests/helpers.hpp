#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sidefit/field.hpp"
#include "sidefit/geom.hpp"

namespace sidefit::test {

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Normal maps with an empty mask: the projected-normal feature is constantly zero.
inline PriorScene blank_scene(SdfPtr prior, int grid = 8, int channels = 4, int map_size = 16) {
    PriorScene s;
    s.prior_shape = std::move(prior);
    s.voxels = VoxelGrid(grid, channels);
    s.front_map = NormalMap(map_size, map_size);
    s.back_map = NormalMap(map_size, map_size);
    return s;
}

/// Straight-loop MLP forward, independent of the Eigen batch path.
inline double naive_forward(const SdfField& field, const Vec3& p) {
    const Eigen::VectorXd feat = extract_features(field.scene(), p).flatten();
    std::vector<double> x(feat.data(), feat.data() + feat.size());
    const auto& layers = field.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& w = layers[l].weight;
        std::vector<double> y(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            double acc = layers[l].bias[r];
            for (Eigen::Index c = 0; c < w.cols(); ++c) acc += w(r, c) * x[static_cast<std::size_t>(c)];
            if (l + 1 < layers.size()) acc = acc > 0 ? acc + std::log1p(std::exp(-acc)) : std::log1p(std::exp(acc));
            y[static_cast<std::size_t>(r)] = acc;
        }
        x = std::move(y);
    }
    return x[0];
}

/// Central difference of a scalar function of one field parameter.
inline double param_fd(SdfField& field, std::size_t index, double h,
                       const std::function<double(const SdfField&)>& loss) {
    double& p = field.param(index);
    const double saved = p;
    p = saved + h;
    const double up = loss(field);
    p = saved - h;
    const double down = loss(field);
    p = saved;
    return (up - down) / (2.0 * h);
}

inline Vec3 random_point(Rng& rng, double half = 1.0) {
    return {rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half)};
}

}  // namespace sidefit::test
