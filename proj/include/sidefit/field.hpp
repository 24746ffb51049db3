#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sidefit/geom.hpp"
#include "sidefit/normal_map.hpp"
#include "sidefit/scalar_field.hpp"

namespace sidefit {

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

/// Learnable feature lattice over the domain: resolution^3 nodes, `channels` values
/// per node, node (x, y, z) stored at ((z * G + y) * G + x) * F.
struct VoxelGrid {
    int resolution = 0;
    int channels = 0;
    std::vector<double> values;

    VoxelGrid() = default;
    VoxelGrid(int resolution, int channels);

    double node_coord(int i) const { return -1.0 + 2.0 * i / (resolution - 1); }
    std::size_t node_index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * resolution + y) * resolution + x;
    }
    std::size_t node_count() const {
        return static_cast<std::size_t>(resolution) * resolution * resolution;
    }
};

struct TrilinearWeights {
    std::array<std::size_t, 8> node{};
    std::array<double, 8> weight{};
    std::array<Vec3, 8> d_weight{};  // spatial derivative of each weight
};

TrilinearWeights trilinear_weights(const VoxelGrid& grid, const Vec3& p);

/// Everything the field is conditioned on: a coarse analytic prior shape, a learnable
/// voxel feature grid, and the given front (0 deg) and back (180 deg) normal maps of
/// the target.
struct PriorScene {
    SdfPtr prior_shape;
    VoxelGrid voxels;
    NormalMap front_map;
    NormalMap back_map;

    /// Throws on G < 8, F < 4, missing prior, or mismatched map sizes.
    void validate() const;
};

/// Network input layout: [prior_sdf, prior_normal(3), projected_normal(3), position(3),
/// voxel(F)].
struct FeatureVector {
    double prior_sdf = 0.0;
    Vec3 prior_normal = Vec3::Zero();
    bool prior_normal_valid = false;
    Vec3 projected_normal = Vec3::Zero();
    bool projected_normal_valid = false;
    bool projected_from_front = true;
    Vec3 position = Vec3::Zero();
    Eigen::VectorXd voxel_feat;

    Eigen::VectorXd flatten() const;
};

inline constexpr int kFixedFeatureDim = 10;

FeatureVector extract_features(const PriorScene& scene, const Vec3& p);

struct DenseLayer {
    Eigen::MatrixXd weight;
    Eigen::VectorXd bias;
};

class SdfField;

/// d(loss)/d(parameter) for every layer and the voxel grid.
struct ParamGradient {
    std::vector<DenseLayer> layers;
    std::vector<double> voxels;

    static ParamGradient zeros_like(const SdfField& field);

    ParamGradient& operator+=(const ParamGradient& other);
    ParamGradient& operator*=(double s);
    void add_scaled(const ParamGradient& other, double s);

    /// Flat view in the same order as SdfField::param.
    std::size_t size() const;
    double operator[](std::size_t i) const;

    double max_abs() const;
    bool all_finite() const;
};

/// Activations of one batched forward pass, kept for backprop.
struct FieldTape {
    Eigen::MatrixXd input;  // D x N
    std::vector<Eigen::MatrixXd> pre;
    std::vector<Eigen::MatrixXd> post;
    Eigen::RowVectorXd output;
    std::vector<TrilinearWeights> voxel;
};

/// Forward-mode tape carrying first and per-axis second spatial derivatives.
struct JetTape {
    FieldTape base;
    std::array<Eigen::MatrixXd, 3> d_input, d2_input;
    std::array<std::vector<Eigen::MatrixXd>, 3> d_pre, d_post, d2_pre, d2_post;
    std::array<Eigen::RowVectorXd, 3> d_output, d2_output;
};

/// Implicit function: an MLP with softplus hidden layers and a linear scalar output,
/// applied to the prior-conditioned features of each point.
class SdfField final : public ScalarField {
public:
    /// Widths of hidden layers, e.g. {128, 128}. Weights ~ N(0, 1/fan_in), zero biases,
    /// voxel values ~ N(0, voxel_init_std^2).
    SdfField(PriorScene scene, std::vector<int> hidden_widths, Rng rng,
             double voxel_init_std = 0.01);

    int input_dim() const { return kFixedFeatureDim + scene_.voxels.channels; }
    const std::vector<int>& hidden_widths() const { return hidden_; }

    const PriorScene& scene() const { return scene_; }
    PriorScene& scene() { return scene_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }

    void eval(std::span<const Vec3> points, std::span<double> out) const override;
    bool eval_jets(std::span<const Vec3> points, std::span<double> value,
                   std::span<Vec3> gradient, std::span<Vec3> second) const override;

    FieldTape forward(std::span<const Vec3> points) const;
    /// Accumulates sum_i upstream_i * d phi(p_i) / d theta into `grad`.
    void backward(const FieldTape& tape, std::span<const double> upstream,
                  ParamGradient& grad) const;

    JetTape forward_jets(std::span<const Vec3> points) const;
    /// Accumulates the parameter gradient of
    /// sum_i up_value_i phi_i + up_grad_i . grad phi_i + up_second_i . d2phi_i.
    void backward_jets(const JetTape& tape, std::span<const double> up_value,
                       std::span<const Vec3> up_grad, std::span<const Vec3> up_second,
                       ParamGradient& grad) const;

    /// Flat parameter access: layer weights (column-major), biases, then voxel values.
    std::size_t param_count() const;
    double& param(std::size_t i);
    double param(std::size_t i) const;
    void apply(const std::vector<double>& flat_delta);

    /// Number of point evaluations (each forward or jet pass counts one per point).
    std::uint64_t evaluations() const { return evaluations_; }
    void reset_evaluations() const { evaluations_ = 0; }

private:
    void features_batch(std::span<const Vec3> points, Eigen::MatrixXd& input,
                        std::vector<TrilinearWeights>& voxel,
                        std::array<Eigen::MatrixXd, 3>* d_input,
                        std::array<Eigen::MatrixXd, 3>* d2_input) const;
    void scatter_voxel_grad(const std::vector<TrilinearWeights>& voxel,
                            const Eigen::MatrixXd& input_grad,
                            const std::array<Eigen::MatrixXd, 3>* d_input_grad,
                            ParamGradient& grad) const;

    PriorScene scene_;
    std::vector<int> hidden_;
    std::vector<DenseLayer> layers_;
    mutable std::uint64_t evaluations_ = 0;
};

double eval_field(const SdfField& field, const Vec3& p);

/// sum_i upstream_i * d eval_field(p_i) / d theta. Throws ShapeMismatch on length mismatch.
ParamGradient backprop_params(const SdfField& field, std::span<const Vec3> points,
                              std::span<const double> upstream);

}  // namespace sidefit
