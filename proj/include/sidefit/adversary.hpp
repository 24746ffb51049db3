#pragma once

#include <array>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sidefit/field.hpp"
#include "sidefit/normal_map.hpp"
#include "sidefit/optim.hpp"

namespace sidefit {

class MapTooSmall : public Error {
public:
    using Error::Error;
};

inline constexpr int kPatchGrid = 3;
inline constexpr int kTileSize = 16;
inline constexpr int kPatchDim = kTileSize * kTileSize * 3;
inline constexpr int kMinMapSize = kPatchGrid * kTileSize;

/// Nine tiles in row-major order, each a 16x16x3 box-filtered copy of its region of the
/// map, flattened as ((row * 16) + col) * 3 + channel.
struct PatchGrid {
    std::array<Eigen::VectorXd, kPatchGrid * kPatchGrid> patches;
};

/// Tile t spans pixels [start(t), start(t+1)) along one axis: size/3 each, the last
/// tile takes the remainder.
int tile_start(int size, int tile);

PatchGrid split_patches(const NormalMap& map);

/// Transpose of split_patches: pixel gradients (one vector per pixel) of a scalar whose
/// patch gradients are `d_patches`.
std::vector<Vec3> split_patches_backward(int width, int height, const PatchGrid& d_patches);

struct AdvLossMode {
    enum class Kind { mse, bce };
    enum class Views { sides_only, four_views };
    Kind kind = Kind::mse;
    Views real_views = Views::sides_only;
};

struct DiscriminatorGradient {
    std::vector<DenseLayer> layers;

    std::size_t size() const;
    double operator[](std::size_t i) const;
    void add_scaled(const DiscriminatorGradient& other, double s);
    double max_abs() const;
};

/// Shared patch scorer: [768, hidden, 1] MLP, leaky ramp (slope 0.2) hidden layer,
/// linear output. The map score is the mean over the nine patch scores.
class Discriminator {
public:
    explicit Discriminator(Rng rng, int hidden = 64);

    std::vector<DenseLayer> layers;
    RmsProp optimizer;

    double score_patch(const Eigen::VectorXd& patch) const;
    double discriminate(const NormalMap& map) const;

    /// Adds upstream * dD(map)/dtheta into `dparams` and upstream * dD(map)/dpixel into
    /// `dpixels` (either may be null). Returns D(map).
    double backward(const NormalMap& map, double upstream, DiscriminatorGradient* dparams,
                    std::vector<Vec3>* dpixels) const;

    DiscriminatorGradient zero_gradient() const;
    std::size_t param_count() const;
    double& param(std::size_t i);
};

inline constexpr double kLeakySlope = 0.2;

double discriminate(const Discriminator& d, const NormalMap& map);

/// Adversarial loss the discriminator minimizes. mse: mean_f D^2 + mean_r (D - 1)^2.
/// bce: mean_f softplus(D) + mean_r softplus(-D), i.e. cross-entropy on sigmoid(D).
double discriminator_loss(const Discriminator& d, std::span<const NormalMap> fakes,
                          std::span<const NormalMap> reals, AdvLossMode mode,
                          DiscriminatorGradient* grad = nullptr);

struct GeneratorLoss {
    double loss = 0.0;
    std::vector<std::vector<Vec3>> pixel_grads;  // per fake, one vector per pixel, zero on background
};

/// Generator side with D frozen. mse: mean (D - 1)^2; bce: mean softplus(-D).
GeneratorLoss generator_adv_loss(const Discriminator& d, std::span<const NormalMap> fakes,
                                 AdvLossMode mode);

/// One RMS-scaled step on discriminator_loss. Returns the loss before the step.
double discriminator_step(Discriminator& d, std::span<const NormalMap> fakes,
                          std::span<const NormalMap> reals, AdvLossMode mode, double learning_rate);

}  // namespace sidefit
