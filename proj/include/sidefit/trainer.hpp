#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sidefit/adversary.hpp"
#include "sidefit/field.hpp"
#include "sidefit/m2o.hpp"
#include "sidefit/render.hpp"
#include "sidefit/scene.hpp"

namespace sidefit {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct TrainConfig {
    // Loss weights.
    double w_d = 0.01;
    double w_e = 0.1;
    double w_c = 5e-4;

    int epochs = 30;
    int steps_per_epoch = 50;
    int batch_near = 240;
    int batch_uniform = 16;
    double sample_sigma = 0.05;

    // Empty epsilon0 means 1 / max(map_size, map_size).
    std::optional<double> epsilon0;
    double eps_decay = 0.5;
    std::optional<double> fixed_eps;
    CurvatureReduction curvature = CurvatureReduction::sum_abs_axes;

    bool enable_dis = true;
    bool enable_m2o = true;
    AdvLossMode adv_mode;
    int dis_warmup_epochs = 2;
    int adv_every = 2;               // field steps per adversarial round
    bool render_both_sides = true;   // false alternates 90 / 270 between rounds
    int render_w = 48;
    int render_h = 48;
    double render_max_step = 0.2;
    int dis_hidden = 64;

    double lr_field = 1e-4;
    double lr_dis = 1e-4;

    std::vector<int> hidden = {128, 128};
    int voxel_res = 16;
    int voxel_channels = 8;
    double voxel_init_std = 0.01;
    int map_size = 128;
    int init_steps = 2000;
    double lr_init = 1e-3;

    std::uint64_t seed = 0;

    /// Throws ConfigError on out-of-range values.
    void validate() const;

    /// Step schedule actually used for `epoch`.
    double epsilon_at(int epoch) const;
    EpsilonSchedule schedule() const;
    StencilConfig stencil_at(int epoch) const;

    /// Flat key=value text, one key per line, in a fixed order.
    std::string to_text() const;
    /// Hex FNV-1a of to_text() with the seed excluded.
    std::string hash() const;
};

/// Applies `key=value` lines on top of `base`. Blank lines and '#' comments are ignored.
TrainConfig parse_config(const std::string& text, TrainConfig base = {},
                         const std::string& source = "<string>");
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
/// Sets one key; throws ConfigError for unknown keys or malformed values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Prior scene for a target: front/back normal maps ray-marched from the target at
/// cfg.map_size, the voxel lattice sized from the config.
PriorScene build_prior_scene(const Scene& scene, const TrainConfig& cfg);

/// Real-map pool: side views (all four with four_views) of every real shape.
std::vector<NormalMap> render_real_pool(const Scene& scene, const TrainConfig& cfg);

/// Fresh field from the seed, regressed toward the prior SDF for cfg.init_steps.
SdfField initialize_field(const Scene& scene, PriorScene prior, const TrainConfig& cfg);

double alignment_loss(const SdfField& field, const SampleBatch& batch);

struct LossBreakdown {
    double alignment = 0.0;
    double adversarial = 0.0;   // generator-side term, before w_d
    double eikonal = 0.0;
    double curvature = 0.0;
    double total = 0.0;
};

struct LossResult {
    LossBreakdown parts;
    ParamGradient grad;
};

/// Fakes rendered from the field for the adversarial term, plus the renders needed to
/// backprop into the field.
struct FakeRenders {
    std::vector<RaymarchResult> renders;
    std::vector<NormalMap> maps() const;
};

FakeRenders render_fakes(const SdfField& field, const std::vector<ViewAngle>& views,
                         const TrainConfig& cfg, int epoch);

/// L_a + w_d L_G + w_e L_eik + w_c L_curv and its field-parameter gradient. The
/// adversarial term is skipped when `d` or `fakes` is null, or enable_dis is off.
/// The parameter gradient of L_G treats hit points as fixed.
LossResult total_loss(const SdfField& field, const Discriminator* d, const SampleBatch& batch,
                      const FakeRenders* fakes, const TrainConfig& cfg, int epoch);

struct EpochRecord {
    int epoch = 0;
    double epsilon = 0.0;
    double alignment = 0.0;       // mean over the epoch's steps
    double adversarial = 0.0;     // generator term, mean over adversarial rounds
    double discriminator = 0.0;   // discriminator objective, mean over rounds
    double eikonal = 0.0;
    double curvature = 0.0;
    double total = 0.0;
    double holdout_alignment = 0.0;  // L_a on a fixed batch after the epoch
    int adv_rounds = 0;
    double wall_seconds = 0.0;    // not part of the reproducible CSV
};

struct TrainReport {
    std::string config_hash;
    std::uint64_t seed = 0;
    double initial_holdout_alignment = 0.0;
    std::vector<EpochRecord> epochs;

    /// Per-epoch CSV without wall time, so identical runs give identical bytes.
    std::string to_csv() const;
    std::string timing_csv() const;
};

struct TrainResult {
    SdfField field;
    Discriminator discriminator;
    TrainReport report;
};

class DivergenceDetected : public Error {
public:
    DivergenceDetected(const std::string& what, TrainReport partial)
        : Error(what), report(std::move(partial)) {}
    TrainReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Joint training. Throws DivergenceDetected, carrying the epochs completed so far,
/// when a loss goes non-finite. `on_epoch` sees each record as it is appended.
TrainResult train(const Scene& scene, const TrainConfig& cfg, const EpochCallback& on_epoch = {});
TrainResult train(const Scene& scene, PriorScene prior, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace sidefit
