#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sidefit/metrics.hpp"
#include "sidefit/trainer.hpp"

namespace sidefit {

enum class Variant { full, wo_dis, wo_m2o, fixed_eps, four_views, bce_loss };

/// "full", "w/o_dis", "w/o_m2o", "fixed_eps", "four_views", "bce_loss".
std::string variant_name(Variant v);
/// Accepts the names above; "wo_dis" / "wo_m2o" are accepted as well. Throws ConfigError.
Variant parse_variant(const std::string& name);
/// The config for `v`: full is `base` unchanged; fixed_eps pins the step at epsilon0.
TrainConfig apply_variant(TrainConfig base, Variant v);

struct ExperimentSpec {
    std::filesystem::path scene_path;
    TrainConfig config;
    std::filesystem::path out_dir;
    std::vector<Variant> variants = {Variant::full};
    std::vector<std::uint64_t> seeds = {0};
    int mesh_resolution = 128;
    MetricOptions metrics;
};

/// Marching cubes of `field` at `resolution`, scored against the scene target's
/// ground-truth mesh. Throws EmptySurface when the field has no zero crossing.
MetricReport evaluate_field(const SdfField& field, const Scene& scene, int resolution,
                            const MetricOptions& opts, const Rng& rng);

struct RunOutcome {
    bool ok = false;
    std::string failure;  // "DivergenceDetected: ..." or "EmptySurface: ..."
    MetricReport metrics;
    TrainReport report;
};

/// Trains one variant at one seed and evaluates it. Failures are captured, not thrown.
RunOutcome run_variant(const Scene& scene, const TrainConfig& base, Variant v, std::uint64_t seed,
                       int mesh_resolution, const MetricOptions& opts, std::ostream* log = nullptr);

struct AblationRow {
    Variant variant = Variant::full;
    std::string config_hash;
    int runs_ok = 0;
    int runs_failed = 0;
    MetricReport mean;  // over successful runs; per_view left empty
    std::vector<std::pair<std::uint64_t, RunOutcome>> runs;
};

/// Every variant at every seed, rows in declaration order.
std::vector<AblationRow> run_ablation(const Scene& scene, const ExperimentSpec& spec,
                                      std::ostream* log = nullptr);

std::string ablation_csv(const std::vector<AblationRow>& rows, const TrainConfig& base,
                         const std::vector<std::uint64_t>& seeds);
std::string ablation_runs_csv(const std::vector<AblationRow>& rows, const TrainConfig& base,
                              const std::vector<std::uint64_t>& seeds);

/// Exit codes shared by all subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int cmd_fit(const ExperimentSpec& spec, std::ostream& out, std::ostream& err);

struct EvalSpec {
    std::filesystem::path checkpoint;
    std::filesystem::path scene_path;
    std::filesystem::path out_dir;
    int resolution = 128;
    std::optional<std::uint64_t> seed;  // defaults to the checkpoint's seed
    MetricOptions metrics;
};

int cmd_eval(const EvalSpec& spec, std::ostream& out, std::ostream& err);
int cmd_ablate(const ExperimentSpec& spec, std::ostream& out, std::ostream& err);

/// Parses "four", "sides", or a comma list of yaws such as "0,90".
std::vector<ViewAngle> parse_views(const std::string& text);

/// Full command line (args[0] is the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sidefit
