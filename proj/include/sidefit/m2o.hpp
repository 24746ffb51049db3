#pragma once

#include <span>
#include <vector>

#include "sidefit/field.hpp"
#include "sidefit/geom.hpp"
#include "sidefit/scalar_field.hpp"

namespace sidefit {

enum class GradientMode { m2o, analytic_autodiff };

/// How the curvature term reduces the per-axis second derivatives to a scalar.
enum class CurvatureReduction {
    sum_abs_axes,   // sum_k |d2phi/dx_k^2|
    abs_laplacian,  // |sum_k d2phi/dx_k^2|
};

struct StencilConfig {
    double epsilon = 1.0 / 128.0;
    GradientMode mode = GradientMode::m2o;
    CurvatureReduction reduction = CurvatureReduction::sum_abs_axes;
    // Stencil points leaving [-1,1]^3 are pulled back onto the boundary, which turns the
    // affected axis into a one-sided difference.
    bool clamp_to_domain = true;

    void validate() const;
};

/// Coarse-to-fine step size eps_n = eps_0 * decay_base^n.
struct EpsilonSchedule {
    double epsilon0 = 1.0 / 128.0;
    double decay_base = 0.5;

    static EpsilonSchedule for_image(int width, int height, double decay_base = 0.5);
    void validate() const;
};

inline constexpr double kEpsilonFloor = 1e-4;

double schedule_epsilon(const EpsilonSchedule& sched, int epoch);

/// Per-axis stencil offsets after clamping p +/- eps e_k into the domain.
struct StencilSteps {
    Vec3 plus = Vec3::Zero();
    Vec3 minus = Vec3::Zero();
};

StencilSteps stencil_steps(const Vec3& p, double epsilon, bool clamp = true);

struct M2oDerivatives {
    Vec3 gradient = Vec3::Zero();
    Vec3 second = Vec3::Zero();
};

/// Central differences over the six axis neighbours (6 evaluations).
Vec3 m2o_gradient(const ScalarField& field, const Vec3& p, const StencilConfig& cfg);
/// Per-axis second differences; 7 evaluations including the centre.
Vec3 m2o_second(const ScalarField& field, const Vec3& p, const StencilConfig& cfg);
/// Both at once from the same 7 evaluations.
M2oDerivatives m2o_derivatives(const ScalarField& field, const Vec3& p, const StencilConfig& cfg);

/// Gradients of many points at once: one batched stencil pass in m2o mode, one jet
/// pass in analytic mode.
void batch_gradients(const ScalarField& field, std::span<const Vec3> points,
                     const StencilConfig& cfg, std::span<Vec3> out);

double curvature_term(const Vec3& second, CurvatureReduction reduction);

/// Batched value / gradient / second derivative evaluation of an SdfField with a
/// reverse pass back to parameters. In m2o mode it evaluates 7 points per input point
/// (6 when second derivatives are not requested, plus the centre for values); in
/// analytic mode one jet evaluation per point.
class DerivativeProbe {
public:
    DerivativeProbe(const SdfField& field, std::span<const Vec3> points, const StencilConfig& cfg,
                    bool need_second = true);

    std::span<const double> values() const { return values_; }
    std::span<const Vec3> gradients() const { return gradients_; }
    std::span<const Vec3> seconds() const { return seconds_; }

    void backward(std::span<const double> up_value, std::span<const Vec3> up_grad,
                  std::span<const Vec3> up_second, ParamGradient& grad) const;

private:
    const SdfField& field_;
    StencilConfig cfg_;
    bool need_second_;
    std::size_t n_;
    std::vector<StencilSteps> steps_;
    FieldTape tape_;
    JetTape jets_;
    std::vector<double> values_;
    std::vector<Vec3> gradients_;
    std::vector<Vec3> seconds_;
};

/// (1/N) sum (|grad phi| - 1)^2.
double eikonal_loss(const ScalarField& field, const SampleBatch& batch, const StencilConfig& cfg);
/// (1/N) sum of the reduced per-axis second derivative magnitude.
double curvature_loss(const ScalarField& field, const SampleBatch& batch, const StencilConfig& cfg);

struct RegularizerWeights {
    double eikonal = 0.1;
    double curvature = 5e-4;
};

struct RegularizerResult {
    double eikonal = 0.0;
    double curvature = 0.0;
    ParamGradient grad;
};

/// Exact parameter gradient of w_e L_eik + w_c L_curv through the stencil.
RegularizerResult loss_backprop(const SdfField& field, const SampleBatch& batch,
                                const StencilConfig& cfg, const RegularizerWeights& weights);

/// Upstream for the regularizers, given per-point derivatives; shared by the trainer.
void regularizer_upstream(std::span<const Vec3> gradients, std::span<const Vec3> seconds,
                          const StencilConfig& cfg, const RegularizerWeights& weights,
                          std::vector<Vec3>& up_grad, std::vector<Vec3>& up_second,
                          double& eikonal, double& curvature);

}  // namespace sidefit
