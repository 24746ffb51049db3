#include "sidefit/m2o.hpp"

#include <algorithm>
#include <cmath>

namespace sidefit {

namespace {

// Stencil layout per point: centre, +x, -x, +y, -y, +z, -z.
constexpr int kWithCentre = 7;
constexpr int kWithoutCentre = 6;

void append_stencil(const Vec3& p, const StencilSteps& s, bool centre, std::vector<Vec3>& out) {
    if (centre) out.push_back(p);
    for (int k = 0; k < 3; ++k) {
        Vec3 plus = p, minus = p;
        plus[k] += s.plus[k];
        minus[k] -= s.minus[k];
        out.push_back(plus);
        out.push_back(minus);
    }
}

// d/d(phi+), d/d(phi-) of the first difference, and d/d(phi+, phi-, phi0) of the second.
struct AxisCoeffs {
    double g_plus, g_minus;
    double s_plus, s_minus, s_centre;
};

AxisCoeffs axis_coeffs(double hp, double hm) {
    const double span = hp + hm;
    AxisCoeffs c{1.0 / span, -1.0 / span, 0.0, 0.0, 0.0};
    if (hp > 0.0 && hm > 0.0) {
        c.s_plus = 2.0 / (hp * span);
        c.s_minus = 2.0 / (hm * span);
        c.s_centre = -(c.s_plus + c.s_minus);
    }
    return c;
}

void derivatives_from_samples(const double* v, bool centre, const StencilSteps& s, Vec3& grad,
                              Vec3* second) {
    const double phi0 = centre ? v[0] : 0.0;
    const double* axis = centre ? v + 1 : v;
    for (int k = 0; k < 3; ++k) {
        const double fp = axis[2 * k];
        const double fm = axis[2 * k + 1];
        const double hp = s.plus[k], hm = s.minus[k];
        grad[k] = (fp - fm) / (hp + hm);
        if (second) {
            // Written as differences so the symmetric case reduces to the textbook stencil.
            (*second)[k] = (hp > 0.0 && hm > 0.0)
                               ? 2.0 * ((fp - phi0) / hp - (phi0 - fm) / hm) / (hp + hm)
                               : 0.0;
        }
    }
}

void batch_derivatives(const ScalarField& field, std::span<const Vec3> points,
                       const StencilConfig& cfg, bool need_second, std::vector<Vec3>& grads,
                       std::vector<Vec3>& seconds) {
    const std::size_t n = points.size();
    grads.assign(n, Vec3::Zero());
    seconds.assign(n, Vec3::Zero());
    if (cfg.mode == GradientMode::analytic_autodiff) {
        std::vector<double> values(n);
        if (!field.eval_jets(points, values, grads, seconds)) {
            throw Error("field does not provide analytic derivatives");
        }
        return;
    }
    const int per = need_second ? kWithCentre : kWithoutCentre;
    std::vector<Vec3> stencil;
    stencil.reserve(n * per);
    std::vector<StencilSteps> steps(n);
    for (std::size_t i = 0; i < n; ++i) {
        steps[i] = stencil_steps(points[i], cfg.epsilon, cfg.clamp_to_domain);
        append_stencil(points[i], steps[i], need_second, stencil);
    }
    std::vector<double> vals(stencil.size());
    field.eval(stencil, vals);
    for (std::size_t i = 0; i < n; ++i) {
        derivatives_from_samples(&vals[i * per], need_second, steps[i], grads[i],
                                 need_second ? &seconds[i] : nullptr);
    }
}

}  // namespace

void StencilConfig::validate() const {
    if (!(epsilon > 0.0) || epsilon > 0.5) throw Error("stencil epsilon must lie in (0, 0.5]");
}

EpsilonSchedule EpsilonSchedule::for_image(int width, int height, double decay_base) {
    if (width <= 0 || height <= 0) throw Error("image dimensions must be positive");
    return {1.0 / std::max(width, height), decay_base};
}

void EpsilonSchedule::validate() const {
    if (!(epsilon0 > 0.0)) throw Error("epsilon0 must be positive");
    if (!(decay_base > 0.0 && decay_base < 1.0)) throw Error("decay_base must lie in (0, 1)");
}

double schedule_epsilon(const EpsilonSchedule& sched, int epoch) {
    sched.validate();
    if (epoch < 0) throw Error("epoch must be non-negative");
    return std::max(sched.epsilon0 * std::pow(sched.decay_base, epoch), kEpsilonFloor);
}

StencilSteps stencil_steps(const Vec3& p, double epsilon, bool clamp) {
    StencilSteps s;
    if (!clamp) {
        s.plus.setConstant(epsilon);
        s.minus.setConstant(epsilon);
        return s;
    }
    for (int k = 0; k < 3; ++k) {
        s.plus[k] = std::max(std::min(p[k] + epsilon, kDomainMax) - p[k], 0.0);
        s.minus[k] = std::max(p[k] - std::max(p[k] - epsilon, kDomainMin), 0.0);
    }
    return s;
}

Vec3 m2o_gradient(const ScalarField& field, const Vec3& p, const StencilConfig& cfg) {
    cfg.validate();
    const StencilSteps s = stencil_steps(p, cfg.epsilon, cfg.clamp_to_domain);
    std::vector<Vec3> pts;
    pts.reserve(kWithoutCentre);
    append_stencil(p, s, false, pts);
    std::vector<double> v(pts.size());
    field.eval(pts, v);
    Vec3 g;
    derivatives_from_samples(v.data(), false, s, g, nullptr);
    return g;
}

M2oDerivatives m2o_derivatives(const ScalarField& field, const Vec3& p, const StencilConfig& cfg) {
    cfg.validate();
    const StencilSteps s = stencil_steps(p, cfg.epsilon, cfg.clamp_to_domain);
    std::vector<Vec3> pts;
    pts.reserve(kWithCentre);
    append_stencil(p, s, true, pts);
    std::vector<double> v(pts.size());
    field.eval(pts, v);
    M2oDerivatives d;
    derivatives_from_samples(v.data(), true, s, d.gradient, &d.second);
    return d;
}

Vec3 m2o_second(const ScalarField& field, const Vec3& p, const StencilConfig& cfg) {
    return m2o_derivatives(field, p, cfg).second;
}

void batch_gradients(const ScalarField& field, std::span<const Vec3> points,
                     const StencilConfig& cfg, std::span<Vec3> out) {
    cfg.validate();
    if (out.size() != points.size()) throw ShapeMismatch("batch_gradients output length mismatch");
    std::vector<Vec3> grads, seconds;
    batch_derivatives(field, points, cfg, false, grads, seconds);
    std::copy(grads.begin(), grads.end(), out.begin());
}

double curvature_term(const Vec3& second, CurvatureReduction reduction) {
    return reduction == CurvatureReduction::sum_abs_axes ? second.cwiseAbs().sum()
                                                         : std::abs(second.sum());
}

// ---------------------------------------------------------------------------

DerivativeProbe::DerivativeProbe(const SdfField& field, std::span<const Vec3> points,
                                 const StencilConfig& cfg, bool need_second)
    : field_(field), cfg_(cfg), need_second_(need_second), n_(points.size()) {
    cfg_.validate();
    gradients_.assign(n_, Vec3::Zero());
    seconds_.assign(n_, Vec3::Zero());
    if (cfg_.mode == GradientMode::analytic_autodiff) {
        values_.resize(n_);
        jets_ = field.forward_jets(points);
        for (std::size_t i = 0; i < n_; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            values_[i] = jets_.base.output[c];
            for (int k = 0; k < 3; ++k) {
                gradients_[i][k] = jets_.d_output[k][c];
                seconds_[i][k] = jets_.d2_output[k][c];
            }
        }
        return;
    }
    const int per = need_second ? kWithCentre : kWithoutCentre;
    std::vector<Vec3> stencil;
    stencil.reserve(n_ * per);
    steps_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
        steps_[i] = stencil_steps(points[i], cfg_.epsilon, cfg_.clamp_to_domain);
        append_stencil(points[i], steps_[i], need_second, stencil);
    }
    tape_ = field.forward(stencil);
    if (need_second) values_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
        const double* v = tape_.output.data() + i * per;
        if (need_second) values_[i] = v[0];
        derivatives_from_samples(v, need_second, steps_[i], gradients_[i],
                                 need_second ? &seconds_[i] : nullptr);
    }
}

void DerivativeProbe::backward(std::span<const double> up_value, std::span<const Vec3> up_grad,
                               std::span<const Vec3> up_second, ParamGradient& grad) const {
    auto check = [&](std::size_t len) {
        if (len != 0 && len != n_) throw ShapeMismatch("probe upstream length mismatch");
    };
    check(up_value.size());
    check(up_grad.size());
    check(up_second.size());

    if (cfg_.mode == GradientMode::analytic_autodiff) {
        std::vector<double> uv(n_, 0.0);
        std::vector<Vec3> ug(n_, Vec3::Zero()), us(n_, Vec3::Zero());
        std::copy(up_value.begin(), up_value.end(), uv.begin());
        std::copy(up_grad.begin(), up_grad.end(), ug.begin());
        std::copy(up_second.begin(), up_second.end(), us.begin());
        field_.backward_jets(jets_, uv, ug, us, grad);
        return;
    }

    if (!need_second_ && (!up_value.empty() || !up_second.empty())) {
        throw Error("probe was built without the centre sample");
    }
    const int per = need_second_ ? kWithCentre : kWithoutCentre;
    std::vector<double> up(n_ * per, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
        double* u = &up[i * per];
        double* axis = need_second_ ? u + 1 : u;
        if (!up_value.empty()) u[0] += up_value[i];
        for (int k = 0; k < 3; ++k) {
            const AxisCoeffs c = axis_coeffs(steps_[i].plus[k], steps_[i].minus[k]);
            if (!up_grad.empty()) {
                axis[2 * k] += c.g_plus * up_grad[i][k];
                axis[2 * k + 1] += c.g_minus * up_grad[i][k];
            }
            if (!up_second.empty()) {
                axis[2 * k] += c.s_plus * up_second[i][k];
                axis[2 * k + 1] += c.s_minus * up_second[i][k];
                u[0] += c.s_centre * up_second[i][k];
            }
        }
    }
    field_.backward(tape_, up, grad);
}

// ---------------------------------------------------------------------------

double eikonal_loss(const ScalarField& field, const SampleBatch& batch, const StencilConfig& cfg) {
    if (batch.size() == 0) throw Error("eikonal_loss needs a nonempty batch");
    cfg.validate();
    std::vector<Vec3> grads, seconds;
    batch_derivatives(field, batch.points, cfg, false, grads, seconds);
    double acc = 0.0;
    for (const Vec3& g : grads) {
        const double r = g.norm() - 1.0;
        acc += r * r;
    }
    return acc / static_cast<double>(batch.size());
}

double curvature_loss(const ScalarField& field, const SampleBatch& batch, const StencilConfig& cfg) {
    if (batch.size() == 0) throw Error("curvature_loss needs a nonempty batch");
    cfg.validate();
    std::vector<Vec3> grads, seconds;
    batch_derivatives(field, batch.points, cfg, true, grads, seconds);
    double acc = 0.0;
    for (const Vec3& s : seconds) acc += curvature_term(s, cfg.reduction);
    return acc / static_cast<double>(batch.size());
}

void regularizer_upstream(std::span<const Vec3> gradients, std::span<const Vec3> seconds,
                          const StencilConfig& cfg, const RegularizerWeights& weights,
                          std::vector<Vec3>& up_grad, std::vector<Vec3>& up_second,
                          double& eikonal, double& curvature) {
    const std::size_t n = gradients.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    up_grad.assign(n, Vec3::Zero());
    up_second.assign(n, Vec3::Zero());
    eikonal = 0.0;
    curvature = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3& g = gradients[i];
        const double norm = g.norm();
        eikonal += (norm - 1.0) * (norm - 1.0);
        if (norm > 0.0) up_grad[i] = weights.eikonal * inv_n * 2.0 * (norm - 1.0) / norm * g;

        const Vec3& s = seconds[i];
        curvature += curvature_term(s, cfg.reduction);
        if (cfg.reduction == CurvatureReduction::sum_abs_axes) {
            for (int k = 0; k < 3; ++k) {
                up_second[i][k] = weights.curvature * inv_n * ((s[k] > 0.0) - (s[k] < 0.0));
            }
        } else {
            const double sum = s.sum();
            up_second[i].setConstant(weights.curvature * inv_n * ((sum > 0.0) - (sum < 0.0)));
        }
    }
    eikonal *= inv_n;
    curvature *= inv_n;
}

RegularizerResult loss_backprop(const SdfField& field, const SampleBatch& batch,
                                const StencilConfig& cfg, const RegularizerWeights& weights) {
    if (batch.size() == 0) throw Error("loss_backprop needs a nonempty batch");
    RegularizerResult result;
    result.grad = ParamGradient::zeros_like(field);
    const DerivativeProbe probe(field, batch.points, cfg, true);
    std::vector<Vec3> up_grad, up_second;
    regularizer_upstream(probe.gradients(), probe.seconds(), cfg, weights, up_grad, up_second,
                         result.eikonal, result.curvature);
    if (weights.eikonal == 0.0 && weights.curvature == 0.0) return result;
    probe.backward({}, up_grad, up_second, result.grad);
    return result;
}

}  // namespace sidefit
