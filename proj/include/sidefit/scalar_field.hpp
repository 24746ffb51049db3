#pragma once

#include <functional>
#include <span>

#include "sidefit/geom.hpp"

namespace sidefit {

/// Anything that can be evaluated as a scalar function over the domain. Batched so
/// network-backed fields can use matrix products.
class ScalarField {
public:
    virtual ~ScalarField() = default;

    virtual void eval(std::span<const Vec3> points, std::span<double> out) const = 0;

    /// Analytic value, gradient and per-axis second derivatives. Fields that cannot
    /// provide them return false.
    virtual bool eval_jets(std::span<const Vec3> points, std::span<double> value,
                           std::span<Vec3> gradient, std::span<Vec3> second) const {
        (void)points, (void)value, (void)gradient, (void)second;
        return false;
    }

    double operator()(const Vec3& p) const {
        double v = 0.0;
        eval(std::span<const Vec3>(&p, 1), std::span<double>(&v, 1));
        return v;
    }
};

/// Wraps a plain callable; optional analytic gradient / axis second derivative.
class FunctionField final : public ScalarField {
public:
    using Fn = std::function<double(const Vec3&)>;
    using VecFn = std::function<Vec3(const Vec3&)>;

    explicit FunctionField(Fn f, VecFn gradient = {}, VecFn second = {})
        : f_(std::move(f)), gradient_(std::move(gradient)), second_(std::move(second)) {}

    void eval(std::span<const Vec3> points, std::span<double> out) const override {
        for (std::size_t i = 0; i < points.size(); ++i) out[i] = f_(points[i]);
    }

    bool eval_jets(std::span<const Vec3> points, std::span<double> value,
                   std::span<Vec3> gradient, std::span<Vec3> second) const override {
        if (!gradient_) return false;
        for (std::size_t i = 0; i < points.size(); ++i) {
            value[i] = f_(points[i]);
            gradient[i] = gradient_(points[i]);
            second[i] = second_ ? second_(points[i]) : Vec3::Zero();
        }
        return true;
    }

private:
    Fn f_;
    VecFn gradient_;
    VecFn second_;
};

/// Exposes an analytic SDF as a field (gradient only; no second derivatives).
class AnalyticField final : public ScalarField {
public:
    explicit AnalyticField(SdfPtr shape) : shape_(std::move(shape)) {}

    void eval(std::span<const Vec3> points, std::span<double> out) const override {
        for (std::size_t i = 0; i < points.size(); ++i) out[i] = shape_->eval(points[i]);
    }

    const AnalyticSdf& shape() const { return *shape_; }

private:
    SdfPtr shape_;
};

}  // namespace sidefit
