#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace sidefit {

/// RMS-scaled gradient descent:
///   v <- decay v + (1 - decay) g^2,  theta <- theta - lr g / (sqrt(v) + damping).
/// Params needs param_count() and param(i) returning a reference; Grad needs
/// operator[] in the same flat order.
class RmsProp {
public:
    double decay = 0.99;
    double damping = 1e-8;

    template <class Params, class Grad>
    void step(Params& params, const Grad& grad, double lr) {
        const std::size_t n = params.param_count();
        if (mean_sq_.size() != n) mean_sq_.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            double& v = mean_sq_[i];
            v = decay * v + (1.0 - decay) * g * g;
            if (g != 0.0) params.param(i) -= lr * g / (std::sqrt(v) + damping);
        }
    }

    const std::vector<double>& mean_square() const { return mean_sq_; }

private:
    std::vector<double> mean_sq_;
};

}  // namespace sidefit
