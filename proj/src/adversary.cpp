#include "sidefit/adversary.hpp"

#include <algorithm>
#include <cmath>

namespace sidefit {

namespace {

// Box-filter weights from `len` source pixels onto 16 output cells: row a holds the
// overlap of each pixel with [a len/16, (a+1) len/16), divided by the cell width.
Eigen::MatrixXd box_weights(int len) {
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(kTileSize, len);
    const double cell = static_cast<double>(len) / kTileSize;
    for (int a = 0; a < kTileSize; ++a) {
        const double lo = a * cell, hi = (a + 1) * cell;
        for (int p = static_cast<int>(std::floor(lo)); p < len && p < hi; ++p) {
            const double overlap = std::min(hi, p + 1.0) - std::max(lo, static_cast<double>(p));
            if (overlap > 0.0) w(a, p) = overlap / cell;
        }
    }
    return w;
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log(1.0 + std::exp(-std::abs(x)));
}

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

void check_map(const NormalMap& map) {
    if (map.width < kMinMapSize || map.height < kMinMapSize) {
        throw MapTooSmall("normal map must be at least 48x48 for patch splitting");
    }
}

}  // namespace

int tile_start(int size, int tile) {
    return tile < kPatchGrid ? tile * (size / kPatchGrid) : size;
}

PatchGrid split_patches(const NormalMap& map) {
    check_map(map);
    PatchGrid grid;
    for (int tr = 0; tr < kPatchGrid; ++tr) {
        const int y0 = tile_start(map.height, tr), y1 = tile_start(map.height, tr + 1);
        const Eigen::MatrixXd wy = box_weights(y1 - y0);
        for (int tc = 0; tc < kPatchGrid; ++tc) {
            const int x0 = tile_start(map.width, tc), x1 = tile_start(map.width, tc + 1);
            const Eigen::MatrixXd wx = box_weights(x1 - x0);
            Eigen::VectorXd& out = grid.patches[static_cast<std::size_t>(tr * kPatchGrid + tc)];
            out = Eigen::VectorXd::Zero(kPatchDim);
            for (int ch = 0; ch < 3; ++ch) {
                Eigen::MatrixXd src(y1 - y0, x1 - x0);
                for (int j = y0; j < y1; ++j)
                    for (int i = x0; i < x1; ++i) src(j - y0, i - x0) = map.at(i, j)[ch];
                const Eigen::MatrixXd tile = wy * src * wx.transpose();
                for (int r = 0; r < kTileSize; ++r)
                    for (int c = 0; c < kTileSize; ++c) out[(r * kTileSize + c) * 3 + ch] = tile(r, c);
            }
        }
    }
    return grid;
}

std::vector<Vec3> split_patches_backward(int width, int height, const PatchGrid& d_patches) {
    if (width < kMinMapSize || height < kMinMapSize) throw MapTooSmall("map too small");
    std::vector<Vec3> out(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), Vec3::Zero());
    for (int tr = 0; tr < kPatchGrid; ++tr) {
        const int y0 = tile_start(height, tr), y1 = tile_start(height, tr + 1);
        const Eigen::MatrixXd wy = box_weights(y1 - y0);
        for (int tc = 0; tc < kPatchGrid; ++tc) {
            const int x0 = tile_start(width, tc), x1 = tile_start(width, tc + 1);
            const Eigen::MatrixXd wx = box_weights(x1 - x0);
            const Eigen::VectorXd& d = d_patches.patches[static_cast<std::size_t>(tr * kPatchGrid + tc)];
            for (int ch = 0; ch < 3; ++ch) {
                Eigen::MatrixXd dt(kTileSize, kTileSize);
                for (int r = 0; r < kTileSize; ++r)
                    for (int c = 0; c < kTileSize; ++c) dt(r, c) = d[(r * kTileSize + c) * 3 + ch];
                const Eigen::MatrixXd dsrc = wy.transpose() * dt * wx;
                for (int j = y0; j < y1; ++j)
                    for (int i = x0; i < x1; ++i) {
                        out[static_cast<std::size_t>(j) * width + i][ch] += dsrc(j - y0, i - x0);
                    }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::size_t DiscriminatorGradient::size() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

double DiscriminatorGradient::operator[](std::size_t i) const {
    for (const auto& l : layers) {
        if (i < static_cast<std::size_t>(l.weight.size())) return l.weight.data()[i];
        i -= l.weight.size();
        if (i < static_cast<std::size_t>(l.bias.size())) return l.bias[i];
        i -= l.bias.size();
    }
    throw Error("discriminator gradient index out of range");
}

void DiscriminatorGradient::add_scaled(const DiscriminatorGradient& other, double s) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].weight += s * other.layers[l].weight;
        layers[l].bias += s * other.layers[l].bias;
    }
}

double DiscriminatorGradient::max_abs() const {
    double m = 0.0;
    for (const auto& l : layers) {
        m = std::max({m, l.weight.cwiseAbs().maxCoeff(), l.bias.cwiseAbs().maxCoeff()});
    }
    return m;
}

Discriminator::Discriminator(Rng rng, int hidden) {
    if (hidden <= 0) throw Error("discriminator width must be positive");
    int fan_in = kPatchDim;
    for (int w : {hidden, 1}) {
        DenseLayer l{Eigen::MatrixXd(w, fan_in), Eigen::VectorXd::Zero(w)};
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
            for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = scale * rng.normal();
        layers.push_back(std::move(l));
        fan_in = w;
    }
}

double Discriminator::score_patch(const Eigen::VectorXd& patch) const {
    Eigen::VectorXd h = layers[0].weight * patch + layers[0].bias;
    for (Eigen::Index k = 0; k < h.size(); ++k) h[k] = h[k] > 0.0 ? h[k] : kLeakySlope * h[k];
    return layers[1].weight.row(0).dot(h) + layers[1].bias[0];
}

// The output layer is linear, so the patch mean is taken over hidden activations
// before it. A zero-weight scorer then returns its bias exactly.
double Discriminator::discriminate(const NormalMap& map) const {
    return backward(map, 0.0, nullptr, nullptr);
}

double Discriminator::backward(const NormalMap& map, double upstream, DiscriminatorGradient* dparams,
                               std::vector<Vec3>* dpixels) const {
    const PatchGrid grid = split_patches(map);
    constexpr double kInvPatches = 1.0 / (kPatchGrid * kPatchGrid);
    const Eigen::Index hidden = layers[0].weight.rows();
    std::array<Eigen::VectorXd, kPatchGrid * kPatchGrid> slopes;
    Eigen::VectorXd mean_act = Eigen::VectorXd::Zero(hidden);
    for (std::size_t t = 0; t < grid.patches.size(); ++t) {
        const Eigen::VectorXd pre = layers[0].weight * grid.patches[t] + layers[0].bias;
        slopes[t].resize(hidden);
        for (Eigen::Index k = 0; k < hidden; ++k) {
            slopes[t][k] = pre[k] > 0.0 ? 1.0 : kLeakySlope;
            mean_act[k] += slopes[t][k] * pre[k];
        }
    }
    mean_act *= kInvPatches;
    const double score = layers[1].weight.row(0).dot(mean_act) + layers[1].bias[0];
    if (upstream == 0.0 || (!dparams && !dpixels)) return score;

    if (dparams) {
        dparams->layers[1].weight.row(0) += upstream * mean_act.transpose();
        dparams->layers[1].bias[0] += upstream;
    }
    const Eigen::VectorXd d_act = (upstream * kInvPatches) * layers[1].weight.row(0).transpose();
    PatchGrid d_patches;
    for (std::size_t t = 0; t < grid.patches.size(); ++t) {
        const Eigen::VectorXd d_pre = d_act.cwiseProduct(slopes[t]);
        if (dparams) {
            dparams->layers[0].weight.noalias() += d_pre * grid.patches[t].transpose();
            dparams->layers[0].bias += d_pre;
        }
        if (dpixels) d_patches.patches[t] = layers[0].weight.transpose() * d_pre;
    }
    if (dpixels) {
        const std::vector<Vec3> g = split_patches_backward(map.width, map.height, d_patches);
        if (dpixels->size() != g.size()) dpixels->assign(g.size(), Vec3::Zero());
        for (std::size_t i = 0; i < g.size(); ++i) (*dpixels)[i] += g[i];
    }
    return score;
}

DiscriminatorGradient Discriminator::zero_gradient() const {
    DiscriminatorGradient g;
    for (const auto& l : layers) {
        g.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                            Eigen::VectorXd::Zero(l.bias.size())});
    }
    return g;
}

std::size_t Discriminator::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

double& Discriminator::param(std::size_t i) {
    for (auto& l : layers) {
        if (i < static_cast<std::size_t>(l.weight.size())) return l.weight.data()[i];
        i -= l.weight.size();
        if (i < static_cast<std::size_t>(l.bias.size())) return l.bias[i];
        i -= l.bias.size();
    }
    throw Error("discriminator parameter index out of range");
}

double discriminate(const Discriminator& d, const NormalMap& map) {
    return d.discriminate(map);
}

double discriminator_loss(const Discriminator& d, std::span<const NormalMap> fakes,
                          std::span<const NormalMap> reals, AdvLossMode mode,
                          DiscriminatorGradient* grad) {
    if (fakes.empty() || reals.empty()) throw Error("discriminator_loss needs fakes and reals");
    const double wf = 1.0 / static_cast<double>(fakes.size());
    const double wr = 1.0 / static_cast<double>(reals.size());
    double fake_sum = 0.0, real_sum = 0.0;
    auto term = [&](const NormalMap& m, double weight, bool real) {
        const double s = d.discriminate(m);
        double value, slope;
        if (mode.kind == AdvLossMode::Kind::mse) {
            const double target = real ? 1.0 : 0.0;
            value = (s - target) * (s - target);
            slope = 2.0 * (s - target);
        } else {
            value = real ? softplus(-s) : softplus(s);
            slope = real ? -sigmoid(-s) : sigmoid(s);
        }
        (real ? real_sum : fake_sum) += value;
        if (grad) d.backward(m, weight * slope, grad, nullptr);
    };
    for (const NormalMap& m : fakes) term(m, wf, false);
    for (const NormalMap& m : reals) term(m, wr, true);
    // Sum then divide, so a constant D = 0.5 gives exactly 0.5 under MSE.
    return fake_sum / static_cast<double>(fakes.size()) + real_sum / static_cast<double>(reals.size());
}

GeneratorLoss generator_adv_loss(const Discriminator& d, std::span<const NormalMap> fakes,
                                 AdvLossMode mode) {
    if (fakes.empty()) throw Error("generator_adv_loss needs at least one fake");
    GeneratorLoss out;
    const double w = 1.0 / static_cast<double>(fakes.size());
    for (const NormalMap& m : fakes) {
        const double s = d.discriminate(m);
        double value, slope;
        if (mode.kind == AdvLossMode::Kind::mse) {
            value = (s - 1.0) * (s - 1.0);
            slope = 2.0 * (s - 1.0);
        } else {
            value = softplus(-s);
            slope = -sigmoid(-s);
        }
        out.loss += w * value;
        std::vector<Vec3> px(m.normals.size(), Vec3::Zero());
        if (slope != 0.0) {
            d.backward(m, w * slope, nullptr, &px);
            for (std::size_t i = 0; i < px.size(); ++i) {
                if (!m.mask[i]) px[i].setZero();
            }
        }
        out.pixel_grads.push_back(std::move(px));
    }
    return out;
}

double discriminator_step(Discriminator& d, std::span<const NormalMap> fakes,
                          std::span<const NormalMap> reals, AdvLossMode mode, double learning_rate) {
    if (!(learning_rate >= 0.0)) throw Error("learning rate must be non-negative");
    DiscriminatorGradient g = d.zero_gradient();
    const double loss = discriminator_loss(d, fakes, reals, mode, &g);
    if (learning_rate > 0.0) d.optimizer.step(d, g, learning_rate);
    return loss;
}

}  // namespace sidefit
