#include "sidefit/field.hpp"

#include <algorithm>
#include <cmath>

namespace sidefit {

namespace {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;

// Step for differencing the analytic prior where only its gradient is closed-form.
constexpr double kPriorDiffStep = 1e-4;

MatrixXd softplus(const MatrixXd& a) {
    // log(1 + e^-|a|) instead of log1p: Eigen vectorizes log but not log1p.
    return (a.array().max(0.0) + (1.0 + (-a.array().abs()).exp()).log()).matrix();
}

ArrayXXd sigmoid(const MatrixXd& a) {
    return 1.0 / (1.0 + (-a.array()).exp());
}

struct PriorSample {
    double sdf = 0.0;
    Vec3 grad = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    bool valid = false;
};

PriorSample sample_prior(const AnalyticSdf& shape, const Vec3& p) {
    PriorSample s;
    s.sdf = shape.eval_grad(p, s.grad);
    const double n = s.grad.norm();
    if (n >= 1e-9) {
        s.normal = s.grad / n;
        s.valid = true;
    }
    return s;
}

struct ProjectedSample {
    Vec3 value = Vec3::Zero();
    std::array<Vec3, 3> d_world{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
    bool valid = false;
    bool front = true;
};

ProjectedSample sample_projection(const PriorScene& scene, const Vec3& p, const PriorSample& prior) {
    ProjectedSample out;
    out.front = !prior.valid || prior.normal.z() >= 0.0;
    const ViewAngle view = out.front ? ViewAngle::front() : ViewAngle::back();
    const NormalMap& map = out.front ? scene.front_map : scene.back_map;
    const double u = p.dot(view.right());
    const double v = p.dot(view.up());
    Vec3 val, d_du, d_dv;
    out.valid = sample_bilinear(map, u, v, val, &d_du, &d_dv);
    if (!out.valid) return out;
    out.value = view.view_to_world(val);
    const Vec3 w_du = view.view_to_world(d_du);
    const Vec3 w_dv = view.view_to_world(d_dv);
    for (int k = 0; k < 3; ++k) {
        out.d_world[k] = w_du * view.right()[k] + w_dv * view.up()[k];
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

VoxelGrid::VoxelGrid(int res, int ch)
    : resolution(res), channels(ch),
      values(static_cast<std::size_t>(res) * res * res * ch, 0.0) {
    if (res < 2 || ch < 1) throw Error("voxel grid needs resolution >= 2 and channels >= 1");
}

TrilinearWeights trilinear_weights(const VoxelGrid& grid, const Vec3& p) {
    const Vec3 q = clamp_to_domain(p);
    const int g = grid.resolution;
    const double scale = 0.5 * (g - 1);
    std::array<int, 3> base{};
    std::array<double, 3> f{};
    for (int k = 0; k < 3; ++k) {
        const double t = (q[k] + 1.0) * scale;
        base[k] = std::clamp(static_cast<int>(std::floor(t)), 0, g - 2);
        f[k] = t - base[k];
    }
    TrilinearWeights tw;
    for (int c = 0; c < 8; ++c) {
        const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
        const double wx = bx ? f[0] : 1.0 - f[0];
        const double wy = by ? f[1] : 1.0 - f[1];
        const double wz = bz ? f[2] : 1.0 - f[2];
        const double sx = bx ? scale : -scale;
        const double sy = by ? scale : -scale;
        const double sz = bz ? scale : -scale;
        tw.node[c] = grid.node_index(base[0] + bx, base[1] + by, base[2] + bz);
        tw.weight[c] = wx * wy * wz;
        tw.d_weight[c] = Vec3(sx * wy * wz, wx * sy * wz, wx * wy * sz);
    }
    return tw;
}

void PriorScene::validate() const {
    if (!prior_shape) throw Error("prior scene has no prior shape");
    if (voxels.resolution < 8) throw Error("voxel grid resolution must be >= 8");
    if (voxels.channels < 4) throw Error("voxel grid needs >= 4 channels");
    if (front_map.width != back_map.width || front_map.height != back_map.height) {
        throw Error("front and back normal maps must have identical dimensions");
    }
    if (front_map.width <= 0) throw Error("prior scene normal maps are empty");
}

Eigen::VectorXd FeatureVector::flatten() const {
    Eigen::VectorXd x(kFixedFeatureDim + voxel_feat.size());
    x[0] = prior_sdf;
    x.segment<3>(1) = prior_normal;
    x.segment<3>(4) = projected_normal;
    x.segment<3>(7) = position;
    x.tail(voxel_feat.size()) = voxel_feat;
    return x;
}

FeatureVector extract_features(const PriorScene& scene, const Vec3& p) {
    FeatureVector f;
    const PriorSample prior = sample_prior(*scene.prior_shape, p);
    f.prior_sdf = prior.sdf;
    f.prior_normal = prior.normal;
    f.prior_normal_valid = prior.valid;
    const ProjectedSample proj = sample_projection(scene, p, prior);
    f.projected_normal = proj.value;
    f.projected_normal_valid = proj.valid;
    f.projected_from_front = proj.front;
    f.position = p;

    const int nch = scene.voxels.channels;
    f.voxel_feat = Eigen::VectorXd::Zero(nch);
    const TrilinearWeights tw = trilinear_weights(scene.voxels, p);
    for (int c = 0; c < 8; ++c) {
        const double* node = &scene.voxels.values[tw.node[c] * nch];
        for (int ch = 0; ch < nch; ++ch) f.voxel_feat[ch] += tw.weight[c] * node[ch];
    }
    return f;
}

// ---------------------------------------------------------------------------

ParamGradient ParamGradient::zeros_like(const SdfField& field) {
    ParamGradient g;
    for (const auto& l : field.layers()) {
        g.layers.push_back({MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                            Eigen::VectorXd::Zero(l.bias.size())});
    }
    g.voxels.assign(field.scene().voxels.values.size(), 0.0);
    return g;
}

ParamGradient& ParamGradient::operator+=(const ParamGradient& other) {
    add_scaled(other, 1.0);
    return *this;
}

void ParamGradient::add_scaled(const ParamGradient& other, double s) {
    if (other.layers.size() != layers.size() || other.voxels.size() != voxels.size()) {
        throw ShapeMismatch("parameter gradients have different shapes");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].weight += s * other.layers[l].weight;
        layers[l].bias += s * other.layers[l].bias;
    }
    for (std::size_t i = 0; i < voxels.size(); ++i) voxels[i] += s * other.voxels[i];
}

ParamGradient& ParamGradient::operator*=(double s) {
    for (auto& l : layers) {
        l.weight *= s;
        l.bias *= s;
    }
    for (double& v : voxels) v *= s;
    return *this;
}

std::size_t ParamGradient::size() const {
    std::size_t n = voxels.size();
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

double ParamGradient::operator[](std::size_t i) const {
    for (const auto& l : layers) {
        if (i < static_cast<std::size_t>(l.weight.size())) return l.weight.data()[i];
        i -= l.weight.size();
        if (i < static_cast<std::size_t>(l.bias.size())) return l.bias[i];
        i -= l.bias.size();
    }
    return voxels.at(i);
}

double ParamGradient::max_abs() const {
    double m = 0.0;
    for (const auto& l : layers) {
        if (l.weight.size()) m = std::max(m, l.weight.cwiseAbs().maxCoeff());
        if (l.bias.size()) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
    }
    for (double v : voxels) m = std::max(m, std::abs(v));
    return m;
}

bool ParamGradient::all_finite() const {
    for (const auto& l : layers) {
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return std::all_of(voxels.begin(), voxels.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------

SdfField::SdfField(PriorScene scene, std::vector<int> hidden_widths, Rng rng,
                   double voxel_init_std)
    : scene_(std::move(scene)), hidden_(std::move(hidden_widths)) {
    scene_.validate();
    if (hidden_.empty()) throw Error("field needs at least one hidden layer");
    int fan_in = input_dim();
    std::vector<int> widths = hidden_;
    widths.push_back(1);
    for (int w : widths) {
        if (w <= 0) throw Error("layer widths must be positive");
        DenseLayer layer{MatrixXd(w, fan_in), Eigen::VectorXd::Zero(w)};
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
                layer.weight(r, c) = scale * rng.normal();
            }
        }
        layers_.push_back(std::move(layer));
        fan_in = w;
    }
    Rng vr = rng.fork(0x70C5E1);
    for (double& v : scene_.voxels.values) v = voxel_init_std * vr.normal();
}

void SdfField::features_batch(std::span<const Vec3> points, MatrixXd& input,
                              std::vector<TrilinearWeights>& voxel,
                              std::array<MatrixXd, 3>* d_input,
                              std::array<MatrixXd, 3>* d2_input) const {
    const int dim = input_dim();
    const int nch = scene_.voxels.channels;
    const auto n = static_cast<Eigen::Index>(points.size());
    input.resize(dim, n);
    voxel.resize(points.size());
    if (d_input) {
        for (int k = 0; k < 3; ++k) {
            (*d_input)[k] = MatrixXd::Zero(dim, n);
            (*d2_input)[k] = MatrixXd::Zero(dim, n);
        }
    }
    const AnalyticSdf& prior_shape = *scene_.prior_shape;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec3& p = points[i];
        const PriorSample prior = sample_prior(prior_shape, p);
        const ProjectedSample proj = sample_projection(scene_, p, prior);
        auto col = input.col(i);
        col[0] = prior.sdf;
        col.segment<3>(1) = prior.normal;
        col.segment<3>(4) = proj.value;
        col.segment<3>(7) = p;
        const TrilinearWeights tw = trilinear_weights(scene_.voxels, p);
        voxel[i] = tw;
        col.tail(nch).setZero();
        for (int c = 0; c < 8; ++c) {
            const double* node = &scene_.voxels.values[tw.node[c] * nch];
            for (int ch = 0; ch < nch; ++ch) col[kFixedFeatureDim + ch] += tw.weight[c] * node[ch];
        }
        if (!d_input) continue;

        for (int k = 0; k < 3; ++k) {
            auto d1 = (*d_input)[k].col(i);
            auto d2 = (*d2_input)[k].col(i);
            const Vec3 step = kPriorDiffStep * Vec3::Unit(k);
            const PriorSample plus = sample_prior(prior_shape, p + step);
            const PriorSample minus = sample_prior(prior_shape, p - step);
            d1[0] = prior.grad[k];
            d2[0] = (plus.grad[k] - minus.grad[k]) / (2.0 * kPriorDiffStep);
            if (prior.valid && plus.valid && minus.valid) {
                d1.segment<3>(1) = (plus.normal - minus.normal) / (2.0 * kPriorDiffStep);
                d2.segment<3>(1) = (plus.normal + minus.normal - 2.0 * prior.normal) /
                                   (kPriorDiffStep * kPriorDiffStep);
            }
            // Bilinear lookup is linear along each axis inside a cell: no second term.
            d1.segment<3>(4) = proj.d_world[k];
            d1[7 + k] = 1.0;
            for (int c = 0; c < 8; ++c) {
                const double* node = &scene_.voxels.values[tw.node[c] * nch];
                for (int ch = 0; ch < nch; ++ch) {
                    d1[kFixedFeatureDim + ch] += tw.d_weight[c][k] * node[ch];
                }
            }
        }
    }
}

FieldTape SdfField::forward(std::span<const Vec3> points) const {
    FieldTape tape;
    features_batch(points, tape.input, tape.voxel, nullptr, nullptr);
    const std::size_t nh = hidden_.size();
    tape.pre.resize(nh);
    tape.post.resize(nh);
    const MatrixXd* x = &tape.input;
    for (std::size_t l = 0; l < nh; ++l) {
        tape.pre[l].noalias() = layers_[l].weight * *x;
        tape.pre[l].colwise() += layers_[l].bias;
        tape.post[l] = softplus(tape.pre[l]);
        x = &tape.post[l];
    }
    tape.output.noalias() = layers_.back().weight * *x;
    tape.output.array() += layers_.back().bias[0];
    evaluations_ += points.size();
    return tape;
}

void SdfField::eval(std::span<const Vec3> points, std::span<double> out) const {
    if (out.size() != points.size()) throw ShapeMismatch("eval output size mismatch");
    // Chunked so large lattices do not materialize every activation at once.
    constexpr std::size_t kChunk = 4096;
    for (std::size_t begin = 0; begin < points.size(); begin += kChunk) {
        const std::size_t len = std::min(kChunk, points.size() - begin);
        const FieldTape tape = forward(points.subspan(begin, len));
        for (std::size_t i = 0; i < len; ++i) out[begin + i] = tape.output[static_cast<Eigen::Index>(i)];
    }
}

void SdfField::scatter_voxel_grad(const std::vector<TrilinearWeights>& voxel,
                                  const MatrixXd& input_grad,
                                  const std::array<MatrixXd, 3>* d_input_grad,
                                  ParamGradient& grad) const {
    const int nch = scene_.voxels.channels;
    for (std::size_t i = 0; i < voxel.size(); ++i) {
        const TrilinearWeights& tw = voxel[i];
        const auto col = static_cast<Eigen::Index>(i);
        for (int c = 0; c < 8; ++c) {
            double* g = &grad.voxels[tw.node[c] * nch];
            for (int ch = 0; ch < nch; ++ch) {
                double v = tw.weight[c] * input_grad(kFixedFeatureDim + ch, col);
                if (d_input_grad) {
                    for (int k = 0; k < 3; ++k) {
                        v += tw.d_weight[c][k] * (*d_input_grad)[k](kFixedFeatureDim + ch, col);
                    }
                }
                g[ch] += v;
            }
        }
    }
}

void SdfField::backward(const FieldTape& tape, std::span<const double> upstream,
                        ParamGradient& grad) const {
    const auto n = tape.input.cols();
    if (static_cast<Eigen::Index>(upstream.size()) != n) {
        throw ShapeMismatch("upstream length does not match the tape");
    }
    MatrixXd delta = Eigen::Map<const Eigen::RowVectorXd>(upstream.data(), n);
    for (std::size_t l = layers_.size(); l-- > 0;) {
        const MatrixXd& in = l == 0 ? tape.input : tape.post[l - 1];
        grad.layers[l].weight.noalias() += delta * in.transpose();
        grad.layers[l].bias += delta.rowwise().sum();
        MatrixXd back = layers_[l].weight.transpose() * delta;
        if (l == 0) {
            scatter_voxel_grad(tape.voxel, back, nullptr, grad);
            break;
        }
        delta = (back.array() * sigmoid(tape.pre[l - 1])).matrix();
    }
}

JetTape SdfField::forward_jets(std::span<const Vec3> points) const {
    JetTape t;
    features_batch(points, t.base.input, t.base.voxel, &t.d_input, &t.d2_input);
    const std::size_t nh = hidden_.size();
    t.base.pre.resize(nh);
    t.base.post.resize(nh);
    for (int k = 0; k < 3; ++k) {
        t.d_pre[k].resize(nh);
        t.d_post[k].resize(nh);
        t.d2_pre[k].resize(nh);
        t.d2_post[k].resize(nh);
    }
    for (std::size_t l = 0; l < nh; ++l) {
        const MatrixXd& w = layers_[l].weight;
        const MatrixXd& x = l == 0 ? t.base.input : t.base.post[l - 1];
        t.base.pre[l].noalias() = w * x;
        t.base.pre[l].colwise() += layers_[l].bias;
        t.base.post[l] = softplus(t.base.pre[l]);
        const ArrayXXd s1 = sigmoid(t.base.pre[l]);
        const ArrayXXd s2 = s1 * (1.0 - s1);
        for (int k = 0; k < 3; ++k) {
            const MatrixXd& dx = l == 0 ? t.d_input[k] : t.d_post[k][l - 1];
            const MatrixXd& d2x = l == 0 ? t.d2_input[k] : t.d2_post[k][l - 1];
            t.d_pre[k][l].noalias() = w * dx;
            t.d2_pre[k][l].noalias() = w * d2x;
            const ArrayXXd da = t.d_pre[k][l].array();
            t.d_post[k][l] = (s1 * da).matrix();
            t.d2_post[k][l] = (s2 * da.square() + s1 * t.d2_pre[k][l].array()).matrix();
        }
    }
    const MatrixXd& w = layers_.back().weight;
    t.base.output.noalias() = w * t.base.post.back();
    t.base.output.array() += layers_.back().bias[0];
    for (int k = 0; k < 3; ++k) {
        t.d_output[k].noalias() = w * t.d_post[k].back();
        t.d2_output[k].noalias() = w * t.d2_post[k].back();
    }
    evaluations_ += points.size();
    return t;
}

bool SdfField::eval_jets(std::span<const Vec3> points, std::span<double> value,
                         std::span<Vec3> gradient, std::span<Vec3> second) const {
    const JetTape t = forward_jets(points);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        value[i] = t.base.output[c];
        for (int k = 0; k < 3; ++k) {
            gradient[i][k] = t.d_output[k][c];
            second[i][k] = t.d2_output[k][c];
        }
    }
    return true;
}

void SdfField::backward_jets(const JetTape& t, std::span<const double> up_value,
                             std::span<const Vec3> up_grad, std::span<const Vec3> up_second,
                             ParamGradient& grad) const {
    const auto n = t.base.input.cols();
    if (static_cast<Eigen::Index>(up_value.size()) != n ||
        static_cast<Eigen::Index>(up_grad.size()) != n ||
        static_cast<Eigen::Index>(up_second.size()) != n) {
        throw ShapeMismatch("jet upstream length does not match the tape");
    }
    MatrixXd delta = Eigen::Map<const Eigen::RowVectorXd>(up_value.data(), n);
    std::array<MatrixXd, 3> d_delta, d2_delta;
    for (int k = 0; k < 3; ++k) {
        d_delta[k].resize(1, n);
        d2_delta[k].resize(1, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            d_delta[k](0, i) = up_grad[i][k];
            d2_delta[k](0, i) = up_second[i][k];
        }
    }

    for (std::size_t l = layers_.size(); l-- > 0;) {
        const MatrixXd& w = layers_[l].weight;
        const MatrixXd& x = l == 0 ? t.base.input : t.base.post[l - 1];
        grad.layers[l].weight.noalias() += delta * x.transpose();
        grad.layers[l].bias += delta.rowwise().sum();
        for (int k = 0; k < 3; ++k) {
            const MatrixXd& dx = l == 0 ? t.d_input[k] : t.d_post[k][l - 1];
            const MatrixXd& d2x = l == 0 ? t.d2_input[k] : t.d2_post[k][l - 1];
            grad.layers[l].weight.noalias() += d_delta[k] * dx.transpose();
            grad.layers[l].weight.noalias() += d2_delta[k] * d2x.transpose();
        }

        MatrixXd h_bar = w.transpose() * delta;
        std::array<MatrixXd, 3> dh_bar, d2h_bar;
        for (int k = 0; k < 3; ++k) {
            dh_bar[k].noalias() = w.transpose() * d_delta[k];
            d2h_bar[k].noalias() = w.transpose() * d2_delta[k];
        }
        if (l == 0) {
            // Voxel features are trilinear: their axis second derivative is zero.
            scatter_voxel_grad(t.base.voxel, h_bar, &dh_bar, grad);
            break;
        }

        const MatrixXd& a = t.base.pre[l - 1];
        const ArrayXXd s1 = sigmoid(a);
        const ArrayXXd s2 = s1 * (1.0 - s1);
        const ArrayXXd s3 = s2 * (1.0 - 2.0 * s1);
        ArrayXXd a_bar = s1 * h_bar.array();
        for (int k = 0; k < 3; ++k) {
            const ArrayXXd da = t.d_pre[k][l - 1].array();
            const ArrayXXd d2a = t.d2_pre[k][l - 1].array();
            const ArrayXXd dhb = dh_bar[k].array();
            const ArrayXXd d2hb = d2h_bar[k].array();
            a_bar += s2 * da * dhb + s3 * da.square() * d2hb + s2 * d2a * d2hb;
            d_delta[k] = (s1 * dhb + 2.0 * s2 * da * d2hb).matrix();
            d2_delta[k] = (s1 * d2hb).matrix();
        }
        delta = a_bar.matrix();
    }
}

std::size_t SdfField::param_count() const {
    std::size_t n = scene_.voxels.values.size();
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

double& SdfField::param(std::size_t i) {
    for (auto& l : layers_) {
        if (i < static_cast<std::size_t>(l.weight.size())) return l.weight.data()[i];
        i -= l.weight.size();
        if (i < static_cast<std::size_t>(l.bias.size())) return l.bias[i];
        i -= l.bias.size();
    }
    return scene_.voxels.values.at(i);
}

double SdfField::param(std::size_t i) const {
    return const_cast<SdfField*>(this)->param(i);
}

void SdfField::apply(const std::vector<double>& flat_delta) {
    if (flat_delta.size() != param_count()) throw ShapeMismatch("parameter delta size mismatch");
    std::size_t o = 0;
    for (auto& l : layers_) {
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] += flat_delta[o++];
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] += flat_delta[o++];
    }
    for (double& v : scene_.voxels.values) v += flat_delta[o++];
}

double eval_field(const SdfField& field, const Vec3& p) {
    return field(p);
}

ParamGradient backprop_params(const SdfField& field, std::span<const Vec3> points,
                              std::span<const double> upstream) {
    if (points.size() != upstream.size()) {
        throw ShapeMismatch("backprop_params: points and upstream lengths differ");
    }
    ParamGradient grad = ParamGradient::zeros_like(field);
    if (points.empty()) return grad;
    const FieldTape tape = field.forward(points);
    field.backward(tape, upstream, grad);
    return grad;
}

}  // namespace sidefit
