#include "sidefit/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sidefit {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};

void require(bool ok, const char* what) {
    if (!ok) throw Error(what);
}

}  // namespace

Vec3 clamp_to_domain(const Vec3& p) {
    return p.cwiseMax(Vec3::Constant(kDomainMin)).cwiseMin(Vec3::Constant(kDomainMax));
}

bool in_domain(const Vec3& p, double slack) {
    return (p.array() >= kDomainMin - slack).all() && (p.array() <= kDomainMax + slack).all();
}

// ---------------------------------------------------------------------------

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream * kGolden + 1))) {}

Rng Rng::fork(std::uint64_t stream) const {
    return Rng(seed_, splitmix64(stream_ ^ (stream * 0xD1B54A32D192ED03ULL + 7)));
}

std::uint64_t Rng::next_u64() {
    return splitmix64(key_ + (++counter_) * kGolden);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

// ---------------------------------------------------------------------------

void Aabb::extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
}

void Aabb::extend(const Aabb& b) {
    if (b.empty()) return;
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
}

AnalyticSdf::AnalyticSdf(Node node) : node_(std::move(node)) {}

double AnalyticSdf::eval(const Vec3& p) const {
    return std::visit(
        Overloaded{
            [&](const Sphere& s) { return (p - s.center).norm() - s.radius; },
            [&](const Capsule& c) {
                const Vec3 ab = c.b - c.a;
                const double len2 = ab.squaredNorm();
                const double t = len2 > 0.0 ? std::clamp((p - c.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
                return (p - (c.a + t * ab)).norm() - c.radius;
            },
            [&](const Box& b) {
                const Vec3 q = (p - b.center).cwiseAbs() - b.half_extents;
                return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
            },
            [&](const Torus& t) {
                const Vec3 d = p - t.center;
                const double rho = std::hypot(d.x(), d.z());
                return std::hypot(rho - t.major_r, d.y()) - t.minor_r;
            },
            [&](const Union& u) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& c : u.children) best = std::min(best, c->eval(p));
                return best;
            },
            [&](const SmoothUnion& u) {
                // Streaming log-sum-exp; acc holds sum exp(-k (d_i - m)).
                double m = std::numeric_limits<double>::infinity();
                double acc = 0.0;
                for (const auto& c : u.children) {
                    const double v = c->eval(p);
                    if (v >= m) {
                        acc += std::exp(-u.blend_k * (v - m));
                    } else {
                        acc = acc * std::exp(-u.blend_k * (m - v)) + 1.0;
                        m = v;
                    }
                }
                return m - std::log(acc) / u.blend_k;
            },
            [&](const Translate& t) { return t.child->eval(p - t.offset); },
            [&](const Scale& s) { return s.factor * s.child->eval(p / s.factor); },
        },
        node_);
}

double AnalyticSdf::eval_grad(const Vec3& p, Vec3& grad) const {
    return std::visit(
        Overloaded{
            [&](const Sphere& s) {
                const Vec3 d = p - s.center;
                const double n = d.norm();
                grad = n > 0.0 ? Vec3(d / n) : Vec3::Zero();
                return n - s.radius;
            },
            [&](const Capsule& c) {
                const Vec3 ab = c.b - c.a;
                const double len2 = ab.squaredNorm();
                const double t = len2 > 0.0 ? std::clamp((p - c.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
                const Vec3 d = p - (c.a + t * ab);
                const double n = d.norm();
                grad = n > 0.0 ? Vec3(d / n) : Vec3::Zero();
                return n - c.radius;
            },
            [&](const Box& b) {
                const Vec3 rel = p - b.center;
                const Vec3 q = rel.cwiseAbs() - b.half_extents;
                const Vec3 sgn = rel.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
                const Vec3 outside = q.cwiseMax(0.0);
                const double on = outside.norm();
                if (on > 0.0) {
                    grad = outside.cwiseProduct(sgn) / on;
                    return on;
                }
                Eigen::Index k = 0;
                const double qmax = q.maxCoeff(&k);
                grad = Vec3::Zero();
                grad[k] = sgn[k];
                return qmax;
            },
            [&](const Torus& t) {
                const Vec3 d = p - t.center;
                const double rho = std::hypot(d.x(), d.z());
                const double qx = rho - t.major_r;
                const double qn = std::hypot(qx, d.y());
                if (qn > 0.0 && rho > 0.0) {
                    grad = Vec3(qx / qn * d.x() / rho, d.y() / qn, qx / qn * d.z() / rho);
                } else {
                    grad = Vec3::Zero();
                }
                return qn - t.minor_r;
            },
            [&](const Union& u) {
                double best = std::numeric_limits<double>::infinity();
                Vec3 g;
                grad = Vec3::Zero();
                for (const auto& c : u.children) {
                    const double v = c->eval_grad(p, g);
                    if (v < best) {
                        best = v;
                        grad = g;
                    }
                }
                return best;
            },
            [&](const SmoothUnion& u) {
                double m = std::numeric_limits<double>::infinity();
                double acc = 0.0;
                Vec3 g;
                grad = Vec3::Zero();
                for (const auto& c : u.children) {
                    const double v = c->eval_grad(p, g);
                    if (v >= m) {
                        const double w = std::exp(-u.blend_k * (v - m));
                        acc += w;
                        grad += w * g;
                    } else {
                        const double shrink = std::exp(-u.blend_k * (m - v));
                        acc = acc * shrink + 1.0;
                        grad = grad * shrink + g;
                        m = v;
                    }
                }
                grad /= acc;
                return m - std::log(acc) / u.blend_k;
            },
            [&](const Translate& t) { return t.child->eval_grad(p - t.offset, grad); },
            [&](const Scale& s) { return s.factor * s.child->eval_grad(p / s.factor, grad); },
        },
        node_);
}

Aabb AnalyticSdf::bounds() const {
    return std::visit(
        Overloaded{
            [](const Sphere& s) {
                Aabb b;
                b.extend(Vec3(s.center.array() - s.radius));
                b.extend(Vec3(s.center.array() + s.radius));
                return b;
            },
            [](const Capsule& c) {
                Aabb b;
                b.extend(Vec3(c.a.array() - c.radius));
                b.extend(Vec3(c.a.array() + c.radius));
                b.extend(Vec3(c.b.array() - c.radius));
                b.extend(Vec3(c.b.array() + c.radius));
                return b;
            },
            [](const Box& x) {
                Aabb b;
                b.extend(Vec3(x.center - x.half_extents));
                b.extend(Vec3(x.center + x.half_extents));
                return b;
            },
            [](const Torus& t) {
                const Vec3 h(t.major_r + t.minor_r, t.minor_r, t.major_r + t.minor_r);
                Aabb b;
                b.extend(Vec3(t.center - h));
                b.extend(Vec3(t.center + h));
                return b;
            },
            [](const Union& u) {
                Aabb b;
                for (const auto& c : u.children) b.extend(c->bounds());
                return b;
            },
            [](const SmoothUnion& u) {
                // The blend can push the surface out by at most log(n)/k.
                Aabb b;
                for (const auto& c : u.children) b.extend(c->bounds());
                const double pad = std::log(static_cast<double>(u.children.size())) / u.blend_k;
                b.lo.array() -= pad;
                b.hi.array() += pad;
                return b;
            },
            [](const Translate& t) {
                Aabb b = t.child->bounds();
                b.lo += t.offset;
                b.hi += t.offset;
                return b;
            },
            [](const Scale& s) {
                Aabb b = s.child->bounds();
                b.lo *= s.factor;
                b.hi *= s.factor;
                return b;
            },
        },
        node_);
}

SdfPtr make_sphere(const Vec3& center, double radius) {
    require(radius > 0.0, "sphere radius must be positive");
    return std::make_shared<AnalyticSdf>(Sphere{center, radius});
}

SdfPtr make_capsule(const Vec3& a, const Vec3& b, double radius) {
    require(radius > 0.0, "capsule radius must be positive");
    return std::make_shared<AnalyticSdf>(Capsule{a, b, radius});
}

SdfPtr make_box(const Vec3& center, const Vec3& half_extents) {
    require((half_extents.array() > 0.0).all(), "box half extents must be positive");
    return std::make_shared<AnalyticSdf>(Box{center, half_extents});
}

SdfPtr make_torus(const Vec3& center, double major_r, double minor_r) {
    require(major_r > 0.0 && minor_r > 0.0, "torus radii must be positive");
    return std::make_shared<AnalyticSdf>(Torus{center, major_r, minor_r});
}

SdfPtr make_union(std::vector<SdfPtr> children) {
    require(!children.empty(), "union needs at least one child");
    return std::make_shared<AnalyticSdf>(Union{std::move(children)});
}

SdfPtr make_smooth_union(std::vector<SdfPtr> children, double blend_k) {
    require(!children.empty(), "smooth union needs at least one child");
    require(blend_k > 0.0, "blend_k must be positive");
    return std::make_shared<AnalyticSdf>(SmoothUnion{std::move(children), blend_k});
}

SdfPtr make_translate(const Vec3& offset, SdfPtr child) {
    return std::make_shared<AnalyticSdf>(Translate{offset, std::move(child)});
}

SdfPtr make_scale(double factor, SdfPtr child) {
    require(factor > 0.0, "scale factor must be positive");
    return std::make_shared<AnalyticSdf>(Scale{factor, std::move(child)});
}

double eval_analytic(const AnalyticSdf& shape, const Vec3& p) {
    return shape.eval(p);
}

Vec3 analytic_normal(const AnalyticSdf& shape, const Vec3& p) {
    Vec3 g;
    shape.eval_grad(p, g);
    const double n = g.norm();
    if (!(n >= 1e-9)) throw SingularPoint("analytic gradient vanishes");
    return g / n;
}

SdfPtr DomainFit::apply(SdfPtr shape) const {
    return make_translate(offset, make_scale(scale, std::move(shape)));
}

DomainFit fit_to_domain(const Aabb& box, double margin) {
    require(!box.empty(), "cannot fit an empty bounding box");
    const double half = 0.5 * box.extent().maxCoeff();
    DomainFit fit;
    fit.scale = (kDomainMax - margin) / half;
    fit.offset = -fit.scale * box.center();
    return fit;
}

SdfPtr capsule_person(int variant, bool clothed) {
    Rng rng(0xC0FFEEULL, static_cast<std::uint64_t>(variant));
    auto jitter = [&](double amount) { return variant == 0 ? 0.0 : rng.uniform(-amount, amount); };

    const double shoulder_y = 1.38 + jitter(0.04);
    const double hip_y = 0.95 + jitter(0.04);
    const double arm_spread = 0.10 + jitter(0.06);
    const double leg_spread = 0.02 + jitter(0.04);
    const double arm_fwd = 0.04 + jitter(0.06);
    const double torso_r = 0.13 + jitter(0.02);
    const double limb_scale = 1.0 + jitter(0.12);
    const double cloth = clothed ? 1.0 : 0.0;

    std::vector<SdfPtr> parts;
    parts.push_back(make_sphere({0.0, 1.60 + jitter(0.03), 0.01}, 0.11));
    parts.push_back(make_capsule({0.0, shoulder_y + 0.06, 0.0}, {0.0, 1.52, 0.0}, 0.05));
    // Torso and hips.
    parts.push_back(make_capsule({-0.08, hip_y + 0.07, 0.0}, {-0.08, shoulder_y - 0.04, 0.0},
                                 torso_r + 0.02 * cloth));
    parts.push_back(make_capsule({0.08, hip_y + 0.07, 0.0}, {0.08, shoulder_y - 0.04, 0.0},
                                 torso_r + 0.02 * cloth));
    parts.push_back(make_capsule({-0.1, hip_y, 0.0}, {0.1, hip_y, 0.0}, 0.12 + 0.015 * cloth));
    for (double side : {-1.0, 1.0}) {
        const Vec3 shoulder(side * 0.22, shoulder_y, 0.0);
        const Vec3 elbow(side * (0.26 + arm_spread), shoulder_y - 0.28 * limb_scale, arm_fwd * 0.5);
        const Vec3 wrist(side * (0.28 + 1.6 * arm_spread), shoulder_y - 0.53 * limb_scale, arm_fwd);
        parts.push_back(make_capsule(shoulder, elbow, 0.05 + 0.02 * cloth));
        parts.push_back(make_capsule(elbow, wrist, 0.04 + 0.01 * cloth));

        const Vec3 hip(side * 0.1, hip_y - 0.03, 0.0);
        const Vec3 knee(side * (0.11 + leg_spread), hip_y - 0.45 * limb_scale, 0.02);
        const Vec3 ankle(side * (0.12 + 1.5 * leg_spread), 0.1, 0.0);
        parts.push_back(make_capsule(hip, knee, 0.075 + 0.02 * cloth));
        parts.push_back(make_capsule(knee, ankle, 0.055 + 0.015 * cloth));
        parts.push_back(make_capsule(ankle, Vec3(ankle.x(), 0.05, 0.15), 0.045));
    }
    if (clothed) {
        // Waistband and a loose hem give the blended creases a cloth-like look.
        parts.push_back(make_torus({0.0, hip_y + 0.04, 0.0}, 0.17, 0.045));
        parts.push_back(make_torus({0.0, shoulder_y - 0.25, 0.0}, 0.16, 0.04));
        return make_smooth_union(std::move(parts), 30.0);
    }
    return make_union(std::move(parts));
}

// ---------------------------------------------------------------------------

Vec3 project_to_surface(const AnalyticSdf& shape, const Vec3& start, int max_iters) {
    Vec3 q = start;
    Vec3 g;
    for (int it = 0; it < max_iters; ++it) {
        const double d = shape.eval_grad(q, g);
        if (std::abs(d) < 1e-9) break;
        const double g2 = g.squaredNorm();
        if (g2 < 1e-18) {
            q += Vec3(1e-6, 2e-6, -1.5e-6);
            continue;
        }
        q -= d * g / g2;
    }
    return q;
}

void sample_range(const AnalyticSdf& target, const Rng& rng, std::size_t n_near,
                  std::size_t n_uniform, double sigma, std::size_t begin, std::size_t end,
                  SampleBatch& out) {
    require(n_near + n_uniform > 0, "sample_batch needs at least one point");
    require(sigma > 0.0, "sigma must be positive");
    end = std::min(end, n_near + n_uniform);
    for (std::size_t i = begin; i < end; ++i) {
        Rng r = rng.fork(i);
        Vec3 p(r.uniform(-1.0, 1.0), r.uniform(-1.0, 1.0), r.uniform(-1.0, 1.0));
        SampleKind kind = SampleKind::uniform;
        if (i < n_near) {
            kind = SampleKind::near_surface;
            p = project_to_surface(target, p);
            p += sigma * Vec3(r.normal(), r.normal(), r.normal());
            p = clamp_to_domain(p);
        }
        out.points.push_back(p);
        out.gt_sdf.push_back(target.eval(p));
        out.provenance.push_back(kind);
    }
}

SampleBatch sample_batch(const AnalyticSdf& target, const Rng& rng, std::size_t n_near,
                         std::size_t n_uniform, double sigma) {
    SampleBatch batch;
    const std::size_t n = n_near + n_uniform;
    batch.points.reserve(n);
    batch.gt_sdf.reserve(n);
    batch.provenance.reserve(n);
    sample_range(target, rng, n_near, n_uniform, sigma, 0, n, batch);
    return batch;
}

}  // namespace sidefit
