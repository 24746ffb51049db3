#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sidefit {

using Vec3 = Eigen::Vector3d;

/// Base class for every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularPoint : public Error {
public:
    using Error::Error;
};

// Scene domain is the cube [-1,1]^3.
inline constexpr double kDomainMin = -1.0;
inline constexpr double kDomainMax = 1.0;

Vec3 clamp_to_domain(const Vec3& p);
bool in_domain(const Vec3& p, double slack = 0.0);

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

/// Counter-based generator: the value stream depends only on (seed, stream, counter),
/// so a batch can be split across workers without changing any draw.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

    /// Independent child stream; fork(i) is the same regardless of how many draws
    /// this generator has already produced.
    Rng fork(std::uint64_t stream) const;

    std::uint64_t next_u64();
    result_type operator()() { return next_u64(); }
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }

    double uniform();                        // [0,1)
    double uniform(double lo, double hi);
    double normal();                         // standard normal (Box-Muller, no caching)
    std::uint64_t below(std::uint64_t n);    // [0,n)

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Analytic signed distance functions
// ---------------------------------------------------------------------------

struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Vec3& p);
    void extend(const Aabb& b);
    bool empty() const { return (lo.array() > hi.array()).any(); }
    Vec3 center() const { return 0.5 * (lo + hi); }
    Vec3 extent() const { return hi - lo; }
    double diagonal() const { return extent().norm(); }
};

class AnalyticSdf;
using SdfPtr = std::shared_ptr<const AnalyticSdf>;

struct Sphere {
    Vec3 center;
    double radius;
};
struct Capsule {
    Vec3 a, b;
    double radius;
};
struct Box {
    Vec3 center;
    Vec3 half_extents;
};
/// Ring in the xz-plane around `center`.
struct Torus {
    Vec3 center;
    double major_r;
    double minor_r;
};
struct Union {
    std::vector<SdfPtr> children;
};
/// Exponential smooth-min: -log(sum exp(-k d_i)) / k.
struct SmoothUnion {
    std::vector<SdfPtr> children;
    double blend_k;
};
struct Translate {
    Vec3 offset;
    SdfPtr child;
};
struct Scale {
    double factor;
    SdfPtr child;
};

/// Immutable expression tree of analytic SDF nodes. Construct through the factory
/// functions below, which validate parameters.
class AnalyticSdf {
public:
    using Node = std::variant<Sphere, Capsule, Box, Torus, Union, SmoothUnion, Translate, Scale>;

    explicit AnalyticSdf(Node node);

    const Node& node() const { return node_; }

    /// Signed distance, negative inside. Exact for primitives, a lower bound for
    /// smooth unions.
    double eval(const Vec3& p) const;
    /// Value and analytic gradient.
    double eval_grad(const Vec3& p, Vec3& grad) const;
    Aabb bounds() const;

private:
    Node node_;
};

SdfPtr make_sphere(const Vec3& center, double radius);
SdfPtr make_capsule(const Vec3& a, const Vec3& b, double radius);
SdfPtr make_box(const Vec3& center, const Vec3& half_extents);
SdfPtr make_torus(const Vec3& center, double major_r, double minor_r);
SdfPtr make_union(std::vector<SdfPtr> children);
SdfPtr make_smooth_union(std::vector<SdfPtr> children, double blend_k);
SdfPtr make_translate(const Vec3& offset, SdfPtr child);
SdfPtr make_scale(double factor, SdfPtr child);

double eval_analytic(const AnalyticSdf& shape, const Vec3& p);

/// Normalized analytic gradient. Throws SingularPoint when |grad| < 1e-9.
Vec3 analytic_normal(const AnalyticSdf& shape, const Vec3& p);

/// Similarity transform (uniform scale then translation) mapping `box` into the
/// domain cube shrunk by `margin`, centered at the origin.
struct DomainFit {
    double scale = 1.0;
    Vec3 offset = Vec3::Zero();

    SdfPtr apply(SdfPtr shape) const;
};
DomainFit fit_to_domain(const Aabb& box, double margin = 0.1);

/// Smooth union of capsules shaped like a standing person (head, torso, arms, legs),
/// used as the default desk-scale target. `variant` perturbs limb proportions and
/// pose; variant 0 is the canonical figure.
SdfPtr capsule_person(int variant = 0, bool clothed = true);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

enum class SampleKind : std::uint8_t { near_surface, uniform };

struct SampleBatch {
    std::vector<Vec3> points;
    std::vector<double> gt_sdf;
    std::vector<SampleKind> provenance;

    std::size_t size() const { return points.size(); }
};

/// Project `start` onto the zero level set by iterated steps along the analytic normal.
Vec3 project_to_surface(const AnalyticSdf& shape, const Vec3& start, int max_iters = 32);

/// Draws n_near surface-perturbed points (std sigma) followed by n_uniform points in
/// the domain. Point i is generated from rng.fork(i) so any sub-range can be produced
/// independently.
SampleBatch sample_batch(const AnalyticSdf& target, const Rng& rng, std::size_t n_near,
                         std::size_t n_uniform, double sigma);

/// Generates points [begin, end) of the batch sample_batch would produce.
void sample_range(const AnalyticSdf& target, const Rng& rng, std::size_t n_near,
                  std::size_t n_uniform, double sigma, std::size_t begin, std::size_t end,
                  SampleBatch& out);

}  // namespace sidefit
