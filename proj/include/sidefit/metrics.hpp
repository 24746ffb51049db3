#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sidefit/render.hpp"

namespace sidefit {

class EmptyMesh : public Error {
public:
    using Error::Error;
};

/// Closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding-volume hierarchy over a mesh's triangles for nearest-surface queries.
/// Queries return exactly the same distance as a linear scan.
class TriangleBvh {
public:
    explicit TriangleBvh(const TriangleMesh& mesh);

    double distance(const Vec3& p) const;
    double squared_distance(const Vec3& p) const;

private:
    struct Node {
        Aabb box;
        int left = -1;   // child node, or -1 for a leaf
        int right = -1;
        int begin = 0;   // leaf triangle range in order_
        int end = 0;
    };
    int build(int begin, int end);
    double triangle_sq(int tri, const Vec3& p) const;

    const TriangleMesh& mesh_;
    std::vector<int> order_;
    std::vector<Aabb> tri_box_;
    std::vector<Vec3> centroid_;
    std::vector<Node> nodes_;
};

/// Mean exact point-to-triangle distance from `points` to the mesh.
double point_to_surface(std::span<const Vec3> points, const TriangleMesh& mesh);
/// Linear-scan reference for point_to_surface.
double point_to_surface_brute(std::span<const Vec3> points, const TriangleMesh& mesh);

/// Area-uniform surface samples.
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t n, const Rng& rng);

/// 0.5 (mean d(a_i, B) + mean d(b_j, A)) over the given samples.
double chamfer_from_samples(const TriangleMesh& a, std::span<const Vec3> samples_a,
                            const TriangleMesh& b, std::span<const Vec3> samples_b);
/// Samples A with rng.fork(0) and B with rng.fork(1). n_samples >= 1000.
double chamfer(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples, const Rng& rng);

enum class MaskConvention {
    union_mask,         // a pixel covered by one side only contributes that side's |n|
    intersection_mask,  // only pixels covered by both
};

/// Mean per-pixel |n_a - n_b| over the chosen mask; 0 when the mask is empty.
double map_normal_error(const NormalMap& a, const NormalMap& b, MaskConvention convention);

struct ViewNormalError {
    int yaw = 0;
    double union_error = 0.0;
    double intersection_error = 0.0;
};

struct NormalErrorResult {
    double mean = 0.0;               // union convention, averaged over views
    double mean_intersection = 0.0;
    std::vector<ViewNormalError> per_view;
};

NormalErrorResult normal_error(const TriangleMesh& a, const TriangleMesh& b,
                               const std::vector<ViewAngle>& views, int width, int height);

struct MetricReport {
    double chamfer = 0.0;
    double p2s = 0.0;               // reconstruction samples to the ground-truth surface
    double normal_error = 0.0;      // union convention, 4 views
    double normal_error_side = 0.0; // union convention, 90 and 270
    double normal_error_intersection = 0.0;
    double normal_error_side_intersection = 0.0;
    std::vector<ViewNormalError> per_view;

    static std::string csv_header();
    std::string csv_row() const;
    std::string to_text() const;
};

struct MetricOptions {
    std::size_t n_samples = 20000;
    int image_size = 512;
    std::vector<ViewAngle> views = all_views();
};

/// Metrics of `reconstruction` against `truth`. Throws EmptyMesh if either is empty.
MetricReport evaluate_meshes(const TriangleMesh& reconstruction, const TriangleMesh& truth,
                             const MetricOptions& opts, const Rng& rng);

/// Marching-cubes resolution used for analytic ground-truth meshes.
inline constexpr int kGroundTruthResolution = 128;

TriangleMesh ground_truth_mesh(const SdfPtr& target, int resolution = kGroundTruthResolution);

}  // namespace sidefit
