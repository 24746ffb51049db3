#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "sidefit/field.hpp"
#include "sidefit/m2o.hpp"
#include "sidefit/normal_map.hpp"
#include "sidefit/scalar_field.hpp"

namespace sidefit {

class EmptySurface : public Error {
public:
    using Error::Error;
};

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> normals;  // per vertex, unit length

    bool empty() const { return triangles.empty(); }
    double area() const;
    Aabb bounds() const;
    /// Drops zero-area triangles and unreferenced vertices, then recomputes normals.
    void cleanup();
    /// Area-weighted face normals accumulated at vertices.
    void compute_normals();
};

// ---------------------------------------------------------------------------
// Ray marching
// ---------------------------------------------------------------------------

struct RaymarchOptions {
    double step_scale = 0.8;
    double min_step = 1e-3;
    double max_step = 0.05;
    double hit_tolerance = 1e-4;
    int max_steps = 256;
};

/// A ray-marched normal map plus the per-pixel hit points needed for backprop.
struct RaymarchResult {
    ViewAngle view;
    NormalMap map;
    std::vector<std::size_t> hit_pixels;  // pixel index of each hit
    std::vector<Vec3> hits;               // world-space hit points
    std::vector<Vec3> gradients;          // unnormalized field gradient at each hit
};

/// Orthographic rays through pixel centres along -toward_camera, starting on the
/// domain face nearest the camera. Normals are normalized batch_gradients at the hits,
/// rotated into view space. Rays that start inside, leave the domain, or exhaust the
/// step budget are misses.
RaymarchResult raymarch(const ScalarField& field, ViewAngle view, int width, int height,
                        const StencilConfig& cfg, const RaymarchOptions& opts = {});

NormalMap raymarch_normal_map(const ScalarField& field, ViewAngle view, int width, int height,
                              const StencilConfig& cfg);

/// View-space normals of `field` at fixed hit points (the map's foreground values as a
/// function of the parameters with hits detached).
std::vector<Vec3> normals_at(const SdfField& field, std::span<const Vec3> hits, ViewAngle view,
                             const StencilConfig& cfg);

/// Accumulates the parameter gradient of sum_pixels upstream . normal into `grad`,
/// with hit points held fixed. `upstream` has one view-space vector per pixel.
void raymarch_backprop(const SdfField& field, const RaymarchResult& render,
                       std::span<const Vec3> upstream, const StencilConfig& cfg,
                       ParamGradient& grad);
ParamGradient raymarch_backprop(const SdfField& field, const RaymarchResult& render,
                                std::span<const Vec3> upstream, const StencilConfig& cfg);

// ---------------------------------------------------------------------------
// Mesh path
// ---------------------------------------------------------------------------

/// Zero isosurface on a resolution^3 cell lattice over the domain. Vertices on shared
/// edges are shared, so closed surfaces come out watertight. Throws EmptySurface when
/// the field never changes sign.
TriangleMesh marching_cubes(const ScalarField& field, int resolution);

/// Orthographic depth-buffered rasterization with interpolated vertex normals.
NormalMap rasterize_normal_map(const TriangleMesh& mesh, ViewAngle view, int width, int height);

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);

}  // namespace sidefit
