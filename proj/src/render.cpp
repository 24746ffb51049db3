#include "sidefit/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

namespace sidefit {

// ---------------------------------------------------------------------------
// TriangleMesh
// ---------------------------------------------------------------------------

namespace {

Vec3 face_cross(const TriangleMesh& m, const std::array<int, 3>& t) {
    const Vec3& a = m.vertices[static_cast<std::size_t>(t[0])];
    const Vec3& b = m.vertices[static_cast<std::size_t>(t[1])];
    const Vec3& c = m.vertices[static_cast<std::size_t>(t[2])];
    return (b - a).cross(c - a);
}

}  // namespace

double TriangleMesh::area() const {
    double a = 0.0;
    for (const auto& t : triangles) a += 0.5 * face_cross(*this, t).norm();
    return a;
}

Aabb TriangleMesh::bounds() const {
    Aabb b;
    for (const Vec3& v : vertices) b.extend(v);
    return b;
}

void TriangleMesh::compute_normals() {
    normals.assign(vertices.size(), Vec3::Zero());
    for (const auto& t : triangles) {
        const Vec3 n = face_cross(*this, t);  // length = 2 * area
        for (int k : t) normals[static_cast<std::size_t>(k)] += n;
    }
    for (Vec3& n : normals) {
        const double len = n.norm();
        n = len > 0.0 ? Vec3(n / len) : Vec3::UnitZ();
    }
}

void TriangleMesh::cleanup() {
    std::vector<std::array<int, 3>> kept;
    kept.reserve(triangles.size());
    for (const auto& t : triangles) {
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
        if (!(face_cross(*this, t).squaredNorm() > 0.0)) continue;
        kept.push_back(t);
    }
    std::vector<int> remap(vertices.size(), -1);
    std::vector<Vec3> verts;
    for (auto& t : kept) {
        for (int& k : t) {
            int& r = remap[static_cast<std::size_t>(k)];
            if (r < 0) {
                r = static_cast<int>(verts.size());
                verts.push_back(vertices[static_cast<std::size_t>(k)]);
            }
            k = r;
        }
    }
    vertices = std::move(verts);
    triangles = std::move(kept);
    compute_normals();
}

// ---------------------------------------------------------------------------
// Ray marching
// ---------------------------------------------------------------------------

namespace {

enum class RayStage : std::uint8_t { march, refine, done };

struct RayState {
    double t = 0.0;
    double t_prev = 0.0, phi_prev = 0.0;
    // Regula falsi bracket: phi(ta) > 0 > phi(tb).
    double ta = 0.0, fa = 0.0, tb = 0.0, fb = 0.0;
    int last_side = 0;
    int steps = 0;
    RayStage stage = RayStage::march;
    bool hit = false;
};

constexpr double kRayLength = kDomainMax - kDomainMin;

}  // namespace

RaymarchResult raymarch(const ScalarField& field, ViewAngle view, int width, int height,
                        const StencilConfig& cfg, const RaymarchOptions& opts) {
    if (width <= 0 || height <= 0) throw Error("render size must be positive");
    cfg.validate();
    RaymarchResult out;
    out.view = view;
    out.map = NormalMap(width, height);

    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    const Vec3 dir = -view.toward_camera();
    std::vector<Vec3> origin(n);
    for (int j = 0; j < height; ++j) {
        for (int i = 0; i < width; ++i) {
            origin[out.map.index(i, j)] = out.map.pixel_u(i) * view.right() +
                                          out.map.pixel_v(j) * view.up() +
                                          kDomainMax * view.toward_camera();
        }
    }

    std::vector<RayState> rays(n);
    std::vector<std::size_t> active(n);
    for (std::size_t r = 0; r < n; ++r) active[r] = r;
    std::vector<Vec3> pts;
    std::vector<double> vals;

    while (!active.empty()) {
        pts.resize(active.size());
        vals.resize(active.size());
        for (std::size_t a = 0; a < active.size(); ++a) {
            pts[a] = origin[active[a]] + rays[active[a]].t * dir;
        }
        field.eval(pts, vals);

        std::size_t keep = 0;
        for (std::size_t a = 0; a < active.size(); ++a) {
            RayState& s = rays[active[a]];
            const double phi = vals[a];
            ++s.steps;
            if (!std::isfinite(phi)) {
                s.stage = RayStage::done;
            } else if (std::abs(phi) < opts.hit_tolerance && !(s.steps == 1 && phi < 0.0)) {
                s.stage = RayStage::done;
                s.hit = true;
            } else if (s.stage == RayStage::march) {
                if (phi < 0.0) {
                    if (s.steps == 1) {
                        s.stage = RayStage::done;  // starts inside the surface
                    } else {
                        s.ta = s.t_prev, s.fa = s.phi_prev;
                        s.tb = s.t, s.fb = phi;
                        s.stage = RayStage::refine;
                    }
                } else if (s.t >= kRayLength) {
                    s.stage = RayStage::done;
                } else {
                    s.t_prev = s.t, s.phi_prev = phi;
                    s.t = std::min(s.t + std::clamp(opts.step_scale * phi, opts.min_step, opts.max_step), kRayLength);
                }
            } else {
                // Illinois variant: halve the stale endpoint's value when one side repeats.
                if (phi > 0.0) {
                    s.ta = s.t, s.fa = phi;
                    if (s.last_side == 1) s.fb *= 0.5;
                    s.last_side = 1;
                } else {
                    s.tb = s.t, s.fb = phi;
                    if (s.last_side == -1) s.fa *= 0.5;
                    s.last_side = -1;
                }
            }
            if (s.stage == RayStage::refine) s.t = s.ta + s.fa * (s.tb - s.ta) / (s.fa - s.fb);
            if (s.stage != RayStage::done && s.steps >= opts.max_steps) s.stage = RayStage::done;
            if (s.stage != RayStage::done) active[keep++] = active[a];
        }
        active.resize(keep);
    }

    std::vector<std::size_t> hit_pixels;
    std::vector<Vec3> hits;
    for (std::size_t r = 0; r < n; ++r) {
        if (!rays[r].hit) continue;
        hit_pixels.push_back(r);
        hits.push_back(origin[r] + rays[r].t * dir);
    }
    std::vector<Vec3> grads(hits.size());
    if (!hits.empty()) batch_gradients(field, hits, cfg, grads);

    for (std::size_t h = 0; h < hits.size(); ++h) {
        const double len = grads[h].norm();
        if (!(len > 1e-12) || !std::isfinite(len)) continue;
        const std::size_t r = hit_pixels[h];
        out.map.set(static_cast<int>(r % width), static_cast<int>(r / width), view.world_to_view(grads[h] / len));
        out.hit_pixels.push_back(r);
        out.hits.push_back(hits[h]);
        out.gradients.push_back(grads[h]);
    }
    return out;
}

NormalMap raymarch_normal_map(const ScalarField& field, ViewAngle view, int width, int height,
                              const StencilConfig& cfg) {
    return raymarch(field, view, width, height, cfg).map;
}

std::vector<Vec3> normals_at(const SdfField& field, std::span<const Vec3> hits, ViewAngle view,
                             const StencilConfig& cfg) {
    const DerivativeProbe probe(field, hits, cfg, false);
    std::vector<Vec3> out(hits.size());
    for (std::size_t h = 0; h < hits.size(); ++h) {
        out[h] = view.world_to_view(probe.gradients()[h].normalized());
    }
    return out;
}

void raymarch_backprop(const SdfField& field, const RaymarchResult& render,
                       std::span<const Vec3> upstream, const StencilConfig& cfg,
                       ParamGradient& grad) {
    const std::size_t n = static_cast<std::size_t>(render.map.width) * static_cast<std::size_t>(render.map.height);
    if (upstream.size() != n) throw ShapeMismatch("upstream must have one vector per pixel");

    std::vector<Vec3> pts;
    std::vector<Vec3> up_world;
    for (std::size_t h = 0; h < render.hits.size(); ++h) {
        const Vec3& u = upstream[render.hit_pixels[h]];
        if (u.isZero(0.0)) continue;
        pts.push_back(render.hits[h]);
        up_world.push_back(render.view.view_to_world(u));
    }
    if (pts.empty()) return;

    // The probe recomputes gradients at the frozen hits; n = g/|g| and
    // dn/dg = (I - n n^T) / |g|.
    const DerivativeProbe probe(field, pts, cfg, false);
    std::vector<Vec3> up_grad(pts.size(), Vec3::Zero());
    for (std::size_t h = 0; h < pts.size(); ++h) {
        const Vec3& g = probe.gradients()[h];
        const double len = g.norm();
        if (!(len > 1e-12)) continue;
        const Vec3 nrm = g / len;
        up_grad[h] = (up_world[h] - nrm * nrm.dot(up_world[h])) / len;
    }
    probe.backward({}, up_grad, {}, grad);
}

ParamGradient raymarch_backprop(const SdfField& field, const RaymarchResult& render,
                                std::span<const Vec3> upstream, const StencilConfig& cfg) {
    ParamGradient grad = ParamGradient::zeros_like(field);
    raymarch_backprop(field, render, upstream, cfg, grad);
    return grad;
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

namespace {

#include "mc_tables.inc"

constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const ScalarField& field, int resolution) {
    if (resolution < 16) throw Error("marching cubes resolution must be at least 16");
    const int m = resolution + 1;
    const std::size_t mm = static_cast<std::size_t>(m);
    auto node = [mm](int x, int y, int z) {
        return (static_cast<std::size_t>(z) * mm + static_cast<std::size_t>(y)) * mm + static_cast<std::size_t>(x);
    };
    auto coord = [resolution](int i) { return kDomainMin + (kDomainMax - kDomainMin) * i / resolution; };

    std::vector<Vec3> lattice(mm * mm * mm);
    for (int z = 0; z < m; ++z)
        for (int y = 0; y < m; ++y)
            for (int x = 0; x < m; ++x) lattice[node(x, y, z)] = Vec3(coord(x), coord(y), coord(z));
    std::vector<double> phi(lattice.size());
    field.eval(lattice, phi);

    TriangleMesh mesh;
    // Vertex keys: 3 * node + axis for edge crossings, 3 * node_count + node for
    // crossings that land exactly on a lattice node.
    std::unordered_map<std::size_t, int> vertex_of;
    auto edge_vertex = [&](std::size_t a, std::size_t b, int axis) {
        const double fa = phi[a], fb = phi[b];
        std::size_t key;
        Vec3 pos;
        if (fa == 0.0 || fb == 0.0) {
            const std::size_t at = fa == 0.0 ? a : b;
            key = 3 * lattice.size() + at;
            pos = lattice[at];
        } else {
            key = 3 * std::min(a, b) + static_cast<std::size_t>(axis);
            const double t = fa / (fa - fb);
            pos = lattice[a] + t * (lattice[b] - lattice[a]);
        }
        auto [it, inserted] = vertex_of.try_emplace(key, static_cast<int>(mesh.vertices.size()));
        if (inserted) mesh.vertices.push_back(pos);
        return it->second;
    };

    bool sign_change = false;
    for (int z = 0; z < resolution; ++z) {
        for (int y = 0; y < resolution; ++y) {
            for (int x = 0; x < resolution; ++x) {
                std::size_t corner[8];
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    corner[c] = node(x + kCorner[c][0], y + kCorner[c][1], z + kCorner[c][2]);
                    if (phi[corner[c]] < 0.0) cube |= 1 << c;
                }
                if (kEdgeTable[cube] == 0) continue;
                sign_change = true;
                int vert[12];
                for (int e = 0; e < 12; ++e) {
                    if (!(kEdgeTable[cube] & (1 << e))) continue;
                    const int c0 = kEdgeCorners[e][0], c1 = kEdgeCorners[e][1];
                    int axis = 0;
                    while (kCorner[c0][axis] == kCorner[c1][axis]) ++axis;
                    vert[e] = edge_vertex(corner[c0], corner[c1], axis);
                }
                for (int k = 0; kTriTable[cube][k] != -1; k += 3) {
                    // The table winds triangles clockwise seen from outside; swap to get
                    // normals pointing toward increasing phi.
                    mesh.triangles.push_back({vert[kTriTable[cube][k]], vert[kTriTable[cube][k + 2]],
                                              vert[kTriTable[cube][k + 1]]});
                }
            }
        }
    }
    if (!sign_change) throw EmptySurface("field has no zero crossing on the lattice");
    mesh.cleanup();
    if (mesh.empty()) throw EmptySurface("isosurface degenerated to zero area");
    return mesh;
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

NormalMap rasterize_normal_map(const TriangleMesh& mesh, ViewAngle view, int width, int height) {
    if (width <= 0 || height <= 0) throw Error("render size must be positive");
    NormalMap map(width, height);
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    std::vector<double> depth(n, -std::numeric_limits<double>::infinity());
    std::vector<int> owner(n, -1);
    std::vector<Vec3> bary(n);

    std::vector<Vec3> sv(mesh.vertices.size());  // (pixel x, pixel y, view depth)
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        const Vec3 q = view.world_to_view(mesh.vertices[v]);
        sv[v] = Vec3((q.x() + 1.0) * 0.5 * width - 0.5, (1.0 - q.y()) * 0.5 * height - 0.5, q.z());
    }

    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        const auto& tri = mesh.triangles[t];
        const Vec3& a = sv[static_cast<std::size_t>(tri[0])];
        const Vec3& b = sv[static_cast<std::size_t>(tri[1])];
        const Vec3& c = sv[static_cast<std::size_t>(tri[2])];
        const double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
        if (area == 0.0) continue;  // edge-on
        const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
        const int x1 = std::min(width - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
        const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
        const int y1 = std::min(height - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
        for (int j = y0; j <= y1; ++j) {
            for (int i = x0; i <= x1; ++i) {
                const double wa = ((b.x() - i) * (c.y() - j) - (b.y() - j) * (c.x() - i)) / area;
                const double wb = ((c.x() - i) * (a.y() - j) - (c.y() - j) * (a.x() - i)) / area;
                const double wc = 1.0 - wa - wb;
                if (wa < 0.0 || wb < 0.0 || wc < 0.0) continue;
                const double z = wa * a.z() + wb * b.z() + wc * c.z();
                const std::size_t idx = map.index(i, j);
                if (z > depth[idx]) {  // strict: the lower triangle index keeps ties
                    depth[idx] = z;
                    owner[idx] = static_cast<int>(t);
                    bary[idx] = Vec3(wa, wb, wc);
                }
            }
        }
    }

    for (int j = 0; j < height; ++j) {
        for (int i = 0; i < width; ++i) {
            const std::size_t idx = map.index(i, j);
            if (owner[idx] < 0) continue;
            const auto& tri = mesh.triangles[static_cast<std::size_t>(owner[idx])];
            Vec3 nrm = Vec3::Zero();
            for (int k = 0; k < 3; ++k) nrm += bary[idx][k] * mesh.normals[static_cast<std::size_t>(tri[k])];
            if (!(nrm.norm() > 1e-12)) nrm = face_cross(mesh, tri);
            map.set(i, j, view.world_to_view(nrm.normalized()));
        }
    }
    return map;
}

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    f.precision(9);
    for (const Vec3& v : mesh.vertices) f << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const Vec3& n : mesh.normals) f << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
    for (const auto& t : mesh.triangles) {
        f << 'f';
        for (int k : t) f << ' ' << k + 1 << "//" << k + 1;
        f << '\n';
    }
    if (!f) throw Error("write failed for " + path.string());
}

}  // namespace sidefit
