#include "sidefit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sidefit/scalar_field.hpp"

namespace sidefit {

namespace {

constexpr int kLeafSize = 4;

double box_sq_distance(const Aabb& b, const Vec3& p) {
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double e = std::max({b.lo[k] - p[k], 0.0, p[k] - b.hi[k]});
        d += e * e;
    }
    return d;
}

void require_mesh(const TriangleMesh& m, const char* what) {
    if (m.empty()) throw EmptyMesh(std::string(what) + ": mesh has no triangles");
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

// Ericson, Real-Time Collision Detection, 5.1.5: Voronoi-region walk.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;

    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;

    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    }
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

// ---------------------------------------------------------------------------

TriangleBvh::TriangleBvh(const TriangleMesh& mesh) : mesh_(mesh) {
    require_mesh(mesh, "TriangleBvh");
    const int n = static_cast<int>(mesh.triangles.size());
    order_.resize(static_cast<std::size_t>(n));
    std::iota(order_.begin(), order_.end(), 0);
    tri_box_.resize(static_cast<std::size_t>(n));
    centroid_.resize(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
        Aabb b;
        Vec3 c = Vec3::Zero();
        for (int v : mesh.triangles[static_cast<std::size_t>(t)]) {
            b.extend(mesh.vertices[static_cast<std::size_t>(v)]);
            c += mesh.vertices[static_cast<std::size_t>(v)];
        }
        tri_box_[static_cast<std::size_t>(t)] = b;
        centroid_[static_cast<std::size_t>(t)] = c / 3.0;
    }
    nodes_.reserve(static_cast<std::size_t>(2 * n / kLeafSize + 2));
    build(0, n);
}

int TriangleBvh::build(int begin, int end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    Aabb box, cbox;
    for (int i = begin; i < end; ++i) {
        box.extend(tri_box_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
        cbox.extend(centroid_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
    }
    nodes_[static_cast<std::size_t>(id)].box = box;
    if (end - begin <= kLeafSize) {
        nodes_[static_cast<std::size_t>(id)].begin = begin;
        nodes_[static_cast<std::size_t>(id)].end = end;
        return id;
    }
    int axis = 0;
    const Vec3 ext = cbox.extent();
    if (ext[1] > ext[axis]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int x, int y) {
        const double cx = centroid_[static_cast<std::size_t>(x)][axis];
        const double cy = centroid_[static_cast<std::size_t>(y)][axis];
        return cx < cy || (cx == cy && x < y);
    });
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
}

double TriangleBvh::triangle_sq(int tri, const Vec3& p) const {
    const auto& t = mesh_.triangles[static_cast<std::size_t>(tri)];
    const Vec3 q = closest_point_on_triangle(p, mesh_.vertices[static_cast<std::size_t>(t[0])],
                                             mesh_.vertices[static_cast<std::size_t>(t[1])],
                                             mesh_.vertices[static_cast<std::size_t>(t[2])]);
    return (q - p).squaredNorm();
}

double TriangleBvh::squared_distance(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::pair<double, int>> stack;
    stack.reserve(64);
    stack.emplace_back(box_sq_distance(nodes_[0].box, p), 0);
    while (!stack.empty()) {
        const auto [bd, id] = stack.back();
        stack.pop_back();
        if (bd >= best) continue;  // cannot hold anything strictly closer
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.left < 0) {
            for (int i = n.begin; i < n.end; ++i) best = std::min(best, triangle_sq(order_[static_cast<std::size_t>(i)], p));
            continue;
        }
        const double dl = box_sq_distance(nodes_[static_cast<std::size_t>(n.left)].box, p);
        const double dr = box_sq_distance(nodes_[static_cast<std::size_t>(n.right)].box, p);
        // Nearer child on top of the stack.
        if (dl <= dr) {
            stack.emplace_back(dr, n.right);
            stack.emplace_back(dl, n.left);
        } else {
            stack.emplace_back(dl, n.left);
            stack.emplace_back(dr, n.right);
        }
    }
    return best;
}

double TriangleBvh::distance(const Vec3& p) const { return std::sqrt(squared_distance(p)); }

double point_to_surface(std::span<const Vec3> points, const TriangleMesh& mesh) {
    require_mesh(mesh, "point_to_surface");
    if (points.empty()) throw Error("point_to_surface needs at least one point");
    const TriangleBvh bvh(mesh);
    double acc = 0.0;
    for (const Vec3& p : points) acc += bvh.distance(p);
    return acc / static_cast<double>(points.size());
}

double point_to_surface_brute(std::span<const Vec3> points, const TriangleMesh& mesh) {
    require_mesh(mesh, "point_to_surface_brute");
    if (points.empty()) throw Error("point_to_surface needs at least one point");
    double acc = 0.0;
    for (const Vec3& p : points) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : mesh.triangles) {
            const Vec3 q = closest_point_on_triangle(p, mesh.vertices[static_cast<std::size_t>(t[0])],
                                                     mesh.vertices[static_cast<std::size_t>(t[1])],
                                                     mesh.vertices[static_cast<std::size_t>(t[2])]);
            best = std::min(best, (q - p).squaredNorm());
        }
        acc += std::sqrt(best);
    }
    return acc / static_cast<double>(points.size());
}

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t n, const Rng& rng) {
    require_mesh(mesh, "sample_surface");
    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0.0;
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        const auto& tri = mesh.triangles[t];
        const Vec3& a = mesh.vertices[static_cast<std::size_t>(tri[0])];
        total += 0.5 * (mesh.vertices[static_cast<std::size_t>(tri[1])] - a)
                           .cross(mesh.vertices[static_cast<std::size_t>(tri[2])] - a)
                           .norm();
        cumulative[t] = total;
    }
    if (!(total > 0.0)) throw EmptyMesh("sample_surface: mesh has zero area");
    Rng r = rng;
    std::vector<Vec3> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pick = r.uniform() * total;
        std::size_t t = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
        t = std::min(t, cumulative.size() - 1);
        const auto& tri = mesh.triangles[t];
        const double s = std::sqrt(r.uniform()), u = r.uniform();
        const Vec3& a = mesh.vertices[static_cast<std::size_t>(tri[0])];
        const Vec3& b = mesh.vertices[static_cast<std::size_t>(tri[1])];
        const Vec3& c = mesh.vertices[static_cast<std::size_t>(tri[2])];
        out.push_back((1.0 - s) * a + s * (1.0 - u) * b + s * u * c);
    }
    return out;
}

double chamfer_from_samples(const TriangleMesh& a, std::span<const Vec3> samples_a, const TriangleMesh& b,
                            std::span<const Vec3> samples_b) {
    return 0.5 * (point_to_surface(samples_a, b) + point_to_surface(samples_b, a));
}

double chamfer(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples, const Rng& rng) {
    require_mesh(a, "chamfer");
    require_mesh(b, "chamfer");
    if (n_samples < 1000) throw Error("chamfer needs at least 1000 samples per mesh");
    const auto sa = sample_surface(a, n_samples, rng.fork(0));
    const auto sb = sample_surface(b, n_samples, rng.fork(1));
    return chamfer_from_samples(a, sa, b, sb);
}

double map_normal_error(const NormalMap& a, const NormalMap& b, MaskConvention convention) {
    if (a.width != b.width || a.height != b.height) throw Error("normal maps differ in size");
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.normals.size(); ++i) {
        const bool fa = a.mask[i] != 0, fb = b.mask[i] != 0;
        if (fa && fb) {
            acc += (a.normals[i] - b.normals[i]).norm();
            ++count;
        } else if (convention == MaskConvention::union_mask && (fa || fb)) {
            acc += fa ? a.normals[i].norm() : b.normals[i].norm();
            ++count;
        }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

NormalErrorResult normal_error(const TriangleMesh& a, const TriangleMesh& b, const std::vector<ViewAngle>& views,
                               int width, int height) {
    require_mesh(a, "normal_error");
    require_mesh(b, "normal_error");
    if (views.empty()) throw Error("normal_error needs at least one view");
    NormalErrorResult r;
    for (ViewAngle v : views) {
        const NormalMap ma = rasterize_normal_map(a, v, width, height);
        const NormalMap mb = rasterize_normal_map(b, v, width, height);
        ViewNormalError e;
        e.yaw = v.yaw();
        e.union_error = map_normal_error(ma, mb, MaskConvention::union_mask);
        e.intersection_error = map_normal_error(ma, mb, MaskConvention::intersection_mask);
        r.mean += e.union_error;
        r.mean_intersection += e.intersection_error;
        r.per_view.push_back(e);
    }
    r.mean /= static_cast<double>(views.size());
    r.mean_intersection /= static_cast<double>(views.size());
    return r;
}

MetricReport evaluate_meshes(const TriangleMesh& reconstruction, const TriangleMesh& truth, const MetricOptions& opts,
                             const Rng& rng) {
    require_mesh(reconstruction, "evaluate");
    require_mesh(truth, "evaluate");
    MetricReport m;
    const auto sr = sample_surface(reconstruction, opts.n_samples, rng.fork(0));
    const auto st = sample_surface(truth, opts.n_samples, rng.fork(1));
    m.p2s = point_to_surface(sr, truth);
    m.chamfer = 0.5 * (m.p2s + point_to_surface(st, reconstruction));

    const NormalErrorResult all = normal_error(reconstruction, truth, opts.views, opts.image_size, opts.image_size);
    m.normal_error = all.mean;
    m.normal_error_intersection = all.mean_intersection;
    m.per_view = all.per_view;
    int sides = 0;
    for (const auto& v : all.per_view) {
        if (v.yaw == 90 || v.yaw == 270) {
            m.normal_error_side += v.union_error;
            m.normal_error_side_intersection += v.intersection_error;
            ++sides;
        }
    }
    if (sides == 0) {
        const NormalErrorResult s = normal_error(reconstruction, truth, side_views(), opts.image_size, opts.image_size);
        m.normal_error_side = s.mean;
        m.normal_error_side_intersection = s.mean_intersection;
    } else {
        m.normal_error_side /= sides;
        m.normal_error_side_intersection /= sides;
    }
    return m;
}

TriangleMesh ground_truth_mesh(const SdfPtr& target, int resolution) {
    return marching_cubes(AnalyticField(target), resolution);
}

std::string MetricReport::csv_header() {
    return "chamfer,p2s,normal_error,normal_error_side,normal_error_intersection,normal_error_side_intersection";
}

std::string MetricReport::csv_row() const {
    return num(chamfer) + "," + num(p2s) + "," + num(normal_error) + "," + num(normal_error_side) + "," +
           num(normal_error_intersection) + "," + num(normal_error_side_intersection);
}

std::string MetricReport::to_text() const {
    std::ostringstream o;
    o << "chamfer                  " << num(chamfer) << "\n"
      << "p2s                      " << num(p2s) << "\n"
      << "normal error (union)     " << num(normal_error) << "\n"
      << "normal error side-only   " << num(normal_error_side) << "\n"
      << "normal error (shared px) " << num(normal_error_intersection) << "\n"
      << "side-only (shared px)    " << num(normal_error_side_intersection) << "\n";
    for (const auto& v : per_view) {
        o << "  view " << v.yaw << ": union " << num(v.union_error) << ", shared " << num(v.intersection_error) << "\n";
    }
    return o.str();
}

}  // namespace sidefit
