#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

#include "helpers.hpp"
#include "sidefit/render.hpp"

using namespace sidefit;
using sidefit::test::blank_scene;
using sidefit::test::param_fd;
using sidefit::test::rel_err;

namespace {

StencilConfig fine_stencil() {
    StencilConfig c;
    c.epsilon = 1e-4;
    return c;
}

double angle_deg(const Vec3& a, const Vec3& b) {
    return std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / std::numbers::pi;
}

// Mean angular difference over pixels that are foreground in both maps.
double mean_angle_on_shared_mask(const NormalMap& a, const NormalMap& b, std::size_t* shared = nullptr) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.normals.size(); ++i) {
        if (!a.mask[i] || !b.mask[i]) continue;
        acc += angle_deg(a.normals[i], b.normals[i]);
        ++n;
    }
    if (shared) *shared = n;
    return n ? acc / double(n) : 0.0;
}

double signed_volume(const TriangleMesh& m) {
    double v = 0.0;
    for (const auto& t : m.triangles) {
        v += m.vertices[t[0]].dot(m.vertices[t[1]].cross(m.vertices[t[2]])) / 6.0;
    }
    return v;
}

bool watertight(const TriangleMesh& m) {
    std::map<std::pair<int, int>, int> count;
    for (const auto& t : m.triangles) {
        for (int k = 0; k < 3; ++k) {
            const int a = t[k], b = t[(k + 1) % 3];
            ++count[{std::min(a, b), std::max(a, b)}];
        }
    }
    for (const auto& [e, c] : count) {
        if (c != 2) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("raymarched sphere") {
    const AnalyticField sphere(make_sphere(Vec3::Zero(), 0.5));
    for (ViewAngle v : all_views()) {
        const NormalMap m = raymarch_normal_map(sphere, v, 64, 64, fine_stencil());
        CHECK(satisfies_unit_invariant(m));
        // The four pixels around the image centre sit at u, v = +-1/64.
        for (int i : {31, 32}) {
            for (int j : {31, 32}) {
                CHECK(m.fg(i, j));
                CHECK(m.at(i, j).z() > 1.0 - 1e-3);
            }
        }
        // Right of centre the normal tilts toward view +x.
        CHECK(m.at(44, 32).x() > 0.5);
        CHECK(m.at(32, 20).y() > 0.5);
    }

    SUBCASE("silhouette area") {
        const int w = 128, h = 128;
        const RaymarchResult r = raymarch(sphere, ViewAngle::left(), w, h, fine_stencil());
        const double r_pix = 0.5 * w / 2.0;
        const double expected = std::numbers::pi * r_pix * r_pix / (w * h);
        CHECK(double(r.map.foreground_count()) / (w * h) == doctest::Approx(expected).epsilon(0.02));
        for (const Vec3& p : r.hits) CHECK(std::abs(p.norm() - 0.5) < 1e-4);
    }
    SUBCASE("analytic mode uses field jets") {
        const FunctionField jets([](const Vec3& p) { return p.norm() - 0.5; },
                                 [](const Vec3& p) -> Vec3 { return p.normalized(); });
        StencilConfig cfg = fine_stencil();
        cfg.mode = GradientMode::analytic_autodiff;
        const NormalMap a = raymarch_normal_map(jets, ViewAngle::front(), 48, 48, cfg);
        const NormalMap b = raymarch_normal_map(sphere, ViewAngle::front(), 48, 48, fine_stencil());
        CHECK(a.mask == b.mask);
        CHECK(mean_angle_on_shared_mask(a, b) < 1e-3);
    }
}

TEST_CASE("no surface gives an empty map") {
    const FunctionField positive([](const Vec3& p) { return 0.3 + 0.1 * p.squaredNorm(); });
    const NormalMap m = raymarch_normal_map(positive, ViewAngle::front(), 32, 32, fine_stencil());
    CHECK(m.foreground_count() == 0);
    CHECK(satisfies_unit_invariant(m));
    const FunctionField negative([](const Vec3&) { return -1.0; });
    CHECK(raymarch_normal_map(negative, ViewAngle::back(), 32, 32, fine_stencil()).foreground_count() == 0);
}

TEST_CASE("raymarch_backprop") {
    SdfField net(blank_scene(make_sphere(Vec3(0.05, 0, 0), 0.45)), {12, 12}, Rng(3), 0.2);
    // Hit points are frozen, so they can come from any surface; use the analytic sphere.
    const AnalyticField sphere(make_sphere(Vec3::Zero(), 0.5));
    StencilConfig cfg;
    cfg.epsilon = 0.01;
    RaymarchResult r = raymarch(sphere, ViewAngle::left(), 48, 48, cfg);
    REQUIRE(r.hits.size() > 100);
    const std::size_t n = 48 * 48;

    SUBCASE("zero upstream") {
        const std::vector<Vec3> up(n, Vec3::Zero());
        CHECK(raymarch_backprop(net, r, up, cfg).max_abs() == 0.0);
    }
    for (GradientMode mode : {GradientMode::m2o, GradientMode::analytic_autodiff}) {
        cfg.mode = mode;
        SUBCASE("single pixel finite differences") {
            Rng rng(4);
            for (int trial = 0; trial < 4; ++trial) {
                const std::size_t h = rng.below(r.hits.size());
                const Vec3 u(rng.normal(), rng.normal(), rng.normal());
                std::vector<Vec3> up(n, Vec3::Zero());
                up[r.hit_pixels[h]] = u;
                const ParamGradient g = raymarch_backprop(net, r, up, cfg);
                const Vec3 hit = r.hits[h];
                for (int t = 0; t < 15; ++t) {
                    const std::size_t idx = rng.below(net.param_count());
                    const double fd = param_fd(net, idx, 1e-6, [&](const SdfField& f) {
                        return u.dot(normals_at(f, std::span(&hit, 1), r.view, cfg)[0]);
                    });
                    CHECK(rel_err(g[idx], fd, 1e-6) < 1e-3);
                }
            }
        }
        SUBCASE("additive over pixels") {
            std::vector<Vec3> a(n, Vec3::Zero()), b(n, Vec3::Zero()), ab(n, Vec3::Zero());
            Rng rng(5);
            for (std::size_t h = 0; h < r.hits.size(); h += 7) {
                a[r.hit_pixels[h]] = Vec3(rng.normal(), rng.normal(), rng.normal());
                b[r.hit_pixels[(h + 3) % r.hits.size()]] = Vec3(rng.normal(), rng.normal(), rng.normal());
            }
            for (std::size_t i = 0; i < n; ++i) ab[i] = a[i] + b[i];
            ParamGradient sum = raymarch_backprop(net, r, a, cfg);
            sum += raymarch_backprop(net, r, b, cfg);
            ParamGradient d = raymarch_backprop(net, r, ab, cfg);
            d.add_scaled(sum, -1.0);
            CHECK(d.max_abs() < 1e-10 * std::max(1.0, sum.max_abs()));
        }
    }
}

TEST_CASE("marching cubes") {
    const AnalyticField sphere(make_sphere(Vec3::Zero(), 0.5));
    const TriangleMesh mesh = marching_cubes(sphere, 64);
    REQUIRE_FALSE(mesh.empty());
    const double diag = 2.0 * std::sqrt(3.0) / 64.0;
    double worst = 0.0;
    for (const Vec3& v : mesh.vertices) worst = std::max(worst, std::abs(v.norm() - 0.5));
    CHECK(worst <= diag);
    CHECK(watertight(mesh));
    CHECK(mesh.area() == doctest::Approx(std::numbers::pi).epsilon(0.01));
    CHECK(signed_volume(mesh) == doctest::Approx(4.0 / 3.0 * std::numbers::pi / 8.0).epsilon(0.01));
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        CHECK(mesh.normals[v].dot(mesh.vertices[v].normalized()) > 0.99);
    }

    SUBCASE("sign flip reverses orientation") {
        const FunctionField flipped([&](const Vec3& p) { return -sphere(p); });
        const TriangleMesh f = marching_cubes(flipped, 64);
        CHECK(signed_volume(f) == doctest::Approx(-signed_volume(mesh)).epsilon(1e-6));
        for (const auto& t : f.triangles) {
            const Vec3 c = (f.vertices[t[0]] + f.vertices[t[1]] + f.vertices[t[2]]) / 3.0;
            const Vec3 nrm = (f.vertices[t[1]] - f.vertices[t[0]]).cross(f.vertices[t[2]] - f.vertices[t[0]]);
            CHECK(nrm.dot(c) < 0.0);
        }
    }
    SUBCASE("no sign change") {
        const FunctionField positive([](const Vec3&) { return 1.0; });
        CHECK_THROWS_AS(marching_cubes(positive, 32), EmptySurface);
        CHECK_THROWS_AS(marching_cubes(sphere, 8), Error);
    }
    SUBCASE("watertight on blended shapes and lattice-node zeros") {
        const SdfPtr person = fit_to_domain(capsule_person(0, true)->bounds()).apply(capsule_person(0, true));
        const TriangleMesh p = marching_cubes(AnalyticField(person), 48);
        CHECK(watertight(p));
        // Plane-ish box whose faces pass exactly through lattice nodes.
        const TriangleMesh b = marching_cubes(AnalyticField(make_box(Vec3::Zero(), Vec3(0.5, 0.25, 0.75))), 16);
        CHECK(watertight(b));
        // Zero-valued nodes count as outside, so every box edge is chamfered by one
        // half-cell triangle: total edge length 12, cell size 1/8.
        const double chamfer = 12.0 * 0.5 / 64.0;
        CHECK(signed_volume(b) <= 0.75);
        CHECK(signed_volume(b) >= 0.75 - chamfer);
    }
}

TEST_CASE("rasterizer") {
    SUBCASE("single covering triangle") {
        TriangleMesh m;
        m.vertices = {{-3, -3, 0}, {3, -3, 0}, {0, 3, 0}};
        m.triangles = {{0, 1, 2}};
        m.compute_normals();
        const NormalMap map = rasterize_normal_map(m, ViewAngle::front(), 32, 32);
        CHECK(map.foreground_count() == 32 * 32);
        for (const Vec3& n : map.normals) CHECK(n == Vec3(0, 0, 1));
    }
    SUBCASE("empty mesh") {
        const NormalMap map = rasterize_normal_map(TriangleMesh{}, ViewAngle::front(), 16, 16);
        CHECK(map.foreground_count() == 0);
    }
    SUBCASE("depth test keeps the nearer triangle and the lower index on ties") {
        TriangleMesh m;
        m.vertices = {{-3, -3, 0.2}, {3, -3, 0.2}, {0, 3, 0.2}, {-3, -3, 0.5}, {3, -3, 0.5}, {0, 3, 0.5},
                      {-3, -3, 0.5}, {3, -3, 0.5}, {0, 3, 0.5}};
        m.triangles = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}};
        m.normals = {Vec3::UnitX(), Vec3::UnitX(), Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitY(), Vec3::UnitY(),
                     Vec3::UnitZ(), Vec3::UnitZ(), Vec3::UnitZ()};
        const NormalMap map = rasterize_normal_map(m, ViewAngle::front(), 8, 8);
        for (const Vec3& n : map.normals) CHECK(n == Vec3(0, 1, 0));
    }
    SUBCASE("mesh path agrees with the ray-marched path") {
        const AnalyticField sphere(make_sphere(Vec3(0.1, -0.05, 0.0), 0.5));
        const TriangleMesh mesh = marching_cubes(sphere, 64);
        for (ViewAngle v : all_views()) {
            const NormalMap a = rasterize_normal_map(mesh, v, 128, 128);
            const NormalMap b = raymarch_normal_map(sphere, v, 128, 128, fine_stencil());
            CHECK(satisfies_unit_invariant(a));
            std::size_t shared = 0;
            CHECK(mean_angle_on_shared_mask(a, b, &shared) < 3.0);
            CHECK(double(shared) > 0.95 * double(b.foreground_count()));
        }
    }
}

TEST_CASE("yaw equivariance") {
    const SdfPtr shape = make_union({make_capsule({-0.4, -0.3, 0.1}, {0.3, 0.4, -0.2}, 0.15),
                                     make_box({0.2, -0.3, 0.3}, {0.2, 0.1, 0.15}),
                                     make_sphere({-0.2, 0.3, -0.4}, 0.2)});
    const AnalyticField original(shape);
    // View 90 sees world point p at view coordinates (-p.z, p.y, p.x); rotating the
    // shape by that map puts the same picture in front of view 0.
    const FunctionField rotated([&](const Vec3& q) { return shape->eval(Vec3(q.z(), q.y(), -q.x())); });
    for (auto [w, h] : {std::pair{64, 64}, std::pair{96, 48}}) {
        const NormalMap a = raymarch_normal_map(rotated, ViewAngle::front(), w, h, fine_stencil());
        const NormalMap b = raymarch_normal_map(original, ViewAngle::left(), w, h, fine_stencil());
        std::size_t shared = 0;
        CHECK(mean_angle_on_shared_mask(a, b, &shared) < 1.0);
        CHECK(shared > 0.95 * b.foreground_count());

        const TriangleMesh ma = marching_cubes(rotated, 48), mb = marching_cubes(original, 48);
        CHECK(mean_angle_on_shared_mask(rasterize_normal_map(ma, ViewAngle::front(), w, h),
                                        rasterize_normal_map(mb, ViewAngle::left(), w, h)) < 1.0);
    }
}

TEST_CASE("obj export") {
    const TriangleMesh mesh = marching_cubes(AnalyticField(make_sphere(Vec3::Zero(), 0.5)), 16);
    const auto path = std::filesystem::temp_directory_path() / "sidefit_test_mesh.obj";
    write_obj(mesh, path);
    std::ifstream f(path);
    std::size_t v = 0, vn = 0, faces = 0;
    std::string tok;
    for (std::string line; std::getline(f, line);) {
        if (line.rfind("v ", 0) == 0) ++v;
        if (line.rfind("vn ", 0) == 0) ++vn;
        if (line.rfind("f ", 0) == 0) ++faces;
    }
    CHECK(v == mesh.vertices.size());
    CHECK(vn == mesh.vertices.size());
    CHECK(faces == mesh.triangles.size());
    std::filesystem::remove(path);
}
