#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "sidefit/adversary.hpp"
#include "sidefit/render.hpp"
#include "sidefit/scalar_field.hpp"

using namespace sidefit;
using sidefit::test::rel_err;

namespace {

NormalMap random_map(Rng& rng, int w, int h, double fg_prob = 0.7) {
    NormalMap m(w, h);
    for (int j = 0; j < h; ++j)
        for (int i = 0; i < w; ++i) {
            if (rng.uniform() >= fg_prob) continue;
            Vec3 n(rng.normal(), rng.normal(), rng.normal());
            m.set(i, j, n.normalized());
        }
    return m;
}

void zero_layers(Discriminator& d) {
    for (auto& l : d.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
}

// Forces D to a constant score: zero weights, output bias b.
void constant_discriminator(Discriminator& d, double b) {
    zero_layers(d);
    d.layers.back().bias[0] = b;
}

NormalMap side_map(SdfPtr shape, int size, int yaw) {
    StencilConfig cfg;
    cfg.epsilon = 1e-4;
    return raymarch_normal_map(AnalyticField(std::move(shape)), ViewAngle(yaw), size, size, cfg);
}

}  // namespace

TEST_CASE("split_patches: 48x48 tiles are the pixels themselves") {
    Rng rng(3);
    const NormalMap m = random_map(rng, 48, 48);
    const PatchGrid g = split_patches(m);
    CHECK(g.patches.size() == 9);
    for (int tr = 0; tr < 3; ++tr)
        for (int tc = 0; tc < 3; ++tc) {
            const auto& p = g.patches[static_cast<std::size_t>(tr * 3 + tc)];
            REQUIRE(p.size() == kPatchDim);
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c)
                    for (int ch = 0; ch < 3; ++ch) {
                        CHECK(p[(r * 16 + c) * 3 + ch] == m.at(tc * 16 + c, tr * 16 + r)[ch]);
                    }
        }
}

TEST_CASE("split_patches: constant foreground gives identical tiles") {
    NormalMap m(75, 61);
    const Vec3 n = Vec3(0.3, -0.4, 0.8).normalized();
    for (int j = 0; j < m.height; ++j)
        for (int i = 0; i < m.width; ++i) m.set(i, j, n);
    const PatchGrid g = split_patches(m);
    for (const auto& p : g.patches) {
        for (int k = 0; k < 256; ++k) {
            for (int ch = 0; ch < 3; ++ch) CHECK(p[k * 3 + ch] == doctest::Approx(n[ch]).epsilon(1e-12));
        }
    }
}

TEST_CASE("split_patches: checkerboard coverage matches a supersampled count") {
    // 60 px per side -> 20 px tiles -> 1.25 px output cells; 0.05 sub-steps never
    // straddle a pixel or cell boundary, so the count is exact.
    const int size = 60, block = 3;
    NormalMap m(size, size);
    for (int j = 0; j < size; ++j)
        for (int i = 0; i < size; ++i)
            if (((i / block) + (j / block)) % 2 == 0) m.set(i, j, Vec3::UnitZ());
    const PatchGrid g = split_patches(m);
    const int sub = 25;  // sub-samples per output cell side (1.25 / 0.05)
    double worst = 0.0;
    for (int tr = 0; tr < 3; ++tr)
        for (int tc = 0; tc < 3; ++tc)
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c) {
                    int inside = 0;
                    for (int a = 0; a < sub; ++a)
                        for (int b = 0; b < sub; ++b) {
                            const double y = tr * 20 + r * 1.25 + (a + 0.5) * 0.05;
                            const double x = tc * 20 + c * 1.25 + (b + 0.5) * 0.05;
                            inside += m.fg(static_cast<int>(x), static_cast<int>(y)) ? 1 : 0;
                        }
                    const double expect = inside / double(sub * sub);
                    const double got = g.patches[static_cast<std::size_t>(tr * 3 + tc)][(r * 16 + c) * 3 + 2];
                    worst = std::max(worst, std::abs(got - expect));
                }
    CHECK(worst < 1e-6);
}

TEST_CASE("split_patches: remainder pixels go to the last row and column") {
    CHECK(tile_start(50, 0) == 0);
    CHECK(tile_start(50, 1) == 16);
    CHECK(tile_start(50, 2) == 32);
    CHECK(tile_start(50, 3) == 50);
    NormalMap m(50, 50);
    m.set(49, 49, Vec3::UnitX());
    const PatchGrid g = split_patches(m);
    CHECK(g.patches[8].sum() > 0.0);
    for (int t = 0; t < 8; ++t) CHECK(g.patches[static_cast<std::size_t>(t)].sum() == 0.0);
}

TEST_CASE("split_patches: undersized maps are rejected") {
    CHECK_THROWS_AS(split_patches(NormalMap(47, 64)), MapTooSmall);
    CHECK_THROWS_AS(split_patches(NormalMap(64, 40)), MapTooSmall);
}

TEST_CASE("split_patches_backward is the transpose of split_patches") {
    Rng rng(11);
    const int w = 53, h = 67;
    const NormalMap m = random_map(rng, w, h, 1.0);
    PatchGrid dp;
    for (auto& p : dp.patches) {
        p.resize(kPatchDim);
        for (Eigen::Index k = 0; k < p.size(); ++k) p[k] = rng.normal();
    }
    const PatchGrid fwd = split_patches(m);
    double lhs = 0.0;
    for (std::size_t t = 0; t < 9; ++t) lhs += fwd.patches[t].dot(dp.patches[t]);
    const auto back = split_patches_backward(w, h, dp);
    double rhs = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) rhs += back[i].dot(m.normals[i]);
    CHECK(rel_err(lhs, rhs) < 1e-12);
}

TEST_CASE("discriminate: zero weights with output bias b returns b") {
    Discriminator d(Rng(1));
    constant_discriminator(d, 0.37);
    Rng rng(2);
    CHECK(discriminate(d, random_map(rng, 64, 64)) == 0.37);
}

TEST_CASE("discriminate: mean of nine patch scores, invariant to patch order") {
    Discriminator d(Rng(5));
    Rng rng(6);
    const NormalMap m = random_map(rng, 64, 48);
    const PatchGrid g = split_patches(m);
    double loop = 0.0;
    for (const auto& p : g.patches) {
        // Hand-rolled forward, independent of score_patch.
        std::vector<double> hidden(static_cast<std::size_t>(d.layers[0].weight.rows()));
        for (Eigen::Index r = 0; r < d.layers[0].weight.rows(); ++r) {
            double a = d.layers[0].bias[r];
            for (Eigen::Index c = 0; c < kPatchDim; ++c) a += d.layers[0].weight(r, c) * p[c];
            hidden[static_cast<std::size_t>(r)] = a > 0 ? a : 0.2 * a;
        }
        double s = d.layers[1].bias[0];
        for (std::size_t r = 0; r < hidden.size(); ++r) s += d.layers[1].weight(0, static_cast<Eigen::Index>(r)) * hidden[r];
        loop += s;
    }
    loop /= 9.0;
    const double got = discriminate(d, m);
    CHECK(rel_err(got, loop) < 1e-12);

    std::array<std::size_t, 9> order{8, 3, 0, 5, 1, 7, 2, 6, 4};
    double permuted = 0.0;
    for (std::size_t k : order) permuted += d.score_patch(g.patches[k]);
    CHECK(rel_err(permuted / 9.0, got) < 1e-14);
}

TEST_CASE("discriminator_loss: arithmetic cases") {
    Rng rng(8);
    std::vector<NormalMap> fakes{random_map(rng, 48, 48), random_map(rng, 48, 48)};
    std::vector<NormalMap> reals{random_map(rng, 48, 48)};
    Discriminator d(Rng(9));

    constant_discriminator(d, 0.5);
    CHECK(discriminator_loss(d, fakes, reals, {}) == 0.5);

    // Perfect discriminator: a zero map scores 0 (zero bias), a map of +z scores 1.
    zero_layers(d);
    d.layers[0].weight(0, 2) = 1.0;  // picks channel z of the first cell
    d.layers[1].weight(0, 0) = 1.0;
    NormalMap black(48, 48), white(48, 48);
    for (int j = 0; j < 48; ++j)
        for (int i = 0; i < 48; ++i) white.set(i, j, Vec3::UnitZ());
    std::vector<NormalMap> f{black}, r{white};
    CHECK(discriminate(d, black) == 0.0);
    CHECK(discriminate(d, white) == 1.0);
    CHECK(discriminator_loss(d, f, r, {}) == 0.0);
    CHECK_THROWS(discriminator_loss(d, std::vector<NormalMap>{}, r, {}));
}

TEST_CASE("discriminator_loss: equals the hand-looped objective") {
    Rng rng(12);
    std::vector<NormalMap> fakes, reals;
    for (int k = 0; k < 3; ++k) fakes.push_back(random_map(rng, 48 + 5 * k, 50));
    for (int k = 0; k < 4; ++k) reals.push_back(random_map(rng, 60, 48 + 3 * k));
    const Discriminator d(Rng(13));

    double f = 0.0, r = 0.0;
    for (const auto& m : fakes) f += std::pow(discriminate(d, m), 2);
    for (const auto& m : reals) r += std::pow(discriminate(d, m) - 1.0, 2);
    const double mse = f / 3.0 + r / 4.0;
    CHECK(rel_err(discriminator_loss(d, fakes, reals, {}), mse) < 1e-12);
    CHECK(discriminator_loss(d, fakes, reals, {}) >= 0.0);

    auto sp = [](double x) { return std::log(1.0 + std::exp(x)); };
    double bf = 0.0, br = 0.0;
    for (const auto& m : fakes) bf += sp(discriminate(d, m));
    for (const auto& m : reals) br += sp(-discriminate(d, m));
    AdvLossMode bce;
    bce.kind = AdvLossMode::Kind::bce;
    CHECK(rel_err(discriminator_loss(d, fakes, reals, bce), bf / 3.0 + br / 4.0) < 1e-12);
}

TEST_CASE("discriminator parameter gradients match finite differences") {
    Rng rng(21);
    std::vector<NormalMap> fakes{random_map(rng, 48, 48), random_map(rng, 52, 49)};
    std::vector<NormalMap> reals{random_map(rng, 50, 50)};
    for (auto kind : {AdvLossMode::Kind::mse, AdvLossMode::Kind::bce}) {
        AdvLossMode mode;
        mode.kind = kind;
        Discriminator d(Rng(22), 16);
        DiscriminatorGradient g = d.zero_gradient();
        discriminator_loss(d, fakes, reals, mode, &g);
        REQUIRE(g.size() == d.param_count());
        Rng pick(23);
        double worst = 0.0;
        for (int t = 0; t < 60; ++t) {
            // Half of the probes go to the small output layer.
            const std::size_t n0 = static_cast<std::size_t>(d.layers[0].weight.size() + d.layers[0].bias.size());
            const std::size_t i = t % 2 ? n0 + pick.below(d.param_count() - n0) : pick.below(n0);
            double& p = d.param(i);
            const double saved = p, h = 1e-6;
            p = saved + h;
            const double up = discriminator_loss(d, fakes, reals, mode);
            p = saved - h;
            const double down = discriminator_loss(d, fakes, reals, mode);
            p = saved;
            const double fd = (up - down) / (2 * h);
            if (std::abs(fd) < 1e-9 && std::abs(g[i]) < 1e-9) continue;
            worst = std::max(worst, rel_err(g[i], fd, 1e-8));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("generator_adv_loss: pixel gradients match finite differences") {
    Rng rng(31);
    std::vector<NormalMap> fakes{random_map(rng, 48, 48, 0.9), random_map(rng, 56, 50, 0.9)};
    const Discriminator d(Rng(32));
    for (auto kind : {AdvLossMode::Kind::mse, AdvLossMode::Kind::bce}) {
        AdvLossMode mode;
        mode.kind = kind;
        const GeneratorLoss gl = generator_adv_loss(d, fakes, mode);
        REQUIRE(gl.pixel_grads.size() == 2);
        Rng pick(33);
        double worst = 0.0;
        int checked = 0;
        while (checked < 20) {
            const std::size_t f = pick.below(2);
            NormalMap& m = fakes[f];
            const std::size_t px = pick.below(m.normals.size());
            if (!m.mask[px]) {
                CHECK(gl.pixel_grads[f][px] == Vec3::Zero());
                continue;
            }
            const int ch = static_cast<int>(pick.below(3));
            const double saved = m.normals[px][ch], h = 1e-6;
            m.normals[px][ch] = saved + h;
            const double up = generator_adv_loss(d, fakes, mode).loss;
            m.normals[px][ch] = saved - h;
            const double down = generator_adv_loss(d, fakes, mode).loss;
            m.normals[px][ch] = saved;
            worst = std::max(worst, rel_err(gl.pixel_grads[f][px][ch], (up - down) / (2 * h), 1e-8));
            ++checked;
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("generator_adv_loss: D at 1 gives zero loss and gradients; bias sweep is monotone") {
    Rng rng(41);
    std::vector<NormalMap> fakes{random_map(rng, 48, 48)};
    Discriminator d(Rng(42));
    constant_discriminator(d, 1.0);
    const GeneratorLoss gl = generator_adv_loss(d, fakes, {});
    CHECK(gl.loss == 0.0);
    for (const Vec3& g : gl.pixel_grads[0]) CHECK(g == Vec3::Zero());

    Discriminator s(Rng(43));
    const double base = discriminate(s, fakes[0]);
    double prev = INFINITY;
    for (int k = 0; k <= 20; ++k) {
        // Move D(fake) from base - 1 toward 1 in equal increments.
        const double target = (base - 1.0) + k * (2.0 - base) / 20.0;
        s.layers.back().bias[0] += target - discriminate(s, fakes[0]);
        const double loss = generator_adv_loss(s, fakes, {}).loss;
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(prev < 1e-20);
}

TEST_CASE("discriminator_step: lr 0 is a no-op, training is deterministic and reduces the loss") {
    Rng rng(51);
    std::vector<NormalMap> fakes, reals;
    for (int k = 0; k < 4; ++k) {
        fakes.push_back(random_map(rng, 48, 48, 0.3));
        reals.push_back(random_map(rng, 48, 48, 0.9));
    }
    Discriminator d(Rng(52));
    const auto before = d.layers;
    discriminator_step(d, fakes, reals, {}, 0.0);
    for (std::size_t l = 0; l < before.size(); ++l) {
        CHECK(d.layers[l].weight == before[l].weight);
        CHECK(d.layers[l].bias == before[l].bias);
    }

    Discriminator a(Rng(53)), b(Rng(53));
    const double initial = discriminator_loss(a, fakes, reals, {});
    for (int s = 0; s < 200; ++s) {
        discriminator_step(a, fakes, reals, {}, 1e-4);
        discriminator_step(b, fakes, reals, {}, 1e-4);
    }
    CHECK(discriminator_loss(a, fakes, reals, {}) < initial);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].weight == b.layers[l].weight);
        CHECK(a.layers[l].bias == b.layers[l].bias);
    }
}

TEST_CASE("discriminator separates sphere and cube side views") {
    Rng rng(61);
    auto make_set = [&](int n, std::vector<NormalMap>& spheres, std::vector<NormalMap>& cubes) {
        for (int k = 0; k < n; ++k) {
            const Vec3 c(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
            const int yaw = k % 2 ? 90 : 270;
            spheres.push_back(side_map(make_sphere(c, rng.uniform(0.3, 0.6)), 48, yaw));
            const double h = rng.uniform(0.25, 0.5);
            cubes.push_back(side_map(make_box(c, Vec3(h, rng.uniform(0.25, 0.5), h)), 48, yaw));
        }
    };
    std::vector<NormalMap> train_real, train_fake, test_real, test_fake;
    make_set(24, train_real, train_fake);
    make_set(20, test_real, test_fake);

    Discriminator d(Rng(62));
    auto accuracy = [&] {
        int ok = 0;
        for (const auto& m : test_real) ok += discriminate(d, m) > 0.5;
        for (const auto& m : test_fake) ok += discriminate(d, m) <= 0.5;
        return ok / double(test_real.size() + test_fake.size());
    };
    double acc = accuracy();
    int steps = 0;
    while (acc < 0.95 && steps < 2000) {
        discriminator_step(d, train_fake, train_real, {}, 1e-4);
        if (++steps % 25 == 0) acc = accuracy();
    }
    MESSAGE("held-out accuracy " << acc << " after " << steps << " steps");
    CHECK(acc >= 0.95);
}
