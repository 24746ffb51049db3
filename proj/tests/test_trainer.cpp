#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sidefit/trainer.hpp"

using namespace sidefit;
using sidefit::test::param_fd;
using sidefit::test::rel_err;

namespace {

Scene toy_scene() {
    return parse_scene(
        "target sphere 0 0 0 0.5\n"
        "prior sphere 0 0 0 0.4\n"
        "real.1 box 0 0 0 0.3 0.3 0.3\n"
        "real.2 sphere 0 0 0 1\n");
}

TrainConfig toy_config() {
    TrainConfig c;
    c.hidden = {16, 16};
    c.voxel_res = 8;
    c.voxel_channels = 4;
    c.map_size = 48;
    c.init_steps = 20;
    c.epochs = 3;
    c.steps_per_epoch = 6;
    c.batch_near = 30;
    c.batch_uniform = 6;
    c.dis_warmup_epochs = 1;
    c.adv_every = 2;
    c.dis_hidden = 8;
    c.seed = 3;
    return c;
}

std::vector<double> params_of(const SdfField& f) {
    std::vector<double> p(f.param_count());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = f.param(i);
    return p;
}

SdfField toy_field(const Scene& scene, const TrainConfig& cfg, int init_steps = 0) {
    TrainConfig c = cfg;
    c.init_steps = init_steps;
    return initialize_field(scene, build_prior_scene(scene, c), c);
}

SampleBatch toy_batch(const Scene& scene, std::uint64_t seed, std::size_t near = 30, std::size_t uniform = 6) {
    return sample_batch(*scene.target, Rng(seed), near, uniform, 0.05);
}

// Zero every weight and set the output bias, giving phi == c.
void make_constant(SdfField& f, double c) {
    for (auto& l : f.layers()) {
        l.weight.setZero();
        l.bias.setZero();
    }
    f.layers().back().bias[0] = c;
}

}  // namespace

TEST_CASE("alignment_loss examples") {
    const Scene scene = toy_scene();
    const TrainConfig cfg = toy_config();
    SdfField f = toy_field(scene, cfg);
    SampleBatch b = toy_batch(scene, 1);

    SUBCASE("field equal to the oracle gives zero") {
        std::vector<double> v(b.size());
        f.eval(b.points, v);
        b.gt_sdf = v;
        CHECK(alignment_loss(f, b) == 0.0);
    }
    SUBCASE("constant field against zeros gives c squared") {
        make_constant(f, 0.37);
        std::fill(b.gt_sdf.begin(), b.gt_sdf.end(), 0.0);
        CHECK(alignment_loss(f, b) == doctest::Approx(0.37 * 0.37).epsilon(1e-14));
    }
    SUBCASE("matches a loop") {
        double acc = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double d = eval_field(f, b.points[i]) - b.gt_sdf[i];
            acc += d * d;
        }
        CHECK(std::abs(alignment_loss(f, b) - acc / b.size()) < 1e-12);
    }
    SUBCASE("empty batch is an error") {
        CHECK_THROWS(alignment_loss(f, SampleBatch{}));
    }
}

TEST_CASE("total_loss is the weighted sum of its parts") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    const SdfField f = toy_field(scene, cfg);
    const SampleBatch b = toy_batch(scene, 2);
    const Discriminator d(Rng(9), 8);
    const FakeRenders fakes = render_fakes(f, side_views(), cfg, 1);

    SUBCASE("zero weights leave the alignment term") {
        cfg.w_d = cfg.w_e = cfg.w_c = 0.0;
        const LossResult r = total_loss(f, &d, b, &fakes, cfg, 1);
        CHECK(r.parts.total == r.parts.alignment);
        CHECK(r.parts.alignment == doctest::Approx(alignment_loss(f, b)).epsilon(1e-13));
    }
    SUBCASE("unit weights sum the components") {
        cfg.w_d = cfg.w_e = cfg.w_c = 1.0;
        const LossResult r = total_loss(f, &d, b, &fakes, cfg, 1);
        const GeneratorLoss g = generator_adv_loss(d, fakes.maps(), cfg.adv_mode);
        CHECK(r.parts.adversarial == g.loss);
        CHECK(r.parts.adversarial > 0.0);
        const double sum = r.parts.alignment + r.parts.adversarial + r.parts.eikonal + r.parts.curvature;
        CHECK(std::abs(r.parts.total - sum) < 1e-12);
    }
    SUBCASE("doubling w_e doubles the eikonal contribution") {
        cfg.w_e = 0.3;
        const LossResult r1 = total_loss(f, &d, b, &fakes, cfg, 1);
        cfg.w_e = 0.6;
        const LossResult r2 = total_loss(f, &d, b, &fakes, cfg, 1);
        CHECK(r1.parts.eikonal == r2.parts.eikonal);
        CHECK(std::abs((r2.parts.total - r1.parts.total) - 0.3 * r1.parts.eikonal) < 1e-12);
    }
}

TEST_CASE("without the discriminator the objective ignores D") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    cfg.enable_dis = false;
    const SdfField f = toy_field(scene, cfg);
    const SampleBatch b = toy_batch(scene, 3);
    const FakeRenders fakes = render_fakes(f, side_views(), cfg, 1);

    Discriminator d(Rng(1), 8);
    const LossResult r1 = total_loss(f, &d, b, &fakes, cfg, 1);
    for (std::size_t i = 0; i < d.param_count(); ++i) d.param(i) += 0.5 * std::sin(double(i));
    const LossResult r2 = total_loss(f, &d, b, &fakes, cfg, 1);
    const LossResult r3 = total_loss(f, nullptr, b, nullptr, cfg, 1);
    CHECK(r1.parts.total == r2.parts.total);
    CHECK(r1.parts.total == r3.parts.total);
    CHECK(r1.parts.adversarial == 0.0);
    REQUIRE(r1.grad.size() == r2.grad.size());
    for (std::size_t i = 0; i < r1.grad.size(); ++i) {
        REQUIRE(r1.grad[i] == r2.grad[i]);
        REQUIRE(r1.grad[i] == r3.grad[i]);
    }
}

TEST_CASE("the adversarial term reaches the field gradient only when w_d > 0") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    const SdfField f = toy_field(scene, cfg, 400);
    const SampleBatch b = toy_batch(scene, 4);
    const Discriminator d(Rng(2), 8);
    const FakeRenders fakes = render_fakes(f, side_views(), cfg, 1);
    REQUIRE(!fakes.renders[0].hits.empty());

    const LossResult without = total_loss(f, nullptr, b, nullptr, cfg, 1);
    cfg.w_d = 0.0;
    const LossResult zero = total_loss(f, &d, b, &fakes, cfg, 1);
    cfg.w_d = 1.0;
    const LossResult with = total_loss(f, &d, b, &fakes, cfg, 1);
    double diff_zero = 0.0, diff_with = 0.0;
    for (std::size_t i = 0; i < without.grad.size(); ++i) {
        diff_zero = std::max(diff_zero, std::abs(zero.grad[i] - without.grad[i]));
        diff_with = std::max(diff_with, std::abs(with.grad[i] - without.grad[i]));
    }
    CHECK(diff_zero == 0.0);
    CHECK(diff_with > 0.0);
}

TEST_CASE("analytic gradients evaluate each point once") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    const SdfField f = toy_field(scene, cfg);
    const SampleBatch b = toy_batch(scene, 5);

    cfg.enable_m2o = false;
    f.reset_evaluations();
    total_loss(f, nullptr, b, nullptr, cfg, 0);
    CHECK(f.evaluations() == b.size());

    cfg.enable_m2o = true;
    f.reset_evaluations();
    total_loss(f, nullptr, b, nullptr, cfg, 0);
    CHECK(f.evaluations() == 7 * b.size());
}

TEST_CASE("total_loss parameter gradient matches finite differences") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    cfg.w_d = 0.0;
    cfg.w_e = 0.7;
    cfg.w_c = 0.05;
    cfg.fixed_eps = 0.05;
    SdfField f = toy_field(scene, cfg);
    const SampleBatch b = toy_batch(scene, 6, 12, 4);

    for (bool m2o : {true, false}) {
        CAPTURE(m2o);
        cfg.enable_m2o = m2o;
        for (CurvatureReduction red : {CurvatureReduction::sum_abs_axes, CurvatureReduction::abs_laplacian}) {
            cfg.curvature = red;
            const LossResult r = total_loss(f, nullptr, b, nullptr, cfg, 0);
            auto loss = [&](const SdfField& g) { return total_loss(g, nullptr, b, nullptr, cfg, 0).parts.total; };
            Rng pick(17);
            double worst = 0.0;
            for (int k = 0; k < 40; ++k) {
                const std::size_t i = static_cast<std::size_t>(pick.uniform() * double(f.param_count()));
                const double fd = param_fd(f, i, 1e-6, loss);
                if (std::abs(fd) < 1e-7 && std::abs(r.grad[i]) < 1e-7) continue;
                worst = std::max(worst, rel_err(r.grad[i], fd, 1e-4));
            }
            CHECK(worst < 1e-4);
        }
    }
}

TEST_CASE("optimizer step with zero gradient leaves parameters unchanged") {
    const Scene scene = toy_scene();
    const TrainConfig cfg = toy_config();
    SdfField f = toy_field(scene, cfg);
    const auto before = params_of(f);
    RmsProp opt;
    const ParamGradient zero = ParamGradient::zeros_like(f);
    for (int i = 0; i < 3; ++i) opt.step(f, zero, 1e-2);
    CHECK(params_of(f) == before);
    for (double v : opt.mean_square()) CHECK(v == 0.0);
}

TEST_CASE("schedule follows the config") {
    TrainConfig cfg;
    cfg.map_size = 128;
    CHECK(cfg.epsilon_at(0) == 1.0 / 128);
    CHECK(cfg.epsilon_at(3) == 1.0 / 1024);
    CHECK(cfg.epsilon_at(20) == 1e-4);
    cfg.epsilon0 = 0.02;
    CHECK(cfg.epsilon_at(1) == 0.01);
    cfg.fixed_eps = 0.005;
    for (int n : {0, 5, 29}) CHECK(cfg.epsilon_at(n) == 0.005);
    CHECK(cfg.stencil_at(4).mode == GradientMode::m2o);
    cfg.enable_m2o = false;
    CHECK(cfg.stencil_at(4).mode == GradientMode::analytic_autodiff);
}

TEST_CASE("config text round-trips and hashes without the seed") {
    TrainConfig c = toy_config();
    c.fixed_eps = 0.01;
    c.adv_mode.kind = AdvLossMode::Kind::bce;
    c.adv_mode.real_views = AdvLossMode::Views::four_views;
    c.curvature = CurvatureReduction::abs_laplacian;
    c.w_d = 0.1 + 0.2;  // not exactly representable in short decimal
    const TrainConfig back = parse_config(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.hash() == c.hash());
    CHECK(back.w_d == c.w_d);

    TrainConfig other_seed = c;
    other_seed.seed = 99;
    CHECK(other_seed.hash() == c.hash());
    TrainConfig other_weight = c;
    other_weight.w_e *= 2;
    CHECK(other_weight.hash() != c.hash());
    CHECK(c.hash().size() == 16);

    const TrainConfig partial = parse_config("# comment\n\n  epochs = 4  # trailing\nepsilon0=auto\n");
    CHECK(partial.epochs == 4);
    CHECK(!partial.epsilon0);
}

TEST_CASE("config errors name the source and line") {
    auto message = [](const std::string& text) {
        try {
            parse_config(text, {}, "cfg.txt");
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("epochs=3\nbogus=1\n").find("cfg.txt:2:") != std::string::npos);
    CHECK(message("epochs=3\nbogus=1\n").find("bogus") != std::string::npos);
    CHECK(message("w_d=abc\n").find("cfg.txt:1:") != std::string::npos);
    CHECK(message("epochs 3\n").find("key=value") != std::string::npos);
    CHECK(message("w_e=-1\n").find("non-negative") != std::string::npos);
    CHECK(message("adv_loss=hinge\n").find("mse or bce") != std::string::npos);
    CHECK(message("enable_dis=maybe\n").find("true/false") != std::string::npos);
    CHECK(message("epochs=2.5\n").find("integer") != std::string::npos);
    CHECK_THROWS_AS(load_config("/nonexistent/cfg.txt"), ConfigError);
}

TEST_CASE("zero epochs returns the initialized field") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    cfg.epochs = 0;
    const TrainResult r = train(scene, cfg);
    const SdfField init = initialize_field(scene, build_prior_scene(scene, cfg), cfg);
    CHECK(params_of(r.field) == params_of(init));
    CHECK(r.report.epochs.empty());
    CHECK(r.report.config_hash == cfg.hash());
}

TEST_CASE("training is deterministic and reports every epoch") {
    const Scene scene = toy_scene();
    const TrainConfig cfg = toy_config();
    const TrainResult a = train(scene, cfg);
    const TrainResult b = train(scene, cfg);
    CHECK(a.report.to_csv() == b.report.to_csv());
    CHECK(params_of(a.field) == params_of(b.field));

    REQUIRE(a.report.epochs.size() == 3);
    CHECK(a.report.epochs[0].adv_rounds == 0);
    CHECK(a.report.epochs[1].adv_rounds == 3);
    CHECK(a.report.epochs[2].epsilon == cfg.epsilon_at(2));
    for (const EpochRecord& e : a.report.epochs) {
        CHECK(std::isfinite(e.total));
        CHECK(e.holdout_alignment >= 0.0);
    }
    const std::string csv = a.report.to_csv();
    CHECK(csv.rfind("# config_hash=" + cfg.hash() + " seed=3", 0) == 0);
    CHECK(a.report.timing_csv().find("wall_seconds") != std::string::npos);

    TrainConfig other = cfg;
    other.seed = 4;
    CHECK(train(scene, other).report.to_csv() != csv);
}

TEST_CASE("a disabled or silent discriminator leaves the field bit-identical") {
    const Scene scene = toy_scene();
    TrainConfig off = toy_config();
    off.enable_dis = false;
    const auto reference = params_of(train(scene, off).field);

    TrainConfig never = toy_config();
    never.dis_warmup_epochs = never.epochs;
    CHECK(params_of(train(scene, never).field) == reference);

    // D is trained and queried, but carries no weight in the field objective.
    TrainConfig silent = toy_config();
    silent.w_d = 0.0;
    const TrainResult s = train(scene, silent);
    CHECK(s.report.epochs[1].adv_rounds > 0);
    CHECK(params_of(s.field) == reference);
}

TEST_CASE("a blown-up run raises DivergenceDetected with the partial report") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    cfg.enable_dis = false;
    cfg.lr_field = 1e150;
    cfg.epochs = 5;
    try {
        train(scene, cfg);
        FAIL("expected divergence");
    } catch (const DivergenceDetected& e) {
        CHECK(e.report.epochs.size() < 5);
        CHECK(e.report.config_hash == cfg.hash());
    }
}

TEST_CASE("invalid configs are rejected before training") {
    const Scene scene = toy_scene();
    TrainConfig cfg = toy_config();
    cfg.steps_per_epoch = 0;
    CHECK_THROWS_AS(train(scene, cfg), ConfigError);
    cfg = toy_config();
    cfg.render_w = 20;
    CHECK_THROWS_AS(train(scene, cfg), ConfigError);
}
