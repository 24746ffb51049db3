#include "sidefit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sidefit/scalar_field.hpp"

namespace sidefit {

namespace {

// Independent RNG streams per purpose, so switching one consumer on or off never
// shifts another's draws.
enum Stream : std::uint64_t {
    kStreamFieldInit = 1,
    kStreamInitBatch = 2,
    kStreamTrainBatch = 3,
    kStreamDiscriminator = 4,
    kStreamHoldout = 5,
};

constexpr std::size_t kHoldoutNear = 1024;
constexpr std::size_t kHoldoutUniform = 1024;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

long long parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

int parse_int32(const std::string& key, const std::string& v) {
    const long long x = parse_int(key, v);
    if (x < -(1LL << 31) || x >= (1LL << 31)) throw ConfigError(key + ": out of range");
    return static_cast<int>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> parse_widths(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int32(key, trim(item)));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated width list");
    return out;
}

std::string join_widths(const std::vector<int>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
    return s;
}

std::vector<ViewAngle> views_for_round(const TrainConfig& cfg, std::uint64_t round) {
    if (cfg.adv_mode.real_views == AdvLossMode::Views::four_views) return all_views();
    if (cfg.render_both_sides) return side_views();
    return {ViewAngle(round % 2 ? 270 : 90)};
}

RaymarchOptions render_options(const TrainConfig& cfg) {
    RaymarchOptions o;
    o.max_step = cfg.render_max_step;
    return o;
}

SampleBatch holdout_batch(const Scene& scene, const TrainConfig& cfg) {
    return sample_batch(*scene.target, Rng(cfg.seed, kStreamHoldout), kHoldoutNear, kHoldoutUniform,
                        cfg.sample_sigma);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw ConfigError(msg);
    };
    require(w_d >= 0.0 && w_e >= 0.0 && w_c >= 0.0, "loss weights must be non-negative");
    require(epochs >= 0, "epochs must be non-negative");
    require(steps_per_epoch > 0, "steps_per_epoch must be positive");
    require(batch_near >= 0 && batch_uniform >= 0 && batch_near + batch_uniform > 0,
            "batch sizes must be non-negative with a positive total");
    require(sample_sigma > 0.0, "sample_sigma must be positive");
    require(!epsilon0 || (*epsilon0 > 0.0 && *epsilon0 <= 0.5), "epsilon0 must lie in (0, 0.5]");
    require(eps_decay > 0.0 && eps_decay < 1.0, "eps_decay must lie in (0, 1)");
    require(!fixed_eps || (*fixed_eps > 0.0 && *fixed_eps <= 0.5), "fixed_eps must lie in (0, 0.5]");
    require(dis_warmup_epochs >= 0, "dis_warmup_epochs must be non-negative");
    require(adv_every > 0, "adv_every must be positive");
    require(render_w >= kMinMapSize && render_h >= kMinMapSize, "render size must be at least 48x48");
    require(render_max_step > 0.0, "render_max_step must be positive");
    require(dis_hidden > 0, "dis_hidden must be positive");
    require(lr_field >= 0.0 && lr_dis >= 0.0 && lr_init >= 0.0, "learning rates must be non-negative");
    require(!hidden.empty(), "hidden must list at least one width");
    for (int w : hidden) require(w > 0, "hidden widths must be positive");
    require(voxel_res >= 8 && voxel_channels >= 4, "voxel grid needs res >= 8 and channels >= 4");
    require(voxel_init_std >= 0.0, "voxel_init_std must be non-negative");
    require(map_size >= 8, "map_size must be at least 8");
    require(init_steps >= 0, "init_steps must be non-negative");
}

EpsilonSchedule TrainConfig::schedule() const {
    EpsilonSchedule s = EpsilonSchedule::for_image(map_size, map_size, eps_decay);
    if (epsilon0) s.epsilon0 = *epsilon0;
    return s;
}

double TrainConfig::epsilon_at(int epoch) const {
    return fixed_eps ? *fixed_eps : schedule_epsilon(schedule(), epoch);
}

StencilConfig TrainConfig::stencil_at(int epoch) const {
    StencilConfig s;
    s.epsilon = epsilon_at(epoch);
    s.mode = enable_m2o ? GradientMode::m2o : GradientMode::analytic_autodiff;
    s.reduction = curvature;
    return s;
}

std::string TrainConfig::to_text() const {
    std::ostringstream o;
    o << "w_d=" << fmt(w_d) << "\n"
      << "w_e=" << fmt(w_e) << "\n"
      << "w_c=" << fmt(w_c) << "\n"
      << "epochs=" << epochs << "\n"
      << "steps_per_epoch=" << steps_per_epoch << "\n"
      << "batch_near=" << batch_near << "\n"
      << "batch_uniform=" << batch_uniform << "\n"
      << "sample_sigma=" << fmt(sample_sigma) << "\n"
      << "epsilon0=" << (epsilon0 ? fmt(*epsilon0) : "auto") << "\n"
      << "eps_decay=" << fmt(eps_decay) << "\n"
      << "fixed_eps=" << (fixed_eps ? fmt(*fixed_eps) : "none") << "\n"
      << "curvature=" << (curvature == CurvatureReduction::sum_abs_axes ? "sum_abs" : "abs_laplacian") << "\n"
      << "enable_dis=" << (enable_dis ? "true" : "false") << "\n"
      << "enable_m2o=" << (enable_m2o ? "true" : "false") << "\n"
      << "adv_loss=" << (adv_mode.kind == AdvLossMode::Kind::mse ? "mse" : "bce") << "\n"
      << "adv_views=" << (adv_mode.real_views == AdvLossMode::Views::sides_only ? "sides" : "four") << "\n"
      << "dis_warmup_epochs=" << dis_warmup_epochs << "\n"
      << "adv_every=" << adv_every << "\n"
      << "render_both_sides=" << (render_both_sides ? "true" : "false") << "\n"
      << "render_w=" << render_w << "\n"
      << "render_h=" << render_h << "\n"
      << "render_max_step=" << fmt(render_max_step) << "\n"
      << "dis_hidden=" << dis_hidden << "\n"
      << "lr_field=" << fmt(lr_field) << "\n"
      << "lr_dis=" << fmt(lr_dis) << "\n"
      << "hidden=" << join_widths(hidden) << "\n"
      << "voxel_res=" << voxel_res << "\n"
      << "voxel_channels=" << voxel_channels << "\n"
      << "voxel_init_std=" << fmt(voxel_init_std) << "\n"
      << "map_size=" << map_size << "\n"
      << "init_steps=" << init_steps << "\n"
      << "lr_init=" << fmt(lr_init) << "\n"
      << "seed=" << seed << "\n";
    return o.str();
}

std::string TrainConfig::hash() const {
    TrainConfig c = *this;
    c.seed = 0;
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : c.to_text()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void set_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
    if (key == "w_d") c.w_d = parse_double(key, v);
    else if (key == "w_e") c.w_e = parse_double(key, v);
    else if (key == "w_c") c.w_c = parse_double(key, v);
    else if (key == "epochs") c.epochs = parse_int32(key, v);
    else if (key == "steps_per_epoch") c.steps_per_epoch = parse_int32(key, v);
    else if (key == "batch_near") c.batch_near = parse_int32(key, v);
    else if (key == "batch_uniform") c.batch_uniform = parse_int32(key, v);
    else if (key == "sample_sigma") c.sample_sigma = parse_double(key, v);
    else if (key == "epsilon0") c.epsilon0 = v == "auto" ? std::nullopt : std::optional(parse_double(key, v));
    else if (key == "eps_decay") c.eps_decay = parse_double(key, v);
    else if (key == "fixed_eps") c.fixed_eps = v == "none" ? std::nullopt : std::optional(parse_double(key, v));
    else if (key == "curvature") {
        if (v == "sum_abs") c.curvature = CurvatureReduction::sum_abs_axes;
        else if (v == "abs_laplacian") c.curvature = CurvatureReduction::abs_laplacian;
        else throw ConfigError(key + ": expected sum_abs or abs_laplacian");
    } else if (key == "enable_dis") c.enable_dis = parse_bool(key, v);
    else if (key == "enable_m2o") c.enable_m2o = parse_bool(key, v);
    else if (key == "adv_loss") {
        if (v == "mse") c.adv_mode.kind = AdvLossMode::Kind::mse;
        else if (v == "bce") c.adv_mode.kind = AdvLossMode::Kind::bce;
        else throw ConfigError(key + ": expected mse or bce");
    } else if (key == "adv_views") {
        if (v == "sides") c.adv_mode.real_views = AdvLossMode::Views::sides_only;
        else if (v == "four") c.adv_mode.real_views = AdvLossMode::Views::four_views;
        else throw ConfigError(key + ": expected sides or four");
    } else if (key == "dis_warmup_epochs") c.dis_warmup_epochs = parse_int32(key, v);
    else if (key == "adv_every") c.adv_every = parse_int32(key, v);
    else if (key == "render_both_sides") c.render_both_sides = parse_bool(key, v);
    else if (key == "render_w") c.render_w = parse_int32(key, v);
    else if (key == "render_h") c.render_h = parse_int32(key, v);
    else if (key == "render_max_step") c.render_max_step = parse_double(key, v);
    else if (key == "dis_hidden") c.dis_hidden = parse_int32(key, v);
    else if (key == "lr_field") c.lr_field = parse_double(key, v);
    else if (key == "lr_dis") c.lr_dis = parse_double(key, v);
    else if (key == "hidden") c.hidden = parse_widths(key, v);
    else if (key == "voxel_res") c.voxel_res = parse_int32(key, v);
    else if (key == "voxel_channels") c.voxel_channels = parse_int32(key, v);
    else if (key == "voxel_init_std") c.voxel_init_std = parse_double(key, v);
    else if (key == "map_size") c.map_size = parse_int32(key, v);
    else if (key == "init_steps") c.init_steps = parse_int32(key, v);
    else if (key == "lr_init") c.lr_init = parse_double(key, v);
    else if (key == "seed") {
        const long long s = parse_int(key, v);
        if (s < 0) throw ConfigError("seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(s);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

TrainConfig parse_config(const std::string& text, TrainConfig base, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line.erase(hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
        try {
            set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        base.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), std::move(base), path.string());
}

// ---------------------------------------------------------------------------
// Setup
// ---------------------------------------------------------------------------

PriorScene build_prior_scene(const Scene& scene, const TrainConfig& cfg) {
    if (!scene.target || !scene.prior) throw Error("scene needs a target and a prior");
    StencilConfig fine;
    fine.epsilon = 1e-4;
    const AnalyticField target(scene.target);
    PriorScene p;
    p.prior_shape = scene.prior;
    p.voxels = VoxelGrid(cfg.voxel_res, cfg.voxel_channels);
    p.front_map = raymarch_normal_map(target, ViewAngle::front(), cfg.map_size, cfg.map_size, fine);
    p.back_map = raymarch_normal_map(target, ViewAngle::back(), cfg.map_size, cfg.map_size, fine);
    p.validate();
    return p;
}

std::vector<NormalMap> render_real_pool(const Scene& scene, const TrainConfig& cfg) {
    StencilConfig fine;
    fine.epsilon = 1e-4;
    const auto views =
        cfg.adv_mode.real_views == AdvLossMode::Views::four_views ? all_views() : side_views();
    std::vector<NormalMap> pool;
    for (const SdfPtr& shape : scene.reals) {
        const AnalyticField f(shape);
        for (ViewAngle v : views) {
            pool.push_back(raymarch(f, v, cfg.render_w, cfg.render_h, fine, render_options(cfg)).map);
        }
    }
    return pool;
}

SdfField initialize_field(const Scene& scene, PriorScene prior, const TrainConfig& cfg) {
    (void)scene;
    const Rng root(cfg.seed);
    SdfField field(std::move(prior), cfg.hidden, root.fork(kStreamFieldInit), cfg.voxel_init_std);
    if (cfg.init_steps == 0 || cfg.lr_init == 0.0) return field;

    // Regress toward the prior SDF so the first renders see a plausible surface.
    const AnalyticSdf& shape = *field.scene().prior_shape;
    const Rng batches(cfg.seed, kStreamInitBatch);
    RmsProp opt;
    for (int s = 0; s < cfg.init_steps; ++s) {
        const SampleBatch b = sample_batch(shape, batches.fork(static_cast<std::uint64_t>(s)),
                                           static_cast<std::size_t>(cfg.batch_near),
                                           static_cast<std::size_t>(cfg.batch_uniform), cfg.sample_sigma);
        const FieldTape tape = field.forward(b.points);
        std::vector<double> up(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) up[i] = 2.0 * (tape.output[static_cast<Eigen::Index>(i)] - b.gt_sdf[i]) / double(b.size());
        ParamGradient g = ParamGradient::zeros_like(field);
        field.backward(tape, up, g);
        opt.step(field, g, cfg.lr_init);
    }
    return field;
}

double alignment_loss(const SdfField& field, const SampleBatch& batch) {
    if (batch.size() == 0) throw Error("alignment_loss needs a nonempty batch");
    std::vector<double> v(batch.size());
    field.eval(batch.points, v);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += (v[i] - batch.gt_sdf[i]) * (v[i] - batch.gt_sdf[i]);
    return acc / static_cast<double>(batch.size());
}

std::vector<NormalMap> FakeRenders::maps() const {
    std::vector<NormalMap> out;
    out.reserve(renders.size());
    for (const auto& r : renders) out.push_back(r.map);
    return out;
}

FakeRenders render_fakes(const SdfField& field, const std::vector<ViewAngle>& views,
                         const TrainConfig& cfg, int epoch) {
    FakeRenders f;
    const StencilConfig sc = cfg.stencil_at(epoch);
    for (ViewAngle v : views) {
        f.renders.push_back(raymarch(field, v, cfg.render_w, cfg.render_h, sc, render_options(cfg)));
    }
    return f;
}

LossResult total_loss(const SdfField& field, const Discriminator* d, const SampleBatch& batch,
                      const FakeRenders* fakes, const TrainConfig& cfg, int epoch) {
    if (batch.size() == 0) throw Error("total_loss needs a nonempty batch");
    const StencilConfig sc = cfg.stencil_at(epoch);
    const std::size_t n = batch.size();
    LossResult r;
    r.grad = ParamGradient::zeros_like(field);

    // One probe feeds all three point terms: values for L_a, derivatives for the
    // regularizers.
    const DerivativeProbe probe(field, batch.points, sc, true);
    std::vector<double> up_value(n);
    double la = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = probe.values()[i] - batch.gt_sdf[i];
        la += diff * diff;
        up_value[i] = 2.0 * diff / static_cast<double>(n);
    }
    r.parts.alignment = la / static_cast<double>(n);

    std::vector<Vec3> up_grad, up_second;
    regularizer_upstream(probe.gradients(), probe.seconds(), sc, {cfg.w_e, cfg.w_c}, up_grad, up_second,
                         r.parts.eikonal, r.parts.curvature);
    probe.backward(up_value, up_grad, up_second, r.grad);

    r.parts.total = r.parts.alignment + cfg.w_e * r.parts.eikonal + cfg.w_c * r.parts.curvature;

    if (cfg.enable_dis && d && fakes && !fakes->renders.empty()) {
        const std::vector<NormalMap> maps = fakes->maps();
        const GeneratorLoss gl = generator_adv_loss(*d, maps, cfg.adv_mode);
        r.parts.adversarial = gl.loss;
        r.parts.total += cfg.w_d * gl.loss;
        if (cfg.w_d > 0.0) {
            for (std::size_t k = 0; k < maps.size(); ++k) {
                std::vector<Vec3> up = gl.pixel_grads[k];
                for (Vec3& u : up) u *= cfg.w_d;
                raymarch_backprop(field, fakes->renders[k], up, sc, r.grad);
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

std::string TrainReport::to_csv() const {
    std::ostringstream o;
    o << "# config_hash=" << config_hash << " seed=" << seed
      << " initial_holdout_alignment=" << fmt(initial_holdout_alignment) << "\n";
    o << "epoch,epsilon,alignment,adversarial,discriminator,eikonal,curvature,total,holdout_alignment,adv_rounds\n";
    for (const EpochRecord& e : epochs) {
        o << e.epoch << ',' << fmt(e.epsilon) << ',' << fmt(e.alignment) << ',' << fmt(e.adversarial) << ','
          << fmt(e.discriminator) << ',' << fmt(e.eikonal) << ',' << fmt(e.curvature) << ',' << fmt(e.total)
          << ',' << fmt(e.holdout_alignment) << ',' << e.adv_rounds << "\n";
    }
    return o.str();
}

std::string TrainReport::timing_csv() const {
    std::ostringstream o;
    o << "# config_hash=" << config_hash << " seed=" << seed << "\n";
    o << "epoch,wall_seconds\n";
    for (const EpochRecord& e : epochs) o << e.epoch << ',' << fmt(e.wall_seconds) << "\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult train(const Scene& scene, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    return train(scene, build_prior_scene(scene, cfg), cfg, on_epoch);
}

TrainResult train(const Scene& scene, PriorScene prior, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (!scene.target) throw Error("scene has no target");

    TrainResult out{initialize_field(scene, std::move(prior), cfg),
                    Discriminator(Rng(cfg.seed, kStreamDiscriminator), cfg.dis_hidden), {}};
    SdfField& field = out.field;
    Discriminator& d = out.discriminator;
    TrainReport& report = out.report;
    report.config_hash = cfg.hash();
    report.seed = cfg.seed;

    const SampleBatch holdout = holdout_batch(scene, cfg);
    report.initial_holdout_alignment = alignment_loss(field, holdout);

    std::vector<NormalMap> reals;
    if (cfg.enable_dis && cfg.epochs > cfg.dis_warmup_epochs) {
        reals = render_real_pool(scene, cfg);
        if (reals.empty()) throw Error("adversarial training needs at least one real shape in the scene");
    }

    const Rng batches(cfg.seed, kStreamTrainBatch);
    RmsProp opt;
    std::uint64_t step = 0, round = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.epsilon = cfg.epsilon_at(epoch);
        const bool adv_epoch = cfg.enable_dis && epoch >= cfg.dis_warmup_epochs;
        for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
            const SampleBatch batch = sample_batch(*scene.target, batches.fork(step),
                                                   static_cast<std::size_t>(cfg.batch_near),
                                                   static_cast<std::size_t>(cfg.batch_uniform), cfg.sample_sigma);
            const bool adv_round = adv_epoch && s % cfg.adv_every == 0;
            FakeRenders fakes;
            if (adv_round) fakes = render_fakes(field, views_for_round(cfg, round), cfg, epoch);

            LossResult lr = total_loss(field, adv_round ? &d : nullptr, batch, adv_round ? &fakes : nullptr, cfg, epoch);
            if (!std::isfinite(lr.parts.total) || !lr.grad.all_finite()) {
                throw DivergenceDetected("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                             std::to_string(s),
                                         report);
            }
            opt.step(field, lr.grad, cfg.lr_field);

            rec.alignment += lr.parts.alignment;
            rec.eikonal += lr.parts.eikonal;
            rec.curvature += lr.parts.curvature;
            rec.total += lr.parts.total;
            if (adv_round) {
                const std::vector<NormalMap> maps = fakes.maps();
                const double dl = discriminator_step(d, maps, reals, cfg.adv_mode, cfg.lr_dis);
                if (!std::isfinite(dl)) {
                    throw DivergenceDetected("non-finite discriminator loss at epoch " + std::to_string(epoch), report);
                }
                rec.adversarial += lr.parts.adversarial;
                rec.discriminator += dl;
                ++rec.adv_rounds;
                ++round;
            }
        }
        const double inv = 1.0 / cfg.steps_per_epoch;
        rec.alignment *= inv;
        rec.eikonal *= inv;
        rec.curvature *= inv;
        rec.total *= inv;
        if (rec.adv_rounds) {
            rec.adversarial /= rec.adv_rounds;
            rec.discriminator /= rec.adv_rounds;
        }
        rec.holdout_alignment = alignment_loss(field, holdout);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return out;
}

}  // namespace sidefit
