#include "sidefit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "sidefit/checkpoint.hpp"

namespace sidefit {

namespace {

namespace fs = std::filesystem;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string seed_list(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? ";" : "") + std::to_string(seeds[i]);
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
    if (!f) throw Error("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

std::string yaw_tag(int yaw) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%03d", yaw);
    return buf;
}

std::string metrics_csv_header() { return "status,resolution," + MetricReport::csv_header(); }

std::string empty_metric_cells() {
    const std::string h = MetricReport::csv_header();
    return std::string(static_cast<std::size_t>(std::count(h.begin(), h.end(), ',')), ',');
}

// Scene, config and checkpoint problems are input errors, not runtime failures.
int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SceneParseError*>(&e) ||
        dynamic_cast<const CheckpointError*>(&e)) {
        return kExitUsage;
    }
    return kExitRuntime;
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::wo_dis: return "w/o_dis";
        case Variant::wo_m2o: return "w/o_m2o";
        case Variant::fixed_eps: return "fixed_eps";
        case Variant::four_views: return "four_views";
        case Variant::bce_loss: return "bce_loss";
    }
    return "?";
}

Variant parse_variant(const std::string& name) {
    if (name == "full") return Variant::full;
    if (name == "w/o_dis" || name == "wo_dis") return Variant::wo_dis;
    if (name == "w/o_m2o" || name == "wo_m2o") return Variant::wo_m2o;
    if (name == "fixed_eps") return Variant::fixed_eps;
    if (name == "four_views") return Variant::four_views;
    if (name == "bce_loss") return Variant::bce_loss;
    throw ConfigError("unknown variant '" + name + "'");
}

TrainConfig apply_variant(TrainConfig c, Variant v) {
    switch (v) {
        case Variant::full: break;
        case Variant::wo_dis: c.enable_dis = false; break;
        case Variant::wo_m2o: c.enable_m2o = false; break;
        case Variant::fixed_eps: c.fixed_eps = c.schedule().epsilon0; break;
        case Variant::four_views: c.adv_mode.real_views = AdvLossMode::Views::four_views; break;
        case Variant::bce_loss: c.adv_mode.kind = AdvLossMode::Kind::bce; break;
    }
    return c;
}

std::vector<ViewAngle> parse_views(const std::string& text) {
    if (text == "four" || text == "all") return all_views();
    if (text == "sides") return side_views();
    std::vector<ViewAngle> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const int yaw = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.emplace_back(yaw);
        } catch (const std::exception&) {
            throw ConfigError("--views: expected four, sides, or yaws from {0,90,180,270}, got '" + text + "'");
        }
    }
    if (out.empty()) throw ConfigError("--views: no views given");
    return out;
}

MetricReport evaluate_field(const SdfField& field, const Scene& scene, int resolution, const MetricOptions& opts,
                            const Rng& rng) {
    const TriangleMesh recon = marching_cubes(field, resolution);
    const TriangleMesh truth = ground_truth_mesh(scene.target);
    return evaluate_meshes(recon, truth, opts, rng);
}

RunOutcome run_variant(const Scene& scene, const TrainConfig& base, Variant v, std::uint64_t seed,
                       int mesh_resolution, const MetricOptions& opts, std::ostream* log) {
    TrainConfig cfg = apply_variant(base, v);
    cfg.seed = seed;
    RunOutcome r;
    try {
        TrainResult t = train(scene, cfg);
        r.report = t.report;
        r.metrics = evaluate_field(t.field, scene, mesh_resolution, opts, Rng(seed));
        r.ok = true;
    } catch (const DivergenceDetected& e) {
        r.report = e.report;
        r.failure = std::string("DivergenceDetected: ") + e.what();
    } catch (const EmptySurface& e) {
        r.failure = std::string("EmptySurface: ") + e.what();
    } catch (const EmptyMesh& e) {
        r.failure = std::string("EmptySurface: ") + e.what();
    }
    if (log) {
        *log << variant_name(v) << " seed " << seed << ": "
             << (r.ok ? "chamfer " + num(r.metrics.chamfer) + ", side normal error " +
                            num(r.metrics.normal_error_side)
                      : r.failure)
             << std::endl;
    }
    return r;
}

std::vector<AblationRow> run_ablation(const Scene& scene, const ExperimentSpec& spec, std::ostream* log) {
    std::vector<AblationRow> rows;
    for (Variant v : spec.variants) {
        AblationRow row;
        row.variant = v;
        row.config_hash = apply_variant(spec.config, v).hash();
        for (std::uint64_t seed : spec.seeds) {
            RunOutcome r = run_variant(scene, spec.config, v, seed, spec.mesh_resolution, spec.metrics, log);
            if (r.ok) {
                ++row.runs_ok;
                row.mean.chamfer += r.metrics.chamfer;
                row.mean.p2s += r.metrics.p2s;
                row.mean.normal_error += r.metrics.normal_error;
                row.mean.normal_error_side += r.metrics.normal_error_side;
                row.mean.normal_error_intersection += r.metrics.normal_error_intersection;
                row.mean.normal_error_side_intersection += r.metrics.normal_error_side_intersection;
            } else {
                ++row.runs_failed;
            }
            row.runs.emplace_back(seed, std::move(r));
        }
        if (row.runs_ok) {
            const double inv = 1.0 / row.runs_ok;
            row.mean.chamfer *= inv;
            row.mean.p2s *= inv;
            row.mean.normal_error *= inv;
            row.mean.normal_error_side *= inv;
            row.mean.normal_error_intersection *= inv;
            row.mean.normal_error_side_intersection *= inv;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const TrainConfig& base,
                         const std::vector<std::uint64_t>& seeds) {
    std::ostringstream o;
    o << "# config_hash=" << base.hash() << " seeds=" << seed_list(seeds) << "\n";
    o << "variant,config_hash,runs_ok,runs_failed," << MetricReport::csv_header() << "\n";
    for (const AblationRow& r : rows) {
        o << variant_name(r.variant) << ',' << r.config_hash << ',' << r.runs_ok << ',' << r.runs_failed << ','
          << (r.runs_ok ? r.mean.csv_row() : empty_metric_cells()) << "\n";
    }
    return o.str();
}

std::string ablation_runs_csv(const std::vector<AblationRow>& rows, const TrainConfig& base,
                              const std::vector<std::uint64_t>& seeds) {
    std::ostringstream o;
    o << "# config_hash=" << base.hash() << " seeds=" << seed_list(seeds) << "\n";
    o << "variant,seed,status," << MetricReport::csv_header() << "\n";
    for (const AblationRow& r : rows) {
        for (const auto& [seed, run] : r.runs) {
            o << variant_name(r.variant) << ',' << seed << ',';
            if (run.ok) {
                o << "ok," << run.metrics.csv_row();
            } else {
                std::string what = run.failure.substr(0, run.failure.find(':'));
                o << what << ',' << empty_metric_cells();
            }
            o << "\n";
        }
    }
    return o.str();
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_fit(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
    try {
        const Scene scene = load_scene(spec.scene_path);
        TrainConfig cfg = spec.config;
        cfg.seed = spec.seeds.empty() ? cfg.seed : spec.seeds.front();
        cfg.validate();
        ensure_dir(spec.out_dir);
        write_text(spec.out_dir / "config.txt", cfg.to_text());

        out << "fit " << scene.name << ": " << cfg.epochs << " epochs, seed " << cfg.seed << ", config " << cfg.hash()
            << std::endl;
        TrainResult result = [&] {
            try {
                return train(scene, cfg, [&](const EpochRecord& e) {
                    out << "epoch " << e.epoch << "  eps " << num(e.epsilon) << "  L_a " << num(e.alignment)
                        << "  holdout " << num(e.holdout_alignment) << "  total " << num(e.total) << "  ("
                        << num(e.wall_seconds) << " s)" << std::endl;
                });
            } catch (const DivergenceDetected& e) {
                write_text(spec.out_dir / "report.csv", e.report.to_csv());
                throw;
            }
        }();

        write_text(spec.out_dir / "report.csv", result.report.to_csv());
        write_text(spec.out_dir / "timing.csv", result.report.timing_csv());
        write_checkpoint(spec.out_dir / "checkpoint.sfck",
                         make_checkpoint(result.field, &result.discriminator.layers, cfg.to_text()));

        const StencilConfig sc = cfg.stencil_at(std::max(cfg.epochs - 1, 0));
        for (ViewAngle v : spec.metrics.views) {
            const NormalMap map = raymarch_normal_map(result.field, v, cfg.map_size, cfg.map_size, sc);
            write_pfm(map, spec.out_dir / ("normals_" + yaw_tag(v.yaw()) + ".pfm"));
            write_ppm(map, spec.out_dir / ("normals_" + yaw_tag(v.yaw()) + ".ppm"));
        }

        try {
            const TriangleMesh mesh = marching_cubes(result.field, spec.mesh_resolution);
            write_obj(mesh, spec.out_dir / "mesh.obj");
        } catch (const EmptySurface& e) {
            err << "fit: no surface to export (" << e.what() << ")" << std::endl;
            return kExitRuntime;
        }
        out << "wrote " << spec.out_dir.string() << std::endl;
        return kExitOk;
    } catch (const DivergenceDetected& e) {
        err << "fit: training diverged: " << e.what() << std::endl;
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "fit: " << e.what() << std::endl;
        return exit_code_for(e);
    }
}

int cmd_eval(const EvalSpec& spec, std::ostream& out, std::ostream& err) {
    try {
        const Checkpoint ckpt = read_checkpoint(spec.checkpoint);
        const TrainConfig cfg = parse_config(ckpt.config_text, {}, spec.checkpoint.string() + "[CFG0]");
        const Scene scene = load_scene(spec.scene_path);
        const SdfField field = restore_field(ckpt, build_prior_scene(scene, cfg));
        const std::uint64_t seed = spec.seed.value_or(cfg.seed);
        ensure_dir(spec.out_dir);

        std::ostringstream csv;
        csv << "# config_hash=" << cfg.hash() << " seed=" << seed << "\n" << metrics_csv_header() << "\n";
        int code = kExitOk;
        std::string text;
        try {
            const MetricReport m = evaluate_field(field, scene, spec.resolution, spec.metrics, Rng(seed));
            csv << "ok," << spec.resolution << ',' << m.csv_row() << "\n";
            text = m.to_text();
        } catch (const EmptySurface& e) {
            csv << "EmptySurface," << spec.resolution << ',' << empty_metric_cells() << "\n";
            text = std::string("EmptySurface: ") + e.what() + "\n";
            err << "eval: " << e.what() << std::endl;
            code = kExitRuntime;
        }
        write_text(spec.out_dir / "metrics.csv", csv.str());
        write_text(spec.out_dir / "metrics.txt", "scene " + scene.name + ", resolution " +
                                                     std::to_string(spec.resolution) + ", seed " +
                                                     std::to_string(seed) + "\n" + text);
        out << text;
        return code;
    } catch (const std::exception& e) {
        err << "eval: " << e.what() << std::endl;
        return exit_code_for(e);
    }
}

int cmd_ablate(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
    try {
        if (spec.variants.size() < 2) throw ConfigError("ablate needs at least two variants");
        if (spec.seeds.empty()) throw ConfigError("ablate needs at least one seed");
        const Scene scene = load_scene(spec.scene_path);
        spec.config.validate();
        ensure_dir(spec.out_dir);
        const auto rows = run_ablation(scene, spec, &out);
        write_text(spec.out_dir / "ablation.csv", ablation_csv(rows, spec.config, spec.seeds));
        write_text(spec.out_dir / "ablation_runs.csv", ablation_runs_csv(rows, spec.config, spec.seeds));
        out << ablation_csv(rows, spec.config, spec.seeds);
        return kExitOk;
    } catch (const std::exception& e) {
        err << "ablate: " << e.what() << std::endl;
        return exit_code_for(e);
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Signed-distance reconstruction from front/back normal maps", "sidefit"};
    app.require_subcommand(1);

    std::string scene_path, config_path, out_dir = "out", views = "four", checkpoint, variants = "full,w/o_dis";
    std::vector<std::uint64_t> seeds;
    int res = 128;

    auto* fit = app.add_subcommand("fit", "train a field on a scene");
    fit->add_option("scene", scene_path, "scene file")->required();

    auto* eval = app.add_subcommand("eval", "score a checkpoint against the scene target");
    eval->add_option("checkpoint", checkpoint, "checkpoint written by fit")->required();
    eval->add_option("scene", scene_path, "scene file")->required();

    auto* ablate = app.add_subcommand("ablate", "train and score several variants over shared seeds");
    ablate->add_option("scene", scene_path, "scene file")->required();
    ablate->add_option("--variants", variants, "comma list of full, w/o_dis, w/o_m2o, fixed_eps, four_views, bce_loss")
        ->capture_default_str();

    for (CLI::App* sub : {fit, eval, ablate}) {
        sub->add_option("--out", out_dir, "output directory")->capture_default_str();
        sub->add_option("--res", res, "marching cubes resolution")->capture_default_str()->check(CLI::Range(8, 512));
        sub->add_option("--views", views, "four, sides, or yaws such as 0,90")->capture_default_str();
        sub->add_option("--seed", seeds, "seed (ablate accepts a comma list)")->delimiter(',');
    }
    fit->add_option("--config", config_path, "key=value config file");
    ablate->add_option("--config", config_path, "key=value config file");

    // CLI11 takes the arguments without the program name, in reverse order.
    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(rest);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        ExperimentSpec spec;
        spec.scene_path = scene_path;
        spec.out_dir = out_dir;
        spec.mesh_resolution = res;
        spec.metrics.views = parse_views(views);
        if (!config_path.empty()) spec.config = load_config(config_path);
        if (!seeds.empty()) {
            spec.seeds = seeds;
        } else {
            spec.seeds = {spec.config.seed};
        }

        if (fit->parsed()) {
            if (seeds.size() > 1) throw ConfigError("fit takes a single --seed");
            return cmd_fit(spec, out, err);
        }
        if (eval->parsed()) {
            if (seeds.size() > 1) throw ConfigError("eval takes a single --seed");
            EvalSpec e;
            e.checkpoint = checkpoint;
            e.scene_path = scene_path;
            e.out_dir = out_dir;
            e.resolution = res;
            e.metrics = spec.metrics;
            if (!seeds.empty()) e.seed = seeds.front();
            return cmd_eval(e, out, err);
        }
        spec.variants.clear();
        std::stringstream ss(variants);
        std::string item;
        while (std::getline(ss, item, ',')) spec.variants.push_back(parse_variant(item));
        return cmd_ablate(spec, out, err);
    } catch (const std::exception& e) {
        err << app.get_subcommands().front()->get_name() << ": " << e.what() << std::endl;
        return exit_code_for(e);
    }
}

}  // namespace sidefit
