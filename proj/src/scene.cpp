#include "sidefit/scene.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace sidefit {

namespace {

struct RoleSpec {
    std::vector<SdfPtr> parts;
    double blend_k = 0.0;  // 0: hard union
    int line = 0;
};

SdfPtr combine(const RoleSpec& r) {
    if (r.parts.size() == 1) return r.parts.front();
    if (r.blend_k > 0.0) return make_smooth_union(r.parts, r.blend_k);
    return make_union(r.parts);
}

SdfPtr default_prior(const AnalyticSdf& target) {
    // Crude stand-in when the file has no prior: a sphere filling the target's bounds.
    const Aabb b = target.bounds();
    return make_sphere(b.center(), 0.5 * b.extent().minCoeff());
}

}  // namespace

Scene parse_scene(const std::string& text, const std::string& source) {
    std::map<std::string, RoleSpec> roles;
    std::vector<std::string> order;
    std::string name;
    bool normalize = true;
    double margin = 0.1;

    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw SceneParseError(source + ":" + std::to_string(lineno) + ": " + msg);
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string head;
        if (!(ls >> head)) continue;

        std::vector<double> nums;
        std::string kind;
        auto read_rest = [&] {
            std::string tok;
            while (ls >> tok) {
                try {
                    std::size_t used = 0;
                    nums.push_back(std::stod(tok, &used));
                    if (used != tok.size()) throw std::invalid_argument(tok);
                } catch (const std::exception&) {
                    fail("expected a number, got '" + tok + "'");
                }
            }
        };
        auto need = [&](std::size_t n) {
            if (nums.size() != n) {
                fail(kind + " takes " + std::to_string(n) + " numbers, got " + std::to_string(nums.size()));
            }
        };

        if (head == "name") {
            if (!(ls >> name)) fail("name needs a value");
            continue;
        }
        if (head == "normalize") {
            std::string v;
            ls >> v;
            if (v == "on") normalize = true;
            else if (v == "off") normalize = false;
            else fail("normalize expects on|off");
            continue;
        }
        if (head == "margin") {
            read_rest();
            kind = "margin";
            need(1);
            margin = nums[0];
            if (!(margin >= 0.0 && margin < 1.0)) fail("margin must lie in [0, 1)");
            continue;
        }
        if (head != "target" && head != "prior" && head.rfind("real.", 0) != 0) {
            fail("unknown directive '" + head + "'");
        }
        if (head.rfind("real.", 0) == 0 && head.size() == 5) fail("real role needs an id");
        if (!(ls >> kind)) fail("missing primitive kind");
        read_rest();

        auto [it, inserted] = roles.try_emplace(head);
        if (inserted) {
            order.push_back(head);
            it->second.line = lineno;
        }
        RoleSpec& role = it->second;
        try {
            if (kind == "sphere") {
                need(4);
                role.parts.push_back(make_sphere({nums[0], nums[1], nums[2]}, nums[3]));
            } else if (kind == "capsule") {
                need(7);
                role.parts.push_back(make_capsule({nums[0], nums[1], nums[2]}, {nums[3], nums[4], nums[5]}, nums[6]));
            } else if (kind == "box") {
                need(6);
                role.parts.push_back(make_box({nums[0], nums[1], nums[2]}, {nums[3], nums[4], nums[5]}));
            } else if (kind == "torus") {
                need(5);
                role.parts.push_back(make_torus({nums[0], nums[1], nums[2]}, nums[3], nums[4]));
            } else if (kind == "person") {
                need(2);
                role.parts.push_back(capsule_person(static_cast<int>(nums[0]), nums[1] != 0.0));
            } else if (kind == "blend") {
                need(1);
                if (!(nums[0] > 0.0)) fail("blend k must be positive");
                role.blend_k = nums[0];
            } else {
                fail("unknown primitive '" + kind + "'");
            }
        } catch (const SceneParseError&) {
            throw;
        } catch (const Error& e) {
            fail(e.what());
        }
    }

    if (!roles.count("target") || roles["target"].parts.empty()) {
        throw SceneParseError(source + ": scene has no target");
    }
    Scene scene;
    scene.name = name.empty() ? "scene" : name;
    SdfPtr target = combine(roles["target"]);
    SdfPtr prior = roles.count("prior") && !roles["prior"].parts.empty() ? combine(roles["prior"])
                                                                         : default_prior(*target);
    if (normalize) {
        // The prior shares the target's frame; each real shape is fitted on its own.
        const DomainFit fit = fit_to_domain(target->bounds(), margin);
        target = fit.apply(target);
        prior = fit.apply(prior);
    }
    scene.target = target;
    scene.prior = prior;
    for (const std::string& role : order) {
        if (role.rfind("real.", 0) != 0) continue;
        const RoleSpec& r = roles[role];
        if (r.parts.empty()) {
            throw SceneParseError(source + ":" + std::to_string(r.line) + ": role " + role + " has no primitives");
        }
        SdfPtr s = combine(r);
        if (normalize) s = fit_to_domain(s->bounds(), margin).apply(s);
        scene.reals.push_back(std::move(s));
    }
    return scene;
}

Scene load_scene(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw SceneParseError("cannot open scene file " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_scene(ss.str(), path.string());
}

Scene capsule_person_scene() {
    return parse_scene(
        "name capsule_person\n"
        "target person 0 1\n"
        "prior person 0 0\n"
        "real.1 person 1 1\n"
        "real.2 person 2 1\n"
        "real.3 person 3 1\n"
        "real.4 person 4 1\n",
        "<builtin:capsule_person>");
}

}  // namespace sidefit
