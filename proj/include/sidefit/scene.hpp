#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sidefit/geom.hpp"

namespace sidefit {

class SceneParseError : public Error {
public:
    using Error::Error;
};

/// A reconstruction problem: the shape to recover, the coarse prior it is conditioned
/// on, and the held-out shapes whose side views serve as "real" discriminator inputs.
/// All shapes are already expressed in domain coordinates.
struct Scene {
    std::string name;
    SdfPtr target;
    SdfPtr prior;
    std::vector<SdfPtr> reals;
};

/// Parses the line-based scene format described in docs/scene-format.md.
/// `source` is used in error messages only.
Scene parse_scene(const std::string& text, const std::string& source = "<string>");
Scene load_scene(const std::filesystem::path& path);

/// Capsule-person target (variant 0, clothed), unclothed prior, clothed variants 1..4
/// as the real pool.
Scene capsule_person_scene();

}  // namespace sidefit
