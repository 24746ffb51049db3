#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sidefit/geom.hpp"

namespace sidefit {

/// Canonical orthographic view around the vertical (+y) axis; 0 is the front view
/// looking down -z, 90 looks from +x.
class ViewAngle {
public:
    constexpr ViewAngle() = default;
    explicit ViewAngle(int yaw_degrees);

    int yaw() const { return yaw_; }

    /// View-space basis expressed in world coordinates. `toward_camera` is view +z.
    Vec3 right() const;
    Vec3 up() const { return Vec3::UnitY(); }
    Vec3 toward_camera() const;

    Vec3 world_to_view(const Vec3& v) const;
    Vec3 view_to_world(const Vec3& v) const;

    static ViewAngle front() { return ViewAngle(0); }
    static ViewAngle back() { return ViewAngle(180); }
    static ViewAngle left() { return ViewAngle(90); }
    static ViewAngle right_side() { return ViewAngle(270); }

    friend bool operator==(ViewAngle a, ViewAngle b) { return a.yaw_ == b.yaw_; }

private:
    int yaw_ = 0;
};

std::vector<ViewAngle> side_views();
std::vector<ViewAngle> all_views();

/// H x W view-space normals with a foreground mask. Row 0 is the top of the image.
/// Pixel (i, j) samples the view plane at u = -1 + (i + 0.5) 2/W, v = 1 - (j + 0.5) 2/H.
struct NormalMap {
    int width = 0;
    int height = 0;
    std::vector<Vec3> normals;
    std::vector<std::uint8_t> mask;

    NormalMap() = default;
    NormalMap(int w, int h);

    std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * width + i; }
    const Vec3& at(int i, int j) const { return normals[index(i, j)]; }
    bool fg(int i, int j) const { return mask[index(i, j)] != 0; }

    double pixel_u(int i) const { return -1.0 + (i + 0.5) * 2.0 / width; }
    double pixel_v(int j) const { return 1.0 - (j + 0.5) * 2.0 / height; }

    std::size_t foreground_count() const;
    void set(int i, int j, const Vec3& n);
    void clear(int i, int j);
};

/// Unit foreground normals (within tol) and exactly-zero background.
bool satisfies_unit_invariant(const NormalMap& map, double tol = 1e-4);

/// Bilinear lookup of `map` at view-plane coordinates (u, v), restricted to
/// foreground pixels. Returns false (and zeroes the outputs) when the pixel containing
/// (u, v) is background. d_du / d_dv receive the partial derivatives of the value.
bool sample_bilinear(const NormalMap& map, double u, double v, Vec3& value, Vec3* d_du = nullptr,
                     Vec3* d_dv = nullptr);

/// Portable float map, 3 channels, little-endian, bottom row first.
void write_pfm(const NormalMap& map, const std::filesystem::path& path);
/// Reads a file produced by write_pfm; pixels with a zero vector are background.
NormalMap read_pfm(const std::filesystem::path& path);
/// 8-bit preview with n -> (n + 1) / 2 * 255.
void write_ppm(const NormalMap& map, const std::filesystem::path& path);

}  // namespace sidefit
