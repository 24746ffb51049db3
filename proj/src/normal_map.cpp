#include "sidefit/normal_map.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sidefit {

ViewAngle::ViewAngle(int yaw_degrees) : yaw_(yaw_degrees) {
    if (yaw_ != 0 && yaw_ != 90 && yaw_ != 180 && yaw_ != 270) {
        throw Error("view yaw must be one of 0, 90, 180, 270");
    }
}

Vec3 ViewAngle::toward_camera() const {
    switch (yaw_) {
        case 90: return Vec3::UnitX();
        case 180: return -Vec3::UnitZ();
        case 270: return -Vec3::UnitX();
        default: return Vec3::UnitZ();
    }
}

Vec3 ViewAngle::right() const {
    // right = up x toward_camera
    return up().cross(toward_camera());
}

Vec3 ViewAngle::world_to_view(const Vec3& v) const {
    return {v.dot(right()), v.dot(up()), v.dot(toward_camera())};
}

Vec3 ViewAngle::view_to_world(const Vec3& v) const {
    return v.x() * right() + v.y() * up() + v.z() * toward_camera();
}

std::vector<ViewAngle> side_views() {
    return {ViewAngle(90), ViewAngle(270)};
}

std::vector<ViewAngle> all_views() {
    return {ViewAngle(0), ViewAngle(90), ViewAngle(180), ViewAngle(270)};
}

NormalMap::NormalMap(int w, int h)
    : width(w), height(h), normals(static_cast<std::size_t>(w) * h, Vec3::Zero()),
      mask(static_cast<std::size_t>(w) * h, 0) {
    if (w <= 0 || h <= 0) throw Error("normal map dimensions must be positive");
}

std::size_t NormalMap::foreground_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

void NormalMap::set(int i, int j, const Vec3& n) {
    normals[index(i, j)] = n;
    mask[index(i, j)] = 1;
}

void NormalMap::clear(int i, int j) {
    normals[index(i, j)] = Vec3::Zero();
    mask[index(i, j)] = 0;
}

bool satisfies_unit_invariant(const NormalMap& map, double tol) {
    for (std::size_t k = 0; k < map.normals.size(); ++k) {
        if (map.mask[k]) {
            if (std::abs(map.normals[k].norm() - 1.0) > tol) return false;
        } else if (map.normals[k] != Vec3::Zero()) {
            return false;
        }
    }
    return true;
}

bool sample_bilinear(const NormalMap& map, double u, double v, Vec3& value, Vec3* d_du,
                     Vec3* d_dv) {
    value.setZero();
    if (d_du) d_du->setZero();
    if (d_dv) d_dv->setZero();

    // Continuous pixel coordinates; pixel centers sit at integer + 0.5.
    const double px = (u + 1.0) * 0.5 * map.width;
    const double py = (1.0 - v) * 0.5 * map.height;
    const int ci = std::clamp(static_cast<int>(std::floor(px)), 0, map.width - 1);
    const int cj = std::clamp(static_cast<int>(std::floor(py)), 0, map.height - 1);
    if (!map.fg(ci, cj)) return false;

    const double fx = px - 0.5;
    const double fy = py - 0.5;
    const int i0 = static_cast<int>(std::floor(fx));
    const int j0 = static_cast<int>(std::floor(fy));
    const double tx = fx - i0;
    const double ty = fy - j0;
    const double dpx_du = 0.5 * map.width;
    const double dpy_dv = -0.5 * map.height;

    Vec3 num = Vec3::Zero(), num_dx = Vec3::Zero(), num_dy = Vec3::Zero();
    double den = 0.0, den_dx = 0.0, den_dy = 0.0;
    for (int dj = 0; dj < 2; ++dj) {
        for (int di = 0; di < 2; ++di) {
            const int i = i0 + di;
            const int j = j0 + dj;
            if (i < 0 || j < 0 || i >= map.width || j >= map.height || !map.fg(i, j)) continue;
            const double wx = di ? tx : 1.0 - tx;
            const double wy = dj ? ty : 1.0 - ty;
            const double dwx = di ? 1.0 : -1.0;
            const double dwy = dj ? 1.0 : -1.0;
            const Vec3& n = map.at(i, j);
            num += wx * wy * n;
            num_dx += dwx * wy * n;
            num_dy += wx * dwy * n;
            den += wx * wy;
            den_dx += dwx * wy;
            den_dy += wx * dwy;
        }
    }
    if (den <= 1e-12) {
        value = map.at(ci, cj);
        return true;
    }
    value = num / den;
    if (d_du) *d_du = (num_dx * den - num * den_dx) / (den * den) * dpx_du;
    if (d_dv) *d_dv = (num_dy * den - num * den_dy) / (den * den) * dpy_dv;
    return true;
}

namespace {

void write_le_float(std::ostream& os, float f) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), 4);
}

float read_float(std::istream& is, bool little) {
    std::uint32_t bits = 0;
    is.read(reinterpret_cast<char*>(&bits), 4);
    const bool native_little = std::endian::native == std::endian::little;
    if (little != native_little) bits = __builtin_bswap32(bits);
    return std::bit_cast<float>(bits);
}

}  // namespace

void write_pfm(const NormalMap& map, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os << "PF\n" << map.width << ' ' << map.height << "\n-1.0\n";
    for (int j = map.height - 1; j >= 0; --j) {
        for (int i = 0; i < map.width; ++i) {
            const Vec3& n = map.at(i, j);
            for (int c = 0; c < 3; ++c) write_le_float(os, static_cast<float>(n[c]));
        }
    }
    if (!os) throw Error("failed writing " + path.string());
}

NormalMap read_pfm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    is >> magic >> w >> h >> scale;
    is.get();
    if (magic != "PF" || w <= 0 || h <= 0) throw Error("not a 3-channel PFM: " + path.string());
    NormalMap map(w, h);
    const bool little = scale < 0.0;
    for (int j = h - 1; j >= 0; --j) {
        for (int i = 0; i < w; ++i) {
            Vec3 n;
            for (int c = 0; c < 3; ++c) n[c] = read_float(is, little);
            if (n != Vec3::Zero()) map.set(i, j, n);
        }
    }
    if (!is) throw Error("truncated PFM: " + path.string());
    return map;
}

void write_ppm(const NormalMap& map, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os << "P6\n" << map.width << ' ' << map.height << "\n255\n";
    for (int j = 0; j < map.height; ++j) {
        for (int i = 0; i < map.width; ++i) {
            const Vec3& n = map.at(i, j);
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp((n[c] + 1.0) * 0.5 * 255.0, 0.0, 255.0);
                os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
            }
        }
    }
    if (!os) throw Error("failed writing " + path.string());
}

}  // namespace sidefit
