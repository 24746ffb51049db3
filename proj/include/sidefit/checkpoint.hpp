#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sidefit/field.hpp"

namespace sidefit {

class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Binary container, little-endian:
///   "SFCK" | u32 version | u32 section count | sections...
///   section = 4-byte tag | u64 payload length | payload
/// Tags: "FLD0" field layers + voxel grid, "DIS0" discriminator layers, "CFG0" config text.
/// Layer list payload: u32 count, then per layer u32 rows, u32 cols, rows*cols f64
/// (row-major), rows f64 bias. Voxel payload: u32 G, u32 F, G^3*F f64.
struct Checkpoint {
    std::vector<DenseLayer> field_layers;
    VoxelGrid voxels;
    std::optional<std::vector<DenseLayer>> discriminator_layers;
    std::string config_text;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint make_checkpoint(const SdfField& field, const std::vector<DenseLayer>* discriminator,
                           std::string config_text);

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Rebuilds a field over `scene` (its voxel grid is replaced by the stored one).
SdfField restore_field(const Checkpoint& ckpt, PriorScene scene);

}  // namespace sidefit
