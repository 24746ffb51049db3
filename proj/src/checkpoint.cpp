#include "sidefit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sidefit {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

namespace {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        out.insert(out.end(), c, c + n);
    }
    template <class T>
    void pod(T v) {
        bytes(&v, sizeof v);
    }

    std::vector<char> out;
};

class Reader {
public:
    Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

    void bytes(void* dst, std::size_t n) {
        if (static_cast<std::size_t>(end_ - p_) < n) throw CheckpointError("checkpoint truncated");
        std::memcpy(dst, p_, n);
        p_ += n;
    }
    template <class T>
    T pod() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }
    bool done() const { return p_ == end_; }

private:
    const char* p_;
    const char* end_;
};

void put_layers(Writer& w, const std::vector<DenseLayer>& layers) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
    for (const DenseLayer& l : layers) {
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(l.weight.rows()));
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(l.weight.cols()));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.pod<double>(l.weight(r, c));
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) w.pod<double>(l.bias[r]);
    }
}

std::vector<DenseLayer> get_layers(Reader& r) {
    const auto count = r.pod<std::uint32_t>();
    if (count > 64) throw CheckpointError("implausible layer count");
    std::vector<DenseLayer> layers(count);
    for (DenseLayer& l : layers) {
        const auto rows = r.pod<std::uint32_t>();
        const auto cols = r.pod<std::uint32_t>();
        if (rows == 0 || cols == 0 || rows > 1u << 16 || cols > 1u << 16) {
            throw CheckpointError("implausible layer shape");
        }
        l.weight.resize(rows, cols);
        l.bias.resize(rows);
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
            for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = r.pod<double>();
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = r.pod<double>();
    }
    for (std::size_t i = 1; i < layers.size(); ++i) {
        if (layers[i].weight.cols() != layers[i - 1].weight.rows()) {
            throw CheckpointError("layer shapes do not chain");
        }
    }
    return layers;
}

}  // namespace

Checkpoint make_checkpoint(const SdfField& field, const std::vector<DenseLayer>* discriminator,
                           std::string config_text) {
    Checkpoint c;
    c.field_layers = field.layers();
    c.voxels = field.scene().voxels;
    if (discriminator) c.discriminator_layers = *discriminator;
    c.config_text = std::move(config_text);
    return c;
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::pair<const char*, std::vector<char>>> sections;

    Writer fld;
    put_layers(fld, ckpt.field_layers);
    fld.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.voxels.resolution));
    fld.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.voxels.channels));
    fld.bytes(ckpt.voxels.values.data(), ckpt.voxels.values.size() * sizeof(double));
    sections.emplace_back("FLD0", std::move(fld.out));

    if (ckpt.discriminator_layers) {
        Writer dis;
        put_layers(dis, *ckpt.discriminator_layers);
        sections.emplace_back("DIS0", std::move(dis.out));
    }
    if (!ckpt.config_text.empty()) {
        sections.emplace_back("CFG0", std::vector<char>(ckpt.config_text.begin(), ckpt.config_text.end()));
    }

    Writer w;
    w.bytes("SFCK", 4);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(sections.size()));
    for (const auto& [tag, payload] : sections) {
        w.bytes(tag, 4);
        w.pod<std::uint64_t>(payload.size());
        w.bytes(payload.data(), payload.size());
    }
    return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
    Reader r(bytes.data(), bytes.size());
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "SFCK", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.pod<std::uint32_t>();
    Checkpoint c;
    bool have_field = false;
    for (std::uint32_t s = 0; s < count; ++s) {
        char tag[4];
        r.bytes(tag, 4);
        const auto len = r.pod<std::uint64_t>();
        std::vector<char> payload(len);
        r.bytes(payload.data(), len);
        Reader pr(payload.data(), payload.size());
        const std::string t(tag, 4);
        if (t == "FLD0") {
            c.field_layers = get_layers(pr);
            const auto g = pr.pod<std::uint32_t>();
            const auto f = pr.pod<std::uint32_t>();
            if (g < 2 || g > 512 || f == 0 || f > 1024) throw CheckpointError("implausible voxel grid");
            c.voxels = VoxelGrid(static_cast<int>(g), static_cast<int>(f));
            pr.bytes(c.voxels.values.data(), c.voxels.values.size() * sizeof(double));
            have_field = true;
        } else if (t == "DIS0") {
            c.discriminator_layers = get_layers(pr);
        } else if (t == "CFG0") {
            c.config_text.assign(payload.begin(), payload.end());
            continue;
        } else {
            continue;  // unknown sections are skipped for forward compatibility
        }
        if (!pr.done()) throw CheckpointError("trailing bytes in section " + t);
    }
    if (!r.done()) throw CheckpointError("trailing bytes after last section");
    if (!have_field) throw CheckpointError("checkpoint has no field section");
    return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::vector<char> bytes = encode_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

SdfField restore_field(const Checkpoint& ckpt, PriorScene scene) {
    if (scene.voxels.resolution != ckpt.voxels.resolution || scene.voxels.channels != ckpt.voxels.channels) {
        throw CheckpointError("stored voxel grid does not match the scene's grid settings");
    }
    std::vector<int> widths;
    for (std::size_t i = 0; i + 1 < ckpt.field_layers.size(); ++i) {
        widths.push_back(static_cast<int>(ckpt.field_layers[i].weight.rows()));
    }
    SdfField field(std::move(scene), widths, Rng(0), 0.0);
    if (field.layers().size() != ckpt.field_layers.size()) throw CheckpointError("layer count mismatch");
    for (std::size_t i = 0; i < ckpt.field_layers.size(); ++i) {
        const auto& src = ckpt.field_layers[i];
        auto& dst = field.layers()[i];
        if (src.weight.rows() != dst.weight.rows() || src.weight.cols() != dst.weight.cols()) {
            throw CheckpointError("stored field does not match the scene's feature layout");
        }
        dst = src;
    }
    field.scene().voxels = ckpt.voxels;
    return field;
}

}  // namespace sidefit
