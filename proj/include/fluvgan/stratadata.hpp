#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "tensor.hpp"

namespace fluvgan {

constexpr const char* kCoarseChannel = "coarse_fraction";
constexpr const char* kTimeChannel = "deposition_time";

// Regular stratigraphy grid. Channel payloads are stored in file order
// (x fastest: index = x + nx*(y + ny*z)); empty cells above the topography
// hold quiet NaNs.
struct VoxelVolume {
    i64 nx = 0, ny = 0, nz = 0;
    float dx = 50.f, dy = 50.f, dz = 0.5f;
    std::vector<std::string> channel_names;
    std::vector<std::vector<float>> channels;

    i64 cells() const { return nx * ny * nz; }
    i64 idx(i64 x, i64 y, i64 z) const { return x + nx * (y + ny * z); }

    int channel_index(const std::string& name) const {
        for (size_t i = 0; i < channel_names.size(); ++i)
            if (channel_names[i] == name) return int(i);
        return -1;
    }
    bool has_channel(const std::string& name) const { return channel_index(name) >= 0; }

    std::vector<float>& channel(const std::string& name) {
        int i = channel_index(name);
        if (i < 0) throw DataError("volume has no channel '" + name + "'");
        return channels[size_t(i)];
    }
    const std::vector<float>& channel(const std::string& name) const {
        return const_cast<VoxelVolume*>(this)->channel(name);
    }

    void add_channel(const std::string& name, std::vector<float> data) {
        if (i64(data.size()) != cells())
            throw DataError("channel '" + name + "' payload size does not match dims");
        channel_names.push_back(name);
        channels.push_back(std::move(data));
    }
};

// ---- FLVD container -----------------------------------------------------------
//
// Little-endian: magic "FLVD"; version u32 = 1; nx, ny, nz u32; dx, dy, dz f32;
// channel_count u32; per channel a u16 name length and UTF-8 name; then one
// nx*ny*nz f32 payload per channel in declared order.

namespace detail {

inline void put_u16(std::string& b, uint16_t v) {
    b.push_back(char(v & 0xff));
    b.push_back(char(v >> 8));
}
inline void put_u32(std::string& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(b, u);
}

struct ByteReader {
    const unsigned char* p;
    size_t n, pos = 0;
    ByteReader(const std::string& s) : p(reinterpret_cast<const unsigned char*>(s.data())), n(s.size()) {}
    void need(size_t k, const char* what) {
        if (pos + k > n) throw DataError(std::string("FLVD: truncated payload while reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        uint32_t u = u32(what);
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
};

}  // namespace detail

inline void save_volume(const VoxelVolume& v, const std::string& path) {
    if (i64(v.channels.size()) != i64(v.channel_names.size()))
        throw DataError("FLVD: channel name/payload count mismatch");
    std::string buf;
    buf.reserve(64 + size_t(v.cells()) * v.channels.size() * 4);
    buf += "FLVD";
    detail::put_u32(buf, 1);
    detail::put_u32(buf, uint32_t(v.nx));
    detail::put_u32(buf, uint32_t(v.ny));
    detail::put_u32(buf, uint32_t(v.nz));
    detail::put_f32(buf, v.dx);
    detail::put_f32(buf, v.dy);
    detail::put_f32(buf, v.dz);
    detail::put_u32(buf, uint32_t(v.channels.size()));
    for (const auto& name : v.channel_names) {
        if (name.size() > 0xffff) throw DataError("FLVD: channel name too long");
        detail::put_u16(buf, uint16_t(name.size()));
        buf += name;
    }
    for (const auto& ch : v.channels) {
        if (i64(ch.size()) != v.cells()) throw DataError("FLVD: channel payload size mismatch");
        for (float f : ch) detail::put_f32(buf, f);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os.write(buf.data(), std::streamsize(buf.size()));
    if (!os) throw DataError("short write to '" + path + "'");
}

inline VoxelVolume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    detail::ByteReader r(buf);
    r.need(4, "magic");
    if (std::memcmp(r.p, "FLVD", 4) != 0) throw DataError("FLVD: bad magic in '" + path + "'");
    r.pos += 4;
    uint32_t version = r.u32("version");
    if (version != 1) throw DataError("FLVD: unsupported version " + std::to_string(version));
    VoxelVolume v;
    v.nx = r.u32("nx");
    v.ny = r.u32("ny");
    v.nz = r.u32("nz");
    v.dx = r.f32("dx");
    v.dy = r.f32("dy");
    v.dz = r.f32("dz");
    if (v.nx < 1 || v.ny < 1 || v.nz < 1) throw DataError("FLVD: non-positive grid dims");
    uint32_t nch = r.u32("channel count");
    for (uint32_t c = 0; c < nch; ++c) {
        uint16_t len = r.u16("channel name length");
        r.need(len, "channel name");
        v.channel_names.emplace_back(buf.data() + r.pos, len);
        r.pos += len;
    }
    size_t cells = size_t(v.cells());
    for (uint32_t c = 0; c < nch; ++c) {
        std::vector<float> ch(cells);
        for (size_t i = 0; i < cells; ++i) ch[i] = r.f32("channel payload");
        v.channels.push_back(std::move(ch));
    }
    if (r.pos != r.n) throw DataError("FLVD: payload size does not match declared dims/channels");
    int ci = v.channel_index(kCoarseChannel);
    if (ci >= 0)
        for (float f : v.channels[size_t(ci)])
            if (!std::isnan(f) && (f < -1e-6f || f > 1.f + 1e-6f))
                throw DataError("FLVD: coarse_fraction outside [0,1]");
    return v;
}

// ---- preprocessing -------------------------------------------------------------

// Keeps the cells whose elevation span lies inside [z_min_m, z_max_m), measured
// from the grid base.
inline VoxelVolume crop_vertical(const VoxelVolume& v, double z_min_m = 4.0, double z_max_m = 14.0) {
    require(z_min_m < z_max_m, "crop_vertical: z_min must be below z_max");
    double k0d = z_min_m / v.dz, k1d = z_max_m / v.dz;
    i64 k0 = i64(std::llround(k0d)), k1 = i64(std::llround(k1d));
    require(std::abs(k0d - double(k0)) < 1e-6 && std::abs(k1d - double(k1)) < 1e-6,
            "crop_vertical: window bounds must be multiples of the cell height");
    if (k0 < 0 || k1 > v.nz) throw ConfigError("crop_vertical: window outside the grid");
    VoxelVolume out;
    out.nx = v.nx;
    out.ny = v.ny;
    out.nz = k1 - k0;
    out.dx = v.dx;
    out.dy = v.dy;
    out.dz = v.dz;
    for (size_t c = 0; c < v.channels.size(); ++c) {
        std::vector<float> ch((size_t)(out.cells()));
        for (i64 z = 0; z < out.nz; ++z) {
            const float* src = v.channels[c].data() + v.nx * v.ny * (z + k0);
            float* dst = ch.data() + out.nx * out.ny * z;
            std::copy(src, src + v.nx * v.ny, dst);
        }
        out.add_channel(v.channel_names[c], std::move(ch));
    }
    return out;
}

// Replaces the empty space above the topography: coarse fraction becomes 0 and
// the deposition time becomes the age of the highest deposited cell plus one
// year (one constant per column).
inline VoxelVolume fill_above_topography(const VoxelVolume& v) {
    VoxelVolume out = v;
    int ic = out.channel_index(kCoarseChannel);
    int it = out.channel_index(kTimeChannel);
    const std::vector<float>& probe = ic >= 0 ? out.channels[size_t(ic)]
                                              : (it >= 0 ? out.channels[size_t(it)] : out.channels.at(0));
    for (i64 y = 0; y < v.ny; ++y)
        for (i64 x = 0; x < v.nx; ++x) {
            i64 top = -1;
            for (i64 z = v.nz - 1; z >= 0; --z) {
                if (!std::isnan(probe[size_t(v.idx(x, y, z))])) {
                    top = z;
                    break;
                }
            }
            if (top < 0) throw DataError("fill_above_topography: fully empty column");
            for (i64 z = 0; z <= top; ++z)
                if (std::isnan(probe[size_t(v.idx(x, y, z))]))
                    throw DataError("fill_above_topography: empty cell below the topography");
            if (top == v.nz - 1) continue;
            float fill_time = 0.f;
            if (it >= 0) fill_time = out.channels[size_t(it)][size_t(v.idx(x, y, top))] + 1.f;
            for (i64 z = top + 1; z < v.nz; ++z) {
                i64 i = v.idx(x, y, z);
                if (ic >= 0) out.channels[size_t(ic)][size_t(i)] = 0.f;
                if (it >= 0) out.channels[size_t(it)][size_t(i)] = fill_time;
                for (size_t c = 0; c < out.channels.size(); ++c)
                    if (int(c) != ic && int(c) != it && std::isnan(out.channels[c][size_t(i)]))
                        out.channels[c][size_t(i)] = 0.f;
            }
        }
    return out;
}

enum class CropMode { Fixed, Random };
enum class CropConstraint { None, MustContainChannel };

struct CropSpec {
    Vec3 size{128, 128, 16};
    CropMode mode = CropMode::Random;
    Vec3 offsets{0, 0, 0};  // fixed mode
    CropConstraint constraint = CropConstraint::None;
    double channel_threshold = 0.5;
    int retry_cap = 100;
};

inline VoxelVolume crop_box(const VoxelVolume& v, Vec3 off, Vec3 size) {
    VoxelVolume out;
    out.nx = size[0];
    out.ny = size[1];
    out.nz = size[2];
    out.dx = v.dx;
    out.dy = v.dy;
    out.dz = v.dz;
    for (size_t c = 0; c < v.channels.size(); ++c) {
        std::vector<float> ch((size_t)(out.cells()));
        for (i64 z = 0; z < size[2]; ++z)
            for (i64 y = 0; y < size[1]; ++y)
                for (i64 x = 0; x < size[0]; ++x)
                    ch[size_t(out.idx(x, y, z))] =
                        v.channels[c][size_t(v.idx(x + off[0], y + off[1], z + off[2]))];
        out.add_channel(v.channel_names[c], std::move(ch));
    }
    return out;
}

// Axis-aligned crop; optional rejection sampling until the crop contains part
// of the channel belt (max coarse fraction above the threshold).
inline VoxelVolume crop_sample(const VoxelVolume& v, const CropSpec& spec, Rng& rng,
                               Vec3* chosen_offsets = nullptr) {
    for (int a = 0; a < 3; ++a)
        require(spec.size[a] >= 1, "crop_sample: size must be positive");
    Vec3 range{v.nx - spec.size[0], v.ny - spec.size[1], v.nz - spec.size[2]};
    if (range[0] < 0 || range[1] < 0 || range[2] < 0)
        throw ConfigError("crop_sample: requested size exceeds volume dims");
    auto draw = [&](Vec3& off) {
        if (spec.mode == CropMode::Fixed) {
            off = spec.offsets;
            for (int a = 0; a < 3; ++a)
                require(off[a] >= 0 && off[a] <= range[a], "crop_sample: fixed offsets out of range");
        } else {
            for (int a = 0; a < 3; ++a) off[a] = range[a] > 0 ? rng.uniform_index(range[a] + 1) : 0;
        }
    };
    int attempts = spec.constraint == CropConstraint::MustContainChannel ? spec.retry_cap : 1;
    for (int t = 0; t < attempts; ++t) {
        Vec3 off;
        draw(off);
        VoxelVolume out = crop_box(v, off, spec.size);
        if (spec.constraint == CropConstraint::MustContainChannel) {
            const auto& coarse = out.channel(kCoarseChannel);
            float mx = -std::numeric_limits<float>::infinity();
            for (float f : coarse)
                if (!std::isnan(f)) mx = std::max(mx, f);
            if (!(mx >= float(spec.channel_threshold))) {
                if (spec.mode == CropMode::Fixed)
                    throw DataError("crop_sample: fixed crop does not contain the channel belt");
                continue;
            }
        }
        if (chosen_offsets) *chosen_offsets = off;
        return out;
    }
    throw DataError("crop_sample: retry cap exceeded while searching for a channel-bearing crop");
}

// ---- scaling to and from network space --------------------------------------------

// Preprocessed, [-1,1]-scaled tensor plus the provenance needed to invert the
// per-sample time scaling.
struct Sample {
    Tensor data;  // [C, X, Y, Z], z fastest
    std::vector<std::string> channel_names;
    i64 realization_id = -1;
    Vec3 offsets{0, 0, 0};
    double t_min = 0.0, t_max = 1.0;
    float dx = 50.f, dy = 50.f, dz = 0.5f;
};

// coarse-like channels map [0,1] -> [-1,1] on absolute bounds; the deposition
// time is scaled on its per-sample range.
inline Sample scale_sample(const VoxelVolume& v) {
    Sample s;
    s.channel_names = v.channel_names;
    s.dx = v.dx;
    s.dy = v.dy;
    s.dz = v.dz;
    i64 c_n = i64(v.channels.size());
    require(c_n >= 1, "scale_sample: volume has no channels");
    rvec data((size_t)(c_n * v.cells()));
    for (i64 c = 0; c < c_n; ++c) {
        const auto& ch = v.channels[size_t(c)];
        bool is_time = v.channel_names[size_t(c)] == kTimeChannel;
        double lo = 0.0, hi = 1.0;
        if (is_time) {
            lo = std::numeric_limits<double>::infinity();
            hi = -lo;
            for (float f : ch) {
                if (std::isnan(f)) throw DataError("scale_sample: volume still has empty cells");
                lo = std::min(lo, double(f));
                hi = std::max(hi, double(f));
            }
            if (!(hi > lo)) throw DataError("scale_sample: degenerate deposition time range");
            s.t_min = lo;
            s.t_max = hi;
        }
        for (i64 z = 0; z < v.nz; ++z)
            for (i64 y = 0; y < v.ny; ++y)
                for (i64 x = 0; x < v.nx; ++x) {
                    float f = ch[size_t(v.idx(x, y, z))];
                    if (std::isnan(f)) throw DataError("scale_sample: volume still has empty cells");
                    double sv = 2.0 * (double(f) - lo) / (hi - lo) - 1.0;
                    data[size_t(((c * v.nx + x) * v.ny + y) * v.nz + z)] = real(sv);
                }
    }
    s.data = Tensor::from({c_n, v.nx, v.ny, v.nz}, std::move(data));
    return s;
}

inline VoxelVolume unscale_sample(const Sample& s) {
    const Shape& sh = s.data.shape();
    require(sh.size() == 4, "unscale_sample: sample tensor must be [C,X,Y,Z]");
    i64 c_n = sh[0], nx = sh[1], ny = sh[2], nz = sh[3];
    require(i64(s.channel_names.size()) == c_n, "unscale_sample: channel name count mismatch");
    VoxelVolume v;
    v.nx = nx;
    v.ny = ny;
    v.nz = nz;
    v.dx = s.dx;
    v.dy = s.dy;
    v.dz = s.dz;
    const auto& data = s.data.data();
    for (i64 c = 0; c < c_n; ++c) {
        bool is_time = s.channel_names[size_t(c)] == kTimeChannel;
        double lo = is_time ? s.t_min : 0.0;
        double hi = is_time ? s.t_max : 1.0;
        std::vector<float> ch((size_t)(nx * ny * nz));
        for (i64 x = 0; x < nx; ++x)
            for (i64 y = 0; y < ny; ++y)
                for (i64 z = 0; z < nz; ++z) {
                    double sv = double(data[size_t(((c * nx + x) * ny + y) * nz + z)]);
                    ch[size_t(v.idx(x, y, z))] = float((sv + 1.0) / 2.0 * (hi - lo) + lo);
                }
        v.add_channel(s.channel_names[size_t(c)], std::move(ch));
    }
    return v;
}

// ---- dataset splits ------------------------------------------------------------------

enum class SplitMode { Random, FixedTail };

struct SplitPlan {
    std::vector<i64> training, validation, test;
};

// Realization ids are 1-based. FixedTail assigns contiguous blocks in id
// order; Random shuffles with the given seed.
inline SplitPlan make_split(i64 n_total, i64 n_train, i64 n_val, i64 n_test, SplitMode mode,
                            uint64_t seed) {
    require(n_train >= 0 && n_val >= 0 && n_test >= 0, "make_split: negative counts");
    if (n_train + n_val + n_test > n_total)
        throw ConfigError("make_split: split counts exceed the dataset size");
    std::vector<i64> ids((size_t)(n_total));
    for (i64 i = 0; i < n_total; ++i) ids[size_t(i)] = i + 1;
    if (mode == SplitMode::Random) {
        Rng rng(seed);
        for (i64 i = n_total - 1; i > 0; --i)
            std::swap(ids[size_t(i)], ids[size_t(rng.uniform_index(i + 1))]);
    }
    SplitPlan plan;
    plan.training.assign(ids.begin(), ids.begin() + n_train);
    plan.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    plan.test.assign(ids.begin() + n_train + n_val, ids.begin() + n_train + n_val + n_test);
    return plan;
}

// ---- synthetic stratigraphy ---------------------------------------------------------

struct SynthParams {
    Vec3 dims{32, 32, 8};
    std::array<float, 3> cell_size{50.f, 50.f, 0.5f};
    i64 n_layers = 8;
    double channel_width_cells = 4.0;
    double meander_amplitude = 6.0;
    double drift_rate = 1.5;
    double coarse_in_channel = 0.9;
    double coarse_falloff = 1.0;
    double overbank_coarse = 0.05;
    bool carve_topography = false;
};

// Deposits layers bottom-up: a meandering channel belt in x (flow along y)
// drifts laterally layer by layer; the coarse fraction decays with distance
// from the centerline and the deposition time strictly increases with z.
inline VoxelVolume synth_generate(uint64_t seed, const SynthParams& p) {
    require(p.dims[0] >= 1 && p.dims[1] >= 1 && p.dims[2] >= 1, "synth_generate: bad dims");
    require(p.n_layers >= 1 && p.n_layers <= p.dims[2],
            "synth_generate: n_layers must lie in [1, nz]");
    require(p.channel_width_cells > 0, "synth_generate: channel width must be positive");
    Rng rng(seed);
    i64 nx = p.dims[0], ny = p.dims[1], nz = p.dims[2];
    VoxelVolume v;
    v.nx = nx;
    v.ny = ny;
    v.nz = nz;
    v.dx = p.cell_size[0];
    v.dy = p.cell_size[1];
    v.dz = p.cell_size[2];

    // Per-layer centerline parameters: random initial phase, slow phase creep
    // and a lateral random walk.
    double phase = rng.uniform(0.0, 6.283185307179586);
    double drift = rng.uniform(-1.0, 1.0) * p.drift_rate;
    std::vector<double> layer_phase((size_t)(p.n_layers)), layer_center(size_t(p.n_layers));
    for (i64 l = 0; l < p.n_layers; ++l) {
        layer_phase[size_t(l)] = phase;
        layer_center[size_t(l)] = double(nx) / 2.0 + drift;
        phase += 0.35 + 0.2 * rng.uniform();
        drift += rng.uniform(-1.0, 1.0) * p.drift_rate;
    }

    const double layer_dt = 10.0;
    std::vector<float> coarse((size_t)(v.cells()));
    std::vector<float> time((size_t)(v.cells()));
    for (i64 z = 0; z < nz; ++z) {
        i64 layer = z * p.n_layers / nz;
        double c0 = layer_center[size_t(layer)];
        double ph = layer_phase[size_t(layer)];
        for (i64 y = 0; y < ny; ++y) {
            double center = c0 + p.meander_amplitude *
                                     std::sin(6.283185307179586 * double(y) / double(ny) + ph);
            for (i64 x = 0; x < nx; ++x) {
                double d = (double(x) - center) / p.channel_width_cells;
                double f = p.coarse_in_channel * std::exp(-d * d * p.coarse_falloff) +
                           p.overbank_coarse;
                coarse[size_t(v.idx(x, y, z))] = float(std::clamp(f, 0.0, 1.0));
                // jitter stays below half the layer increment, so time is
                // strictly increasing along every column
                double t = double(z + 1) * layer_dt + rng.uniform() * (layer_dt * 0.499);
                time[size_t(v.idx(x, y, z))] = float(t);
            }
        }
    }
    v.add_channel(kCoarseChannel, std::move(coarse));
    v.add_channel(kTimeChannel, std::move(time));

    if (p.carve_topography && nz >= 2) {
        auto& cc = v.channel(kCoarseChannel);
        auto& tc = v.channel(kTimeChannel);
        float qnan = std::numeric_limits<float>::quiet_NaN();
        for (i64 y = 0; y < ny; ++y)
            for (i64 x = 0; x < nx; ++x) {
                if (rng.uniform() >= 0.3) continue;
                i64 k = 1 + rng.uniform_index(std::min<i64>(2, nz - 1));
                for (i64 z = nz - k; z < nz; ++z) {
                    cc[size_t(v.idx(x, y, z))] = qnan;
                    tc[size_t(v.idx(x, y, z))] = qnan;
                }
            }
    }
    return v;
}

}  // namespace fluvgan
