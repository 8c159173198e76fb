#pragma once

#include <chrono>
#include <filesystem>

#include <json.hpp>

#include "architectures.hpp"
#include "geovalid.hpp"
#include "optim.hpp"
#include "stratadata.hpp"

namespace fluvgan {

enum class LossMode { NonsaturatingBce, WganGp };

struct TrainConfig {
    i64 batch_size = 64;
    i64 total_g_iterations = 0;
    int d_steps_per_g = 1;
    real lr_g = real(2e-4);
    real lr_d = real(2e-4);
    real beta1 = real(0.5);
    real beta2 = real(0.999);
    bool use_r1 = false;
    real r1_weight = real(10);
    i64 r1_interval = 16;
    LossMode loss_mode = LossMode::NonsaturatingBce;
    real gp_weight = real(10);
    bool logits_loss = true;
    i64 validation_interval = 100;
    i64 checkpoint_interval = 500;
    i64 val_batch = 64;
    uint64_t seed = 0;
    SwdSettings swd;
};

struct MetricsRecord {
    i64 g_iteration = 0;
    double g_loss = 0;
    double d_loss = 0;
    double d_w = 0;
    double f_s = -1;  // negative when the sample has no deposition-time channel
    double wall_time_seconds = 0;
};

// Generator/discriminator pair plus everything needed to train and serialize
// them.
struct GanModel {
    ArchitectureConfig arch;
    LatentSpec latent;
    std::vector<std::string> channel_names;
    Network g, d;
    AdamConfig opt_g, opt_d;

    std::vector<Parameter*> g_params() const { return g.parameters(); }
    std::vector<Parameter*> d_params() const { return d.parameters(); }
};

inline GanModel build_gan(const ArchitectureConfig& arch, const LatentSpec& latent,
                          std::vector<std::string> channel_names, uint64_t init_seed) {
    require(arch.channels_out == i64(channel_names.size()),
            "build_gan: channels_out must match the channel name count");
    GanModel m;
    m.arch = arch;
    m.latent = latent;
    m.channel_names = std::move(channel_names);
    Rng rng(Rng::mix64(init_seed));
    m.g = build_generator(arch, latent, rng);
    m.d = build_discriminator(arch, latent, rng);
    m.opt_g = AdamConfig{arch.lr_g, arch.beta1(), arch.beta2(), real(1e-8)};
    m.opt_d = AdamConfig{arch.lr_d, arch.beta1(), arch.beta2(), real(1e-8)};
    return m;
}

inline Tensor sample_latents(const LatentSpec& latent, i64 n, Rng& rng) {
    return Tensor::randn({n, latent.dim, latent.spatial[0], latent.spatial[1], latent.spatial[2]},
                         rng);
}

// ---- regularization terms ------------------------------------------------------

// (weight/2) * mean over the batch of ||d D(x) / d x||^2 at the real samples.
inline Tensor r1_penalty(const Network& d, const Tensor& real_batch, real weight) {
    Tensor x = real_batch.detach();
    x.set_requires_grad(true);
    Tensor out = run_discriminator(d, x, /*train=*/true);
    Tensor gx = grad(sum_all(out), {x}, /*create_graph=*/true)[0];
    i64 nb = real_batch.shape()[0];
    return mul_const(sum_all(mul(gx, gx)), weight / (real(2) * real(nb)));
}

// mean over the batch of (||d D(x_hat)/d x_hat|| - 1)^2 at per-item random
// interpolates between real and fake samples.
inline Tensor gradient_penalty(const Network& d, const Tensor& real_batch, const Tensor& fake_batch,
                               Rng& rng) {
    detail::check_same_shape(real_batch, fake_batch, "gradient_penalty");
    const Shape& s = real_batch.shape();
    i64 nb = s[0];
    i64 per = real_batch.numel() / nb;
    rvec mix((size_t)(real_batch.numel()));
    const auto& rd = real_batch.data();
    const auto& fd = fake_batch.data();
    for (i64 n = 0; n < nb; ++n) {
        real eps = real(rng.uniform());
        const real* rr = rd.data() + n * per;
        const real* ff = fd.data() + n * per;
        real* mm = mix.data() + n * per;
        for (i64 i = 0; i < per; ++i) mm[i] = eps * rr[i] + (real(1) - eps) * ff[i];
    }
    Tensor x_hat = Tensor::from(s, std::move(mix), /*requires_grad=*/true);
    Tensor out = run_discriminator(d, x_hat, /*train=*/true);
    Tensor gx = grad(sum_all(out), {x_hat}, /*create_graph=*/true)[0];
    Tensor norms = vsqrt(add_const(item_sum(mul(gx, gx)), real(1e-12)));
    Tensor excess = add_const(norms, real(-1));
    return mean_all(mul(excess, excess));
}

// ---- minimax steps ---------------------------------------------------------------

namespace detail {
inline void check_loss_finite(double v, const char* what, i64 iteration, const GanModel& m) {
    if (std::isfinite(v)) return;
    auto norm_of = [](const std::vector<Parameter*>& ps) {
        double acc = 0;
        for (Parameter* p : ps)
            for (real x : p->value.data()) acc += double(x) * double(x);
        return std::sqrt(acc);
    };
    throw NumericError(std::string("non-finite ") + what + " at generator iteration " +
                       std::to_string(iteration) + " (|G|=" + std::to_string(norm_of(m.g_params())) +
                       ", |D|=" + std::to_string(norm_of(m.d_params())) + ")");
}
}  // namespace detail

// One discriminator update. The generator is only evaluated (its parameters
// stay bit-identical); the lazy R1 term lands every r1_interval-th call,
// scaled by the interval so the time-averaged regularization matches the
// non-lazy schedule.
inline double d_step(GanModel& m, const Tensor& real_batch, const TrainConfig& cfg, Rng& rng,
                     i64 d_iter, i64 g_iteration = 0) {
    auto dp = m.d_params();
    zero_grads(dp);
    i64 nb = real_batch.shape()[0];
    Tensor z = sample_latents(m.latent, nb, rng);
    Tensor fake;
    {
        NoGradGuard ng;
        fake = run_generator(m.g, z, /*train=*/true);
    }
    Tensor d_real = run_discriminator(m.d, real_batch, /*train=*/true);
    Tensor d_fake = run_discriminator(m.d, fake, /*train=*/true);
    Tensor loss;
    if (cfg.loss_mode == LossMode::WganGp) {
        loss = sub(mean_all(d_fake), mean_all(d_real));
        loss = add(loss, mul_const(gradient_penalty(m.d, real_batch, fake, rng), cfg.gp_weight));
    } else {
        Tensor ones = Tensor::full(d_real.shape(), real(1));
        Tensor zeros_t = Tensor::zeros(d_fake.shape());
        loss = cfg.logits_loss ? add(bce_with_logits(d_real, ones), bce_with_logits(d_fake, zeros_t))
                               : add(bce(d_real, ones), bce(d_fake, zeros_t));
        if (cfg.use_r1 && cfg.r1_interval >= 1 && d_iter % cfg.r1_interval == 0)
            loss = add(loss, mul_const(r1_penalty(m.d, real_batch, cfg.r1_weight),
                                       real(cfg.r1_interval)));
    }
    double v = double(loss.item());
    detail::check_loss_finite(v, "discriminator loss", g_iteration, m);
    backward(loss);
    adam_step(dp, m.opt_d);
    return v;
}

// One generator update against a frozen discriminator.
inline double g_step(GanModel& m, const TrainConfig& cfg, Rng& rng, i64 g_iteration = 0) {
    auto gp = m.g_params();
    auto dp = m.d_params();
    zero_grads(gp);
    set_requires_grad(dp, false);
    Tensor z = sample_latents(m.latent, cfg.batch_size, rng);
    Tensor fake = run_generator(m.g, z, /*train=*/true);
    Tensor out = run_discriminator(m.d, fake, /*train=*/true);
    Tensor loss;
    if (cfg.loss_mode == LossMode::WganGp) {
        loss = neg(mean_all(out));
    } else {
        Tensor ones = Tensor::full(out.shape(), real(1));
        loss = cfg.logits_loss ? bce_with_logits(out, ones) : bce(out, ones);
    }
    double v = double(loss.item());
    set_requires_grad(dp, true);
    detail::check_loss_finite(v, "generator loss", g_iteration, m);
    backward(loss);
    adam_step(gp, m.opt_g);
    return v;
}

// ---- checkpointing -----------------------------------------------------------------
//
// Binary container: magic "FGCK", u32 version, u64 JSON header length, JSON
// header (architecture, latent spec, channels, iteration, RNG state), then the
// parameters and state buffers of both networks as raw little-endian doubles.

namespace detail {

inline void put_u64(std::string& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_real_vec(std::string& b, const rvec& v) {
    put_u64(b, v.size());
    size_t off = b.size();
    b.resize(off + v.size() * sizeof(real));
    std::memcpy(b.data() + off, v.data(), v.size() * sizeof(real));
}
inline void put_str(std::string& b, const std::string& s) {
    put_u64(b, s.size());
    b += s;
}

struct CkptReader {
    const std::string& b;
    size_t pos = 0;
    explicit CkptReader(const std::string& s) : b(s) {}
    void need(size_t k, const char* what) {
        if (pos + k > b.size())
            throw DataError(std::string("checkpoint: truncated while reading ") + what);
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(b[pos + size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(const char* what) {
        uint64_t n = u64(what);
        need(size_t(n), what);
        std::string s = b.substr(pos, size_t(n));
        pos += size_t(n);
        return s;
    }
    rvec real_vec(const char* what) {
        uint64_t n = u64(what);
        need(size_t(n) * sizeof(real), what);
        rvec v(static_cast<size_t>(n));
        std::memcpy(v.data(), b.data() + pos, size_t(n) * sizeof(real));
        pos += size_t(n) * sizeof(real);
        return v;
    }
};

}  // namespace detail

inline nlohmann::json arch_to_json(const ArchitectureConfig& a) {
    return nlohmann::json{{"leaky_g", a.leaky_g},
                          {"logits_loss", a.logits_loss},
                          {"tuned_betas", a.tuned_betas},
                          {"spectral_norm", a.spectral_norm},
                          {"residual_blocks", a.residual_blocks},
                          {"bottleneck_blocks", a.bottleneck_blocks},
                          {"no_batch_in_d", a.no_batch_in_d},
                          {"r1", a.r1},
                          {"double_blocks", a.double_blocks},
                          {"orthogonal_init", a.orthogonal_init},
                          {"latent_skip", a.latent_skip},
                          {"lr_g", a.lr_g},
                          {"lr_d", a.lr_d},
                          {"d_steps_per_g", a.d_steps_per_g},
                          {"base_channels", a.base_channels},
                          {"growth_policy", a.growth_policy == GrowthPolicy::EarlyStop
                                                ? "early-stop"
                                                : "uniform"},
                          {"target_shape", {a.target_shape[0], a.target_shape[1], a.target_shape[2]}},
                          {"channels_out", a.channels_out},
                          {"kernel_base", a.kernel_base},
                          {"leaky_slope", a.leaky_slope}};
}

inline ArchitectureConfig arch_from_json(const nlohmann::json& j, ArchitectureConfig a = {}) {
    auto b = [&](const char* k, bool& v) { if (j.contains(k)) v = j.at(k).get<bool>(); };
    b("leaky_g", a.leaky_g);
    b("logits_loss", a.logits_loss);
    b("tuned_betas", a.tuned_betas);
    b("spectral_norm", a.spectral_norm);
    b("residual_blocks", a.residual_blocks);
    b("bottleneck_blocks", a.bottleneck_blocks);
    b("no_batch_in_d", a.no_batch_in_d);
    b("r1", a.r1);
    b("double_blocks", a.double_blocks);
    b("orthogonal_init", a.orthogonal_init);
    b("latent_skip", a.latent_skip);
    if (j.contains("lr_g")) a.lr_g = j.at("lr_g").get<real>();
    if (j.contains("lr_d")) a.lr_d = j.at("lr_d").get<real>();
    if (j.contains("d_steps_per_g")) a.d_steps_per_g = j.at("d_steps_per_g").get<int>();
    if (j.contains("base_channels")) a.base_channels = j.at("base_channels").get<i64>();
    if (j.contains("growth_policy")) {
        std::string g = j.at("growth_policy").get<std::string>();
        if (g == "early-stop")
            a.growth_policy = GrowthPolicy::EarlyStop;
        else if (g == "uniform")
            a.growth_policy = GrowthPolicy::Uniform;
        else
            throw ConfigError("unknown growth_policy '" + g + "'");
    }
    if (j.contains("target_shape")) {
        auto t = j.at("target_shape");
        require(t.is_array() && t.size() == 3, "target_shape must be a 3-vector");
        for (int i = 0; i < 3; ++i) a.target_shape[size_t(i)] = t.at(size_t(i)).get<i64>();
    }
    if (j.contains("channels_out")) a.channels_out = j.at("channels_out").get<i64>();
    if (j.contains("kernel_base")) a.kernel_base = j.at("kernel_base").get<int>();
    if (j.contains("leaky_slope")) a.leaky_slope = j.at("leaky_slope").get<real>();
    return a;
}

inline void save_checkpoint(const GanModel& m, i64 iteration, const Rng& rng,
                            const std::string& path) {
    nlohmann::json hdr;
    hdr["arch"] = arch_to_json(m.arch);
    hdr["latent"] = {{"dim", m.latent.dim},
                     {"spatial", {m.latent.spatial[0], m.latent.spatial[1], m.latent.spatial[2]}}};
    hdr["channels"] = m.channel_names;
    hdr["iteration"] = iteration;
    std::ostringstream rs;
    rng.serialize(rs);
    hdr["rng"] = rs.str();
    std::string header = hdr.dump();

    std::string buf = "FGCK";
    detail::put_u32(buf, 1);
    detail::put_str(buf, header);
    auto dump_net = [&buf](const Network& net) {
        auto params = net.parameters();
        detail::put_u64(buf, params.size());
        for (Parameter* p : params) {
            detail::put_str(buf, p->name);
            const Shape& s = p->value.shape();
            detail::put_u64(buf, s.size());
            for (i64 d : s) detail::put_u64(buf, uint64_t(d));
            detail::put_real_vec(buf, p->value.data());
            detail::put_real_vec(buf, p->adam_m);
            detail::put_real_vec(buf, p->adam_v);
            detail::put_u64(buf, uint64_t(p->step_count));
            detail::put_real_vec(buf, p->spectral_u);
        }
        auto state = net.state_buffers();
        detail::put_u64(buf, state.size());
        for (auto& [name, vec] : state) {
            detail::put_str(buf, name);
            detail::put_real_vec(buf, *vec);
        }
    };
    dump_net(m.g);
    dump_net(m.d);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint '" + path + "' for writing");
    os.write(buf.data(), std::streamsize(buf.size()));
    if (!os) throw DataError("short write to checkpoint '" + path + "'");
}

struct LoadedCheckpoint {
    GanModel model;
    i64 iteration = 0;
    Rng rng;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "FGCK", 4) != 0)
        throw DataError("checkpoint: bad magic in '" + path + "'");
    detail::CkptReader r(buf);
    r.pos = 4;
    uint32_t version = 0;
    {
        r.need(4, "version");
        for (int i = 0; i < 4; ++i) version |= uint32_t(uint8_t(buf[r.pos + size_t(i)])) << (8 * i);
        r.pos += 4;
    }
    if (version != 1) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(r.str("header"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: bad header: ") + e.what());
    }
    LoadedCheckpoint out;
    ArchitectureConfig arch = arch_from_json(hdr.at("arch"));
    LatentSpec latent;
    latent.dim = hdr.at("latent").at("dim").get<i64>();
    for (int i = 0; i < 3; ++i)
        latent.spatial[size_t(i)] = hdr.at("latent").at("spatial").at(size_t(i)).get<i64>();
    std::vector<std::string> channels = hdr.at("channels").get<std::vector<std::string>>();
    out.model = build_gan(arch, latent, channels, /*init_seed=*/0);
    out.iteration = hdr.at("iteration").get<i64>();
    {
        std::istringstream rs(hdr.at("rng").get<std::string>());
        out.rng.deserialize(rs);
    }
    auto load_net = [&r](Network& net) {
        auto params = net.parameters();
        uint64_t np = r.u64("parameter count");
        if (np != params.size())
            throw DataError("checkpoint: parameter count mismatch (file " + std::to_string(np) +
                            ", network " + std::to_string(params.size()) + ")");
        for (Parameter* p : params) {
            std::string name = r.str("parameter name");
            if (name != p->name)
                throw DataError("checkpoint: parameter order mismatch at '" + name + "'");
            uint64_t rank = r.u64("shape rank");
            Shape s(rank);
            for (uint64_t i = 0; i < rank; ++i) s[size_t(i)] = i64(r.u64("shape extent"));
            if (s != p->value.shape()) throw DataError("checkpoint: shape mismatch at '" + name + "'");
            auto vals = r.real_vec("parameter values");
            if (vals.size() != p->value.data().size())
                throw DataError("checkpoint: value size mismatch at '" + name + "'");
            p->value.data() = std::move(vals);
            p->adam_m = r.real_vec("adam m");
            p->adam_v = r.real_vec("adam v");
            p->step_count = i64(r.u64("step count"));
            p->spectral_u = r.real_vec("spectral u");
        }
        auto state = net.state_buffers();
        uint64_t ns = r.u64("state buffer count");
        if (ns != state.size()) throw DataError("checkpoint: state buffer count mismatch");
        for (auto& [name, vec] : state) {
            std::string fname = r.str("state name");
            if (fname != name) throw DataError("checkpoint: state order mismatch at '" + fname + "'");
            auto vals = r.real_vec("state values");
            if (vals.size() != vec->size())
                throw DataError("checkpoint: state size mismatch at '" + name + "'");
            *vec = std::move(vals);
        }
    };
    load_net(out.model.g);
    load_net(out.model.d);
    if (r.pos != buf.size()) throw DataError("checkpoint: trailing bytes in '" + path + "'");
    return out;
}

// ---- sample sources ------------------------------------------------------------------

class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual i64 size() const = 0;
    // Training draw; random modes consume the generator.
    virtual Sample draw(Rng& rng) = 0;
};

inline VoxelVolume select_channels(const VoxelVolume& v, const std::vector<std::string>& names) {
    VoxelVolume out;
    out.nx = v.nx;
    out.ny = v.ny;
    out.nz = v.nz;
    out.dx = v.dx;
    out.dy = v.dy;
    out.dz = v.dz;
    for (const auto& n : names) out.add_channel(n, v.channel(n));
    return out;
}

// In-memory volumes; every draw crops and rescales.
class VolumeDataset : public SampleSource {
public:
    VolumeDataset(std::vector<VoxelVolume> volumes, CropSpec crop,
                  std::vector<std::string> use_channels)
        : volumes_(std::move(volumes)), crop_(crop), channels_(std::move(use_channels)) {
        require(!volumes_.empty(), "VolumeDataset: empty volume list");
    }

    i64 size() const override { return i64(volumes_.size()); }

    Sample draw(Rng& rng) override {
        i64 vi = rng.uniform_index(i64(volumes_.size()));
        return at(vi, rng);
    }

    Sample at(i64 index, Rng& rng) {
        const VoxelVolume& v = volumes_[size_t(index)];
        Vec3 off{0, 0, 0};
        VoxelVolume cropped = crop_sample(v, crop_, rng, &off);
        Sample s = scale_sample(select_channels(cropped, channels_));
        s.realization_id = index + 1;
        s.offsets = off;
        return s;
    }

    const std::vector<VoxelVolume>& volumes() const { return volumes_; }
    const CropSpec& crop_spec() const { return crop_; }
    const std::vector<std::string>& channels() const { return channels_; }

private:
    std::vector<VoxelVolume> volumes_;
    CropSpec crop_;
    std::vector<std::string> channels_;
};

inline Tensor stack_samples(const std::vector<Sample>& samples) {
    require(!samples.empty(), "stack_samples: empty batch");
    const Shape& s = samples.front().data.shape();
    Shape out{i64(samples.size()), s[0], s[1], s[2], s[3]};
    rvec data;
    data.reserve(size_t(numel(out)));
    for (const Sample& smp : samples) {
        require(smp.data.shape() == s, "stack_samples: inconsistent sample shapes");
        const auto& d = smp.data.data();
        data.insert(data.end(), d.begin(), d.end());
    }
    return Tensor::from(std::move(out), std::move(data));
}

inline Tensor draw_batch(SampleSource& src, i64 n, Rng& rng) {
    std::vector<Sample> batch;
    batch.reserve(size_t(n));
    for (i64 i = 0; i < n; ++i) batch.push_back(src.draw(rng));
    return stack_samples(batch);
}

// Generates count samples in eval mode, returned as [C,X,Y,Z] tensors.
inline std::vector<Tensor> generate_samples(const GanModel& m, i64 count, Rng& rng,
                                            i64 chunk = 16) {
    NoGradGuard ng;
    std::vector<Tensor> out;
    out.reserve(size_t(count));
    while (i64(out.size()) < count) {
        i64 n = std::min<i64>(chunk, count - i64(out.size()));
        Tensor z = sample_latents(m.latent, n, rng);
        Tensor fake = run_generator(m.g, z, /*train=*/false);
        const Shape& s = fake.shape();
        i64 per = s[1] * s[2] * s[3] * s[4];
        for (i64 i = 0; i < n; ++i) {
            rvec one(fake.data().begin() + i * per,
                                  fake.data().begin() + (i + 1) * per);
            out.push_back(Tensor::from({s[1], s[2], s[3], s[4]}, std::move(one)));
        }
    }
    return out;
}

// ---- the training loop ------------------------------------------------------------------

struct TrainResult {
    i64 completed_iterations = 0;
    bool collapsed = false;
    std::string diagnostic;
    std::vector<MetricsRecord> metrics;
};

namespace detail {

inline void append_metrics_row(const std::string& path, const MetricsRecord& r, bool has_time) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw DataError("cannot append to '" + path + "'");
    char buf[256];
    if (has_time)
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      (long long)r.g_iteration, r.g_loss, r.d_loss, r.d_w, r.f_s,
                      r.wall_time_seconds);
    else
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,,%.17g\n",
                      (long long)r.g_iteration, r.g_loss, r.d_loss, r.d_w, r.wall_time_seconds);
    os << buf;
}

}  // namespace detail

// Alternating minimax training with periodic validation (sliced Wasserstein
// distance to a fixed validation set plus the superposition fraction) and
// checkpoints. No early stopping: exactly total_g_iterations generator
// updates, or a NaN abort that leaves the partial run directory valid.
inline TrainResult train(GanModel& m, SampleSource& data, const std::vector<Sample>& val_samples,
                         const TrainConfig& cfg, const std::string& run_dir,
                         const std::string& config_json = "{}",
                         const std::string& resume_checkpoint = "") {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    fs::create_directories(run_dir + "/checkpoints");
    std::string metrics_path = run_dir + "/metrics.csv";

    Rng rng(Rng::mix64(cfg.seed ^ 0xf17f0ULL));
    i64 start_iter = 0;
    bool resuming = !resume_checkpoint.empty();
    if (resuming) {
        LoadedCheckpoint lc = load_checkpoint(resume_checkpoint);
        m = std::move(lc.model);
        rng = lc.rng;
        start_iter = lc.iteration;
    } else {
        std::ofstream cfg_os(run_dir + "/config.json", std::ios::trunc);
        cfg_os << config_json << "\n";
        std::ofstream os(metrics_path, std::ios::trunc);
        os << "iteration,g_loss,d_loss,d_w,f_s,wall_time_s\n";
    }

    int time_idx = -1;
    for (size_t i = 0; i < m.channel_names.size(); ++i)
        if (m.channel_names[i] == kTimeChannel) time_idx = int(i);
    std::vector<Tensor> val_tensors;
    for (const Sample& s : val_samples) val_tensors.push_back(s.data);

    SwdSettings swd = cfg.swd;
    swd.seed = hash_combine(cfg.seed, 0xd1); // fixed across validation points

    auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    auto validate_at = [&](i64 iter, double g_loss, double d_loss) {
        MetricsRecord rec;
        rec.g_iteration = iter;
        rec.g_loss = g_loss;
        rec.d_loss = d_loss;
        Rng vrng = rng.fork(hash_combine(0x7a11da7e, uint64_t(iter)));
        std::vector<Tensor> gen = generate_samples(m, cfg.val_batch, vrng, cfg.batch_size);
        if (!val_tensors.empty()) rec.d_w = swd_score(gen, val_tensors, swd).mean;
        if (time_idx >= 0) {
            double acc = 0;
            for (const Tensor& t : gen) acc += superposition_fraction(channel_volume(t, time_idx));
            rec.f_s = acc / double(gen.size());
        }
        rec.wall_time_seconds = wall();
        detail::append_metrics_row(metrics_path, rec, time_idx >= 0);
        res.metrics.push_back(rec);
    };

    i64 d_iter = start_iter * cfg.d_steps_per_g;
    double last_g = 0, last_d = 0;
    if (!resuming) {
        save_checkpoint(m, 0, rng, run_dir + "/checkpoints/iter_0.ckpt");
        if (cfg.total_g_iterations > 0) validate_at(0, 0.0, 0.0);
    }

    try {
        for (i64 it = start_iter + 1; it <= cfg.total_g_iterations; ++it) {
            for (int k = 0; k < cfg.d_steps_per_g; ++k) {
                Tensor real_batch = draw_batch(data, cfg.batch_size, rng);
                ++d_iter;
                last_d = d_step(m, real_batch, cfg, rng, d_iter, it);
            }
            last_g = g_step(m, cfg, rng, it);
            res.completed_iterations = it;
            bool last = it == cfg.total_g_iterations;
            if (cfg.validation_interval > 0 && (it % cfg.validation_interval == 0 || last))
                validate_at(it, last_g, last_d);
            if (cfg.checkpoint_interval > 0 && (it % cfg.checkpoint_interval == 0 || last))
                save_checkpoint(m, it, rng,
                                run_dir + "/checkpoints/iter_" + std::to_string(it) + ".ckpt");
        }
    } catch (const NumericError& e) {
        res.collapsed = true;
        res.diagnostic = e.what();
        std::ofstream os(run_dir + "/abort.txt", std::ios::trunc);
        os << e.what() << "\n";
    }
    return res;
}

}  // namespace fluvgan
