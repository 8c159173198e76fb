#pragma once

#include "nn.hpp"

namespace fluvgan {

struct LatentSpec {
    i64 dim = 100;
    Vec3 spatial{4, 4, 4};
};

enum class GrowthPolicy { EarlyStop, Uniform };

struct ArchitectureConfig {
    bool leaky_g = false;
    bool logits_loss = false;
    bool tuned_betas = false;
    bool spectral_norm = false;
    bool residual_blocks = false;
    bool bottleneck_blocks = false;
    bool no_batch_in_d = false;
    bool r1 = false;
    bool double_blocks = false;
    bool orthogonal_init = false;
    bool latent_skip = false;

    real lr_g = real(2e-4);
    real lr_d = real(2e-4);
    int d_steps_per_g = 1;
    i64 base_channels = 32;
    GrowthPolicy growth_policy = GrowthPolicy::EarlyStop;
    Vec3 target_shape{128, 128, 16};
    i64 channels_out = 2;
    int kernel_base = 4;
    real leaky_slope = real(0.2);

    real beta1() const { return tuned_betas ? real(0) : real(0.5); }
    real beta2() const { return tuned_betas ? real(0.99) : real(0.999); }
};

// Fixed flag combinations of the ablation ladder; kept as plain data so rungs
// can be re-mapped without touching the builders.
inline ArchitectureConfig resolve_preset(const std::string& name) {
    ArchitectureConfig c;
    auto at_least = [&](int rung, int have) { return have >= rung; };
    int rung = -1;
    if (name.size() == 5 && name.rfind("arch", 0) == 0 && name[4] >= '0' && name[4] <= '8')
        rung = name[4] - '0';
    if (rung < 0) throw ConfigError("unknown architecture preset '" + name + "'");
    if (at_least(1, rung)) {
        c.leaky_g = true;
        c.logits_loss = true;
        c.tuned_betas = true;
    }
    if (rung == 2) c.spectral_norm = true;
    if (at_least(3, rung)) {
        c.residual_blocks = true;
        c.bottleneck_blocks = true;
        c.no_batch_in_d = true;
        c.spectral_norm = true;
    }
    if (at_least(4, rung)) c.r1 = true;
    if (at_least(5, rung)) {
        c.lr_g = real(5e-5);
        c.d_steps_per_g = 2;
    }
    if (at_least(6, rung)) c.double_blocks = true;
    if (at_least(7, rung)) c.orthogonal_init = true;
    if (at_least(8, rung)) c.latent_skip = true;
    return c;
}

// ---- anisotropic growth schedule ------------------------------------------------

struct ScheduleEntry {
    Vec3 stride;
    Vec3 kernel;
};

namespace detail {
inline int pow2_log(i64 ratio) {
    if (ratio < 1) return -1;
    int l = 0;
    while (ratio > 1) {
        if (ratio % 2 != 0) return -1;
        ratio /= 2;
        ++l;
    }
    return l;
}
}  // namespace detail

// Early-stop policy: every axis doubles until it reaches its target, then its
// stride and kernel drop to 1 while the other axes keep growing. Uniform
// policy: all axes double on every layer and must need the same layer count.
inline std::vector<ScheduleEntry> stride_schedule(Vec3 latent_spatial, Vec3 target,
                                                  GrowthPolicy policy, int kernel_base) {
    require(kernel_base >= 2 && kernel_base % 2 == 0,
            "stride_schedule: kernel_base must be even and >= 2 for exact doubling");
    int levels[3];
    for (int a = 0; a < 3; ++a) {
        require(latent_spatial[a] >= 1, "stride_schedule: latent extents must be >= 1");
        if (target[a] % latent_spatial[a] != 0)
            throw ConfigError("stride_schedule: target extent not a multiple of latent extent on axis " +
                              std::to_string(a));
        levels[a] = detail::pow2_log(target[a] / latent_spatial[a]);
        if (levels[a] < 0)
            throw ConfigError("stride_schedule: target/latent ratio must be a power of two on axis " +
                              std::to_string(a));
    }
    int depth = std::max({levels[0], levels[1], levels[2]});
    if (policy == GrowthPolicy::Uniform) {
        if (levels[0] != levels[1] || levels[1] != levels[2])
            throw ConfigError("stride_schedule: uniform policy needs equal per-axis layer counts");
        std::vector<ScheduleEntry> out((size_t)(depth));
        for (auto& e : out) {
            e.stride = {2, 2, 2};
            e.kernel = {kernel_base, kernel_base, kernel_base};
        }
        return out;
    }
    std::vector<ScheduleEntry> out;
    Vec3 extent = latent_spatial;
    for (int i = 0; i < depth; ++i) {
        ScheduleEntry e;
        for (int a = 0; a < 3; ++a) {
            if (extent[a] < target[a]) {
                e.stride[a] = 2;
                e.kernel[a] = kernel_base;
                extent[a] *= 2;
            } else {
                e.stride[a] = 1;
                e.kernel[a] = 1;
            }
        }
        out.push_back(e);
    }
    return out;
}

namespace detail {
inline Vec3 up_padding(const ScheduleEntry& e) {
    // stride-2 axes: pad = (k-2)/2 gives exact doubling; collapsed axes: 0.
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = e.stride[a] == 2 ? (e.kernel[a] - 2) / 2 : 0;
    return p;
}

// Output widths of the generator stages, doubling toward the latent, capped
// at 8x base; the discriminator mirrors the reversed list.
inline std::vector<i64> stage_widths(size_t depth, i64 base) {
    std::vector<i64> w(depth);
    for (size_t i = 0; i < depth; ++i) {
        i64 grow = i64(1) << (depth - 1 - i);
        w[i] = std::min(base * grow, base * 8);
    }
    return w;
}
}  // namespace detail

// ---- residual blocks --------------------------------------------------------------

// shortcut(x) + stack(x). The bottleneck stack holds a single spatial
// convolution between two 1x1 projections; the plain stack is two spatial
// convolutions. Upsampling blocks resample with nearest-neighbour repeats in
// the shortcut, downsampling blocks with a strided 1x1 projection.
class ResBlockUp : public Layer {
public:
    ResBlockUp(const std::string& name, i64 cin, i64 cout, const ScheduleEntry& e, bool bottleneck,
               Act act, real slope, bool spectral, bool latent_skip, i64 latent_dim,
               const ConvInit& init, Rng& rng)
        : cin_(cin), cout_(cout), stride_(e.stride) {
        Vec3 pad = detail::up_padding(e);
        auto norm = [&](const std::string& n, i64 c) -> std::unique_ptr<Layer> {
            if (latent_skip)
                return std::make_unique<CondBatchNorm3dLayer>(name + "." + n, c, latent_dim);
            return std::make_unique<BatchNorm3dLayer>(name + "." + n, c);
        };
        auto act_layer = [&] { return std::make_unique<ActivationLayer>(act, slope); };
        if (bottleneck) {
            i64 mid = std::max<i64>(1, cout / 4);
            stack_.push_back(norm("bn1", cin));
            stack_.push_back(act_layer());
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".reduce", cin, mid,
                                                           Vec3{1, 1, 1}, Vec3{1, 1, 1},
                                                           Vec3{0, 0, 0}, spectral, init, rng));
            stack_.push_back(norm("bn2", mid));
            stack_.push_back(act_layer());
            stack_.push_back(std::make_unique<ConvTranspose3dLayer>(name + ".up", mid, mid,
                                                                    e.kernel, e.stride, pad,
                                                                    spectral, init, rng));
            stack_.push_back(norm("bn3", mid));
            stack_.push_back(act_layer());
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".expand", mid, cout,
                                                           Vec3{1, 1, 1}, Vec3{1, 1, 1},
                                                           Vec3{0, 0, 0}, spectral, init, rng));
        } else {
            stack_.push_back(norm("bn1", cin));
            stack_.push_back(act_layer());
            stack_.push_back(std::make_unique<ConvTranspose3dLayer>(name + ".up", cin, cout,
                                                                    e.kernel, e.stride, pad,
                                                                    spectral, init, rng));
            stack_.push_back(norm("bn2", cout));
            stack_.push_back(act_layer());
            Vec3 k3, p3;
            for (int a = 0; a < 3; ++a) {
                k3[a] = e.kernel[a] > 1 ? 3 : 1;
                p3[a] = e.kernel[a] > 1 ? 1 : 0;
            }
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".conv", cout, cout, k3,
                                                           Vec3{1, 1, 1}, p3, spectral, init, rng));
        }
        if (cin != cout)
            proj_ = std::make_unique<Conv3dLayer>(name + ".shortcut", cin, cout, Vec3{1, 1, 1},
                                                  Vec3{1, 1, 1}, Vec3{0, 0, 0}, spectral, init, rng,
                                                  /*bias=*/false);
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        Tensor h = x;
        for (auto& l : stack_) h = l->forward(h, ctx);
        Tensor sc = x;
        if (stride_[0] != 1 || stride_[1] != 1 || stride_[2] != 1)
            sc = upsample_nearest(sc, stride_);
        if (proj_) sc = proj_->forward(sc, ctx);
        return add(h, sc);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        for (auto& l : stack_) l->collect_params(out);
        if (proj_) proj_->collect_params(out);
    }
    void collect_state(std::vector<std::pair<std::string, std::vector<real>*>>& out) override {
        for (auto& l : stack_) l->collect_state(out);
    }
    std::string describe() const override {
        return "resblock_up " + std::to_string(cin_) + "->" + std::to_string(cout_) + " s=" +
               detail::vec3_str(stride_);
    }

private:
    std::vector<std::unique_ptr<Layer>> stack_;
    std::unique_ptr<Conv3dLayer> proj_;
    i64 cin_, cout_;
    Vec3 stride_;
};

class ResBlockDown : public Layer {
public:
    ResBlockDown(const std::string& name, i64 cin, i64 cout, const ScheduleEntry& e,
                 bool bottleneck, bool use_bn, real slope, bool spectral, const ConvInit& init,
                 Rng& rng)
        : cin_(cin), cout_(cout), stride_(e.stride) {
        Vec3 pad = detail::up_padding(e);
        auto maybe_bn = [&](const std::string& n, i64 c) {
            if (use_bn) stack_.push_back(std::make_unique<BatchNorm3dLayer>(name + "." + n, c));
        };
        auto act_layer = [&] {
            stack_.push_back(std::make_unique<ActivationLayer>(Act::LeakyRelu, slope));
        };
        if (bottleneck) {
            i64 mid = std::max<i64>(1, cout / 4);
            maybe_bn("bn1", cin);
            act_layer();
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".reduce", cin, mid,
                                                           Vec3{1, 1, 1}, Vec3{1, 1, 1},
                                                           Vec3{0, 0, 0}, spectral, init, rng));
            maybe_bn("bn2", mid);
            act_layer();
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".down", mid, mid, e.kernel,
                                                           e.stride, pad, spectral, init, rng));
            maybe_bn("bn3", mid);
            act_layer();
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".expand", mid, cout,
                                                           Vec3{1, 1, 1}, Vec3{1, 1, 1},
                                                           Vec3{0, 0, 0}, spectral, init, rng));
        } else {
            maybe_bn("bn1", cin);
            act_layer();
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".down", cin, cout, e.kernel,
                                                           e.stride, pad, spectral, init, rng));
            maybe_bn("bn2", cout);
            act_layer();
            Vec3 k3, p3;
            for (int a = 0; a < 3; ++a) {
                k3[a] = e.kernel[a] > 1 ? 3 : 1;
                p3[a] = e.kernel[a] > 1 ? 1 : 0;
            }
            stack_.push_back(std::make_unique<Conv3dLayer>(name + ".conv", cout, cout, k3,
                                                           Vec3{1, 1, 1}, p3, spectral, init, rng));
        }
        if (cin != cout || e.stride != Vec3{1, 1, 1})
            proj_ = std::make_unique<Conv3dLayer>(name + ".shortcut", cin, cout, Vec3{1, 1, 1},
                                                  e.stride, Vec3{0, 0, 0}, spectral, init, rng,
                                                  /*bias=*/false);
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        Tensor h = x;
        for (auto& l : stack_) h = l->forward(h, ctx);
        Tensor sc = proj_ ? proj_->forward(x, ctx) : x;
        return add(h, sc);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        for (auto& l : stack_) l->collect_params(out);
        if (proj_) proj_->collect_params(out);
    }
    void collect_state(std::vector<std::pair<std::string, std::vector<real>*>>& out) override {
        for (auto& l : stack_) l->collect_state(out);
    }
    std::string describe() const override {
        return "resblock_down " + std::to_string(cin_) + "->" + std::to_string(cout_) + " s=" +
               detail::vec3_str(stride_);
    }

private:
    std::vector<std::unique_ptr<Layer>> stack_;
    std::unique_ptr<Conv3dLayer> proj_;
    i64 cin_, cout_;
    Vec3 stride_;
};

// ---- network builders -----------------------------------------------------------------

// Maps dim x latent_spatial onto channels_out x target_shape; the final layer
// always ends in tanh so outputs lie in [-1, 1].
inline Network build_generator(const ArchitectureConfig& cfg, const LatentSpec& latent, Rng& rng) {
    auto schedule = stride_schedule(latent.spatial, cfg.target_shape, cfg.growth_policy,
                                    cfg.kernel_base);
    size_t depth = schedule.size();
    ConvInit init{cfg.orthogonal_init, real(0.02)};
    Act g_act = cfg.leaky_g ? Act::LeakyRelu : Act::Relu;
    Network net;
    net.name = "generator";
    auto widths = detail::stage_widths(depth, cfg.base_channels);

    if (cfg.residual_blocks) {
        i64 cin = latent.dim;
        for (size_t i = 0; i < depth; ++i) {
            i64 cout = widths[i];
            net.layers.push_back(std::make_unique<ResBlockUp>(
                "g.block" + std::to_string(i), cin, cout, schedule[i], cfg.bottleneck_blocks, g_act,
                cfg.leaky_slope, cfg.spectral_norm, cfg.latent_skip, latent.dim, init, rng));
            if (cfg.double_blocks) {
                ScheduleEntry still{{1, 1, 1}, schedule[i].kernel};
                net.layers.push_back(std::make_unique<ResBlockUp>(
                    "g.block" + std::to_string(i) + "b", cout, cout, still, cfg.bottleneck_blocks,
                    g_act, cfg.leaky_slope, cfg.spectral_norm, cfg.latent_skip, latent.dim, init,
                    rng));
            }
            cin = cout;
        }
        net.layers.push_back(std::make_unique<BatchNorm3dLayer>("g.head_bn", cin));
        net.layers.push_back(std::make_unique<ActivationLayer>(g_act, cfg.leaky_slope));
        Vec3 k3, p3;
        for (int a = 0; a < 3; ++a) {
            k3[a] = cfg.target_shape[a] >= 3 ? 3 : 1;
            p3[a] = cfg.target_shape[a] >= 3 ? 1 : 0;
        }
        net.layers.push_back(std::make_unique<Conv3dLayer>("g.head", cin, cfg.channels_out, k3,
                                                           Vec3{1, 1, 1}, p3, cfg.spectral_norm,
                                                           init, rng));
    } else if (depth == 0) {
        net.layers.push_back(std::make_unique<Conv3dLayer>("g.head", latent.dim, cfg.channels_out,
                                                           Vec3{1, 1, 1}, Vec3{1, 1, 1},
                                                           Vec3{0, 0, 0}, cfg.spectral_norm, init,
                                                           rng));
    } else {
        i64 cin = latent.dim;
        for (size_t i = 0; i < depth; ++i) {
            bool last = i + 1 == depth;
            i64 cout = last ? cfg.channels_out : widths[i];
            net.layers.push_back(std::make_unique<ConvTranspose3dLayer>(
                "g.tconv" + std::to_string(i), cin, cout, schedule[i].kernel, schedule[i].stride,
                detail::up_padding(schedule[i]), cfg.spectral_norm, init, rng));
            if (!last) {
                net.layers.push_back(
                    std::make_unique<BatchNorm3dLayer>("g.bn" + std::to_string(i), cout));
                net.layers.push_back(std::make_unique<ActivationLayer>(g_act, cfg.leaky_slope));
            }
            cin = cout;
        }
    }
    net.layers.push_back(std::make_unique<ActivationLayer>(Act::Tanh));
    return net;
}

// Mirror of the generator schedule with strided convolutions, ending in one
// scalar per batch item; sigmoid-terminated only without logits_loss.
inline Network build_discriminator(const ArchitectureConfig& cfg, const LatentSpec& latent,
                                   Rng& rng) {
    auto schedule = stride_schedule(latent.spatial, cfg.target_shape, cfg.growth_policy,
                                    cfg.kernel_base);
    size_t depth = schedule.size();
    ConvInit init{cfg.orthogonal_init, real(0.02)};
    Network net;
    net.name = "discriminator";
    auto widths = detail::stage_widths(depth, cfg.base_channels);

    if (cfg.residual_blocks) {
        i64 cin = cfg.channels_out;
        for (size_t i = 0; i < depth; ++i) {
            const ScheduleEntry& e = schedule[depth - 1 - i];
            i64 cout = widths[depth - 1 - i];
            net.layers.push_back(std::make_unique<ResBlockDown>(
                "d.block" + std::to_string(i), cin, cout, e, cfg.bottleneck_blocks,
                !cfg.no_batch_in_d, cfg.leaky_slope, cfg.spectral_norm, init, rng));
            if (cfg.double_blocks) {
                ScheduleEntry still{{1, 1, 1}, e.kernel};
                net.layers.push_back(std::make_unique<ResBlockDown>(
                    "d.block" + std::to_string(i) + "b", cout, cout, still, cfg.bottleneck_blocks,
                    !cfg.no_batch_in_d, cfg.leaky_slope, cfg.spectral_norm, init, rng));
            }
            cin = cout;
        }
        net.layers.push_back(std::make_unique<ActivationLayer>(Act::LeakyRelu, cfg.leaky_slope));
        net.layers.push_back(std::make_unique<Conv3dLayer>("d.head", cin, 1, latent.spatial,
                                                           Vec3{1, 1, 1}, Vec3{0, 0, 0},
                                                           cfg.spectral_norm, init, rng));
    } else {
        i64 cin = cfg.channels_out;
        for (size_t i = 0; i < depth; ++i) {
            const ScheduleEntry& e = schedule[depth - 1 - i];
            i64 cout = widths[depth - 1 - i];
            net.layers.push_back(std::make_unique<Conv3dLayer>(
                "d.conv" + std::to_string(i), cin, cout, e.kernel, e.stride, detail::up_padding(e),
                cfg.spectral_norm, init, rng));
            if (i > 0 && !cfg.no_batch_in_d)
                net.layers.push_back(
                    std::make_unique<BatchNorm3dLayer>("d.bn" + std::to_string(i), cout));
            net.layers.push_back(std::make_unique<ActivationLayer>(Act::LeakyRelu, cfg.leaky_slope));
            cin = cout;
        }
        net.layers.push_back(std::make_unique<Conv3dLayer>("d.head", cin, 1, latent.spatial,
                                                           Vec3{1, 1, 1}, Vec3{0, 0, 0},
                                                           cfg.spectral_norm, init, rng));
    }
    net.layers.push_back(std::make_unique<FlattenLayer>());
    if (!cfg.logits_loss) net.layers.push_back(std::make_unique<ActivationLayer>(Act::Sigmoid));
    return net;
}

// [N,dz,sx,sy,sz] -> [N,dz]; the skip-connection view of a spatial latent.
inline Tensor latent_vector(const Tensor& z) {
    const Shape& s = z.shape();
    require(s.size() == 5, "latent tensor must be [N,dz,sx,sy,sz]");
    i64 sp = s[2] * s[3] * s[4];
    return mul_const(spatial_sum(z), real(1) / real(sp));
}

inline Tensor run_generator(const Network& g, const Tensor& z, bool train) {
    ForwardCtx ctx;
    ctx.train = train;
    ctx.latent = latent_vector(z);
    return g.forward(z, ctx);
}

inline Tensor run_discriminator(const Network& d, const Tensor& x, bool train) {
    ForwardCtx ctx;
    ctx.train = train;
    return d.forward(x, ctx);
}

}  // namespace fluvgan
