#pragma once

#include <memory>
#include <optional>

#include "conv.hpp"

namespace fluvgan {

// Trainable tensor plus its optimizer and spectral-normalization state.
struct Parameter {
    std::string name;
    Tensor value;  // leaf, requires_grad
    rvec adam_m, adam_v;
    i64 step_count = 0;
    rvec spectral_u;  // persisted left singular vector estimate

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        value.set_requires_grad(true);
    }
};

// ---- initializers -------------------------------------------------------------

inline void init_normal(rvec& w, real stddev, Rng& rng) {
    for (real& x : w) x = real(rng.normal() * stddev);
}

inline void init_zero(rvec& w) { std::fill(w.begin(), w.end(), real(0)); }

namespace detail {

// Weight-as-matrix view with output channels as rows and everything else
// flattened as columns. Convolution weights [Co,Ci,k...] have rows on axis 0;
// transposed-convolution weights [Ci,Co,k...] on axis 1.
struct MatView {
    i64 rows = 0, cols = 0;
};

inline MatView weight_mat_dims(const Shape& s, int rows_axis) {
    MatView m;
    m.rows = s[size_t(rows_axis)];
    m.cols = 1;
    for (size_t i = 0; i < s.size(); ++i)
        if (int(i) != rows_axis) m.cols *= s[i];
    return m;
}

inline void gather_mat(const rvec& w, const Shape& s, int rows_axis,
                       rvec& m) {
    MatView v = weight_mat_dims(s, rows_axis);
    m.resize(size_t(v.rows * v.cols));
    if (rows_axis == 0) {
        std::copy(w.begin(), w.end(), m.begin());
        return;
    }
    // [A, B, rest] with rows = B on axis 1: M[b, a*rest + t] = w[(a*B + b)*rest + t]
    i64 a_n = s[0], b_n = s[1], rest = v.cols / a_n;
    for (i64 a = 0; a < a_n; ++a)
        for (i64 b = 0; b < b_n; ++b)
            for (i64 t = 0; t < rest; ++t)
                m[size_t(b * v.cols + a * rest + t)] = w[size_t((a * b_n + b) * rest + t)];
}

inline void scatter_mat(const rvec& m, const Shape& s, int rows_axis,
                        rvec& w) {
    MatView v = weight_mat_dims(s, rows_axis);
    if (rows_axis == 0) {
        std::copy(m.begin(), m.end(), w.begin());
        return;
    }
    i64 a_n = s[0], b_n = s[1], rest = v.cols / a_n;
    for (i64 a = 0; a < a_n; ++a)
        for (i64 b = 0; b < b_n; ++b)
            for (i64 t = 0; t < rest; ++t)
                w[size_t((a * b_n + b) * rest + t)] = m[size_t(b * v.cols + a * rest + t)];
}

// Modified Gram-Schmidt on the shorter side of a random normal matrix.
inline void orthogonalize(rvec& m, i64 rows, i64 cols) {
    bool by_rows = rows <= cols;
    i64 nvec = by_rows ? rows : cols;
    i64 dim = by_rows ? cols : rows;
    auto at = [&](i64 v, i64 d) -> real& {
        return by_rows ? m[size_t(v * cols + d)] : m[size_t(d * cols + v)];
    };
    for (i64 i = 0; i < nvec; ++i) {
        for (i64 j = 0; j < i; ++j) {
            real dot = 0;
            for (i64 d = 0; d < dim; ++d) dot += at(i, d) * at(j, d);
            for (i64 d = 0; d < dim; ++d) at(i, d) -= dot * at(j, d);
        }
        real nrm = 0;
        for (i64 d = 0; d < dim; ++d) nrm += at(i, d) * at(i, d);
        nrm = std::sqrt(nrm);
        if (nrm < real(1e-12)) nrm = real(1);  // astronomically unlikely with normal draws
        for (i64 d = 0; d < dim; ++d) at(i, d) /= nrm;
    }
}

}  // namespace detail

// Reshapes with output channels as rows, orthogonalizes, writes back.
inline void init_orthogonal(rvec& w, const Shape& shape, int rows_axis, Rng& rng) {
    detail::MatView v = detail::weight_mat_dims(shape, rows_axis);
    rvec m((size_t)(v.rows * v.cols));
    init_normal(m, real(1), rng);
    detail::orthogonalize(m, v.rows, v.cols);
    detail::scatter_mat(m, shape, rows_axis, w);
}

// ---- spectral normalization ----------------------------------------------------

// Divides the weight by a power-iteration estimate of its top singular value.
// The estimate is treated as a constant in the backward pass; spectral_u is
// persisted across calls and advanced only when update_state is set.
inline Tensor spectral_normalize(Parameter& p, int n_power_iterations = 1,
                                 bool update_state = true, int rows_axis = 0) {
    const Shape& s = p.value.shape();
    detail::MatView mv = detail::weight_mat_dims(s, rows_axis);
    rvec m;
    detail::gather_mat(p.value.data(), s, rows_axis, m);

    rvec u = p.spectral_u;
    if (i64(u.size()) != mv.rows) {
        Rng r(Rng::mix64(std::hash<std::string>{}(p.name)));
        u.resize(size_t(mv.rows));
        init_normal(u, real(1), r);
        real nrm = 0;
        for (real x : u) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (real& x : u) x /= nrm > 0 ? nrm : real(1);
    }

    rvec v((size_t)(mv.cols));
    real sigma = 0;
    for (int it = 0; it < n_power_iterations; ++it) {
        // v = normalize(M^T u)
        real nv = 0;
        for (i64 c = 0; c < mv.cols; ++c) {
            real acc = 0;
            for (i64 r = 0; r < mv.rows; ++r) acc += m[size_t(r * mv.cols + c)] * u[size_t(r)];
            v[size_t(c)] = acc;
            nv += acc * acc;
        }
        nv = std::sqrt(nv);
        if (nv < real(1e-24)) break;  // zero weight; keep previous u
        for (real& x : v) x /= nv;
        // u = normalize(M v)
        real nu = 0;
        for (i64 r = 0; r < mv.rows; ++r) {
            real acc = 0;
            const real* row = m.data() + r * mv.cols;
            for (i64 c = 0; c < mv.cols; ++c) acc += row[c] * v[size_t(c)];
            u[size_t(r)] = acc;
            nu += acc * acc;
        }
        nu = std::sqrt(nu);
        if (nu < real(1e-24)) break;
        for (real& x : u) x /= nu;
        sigma = nu;  // after normalizing v, ||Mv|| is the Rayleigh estimate
    }
    // sigma = u^T M v with the final vectors
    if (sigma > 0) {
        real acc = 0;
        for (i64 r = 0; r < mv.rows; ++r) {
            const real* row = m.data() + r * mv.cols;
            real dot = 0;
            for (i64 c = 0; c < mv.cols; ++c) dot += row[c] * v[size_t(c)];
            acc += u[size_t(r)] * dot;
        }
        sigma = acc;
    }
    if (update_state) p.spectral_u = u;
    if (sigma < real(1e-12)) sigma = real(1e-12);
    return mul_const(p.value, real(1) / sigma);
}

// ---- batch normalization --------------------------------------------------------

struct RunningStats {
    rvec mean, var;
    explicit RunningStats(i64 channels = 0)
        : mean(size_t(channels), real(0)), var(size_t(channels), real(1)) {}
};

namespace detail {
struct BnCore {
    Tensor normalized;  // (x - mean) / sqrt(var + eps)
};

inline BnCore batch_norm_standardize(const Tensor& x, RunningStats& rs, bool train, real eps,
                                     real momentum) {
    i64 n, c, sp;
    split_ncs(x.shape(), n, c, sp);
    require(i64(rs.mean.size()) == c, "batch_norm: running stats channel mismatch");
    if (train) {
        if (n < 2) throw ConfigError("batch_norm: training mode needs a batch of at least 2");
        real inv_m = real(1) / real(n * sp);
        Tensor mu = mul_const(channel_sum(x), inv_m);
        Tensor xc = sub_channel(x, mu);
        Tensor var = mul_const(channel_sum_sq(xc), inv_m);
        Tensor inv = reciprocal(vsqrt(add_const(var, eps)));
        const auto& mu_d = mu.data();
        const auto& var_d = var.data();
        for (i64 i = 0; i < c; ++i) {
            rs.mean[size_t(i)] = momentum * rs.mean[size_t(i)] + (real(1) - momentum) * mu_d[size_t(i)];
            rs.var[size_t(i)] = momentum * rs.var[size_t(i)] + (real(1) - momentum) * var_d[size_t(i)];
        }
        return {mul_channel(xc, inv)};
    }
    rvec inv_d((size_t)(c)), mu_d((size_t)(c));
    for (i64 i = 0; i < c; ++i) {
        inv_d[size_t(i)] = real(1) / std::sqrt(rs.var[size_t(i)] + eps);
        mu_d[size_t(i)] = rs.mean[size_t(i)];
    }
    Tensor xc = sub_channel(x, Tensor::from({c}, std::move(mu_d)));
    return {mul_channel(xc, Tensor::from({c}, std::move(inv_d)))};
}
}  // namespace detail

// Per-channel standardization over batch and spatial axes, then affine
// (gamma, beta). Running statistics advance by exponential moving average in
// train mode and drive eval mode.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         RunningStats& rs, bool train, real eps = real(1e-5),
                         real momentum = real(0.9)) {
    auto core = detail::batch_norm_standardize(x, rs, train, eps, momentum);
    return affine_channel(core.normalized, gamma, beta);
}

// Batch norm whose affine parameters are projections of a latent vector:
// gamma = 1 + W_g z, beta = W_b z, per batch item.
inline Tensor conditional_batch_norm(const Tensor& x, const Tensor& latent, const Tensor& w_gamma,
                                     const Tensor& w_beta, RunningStats& rs, bool train,
                                     real eps = real(1e-5), real momentum = real(0.9)) {
    Tensor z = latent.rank() == 1 ? reshape(latent, {1, latent.numel()}) : latent;
    if (z.rank() != 2) throw ConfigError("conditional_batch_norm: latent must be [dz] or [N,dz]");
    i64 n = x.shape()[0];
    if (z.shape()[0] != n)
        throw ConfigError("conditional_batch_norm: latent batch does not match input batch");
    auto core = detail::batch_norm_standardize(x, rs, train, eps, momentum);
    Tensor gamma_nc = add_const(matmul_nt(z, w_gamma), real(1));
    Tensor beta_nc = matmul_nt(z, w_beta);
    return affine_nc(core.normalized, gamma_nc, beta_nc);
}

// ---- layers ---------------------------------------------------------------------

struct ForwardCtx {
    bool train = false;
    Tensor latent;  // [N, dz]; consumed by conditional batch norm layers
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, const ForwardCtx& ctx) = 0;
    virtual void collect_params(std::vector<Parameter*>&) {}
    virtual void collect_state(std::vector<std::pair<std::string, rvec*>>&) {}
    virtual std::string describe() const = 0;
};

namespace detail {
inline std::string vec3_str(Vec3 v) {
    return std::to_string(v[0]) + "x" + std::to_string(v[1]) + "x" + std::to_string(v[2]);
}
}  // namespace detail

struct ConvInit {
    bool orthogonal = false;
    real normal_std = real(0.02);
};

class Conv3dLayer : public Layer {
public:
    Conv3dLayer(const std::string& name, i64 cin, i64 cout, Vec3 k, Vec3 stride, Vec3 pad,
                bool spectral, const ConvInit& init, Rng& rng, bool bias = true)
        : stride_(stride), pad_(pad), spectral_(spectral), cin_(cin), cout_(cout), k_(k) {
        Shape ws{cout, cin, k[0], k[1], k[2]};
        w_ = Parameter(name + ".weight", Tensor::zeros(ws));
        if (init.orthogonal)
            init_orthogonal(w_.value.data(), ws, 0, rng);
        else
            init_normal(w_.value.data(), init.normal_std, rng);
        if (bias) b_ = Parameter(name + ".bias", Tensor::zeros({cout}));
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        Tensor w = spectral_ ? spectral_normalize(w_, power_iterations, ctx.train, 0) : w_.value;
        return conv3d(x, w, b_ ? b_->value : Tensor(), stride_, pad_);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        out.push_back(&w_);
        if (b_) out.push_back(&*b_);
    }

    std::string describe() const override {
        return "conv3d " + std::to_string(cin_) + "->" + std::to_string(cout_) + " k=" +
               detail::vec3_str(k_) + " s=" + detail::vec3_str(stride_) + " p=" +
               detail::vec3_str(pad_) + (spectral_ ? " spectral" : "");
    }

    Parameter& weight() { return w_; }
    int power_iterations = 1;

private:
    Parameter w_;
    std::optional<Parameter> b_;
    Vec3 stride_, pad_;
    bool spectral_;
    i64 cin_, cout_;
    Vec3 k_;
};

class ConvTranspose3dLayer : public Layer {
public:
    ConvTranspose3dLayer(const std::string& name, i64 cin, i64 cout, Vec3 k, Vec3 stride, Vec3 pad,
                         bool spectral, const ConvInit& init, Rng& rng, bool bias = true)
        : stride_(stride), pad_(pad), spectral_(spectral), cin_(cin), cout_(cout), k_(k) {
        Shape ws{cin, cout, k[0], k[1], k[2]};
        w_ = Parameter(name + ".weight", Tensor::zeros(ws));
        if (init.orthogonal)
            init_orthogonal(w_.value.data(), ws, 1, rng);
        else
            init_normal(w_.value.data(), init.normal_std, rng);
        if (bias) b_ = Parameter(name + ".bias", Tensor::zeros({cout}));
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        Tensor w = spectral_ ? spectral_normalize(w_, power_iterations, ctx.train, 1) : w_.value;
        return conv3d_transposed(x, w, b_ ? b_->value : Tensor(), stride_, pad_);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        out.push_back(&w_);
        if (b_) out.push_back(&*b_);
    }

    std::string describe() const override {
        return "tconv3d " + std::to_string(cin_) + "->" + std::to_string(cout_) + " k=" +
               detail::vec3_str(k_) + " s=" + detail::vec3_str(stride_) + " p=" +
               detail::vec3_str(pad_) + (spectral_ ? " spectral" : "");
    }

    Parameter& weight() { return w_; }
    int power_iterations = 1;

private:
    Parameter w_;
    std::optional<Parameter> b_;
    Vec3 stride_, pad_;
    bool spectral_;
    i64 cin_, cout_;
    Vec3 k_;
};

class BatchNorm3dLayer : public Layer {
public:
    BatchNorm3dLayer(const std::string& name, i64 channels, real eps = real(1e-5),
                     real momentum = real(0.9))
        : name_(name), rs_(channels), eps_(eps), momentum_(momentum), channels_(channels) {
        gamma_ = Parameter(name + ".gamma", Tensor::full({channels}, real(1)));
        beta_ = Parameter(name + ".beta", Tensor::zeros({channels}));
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        return batch_norm(x, gamma_.value, beta_.value, rs_, ctx.train, eps_, momentum_);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }
    void collect_state(std::vector<std::pair<std::string, rvec*>>& out) override {
        out.emplace_back(name_ + ".running_mean", &rs_.mean);
        out.emplace_back(name_ + ".running_var", &rs_.var);
    }
    std::string describe() const override {
        return "batch_norm c=" + std::to_string(channels_);
    }

private:
    std::string name_;
    Parameter gamma_, beta_;
    RunningStats rs_;
    real eps_, momentum_;
    i64 channels_;
};

class CondBatchNorm3dLayer : public Layer {
public:
    CondBatchNorm3dLayer(const std::string& name, i64 channels, i64 latent_dim,
                         real eps = real(1e-5), real momentum = real(0.9))
        : name_(name), rs_(channels), eps_(eps), momentum_(momentum), channels_(channels),
          latent_dim_(latent_dim) {
        // Zero projections start the block as an unconditional batch norm.
        wg_ = Parameter(name + ".w_gamma", Tensor::zeros({channels, latent_dim}));
        wb_ = Parameter(name + ".w_beta", Tensor::zeros({channels, latent_dim}));
    }

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
        if (!ctx.latent.defined())
            throw ConfigError("conditional batch norm '" + name_ + "' needs a latent vector");
        return conditional_batch_norm(x, ctx.latent, wg_.value, wb_.value, rs_, ctx.train, eps_,
                                      momentum_);
    }

    void collect_params(std::vector<Parameter*>& out) override {
        out.push_back(&wg_);
        out.push_back(&wb_);
    }
    void collect_state(std::vector<std::pair<std::string, rvec*>>& out) override {
        out.emplace_back(name_ + ".running_mean", &rs_.mean);
        out.emplace_back(name_ + ".running_var", &rs_.var);
    }
    std::string describe() const override {
        return "cond_batch_norm c=" + std::to_string(channels_) + " dz=" +
               std::to_string(latent_dim_);
    }

private:
    std::string name_;
    Parameter wg_, wb_;
    RunningStats rs_;
    real eps_, momentum_;
    i64 channels_, latent_dim_;
};

enum class Act { Relu, LeakyRelu, Tanh, Sigmoid };

class ActivationLayer : public Layer {
public:
    explicit ActivationLayer(Act kind, real slope = real(0.2)) : kind_(kind), slope_(slope) {}
    Tensor forward(const Tensor& x, const ForwardCtx&) override {
        switch (kind_) {
            case Act::Relu: return relu(x);
            case Act::LeakyRelu: return leaky_relu(x, slope_);
            case Act::Tanh: return vtanh(x);
            case Act::Sigmoid: return sigmoid(x);
        }
        throw ConfigError("unknown activation");
    }
    std::string describe() const override {
        switch (kind_) {
            case Act::Relu: return "relu";
            case Act::LeakyRelu: return "leaky_relu(" + std::to_string(slope_) + ")";
            case Act::Tanh: return "tanh";
            case Act::Sigmoid: return "sigmoid";
        }
        return "?";
    }

private:
    Act kind_;
    real slope_;
};

// [N,C,1,1,1] -> [N,C]
class FlattenLayer : public Layer {
public:
    Tensor forward(const Tensor& x, const ForwardCtx&) override {
        const Shape& s = x.shape();
        require(s.size() == 5, "flatten expects [N,C,X,Y,Z]");
        return reshape(x, {s[0], s[1] * s[2] * s[3] * s[4]});
    }
    std::string describe() const override { return "flatten"; }
};

struct Network {
    std::string name;
    std::vector<std::unique_ptr<Layer>> layers;

    Tensor forward(const Tensor& x, const ForwardCtx& ctx) const {
        Tensor h = x;
        for (const auto& l : layers) h = l->forward(h, ctx);
        return h;
    }

    std::vector<Parameter*> parameters() const {
        std::vector<Parameter*> out;
        for (const auto& l : layers) l->collect_params(out);
        return out;
    }

    std::vector<std::pair<std::string, rvec*>> state_buffers() const {
        std::vector<std::pair<std::string, rvec*>> out;
        for (const auto& l : layers) l->collect_state(out);
        return out;
    }

    i64 parameter_count() const {
        i64 n = 0;
        for (Parameter* p : parameters()) n += p->value.numel();
        return n;
    }

    // Structured text dump: per-layer kind, output shape, parameter count.
    std::string describe(const Shape& input_shape) const {
        NoGradGuard ng;
        ForwardCtx ctx;
        Tensor h = Tensor::zeros(input_shape);
        if (input_shape.size() == 5) {
            i64 sp = 1;
            for (size_t i = 2; i < input_shape.size(); ++i) sp *= input_shape[i];
            ctx.latent = mul_const(spatial_sum(h), real(1) / real(sp));
        }
        std::string out = name + " (input " + shape_str(input_shape) + ")\n";
        for (const auto& l : layers) {
            h = l->forward(h, ctx);
            std::vector<Parameter*> ps;
            l->collect_params(ps);
            i64 np = 0;
            for (Parameter* p : ps) np += p->value.numel();
            out += "  " + l->describe() + " -> " + shape_str(h.shape()) + "  params=" +
                   std::to_string(np) + "\n";
        }
        out += "  total parameters: " + std::to_string(parameter_count()) + "\n";
        return out;
    }
};

inline void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->value.zero_grad();
}

inline void set_requires_grad(const std::vector<Parameter*>& params, bool rg) {
    for (Parameter* p : params) p->value.set_requires_grad(rg);
}

}  // namespace fluvgan
