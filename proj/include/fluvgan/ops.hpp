#pragma once

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "tensor.hpp"

namespace fluvgan {

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}
}  // namespace detail

inline Tensor reciprocal(const Tensor& a);

// ---- elementwise ------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    const auto &A = a.data(), &B = b.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
    return make_op("add", a.shape(), std::move(out), {a, b},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = g;
                       if (need[1]) r[1] = g;
                       return r;
                   });
}

inline Tensor neg(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = -A[i];
    return make_op("neg", a.shape(), std::move(out), {a},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = neg(g);
                       return r;
                   });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    const auto &A = a.data(), &B = b.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
    return make_op("sub", a.shape(), std::move(out), {a, b},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = g;
                       if (need[1]) r[1] = neg(g);
                       return r;
                   });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    const auto &A = a.data(), &B = b.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return make_op("mul", a.shape(), std::move(out), {a, b},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = mul(g, self.parents()[1]);
                       if (need[1]) r[1] = mul(g, self.parents()[0]);
                       return r;
                   });
}

inline Tensor add_const(const Tensor& a, real c) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] + c;
    return make_op("add_const", a.shape(), std::move(out), {a},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = g;
                       return r;
                   });
}

inline Tensor mul_const(const Tensor& a, real c) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * c;
    return make_op("mul_const", a.shape(), std::move(out), {a},
                   [c](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul_const(g, c);
                       return r;
                   });
}

inline Tensor vlog(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(A[i]);
    return make_op("log", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul(g, reciprocal(self.parents()[0]));
                       return r;
                   });
}

inline Tensor reciprocal(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = real(1) / A[i];
    return make_op("reciprocal", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = neg(mul(g, mul(self, self)));
                       return r;
                   });
}

inline Tensor vsqrt(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(A[i]);
    return make_op("sqrt", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul_const(mul(g, reciprocal(self)), real(0.5));
                       return r;
                   });
}

// ---- activations ------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] > real(0) ? A[i] : real(0);
    return make_op("relu", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (!need[0]) return r;
                       const auto& X = self.parents()[0].data();
                       rvec m(X.size());
                       for (size_t i = 0; i < m.size(); ++i) m[i] = X[i] >= real(0) ? real(1) : real(0);
                       r[0] = mul(g, Tensor::from(self.shape(), std::move(m)));
                       return r;
                   });
}

inline Tensor leaky_relu(const Tensor& a, real slope = real(0.2)) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] >= real(0) ? A[i] : slope * A[i];
    return make_op("leaky_relu", a.shape(), std::move(out), {a},
                   [slope](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (!need[0]) return r;
                       const auto& X = self.parents()[0].data();
                       rvec m(X.size());
                       for (size_t i = 0; i < m.size(); ++i) m[i] = X[i] >= real(0) ? real(1) : slope;
                       r[0] = mul(g, Tensor::from(self.shape(), std::move(m)));
                       return r;
                   });
}

inline Tensor vtanh(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(A[i]);
    return make_op("tanh", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul(g, add_const(neg(mul(self, self)), real(1)));
                       return r;
                   });
}

inline Tensor sigmoid(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) {
        real x = A[i];
        out[i] = x >= real(0) ? real(1) / (real(1) + std::exp(-x))
                              : std::exp(x) / (real(1) + std::exp(x));
    }
    return make_op("sigmoid", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul(g, mul(self, add_const(neg(self), real(1))));
                       return r;
                   });
}

// softplus(x) = log(1 + e^x), evaluated in the stable branch form.
inline Tensor softplus(const Tensor& a) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) {
        real x = A[i];
        out[i] = std::max(x, real(0)) + std::log1p(std::exp(-std::abs(x)));
    }
    return make_op("softplus", a.shape(), std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul(g, sigmoid(self.parents()[0]));
                       return r;
                   });
}

inline Tensor clamp(const Tensor& a, real lo, real hi) {
    const auto& A = a.data();
    rvec out(A.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(A[i], lo), hi);
    return make_op("clamp", a.shape(), std::move(out), {a},
                   [lo, hi](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (!need[0]) return r;
                       const auto& X = self.parents()[0].data();
                       rvec m(X.size());
                       for (size_t i = 0; i < m.size(); ++i)
                           m[i] = (X[i] >= lo && X[i] <= hi) ? real(1) : real(0);
                       r[0] = mul(g, Tensor::from(self.shape(), std::move(m)));
                       return r;
                   });
}

// ---- reductions and broadcasts ----------------------------------------------

inline Tensor scalar_expand(const Tensor& s, const Shape& shape);

inline Tensor sum_all(const Tensor& a) {
    const auto& A = a.data();
    real acc = 0;
    for (real x : A) acc += x;
    Shape orig = a.shape();
    return make_op("sum_all", {1}, {acc}, {a},
                   [orig](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = scalar_expand(g, orig);
                       return r;
                   });
}

inline Tensor scalar_expand(const Tensor& s, const Shape& shape) {
    if (s.numel() != 1) throw ConfigError("scalar_expand: source must be scalar");
    rvec out((size_t)(numel(shape)), s.data()[0]);
    return make_op("scalar_expand", shape, std::move(out), {s},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = sum_all(g);
                       return r;
                   });
}

inline Tensor mean_all(const Tensor& a) { return mul_const(sum_all(a), real(1) / real(a.numel())); }

namespace detail {
inline void split_ncs(const Shape& s, i64& n, i64& c, i64& sp) {
    if (s.size() < 2) throw ConfigError("expected tensor of rank >= 2 in [N,C,...] layout");
    n = s[0];
    c = s[1];
    sp = 1;
    for (size_t i = 2; i < s.size(); ++i) sp *= s[i];
}
}  // namespace detail

inline Tensor channel_expand(const Tensor& v, const Shape& shape);

// [N,C,...] -> [C], summing batch and spatial axes.
inline Tensor channel_sum(const Tensor& a) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    const auto& A = a.data();
    rvec out((size_t)(c), real(0));
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic) {
            const real* row = A.data() + (in * c + ic) * sp;
            real acc = 0;
            for (i64 is = 0; is < sp; ++is) acc += row[is];
            out[size_t(ic)] += acc;
        }
    Shape orig = a.shape();
    return make_op("channel_sum", {c}, std::move(out), {a},
                   [orig](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = channel_expand(g, orig);
                       return r;
                   });
}

// [C] -> [N,C,...]
inline Tensor channel_expand(const Tensor& v, const Shape& shape) {
    i64 n, c, sp;
    detail::split_ncs(shape, n, c, sp);
    if (v.numel() != c) throw ConfigError("channel_expand: channel count mismatch");
    const auto& V = v.data();
    rvec out((size_t)(n * c * sp));
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic) {
            real* row = out.data() + (in * c + ic) * sp;
            real x = V[size_t(ic)];
            for (i64 is = 0; is < sp; ++is) row[is] = x;
        }
    return make_op("channel_expand", shape, std::move(out), {v},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = channel_sum(g);
                       return r;
                   });
}

inline Tensor nc_expand(const Tensor& v, const Shape& shape);

// [N,C,...] -> [N,C], summing spatial axes only.
inline Tensor spatial_sum(const Tensor& a) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    const auto& A = a.data();
    rvec out((size_t)(n * c));
    for (i64 i = 0; i < n * c; ++i) {
        const real* row = A.data() + i * sp;
        real acc = 0;
        for (i64 is = 0; is < sp; ++is) acc += row[is];
        out[size_t(i)] = acc;
    }
    Shape orig = a.shape();
    return make_op("spatial_sum", {n, c}, std::move(out), {a},
                   [orig](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = nc_expand(g, orig);
                       return r;
                   });
}

// [N,C] -> [N,C,...]
inline Tensor nc_expand(const Tensor& v, const Shape& shape) {
    i64 n, c, sp;
    detail::split_ncs(shape, n, c, sp);
    if (v.numel() != n * c) throw ConfigError("nc_expand: batch/channel count mismatch");
    const auto& V = v.data();
    rvec out((size_t)(n * c * sp));
    for (i64 i = 0; i < n * c; ++i) {
        real* row = out.data() + i * sp;
        real x = V[size_t(i)];
        for (i64 is = 0; is < sp; ++is) row[is] = x;
    }
    return make_op("nc_expand", shape, std::move(out), {v},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = spatial_sum(g);
                       return r;
                   });
}

inline Tensor mul_channel(const Tensor& a, const Tensor& v);

// y = x - v[C] broadcast over [N,C,...]; fused so batch norm does not
// materialize the broadcast.
inline Tensor sub_channel(const Tensor& a, const Tensor& v) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    if (v.numel() != c) throw ConfigError("sub_channel: channel count mismatch");
    const auto &A = a.data(), &V = v.data();
    rvec out(A.size());
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real* dst = out.data() + i * sp;
        real x = V[size_t(i % c)];
        for (i64 s = 0; s < sp; ++s) dst[s] = src[s] - x;
    }
    return make_op("sub_channel", a.shape(), std::move(out), {a, v},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = g;
                       if (need[1]) r[1] = neg(channel_sum(g));
                       return r;
                   });
}

// y = x * v[C] broadcast over [N,C,...].
inline Tensor mul_channel(const Tensor& a, const Tensor& v) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    if (v.numel() != c) throw ConfigError("mul_channel: channel count mismatch");
    const auto &A = a.data(), &V = v.data();
    rvec out(A.size());
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real* dst = out.data() + i * sp;
        real x = V[size_t(i % c)];
        for (i64 s = 0; s < sp; ++s) dst[s] = src[s] * x;
    }
    return make_op("mul_channel", a.shape(), std::move(out), {a, v},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = mul_channel(g, self.parents()[1]);
                       if (need[1]) r[1] = channel_sum(mul(g, self.parents()[0]));
                       return r;
                   });
}

// [N,C,...] -> [C], summing squares over batch and spatial axes.
inline Tensor channel_sum_sq(const Tensor& a) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    const auto& A = a.data();
    rvec out((size_t)(c), real(0));
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real acc = 0;
        for (i64 s = 0; s < sp; ++s) acc += src[s] * src[s];
        out[size_t(i % c)] += acc;
    }
    return make_op("channel_sum_sq", {c}, std::move(out), {a},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = mul_const(mul_channel(self.parents()[0], g), real(2));
                       return r;
                   });
}

// y = x * scale[C] + shift[C], both broadcast over [N,C,...].
inline Tensor affine_channel(const Tensor& a, const Tensor& scale, const Tensor& shift) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    if (scale.numel() != c || shift.numel() != c)
        throw ConfigError("affine_channel: channel count mismatch");
    const auto &A = a.data(), &S = scale.data(), &B = shift.data();
    rvec out(A.size());
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real* dst = out.data() + i * sp;
        real s_ = S[size_t(i % c)], b_ = B[size_t(i % c)];
        for (i64 s = 0; s < sp; ++s) dst[s] = src[s] * s_ + b_;
    }
    return make_op("affine_channel", a.shape(), std::move(out), {a, scale, shift},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(3);
                       if (need[0]) r[0] = mul_channel(g, self.parents()[1]);
                       if (need[1]) r[1] = channel_sum(mul(g, self.parents()[0]));
                       if (need[2]) r[2] = channel_sum(g);
                       return r;
                   });
}

inline Tensor mul_nc(const Tensor& a, const Tensor& v);

// y = x * scale[N,C] + shift[N,C], per-item affine used by conditional batch
// norm.
inline Tensor affine_nc(const Tensor& a, const Tensor& scale, const Tensor& shift) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    if (scale.numel() != n * c || shift.numel() != n * c)
        throw ConfigError("affine_nc: batch/channel count mismatch");
    const auto &A = a.data(), &S = scale.data(), &B = shift.data();
    rvec out(A.size());
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real* dst = out.data() + i * sp;
        real s_ = S[size_t(i)], b_ = B[size_t(i)];
        for (i64 s = 0; s < sp; ++s) dst[s] = src[s] * s_ + b_;
    }
    return make_op("affine_nc", a.shape(), std::move(out), {a, scale, shift},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(3);
                       if (need[0]) r[0] = mul_nc(g, self.parents()[1]);
                       if (need[1]) r[1] = spatial_sum(mul(g, self.parents()[0]));
                       if (need[2]) r[2] = spatial_sum(g);
                       return r;
                   });
}

// y = x * v[N,C] broadcast over spatial axes.
inline Tensor mul_nc(const Tensor& a, const Tensor& v) {
    i64 n, c, sp;
    detail::split_ncs(a.shape(), n, c, sp);
    if (v.numel() != n * c) throw ConfigError("mul_nc: batch/channel count mismatch");
    const auto &A = a.data(), &V = v.data();
    rvec out(A.size());
    for (i64 i = 0; i < n * c; ++i) {
        const real* src = A.data() + i * sp;
        real* dst = out.data() + i * sp;
        real x = V[size_t(i)];
        for (i64 s = 0; s < sp; ++s) dst[s] = src[s] * x;
    }
    return make_op("mul_nc", a.shape(), std::move(out), {a, v},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = mul_nc(g, self.parents()[1]);
                       if (need[1]) r[1] = spatial_sum(mul(g, self.parents()[0]));
                       return r;
                   });
}

inline Tensor item_expand(const Tensor& v, const Shape& shape);

// [N,...] -> [N], summing everything but the batch axis.
inline Tensor item_sum(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.empty()) throw ConfigError("item_sum: rank >= 1 required");
    i64 n = s[0];
    i64 sp = n > 0 ? a.numel() / n : 0;
    const auto& A = a.data();
    rvec out(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        const real* row = A.data() + i * sp;
        real acc = 0;
        for (i64 is = 0; is < sp; ++is) acc += row[is];
        out[size_t(i)] = acc;
    }
    Shape orig = s;
    return make_op("item_sum", {n}, std::move(out), {a},
                   [orig](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = item_expand(g, orig);
                       return r;
                   });
}

// [N] -> [N,...]
inline Tensor item_expand(const Tensor& v, const Shape& shape) {
    i64 n = shape.empty() ? 0 : shape[0];
    if (v.numel() != n) throw ConfigError("item_expand: batch count mismatch");
    i64 sp = n > 0 ? numel(shape) / n : 0;
    const auto& V = v.data();
    rvec out((size_t)(numel(shape)));
    for (i64 i = 0; i < n; ++i) {
        real* row = out.data() + i * sp;
        real x = V[size_t(i)];
        for (i64 is = 0; is < sp; ++is) row[is] = x;
    }
    return make_op("item_expand", shape, std::move(out), {v},
                   [](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = item_sum(g);
                       return r;
                   });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel())
        throw ConfigError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
    Shape orig = a.shape();
    rvec out = a.data();
    return make_op("reshape", std::move(shape), std::move(out), {a},
                   [orig](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = reshape(g, orig);
                       return r;
                   });
}

// ---- small dense matrix products ---------------------------------------------

inline Tensor matmul_nn(const Tensor& a, const Tensor& b);
inline Tensor matmul_nt(const Tensor& a, const Tensor& b);
inline Tensor matmul_tn(const Tensor& a, const Tensor& b);

namespace detail {
inline void check_mat(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ConfigError(std::string(op) + ": rank-2 tensor required");
}
}  // namespace detail

// A[M,K] * B[K,N] -> [M,N]
inline Tensor matmul_nn(const Tensor& a, const Tensor& b) {
    detail::check_mat(a, "matmul_nn");
    detail::check_mat(b, "matmul_nn");
    i64 m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) throw ConfigError("matmul_nn: inner dimension mismatch");
    const auto &A = a.data(), &B = b.data();
    rvec out((size_t)(m * n), real(0));
    for (i64 i = 0; i < m; ++i)
        for (i64 p = 0; p < k; ++p) {
            real av = A[size_t(i * k + p)];
            const real* brow = B.data() + p * n;
            real* orow = out.data() + i * n;
            for (i64 j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return make_op("matmul_nn", {m, n}, std::move(out), {a, b},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = matmul_nt(g, self.parents()[1]);
                       if (need[1]) r[1] = matmul_tn(self.parents()[0], g);
                       return r;
                   });
}

// A[M,K] * B[N,K]^T -> [M,N]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::check_mat(a, "matmul_nt");
    detail::check_mat(b, "matmul_nt");
    i64 m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (k != b.shape()[1]) throw ConfigError("matmul_nt: inner dimension mismatch");
    const auto &A = a.data(), &B = b.data();
    rvec out((size_t)(m * n));
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) {
            const real* arow = A.data() + i * k;
            const real* brow = B.data() + j * k;
            real acc = 0;
            for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out[size_t(i * n + j)] = acc;
        }
    return make_op("matmul_nt", {m, n}, std::move(out), {a, b},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = matmul_nn(g, self.parents()[1]);
                       if (need[1]) r[1] = matmul_tn(g, self.parents()[0]);
                       return r;
                   });
}

// A[K,M]^T * B[K,N] -> [M,N]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    detail::check_mat(a, "matmul_tn");
    detail::check_mat(b, "matmul_tn");
    i64 k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
    if (k != b.shape()[0]) throw ConfigError("matmul_tn: inner dimension mismatch");
    const auto &A = a.data(), &B = b.data();
    rvec out((size_t)(m * n), real(0));
    for (i64 p = 0; p < k; ++p) {
        const real* arow = A.data() + p * m;
        const real* brow = B.data() + p * n;
        for (i64 i = 0; i < m; ++i) {
            real av = arow[i];
            real* orow = out.data() + i * n;
            for (i64 j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op("matmul_tn", {m, n}, std::move(out), {a, b},
                   [](const Tensor& self, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = matmul_nt(self.parents()[1], g);
                       if (need[1]) r[1] = matmul_nn(self.parents()[0], g);
                       return r;
                   });
}

// ---- nearest-neighbour resampling over the three spatial axes -----------------

inline Tensor block_sum(const Tensor& a, Vec3 factor);

// [N,C,X,Y,Z] -> [N,C,X*fx,Y*fy,Z*fz], each cell repeated.
inline Tensor upsample_nearest(const Tensor& a, Vec3 factor) {
    const Shape& s = a.shape();
    if (s.size() != 5) throw ConfigError("upsample_nearest: [N,C,X,Y,Z] tensor required");
    for (i64 f : factor) require(f >= 1, "upsample_nearest: factors must be >= 1");
    i64 n = s[0], c = s[1], x = s[2], y = s[3], z = s[4];
    i64 ox = x * factor[0], oy = y * factor[1], oz = z * factor[2];
    const auto& A = a.data();
    rvec out((size_t)(n * c * ox * oy * oz));
    for (i64 nc = 0; nc < n * c; ++nc) {
        const real* src = A.data() + nc * x * y * z;
        real* dst = out.data() + nc * ox * oy * oz;
        for (i64 ix = 0; ix < ox; ++ix)
            for (i64 iy = 0; iy < oy; ++iy) {
                const real* srow = src + ((ix / factor[0]) * y + iy / factor[1]) * z;
                real* drow = dst + (ix * oy + iy) * oz;
                for (i64 iz = 0; iz < oz; ++iz) drow[iz] = srow[iz / factor[2]];
            }
    }
    return make_op("upsample_nearest", {n, c, ox, oy, oz}, std::move(out), {a},
                   [factor](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = block_sum(g, factor);
                       return r;
                   });
}

// [N,C,X,Y,Z] -> [N,C,X/fx,Y/fy,Z/fz], summing each block. Adjoint of
// upsample_nearest.
inline Tensor block_sum(const Tensor& a, Vec3 factor) {
    const Shape& s = a.shape();
    if (s.size() != 5) throw ConfigError("block_sum: [N,C,X,Y,Z] tensor required");
    i64 n = s[0], c = s[1], x = s[2], y = s[3], z = s[4];
    for (int d = 0; d < 3; ++d)
        require(factor[d] >= 1 && s[size_t(2 + d)] % factor[d] == 0,
                "block_sum: extents must be multiples of the factors");
    i64 ox = x / factor[0], oy = y / factor[1], oz = z / factor[2];
    const auto& A = a.data();
    rvec out((size_t)(n * c * ox * oy * oz), real(0));
    for (i64 nc = 0; nc < n * c; ++nc) {
        const real* src = A.data() + nc * x * y * z;
        real* dst = out.data() + nc * ox * oy * oz;
        for (i64 ix = 0; ix < x; ++ix)
            for (i64 iy = 0; iy < y; ++iy) {
                const real* srow = src + (ix * y + iy) * z;
                real* drow = dst + ((ix / factor[0]) * oy + iy / factor[1]) * oz;
                for (i64 iz = 0; iz < z; ++iz) drow[iz / factor[2]] += srow[iz];
            }
    }
    return make_op("block_sum", {n, c, ox, oy, oz}, std::move(out), {a},
                   [factor](const Tensor&, const Tensor& g, const std::vector<char>& need) {
                       std::vector<Tensor> r(1);
                       if (need[0]) r[0] = upsample_nearest(g, factor);
                       return r;
                   });
}

// ---- losses -------------------------------------------------------------------

// Mean over elements of softplus(logit) - target*logit; numerically stable for
// |logit| well beyond 1e4.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    detail::check_same_shape(logits, targets, "bce_with_logits");
    return mean_all(sub(softplus(logits), mul(logits, targets)));
}

// Plain binary cross entropy on probabilities (sigmoid-terminated nets).
inline Tensor bce(const Tensor& probs, const Tensor& targets) {
    detail::check_same_shape(probs, targets, "bce");
    Tensor p = clamp(probs, real(1e-12), real(1) - real(1e-12));
    Tensor loss = add(mul(targets, vlog(p)), mul(add_const(neg(targets), real(1)),
                                                 vlog(add_const(neg(p), real(1)))));
    return neg(mean_all(loss));
}

// ---- reverse-mode engine -------------------------------------------------------

namespace detail {

struct BackwardResult {
    std::unordered_map<TensorNode*, Tensor> grads;
};

template <typename IsTarget>
BackwardResult run_backward(const Tensor& output, IsTarget&& is_target, bool create_graph) {
    if (output.numel() != 1)
        throw ConfigError("backward: loss must be a scalar tensor, got " + shape_str(output.shape()));

    // Reachable subgraph, with a handle per node so vjps can reference outputs.
    std::unordered_map<TensorNode*, Tensor> handle;
    std::vector<TensorNode*> order;
    {
        std::vector<TensorNode*> stack{output.raw()};
        handle.emplace(output.raw(), output);
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const Tensor& p : n->parents)
                if (handle.emplace(p.raw(), p).second) stack.push_back(p.raw());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->id < b->id; });

    // need[n]: some target is reachable from n. Parents always have smaller
    // ids than children, so one ascending pass suffices.
    std::unordered_map<TensorNode*, char> need;
    need.reserve(order.size());
    for (TensorNode* n : order) {
        char v = is_target(n) ? 1 : 0;
        if (!v)
            for (const Tensor& p : n->parents)
                if (need[p.raw()]) {
                    v = 1;
                    break;
                }
        need[n] = v;
    }

    BackwardResult res;
    auto& acc = res.grads;
    acc.emplace(output.raw(), Tensor::scalar(real(1)));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        auto git = acc.find(n);
        if (git == acc.end() || !n->vjp) continue;
        std::vector<char> mask(n->parents.size(), 0);
        bool any = false;
        for (size_t i = 0; i < n->parents.size(); ++i) {
            const Tensor& p = n->parents[i];
            mask[i] = (p.requires_grad() && need[p.raw()]) ? 1 : 0;
            any = any || mask[i];
        }
        if (!any) continue;
        std::vector<Tensor> gs;
        if (create_graph) {
            EnableGradGuard guard;
            gs = n->vjp(handle.at(n), git->second, mask);
            for (size_t i = 0; i < gs.size(); ++i) {
                if (!mask[i] || !gs[i].defined()) continue;
                TensorNode* pn = n->parents[i].raw();
                auto [pit, fresh] = acc.try_emplace(pn, gs[i]);
                if (!fresh) pit->second = add(pit->second, gs[i]);
            }
        } else {
            NoGradGuard guard;
            gs = n->vjp(handle.at(n), git->second, mask);
            for (size_t i = 0; i < gs.size(); ++i) {
                if (!mask[i] || !gs[i].defined()) continue;
                TensorNode* pn = n->parents[i].raw();
                auto [pit, fresh] = acc.try_emplace(pn, gs[i]);
                if (!fresh) pit->second = add(pit->second, gs[i]);
            }
        }
    }
    return res;
}

}  // namespace detail

// Accumulate d(loss)/d(leaf) into the grad buffer of every reachable leaf
// tensor that requires grad. Repeated calls keep summing.
inline void backward(const Tensor& loss) {
    auto res = detail::run_backward(
        loss, [](TensorNode* n) { return !n->vjp && n->requires_grad; }, false);
    for (auto& [node, g] : res.grads) {
        if (node->vjp || !node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->data.size(), real(0));
        const auto& gd = g.data();
        for (size_t i = 0; i < gd.size(); ++i) node->grad[i] += gd[i];
    }
}

// Functional gradient of a scalar output w.r.t. chosen tensors; grad buffers
// are left untouched. With create_graph the returned tensors are themselves
// differentiable, which is what the R1 and gradient-penalty terms rely on.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                                bool create_graph) {
    std::unordered_set<TensorNode*> targets;
    for (const Tensor& t : wrt) targets.insert(t.raw());
    auto res = detail::run_backward(
        output, [&targets](TensorNode* n) { return targets.count(n) > 0; }, create_graph);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Tensor& t : wrt) {
        auto it = res.grads.find(t.raw());
        out.push_back(it != res.grads.end() ? it->second : Tensor::zeros(t.shape()));
    }
    return out;
}

}  // namespace fluvgan
