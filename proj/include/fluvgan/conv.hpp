#pragma once

#include "ops.hpp"

namespace fluvgan {

namespace kernels {

// Output range [lo, hi) such that 0 <= o*s + k - p < in for o in [0, out).
inline void valid_range(i64 in, i64 out, i64 k, i64 s, i64 p, i64& lo, i64& hi) {
    i64 shift = k - p;
    lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
    i64 top = in - 1 - shift;
    hi = top < 0 ? lo : std::min(out, top / s + 1);
    if (hi < lo) hi = lo;
}

inline bool pointwise(const Vec3& k, const Vec3& s, const Vec3& p) {
    return k[0] == 1 && k[1] == 1 && k[2] == 1 && s[0] == 1 && s[1] == 1 && s[2] == 1 &&
           p[0] == 0 && p[1] == 0 && p[2] == 0;
}

// y[n,co,s] = bias[co] + sum_ci w[n? no: co,ci] * x[n,ci,s] over the fused
// spatial index; four output channels per pass to reuse the input row.
inline void mix_channels(const real* x, const real* w, const real* bias, real* y, i64 n_batch,
                         i64 ci_n, i64 co_n, i64 sp, bool w_in_major) {
    i64 blocks = (co_n + 3) / 4;
    parallel_for(n_batch * blocks, [&](i64 job) {
        i64 n = job / blocks;
        i64 co0 = (job % blocks) * 4;
        i64 nco = std::min<i64>(4, co_n - co0);
        real* yr[4];
        for (i64 j = 0; j < nco; ++j) {
            yr[j] = y + (n * co_n + co0 + j) * sp;
            real b = bias ? bias[co0 + j] : real(0);
            for (i64 i = 0; i < sp; ++i) yr[j][i] = b;
        }
        for (i64 ci = 0; ci < ci_n; ++ci) {
            const real* xr = x + (n * ci_n + ci) * sp;
            real wv[4];
            for (i64 j = 0; j < nco; ++j)
                wv[j] = w_in_major ? w[ci * co_n + co0 + j] : w[(co0 + j) * ci_n + ci];
            switch (nco) {
                case 4:
                    for (i64 i = 0; i < sp; ++i) {
                        real xv = xr[i];
                        yr[0][i] += wv[0] * xv;
                        yr[1][i] += wv[1] * xv;
                        yr[2][i] += wv[2] * xv;
                        yr[3][i] += wv[3] * xv;
                    }
                    break;
                case 3:
                    for (i64 i = 0; i < sp; ++i) {
                        real xv = xr[i];
                        yr[0][i] += wv[0] * xv;
                        yr[1][i] += wv[1] * xv;
                        yr[2][i] += wv[2] * xv;
                    }
                    break;
                case 2:
                    for (i64 i = 0; i < sp; ++i) {
                        real xv = xr[i];
                        yr[0][i] += wv[0] * xv;
                        yr[1][i] += wv[1] * xv;
                    }
                    break;
                default:
                    for (i64 i = 0; i < sp; ++i) yr[0][i] += wv[0] * xr[i];
            }
        }
    });
}

inline void conv3d_raw(const real* x, const real* w, const real* bias, real* y, i64 n_batch,
                       i64 ci_n, Vec3 in, i64 co_n, Vec3 k, Vec3 s, Vec3 p, Vec3 out) {
    if (pointwise(k, s, p)) {
        mix_channels(x, w, bias, y, n_batch, ci_n, co_n, in[0] * in[1] * in[2], false);
        return;
    }
    i64 is_ = in[0] * in[1] * in[2];
    i64 os_ = out[0] * out[1] * out[2];
    i64 kv = k[0] * k[1] * k[2];
    parallel_for(n_batch * co_n, [&](i64 job) {
        i64 n = job / co_n, co = job % co_n;
        real* yb = y + job * os_;
        real b = bias ? bias[co] : real(0);
        for (i64 i = 0; i < os_; ++i) yb[i] = b;
        for (i64 ci = 0; ci < ci_n; ++ci) {
            const real* xb = x + (n * ci_n + ci) * is_;
            const real* wb = w + (co * ci_n + ci) * kv;
            for (i64 kx = 0; kx < k[0]; ++kx) {
                i64 oxl, oxh;
                valid_range(in[0], out[0], kx, s[0], p[0], oxl, oxh);
                for (i64 ky = 0; ky < k[1]; ++ky) {
                    i64 oyl, oyh;
                    valid_range(in[1], out[1], ky, s[1], p[1], oyl, oyh);
                    for (i64 kz = 0; kz < k[2]; ++kz) {
                        i64 ozl, ozh;
                        valid_range(in[2], out[2], kz, s[2], p[2], ozl, ozh);
                        if (oxl >= oxh || oyl >= oyh || ozl >= ozh) continue;
                        real wv = wb[(kx * k[1] + ky) * k[2] + kz];
                        for (i64 ox = oxl; ox < oxh; ++ox) {
                            i64 ix = ox * s[0] + kx - p[0];
                            for (i64 oy = oyl; oy < oyh; ++oy) {
                                i64 iy = oy * s[1] + ky - p[1];
                                const real* xr = xb + (ix * in[1] + iy) * in[2] + ozl * s[2] + kz - p[2];
                                real* yrow = yb + (ox * out[1] + oy) * out[2];
                                if (s[2] == 1) {
                                    for (i64 oz = ozl; oz < ozh; ++oz)
                                        yrow[oz] += wv * xr[oz - ozl];
                                } else {
                                    for (i64 oz = ozl; oz < ozh; ++oz)
                                        yrow[oz] += wv * xr[(oz - ozl) * s[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

// Transposed (adjoint) convolution: y[n,b,i*s+k-p] += w[a,b,k] * x[n,a,i].
inline void tconv3d_raw(const real* x, const real* w, const real* bias, real* y, i64 n_batch,
                        i64 a_n, Vec3 in, i64 b_n, Vec3 k, Vec3 s, Vec3 p, Vec3 out) {
    if (pointwise(k, s, p)) {
        mix_channels(x, w, bias, y, n_batch, a_n, b_n, in[0] * in[1] * in[2], true);
        return;
    }
    i64 is_ = in[0] * in[1] * in[2];
    i64 os_ = out[0] * out[1] * out[2];
    i64 kv = k[0] * k[1] * k[2];
    parallel_for(n_batch * b_n, [&](i64 job) {
        i64 n = job / b_n, b = job % b_n;
        real* yb = y + job * os_;
        real bv = bias ? bias[b] : real(0);
        for (i64 i = 0; i < os_; ++i) yb[i] = bv;
        for (i64 a = 0; a < a_n; ++a) {
            const real* xb = x + (n * a_n + a) * is_;
            const real* wb = w + (a * b_n + b) * kv;
            for (i64 kx = 0; kx < k[0]; ++kx) {
                i64 ixl, ixh;
                valid_range(out[0], in[0], kx, s[0], p[0], ixl, ixh);
                for (i64 ky = 0; ky < k[1]; ++ky) {
                    i64 iyl, iyh;
                    valid_range(out[1], in[1], ky, s[1], p[1], iyl, iyh);
                    for (i64 kz = 0; kz < k[2]; ++kz) {
                        i64 izl, izh;
                        valid_range(out[2], in[2], kz, s[2], p[2], izl, izh);
                        if (ixl >= ixh || iyl >= iyh || izl >= izh) continue;
                        real wv = wb[(kx * k[1] + ky) * k[2] + kz];
                        for (i64 ix = ixl; ix < ixh; ++ix) {
                            i64 tx = ix * s[0] + kx - p[0];
                            for (i64 iy = iyl; iy < iyh; ++iy) {
                                i64 ty = iy * s[1] + ky - p[1];
                                const real* xr = xb + (ix * in[1] + iy) * in[2];
                                real* yrow = yb + (tx * out[1] + ty) * out[2] + izl * s[2] + kz - p[2];
                                if (s[2] == 1) {
                                    for (i64 iz = izl; iz < izh; ++iz)
                                        yrow[iz - izl] += wv * xr[iz];
                                } else {
                                    for (i64 iz = izl; iz < izh; ++iz)
                                        yrow[(iz - izl) * s[2]] += wv * xr[iz];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

// dw[cy,cx,k] = sum_n sum_o y[n,cy,o] * x[n,cx,o*s+k-p]. Serves as the weight
// gradient of both convolution directions (roles of x and y swap).
inline void wgrad3d_raw(const real* x, const real* y, real* dw, i64 n_batch, i64 cx_n, Vec3 xin,
                        i64 cy_n, Vec3 yout, Vec3 k, Vec3 s, Vec3 p) {
    i64 is_ = xin[0] * xin[1] * xin[2];
    i64 os_ = yout[0] * yout[1] * yout[2];
    i64 kv = k[0] * k[1] * k[2];
    if (pointwise(k, s, p)) {
        parallel_for(cy_n, [&](i64 cy) {
            for (i64 cx = 0; cx < cx_n; ++cx) {
                real acc = 0;
                for (i64 n = 0; n < n_batch; ++n) {
                    const real* yr = y + (n * cy_n + cy) * os_;
                    const real* xr = x + (n * cx_n + cx) * is_;
                    for (i64 i = 0; i < os_; ++i) acc += yr[i] * xr[i];
                }
                dw[cy * cx_n + cx] = acc;
            }
        });
        return;
    }
    parallel_for(cy_n * cx_n, [&](i64 job) {
        i64 cy = job / cx_n, cx = job % cx_n;
        real* dwb = dw + job * kv;
        for (i64 kx = 0; kx < k[0]; ++kx) {
            i64 oxl, oxh;
            valid_range(xin[0], yout[0], kx, s[0], p[0], oxl, oxh);
            for (i64 ky = 0; ky < k[1]; ++ky) {
                i64 oyl, oyh;
                valid_range(xin[1], yout[1], ky, s[1], p[1], oyl, oyh);
                for (i64 kz = 0; kz < k[2]; ++kz) {
                    i64 ozl, ozh;
                    valid_range(xin[2], yout[2], kz, s[2], p[2], ozl, ozh);
                    real acc = 0;
                    for (i64 n = 0; n < n_batch; ++n) {
                        const real* yb = y + (n * cy_n + cy) * os_;
                        const real* xb = x + (n * cx_n + cx) * is_;
                        for (i64 ox = oxl; ox < oxh; ++ox) {
                            i64 ix = ox * s[0] + kx - p[0];
                            for (i64 oy = oyl; oy < oyh; ++oy) {
                                i64 iy = oy * s[1] + ky - p[1];
                                const real* yrow = yb + (ox * yout[1] + oy) * yout[2];
                                const real* xr = xb + (ix * xin[1] + iy) * xin[2] + ozl * s[2] + kz - p[2];
                                if (s[2] == 1) {
                                    for (i64 oz = ozl; oz < ozh; ++oz)
                                        acc += yrow[oz] * xr[oz - ozl];
                                } else {
                                    for (i64 oz = ozl; oz < ozh; ++oz)
                                        acc += yrow[oz] * xr[(oz - ozl) * s[2]];
                                }
                            }
                        }
                    }
                    dwb[(kx * k[1] + ky) * k[2] + kz] = acc;
                }
            }
        }
    });
}

}  // namespace kernels

namespace detail {

struct VolDims {
    i64 n;
    i64 c;
    Vec3 sp;
    bool batched;
};

inline VolDims vol_dims(const Shape& s, const char* op) {
    if (s.size() == 4) return {1, s[0], {s[1], s[2], s[3]}, false};
    if (s.size() == 5) return {s[0], s[1], {s[2], s[3], s[4]}, true};
    throw ConfigError(std::string(op) + ": input must be [C,X,Y,Z] or [N,C,X,Y,Z], got " +
                      shape_str(s));
}

inline Shape vol_shape(const VolDims& d, i64 c, Vec3 sp) {
    return d.batched ? Shape{d.n, c, sp[0], sp[1], sp[2]} : Shape{c, sp[0], sp[1], sp[2]};
}

inline Tensor as_batched(const Tensor& t) {
    if (t.rank() == 5) return t;
    Shape s = t.shape();
    return reshape(t, Shape{1, s[0], s[1], s[2], s[3]});
}

inline void check_conv_args(const Shape& w, Vec3 k, Vec3 stride, Vec3 pad, const char* op) {
    if (w.size() != 5) throw ConfigError(std::string(op) + ": weight must be rank 5");
    for (int d = 0; d < 3; ++d) {
        require(k[d] >= 1, std::string(op) + ": kernel extents must be >= 1");
        require(stride[d] >= 1, std::string(op) + ": stride components must be >= 1");
        require(pad[d] >= 0, std::string(op) + ": padding must be >= 0");
    }
}

}  // namespace detail

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Vec3 stride, Vec3 pad);
Tensor conv3d_transposed(const Tensor& x, const Tensor& w, const Tensor& bias, Vec3 stride,
                         Vec3 pad, Vec3 out_extra);
Tensor conv3d_weight_grad(const Tensor& input_role, const Tensor& output_role, Vec3 stride,
                          Vec3 pad, Vec3 kernel);

// Direct cross-correlation. weight is [C_out, C_in, kx, ky, kz]; input either
// [C_in,X,Y,Z] or [N,C_in,X,Y,Z].
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Vec3 stride, Vec3 pad) {
    auto d = detail::vol_dims(x.shape(), "conv3d");
    const Shape& ws = w.shape();
    Vec3 k{ws.size() == 5 ? ws[2] : 0, ws.size() == 5 ? ws[3] : 0, ws.size() == 5 ? ws[4] : 0};
    detail::check_conv_args(ws, k, stride, pad, "conv3d");
    i64 co = ws[0], ci = ws[1];
    if (ci != d.c)
        throw ConfigError("conv3d: weight expects " + std::to_string(ci) + " input channels, got " +
                          std::to_string(d.c));
    if (bias.defined() && bias.numel() != co)
        throw ConfigError("conv3d: bias length must equal output channel count");
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        out[a] = (d.sp[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
        if (d.sp[a] + 2 * pad[a] < k[a] || out[a] < 1)
            throw ConfigError("conv3d: non-positive output extent on axis " + std::to_string(a));
    }
    rvec y((size_t)(d.n * co * out[0] * out[1] * out[2]));
    kernels::conv3d_raw(x.data().data(), w.data().data(),
                        bias.defined() ? bias.data().data() : nullptr, y.data(), d.n, d.c, d.sp, co,
                        k, stride, pad, out);
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    Vec3 in_sp = d.sp;
    return make_op("conv3d", detail::vol_shape(d, co, out), std::move(y), std::move(parents),
                   [stride, pad, k, in_sp, out](const Tensor& self, const Tensor& g,
                                                const std::vector<char>& need) {
                       std::vector<Tensor> r(self.parents().size());
                       const Tensor& xin = self.parents()[0];
                       const Tensor& wt = self.parents()[1];
                       if (need[0]) {
                           Vec3 extra;
                           for (int a = 0; a < 3; ++a)
                               extra[a] = in_sp[a] - ((out[a] - 1) * stride[a] - 2 * pad[a] + k[a]);
                           r[0] = conv3d_transposed(g, wt, Tensor(), stride, pad, extra);
                       }
                       if (need[1]) r[1] = conv3d_weight_grad(xin, g, stride, pad, k);
                       if (r.size() > 2 && need[2]) r[2] = channel_sum(detail::as_batched(g));
                       return r;
                   });
}

// Adjoint of conv3d for the same weight: <conv3d(a,W), b> == <a, conv3d_transposed(b,W)>.
// weight is [C_in, C_out, kx, ky, kz]; out_extra (each in [0, stride)) widens the
// output when the forward conv floored away input columns.
inline Tensor conv3d_transposed(const Tensor& x, const Tensor& w, const Tensor& bias, Vec3 stride,
                                Vec3 pad, Vec3 out_extra = {0, 0, 0}) {
    auto d = detail::vol_dims(x.shape(), "conv3d_transposed");
    const Shape& ws = w.shape();
    Vec3 k{ws.size() == 5 ? ws[2] : 0, ws.size() == 5 ? ws[3] : 0, ws.size() == 5 ? ws[4] : 0};
    detail::check_conv_args(ws, k, stride, pad, "conv3d_transposed");
    i64 a_n = ws[0], b_n = ws[1];
    if (a_n != d.c)
        throw ConfigError("conv3d_transposed: weight expects " + std::to_string(a_n) +
                          " input channels, got " + std::to_string(d.c));
    if (bias.defined() && bias.numel() != b_n)
        throw ConfigError("conv3d_transposed: bias length must equal output channel count");
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        require(out_extra[a] >= 0 && out_extra[a] < stride[a],
                "conv3d_transposed: out_extra must lie in [0, stride)");
        out[a] = (d.sp[a] - 1) * stride[a] - 2 * pad[a] + k[a] + out_extra[a];
        if (out[a] < 1)
            throw ConfigError("conv3d_transposed: non-positive output extent on axis " +
                              std::to_string(a));
    }
    rvec y((size_t)(d.n * b_n * out[0] * out[1] * out[2]));
    kernels::tconv3d_raw(x.data().data(), w.data().data(),
                         bias.defined() ? bias.data().data() : nullptr, y.data(), d.n, d.c, d.sp,
                         b_n, k, stride, pad, out);
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op("conv3d_transposed", detail::vol_shape(d, b_n, out), std::move(y),
                   std::move(parents),
                   [stride, pad, k](const Tensor& self, const Tensor& g,
                                    const std::vector<char>& need) {
                       std::vector<Tensor> r(self.parents().size());
                       const Tensor& xin = self.parents()[0];
                       const Tensor& wt = self.parents()[1];
                       if (need[0]) r[0] = conv3d(g, wt, Tensor(), stride, pad);
                       if (need[1]) r[1] = conv3d_weight_grad(g, xin, stride, pad, k);
                       if (r.size() > 2 && need[2]) r[2] = channel_sum(detail::as_batched(g));
                       return r;
                   });
}

// Gradient of either convolution w.r.t. its weight. input_role is the tensor
// sampled at o*s+k-p, output_role the one sampled at o; the result layout
// [ch(output_role), ch(input_role), k...] matches the conv weight when called
// with (x, g) and the transposed-conv weight when called with (g, x). Not
// differentiable further; the training losses never need third-order terms.
inline Tensor conv3d_weight_grad(const Tensor& input_role, const Tensor& output_role, Vec3 stride,
                                 Vec3 pad, Vec3 kernel) {
    auto dx = detail::vol_dims(input_role.shape(), "conv3d_weight_grad");
    auto dy = detail::vol_dims(output_role.shape(), "conv3d_weight_grad");
    require(dx.n == dy.n, "conv3d_weight_grad: batch mismatch");
    rvec dw((size_t)(dy.c * dx.c * kernel[0] * kernel[1] * kernel[2]));
    kernels::wgrad3d_raw(input_role.data().data(), output_role.data().data(), dw.data(), dx.n, dx.c,
                         dx.sp, dy.c, dy.sp, kernel, stride, pad);
    Shape wshape{dy.c, dx.c, kernel[0], kernel[1], kernel[2]};
    return make_op("conv3d_weight_grad", std::move(wshape), std::move(dw),
                   {input_role, output_role},
                   [](const Tensor&, const Tensor&, const std::vector<char>&) -> std::vector<Tensor> {
                       throw ConfigError(
                           "conv3d_weight_grad: differentiating a weight gradient is not supported");
                   });
}

}  // namespace fluvgan
