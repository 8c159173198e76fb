#pragma once

#include <limits>

#include "tensor.hpp"

namespace fluvgan {

// ---- law of superposition -------------------------------------------------------

// Fraction of vertically adjacent cell pairs with non-decreasing deposition
// time upward; ties honor the law. z index 0 is the stratigraphic bottom.
// Invariant under any strictly increasing transform of the time values.
inline double superposition_fraction(const Tensor& time_volume) {
    const Shape& s = time_volume.shape();
    require(s.size() == 3, "superposition_fraction: [X,Y,Z] tensor required");
    i64 x_n = s[0], y_n = s[1], z_n = s[2];
    if (z_n < 2) throw ConfigError("superposition_fraction: at least two layers required");
    const auto& t = time_volume.data();
    i64 honored = 0;
    for (i64 xy = 0; xy < x_n * y_n; ++xy) {
        const real* col = t.data() + xy * z_n;
        for (i64 z = 1; z < z_n; ++z)
            if (col[z] >= col[z - 1]) ++honored;
    }
    return double(honored) / double(x_n * y_n * (z_n - 1));
}

// Time channel of a [C,X,Y,Z] sample as a standalone [X,Y,Z] tensor.
inline Tensor channel_volume(const Tensor& sample, i64 channel) {
    const Shape& s = sample.shape();
    require(s.size() == 4, "channel_volume: [C,X,Y,Z] tensor required");
    require(channel >= 0 && channel < s[0], "channel_volume: channel index out of range");
    i64 sp = s[1] * s[2] * s[3];
    const auto& d = sample.data();
    rvec out(d.begin() + channel * sp, d.begin() + (channel + 1) * sp);
    return Tensor::from({s[1], s[2], s[3]}, std::move(out));
}

// ---- Laplacian pyramid ------------------------------------------------------------

namespace detail {

// [1,2,1]/4 smoothing along one axis with mirror (reflect-101) boundaries;
// preserves constants exactly.
inline void smooth_axis(rvec& v, const Shape& dims, int axis) {
    i64 e = dims[size_t(axis)];
    if (e < 2) return;
    i64 inner = 1, outer = 1;
    for (size_t i = size_t(axis) + 1; i < dims.size(); ++i) inner *= dims[i];
    for (size_t i = 0; i < size_t(axis); ++i) outer *= dims[i];
    rvec line((size_t)(e));
    for (i64 o = 0; o < outer; ++o)
        for (i64 in = 0; in < inner; ++in) {
            real* base = v.data() + o * e * inner + in;
            for (i64 k = 0; k < e; ++k) line[size_t(k)] = base[k * inner];
            for (i64 k = 0; k < e; ++k) {
                real lo = line[size_t(k == 0 ? 1 : k - 1)];
                real hi = line[size_t(k == e - 1 ? e - 2 : k + 1)];
                base[k * inner] = (lo + real(2) * line[size_t(k)] + hi) * real(0.25);
            }
        }
}

inline rvec decimate_axis(const rvec& v, Shape& dims, int axis) {
    i64 e = dims[size_t(axis)];
    i64 inner = 1, outer = 1;
    for (size_t i = size_t(axis) + 1; i < dims.size(); ++i) inner *= dims[i];
    for (size_t i = 0; i < size_t(axis); ++i) outer *= dims[i];
    i64 half = e / 2;
    rvec out((size_t)(outer * half * inner));
    for (i64 o = 0; o < outer; ++o)
        for (i64 k = 0; k < half; ++k) {
            const real* src = v.data() + (o * e + 2 * k) * inner;
            real* dst = out.data() + (o * half + k) * inner;
            std::copy(src, src + inner, dst);
        }
    dims[size_t(axis)] = half;
    return out;
}

// Zero-insertion followed by the same filter with gain 2.
inline rvec upsample_axis(const rvec& v, Shape& dims, int axis) {
    i64 e = dims[size_t(axis)];
    i64 inner = 1, outer = 1;
    for (size_t i = size_t(axis) + 1; i < dims.size(); ++i) inner *= dims[i];
    for (size_t i = 0; i < size_t(axis); ++i) outer *= dims[i];
    i64 dbl = e * 2;
    rvec out((size_t)(outer * dbl * inner), real(0));
    for (i64 o = 0; o < outer; ++o)
        for (i64 k = 0; k < e; ++k) {
            const real* src = v.data() + (o * e + k) * inner;
            real* dst = out.data() + (o * dbl + 2 * k) * inner;
            std::copy(src, src + inner, dst);
        }
    dims[size_t(axis)] = dbl;
    smooth_axis(out, dims, axis);
    for (real& x : out) x *= real(2);
    return out;
}

}  // namespace detail

struct Pyramid {
    std::vector<Tensor> levels;                  // band-pass details, residual last
    std::vector<std::array<bool, 3>> halved;     // per detail level, which axes halved
};

// Band-pass decomposition of a [C,X,Y,Z] volume. An axis keeps halving while
// it stays even and its halved extent is at least twice the patch extent, so
// thin axes drop out of the pyramid early.
inline Pyramid laplacian_pyramid(const Tensor& volume, Vec3 patch_shape, int max_levels = 8) {
    const Shape& s = volume.shape();
    require(s.size() == 4, "laplacian_pyramid: [C,X,Y,Z] tensor required");
    for (int a = 0; a < 3; ++a) require(patch_shape[a] >= 1, "laplacian_pyramid: bad patch shape");
    Pyramid pyr;
    rvec cur = volume.data();
    Shape dims = s;
    for (int level = 0; level < max_levels; ++level) {
        std::array<bool, 3> act{};
        bool any = false;
        for (int a = 0; a < 3; ++a) {
            i64 e = dims[size_t(a + 1)];
            act[size_t(a)] = e % 2 == 0 && e / 2 >= 2 * patch_shape[a];
            any = any || act[size_t(a)];
        }
        if (!any) break;
        // down
        rvec down = cur;
        Shape ddims = dims;
        for (int a = 0; a < 3; ++a)
            if (act[size_t(a)]) {
                detail::smooth_axis(down, ddims, a + 1);
                down = detail::decimate_axis(down, ddims, a + 1);
            }
        // up (reverse axis order so extents return exactly)
        rvec up = down;
        Shape udims = ddims;
        for (int a = 2; a >= 0; --a)
            if (act[size_t(a)]) up = detail::upsample_axis(up, udims, a + 1);
        rvec det(cur.size());
        for (size_t i = 0; i < det.size(); ++i) det[i] = cur[i] - up[i];
        pyr.levels.push_back(Tensor::from(dims, std::move(det)));
        pyr.halved.push_back(act);
        cur = std::move(down);
        dims = ddims;
    }
    if (pyr.levels.empty())
        throw ConfigError("laplacian_pyramid: no feasible level for extents " + shape_str(s) +
                          " with patch " + shape_str({patch_shape[0], patch_shape[1], patch_shape[2]}));
    pyr.levels.push_back(Tensor::from(dims, std::move(cur)));
    return pyr;
}

// Telescoping reconstruction; inverts laplacian_pyramid exactly up to rounding.
inline Tensor pyramid_reconstruct(const Pyramid& pyr) {
    require(!pyr.levels.empty(), "pyramid_reconstruct: empty pyramid");
    rvec cur = pyr.levels.back().data();
    Shape dims = pyr.levels.back().shape();
    for (i64 k = i64(pyr.halved.size()) - 1; k >= 0; --k) {
        for (int a = 2; a >= 0; --a)
            if (pyr.halved[size_t(k)][size_t(a)]) cur = detail::upsample_axis(cur, dims, a + 1);
        const auto& det = pyr.levels[size_t(k)].data();
        require(det.size() == cur.size(), "pyramid_reconstruct: level size mismatch");
        for (size_t i = 0; i < cur.size(); ++i) cur[i] += det[i];
    }
    return Tensor::from(dims, std::move(cur));
}

// ---- patch descriptors --------------------------------------------------------------

// Flattened per-patch standardized descriptors; one row per patch.
struct PatchSet {
    i64 count = 0;
    i64 dim = 0;
    rvec data;  // [count, dim]
    Vec3 patch_shape{0, 0, 0};
    i64 channels = 0;
    int source_level = 0;

    const real* row(i64 i) const { return data.data() + i * dim; }
};

// Uniformly random patch corners over a set of same-shape volumes;
// standardization is per patch and per channel. Constant patches are dropped
// and redrawn (they have no variance to standardize).
inline PatchSet extract_patches(const std::vector<Tensor>& volumes, int level, Vec3 patch_shape,
                                i64 n_patches, uint64_t seed) {
    require(!volumes.empty(), "extract_patches: empty volume set");
    const Shape& s = volumes.front().shape();
    require(s.size() == 4, "extract_patches: [C,X,Y,Z] volumes required");
    for (const Tensor& v : volumes)
        require(v.shape() == s, "extract_patches: volumes must share one shape");
    for (int a = 0; a < 3; ++a)
        if (patch_shape[a] > s[size_t(a + 1)])
            throw ConfigError("extract_patches: patch larger than the volume extents");
    i64 c_n = s[0];
    PatchSet ps;
    ps.dim = c_n * patch_shape[0] * patch_shape[1] * patch_shape[2];
    ps.patch_shape = patch_shape;
    ps.channels = c_n;
    ps.source_level = level;
    ps.data.reserve(size_t(n_patches * ps.dim));
    Rng rng(seed);
    i64 per_ch = patch_shape[0] * patch_shape[1] * patch_shape[2];
    rvec patch((size_t)(ps.dim));
    i64 attempts = 0, max_attempts = std::max<i64>(n_patches * 10, 100);
    while (ps.count < n_patches && attempts < max_attempts) {
        ++attempts;
        const Tensor& vol = volumes[size_t(rng.uniform_index(i64(volumes.size())))];
        Vec3 off;
        for (int a = 0; a < 3; ++a) {
            i64 range = s[size_t(a + 1)] - patch_shape[a];
            off[a] = range > 0 ? rng.uniform_index(range + 1) : 0;
        }
        const auto& d = vol.data();
        for (i64 c = 0; c < c_n; ++c)
            for (i64 px = 0; px < patch_shape[0]; ++px)
                for (i64 py = 0; py < patch_shape[1]; ++py) {
                    const real* src = d.data() +
                                      ((c * s[1] + off[0] + px) * s[2] + off[1] + py) * s[3] + off[2];
                    real* dst = patch.data() + ((c * patch_shape[0] + px) * patch_shape[1] + py) *
                                                   patch_shape[2];
                    std::copy(src, src + patch_shape[2], dst);
                }
        bool degenerate = false;
        for (i64 c = 0; c < c_n && !degenerate; ++c) {
            real* seg = patch.data() + c * per_ch;
            real mean = 0;
            for (i64 i = 0; i < per_ch; ++i) mean += seg[i];
            mean /= real(per_ch);
            real var = 0;
            for (i64 i = 0; i < per_ch; ++i) var += (seg[i] - mean) * (seg[i] - mean);
            var /= real(per_ch);
            if (var < real(1e-12)) {
                degenerate = true;
                break;
            }
            real inv = real(1) / std::sqrt(var);
            for (i64 i = 0; i < per_ch; ++i) seg[i] = (seg[i] - mean) * inv;
        }
        if (degenerate) continue;
        ps.data.insert(ps.data.end(), patch.begin(), patch.end());
        ps.count += 1;
    }
    return ps;
}

// ---- sliced Wasserstein --------------------------------------------------------------

// Exact 1-Wasserstein distance between equal-size empirical measures given in
// sorted order: the mean absolute difference of matched order statistics.
inline double wasserstein_1d(const rvec& a_sorted, const rvec& b_sorted) {
    if (a_sorted.size() != b_sorted.size())
        throw ConfigError("wasserstein_1d: value lists must have equal length");
    if (a_sorted.empty()) return 0.0;
    double acc = 0;
    for (size_t i = 0; i < a_sorted.size(); ++i)
        acc += std::abs(double(a_sorted[i]) - double(b_sorted[i]));
    return acc / double(a_sorted.size());
}

// n_dirs unit vectors of the given dimension, rows of the result.
inline rvec make_projections(uint64_t seed, i64 n_dirs, i64 dim) {
    Rng rng(seed);
    rvec dirs((size_t)(n_dirs * dim));
    for (i64 k = 0; k < n_dirs; ++k) {
        real* row = dirs.data() + k * dim;
        real nrm = 0;
        for (i64 d = 0; d < dim; ++d) {
            row[d] = real(rng.normal());
            nrm += row[d] * row[d];
        }
        nrm = std::sqrt(nrm);
        if (nrm < real(1e-12)) nrm = real(1);
        for (i64 d = 0; d < dim; ++d) row[d] /= nrm;
    }
    return dirs;
}

namespace detail {
inline std::vector<i64> subsample_indices(i64 from, i64 take, Rng& rng) {
    std::vector<i64> idx((size_t)(from));
    for (i64 i = 0; i < from; ++i) idx[size_t(i)] = i;
    for (i64 i = 0; i < take; ++i) std::swap(idx[size_t(i)], idx[size_t(i + rng.uniform_index(from - i))]);
    idx.resize(size_t(take));
    return idx;
}
}  // namespace detail

// Average over random unit directions of the exact 1D Wasserstein distance of
// the projected patch clouds. The larger cloud is subsampled to match.
inline double sliced_wasserstein(const PatchSet& a, const PatchSet& b, i64 n_projections,
                                 uint64_t seed) {
    if (a.dim != b.dim) throw ConfigError("sliced_wasserstein: patch dimensionality mismatch");
    if (a.count == 0 || b.count == 0)
        throw ConfigError("sliced_wasserstein: empty patch set");
    i64 n = std::min(a.count, b.count);
    Rng sub_rng(Rng(seed).fork(0x5ab5a).next_u64());
    std::vector<i64> ia = detail::subsample_indices(a.count, n, sub_rng);
    std::vector<i64> ib = detail::subsample_indices(b.count, n, sub_rng);
    rvec dirs = make_projections(seed, n_projections, a.dim);
    std::vector<double> per_dir((size_t)(n_projections));
    parallel_for(n_projections, [&](i64 k) {
        const real* u = dirs.data() + k * a.dim;
        rvec pa((size_t)(n)), pb((size_t)(n));
        for (i64 i = 0; i < n; ++i) {
            const real* ra = a.row(ia[size_t(i)]);
            const real* rb = b.row(ib[size_t(i)]);
            real da = 0, db = 0;
            for (i64 d = 0; d < a.dim; ++d) {
                da += u[d] * ra[d];
                db += u[d] * rb[d];
            }
            pa[size_t(i)] = da;
            pb[size_t(i)] = db;
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        per_dir[size_t(k)] = wasserstein_1d(pa, pb);
    });
    double acc = 0;
    for (double d : per_dir) acc += d;
    return acc / double(n_projections);
}

// ---- multi-scale score ------------------------------------------------------------------

struct SwdSettings {
    Vec3 patch_shape{7, 7, 3};
    i64 patches_per_set = 2048;
    i64 projections = 128;
    int max_levels = 8;
    uint64_t seed = 0;
};

struct SwdResult {
    double mean = 0;
    std::vector<double> per_level;
};

namespace detail {
// Pyramid levels grouped across a sample set: per level, one volume per sample.
inline std::vector<std::vector<Tensor>> pyramid_levels(const std::vector<Tensor>& samples,
                                                       const SwdSettings& s) {
    std::vector<std::vector<Tensor>> levels;
    for (const Tensor& t : samples) {
        Pyramid pyr = laplacian_pyramid(t, s.patch_shape, s.max_levels);
        if (levels.empty()) levels.resize(pyr.levels.size());
        require(levels.size() == pyr.levels.size(), "swd_score: inconsistent pyramid depth");
        for (size_t k = 0; k < pyr.levels.size(); ++k) levels[k].push_back(pyr.levels[k]);
    }
    return levels;
}
}  // namespace detail

// Multiscale sliced Wasserstein distance between two sample sets: patches per
// Laplacian-pyramid level, one sliced Wasserstein distance per level, plus the
// mean across levels. Identical sets score exactly zero because both sides
// draw the same patch positions.
inline SwdResult swd_score(const std::vector<Tensor>& samples_a,
                           const std::vector<Tensor>& samples_b, const SwdSettings& s) {
    require(!samples_a.empty() && !samples_b.empty(), "swd_score: empty sample set");
    require(samples_a.front().shape() == samples_b.front().shape(),
            "swd_score: sample shapes differ between sets");
    auto la = detail::pyramid_levels(samples_a, s);
    auto lb = detail::pyramid_levels(samples_b, s);
    require(la.size() == lb.size(), "swd_score: pyramid depth mismatch");
    SwdResult res;
    for (size_t k = 0; k < la.size(); ++k) {
        uint64_t level_seed = hash_combine(s.seed, 0x11ace + k);
        PatchSet pa = extract_patches(la[k], int(k), s.patch_shape, s.patches_per_set, level_seed);
        PatchSet pb = extract_patches(lb[k], int(k), s.patch_shape, s.patches_per_set, level_seed);
        res.per_level.push_back(sliced_wasserstein(pa, pb, s.projections, level_seed));
    }
    for (double d : res.per_level) res.mean += d;
    res.mean /= double(res.per_level.size());
    return res;
}

// ---- pairwise distances and classical MDS ------------------------------------------------

struct DistanceMatrix {
    i64 n = 0;
    rvec values;  // symmetric, zero diagonal, row-major

    DistanceMatrix() = default;
    DistanceMatrix(i64 n_, rvec v) : n(n_), values(std::move(v)) {
        require(i64(values.size()) == n * n, "DistanceMatrix: size mismatch");
        for (i64 i = 0; i < n; ++i) {
            require(std::abs(values[size_t(i * n + i)]) <= real(1e-12),
                    "DistanceMatrix: non-zero diagonal");
            for (i64 j = 0; j < i; ++j) {
                require(values[size_t(i * n + j)] >= 0, "DistanceMatrix: negative distance");
                require(std::abs(values[size_t(i * n + j)] - values[size_t(j * n + i)]) <= real(1e-12),
                        "DistanceMatrix: asymmetric");
            }
        }
    }
    real at(i64 i, i64 j) const { return values[size_t(i * n + j)]; }
};

// Pairwise sliced Wasserstein distances between single samples. All pairs
// share one projection set and one patch-position stream per level, so each
// item is projected and sorted once.
inline DistanceMatrix pairwise_swd_matrix(const std::vector<Tensor>& items, const SwdSettings& s) {
    i64 n = i64(items.size());
    require(n >= 1, "pairwise_swd_matrix: empty item list");
    // cache[item][level][proj] = sorted projections
    size_t n_levels = 0;
    std::vector<std::vector<std::vector<rvec>>> cache((size_t)(n));
    for (i64 i = 0; i < n; ++i) {
        Pyramid pyr = laplacian_pyramid(items[size_t(i)], s.patch_shape, s.max_levels);
        if (n_levels == 0) n_levels = pyr.levels.size();
        require(n_levels == pyr.levels.size(), "pairwise_swd_matrix: inconsistent pyramid depth");
        cache[size_t(i)].resize(n_levels);
        for (size_t k = 0; k < n_levels; ++k) {
            uint64_t level_seed = hash_combine(s.seed, 0x11ace + k);
            PatchSet ps = extract_patches({pyr.levels[k]}, int(k), s.patch_shape,
                                          s.patches_per_set, level_seed);
            rvec dirs = make_projections(level_seed, s.projections, ps.dim);
            auto& rows = cache[size_t(i)][k];
            rows.assign(size_t(s.projections), rvec(size_t(ps.count)));
            parallel_for(s.projections, [&](i64 p) {
                const real* u = dirs.data() + p * ps.dim;
                auto& out = rows[size_t(p)];
                for (i64 q = 0; q < ps.count; ++q) {
                    const real* r = ps.row(q);
                    real acc = 0;
                    for (i64 d = 0; d < ps.dim; ++d) acc += u[d] * r[d];
                    out[size_t(q)] = acc;
                }
                std::sort(out.begin(), out.end());
            });
        }
    }
    rvec vals((size_t)(n * n), real(0));
    for (i64 i = 0; i < n; ++i)
        for (i64 j = i + 1; j < n; ++j) {
            double acc = 0;
            for (size_t k = 0; k < n_levels; ++k) {
                double lvl = 0;
                for (i64 p = 0; p < s.projections; ++p)
                    lvl += wasserstein_1d(cache[size_t(i)][k][size_t(p)],
                                          cache[size_t(j)][k][size_t(p)]);
                acc += lvl / double(s.projections);
            }
            vals[size_t(i * n + j)] = vals[size_t(j * n + i)] = real(acc / double(n_levels));
        }
    return DistanceMatrix(n, std::move(vals));
}

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvalues
// descending, eigenvectors as columns of v.
inline void jacobi_eigen(rvec a, i64 n, rvec& evals,
                         rvec& evecs) {
    rvec v((size_t)(n * n), real(0));
    for (i64 i = 0; i < n; ++i) v[size_t(i * n + i)] = real(1);
    for (int sweep = 0; sweep < 100; ++sweep) {
        real off = 0;
        for (i64 p = 0; p < n; ++p)
            for (i64 q = p + 1; q < n; ++q) off += a[size_t(p * n + q)] * a[size_t(p * n + q)];
        if (off < real(1e-24)) break;
        for (i64 p = 0; p < n; ++p)
            for (i64 q = p + 1; q < n; ++q) {
                real apq = a[size_t(p * n + q)];
                if (std::abs(apq) < real(1e-300)) continue;
                real app = a[size_t(p * n + p)], aqq = a[size_t(q * n + q)];
                real theta = (aqq - app) / (real(2) * apq);
                real t = (theta >= 0 ? real(1) : real(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + real(1)));
                real c = real(1) / std::sqrt(t * t + real(1));
                real s = t * c;
                for (i64 k = 0; k < n; ++k) {
                    real akp = a[size_t(k * n + p)], akq = a[size_t(k * n + q)];
                    a[size_t(k * n + p)] = c * akp - s * akq;
                    a[size_t(k * n + q)] = s * akp + c * akq;
                }
                for (i64 k = 0; k < n; ++k) {
                    real apk = a[size_t(p * n + k)], aqk = a[size_t(q * n + k)];
                    a[size_t(p * n + k)] = c * apk - s * aqk;
                    a[size_t(q * n + k)] = s * apk + c * aqk;
                }
                for (i64 k = 0; k < n; ++k) {
                    real vkp = v[size_t(k * n + p)], vkq = v[size_t(k * n + q)];
                    v[size_t(k * n + p)] = c * vkp - s * vkq;
                    v[size_t(k * n + q)] = s * vkp + c * vkq;
                }
            }
    }
    std::vector<i64> order((size_t)(n));
    for (i64 i = 0; i < n; ++i) order[size_t(i)] = i;
    std::sort(order.begin(), order.end(),
              [&](i64 x, i64 y) { return a[size_t(x * n + x)] > a[size_t(y * n + y)]; });
    evals.resize(size_t(n));
    evecs.assign(size_t(n * n), real(0));
    for (i64 c = 0; c < n; ++c) {
        i64 src = order[size_t(c)];
        evals[size_t(c)] = a[size_t(src * n + src)];
        for (i64 r = 0; r < n; ++r) evecs[size_t(r * n + c)] = v[size_t(r * n + src)];
    }
}

}  // namespace detail

// Classical (Torgerson) multidimensional scaling: double-center the squared
// distances, take the top-k eigenpairs, scale eigenvectors by the square root
// of the (clamped) eigenvalues. Output is centered at the origin.
inline rvec classical_mds(const DistanceMatrix& dm, int k = 2) {
    i64 n = dm.n;
    require(n >= i64(k) + 1, "classical_mds: need at least k+1 items");
    rvec b((size_t)(n * n));
    rvec row_mean((size_t)(n), real(0));
    real total = 0;
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < n; ++j) {
            real d2 = dm.at(i, j) * dm.at(i, j);
            b[size_t(i * n + j)] = d2;
            row_mean[size_t(i)] += d2;
            total += d2;
        }
    for (i64 i = 0; i < n; ++i) row_mean[size_t(i)] /= real(n);
    total /= real(n * n);
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < n; ++j)
            b[size_t(i * n + j)] = real(-0.5) * (b[size_t(i * n + j)] - row_mean[size_t(i)] -
                                                 row_mean[size_t(j)] + total);
    rvec evals, evecs;
    detail::jacobi_eigen(std::move(b), n, evals, evecs);
    rvec coords((size_t)(n * k), real(0));
    for (int c = 0; c < k; ++c) {
        real lam = std::max(evals[size_t(c)], real(0));
        real scale = std::sqrt(lam);
        for (i64 r = 0; r < n; ++r) coords[size_t(r * k + c)] = evecs[size_t(r * n + c)] * scale;
    }
    // re-center; eigenvectors of the centered matrix are orthogonal to 1 up to rounding
    for (int c = 0; c < k; ++c) {
        real mean = 0;
        for (i64 r = 0; r < n; ++r) mean += coords[size_t(r * k + c)];
        mean /= real(n);
        for (i64 r = 0; r < n; ++r) coords[size_t(r * k + c)] -= mean;
    }
    return coords;
}

// ---- memorization check -------------------------------------------------------------------

// Closest training sample under the multiscale sliced Wasserstein distance;
// ties resolve to the lowest index. The projection seed is shared across all
// comparisons.
inline std::pair<i64, double> nearest_training_sample(const Tensor& query,
                                                      const std::vector<Tensor>& training,
                                                      const SwdSettings& s) {
    if (training.empty()) throw ConfigError("nearest_training_sample: empty training set");
    i64 best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    std::vector<Tensor> q{query};
    for (size_t j = 0; j < training.size(); ++j) {
        double d = swd_score(q, {training[j]}, s).mean;
        if (d < best_d) {
            best_d = d;
            best = i64(j);
        }
    }
    return {best, best_d};
}

// ---- Folk facies --------------------------------------------------------------------------

enum class Facies : uint8_t { Clay = 0, SandyClay = 1, ClayeySandSand = 2 };

struct FaciesVolume {
    Shape dims;
    std::vector<uint8_t> classes;
    rvec mean_grain_mm;
};

// Three lithofacies from the sand-equivalent fraction with Folk's 1:9 and 1:1
// sand:mud cutoffs; the mean grain size (linear mixing by default, phi-scale
// behind the flag) is emitted alongside for reporting.
inline FaciesVolume folk_facies(const Tensor& coarse_fraction, double d_coarse_mm,
                                double d_fine_mm, bool phi_scale = false) {
    require(d_fine_mm > 0 && d_fine_mm < d_coarse_mm,
            "folk_facies: need 0 < d_fine < d_coarse");
    const auto& f = coarse_fraction.data();
    FaciesVolume out;
    out.dims = coarse_fraction.shape();
    out.classes.resize(f.size());
    out.mean_grain_mm.resize(f.size());
    double phi_c = -std::log2(d_coarse_mm), phi_f = -std::log2(d_fine_mm);
    for (size_t i = 0; i < f.size(); ++i) {
        double v = double(f[i]);
        if (v < -1e-9 || v > 1.0 + 1e-9)
            throw DataError("folk_facies: coarse fraction outside [0,1]");
        v = std::clamp(v, 0.0, 1.0);
        if (phi_scale) {
            double phi = v * phi_c + (1.0 - v) * phi_f;
            out.mean_grain_mm[i] = real(std::pow(2.0, -phi));
        } else {
            out.mean_grain_mm[i] = real(v * d_coarse_mm + (1.0 - v) * d_fine_mm);
        }
        out.classes[i] = v < 0.1 ? uint8_t(Facies::Clay)
                                 : (v < 0.5 ? uint8_t(Facies::SandyClay)
                                            : uint8_t(Facies::ClayeySandSand));
    }
    return out;
}

}  // namespace fluvgan
