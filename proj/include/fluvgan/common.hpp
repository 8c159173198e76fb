#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fluvgan {

#if defined(__GLIBC__)
// Large activation buffers churn through malloc every op; keeping them on the
// heap instead of per-call mmap avoids refaulting the pages each time.
namespace detail {
inline const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();
}  // namespace detail
#endif

#ifdef FLUVGAN_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using i64 = long long;
using Shape = std::vector<i64>;
using Vec3 = std::array<i64, 3>;

// Scalar buffers skip value-initialization on resize; every producer fully
// overwrites its output (accumulating kernels zero-fill explicitly).
template <class T>
struct DefaultInitAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAlloc<U>;
    };
    template <class U>
    void construct(U* p) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using rvec = std::vector<real, DefaultInitAlloc<real>>;

// Invalid configuration, shapes, flags: CLI exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Bad or truncated files, missing data: CLI exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Non-finite values where finiteness is required: CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline i64 numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

inline bool all_finite(const std::vector<real>& v) {
    for (real x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Deterministic RNG. mt19937_64 supplies the bits; the uniform and normal
// mappings are our own so that streams do not depend on libstdc++'s
// distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed), state_hash_(mix64(seed)) {}

    static uint64_t mix64(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    i64 uniform_index(i64 n) { return i64(uniform() * double(n)) % n; }

    // Standard normal via Box-Muller, one spare cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Derived stream; depends only on this generator's seed and the salt,
    // never on how many values were drawn.
    Rng fork(uint64_t salt) const { return Rng(mix64(state_hash_ ^ mix64(salt))); }

    void serialize(std::ostream& os) const {
        os << eng_ << "\n" << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_ << " " << state_hash_ << "\n";
    }

    void deserialize(std::istream& is) {
        is >> eng_;
        int hs = 0;
        is >> hs >> spare_ >> state_hash_;
        has_spare_ = hs != 0;
        if (!is) throw DataError("truncated RNG state");
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
    uint64_t state_hash_ = 0;
};

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
    return a;
}

// ---- intra-op worker pool ---------------------------------------------------
//
// Work is split into disjoint index ranges; every output element is computed
// by exactly one worker in a fixed order, so results are identical for any
// thread count.

namespace detail {
inline int& thread_count_ref() {
    static int n = 1;
    return n;
}
}  // namespace detail

inline void set_threads(int n) { detail::thread_count_ref() = n < 1 ? 1 : n; }
inline int get_threads() { return detail::thread_count_ref(); }

template <typename Fn>
void parallel_for(i64 n, Fn&& fn) {
    int workers = get_threads();
    if (workers <= 1 || n < 2) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    if (workers > n) workers = int(n);
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    i64 chunk = (n + workers - 1) / workers;
    auto run = [&fn](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i) fn(i);
    };
    for (int w = 1; w < workers; ++w) {
        i64 lo = w * chunk;
        i64 hi = std::min(n, lo + chunk);
        if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace fluvgan
