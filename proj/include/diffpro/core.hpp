#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace diffpro {

// ---------------------------------------------------------------- errors

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericFailure : std::runtime_error {
    std::string where;
    explicit NumericFailure(const std::string& msg, std::string where_ = "")
        : std::runtime_error(msg + (where_.empty() ? "" : " [" + where_ + "]")), where(std::move(where_)) {}
};

// Carries the name of the resource that could not be met ("latency" / "memory").
struct BudgetInfeasible : std::runtime_error {
    std::string resource;
    BudgetInfeasible(const std::string& msg, std::string resource_)
        : std::runtime_error(msg), resource(std::move(resource_)) {}
};

// ---------------------------------------------------------------- hashing

// FNV-1a, 64-bit. Used for plan fingerprints and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Mixes a base seed with a tag and up to two indices into an independent stream seed.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = fnv1a64(&base, sizeof(base));
    h = fnv1a64(tag, h);
    h = fnv1a64(&a, sizeof(a), h);
    h = fnv1a64(&b, sizeof(b), h);
    return h;
}

// ---------------------------------------------------------------- rng

// mt19937_64 with an explicit Box-Muller transform so that normal draws are
// bit-identical regardless of the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform01();  // (0, 1], keeps log() finite
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, n); modulo bias is irrelevant at desk scale
    int uniform_int(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform01() < p; }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------- matrix

// Minimal row-major dense matrix of doubles.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }

    bool all_finite() const {
        for (double v : a)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Y = X * W^T + b, with X n-by-in and W out-by-in (linear layer convention).
inline Mat matmul_wt(const Mat& x, const Mat& w, const std::vector<double>& bias) {
    Mat y(x.rows, w.rows);
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double* yr = y.row(i);
        for (int j = 0; j < w.rows; ++j) {
            const double* wr = w.row(j);
            double acc = 0.0;
            for (int k = 0; k < x.cols; ++k) acc += xr[k] * wr[k];
            yr[j] = acc + (bias.empty() ? 0.0 : bias[j]);
        }
    }
    return y;
}

// ---------------------------------------------------------------- parallel_for

// Static block partition; item i is always computed from the same inputs, so
// results are identical for any worker count as long as outputs are written
// into per-index slots.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
    if (n <= 0) return;
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (int i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace diffpro
