#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace digitcast {

/// Thrown for malformed configs, files, or argument contract violations.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when a computation fails at runtime (non-finite loss, missing
/// checkpoint, ...), as opposed to a bad input.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major matrix of doubles. The workhorse container for
/// activations and trainable tensors; no ownership tricks, just a vector.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

inline int default_jobs() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads, contiguous chunks.
/// Callers must write to disjoint slots so the result is independent of
/// scheduling. jobs <= 0 means hardware concurrency.
template <typename Fn>
void parallel_for(size_t n, int jobs, Fn&& fn) {
    if (jobs <= 0) jobs = default_jobs();
    size_t workers = std::min<size_t>(static_cast<size_t>(jobs), n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    size_t chunk = (n + workers - 1) / workers;
    for (size_t w = 0; w < workers; ++w) {
        size_t lo = w * chunk;
        size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

inline const char* version() {
#ifdef DIGITCAST_VERSION
    return DIGITCAST_VERSION;
#else
    return "0.0.0";
#endif
}

}  // namespace digitcast
