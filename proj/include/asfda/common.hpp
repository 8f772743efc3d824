#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace asfda {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Raised by the tensor container reader/writer. `kind` distinguishes the
/// failure category so callers (and tests) need not parse messages.
class TensorIoError : public std::runtime_error {
public:
    enum class Kind { io, bad_magic, bad_version, bad_dtype, bad_shape, truncated, non_finite };

    TensorIoError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    Kind kind;
};

/// Manifest validation failure; message lists the offending slice ids.
class ManifestError : public std::runtime_error {
public:
    explicit ManifestError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad run configuration (unknown key, out-of-range value, unknown strategy).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training diverged (non-finite loss); carries the offending step index.
class TrainError : public std::runtime_error {
public:
    TrainError(long step_, const std::string& msg) : std::runtime_error(msg), step(step_) {}
    long step;
};

// ---------------------------------------------------------------------------
// Seeding and random draws
//
// All stochastic behaviour in the pipeline flows through Rng so that a run is
// a pure function of its seeds. Distributions are implemented by hand because
// the standard library's are not pinned down across implementations.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// splitmix64 finalizer; used to decorrelate derived seeds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Per-purpose seed derived from a master seed and a short tag.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    return mix64(master ^ fnv1a64(tag));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n); n > 0.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Number formatting for CSV/JSON side files: shortest round-trip form, so
// reruns with identical state produce byte-identical reports.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

} // namespace asfda
