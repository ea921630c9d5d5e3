#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace farfield {

// Filesystem-level failure: missing file, unwritable path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Structurally invalid input: bad magic, unsupported encoding, malformed record.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Semantically invalid data: truncated payload, dimension mismatch, empty input.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr double kPi = 3.14159265358979323846;

/// Deterministic random source. All draws are derived from mt19937_64 output
/// through fixed mappings, so a seed reproduces the same stream on every build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

    double exponential(double mean) {
        double u = 0.0;
        while (u <= 0.0) u = uniform();
        return -mean * std::log(u);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace farfield
