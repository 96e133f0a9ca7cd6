// Shared aliases, error types, deterministic RNG, and unit helpers.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace staploc {

using Complex = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using RMat = Eigen::MatrixXd;
using RVec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;

// Error taxonomy; the CLI maps these onto exit codes (config 2, numeric 3, io 4).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};
struct FormatError : IoError {
    explicit FormatError(const std::string& msg) : IoError("bad format: " + msg) {}
};

constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

// Sentinel for zero-power ratios (10*log10(0)).
constexpr double kMinDb = -300.0;

// Total function: non-positive ratios clamp to the sentinel instead of
// emitting -inf/NaN that would poison downstream dB averages.
inline double linear_to_db(double lin) {
    if (!(lin > 0.0)) return kMinDb;
    return std::max(10.0 * std::log10(lin), kMinDb);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable substream derivation: hash-chains the path onto the master seed so
// parallel per-example generation matches serial generation bit for bit.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(master);
    for (std::uint64_t p : path) s = splitmix64(s ^ (p + 0x632be59bd9b4e019ULL));
    return s;
}

// mt19937_64 engine with hand-rolled distribution transforms.  The std::
// distributions are implementation-defined, so sampling goes through fixed
// formulas to keep streams reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; no spare caching so the stream layout is position-independent.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    // Circularly symmetric CN(0, 1): one Box-Muller pair scaled to put unit
    // total variance across re/im.
    Complex cnormal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double z = std::sqrt(-std::log(u1));  // sqrt(-2 ln u1) / sqrt(2)
        const double phi = 2.0 * kPi * u2;
        return {z * std::cos(phi), z * std::sin(phi)};
    }

    // Unbiased integer in [0, n); rejection sampling on the top bits.
    std::uint64_t bounded(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("bounded(0)");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = eng_();
        while (x >= limit) x = eng_();
        return x % n;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace staploc
