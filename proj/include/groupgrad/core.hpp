/**
 * Shared scalar utilities: stable softmax/logsumexp, portable seeded
 * randomness, and population statistics.
 *
 * All floating-point work in the library is double precision.  Random draws
 * go through mt19937_64 plus an explicit 53-bit mantissa conversion so runs
 * are bit-reproducible across standard library implementations.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groupgrad {

using TokenId = std::int32_t;

/// Raised when a run or request is inconsistent with the configured setup
/// (unknown prompt, unregistered scenario, malformed config file, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline double logsumexp(std::span<const double> xs) {
    double m = xs[0];
    for (double x : xs) m = std::max(m, x);
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x - m);
    return m + std::log(acc);
}

inline std::vector<double> softmax(std::span<const double> logits) {
    const double lse = logsumexp(logits);
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
    return p;
}

/// Uniform double in [0, 1) built from the top 53 bits of the engine output.
inline double canonical(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Box-Muller standard normal on top of canonical().
inline double gaussian(std::mt19937_64& rng) {
    double u1 = canonical(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = canonical(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// splitmix64 step; used to derive independent per-stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// Population (biased) variance.
inline double variance_of(std::span<const double> xs) {
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size());
}

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace groupgrad
