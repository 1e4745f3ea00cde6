#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace vkcc {

// Bad arguments, malformed files, contract violations. CLI maps this to exit 2.
class InvalidInput : public std::runtime_error {
public:
    explicit InvalidInput(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf or a guarded division tripped mid-computation. CLI maps this to exit 3.
class NumericFault : public std::runtime_error {
public:
    explicit NumericFault(const std::string& what) : std::runtime_error(what) {}
};

// I/O failures: missing files, short reads, bad magic.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Child seed for (global seed, sample index, epoch); workers may draw samples in
// any order without perturbing each other's streams.
inline std::uint64_t derive_seed(std::uint64_t global, std::uint64_t index, std::uint64_t epoch) {
    return mix_seed(mix_seed(global ^ 0x517cc1b727220a95ULL) ^ mix_seed(index) ^ mix_seed(~epoch));
}

// Uniform double in [a, b). Hand-rolled so streams are identical across
// standard libraries (std::uniform_real_distribution is implementation-defined).
inline double uniform_double(Rng& rng, double a = 0.0, double b = 1.0) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return a + (b - a) * u;
}

// Uniform integer in [0, n); rejection sampling, portable.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    if (n == 0) throw InvalidInput("uniform_index: empty range");
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

// Standard normal via Box-Muller (no state carried between calls).
inline double normal_double(Rng& rng) {
    double u1 = uniform_double(rng);
    while (u1 <= 0.0) u1 = uniform_double(rng);
    const double u2 = uniform_double(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename It>
void shuffle_indices(It first, It last, Rng& rng) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        const std::uint64_t j = uniform_index(rng, i);
        std::swap(first[i - 1], first[j]);
    }
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace vkcc
