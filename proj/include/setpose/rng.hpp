#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace setpose {

/// Counter-based random stream. Each value is a pure function of
/// (key, counter), so streams derived from the same seed under different
/// names never interfere, and a stream position can be saved and restored
/// as a single integer. Distributions are implemented here rather than with
/// <random> so sequences are identical across standard libraries.
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::string_view name)
        : key_(mix(seed ^ hash_name(name))) {}
    RngStream(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

    /// Child stream keyed by (this key, name, index); does not advance this stream.
    RngStream substream(std::string_view name, std::uint64_t index = 0) const {
        return RngStream(mix(key_ ^ hash_name(name) ^ mix(index + 0x632BE59BD9B4E019ULL)), 0);
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection keeps the distribution exact.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller (one value per call, no caching so the
    /// counter fully describes the state).
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static constexpr std::uint64_t hash_name(std::string_view s) {
        std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        return h;
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace setpose
