#pragma once

// Portable seeded randomness.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard distributions are implementation-defined, so every
// derived quantity (uniform reals, bounded integers, normals, shuffles) is
// computed here from raw 64-bit draws. A given seed therefore produces the
// same stream on every conforming platform.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace kohscan {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n > 0, by rejection (no modulo bias).
    std::uint64_t below(std::uint64_t n);

    /// Uniform integer in [lo, hi] inclusive.
    int integer(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    /// Standard normal by the Box-Muller transform, second variate cached.
    double normal();

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    /// Fisher-Yates, from the last element down.
    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Textual engine state (portable across platforms) for checkpoints.
    std::string save_state() const;
    void restore_state(const std::string& state);

    /// SplitMix64 mix of (seed, stream): independent sub-seeds for per-item generators.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// FNV-1a 64-bit hash of a byte string.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace kohscan
