#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace axlab {

/// Seeded random source. The engine is std::mt19937_64 (fully specified by the
/// standard); the distributions are written out here because the standard
/// library's distributions are implementation-defined, and datasets and
/// checkpoints must be byte-identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, n), unbiased. n must be > 0.
    std::uint64_t uniform_below(std::uint64_t n);
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi);
    /// Uniform in [0, 1) with 53 random bits.
    double uniform01();
    double normal();

    template <typename U>
    void shuffle(std::span<U> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
/// Named sub-seed ("data", "init", "batching", "lam-pairs", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);
/// Indexed sub-seed, e.g. one per generated example.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace axlab
