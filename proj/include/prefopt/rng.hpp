#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace prefopt {

/// Explicit RNG state. Draws are implemented here rather than through
/// std:: distributions so that streams are identical across standard
/// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const unsigned __int128 wide = static_cast<unsigned __int128>(engine_()) * n;
        return static_cast<std::uint64_t>(wide >> 64);
    }

    double normal();

    /// Index drawn from a probability vector (need not be exactly normalized).
    std::size_t categorical(std::span<const double> probs);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Stable sub-seed for a named purpose, e.g. derive_seed(seed, "ref_policy").
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace prefopt
