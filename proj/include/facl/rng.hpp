#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace facl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream seed for (base seed, purpose tag, indices...). Each
// consumer of randomness draws from its own stream, so switching one
// component off never shifts the draws another component sees.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = splitmix64(base);
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

enum class Stream : std::uint64_t {
    Init = 1,
    Data,
    Batches,
    Pairing,
    ViewA,
    ViewB,
    Noise,
    FewShot,
    Transforms,
    Prototypes,
    Finetune,
};

inline std::uint64_t stream_seed(std::uint64_t base, Stream s, std::uint64_t a = 0, std::uint64_t b = 0) {
    return derive_seed(base, {static_cast<std::uint64_t>(s), a, b});
}

// Uniform index in [0, n). Modulo reduction keeps the draw sequence identical
// across standard library implementations; the bias is negligible for small n.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(rng() % n);
}

}  // namespace facl
