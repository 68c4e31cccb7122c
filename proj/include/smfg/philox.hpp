#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace smfg {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
// Every draw is a pure function of (key, counter), so any particle/epoch/edge
// variate can be regenerated without replaying a stream.
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter block(Counter c, Key k) {
        for (int r = 0; r < 10; ++r) {
            if (r > 0) {
                k[0] += 0x9E3779B9u;
                k[1] += 0xBB67AE85u;
            }
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
            c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0], static_cast<std::uint32_t>(p1),
                 static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1], static_cast<std::uint32_t>(p0)};
        }
        return c;
    }

    static Key key_of(std::uint64_t seed) {
        return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    }
};

// Named streams so different uses of one seed never share counters.
enum class Stream : std::uint32_t { holding = 0, initial = 1, init_weights = 2, sample_seeds = 3, paths = 4 };

// Uniform in the open interval (0,1) from 64 random bits.
inline double open_uniform(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t x = (std::uint64_t{hi} << 32) | lo;
    // 52 bits so that the half-offset stays representable below 1
    return (static_cast<double>(x >> 12) + 0.5) * 0x1.0p-52;
}

// Two open uniforms addressed by (seed, stream, a, b, c).
inline std::array<double, 2> uniforms2(std::uint64_t seed, Stream s, std::uint32_t a, std::uint32_t b,
                                       std::uint32_t c) {
    const auto r = Philox4x32::block({a, b, c, static_cast<std::uint32_t>(s)}, Philox4x32::key_of(seed));
    return {open_uniform(r[0], r[1]), open_uniform(r[2], r[3])};
}

inline std::uint64_t bits64(std::uint64_t seed, Stream s, std::uint32_t a, std::uint32_t b, std::uint32_t c) {
    const auto r = Philox4x32::block({a, b, c, static_cast<std::uint32_t>(s)}, Philox4x32::key_of(seed));
    return (std::uint64_t{r[0]} << 32) | r[1];
}

inline double exp1(double u) { return -std::log(u); }

// FNV-1a over raw bytes; used for batch fingerprints.
struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ull;
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 0x100000001b3ull;
        }
    }
    template <class T>
    void add(const T& v) { bytes(&v, sizeof(T)); }
};

}  // namespace smfg
