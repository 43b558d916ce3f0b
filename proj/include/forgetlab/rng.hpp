#pragma once

// Counter-based deterministic random numbers. Every stream is keyed by
// (seed, stream name); the n-th value of a stream depends only on that key
// and n, never on global state. Distinct streams therefore never collide
// and may be consumed from different threads.

#include <cstdint>
#include <cstring>
#include <cmath>
#include <string_view>
#include <vector>

namespace forgetlab {

namespace detail {

inline std::uint64_t splitmix64_finalize(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// FNV-1a over the stream name, folded into the seed.
inline std::uint64_t stream_key(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    h ^= splitmix64_finalize(seed + 0x9e3779b97f4a7c15ULL);
    return splitmix64_finalize(h);
}

} // namespace detail

class KeyedRng {
public:
    KeyedRng(std::uint64_t seed, std::string_view stream)
        : key_(detail::stream_key(seed, stream)) {}

    std::uint64_t next_u64() {
        ++counter_;
        return detail::splitmix64_finalize(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; consumes exactly two uniforms.
    double gaussian() {
        double u1 = 1.0 - uniform01(); // (0, 1], keeps the log finite
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Modulo bias is ~n/2^64, irrelevant at the sizes used here.
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace forgetlab
