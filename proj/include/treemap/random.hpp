#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace treemap {

// Counter-based randomness. Every draw is a pure function of its keys so
// results do not depend on call order, thread scheduling, or the standard
// library's distribution implementations.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

template <typename... Rest>
constexpr std::uint64_t mix(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return mix(mix(a, b), static_cast<std::uint64_t>(rest)...);
}

/// Uniform in [0, 1) with 53 random bits.
constexpr double unit_uniform(std::uint64_t key) {
    return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two derived uniforms.
inline double standard_normal(std::uint64_t key) {
    const double u1 = 1.0 - unit_uniform(mix(key, 1));  // (0, 1]
    const double u2 = unit_uniform(mix(key, 2));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential generator for shuffles; state advances by a Weyl step.
class KeyedStream {
public:
    explicit KeyedStream(std::uint64_t key) : state_(key) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }

    /// Unbiased integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t r = next();
        while (r >= limit) r = next();
        return r % bound;
    }

private:
    std::uint64_t state_;
};

template <typename T>
void keyed_shuffle(std::span<T> items, std::uint64_t key) {
    KeyedStream stream(key);
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(stream.below(i));
        using std::swap;
        swap(items[i - 1], items[j]);
    }
}

}  // namespace treemap
