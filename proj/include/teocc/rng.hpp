#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace teocc {

/// Deterministic splitmix64 generator. We avoid <random> distributions on
/// purpose: their output is implementation-defined, and dataset generation,
/// parameter init, and training draws must reproduce bit-for-bit across
/// toolchains.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::int64_t uniform_int(std::int64_t n) {
        // Lemire's multiply-shift map; the bias is O(n / 2^64).
        return static_cast<std::int64_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<std::uint64_t>(n)) >> 64);
    }

    /// Standard normal via Box-Muller. Stateless between calls so the
    /// generator state stays a single u64.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        u1 = std::max(u1, 0x1.0p-53);  // guard log(0)
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

    /// Derive an independent stream. Used to split one run seed into data,
    /// init, and step streams without correlating them.
    Rng fork(std::uint64_t tag) const {
        Rng r(state_ ^ (0x632be59bd9b4e019ull * (tag + 1)));
        r.next_u64();
        return r;
    }

    Rng fork(const std::string& tag) const { return fork(fnv1a(tag)); }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    static std::uint64_t fnv1a(const std::string& s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    std::uint64_t state_;
};

}  // namespace teocc
