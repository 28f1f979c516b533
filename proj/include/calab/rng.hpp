#ifndef CALAB_RNG_HPP
#define CALAB_RNG_HPP

#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

#include "calab/errors.hpp"

namespace calab {

/// splitmix64 finalizer; used to derive well-separated seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// FNV-1a over a tag string, for human-readable stream names.
inline std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Combine a base seed with a tag and index into a fresh seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    return mix_seed(base ^ mix_seed(hash_tag(tag) + 0x9e3779b97f4a7c15ULL * (index + 1)));
}

/// Seeded random stream. Every stochastic operation takes one of these
/// explicitly, so runs are reproducible and independent streams can be
/// handed to parallel workers.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : engine_(mix_seed(seed)), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    /// Independent child stream; deterministic in (seed, tag, index).
    RngStream derive(std::string_view tag, std::uint64_t index = 0) const {
        return RngStream(derive_seed(seed_, tag, index));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    double gamma(double shape) {
        return std::gamma_distribution<double>(shape, 1.0)(engine_);
    }

    /// Beta(a, b) via two gamma draws.
    double beta(double a, double b) {
        if (a <= 0.0 || b <= 0.0) throw config_error("beta: concentrations must be > 0");
        const double x = gamma(a);
        const double y = gamma(b);
        const double s = x + y;
        if (s <= 0.0) return 0.5;
        return x / s;
    }

    /// Symmetric Dirichlet(a, ..., a) over k components; sums to 1.
    std::vector<double> dirichlet(std::size_t k, double a) {
        if (k == 0) throw config_error("dirichlet: k must be >= 1");
        if (a <= 0.0) throw config_error("dirichlet: concentration must be > 0");
        std::vector<double> w(k);
        double sum = 0.0;
        for (auto& v : w) {
            v = gamma(a);
            sum += v;
        }
        if (sum <= 0.0) {
            for (auto& v : w) v = 1.0 / static_cast<double>(k);
            return w;
        }
        for (auto& v : w) v /= sum;
        return w;
    }

    /// Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates permutation of [0, n).
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = uniform_index(i);
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
};

} // namespace calab

#endif // CALAB_RNG_HPP
