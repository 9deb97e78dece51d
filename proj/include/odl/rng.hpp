#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace odl {

// splitmix64 finalizer; derives independent stream seeds from a master seed.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Seeded RNG on top of std::mt19937_64. The bit-to-double conversions and the
// Box-Muller transform are explicit so sequences are identical across standard
// library implementations, not just across runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0,1), 53-bit resolution
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0,n)
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // one standard normal draw (Box-Muller, cosine branch)
    double gauss() {
        auto [z0, z1] = gauss_pair();
        (void)z1;
        return z0;
    }

    // two independent standard normal draws from one Box-Muller transform
    std::pair<double, double> gauss_pair() {
        double u1 = 1.0 - uniform();  // (0,1], keeps log() finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        return {r * std::cos(a), r * std::sin(a)};
    }

    // circularly symmetric complex Gaussian CN(0, variance)
    std::complex<double> cgauss(double variance) {
        auto [zr, zi] = gauss_pair();
        double s = std::sqrt(variance / 2.0);
        return {s * zr, s * zi};
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace odl
