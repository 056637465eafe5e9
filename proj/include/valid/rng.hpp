#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace valid {

// Deterministic RNG used everywhere. All draws go through explicit helpers
// (no std::*_distribution) so sequences are pinned by this file alone.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform double in [0, 1), 53-bit resolution
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller; two u64 draws per call, no cached spare
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // k distinct indices from [0, n), returned sorted ascending
    std::vector<int> sample_without_replacement(int n, int k);

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 eng_;
};

// splitmix64 step, used to derive independent child seeds
uint64_t mix_seed(uint64_t x);

// hash-combine a base seed with a path of stream ids
uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> path);

}  // namespace valid
