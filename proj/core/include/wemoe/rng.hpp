#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace wemoe {

// Deterministic random source. mt19937_64 has a standard-specified output
// sequence; the distributions below are implemented by hand because the
// std::*_distribution classes are implementation-defined and would break
// bit-identical reproducibility across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n);

    // Standard normal via Box-Muller with a cached spare.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    void fill_normal(std::vector<float>& buf, float mean, float stddev);

    // Deterministic Fisher-Yates (std::shuffle is implementation-defined).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Named sub-seed derivation so partial pipeline re-runs see identical streams:
// derive_seed(root, "task", 2) is stable regardless of what else ran.
uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t index = 0);

}  // namespace wemoe
