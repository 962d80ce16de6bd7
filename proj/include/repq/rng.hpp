#pragma once

#include <cstdint>
#include <random>

namespace repq {

// Deterministic random streams. The raw mt19937_64 sequence is pinned by
// the standard; the mappings below avoid std::*_distribution so values are
// identical across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0,1)
    double uniform() { return double(eng_() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, no state carried
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return lo + int64_t(eng_() % uint64_t(hi - lo + 1));
    }

    // Fisher-Yates
    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(eng_() % uint64_t(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace repq
