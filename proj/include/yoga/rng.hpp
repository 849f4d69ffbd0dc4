#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "yoga/tensor.hpp"

namespace yoga {

// Seeded RNG with self-implemented distributions. std:: distributions are
// implementation-defined across standard libraries; these are not, so a seed
// produces the same stream everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds, unbiased via rejection
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return lo + static_cast<int64_t>(x % range);
    }

    // Box-Muller; caches the second deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean, double stddev) {
        for (auto& v : t.data) v = static_cast<T>(normal(mean, stddev));
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace yoga
