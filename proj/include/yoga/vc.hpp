#pragma once

#include <cmath>
#include <cstdint>

#include "yoga/tensor.hpp"

namespace yoga {

// Vapnik-Chervonenkis generalization bound
//   P[|E_in - E_out| > eps] <= 4 * m_h(2N) * exp(-eps^2 N / 8)
// with the polynomial growth-function upper bound m_h(2N) <= (2N)^m.
// Evaluated in log space; the bound itself can exceed double range.

struct VcBoundQuery {
    double epsilon = 0.05;
    int64_t n_samples = 0;
    int64_t growth_exponent = 0;  // m, an upper bound on the VC dimension

    void validate() const {
        if (!(epsilon > 0.0) || !(epsilon < 1.0)) throw ValueError("VcBoundQuery: epsilon in (0,1)");
        if (n_samples < 1) throw ValueError("VcBoundQuery: need at least one sample");
        if (growth_exponent < 0) throw ValueError("VcBoundQuery: negative growth exponent");
    }
};

struct VcBound {
    double log_bound = 0;  // natural log
    double bound = 0;      // exp(log_bound); may round to 0 or overflow to inf
};

inline VcBound vc_bound(const VcBoundQuery& q) {
    q.validate();
    const double n = static_cast<double>(q.n_samples);
    const double m = static_cast<double>(q.growth_exponent);
    VcBound b;
    b.log_bound = std::log(4.0) + m * std::log(2.0 * n) - q.epsilon * q.epsilon * n / 8.0;
    b.bound = std::exp(b.log_bound);
    return b;
}

// Smallest N with bound <= delta. The bound is eventually decreasing in N
// (exponential beats polynomial); search by doubling then bisection.
inline int64_t samples_needed(double epsilon, int64_t growth_exponent, double delta = 0.05) {
    if (!(delta > 0) || !(delta < 1)) throw ValueError("samples_needed: delta in (0,1)");
    auto log_bound_at = [&](int64_t n) {
        return vc_bound(VcBoundQuery{epsilon, n, growth_exponent}).log_bound;
    };
    const double target = std::log(delta);
    int64_t hi = 1;
    while (log_bound_at(hi) > target) {
        if (hi > (1ll << 56)) throw ValueError("samples_needed: no feasible N in range");
        hi *= 2;
    }
    int64_t lo = hi / 2;  // bound(lo) > target or lo == 0
    while (lo + 1 < hi) {
        const int64_t mid = lo + (hi - lo) / 2;
        if (log_bound_at(mid) <= target)
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

// the 10x VC-dimension heuristic for sample sufficiency
inline int64_t rule_of_thumb_samples(int64_t growth_exponent) { return 10 * growth_exponent; }

}  // namespace yoga
