// Independent reference implementations used as test oracles. Everything here
// is deliberately naive (nested loops, 64-bit accumulation) and shares no code
// with the library paths it checks.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "yoga/kernels.hpp"
#include "yoga/rng.hpp"
#include "yoga/tensor.hpp"

namespace oracle {

using yoga::Shape;
using yoga::Tensor;

// Six nested loops, double accumulation, explicit zero padding.
inline Tensor<double> ref_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                                 const Tensor<double>* bias, const yoga::ConvSpec& spec) {
    Shape os = spec.out_shape(x.shape);
    Tensor<double> y(os);
    const int64_t icg = spec.in_ch / spec.groups;
    const int64_t ocg = spec.out_ch / spec.groups;
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t oc = 0; oc < os.c; ++oc)
            for (int64_t oy = 0; oy < os.h; ++oy)
                for (int64_t ox = 0; ox < os.w; ++ox) {
                    double acc = 0.0;
                    for (int64_t ic = 0; ic < icg; ++ic)
                        for (int64_t ky = 0; ky < spec.kh; ++ky)
                            for (int64_t kx = 0; kx < spec.kw; ++kx) {
                                const int64_t iy = oy * spec.stride + ky - spec.padding;
                                const int64_t ix = ox * spec.stride + kx - spec.padding;
                                double v = 0.0;
                                if (iy >= 0 && iy < x.shape.h && ix >= 0 && ix < x.shape.w)
                                    v = x.at(n, (oc / ocg) * icg + ic, iy, ix);
                                acc += v * w.at(oc, ic, ky, kx);
                            }
                    if (bias) acc += bias->data[static_cast<size_t>(oc)];
                    y.at(n, oc, oy, ox) = acc;
                }
    return y;
}

// Two-pass batch statistics reference (train mode).
inline Tensor<double> ref_batchnorm_train(const Tensor<double>& x, const std::vector<double>& gamma,
                                          const std::vector<double>& beta, double eps) {
    Tensor<double> y(x.shape);
    const int64_t m = x.shape.n * x.shape.h * x.shape.w;
    for (int64_t c = 0; c < x.shape.c; ++c) {
        double mean = 0.0;
        for (int64_t n = 0; n < x.shape.n; ++n)
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w) mean += x.at(n, c, h, w);
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (int64_t n = 0; n < x.shape.n; ++n)
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w)
                    var += (x.at(n, c, h, w) - mean) * (x.at(n, c, h, w) - mean);
        var /= static_cast<double>(m);
        for (int64_t n = 0; n < x.shape.n; ++n)
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w)
                    y.at(n, c, h, w) =
                        gamma[static_cast<size_t>(c)] * (x.at(n, c, h, w) - mean) / std::sqrt(var + eps) +
                        beta[static_cast<size_t>(c)];
    }
    return y;
}

// Window scan over the clipped window.
inline Tensor<double> ref_maxpool(const Tensor<double>& x, int64_t k, int64_t s, int64_t p) {
    const int64_t oh = (x.shape.h + 2 * p - k) / s + 1;
    const int64_t ow = (x.shape.w + 2 * p - k) / s + 1;
    Tensor<double> y(Shape{x.shape.n, x.shape.c, oh, ow});
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < x.shape.c; ++c)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double best = -1e300;
                    for (int64_t iy = std::max<int64_t>(0, oy * s - p);
                         iy < std::min(x.shape.h, oy * s - p + k); ++iy)
                        for (int64_t ix = std::max<int64_t>(0, ox * s - p);
                             ix < std::min(x.shape.w, ox * s - p + k); ++ix)
                            best = std::max(best, x.at(n, c, iy, ix));
                    y.at(n, c, oy, ox) = best;
                }
    return y;
}

// Finite-difference gradient audit. The function owns nothing: callers hand a
// list of scalar slots (parameters and/or inputs), a forward closure producing
// the scalar objective, and the analytic gradient slot list in the same order.
struct FdReport {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
    size_t worst_index = 0;
};

// Relative error is measured per tensor-slot group with infinity norms:
//   max|g_an - g_fd| / max(||g_an||_inf, ||g_fd||_inf, floor)
inline double rel_err_inf(const std::vector<double>& an, const std::vector<double>& fd,
                          double floor = 1e-10) {
    double num = 0.0, den = floor;
    for (size_t i = 0; i < an.size(); ++i) {
        num = std::max(num, std::abs(an[i] - fd[i]));
        den = std::max(den, std::max(std::abs(an[i]), std::abs(fd[i])));
    }
    return num / den;
}

// Minimal scalar reverse-mode autodiff, used as an independent
// differentiation route for loss formulas.
struct AdNode;
using AdPtr = std::shared_ptr<AdNode>;
struct AdNode {
    double val = 0;
    double grad = 0;
    std::vector<AdPtr> parents;
    std::function<void(AdNode&)> back;  // propagates this->grad into parents
};
inline AdPtr ad_leaf(double v) {
    auto n = std::make_shared<AdNode>();
    n->val = v;
    return n;
}
inline AdPtr ad_add(AdPtr a, AdPtr b) {
    auto n = std::make_shared<AdNode>();
    n->val = a->val + b->val;
    n->parents = {a, b};
    n->back = [](AdNode& s) {
        s.parents[0]->grad += s.grad;
        s.parents[1]->grad += s.grad;
    };
    return n;
}
inline AdPtr ad_mul(AdPtr a, AdPtr b) {
    auto n = std::make_shared<AdNode>();
    n->val = a->val * b->val;
    n->parents = {a, b};
    n->back = [](AdNode& s) {
        s.parents[0]->grad += s.grad * s.parents[1]->val;
        s.parents[1]->grad += s.grad * s.parents[0]->val;
    };
    return n;
}
inline AdPtr ad_scale(AdPtr a, double k) {
    auto n = std::make_shared<AdNode>();
    n->val = a->val * k;
    n->parents = {a};
    n->back = [k](AdNode& s) { s.parents[0]->grad += s.grad * k; };
    return n;
}
inline AdPtr ad_log(AdPtr a) {
    auto n = std::make_shared<AdNode>();
    n->val = std::log(a->val);
    n->parents = {a};
    n->back = [](AdNode& s) { s.parents[0]->grad += s.grad / s.parents[0]->val; };
    return n;
}
inline AdPtr ad_exp(AdPtr a) {
    auto n = std::make_shared<AdNode>();
    n->val = std::exp(a->val);
    n->parents = {a};
    n->back = [](AdNode& s) { s.parents[0]->grad += s.grad * s.val; };
    return n;
}
inline AdPtr ad_div(AdPtr a, AdPtr b) {
    auto n = std::make_shared<AdNode>();
    n->val = a->val / b->val;
    n->parents = {a, b};
    n->back = [](AdNode& s) {
        s.parents[0]->grad += s.grad / s.parents[1]->val;
        s.parents[1]->grad -= s.grad * s.parents[0]->val / (s.parents[1]->val * s.parents[1]->val);
    };
    return n;
}
inline void ad_backward(const AdPtr& root) {
    // topological order by depth-first post-order
    std::vector<AdNode*> order;
    std::vector<AdNode*> stack{root.get()};
    std::vector<AdNode*> visited;
    std::function<void(AdNode*)> dfs = [&](AdNode* n) {
        for (AdNode* v : visited)
            if (v == n) return;
        visited.push_back(n);
        for (auto& p : n->parents) dfs(p.get());
        order.push_back(n);
    };
    dfs(root.get());
    root->grad = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->back) (*it)->back(**it);
}

inline FdReport fd_check(const std::vector<double*>& slots,
                         const std::function<double()>& eval_scalar,
                         const std::vector<double>& analytic, double step = 1e-5) {
    FdReport rep;
    std::vector<double> fd(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        const double keep = *slots[i];
        *slots[i] = keep + step;
        const double up = eval_scalar();
        *slots[i] = keep - step;
        const double dn = eval_scalar();
        *slots[i] = keep;
        fd[i] = (up - dn) / (2.0 * step);
    }
    double den = 1e-10;
    for (size_t i = 0; i < slots.size(); ++i)
        den = std::max(den, std::max(std::abs(analytic[i]), std::abs(fd[i])));
    for (size_t i = 0; i < slots.size(); ++i) {
        const double e = std::abs(analytic[i] - fd[i]) / den;
        if (e > rep.max_rel_err) {
            rep.max_rel_err = e;
            rep.worst_analytic = analytic[i];
            rep.worst_fd = fd[i];
            rep.worst_index = i;
        }
    }
    return rep;
}

}  // namespace oracle
