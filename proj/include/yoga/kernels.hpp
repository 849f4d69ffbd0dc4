#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <utility>
#include <vector>

#include "yoga/tensor.hpp"

namespace yoga {

// Worker threads for the convolution fast path. Each (batch, out-channel)
// slice is written by exactly one thread in the same per-element accumulation
// order as the serial path, so results stay bit-identical.
inline int& worker_threads() {
    static int n = 1;
    return n;
}
inline void set_worker_threads(int n) { worker_threads() = n < 1 ? 1 : n; }

// Accumulates the FLOP convention used throughout:
//   conv/linear      2 per multiply-accumulate, +1 per bias add
//   batchnorm        2 per element (inference-form scale+shift)
//   activations      1 per element
//   elementwise      1 per output element
//   global avg pool  1 per input element (h*w-1 adds + 1 divide per channel)
//   max pool, concat, upsample  0 (comparisons / data movement)
// Instrumented kernels count executed operations; the analytic counters in
// graph.hpp compute the same quantities in closed form.
struct FlopCounter {
    uint64_t flops = 0;
    void add(uint64_t n) { flops += n; }
};

struct ConvSpec {
    int64_t in_ch = 0;
    int64_t out_ch = 0;
    int64_t kh = 1;
    int64_t kw = 1;
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t groups = 1;
    bool bias = false;

    void validate() const {
        if (in_ch <= 0 || out_ch <= 0) throw ValueError("ConvSpec: channel counts must be positive");
        if (kh <= 0 || kw <= 0) throw ValueError("ConvSpec: kernel must be positive");
        if (stride <= 0) throw ValueError("ConvSpec: stride must be positive");
        if (padding < 0) throw ValueError("ConvSpec: padding must be non-negative");
        if (groups <= 0) throw ValueError("ConvSpec: groups must be positive");
        if (in_ch % groups != 0)
            throw ShapeError("ConvSpec: axis 'in_ch' (" + std::to_string(in_ch) +
                             ") not divisible by groups " + std::to_string(groups));
        if (out_ch % groups != 0)
            throw ShapeError("ConvSpec: axis 'out_ch' (" + std::to_string(out_ch) +
                             ") not divisible by groups " + std::to_string(groups));
    }

    bool depthwise() const { return groups == in_ch && groups == out_ch; }

    Shape weight_shape() const { return Shape{out_ch, in_ch / groups, kh, kw}; }

    Shape out_shape(const Shape& in) const {
        check_axis(in.c, in_ch, "c", "conv2d");
        int64_t oh = (in.h + 2 * padding - kh) / stride + 1;
        int64_t ow = (in.w + 2 * padding - kw) / stride + 1;
        if (oh <= 0 || ow <= 0)
            throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input " + in.str());
        return Shape{in.n, out_ch, oh, ow};
    }

    uint64_t macs(const Shape& in) const {
        Shape o = out_shape(in);
        return static_cast<uint64_t>(o.numel()) * static_cast<uint64_t>(in_ch / groups) *
               static_cast<uint64_t>(kh * kw);
    }
    uint64_t flops(const Shape& in) const {
        Shape o = out_shape(in);
        return 2 * macs(in) + (bias ? static_cast<uint64_t>(o.numel()) : 0);
    }
};

// Direct convolution, fixed accumulation order (channel, then kernel rows/cols)
// so results are bit-reproducible. Weights are (out_ch, in_ch/groups, kh, kw).
// The instrumented path (fc != nullptr) walks every MAC including padded
// positions and counts them one by one; the fast path skips padded positions
// (adding 0 is exact) but keeps the per-element accumulation order, so both
// produce identical bits.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvSpec& spec, FlopCounter* fc = nullptr) {
    spec.validate();
    if (w.shape != spec.weight_shape())
        throw ShapeError("conv2d: axis 'weights' shape " + w.shape.str() + " does not match spec " +
                         spec.weight_shape().str());
    if (spec.bias) {
        if (!bias) throw ValueError("conv2d: spec.bias set but no bias tensor given");
        if (bias->numel() != spec.out_ch)
            throw ShapeError("conv2d: axis 'bias' length " + std::to_string(bias->numel()) +
                             " != out_ch " + std::to_string(spec.out_ch));
    }
    Shape os = spec.out_shape(x.shape);
    Tensor<T> y(os);
    const int64_t icg = spec.in_ch / spec.groups;
    const int64_t ocg = spec.out_ch / spec.groups;

    if (fc) {
        uint64_t macs = 0;
        for (int64_t n = 0; n < x.shape.n; ++n) {
            for (int64_t oc = 0; oc < spec.out_ch; ++oc) {
                const int64_t g = oc / ocg;
                for (int64_t oy = 0; oy < os.h; ++oy) {
                    for (int64_t ox = 0; ox < os.w; ++ox) {
                        T acc = 0;
                        for (int64_t ic = 0; ic < icg; ++ic) {
                            const int64_t xc = g * icg + ic;
                            for (int64_t ky = 0; ky < spec.kh; ++ky) {
                                const int64_t iy = oy * spec.stride + ky - spec.padding;
                                for (int64_t kx = 0; kx < spec.kw; ++kx) {
                                    const int64_t ix = ox * spec.stride + kx - spec.padding;
                                    T v = 0;
                                    if (iy >= 0 && iy < x.shape.h && ix >= 0 && ix < x.shape.w)
                                        v = x.at(n, xc, iy, ix);
                                    acc += v * w.at(oc, ic, ky, kx);
                                    ++macs;
                                }
                            }
                        }
                        if (spec.bias) acc += bias->data[static_cast<size_t>(oc)];
                        y.at(n, oc, oy, ox) = acc;
                    }
                }
            }
        }
        fc->add(2 * macs + (spec.bias ? static_cast<uint64_t>(os.numel()) : 0));
        return y;
    }

    // fast path: weight-stationary, hoisted bounds, contiguous inner loop
    const int64_t H = x.shape.h, W = x.shape.w;
    const int64_t s = spec.stride, p = spec.padding;
    const T* xd = x.data.data();
    const T* wd = w.data.data();
    T* yd = y.data.data();
    auto run_slice = [&](int64_t n, int64_t oc) {
        const int64_t g = oc / ocg;
        T* ybase = yd + (n * os.c + oc) * os.h * os.w;
        for (int64_t ic = 0; ic < icg; ++ic) {
            const int64_t xc = g * icg + ic;
            const T* xbase = xd + (n * x.shape.c + xc) * H * W;
            const T* wrow = wd + ((oc * icg + ic) * spec.kh) * spec.kw;
            for (int64_t ky = 0; ky < spec.kh; ++ky) {
                const int64_t oy_lo = (p - ky) > 0 ? (p - ky + s - 1) / s : 0;
                const int64_t oy_hi = std::min(os.h - 1, (H - 1 + p - ky) / s);
                for (int64_t kx = 0; kx < spec.kw; ++kx) {
                    const T wv = wrow[ky * spec.kw + kx];
                    const int64_t ox_lo = (p - kx) > 0 ? (p - kx + s - 1) / s : 0;
                    const int64_t ox_hi = std::min(os.w - 1, (W - 1 + p - kx) / s);
                    for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                        const T* xr = xbase + (oy * s + ky - p) * W + (kx - p);
                        T* yr = ybase + oy * os.w;
                        if (s == 1) {
                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) yr[ox] += wv * xr[ox];
                        } else {
                            for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) yr[ox] += wv * xr[ox * s];
                        }
                    }
                }
            }
        }
        if (spec.bias) {
            const T bv = bias->data[static_cast<size_t>(oc)];
            for (int64_t i = 0; i < os.h * os.w; ++i) ybase[i] += bv;
        }
    };
    const int64_t slices = x.shape.n * spec.out_ch;
    const int nt = static_cast<int>(std::min<int64_t>(worker_threads(), slices));
    if (nt <= 1) {
        for (int64_t n = 0; n < x.shape.n; ++n)
            for (int64_t oc = 0; oc < spec.out_ch; ++oc) run_slice(n, oc);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nt; ++t)
            pool.emplace_back([&, t]() {
                for (int64_t idx = t; idx < slices; idx += nt)
                    run_slice(idx / spec.out_ch, idx % spec.out_ch);
            });
        for (auto& th : pool) th.join();
    }
    return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                 FlopCounter* fc = nullptr) {
    return conv2d<T>(x, w, static_cast<const Tensor<T>*>(nullptr), spec, fc);
}

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;  // empty when spec.bias is off
};

template <typename T>
ConvGrads<T> conv2d_vjp(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                        const Tensor<T>& upstream) {
    spec.validate();
    Shape os = spec.out_shape(x.shape);
    if (upstream.shape != os)
        throw ShapeError("conv2d_vjp: axis 'upstream' shape " + upstream.shape.str() +
                         " != output shape " + os.str());
    ConvGrads<T> g{Tensor<T>(x.shape), Tensor<T>(w.shape), Tensor<T>()};
    if (spec.bias) g.bias = Tensor<T>(Shape{1, spec.out_ch, 1, 1});
    const int64_t icg = spec.in_ch / spec.groups;
    const int64_t ocg = spec.out_ch / spec.groups;
    for (int64_t n = 0; n < x.shape.n; ++n) {
        for (int64_t oc = 0; oc < spec.out_ch; ++oc) {
            const int64_t grp = oc / ocg;
            for (int64_t oy = 0; oy < os.h; ++oy) {
                for (int64_t ox = 0; ox < os.w; ++ox) {
                    const T up = upstream.at(n, oc, oy, ox);
                    if (spec.bias) g.bias.data[static_cast<size_t>(oc)] += up;
                    for (int64_t ic = 0; ic < icg; ++ic) {
                        const int64_t xc = grp * icg + ic;
                        for (int64_t ky = 0; ky < spec.kh; ++ky) {
                            const int64_t iy = oy * spec.stride + ky - spec.padding;
                            if (iy < 0 || iy >= x.shape.h) continue;
                            for (int64_t kx = 0; kx < spec.kw; ++kx) {
                                const int64_t ix = ox * spec.stride + kx - spec.padding;
                                if (ix < 0 || ix >= x.shape.w) continue;
                                g.input.at(n, xc, iy, ix) += up * w.at(oc, ic, ky, kx);
                                g.weights.at(oc, ic, ky, kx) += up * x.at(n, xc, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    return g;
}

// --- activations -------------------------------------------------------------

enum class Act { Silu, Sigmoid, None };

template <typename T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind, FlopCounter* fc = nullptr) {
    Tensor<T> y(x.shape);
    uint64_t ops = 0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T v = x.data[i];
        switch (kind) {
            case Act::Silu: y.data[i] = v * sigmoid_scalar(v); break;
            case Act::Sigmoid: y.data[i] = sigmoid_scalar(v); break;
            case Act::None: y.data[i] = v; break;
        }
        if (kind != Act::None) ++ops;
    }
    if (fc) fc->add(ops);
    return y;
}

template <typename T>
Tensor<T> activation_vjp(const Tensor<T>& x, Act kind, const Tensor<T>& upstream) {
    if (upstream.shape != x.shape)
        throw ShapeError("activation_vjp: axis 'upstream' shape " + upstream.shape.str() +
                         " != input " + x.shape.str());
    Tensor<T> g(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T v = x.data[i];
        T d = 1;
        if (kind == Act::Silu) {
            const T s = sigmoid_scalar(v);
            d = s * (T(1) + v * (T(1) - s));
        } else if (kind == Act::Sigmoid) {
            const T s = sigmoid_scalar(v);
            d = s * (T(1) - s);
        }
        g.data[i] = d * upstream.data[i];
    }
    return g;
}

// --- batch normalization ------------------------------------------------------

enum class BnMode { Train, Infer };

inline constexpr double kBnEps = 1e-3;
inline constexpr double kBnMomentum = 0.03;

template <typename T>
struct BnParams {
    Tensor<T> gamma;         // (1,c,1,1)
    Tensor<T> beta;          // (1,c,1,1)
    Tensor<T> running_mean;  // (1,c,1,1)
    Tensor<T> running_var;   // (1,c,1,1)

    explicit BnParams(int64_t c = 0) {
        if (c > 0) {
            Shape s{1, c, 1, 1};
            gamma = Tensor<T>::full(s, T(1));
            beta = Tensor<T>::zeros(s);
            running_mean = Tensor<T>::zeros(s);
            running_var = Tensor<T>::full(s, T(1));
        }
    }
    int64_t channels() const { return gamma.shape.c; }
};

// Train mode normalizes by batch statistics (biased variance) and updates the
// running estimates in place: run = (1-momentum)*run + momentum*batch.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BnParams<T>& p, BnMode mode, double eps = kBnEps,
                      double momentum = kBnMomentum, FlopCounter* fc = nullptr) {
    if (eps <= 0) throw ValueError("batchnorm2d: eps must be positive");
    check_axis(x.shape.c, p.channels(), "c", "batchnorm2d");
    Tensor<T> y(x.shape);
    const int64_t m = x.shape.n * x.shape.h * x.shape.w;
    uint64_t ops = 0;
    for (int64_t c = 0; c < x.shape.c; ++c) {
        T mean, var;
        if (mode == BnMode::Train) {
            double sum = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) sum += x.at(n, c, h, w);
            mean = static_cast<T>(sum / static_cast<double>(m));
            double sq = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) {
                        const double d = static_cast<double>(x.at(n, c, h, w)) - mean;
                        sq += d * d;
                    }
            var = static_cast<T>(sq / static_cast<double>(m));
            const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : sq;
            auto& rm = p.running_mean.data[static_cast<size_t>(c)];
            auto& rv = p.running_var.data[static_cast<size_t>(c)];
            rm = static_cast<T>((1.0 - momentum) * rm + momentum * mean);
            rv = static_cast<T>((1.0 - momentum) * rv + momentum * unbiased);
        } else {
            mean = p.running_mean.data[static_cast<size_t>(c)];
            var = p.running_var.data[static_cast<size_t>(c)];
        }
        const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        const T gamma = p.gamma.data[static_cast<size_t>(c)];
        const T beta = p.beta.data[static_cast<size_t>(c)];
        const T scale = gamma * inv;
        const T shift = beta - mean * scale;
        for (int64_t n = 0; n < x.shape.n; ++n)
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w) {
                    y.at(n, c, h, w) = x.at(n, c, h, w) * scale + shift;
                    ops += 2;
                }
    }
    if (fc) fc->add(ops);
    return y;
}

template <typename T>
struct BnGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
BnGrads<T> batchnorm2d_vjp(const Tensor<T>& x, const BnParams<T>& p, BnMode mode,
                           const Tensor<T>& upstream, double eps = kBnEps) {
    check_axis(x.shape.c, p.channels(), "c", "batchnorm2d_vjp");
    if (upstream.shape != x.shape)
        throw ShapeError("batchnorm2d_vjp: axis 'upstream' shape mismatch");
    BnGrads<T> g{Tensor<T>(x.shape), Tensor<T>(Shape{1, p.channels(), 1, 1}),
                 Tensor<T>(Shape{1, p.channels(), 1, 1})};
    const int64_t m = x.shape.n * x.shape.h * x.shape.w;
    for (int64_t c = 0; c < x.shape.c; ++c) {
        const T gamma = p.gamma.data[static_cast<size_t>(c)];
        if (mode == BnMode::Infer) {
            const T mean = p.running_mean.data[static_cast<size_t>(c)];
            const T inv = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(p.running_var.data[static_cast<size_t>(c)]) + eps));
            double dg = 0, db = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) {
                        const T up = upstream.at(n, c, h, w);
                        g.input.at(n, c, h, w) = up * gamma * inv;
                        dg += static_cast<double>(up) * (x.at(n, c, h, w) - mean) * inv;
                        db += up;
                    }
            g.gamma.data[static_cast<size_t>(c)] = static_cast<T>(dg);
            g.beta.data[static_cast<size_t>(c)] = static_cast<T>(db);
        } else {
            // batch statistics participate in the gradient
            double sum = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) sum += x.at(n, c, h, w);
            const double mean = sum / static_cast<double>(m);
            double sq = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) {
                        const double d = x.at(n, c, h, w) - mean;
                        sq += d * d;
                    }
            const double var = sq / static_cast<double>(m);
            const double inv = 1.0 / std::sqrt(var + eps);
            double sum_dxhat = 0, sum_dxhat_xhat = 0, dg = 0, db = 0;
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) {
                        const double xhat = (x.at(n, c, h, w) - mean) * inv;
                        const double up = upstream.at(n, c, h, w);
                        const double dxhat = up * gamma;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg += up * xhat;
                        db += up;
                    }
            for (int64_t n = 0; n < x.shape.n; ++n)
                for (int64_t h = 0; h < x.shape.h; ++h)
                    for (int64_t w = 0; w < x.shape.w; ++w) {
                        const double xhat = (x.at(n, c, h, w) - mean) * inv;
                        const double dxhat = static_cast<double>(upstream.at(n, c, h, w)) * gamma;
                        g.input.at(n, c, h, w) = static_cast<T>(
                            inv / static_cast<double>(m) *
                            (static_cast<double>(m) * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
                    }
            g.gamma.data[static_cast<size_t>(c)] = static_cast<T>(dg);
            g.beta.data[static_cast<size_t>(c)] = static_cast<T>(db);
        }
    }
    return g;
}

// --- pooling -----------------------------------------------------------------

inline Shape pool_out_shape(const Shape& in, int64_t k, int64_t s, int64_t p) {
    if (k < 1) throw ValueError("maxpool2d: kernel must be >= 1");
    if (s < 1) throw ValueError("maxpool2d: stride must be >= 1");
    if (p < 0 || p >= k) throw ValueError("maxpool2d: padding must satisfy 0 <= p < k");
    if (k > in.h + 2 * p || k > in.w + 2 * p)
        throw ShapeError("maxpool2d: window " + std::to_string(k) + " larger than padded input " +
                         in.str());
    return Shape{in.n, in.c, (in.h + 2 * p - k) / s + 1, (in.w + 2 * p - k) / s + 1};
}

// Window max over valid (non-padded) positions; padding only moves the window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int64_t k, int64_t s, int64_t p,
                    FlopCounter* fc = nullptr) {
    Shape os = pool_out_shape(x.shape, k, s, p);
    Tensor<T> y(os);
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t c = 0; c < os.c; ++c)
            for (int64_t oy = 0; oy < os.h; ++oy)
                for (int64_t ox = 0; ox < os.w; ++ox) {
                    bool seen = false;
                    T best = 0;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * s + ky - p;
                        if (iy < 0 || iy >= x.shape.h) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * s + kx - p;
                            if (ix < 0 || ix >= x.shape.w) continue;
                            const T v = x.at(n, c, iy, ix);
                            if (!seen || v > best) {
                                best = v;
                                seen = true;
                            }
                        }
                    }
                    y.at(n, c, oy, ox) = best;
                }
    (void)fc;  // comparisons only
    return y;
}

// Routes upstream to the first maximal element in scan order (deterministic
// tie-break matching the forward pass).
template <typename T>
Tensor<T> maxpool2d_vjp(const Tensor<T>& x, int64_t k, int64_t s, int64_t p,
                        const Tensor<T>& upstream) {
    Shape os = pool_out_shape(x.shape, k, s, p);
    if (upstream.shape != os) throw ShapeError("maxpool2d_vjp: axis 'upstream' shape mismatch");
    Tensor<T> g(x.shape);
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t c = 0; c < os.c; ++c)
            for (int64_t oy = 0; oy < os.h; ++oy)
                for (int64_t ox = 0; ox < os.w; ++ox) {
                    bool seen = false;
                    T best = 0;
                    int64_t by = -1, bx = -1;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * s + ky - p;
                        if (iy < 0 || iy >= x.shape.h) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * s + kx - p;
                            if (ix < 0 || ix >= x.shape.w) continue;
                            const T v = x.at(n, c, iy, ix);
                            if (!seen || v > best) {
                                best = v;
                                by = iy;
                                bx = ix;
                                seen = true;
                            }
                        }
                    }
                    if (seen) g.at(n, c, by, bx) += upstream.at(n, c, oy, ox);
                }
    return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, FlopCounter* fc = nullptr) {
    if (x.shape.h < 1 || x.shape.w < 1) throw ShapeError("global_avg_pool: empty spatial extent");
    Tensor<T> y(Shape{x.shape.n, x.shape.c, 1, 1});
    const int64_t hw = x.shape.h * x.shape.w;
    uint64_t ops = 0;
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < x.shape.c; ++c) {
            double sum = 0;
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w) sum += x.at(n, c, h, w);
            ops += static_cast<uint64_t>(hw - 1);  // adds
            y.at(n, c, 0, 0) = static_cast<T>(sum / static_cast<double>(hw));
            ops += 1;  // divide
        }
    if (fc) fc->add(ops);
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_vjp(const Shape& in_shape, const Tensor<T>& upstream) {
    if (upstream.shape.n != in_shape.n || upstream.shape.c != in_shape.c ||
        upstream.shape.h != 1 || upstream.shape.w != 1)
        throw ShapeError("global_avg_pool_vjp: axis 'upstream' shape mismatch");
    Tensor<T> g(in_shape);
    const T inv = static_cast<T>(1.0 / static_cast<double>(in_shape.h * in_shape.w));
    for (int64_t n = 0; n < in_shape.n; ++n)
        for (int64_t c = 0; c < in_shape.c; ++c) {
            const T u = upstream.at(n, c, 0, 0) * inv;
            for (int64_t h = 0; h < in_shape.h; ++h)
                for (int64_t w = 0; w < in_shape.w; ++w) g.at(n, c, h, w) = u;
        }
    return g;
}

// --- concat / elementwise / upsample -------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) throw ValueError("concat_channels: no parts");
    const Shape& s0 = parts[0]->shape;
    int64_t c_total = 0;
    for (const auto* p : parts) {
        check_axis(p->shape.n, s0.n, "n", "concat_channels");
        check_axis(p->shape.h, s0.h, "h", "concat_channels");
        check_axis(p->shape.w, s0.w, "w", "concat_channels");
        c_total += p->shape.c;
    }
    Tensor<T> y(Shape{s0.n, c_total, s0.h, s0.w});
    for (int64_t n = 0; n < s0.n; ++n) {
        int64_t co = 0;
        for (const auto* p : parts) {
            for (int64_t c = 0; c < p->shape.c; ++c, ++co)
                for (int64_t h = 0; h < s0.h; ++h)
                    for (int64_t w = 0; w < s0.w; ++w) y.at(n, co, h, w) = p->at(n, c, h, w);
        }
    }
    return y;
}

template <typename T>
std::vector<Tensor<T>> concat_channels_vjp(const std::vector<Shape>& parts,
                                           const Tensor<T>& upstream) {
    std::vector<Tensor<T>> grads;
    grads.reserve(parts.size());
    int64_t co = 0;
    for (const Shape& s : parts) {
        Tensor<T> g(s);
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t c = 0; c < s.c; ++c)
                for (int64_t h = 0; h < s.h; ++h)
                    for (int64_t w = 0; w < s.w; ++w) g.at(n, c, h, w) = upstream.at(n, co + c, h, w);
        co += s.c;
        grads.push_back(std::move(g));
    }
    return grads;
}

// Extracts channels [c0, c0+len) — the slicing inverse of concat_channels.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t len) {
    if (c0 < 0 || len < 0 || c0 + len > x.shape.c)
        throw ShapeError("slice_channels: axis 'c' range [" + std::to_string(c0) + "," +
                         std::to_string(c0 + len) + ") out of " + std::to_string(x.shape.c));
    Tensor<T> y(Shape{x.shape.n, len, x.shape.h, x.shape.w});
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < len; ++c)
            for (int64_t h = 0; h < x.shape.h; ++h)
                for (int64_t w = 0; w < x.shape.w; ++w) y.at(n, c, h, w) = x.at(n, c0 + c, h, w);
    return y;
}

enum class EwKind { Add, Mul };
enum class Broadcast { None, Channel };  // Channel: b is (n,c,1,1), repeated over h,w

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind,
                      Broadcast bc = Broadcast::None, FlopCounter* fc = nullptr) {
    if (bc == Broadcast::None) {
        if (a.shape != b.shape)
            throw ShapeError("elementwise: shapes " + a.shape.str() + " vs " + b.shape.str());
        Tensor<T> y(a.shape);
        for (size_t i = 0; i < a.data.size(); ++i)
            y.data[i] = kind == EwKind::Add ? a.data[i] + b.data[i] : a.data[i] * b.data[i];
        if (fc) fc->add(static_cast<uint64_t>(a.numel()));
        return y;
    }
    check_axis(b.shape.n, a.shape.n, "n", "elementwise");
    check_axis(b.shape.c, a.shape.c, "c", "elementwise");
    if (b.shape.h != 1 || b.shape.w != 1)
        throw ShapeError("elementwise: channel broadcast requires b spatial 1x1, got " +
                         b.shape.str());
    Tensor<T> y(a.shape);
    for (int64_t n = 0; n < a.shape.n; ++n)
        for (int64_t c = 0; c < a.shape.c; ++c) {
            const T bv = b.at(n, c, 0, 0);
            for (int64_t h = 0; h < a.shape.h; ++h)
                for (int64_t w = 0; w < a.shape.w; ++w)
                    y.at(n, c, h, w) =
                        kind == EwKind::Add ? a.at(n, c, h, w) + bv : a.at(n, c, h, w) * bv;
        }
    if (fc) fc->add(static_cast<uint64_t>(a.numel()));
    return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> elementwise_vjp(const Tensor<T>& a, const Tensor<T>& b, EwKind kind,
                                                Broadcast bc, const Tensor<T>& upstream) {
    if (upstream.shape != a.shape) throw ShapeError("elementwise_vjp: axis 'upstream' mismatch");
    Tensor<T> ga(a.shape), gb(b.shape);
    if (bc == Broadcast::None) {
        for (size_t i = 0; i < a.data.size(); ++i) {
            if (kind == EwKind::Add) {
                ga.data[i] = upstream.data[i];
                gb.data[i] = upstream.data[i];
            } else {
                ga.data[i] = upstream.data[i] * b.data[i];
                gb.data[i] = upstream.data[i] * a.data[i];
            }
        }
    } else {
        for (int64_t n = 0; n < a.shape.n; ++n)
            for (int64_t c = 0; c < a.shape.c; ++c) {
                const T bv = b.at(n, c, 0, 0);
                double acc = 0;
                for (int64_t h = 0; h < a.shape.h; ++h)
                    for (int64_t w = 0; w < a.shape.w; ++w) {
                        const T up = upstream.at(n, c, h, w);
                        if (kind == EwKind::Add) {
                            ga.at(n, c, h, w) = up;
                            acc += up;
                        } else {
                            ga.at(n, c, h, w) = up * bv;
                            acc += static_cast<double>(up) * a.at(n, c, h, w);
                        }
                    }
                gb.at(n, c, 0, 0) = static_cast<T>(acc);
            }
    }
    return {std::move(ga), std::move(gb)};
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x, FlopCounter* fc = nullptr) {
    Tensor<T> y(Shape{x.shape.n, x.shape.c, 2 * x.shape.h, 2 * x.shape.w});
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < x.shape.c; ++c)
            for (int64_t h = 0; h < y.shape.h; ++h)
                for (int64_t w = 0; w < y.shape.w; ++w) y.at(n, c, h, w) = x.at(n, c, h / 2, w / 2);
    (void)fc;  // data movement
    return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_vjp(const Shape& in_shape, const Tensor<T>& upstream) {
    if (upstream.shape.h != 2 * in_shape.h || upstream.shape.w != 2 * in_shape.w ||
        upstream.shape.n != in_shape.n || upstream.shape.c != in_shape.c)
        throw ShapeError("upsample_nearest2x_vjp: axis 'upstream' shape mismatch");
    Tensor<T> g(in_shape);
    for (int64_t n = 0; n < in_shape.n; ++n)
        for (int64_t c = 0; c < in_shape.c; ++c)
            for (int64_t h = 0; h < upstream.shape.h; ++h)
                for (int64_t w = 0; w < upstream.shape.w; ++w)
                    g.at(n, c, h / 2, w / 2) += upstream.at(n, c, h, w);
    return g;
}

}  // namespace yoga
