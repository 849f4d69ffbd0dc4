#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "yoga/kernels.hpp"
#include "yoga/rng.hpp"
#include "yoga/tensor.hpp"

namespace yoga {

enum class Mode { Infer, Train };

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

// A block is a parameter-holding unit with a cached forward pass. Calling
// backward() before forward() is a usage error. Parameter gradients accumulate
// into each tensor's grad slot until zero_grad().
template <typename T>
class Block {
public:
    virtual ~Block() = default;

    virtual std::string kind() const = 0;
    virtual size_t num_inputs() const { return 1; }
    virtual size_t num_outputs() const { return 1; }

    virtual std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                           FlopCounter* fc = nullptr) = 0;
    virtual std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) = 0;

    virtual void visit_params(const ParamVisitor<T>& fn) { (void)fn; }
    virtual void visit_state(const ParamVisitor<T>& fn) { (void)fn; }

    virtual std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const = 0;
    virtual uint64_t count_flops(const std::vector<Shape>& in) const = 0;

    // single input/output conveniences
    Tensor<T> forward1(const Tensor<T>& x, Mode mode = Mode::Infer, FlopCounter* fc = nullptr) {
        auto out = forward({&x}, mode, fc);
        return std::move(out.at(0));
    }
    Tensor<T> backward1(const Tensor<T>& up) {
        auto g = backward({&up});
        return std::move(g.at(0));
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }
    void zero_grad() {
        visit_params([](const std::string&, Tensor<T>& t) {
            t.ensure_grad();
            t.zero_grad();
        });
    }

protected:
    void require_forward(bool have) const {
        if (!have) throw UsageError(kind() + ": backward called before forward");
    }
};

namespace detail {

template <typename T>
Tensor<T> init_conv_weight(const ConvSpec& spec, Rng& rng) {
    Tensor<T> w(spec.weight_shape());
    const double fan_in = static_cast<double>((spec.in_ch / spec.groups) * spec.kh * spec.kw);
    const double bound = 1.0 / std::sqrt(fan_in);
    rng.fill_uniform(w, -bound, bound);
    return w;
}

template <typename T>
void accumulate_grad(Tensor<T>& param, const Tensor<T>& g) {
    param.ensure_grad();
    for (size_t i = 0; i < param.grad.size(); ++i) param.grad[i] += g.data[i];
}

}  // namespace detail

// Conv2d [+ BatchNorm] [+ activation]. The standard "Conv Block" is
// conv + BN + SiLU with bias folded off; with_bn=false, bias=true, Act::None
// gives a raw linear convolution (used by attention projections and the head).
template <typename T>
class ConvBlock : public Block<T> {
public:
    ConvBlock(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride, Rng& rng,
              Act act = Act::Silu, bool with_bn = true, bool bias = false, int64_t groups = 1,
              int64_t padding = -1)
        : act_(act), with_bn_(with_bn) {
        spec_.in_ch = in_ch;
        spec_.out_ch = out_ch;
        spec_.kh = spec_.kw = k;
        spec_.stride = stride;
        spec_.padding = padding >= 0 ? padding : k / 2;
        spec_.groups = groups;
        spec_.bias = bias;
        spec_.validate();
        weight_ = detail::init_conv_weight<T>(spec_, rng);
        if (bias) {
            bias_ = Tensor<T>(Shape{1, out_ch, 1, 1});
            const double bound = 1.0 / std::sqrt(static_cast<double>((in_ch / groups) * k * k));
            rng.fill_uniform(bias_, -bound, bound);
        }
        if (with_bn_) bn_ = BnParams<T>(out_ch);
    }

    std::string kind() const override { return "ConvBlock"; }
    const ConvSpec& spec() const { return spec_; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        cache_.emplace();
        cache_->input = x;
        cache_->mode = mode;
        Tensor<T> z = conv2d(x, weight_, spec_.bias ? &bias_ : nullptr, spec_, fc);
        if (with_bn_) {
            cache_->conv_out = z;
            z = batchnorm2d(z, bn_, mode == Mode::Train ? BnMode::Train : BnMode::Infer, kBnEps,
                            kBnMomentum, fc);
        }
        if (act_ != Act::None) {
            cache_->pre_act = z;
            z = activation(z, act_, fc);
        }
        return {std::move(z)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(cache_.has_value());
        Tensor<T> g = *upstream.at(0);
        if (act_ != Act::None) g = activation_vjp(cache_->pre_act, act_, g);
        if (with_bn_) {
            auto bg = batchnorm2d_vjp(cache_->conv_out, bn_,
                                      cache_->mode == Mode::Train ? BnMode::Train : BnMode::Infer, g);
            detail::accumulate_grad(bn_.gamma, bg.gamma);
            detail::accumulate_grad(bn_.beta, bg.beta);
            g = std::move(bg.input);
        }
        auto cg = conv2d_vjp(cache_->input, weight_, spec_, g);
        detail::accumulate_grad(weight_, cg.weights);
        if (spec_.bias) detail::accumulate_grad(bias_, cg.bias);
        return {std::move(cg.input)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        fn("weight", weight_);
        if (spec_.bias) fn("bias", bias_);
        if (with_bn_) {
            fn("bn.gamma", bn_.gamma);
            fn("bn.beta", bn_.beta);
        }
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        if (with_bn_) {
            fn("bn.running_mean", bn_.running_mean);
            fn("bn.running_var", bn_.running_var);
        }
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        return {spec_.out_shape(in.at(0))};
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape o = spec_.out_shape(in.at(0));
        uint64_t f = spec_.flops(in.at(0));
        if (with_bn_) f += 2 * static_cast<uint64_t>(o.numel());
        if (act_ != Act::None) f += static_cast<uint64_t>(o.numel());
        return f;
    }

    BnParams<T>& bn() { return bn_; }
    Tensor<T>& weight() { return weight_; }

private:
    struct Cache {
        Tensor<T> input, conv_out, pre_act;
        Mode mode = Mode::Infer;
    };
    ConvSpec spec_;
    Act act_;
    bool with_bn_;
    Tensor<T> weight_, bias_;
    BnParams<T> bn_;
    std::optional<Cache> cache_;
};

// Two-phase ghost convolution: half the output channels from a standard
// convolution (Xa), the other half from a cheap per-channel convolution of Xa
// (Xb), concatenated. BN + SiLU run on the concatenated map unless the block
// is constructed in raw-linear mode.
template <typename T>
class GhostConv : public Block<T> {
public:
    GhostConv(int64_t c1, int64_t c2, int64_t k, int64_t stride, Rng& rng, int64_t cheap_kernel = 5,
              bool linear = false)
        : c1_(c1), c2_(c2), linear_(linear) {
        if (c2 % 2 != 0)
            throw ValueError("GhostConv: output channels must be even, got " + std::to_string(c2));
        primary_.in_ch = c1;
        primary_.out_ch = c2 / 2;
        primary_.kh = primary_.kw = k;
        primary_.stride = stride;
        primary_.padding = k / 2;
        primary_.validate();
        cheap_.in_ch = cheap_.out_ch = cheap_.groups = c2 / 2;
        cheap_.kh = cheap_.kw = cheap_kernel;
        cheap_.stride = 1;
        cheap_.padding = cheap_kernel / 2;
        cheap_.validate();
        wp_ = detail::init_conv_weight<T>(primary_, rng);
        wc_ = detail::init_conv_weight<T>(cheap_, rng);
        if (!linear_) bn_ = BnParams<T>(c2);
    }

    std::string kind() const override { return "GhostConv"; }

    // Raw filter counts, the quantities behind the ghost-vs-standard savings.
    int64_t filter_param_count() const { return wp_.numel() + wc_.numel(); }
    int64_t standard_equiv_param_count() const {
        return c2_ * c1_ * primary_.kh * primary_.kw;
    }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        cache_.emplace();
        cache_->input = x;
        cache_->mode = mode;
        Tensor<T> xa = conv2d(x, wp_, primary_, fc);
        Tensor<T> xb = conv2d(xa, wc_, cheap_, fc);
        cache_->xa = xa;
        Tensor<T> y = concat_channels<T>({&xa, &xb});
        if (!linear_) {
            cache_->concat_out = y;
            y = batchnorm2d(y, bn_, mode == Mode::Train ? BnMode::Train : BnMode::Infer, kBnEps,
                            kBnMomentum, fc);
            cache_->pre_act = y;
            y = activation(y, Act::Silu, fc);
        }
        return {std::move(y)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(cache_.has_value());
        Tensor<T> g = *upstream.at(0);
        if (!linear_) {
            g = activation_vjp(cache_->pre_act, Act::Silu, g);
            auto bg = batchnorm2d_vjp(cache_->concat_out, bn_,
                                      cache_->mode == Mode::Train ? BnMode::Train : BnMode::Infer, g);
            detail::accumulate_grad(bn_.gamma, bg.gamma);
            detail::accumulate_grad(bn_.beta, bg.beta);
            g = std::move(bg.input);
        }
        auto halves = concat_channels_vjp<T>({cache_->xa.shape, cache_->xa.shape}, g);
        auto cheap_g = conv2d_vjp(cache_->xa, wc_, cheap_, halves[1]);
        detail::accumulate_grad(wc_, cheap_g.weights);
        Tensor<T> dxa = std::move(halves[0]);
        for (size_t i = 0; i < dxa.data.size(); ++i) dxa.data[i] += cheap_g.input.data[i];
        auto prim_g = conv2d_vjp(cache_->input, wp_, primary_, dxa);
        detail::accumulate_grad(wp_, prim_g.weights);
        return {std::move(prim_g.input)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        fn("primary.weight", wp_);
        fn("cheap.weight", wc_);
        if (!linear_) {
            fn("bn.gamma", bn_.gamma);
            fn("bn.beta", bn_.beta);
        }
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        if (!linear_) {
            fn("bn.running_mean", bn_.running_mean);
            fn("bn.running_var", bn_.running_var);
        }
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        Shape a = primary_.out_shape(in.at(0));
        return {Shape{a.n, c2_, a.h, a.w}};
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape a = primary_.out_shape(in.at(0));
        Shape full{a.n, c2_, a.h, a.w};
        uint64_t f = primary_.flops(in.at(0)) + cheap_.flops(a);
        if (!linear_) f += 3 * static_cast<uint64_t>(full.numel());  // BN (2) + SiLU (1)
        return f;
    }

private:
    struct Cache {
        Tensor<T> input, xa, concat_out, pre_act;
        Mode mode = Mode::Infer;
    };
    int64_t c1_, c2_;
    bool linear_;
    ConvSpec primary_, cheap_;
    Tensor<T> wp_, wc_;
    BnParams<T> bn_;
    std::optional<Cache> cache_;
};

// Residual unit of two GhostConvs (expand then project). At stride 2 a
// depth-wise conv sits between them and the shortcut runs through its own
// depth-wise conv + Conv block; at stride 1 the shortcut is the identity.
template <typename T>
class GhostBottleneck : public Block<T> {
public:
    GhostBottleneck(int64_t c, int64_t stride, Rng& rng, int64_t expansion = 2)
        : c_(c), stride_(stride) {
        if (stride != 1 && stride != 2)
            throw ValueError("GhostBottleneck: stride must be 1 or 2, got " + std::to_string(stride));
        const int64_t mid = expansion * c;
        ghost1_ = std::make_unique<GhostConv<T>>(c, mid, 1, 1, rng);
        ghost2_ = std::make_unique<GhostConv<T>>(mid, c, 1, 1, rng);
        if (stride == 2) {
            dw_ = std::make_unique<ConvBlock<T>>(mid, mid, 3, 2, rng, Act::None, true, false, mid);
            sc_dw_ = std::make_unique<ConvBlock<T>>(c, c, 3, 2, rng, Act::None, true, false, c);
            sc_pw_ = std::make_unique<ConvBlock<T>>(c, c, 1, 1, rng);
        }
    }

    std::string kind() const override { return "GhostBottleneck"; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        Tensor<T> m = ghost1_->forward1(x, mode, fc);
        if (stride_ == 2) m = dw_->forward1(m, mode, fc);
        m = ghost2_->forward1(m, mode, fc);
        Tensor<T> sc = stride_ == 1 ? x : sc_pw_->forward1(sc_dw_->forward1(x, mode, fc), mode, fc);
        fwd_done_ = true;
        return {elementwise(m, sc, EwKind::Add, Broadcast::None, fc)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(fwd_done_);
        const Tensor<T>& up = *upstream.at(0);
        Tensor<T> g = ghost2_->backward1(up);
        if (stride_ == 2) g = dw_->backward1(g);
        Tensor<T> dx = ghost1_->backward1(g);
        if (stride_ == 1) {
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += up.data[i];
        } else {
            Tensor<T> dsc = sc_dw_->backward1(sc_pw_->backward1(up));
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dsc.data[i];
        }
        return {std::move(dx)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_params([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_state([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        Shape s = in.at(0);
        if (stride_ == 2) {
            s.h = (s.h + 2 - 3) / 2 + 1;
            s.w = (s.w + 2 - 3) / 2 + 1;
        }
        return {s};
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape x = in.at(0);
        uint64_t f = ghost1_->count_flops({x});
        Shape m = ghost1_->infer_shapes({x})[0];
        if (stride_ == 2) {
            f += dw_->count_flops({m});
            m = dw_->infer_shapes({m})[0];
        }
        f += ghost2_->count_flops({m});
        Shape out = ghost2_->infer_shapes({m})[0];
        if (stride_ == 2) {
            f += sc_dw_->count_flops({x});
            Shape sd = sc_dw_->infer_shapes({x})[0];
            f += sc_pw_->count_flops({sd});
        }
        f += static_cast<uint64_t>(out.numel());  // residual add
        return f;
    }

private:
    template <typename Fn>
    void visit_children(const Fn& fn) {
        fn("ghost1.", *ghost1_);
        if (stride_ == 2) fn("dw.", *dw_);
        fn("ghost2.", *ghost2_);
        if (stride_ == 2) {
            fn("sc_dw.", *sc_dw_);
            fn("sc_pw.", *sc_pw_);
        }
    }
    int64_t c_, stride_;
    std::unique_ptr<GhostConv<T>> ghost1_, ghost2_;
    std::unique_ptr<ConvBlock<T>> dw_, sc_dw_, sc_pw_;
    bool fwd_done_ = false;
};

// Cross-stage-partial wrapper: two 1x1 Conv blocks split the input into
// halves, one half runs through n ghost bottlenecks, the other bypasses, and
// a final 1x1 Conv block merges the concatenation.
template <typename T>
class CSPGhost : public Block<T> {
public:
    CSPGhost(int64_t c1, int64_t c2, int64_t n_bottlenecks, Rng& rng) : hidden_(c2 / 2) {
        if (c2 % 2 != 0) throw ValueError("CSPGhost: output channels must be even");
        cv1_ = std::make_unique<ConvBlock<T>>(c1, hidden_, 1, 1, rng);
        cv2_ = std::make_unique<ConvBlock<T>>(c1, hidden_, 1, 1, rng);
        cv3_ = std::make_unique<ConvBlock<T>>(2 * hidden_, c2, 1, 1, rng);
        for (int64_t i = 0; i < n_bottlenecks; ++i)
            body_.push_back(std::make_unique<GhostBottleneck<T>>(hidden_, 1, rng));
    }

    std::string kind() const override { return "CSPGhost"; }
    size_t n_bottlenecks() const { return body_.size(); }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        Tensor<T> a = cv1_->forward1(x, mode, fc);
        for (auto& b : body_) a = b->forward1(a, mode, fc);
        Tensor<T> bypass = cv2_->forward1(x, mode, fc);
        Tensor<T> merged = concat_channels<T>({&a, &bypass});
        fwd_done_ = true;
        return {cv3_->forward1(merged, mode, fc)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(fwd_done_);
        Tensor<T> g = cv3_->backward1(*upstream.at(0));
        Shape half{g.shape.n, hidden_, g.shape.h, g.shape.w};
        auto parts = concat_channels_vjp<T>({half, half}, g);
        Tensor<T> da = std::move(parts[0]);
        for (auto it = body_.rbegin(); it != body_.rend(); ++it) da = (*it)->backward1(da);
        Tensor<T> dx = cv1_->backward1(da);
        Tensor<T> dx2 = cv2_->backward1(parts[1]);
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx2.data[i];
        return {std::move(dx)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_params([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_state([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        return cv3_->infer_shapes({Shape{in.at(0).n, 2 * hidden_, in.at(0).h, in.at(0).w}});
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape x = in.at(0);
        uint64_t f = cv1_->count_flops({x}) + cv2_->count_flops({x});
        Shape a = cv1_->infer_shapes({x})[0];
        for (const auto& b : body_) f += b->count_flops({a});
        f += cv3_->count_flops({Shape{a.n, 2 * hidden_, a.h, a.w}});
        return f;
    }

private:
    template <typename Fn>
    void visit_children(const Fn& fn) {
        fn("cv1.", *cv1_);
        fn("cv2.", *cv2_);
        for (size_t i = 0; i < body_.size(); ++i) fn("m." + std::to_string(i) + ".", *body_[i]);
        fn("cv3.", *cv3_);
    }
    int64_t hidden_;
    std::unique_ptr<ConvBlock<T>> cv1_, cv2_, cv3_;
    std::vector<std::unique_ptr<GhostBottleneck<T>>> body_;
    bool fwd_done_ = false;
};

// Spatial pyramid pooling: parallel same-shape max pools concatenated with
// the input, merged by a 1x1 Conv block. Enlarges the receptive field while
// preserving the spatial shape.
template <typename T>
class SPP : public Block<T> {
public:
    SPP(int64_t c1, int64_t c2, Rng& rng, std::vector<int64_t> kernels = {5, 9, 13})
        : kernels_(std::move(kernels)) {
        cv_ = std::make_unique<ConvBlock<T>>(c1 * (1 + static_cast<int64_t>(kernels_.size())), c2, 1,
                                             1, rng);
    }

    std::string kind() const override { return "SPP"; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        cache_.emplace();
        cache_->input = x;
        std::vector<Tensor<T>> pooled;
        pooled.reserve(kernels_.size());
        for (int64_t k : kernels_) pooled.push_back(maxpool2d(x, k, 1, k / 2, fc));
        std::vector<const Tensor<T>*> parts{&x};
        for (auto& p : pooled) parts.push_back(&p);
        Tensor<T> merged = concat_channels<T>(parts);
        return {cv_->forward1(merged, mode, fc)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(cache_.has_value());
        Tensor<T> g = cv_->backward1(*upstream.at(0));
        std::vector<Shape> shapes(1 + kernels_.size(), cache_->input.shape);
        auto parts = concat_channels_vjp<T>(shapes, g);
        Tensor<T> dx = std::move(parts[0]);
        for (size_t i = 0; i < kernels_.size(); ++i) {
            Tensor<T> dp =
                maxpool2d_vjp(cache_->input, kernels_[i], 1, kernels_[i] / 2, parts[i + 1]);
            for (size_t j = 0; j < dx.data.size(); ++j) dx.data[j] += dp.data[j];
        }
        return {std::move(dx)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        cv_->visit_params([&](const std::string& n, Tensor<T>& t) { fn("cv." + n, t); });
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        cv_->visit_state([&](const std::string& n, Tensor<T>& t) { fn("cv." + n, t); });
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        Shape s = in.at(0);
        return cv_->infer_shapes({Shape{s.n, s.c * (1 + static_cast<int64_t>(kernels_.size())), s.h,
                                        s.w}});
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape s = in.at(0);
        return cv_->count_flops({Shape{s.n, s.c * (1 + static_cast<int64_t>(kernels_.size())), s.h,
                                       s.w}});
    }

private:
    struct Cache {
        Tensor<T> input;
    };
    std::vector<int64_t> kernels_;
    std::unique_ptr<ConvBlock<T>> cv_;
    std::optional<Cache> cache_;
};

// Multi-scale channel attention: a global context pathway over the pooled map
// and a local per-position pathway share the same bottleneck structure
// (1x1 conv + BN + SiLU, then a linear 1x1 conv); their broadcast sum passes
// through a sigmoid to give attention weights strictly inside (0,1).
template <typename T>
class MSCAM : public Block<T> {
public:
    MSCAM(int64_t channels, Rng& rng, int64_t reduction = 4)
        : channels_(channels), reduction_(reduction) {
        if (channels % reduction != 0)
            throw ValueError("MSCAM: channels " + std::to_string(channels) +
                             " not divisible by reduction " + std::to_string(reduction));
        const int64_t mid = channels / reduction;
        local1_ = std::make_unique<ConvBlock<T>>(channels, mid, 1, 1, rng);
        local2_ = std::make_unique<ConvBlock<T>>(mid, channels, 1, 1, rng, Act::None, false, true);
        global1_ = std::make_unique<ConvBlock<T>>(channels, mid, 1, 1, rng);
        global2_ = std::make_unique<ConvBlock<T>>(mid, channels, 1, 1, rng, Act::None, false, true);
    }

    std::string kind() const override { return "MSCAM"; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& z = *xs.at(0);
        cache_.emplace();
        cache_->in_shape = z.shape;
        Tensor<T> local = local2_->forward1(local1_->forward1(z, mode, fc), mode, fc);
        Tensor<T> pooled = global_avg_pool(z, fc);
        Tensor<T> glob = global2_->forward1(global1_->forward1(pooled, mode, fc), mode, fc);
        Tensor<T> pre = elementwise(local, glob, EwKind::Add, Broadcast::Channel, fc);
        cache_->pre = pre;
        return {activation(pre, Act::Sigmoid, fc)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(cache_.has_value());
        Tensor<T> dpre = activation_vjp(cache_->pre, Act::Sigmoid, *upstream.at(0));
        // local branch gets dpre directly; global branch gets the h,w-reduction
        Tensor<T> dglob(Shape{dpre.shape.n, dpre.shape.c, 1, 1});
        for (int64_t n = 0; n < dpre.shape.n; ++n)
            for (int64_t c = 0; c < dpre.shape.c; ++c) {
                double acc = 0;
                for (int64_t h = 0; h < dpre.shape.h; ++h)
                    for (int64_t w = 0; w < dpre.shape.w; ++w) acc += dpre.at(n, c, h, w);
                dglob.at(n, c, 0, 0) = static_cast<T>(acc);
            }
        Tensor<T> dz = local1_->backward1(local2_->backward1(dpre));
        Tensor<T> dpool = global1_->backward1(global2_->backward1(dglob));
        Tensor<T> dz2 = global_avg_pool_vjp(cache_->in_shape, dpool);
        for (size_t i = 0; i < dz.data.size(); ++i) dz.data[i] += dz2.data[i];
        return {std::move(dz)};
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_params([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        visit_children([&](const std::string& p, Block<T>& b) {
            b.visit_state([&](const std::string& n, Tensor<T>& t) { fn(p + n, t); });
        });
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        return {in.at(0)};
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        Shape z = in.at(0);
        Shape pooled{z.n, z.c, 1, 1};
        Shape mid = local1_->infer_shapes({z})[0];
        Shape midp = global1_->infer_shapes({pooled})[0];
        uint64_t f = local1_->count_flops({z}) + local2_->count_flops({mid});
        f += static_cast<uint64_t>(z.numel());  // global average pool
        f += global1_->count_flops({pooled}) + global2_->count_flops({midp});
        f += 2 * static_cast<uint64_t>(z.numel());  // broadcast add + sigmoid
        return f;
    }

private:
    template <typename Fn>
    void visit_children(const Fn& fn) {
        fn("local1.", *local1_);
        fn("local2.", *local2_);
        fn("global1.", *global1_);
        fn("global2.", *global2_);
    }
    struct Cache_ {
        Shape in_shape;
        Tensor<T> pre;
    };
    int64_t channels_, reduction_;
    std::unique_ptr<ConvBlock<T>> local1_, local2_, global1_, global2_;
    std::optional<Cache_> cache_;
};

// Attentional feature fusion: M = MSCAM(x + y), out = M*x + (1-M)*y.
// The blend is evaluated per element in double precision and rounded once,
// which keeps every output inside [min(x,y), max(x,y)] and makes
// aff(x, x) == x bit-exact.
template <typename T>
class AFF : public Block<T> {
public:
    AFF(int64_t channels, Rng& rng, int64_t reduction = 4)
        : mscam_(std::make_unique<MSCAM<T>>(channels, rng, reduction)) {}

    std::string kind() const override { return "AFF"; }
    size_t num_inputs() const override { return 2; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        const Tensor<T>& x = *xs.at(0);
        const Tensor<T>& y = *xs.at(1);
        if (x.shape != y.shape)
            throw ShapeError("AFF: input shapes " + x.shape.str() + " vs " + y.shape.str());
        cache_.emplace();
        cache_->x = x;
        cache_->y = y;
        Tensor<T> s = elementwise(x, y, EwKind::Add, Broadcast::None, fc);
        Tensor<T> m = mscam_->forward1(s, mode, fc);
        cache_->m = m;
        Tensor<T> out(x.shape);
        for (size_t i = 0; i < out.data.size(); ++i) {
            const double xv = static_cast<double>(x.data[i]);
            const double yv = static_cast<double>(y.data[i]);
            const double mv = static_cast<double>(m.data[i]);
            out.data[i] = static_cast<T>(yv + mv * (xv - yv));
        }
        if (fc) fc->add(3 * static_cast<uint64_t>(out.numel()));
        return {std::move(out)};
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(cache_.has_value());
        const Tensor<T>& up = *upstream.at(0);
        Tensor<T> dm(up.shape), dx(up.shape), dy(up.shape);
        for (size_t i = 0; i < up.data.size(); ++i) {
            const T m = cache_->m.data[i];
            dx.data[i] = up.data[i] * m;
            dy.data[i] = up.data[i] * (T(1) - m);
            dm.data[i] = up.data[i] * (cache_->x.data[i] - cache_->y.data[i]);
        }
        Tensor<T> ds = mscam_->backward1(dm);
        for (size_t i = 0; i < ds.data.size(); ++i) {
            dx.data[i] += ds.data[i];
            dy.data[i] += ds.data[i];
        }
        std::vector<Tensor<T>> g;
        g.push_back(std::move(dx));
        g.push_back(std::move(dy));
        return g;
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        mscam_->visit_params([&](const std::string& n, Tensor<T>& t) { fn("mscam." + n, t); });
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        mscam_->visit_state([&](const std::string& n, Tensor<T>& t) { fn("mscam." + n, t); });
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        if (in.at(0) != in.at(1))
            throw ShapeError("AFF: input shapes " + in.at(0).str() + " vs " + in.at(1).str());
        return {in.at(0)};
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        const uint64_t numel = static_cast<uint64_t>(in.at(0).numel());
        return numel + mscam_->count_flops({in.at(0)}) + 3 * numel;
    }

    MSCAM<T>& mscam() { return *mscam_; }

private:
    struct Cache {
        Tensor<T> x, y, m;
    };
    std::unique_ptr<MSCAM<T>> mscam_;
    std::optional<Cache> cache_;
};

template <typename T>
class Upsample : public Block<T> {
public:
    std::string kind() const override { return "Upsample"; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode,
                                   FlopCounter* fc = nullptr) override {
        in_shape_ = xs.at(0)->shape;
        fwd_done_ = true;
        return {upsample_nearest2x(*xs.at(0), fc)};
    }
    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(fwd_done_);
        return {upsample_nearest2x_vjp(in_shape_, *upstream.at(0))};
    }
    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        Shape s = in.at(0);
        return {Shape{s.n, s.c, 2 * s.h, 2 * s.w}};
    }
    uint64_t count_flops(const std::vector<Shape>&) const override { return 0; }

private:
    Shape in_shape_;
    bool fwd_done_ = false;
};

template <typename T>
class ConcatBlock : public Block<T> {
public:
    explicit ConcatBlock(size_t n_inputs = 2) : n_inputs_(n_inputs) {}
    std::string kind() const override { return "Concat"; }
    size_t num_inputs() const override { return n_inputs_; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode,
                                   FlopCounter* = nullptr) override {
        shapes_.clear();
        for (const auto* x : xs) shapes_.push_back(x->shape);
        return {concat_channels(xs)};
    }
    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(!shapes_.empty());
        return concat_channels_vjp<T>(shapes_, *upstream.at(0));
    }
    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        Shape s = in.at(0);
        int64_t c = 0;
        for (const Shape& i : in) c += i.c;
        return {Shape{s.n, c, s.h, s.w}};
    }
    uint64_t count_flops(const std::vector<Shape>&) const override { return 0; }

private:
    size_t n_inputs_;
    std::vector<Shape> shapes_;
};

// YOLO head: per scale a 3x3 Conv block followed by a 1x1 convolution with
// num_anchors*(num_classes+5) filters. Channel layout within each anchor
// block: tx, ty, tw, th, objectness, class logits.
template <typename T>
class DetectHead : public Block<T> {
public:
    DetectHead(const std::vector<int64_t>& in_channels, int64_t num_classes, int64_t num_anchors,
               Rng& rng)
        : num_classes_(num_classes), num_anchors_(num_anchors) {
        if (num_classes < 1) throw ValueError("DetectHead: need at least one class");
        const int64_t out = num_anchors * (num_classes + 5);
        for (int64_t c : in_channels) {
            stems_.push_back(std::make_unique<ConvBlock<T>>(c, c, 3, 1, rng));
            preds_.push_back(
                std::make_unique<ConvBlock<T>>(c, out, 1, 1, rng, Act::None, false, true));
        }
        // prior-aware bias init: objectness starts near-off, class logits near
        // the base rate, so early training is not swamped by false positives
        const double cls_bias =
            num_classes > 1 ? std::log(0.6 / (static_cast<double>(num_classes) - 0.99)) : 0.0;
        for (auto& pred : preds_) {
            pred->visit_params([&](const std::string& n, Tensor<T>& t) {
                if (n != "bias") return;
                for (int64_t a = 0; a < num_anchors; ++a) {
                    t.data[static_cast<size_t>(a * (num_classes + 5) + 4)] = static_cast<T>(-4.0);
                    for (int64_t k = 0; k < num_classes; ++k)
                        t.data[static_cast<size_t>(a * (num_classes + 5) + 5 + k)] =
                            static_cast<T>(cls_bias);
                }
            });
        }
    }

    std::string kind() const override { return "Detect"; }
    size_t num_inputs() const override { return stems_.size(); }
    size_t num_outputs() const override { return stems_.size(); }
    int64_t num_classes() const { return num_classes_; }
    int64_t num_anchors() const { return num_anchors_; }

    std::vector<Tensor<T>> forward(const std::vector<const Tensor<T>*>& xs, Mode mode,
                                   FlopCounter* fc = nullptr) override {
        if (xs.size() != stems_.size())
            throw ShapeError("Detect: expected " + std::to_string(stems_.size()) + " inputs");
        std::vector<Tensor<T>> outs;
        for (size_t i = 0; i < xs.size(); ++i)
            outs.push_back(preds_[i]->forward1(stems_[i]->forward1(*xs[i], mode, fc), mode, fc));
        fwd_done_ = true;
        return outs;
    }

    std::vector<Tensor<T>> backward(const std::vector<const Tensor<T>*>& upstream) override {
        this->require_forward(fwd_done_);
        std::vector<Tensor<T>> grads;
        for (size_t i = 0; i < stems_.size(); ++i)
            grads.push_back(stems_[i]->backward1(preds_[i]->backward1(*upstream.at(i))));
        return grads;
    }

    void visit_params(const ParamVisitor<T>& fn) override {
        for (size_t i = 0; i < stems_.size(); ++i) {
            const std::string p = "m" + std::to_string(i) + ".";
            stems_[i]->visit_params([&](const std::string& n, Tensor<T>& t) { fn(p + "stem." + n, t); });
            preds_[i]->visit_params([&](const std::string& n, Tensor<T>& t) { fn(p + "pred." + n, t); });
        }
    }
    void visit_state(const ParamVisitor<T>& fn) override {
        for (size_t i = 0; i < stems_.size(); ++i) {
            const std::string p = "m" + std::to_string(i) + ".";
            stems_[i]->visit_state([&](const std::string& n, Tensor<T>& t) { fn(p + "stem." + n, t); });
        }
    }

    std::vector<Shape> infer_shapes(const std::vector<Shape>& in) const override {
        std::vector<Shape> out;
        for (size_t i = 0; i < in.size(); ++i) {
            Shape s = in[i];
            out.push_back(Shape{s.n, num_anchors_ * (num_classes_ + 5), s.h, s.w});
        }
        return out;
    }
    uint64_t count_flops(const std::vector<Shape>& in) const override {
        uint64_t f = 0;
        for (size_t i = 0; i < in.size(); ++i) {
            f += stems_[i]->count_flops({in[i]});
            f += preds_[i]->count_flops({stems_[i]->infer_shapes({in[i]})[0]});
        }
        return f;
    }

private:
    int64_t num_classes_, num_anchors_;
    std::vector<std::unique_ptr<ConvBlock<T>>> stems_;
    std::vector<std::unique_ptr<ConvBlock<T>>> preds_;
    bool fwd_done_ = false;
};

}  // namespace yoga
