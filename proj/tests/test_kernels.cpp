#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "yoga/kernels.hpp"
#include "yoga/rng.hpp"

using namespace yoga;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<T> t(s);
    rng.fill_uniform(t, lo, hi);
    return t;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 sums to 9") {
    Tensor<float> x(Shape{1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    Tensor<float> w(Shape{1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    ConvSpec spec{1, 1, 3, 3, 1, 0, 1, false};
    auto y = conv2d(x, w, spec);
    REQUIRE(y.shape == Shape{1, 1, 1, 1});
    REQUIRE(y.data[0] == 9.0f);
}

TEST_CASE("conv2d: per-channel 1x1 identity filter") {
    Rng rng(3);
    auto x = random_tensor<float>(Shape{2, 4, 5, 3}, rng);
    Tensor<float> w(Shape{4, 1, 1, 1}, std::vector<float>(4, 1.0f));
    ConvSpec spec{4, 4, 1, 1, 1, 0, 4, false};
    auto y = conv2d(x, w, spec);
    REQUIRE(y.data == x.data);
}

TEST_CASE("conv2d: grouped ramp input matches six-loop oracle") {
    std::vector<double> vals(32);
    for (int i = 0; i < 32; ++i) vals[static_cast<size_t>(i)] = i;
    Tensor<double> x(Shape{1, 2, 4, 4}, vals);
    Rng rng(11);
    ConvSpec spec{2, 2, 3, 3, 1, 1, 2, false};
    auto w = random_tensor<double>(spec.weight_shape(), rng);
    auto got = conv2d(x, w, spec);
    auto want = oracle::ref_conv2d(x, w, nullptr, spec);
    REQUIRE(got.shape == want.shape);
    for (size_t i = 0; i < got.data.size(); ++i)
        REQUIRE(got.data[i] == Catch::Approx(want.data[i]).epsilon(1e-12));
}

TEST_CASE("conv2d: randomized shapes match oracle, instrumented and fast paths agree") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        ConvSpec spec;
        int64_t g = rng.uniform_int(1, 2);
        spec.in_ch = g * rng.uniform_int(1, 3);
        spec.out_ch = g * rng.uniform_int(1, 3);
        spec.groups = g;
        spec.kh = rng.uniform_int(1, 3);
        spec.kw = rng.uniform_int(1, 3);
        spec.stride = rng.uniform_int(1, 2);
        spec.padding = rng.uniform_int(0, 2);
        spec.bias = rng.uniform() < 0.5;
        Shape in{rng.uniform_int(1, 2), spec.in_ch, rng.uniform_int(spec.kh, 7),
                 rng.uniform_int(spec.kw, 7)};
        auto x = random_tensor<double>(in, rng);
        auto w = random_tensor<double>(spec.weight_shape(), rng);
        Tensor<double> b(Shape{1, spec.out_ch, 1, 1});
        rng.fill_uniform(b, -1, 1);
        FlopCounter fc;
        auto slow = conv2d(x, w, spec.bias ? &b : nullptr, spec, &fc);
        auto fast = conv2d(x, w, spec.bias ? &b : nullptr, spec);
        auto want = oracle::ref_conv2d(x, w, spec.bias ? &b : nullptr, spec);
        REQUIRE(slow.data == fast.data);  // bit-identical paths
        for (size_t i = 0; i < fast.data.size(); ++i)
            REQUIRE(fast.data[i] == Catch::Approx(want.data[i]).margin(1e-10));
        REQUIRE(fc.flops == spec.flops(in));
    }
}

TEST_CASE("conv2d: shape errors name the axis") {
    Tensor<float> x(Shape{1, 3, 4, 4});
    ConvSpec spec{4, 8, 3, 3, 1, 1, 1, false};
    Tensor<float> w(spec.weight_shape());
    REQUIRE_THROWS_WITH(conv2d(x, w, spec), Catch::Matchers::ContainsSubstring("'c'"));
    ConvSpec bad{6, 8, 3, 3, 1, 0, 4, false};
    REQUIRE_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("conv2d: group locality") {
    // zeroing input channel block j changes only output channel block j
    Rng rng(9);
    ConvSpec spec{4, 6, 3, 3, 1, 1, 2, false};
    auto x = random_tensor<double>(Shape{1, 4, 6, 6}, rng);
    auto w = random_tensor<double>(spec.weight_shape(), rng);
    auto y0 = conv2d(x, w, spec);
    Tensor<double> xz = x;
    for (int64_t c = 0; c < 2; ++c)  // zero block 0 (channels 0..1)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t wd = 0; wd < 6; ++wd) xz.at(0, c, h, wd) = 0.0;
    auto y1 = conv2d(xz, w, spec);
    bool block0_changed = false;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t wd = 0; wd < 6; ++wd)
                if (y0.at(0, c, h, wd) != y1.at(0, c, h, wd)) block0_changed = true;
    REQUIRE(block0_changed);
    for (int64_t c = 3; c < 6; ++c)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t wd = 0; wd < 6; ++wd) REQUIRE(y0.at(0, c, h, wd) == y1.at(0, c, h, wd));
}

TEST_CASE("conv2d: linearity for bias-free specs") {
    Rng rng(13);
    ConvSpec spec{3, 5, 3, 3, 2, 1, 1, false};
    auto x = random_tensor<double>(Shape{2, 3, 7, 7}, rng);
    auto y = random_tensor<double>(Shape{2, 3, 7, 7}, rng);
    auto w = random_tensor<double>(spec.weight_shape(), rng);
    const double a = 1.7, b = -0.6;
    Tensor<double> mix(x.shape);
    for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];
    auto lhs = conv2d(mix, w, spec);
    auto cx = conv2d(x, w, spec);
    auto cy = conv2d(y, w, spec);
    for (size_t i = 0; i < lhs.data.size(); ++i) {
        const double want = a * cx.data[i] + b * cy.data[i];
        REQUIRE(lhs.data[i] == Catch::Approx(want).epsilon(1e-5).margin(1e-9));
    }
}

TEST_CASE("conv2d: output shape formula sweep") {
    for (int64_t k = 1; k <= 4; ++k)
        for (int64_t s = 1; s <= 3; ++s)
            for (int64_t p = 0; p <= 2; ++p) {
                Shape in{1, 2, 9, 11};
                if (in.h + 2 * p < k || in.w + 2 * p < k) continue;
                ConvSpec spec{2, 3, k, k, s, p, 1, false};
                Tensor<float> x(in);
                Tensor<float> w(spec.weight_shape());
                auto y = conv2d(x, w, spec);
                REQUIRE(y.shape.h == (in.h + 2 * p - k) / s + 1);
                REQUIRE(y.shape.w == (in.w + 2 * p - k) / s + 1);
            }
}

TEST_CASE("conv2d: determinism across repeated runs") {
    Rng rng(21);
    ConvSpec spec{3, 4, 3, 3, 1, 1, 1, false};
    auto x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
    auto w = random_tensor<float>(spec.weight_shape(), rng);
    auto a = conv2d(x, w, spec);
    auto b = conv2d(x, w, spec);
    REQUIRE(a.data == b.data);
}

TEST_CASE("batchnorm: identity parameters pass input through") {
    Rng rng(2);
    auto x = random_tensor<float>(Shape{2, 3, 4, 4}, rng);
    BnParams<float> p(3);
    auto y = batchnorm2d(x, p, BnMode::Infer, 1e-9);
    for (size_t i = 0; i < x.data.size(); ++i)
        REQUIRE(y.data[i] == Catch::Approx(x.data[i]).epsilon(1e-6));
}

TEST_CASE("batchnorm: constant channel in train mode yields beta") {
    Tensor<float> x(Shape{2, 2, 3, 3}, 4.5f);
    BnParams<float> p(2);
    p.beta.data = {0.25f, -1.0f};
    auto y = batchnorm2d(x, p, BnMode::Train);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t h = 0; h < 3; ++h)
            for (int64_t w = 0; w < 3; ++w) {
                REQUIRE(y.at(n, 0, h, w) == Catch::Approx(0.25f));
                REQUIRE(y.at(n, 1, h, w) == Catch::Approx(-1.0f));
            }
}

TEST_CASE("batchnorm: train mode matches two-pass oracle") {
    Rng rng(17);
    auto x = random_tensor<double>(Shape{2, 3, 2, 2}, rng);
    BnParams<double> p(3);
    rng.fill_uniform(p.gamma, 0.5, 1.5);
    rng.fill_uniform(p.beta, -0.5, 0.5);
    std::vector<double> g(p.gamma.data.begin(), p.gamma.data.end());
    std::vector<double> b(p.beta.data.begin(), p.beta.data.end());
    auto y = batchnorm2d(x, p, BnMode::Train, 1e-3);
    auto want = oracle::ref_batchnorm_train(x, g, b, 1e-3);
    for (size_t i = 0; i < y.data.size(); ++i)
        REQUIRE(y.data[i] == Catch::Approx(want.data[i]).margin(1e-12));
}

TEST_CASE("batchnorm: running stats move toward batch stats") {
    Rng rng(19);
    auto x = random_tensor<double>(Shape{4, 1, 3, 3}, rng, 2.0, 4.0);
    BnParams<double> p(1);
    batchnorm2d(x, p, BnMode::Train, 1e-3, 0.03);
    REQUIRE(p.running_mean.data[0] > 0.0);
    REQUIRE(p.running_mean.data[0] < 4.0);
    double rm1 = p.running_mean.data[0];
    batchnorm2d(x, p, BnMode::Train, 1e-3, 0.03);
    REQUIRE(p.running_mean.data[0] > rm1);  // moving toward batch mean ~3
}

TEST_CASE("batchnorm: non-positive eps rejected") {
    Tensor<float> x(Shape{1, 1, 2, 2});
    BnParams<float> p(1);
    REQUIRE_THROWS_AS(batchnorm2d(x, p, BnMode::Infer, 0.0), ValueError);
    REQUIRE_THROWS_AS(batchnorm2d(x, p, BnMode::Infer, -1.0), ValueError);
}

TEST_CASE("activation: fixed points and scalar value") {
    Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{0.0, 0.0, 1.0});
    auto s = activation(x, Act::Silu);
    REQUIRE(s.data[0] == 0.0);
    auto g = activation(x, Act::Sigmoid);
    REQUIRE(g.data[0] == 0.5);
    // silu(1) = 1/(1+e^-1)
    REQUIRE(s.data[2] == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    for (double v : g.data) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
    }
}

TEST_CASE("maxpool: 2x2 window picks 4") {
    Tensor<float> x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    auto y = maxpool2d(x, 2, 2, 0);
    REQUIRE(y.shape == Shape{1, 1, 1, 1});
    REQUIRE(y.data[0] == 4.0f);
}

TEST_CASE("maxpool: constant input stays constant, SPP mode keeps shape") {
    Tensor<float> x(Shape{1, 2, 6, 6}, 3.25f);
    auto y = maxpool2d(x, 5, 1, 2);
    REQUIRE(y.shape == x.shape);
    for (float v : y.data) REQUIRE(v == 3.25f);
}

TEST_CASE("maxpool: ramp against window-scan oracle") {
    std::vector<double> vals(25);
    for (int i = 0; i < 25; ++i) vals[static_cast<size_t>(i)] = i * 0.7 - 4.0;
    Tensor<double> x(Shape{1, 1, 5, 5}, vals);
    auto got = maxpool2d(x, 5, 1, 2);
    auto want = oracle::ref_maxpool(x, 5, 1, 2);
    REQUIRE(got.data == want.data);
}

TEST_CASE("maxpool: oversized window rejected") {
    Tensor<float> x(Shape{1, 1, 3, 3});
    REQUIRE_THROWS_AS(maxpool2d(x, 7, 1, 1), ShapeError);
}

TEST_CASE("global_avg_pool: constants and small fixture") {
    Tensor<float> c7(Shape{2, 3, 4, 5}, 7.0f);
    auto y = global_avg_pool(c7);
    REQUIRE(y.shape == Shape{2, 3, 1, 1});
    for (float v : y.data) REQUIRE(v == Catch::Approx(7.0f));

    Tensor<float> q(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    REQUIRE(global_avg_pool(q).data[0] == Catch::Approx(2.5f));
}

TEST_CASE("global_avg_pool: random tensor matches 64-bit sum oracle") {
    Rng rng(23);
    Tensor<double> x(Shape{2, 4, 7, 5});
    rng.fill_uniform(x, -10, 10);
    auto y = global_avg_pool(x);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 4; ++c) {
            double sum = 0;
            for (int64_t h = 0; h < 7; ++h)
                for (int64_t w = 0; w < 5; ++w) sum += x.at(n, c, h, w);
            REQUIRE(y.at(n, c, 0, 0) == Catch::Approx(sum / 35.0).epsilon(1e-13));
        }
}

TEST_CASE("concat: single part is identity, parts recoverable by slicing") {
    Rng rng(29);
    Tensor<float> a(Shape{2, 2, 3, 3});
    Tensor<float> b(Shape{2, 3, 3, 3});
    rng.fill_uniform(a, -1, 1);
    rng.fill_uniform(b, -1, 1);
    auto solo = concat_channels<float>({&a});
    REQUIRE(solo.data == a.data);

    auto y = concat_channels<float>({&a, &b});
    REQUIRE(y.shape.c == 5);
    auto sa = slice_channels(y, 0, 2);
    auto sb = slice_channels(y, 2, 3);
    REQUIRE(sa.data == a.data);
    REQUIRE(sb.data == b.data);
}

TEST_CASE("concat: channel depth adds, spatial mismatch rejected") {
    Tensor<float> a(Shape{1, 2, 4, 4});
    Tensor<float> b(Shape{1, 3, 4, 4});
    REQUIRE(concat_channels<float>({&a, &b}).shape.c == a.shape.c + b.shape.c);
    Tensor<float> bad(Shape{1, 3, 5, 4});
    REQUIRE_THROWS_AS(concat_channels<float>({&a, &bad}), ShapeError);
}

TEST_CASE("elementwise: identity elements") {
    Rng rng(31);
    Tensor<float> x(Shape{1, 2, 3, 3});
    rng.fill_uniform(x, -2, 2);
    Tensor<float> zero(x.shape, 0.0f);
    Tensor<float> one(x.shape, 1.0f);
    REQUIRE(elementwise(x, zero, EwKind::Add).data == x.data);
    REQUIRE(elementwise(x, one, EwKind::Mul).data == x.data);
}

TEST_CASE("elementwise: channel broadcast equals explicit tiling") {
    Rng rng(37);
    Tensor<double> a(Shape{2, 3, 4, 4});
    Tensor<double> b(Shape{2, 3, 1, 1});
    rng.fill_uniform(a, -2, 2);
    rng.fill_uniform(b, -2, 2);
    auto y = elementwise(a, b, EwKind::Add, Broadcast::Channel);
    Tensor<double> tiled(a.shape);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t h = 0; h < 4; ++h)
                for (int64_t w = 0; w < 4; ++w) tiled.at(n, c, h, w) = b.at(n, c, 0, 0);
    auto want = elementwise(a, tiled, EwKind::Add);
    REQUIRE(y.data == want.data);
}

TEST_CASE("elementwise: half-half mix is the mean") {
    Rng rng(41);
    Tensor<double> x(Shape{1, 2, 3, 3});
    Tensor<double> y(Shape{1, 2, 3, 3});
    rng.fill_uniform(x, -1, 1);
    rng.fill_uniform(y, -1, 1);
    Tensor<double> m(x.shape, 0.5);
    Tensor<double> onem(x.shape, 0.5);
    auto mx = elementwise(m, x, EwKind::Mul);
    auto my = elementwise(onem, y, EwKind::Mul);
    auto out = elementwise(mx, my, EwKind::Add);
    for (size_t i = 0; i < out.data.size(); ++i)
        REQUIRE(out.data[i] == Catch::Approx(0.5 * (x.data[i] + y.data[i])));
}

TEST_CASE("elementwise: incompatible shapes rejected") {
    Tensor<float> a(Shape{1, 2, 3, 3});
    Tensor<float> b(Shape{1, 2, 3, 2});
    REQUIRE_THROWS_AS(elementwise(a, b, EwKind::Add), ShapeError);
    Tensor<float> c(Shape{1, 3, 1, 1});
    REQUIRE_THROWS_AS(elementwise(a, c, EwKind::Add, Broadcast::Channel), ShapeError);
}

TEST_CASE("upsample: scalar becomes 2x2 block") {
    Tensor<float> x(Shape{1, 1, 1, 1}, std::vector<float>{5.0f});
    auto y = upsample_nearest2x(x);
    REQUIRE(y.shape == Shape{1, 1, 2, 2});
    for (float v : y.data) REQUIRE(v == 5.0f);
}

TEST_CASE("upsample: strided downsample recovers input; ramp follows index map") {
    Rng rng(43);
    Tensor<double> x(Shape{2, 3, 4, 5});
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] = static_cast<double>(i) * 0.25;
    auto y = upsample_nearest2x(x);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t h = 0; h < y.shape.h; ++h)
                for (int64_t w = 0; w < y.shape.w; ++w)
                    REQUIRE(y.at(n, c, h, w) == x.at(n, c, h / 2, w / 2));  // index-map oracle
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t h = 0; h < 4; ++h)
                for (int64_t w = 0; w < 5; ++w) REQUIRE(y.at(n, c, 2 * h, 2 * w) == x.at(n, c, h, w));
}
