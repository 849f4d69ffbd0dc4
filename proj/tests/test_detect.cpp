#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include <set>

#include "oracles.hpp"
#include "yoga/detect.hpp"
#include "yoga/rng.hpp"

using namespace yoga;

namespace {

// Independent suppression-flag NMS (the quadratic oracle).
std::vector<Detection> brute_nms(const std::vector<Detection>& dets, double thr) {
    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
    std::vector<bool> suppressed(dets.size(), false);
    std::vector<Detection> kept;
    for (size_t i = 0; i < order.size(); ++i) {
        if (suppressed[i]) continue;
        kept.push_back(dets[order[i]]);
        for (size_t j = i + 1; j < order.size(); ++j) {
            if (suppressed[j]) continue;
            if (dets[order[j]].class_id != dets[order[i]].class_id) continue;
            if (box_iou(dets[order[j]].box, dets[order[i]].box) >= thr) suppressed[j] = true;
        }
    }
    return kept;
}

bool same_detection_set(const std::vector<Detection>& a, const std::vector<Detection>& b) {
    if (a.size() != b.size()) return false;
    auto key = [](const Detection& d) {
        return std::make_tuple(d.class_id, d.score, d.box.cx, d.box.cy, d.box.w, d.box.h);
    };
    std::multiset<std::tuple<int, double, double, double, double, double>> sa, sb;
    for (const auto& d : a) sa.insert(key(d));
    for (const auto& d : b) sb.insert(key(d));
    return sa == sb;
}

}  // namespace

TEST_CASE("decode: all-zero logits give the canonical cell decode") {
    const int64_t C = 2;
    std::vector<Tensor<float>> raw;
    raw.emplace_back(Shape{1, 3 * (C + 5), 2, 2}, 0.0f);
    raw.emplace_back(Shape{1, 3 * (C + 5), 1, 1}, 0.0f);
    raw.emplace_back(Shape{1, 3 * (C + 5), 1, 1}, 0.0f);
    AnchorSet a;
    a.anchors = {{{{{8, 8}, {8, 8}, {8, 8}}},
                  {{{16, 16}, {16, 16}, {16, 16}}},
                  {{{32, 32}, {32, 32}, {32, 32}}}}};
    auto dets = decode(raw, a, C, 0.2);
    REQUIRE(!dets.empty());
    // cell (0,0), stride 8: center (4,4), size (8,8), score 0.25 * sigma(0)=...
    const Detection& d = dets[0];
    REQUIRE(d.box.cx == Catch::Approx(4.0));
    REQUIRE(d.box.cy == Catch::Approx(4.0));
    REQUIRE(d.box.w == Catch::Approx(8.0));
    REQUIRE(d.box.h == Catch::Approx(8.0));
    REQUIRE(d.score == Catch::Approx(0.25));

    // conf_threshold 1.0 drops everything
    REQUIRE(decode(raw, a, C, 1.0).empty());
}

TEST_CASE("decode/encode: round trip recovers encodable boxes within 1e-4 px") {
    Rng rng(3);
    AnchorSet a = AnchorSet::coco640();
    for (int trial = 0; trial < 200; ++trial) {
        const int s = static_cast<int>(rng.uniform_int(0, 2));
        const int ai = static_cast<int>(rng.uniform_int(0, 2));
        const double stride = static_cast<double>(a.strides[static_cast<size_t>(s)]);
        const auto& anchor = a.anchors[static_cast<size_t>(s)][static_cast<size_t>(ai)];
        const int64_t gx = rng.uniform_int(0, 5), gy = rng.uniform_int(0, 5);
        Box gt;
        gt.cx = (static_cast<double>(gx) + rng.uniform(-0.45, 1.45)) * stride;
        gt.cy = (static_cast<double>(gy) + rng.uniform(-0.45, 1.45)) * stride;
        gt.w = anchor[0] * rng.uniform(0.05, 3.9);
        gt.h = anchor[1] * rng.uniform(0.05, 3.9);
        auto t = encode_box(gt, anchor, stride, gx, gy);
        if (!t) continue;  // not encodable at this cell
        // decode formulas applied scalar-wise
        auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
        const double cx = (2 * sig((*t)[0]) - 0.5 + static_cast<double>(gx)) * stride;
        const double cy = (2 * sig((*t)[1]) - 0.5 + static_cast<double>(gy)) * stride;
        const double w = 4 * sig((*t)[2]) * sig((*t)[2]) * anchor[0];
        const double h = 4 * sig((*t)[3]) * sig((*t)[3]) * anchor[1];
        REQUIRE(cx == Catch::Approx(gt.cx).margin(1e-4));
        REQUIRE(cy == Catch::Approx(gt.cy).margin(1e-4));
        REQUIRE(w == Catch::Approx(gt.w).margin(1e-4));
        REQUIRE(h == Catch::Approx(gt.h).margin(1e-4));
    }
}

TEST_CASE("nms: single detection survives") {
    Detection d{1, 0.7, Box{10, 10, 5, 5}};
    auto out = nms({d}, 0.45);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].score == 0.7);
}

TEST_CASE("nms: duplicate boxes keep only the higher score") {
    Detection hi{0, 0.9, Box{10, 10, 6, 6}};
    Detection lo{0, 0.8, Box{10, 10, 6, 6}};
    auto out = nms({lo, hi}, 0.45);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].score == 0.9);
}

TEST_CASE("nms: different classes never suppress each other") {
    Detection a{0, 0.9, Box{10, 10, 6, 6}};
    Detection b{1, 0.8, Box{10, 10, 6, 6}};
    REQUIRE(nms({a, b}, 0.45).size() == 2);
}

TEST_CASE("nms: 200 random boxes match the brute-force oracle exactly") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        std::vector<Detection> dets;
        for (int i = 0; i < 200; ++i) {
            Detection d;
            d.class_id = static_cast<int>(rng.uniform_int(0, 4));
            d.score = rng.uniform(0.05, 1.0);
            d.box.cx = rng.uniform(0, 100);
            d.box.cy = rng.uniform(0, 100);
            d.box.w = rng.uniform(2, 30);
            d.box.h = rng.uniform(2, 30);
            dets.push_back(d);
        }
        auto fast = nms(dets, 0.45);
        auto brute = brute_nms(dets, 0.45);
        REQUIRE(same_detection_set(fast, brute));
        // survivors: subset of input, no same-class pair above threshold
        REQUIRE(fast.size() <= dets.size());
        for (size_t i = 0; i < fast.size(); ++i)
            for (size_t j = i + 1; j < fast.size(); ++j)
                if (fast[i].class_id == fast[j].class_id)
                    REQUIRE(box_iou(fast[i].box, fast[j].box) < 0.45);
    }
}

TEST_CASE("ciou: identical boxes give zero") {
    Box b{3, 4, 5, 6};
    REQUIRE(ciou_loss(b, b) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("ciou: concentric equal-aspect boxes reduce to 1 - IoU") {
    Box small{0, 0, 2, 4};
    Box big{0, 0, 4, 8};
    const double iou = box_iou(small, big);
    REQUIRE(ciou_loss(small, big) == Catch::Approx(1.0 - iou).margin(1e-12));
}

TEST_CASE("ciou: hand-evaluated disjoint fixture equals 1.4") {
    Box pred{0, 0, 2, 2};
    Box gt{4, 0, 2, 2};
    // IoU 0, enclosing diag^2 = 36+4, rho^2 = 16, v = 0
    REQUIRE(ciou_loss(pred, gt) == Catch::Approx(1.4).margin(1e-12));
}

TEST_CASE("ciou: non-negative, translation invariant, degenerate rejected") {
    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
        Box p{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0.5, 8), rng.uniform(0.5, 8)};
        Box g{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0.5, 8), rng.uniform(0.5, 8)};
        const double l = ciou_loss(p, g);
        REQUIRE(l >= 0.0);
        const double dx = rng.uniform(-5, 5), dy = rng.uniform(-5, 5);
        Box p2{p.cx + dx, p.cy + dy, p.w, p.h};
        Box g2{g.cx + dx, g.cy + dy, g.w, g.h};
        REQUIRE(ciou_loss(p2, g2) == Catch::Approx(l).margin(1e-9));
    }
    REQUIRE_THROWS_AS(ciou_loss(Box{0, 0, 0, 2}, Box{0, 0, 2, 2}), ValueError);
    REQUIRE_THROWS_AS(ciou_loss(Box{0, 0, 2, 2}, Box{0, 0, 2, 0}), ValueError);
}

TEST_CASE("ciou: dual-number gradient matches central differences") {
    Rng rng(13);
    for (int i = 0; i < 100; ++i) {
        Box p{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 6), rng.uniform(0.5, 6)};
        Box g{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 6), rng.uniform(0.5, 6)};
        auto got = ciou_loss_grad(p, g);
        REQUIRE(got.loss == Catch::Approx(ciou_loss(p, g)));
        const double h = 1e-6;
        double* slots[4] = {&p.cx, &p.cy, &p.w, &p.h};
        for (int k = 0; k < 4; ++k) {
            const double keep = *slots[k];
            *slots[k] = keep + h;
            const double up = ciou_loss(p, g);
            *slots[k] = keep - h;
            const double dn = ciou_loss(p, g);
            *slots[k] = keep;
            const double fd = (up - dn) / (2 * h);
            REQUIRE(got.d_pred[static_cast<size_t>(k)] == Catch::Approx(fd).margin(1e-5));
        }
    }
}

TEST_CASE("smoothed target: invariants enforced, distribution sums to one") {
    REQUIRE_THROWS_AS(SmoothedTarget(1, 0.1, 0), ValueError);
    REQUIRE_THROWS_AS(SmoothedTarget(3, 0.5, 0), ValueError);   // eps >= 1/K
    REQUIRE_THROWS_AS(SmoothedTarget(3, -0.1, 0), ValueError);
    REQUIRE_THROWS_AS(SmoothedTarget(3, 0.1, 3), ValueError);
    SmoothedTarget t(5, 0.05, 2);
    auto y = t.distribution();
    double sum = 0;
    for (double v : y) sum += v;
    REQUIRE(sum == Catch::Approx(1.0));
    REQUIRE(y[2] > y[0]);  // true class keeps the majority
}

TEST_CASE("smoothed ce: documented gradient fixture") {
    SmoothedTarget t(3, 0.1, 0);
    std::vector<double> p{0.5, 0.3, 0.2};
    auto g = smoothed_ce_grad(p, t);
    REQUIRE(g[0] == Catch::Approx(-1.6));
    REQUIRE(g[1] == Catch::Approx(-1.0 / 3.0));
    REQUIRE(g[2] == Catch::Approx(-0.5));
}

TEST_CASE("smoothed ce: zero-entry census at eps zero and eps positive") {
    for (int64_t K : {2ll, 3ll, 80ll}) {
        std::vector<double> probs(static_cast<size_t>(K));
        Rng rng(static_cast<uint64_t>(K));
        double sum = 0;
        for (auto& v : probs) {
            v = rng.uniform(0.01, 1.0);
            sum += v;
        }
        for (auto& v : probs) v /= sum;
        SmoothedTarget smooth(K, 0.1 / static_cast<double>(K), 0);
        auto gs = smoothed_ce_grad(probs, smooth);
        int64_t zeros = 0;
        for (double v : gs)
            if (v == 0.0) ++zeros;
        REQUIRE(zeros == 0);
        for (double v : gs) REQUIRE(v < 0.0);  // every entry strictly negative

        SmoothedTarget hard(K, 0.0, 0);
        auto gh = smoothed_ce_grad(probs, hard);
        zeros = 0;
        for (double v : gh)
            if (v == 0.0) ++zeros;
        REQUIRE(zeros == K - 1);
    }
}

TEST_CASE("smoothed ce: analytic gradient matches reverse-mode autodiff through softmax+log") {
    for (int64_t K : {2ll, 3ll, 80ll}) {
        Rng rng(static_cast<uint64_t>(7 + K));
        std::vector<double> logits(static_cast<size_t>(K));
        for (auto& v : logits) v = rng.uniform(-2, 2);
        const int64_t c = rng.uniform_int(0, K - 1);
        SmoothedTarget target(K, 0.1 / static_cast<double>(K), c);

        // independent route: autodiff graph  z -> softmax -> smoothed CE
        std::vector<oracle::AdPtr> z;
        for (double v : logits) z.push_back(oracle::ad_leaf(v));
        std::vector<oracle::AdPtr> ez;
        oracle::AdPtr denom = nullptr;
        for (auto& zi : z) {
            auto e = oracle::ad_exp(zi);
            ez.push_back(e);
            denom = denom ? oracle::ad_add(denom, e) : e;
        }
        oracle::AdPtr loss = nullptr;
        auto dist = target.distribution();
        for (size_t i = 0; i < ez.size(); ++i) {
            auto pi = oracle::ad_div(ez[i], denom);
            auto term = oracle::ad_scale(oracle::ad_log(pi), -dist[i]);
            loss = loss ? oracle::ad_add(loss, term) : term;
        }
        oracle::ad_backward(loss);

        // library route: probabilities + analytic dL/dp, chained through the
        // softmax Jacobian dL/dz_j = p_j * (g_j - sum_i g_i p_i)
        auto probs = softmax(logits);
        REQUIRE(loss->val == Catch::Approx(smoothed_ce_loss(probs, target)).margin(1e-12));
        auto g = smoothed_ce_grad(probs, target);
        double dot = 0;
        for (size_t i = 0; i < probs.size(); ++i) dot += g[i] * probs[i];
        for (size_t j = 0; j < probs.size(); ++j) {
            const double dz = probs[j] * (g[j] - dot);
            REQUIRE(dz == Catch::Approx(z[j]->grad).margin(1e-6));
            // the closed form p - y is the textbook check on both routes
            REQUIRE(dz == Catch::Approx(probs[j] - dist[j]).margin(1e-9));
        }

        // direct dL/dp against autodiff with p as leaves
        std::vector<oracle::AdPtr> pv;
        for (double v : probs) pv.push_back(oracle::ad_leaf(v));
        oracle::AdPtr loss2 = nullptr;
        for (size_t i = 0; i < pv.size(); ++i) {
            auto term = oracle::ad_scale(oracle::ad_log(pv[i]), -dist[i]);
            loss2 = loss2 ? oracle::ad_add(loss2, term) : term;
        }
        oracle::ad_backward(loss2);
        for (size_t i = 0; i < pv.size(); ++i)
            REQUIRE(g[i] == Catch::Approx(pv[i]->grad).margin(1e-6));
    }
}

TEST_CASE("smoothed ce: rejects non-positive probabilities") {
    SmoothedTarget t(3, 0.1, 0);
    REQUIRE_THROWS_AS(smoothed_ce_loss(std::vector<double>{0.5, 0.5, 0.0}, t), ValueError);
}

TEST_CASE("assign: gt equal to an anchor at a cell center is assigned") {
    AnchorSet a = AnchorSet::toy64();
    std::vector<GtBox> gts{{Box{20, 20, 16, 16}, 0}};
    auto out = assign_targets(gts, a, 64, 64);
    bool found = false;
    for (const auto& as : out)
        if (as.scale == 0 && as.anchor == 1 && as.gx == 2 && as.gy == 2) found = true;
    REQUIRE(found);
}

TEST_CASE("assign: oversized gt matches no anchor at a scale") {
    AnchorSet a = AnchorSet::coco640();
    // ~10x larger than every stride-8 anchor but within the ratio gate at stride 32
    std::vector<GtBox> gts{{Box{320, 320, 300, 300}, 0}};
    auto out = assign_targets(gts, a, 640, 640);
    REQUIRE(!out.empty());
    for (const auto& as : out) REQUIRE(as.scale != 0);
}

TEST_CASE("assign: out-of-bounds gt rejected") {
    AnchorSet a = AnchorSet::toy64();
    REQUIRE_THROWS_AS(assign_targets({{Box{2, 2, 16, 16}, 0}}, a, 64, 64), ValueError);
}

TEST_CASE("assign: randomized set equals the brute-force ratio-filter oracle") {
    AnchorSet a = AnchorSet::toy64();
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<GtBox> gts;
        for (int i = 0; i < 6; ++i) {
            const double w = rng.uniform(4, 50), h = rng.uniform(4, 50);
            const double cx = rng.uniform(w / 2, 64 - w / 2), cy = rng.uniform(h / 2, 64 - h / 2);
            gts.push_back({Box{cx, cy, w, h}, static_cast<int>(rng.uniform_int(0, 2))});
        }
        auto got = assign_targets(gts, a, 64, 64);
        // oracle: exhaustive scan over (gt, scale, anchor)
        std::vector<Assignment> want;
        for (size_t gi = 0; gi < gts.size(); ++gi)
            for (int s = 0; s < 3; ++s)
                for (int ai = 0; ai < 3; ++ai) {
                    const auto& an = a.anchors[static_cast<size_t>(s)][static_cast<size_t>(ai)];
                    const Box& b = gts[gi].box;
                    const double r = std::max(std::max(b.w / an[0], an[0] / b.w),
                                              std::max(b.h / an[1], an[1] / b.h));
                    if (r < 4.0) {
                        const int64_t stride = a.strides[static_cast<size_t>(s)];
                        Assignment as;
                        as.scale = s;
                        as.anchor = ai;
                        as.gx = std::min<int64_t>(64 / stride - 1,
                                                  static_cast<int64_t>(b.cx / static_cast<double>(stride)));
                        as.gy = std::min<int64_t>(64 / stride - 1,
                                                  static_cast<int64_t>(b.cy / static_cast<double>(stride)));
                        as.gt_index = gi;
                        want.push_back(as);
                    }
                }
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) {
            REQUIRE(got[i].scale == want[i].scale);
            REQUIRE(got[i].anchor == want[i].anchor);
            REQUIRE(got[i].gx == want[i].gx);
            REQUIRE(got[i].gy == want[i].gy);
            REQUIRE(got[i].gt_index == want[i].gt_index);
        }
    }
}

TEST_CASE("jsonl: stable field order and valid json") {
    Detection d{2, 0.875, Box{10.5, 20.25, 8, 16}};
    std::ostringstream os;
    write_detection_jsonl(os, "img_007", d);
    const std::string line = os.str();
    REQUIRE(line.rfind("{\"image_id\":\"img_007\",\"class\":2,\"score\":0.875000,", 0) == 0);
    auto j = nlohmann::json::parse(line);
    REQUIRE(j["class"] == 2);
    REQUIRE(j["box"]["cx"] == Catch::Approx(10.5));
}
