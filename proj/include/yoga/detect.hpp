#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <vector>

#include "yoga/kernels.hpp"
#include "yoga/tensor.hpp"

namespace yoga {

// Box as (center x, center y, width, height) in input pixels.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
    double x1() const { return cx - w / 2; }
    double y1() const { return cy - h / 2; }
    double x2() const { return cx + w / 2; }
    double y2() const { return cy + h / 2; }
};

struct Detection {
    int class_id = 0;
    double score = 0;
    Box box;
};

struct AnchorSet {
    std::array<int64_t, 3> strides{8, 16, 32};
    // anchors[scale][i] = (width, height) in input pixels
    std::array<std::array<std::array<double, 2>, 3>, 3> anchors{};

    static constexpr int64_t kNumAnchors = 3;

    static AnchorSet coco640() {
        AnchorSet a;
        a.anchors = {{{{{10, 13}, {16, 30}, {33, 23}}},
                      {{{30, 61}, {62, 45}, {59, 119}}},
                      {{{116, 90}, {156, 198}, {373, 326}}}}};
        return a;
    }
    // small-image preset used by the toy dataset (64px-scale inputs)
    static AnchorSet toy64() {
        AnchorSet a;
        a.anchors = {{{{{10, 10}, {16, 16}, {13, 24}}},
                      {{{20, 20}, {28, 28}, {24, 40}}},
                      {{{34, 34}, {46, 46}, {40, 56}}}}};
        return a;
    }

    void validate() const {
        for (const auto& scale : anchors)
            for (const auto& wh : scale)
                if (wh[0] <= 0 || wh[1] <= 0) throw ValueError("AnchorSet: non-positive anchor");
    }
};

inline double box_iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// --- head decode ---------------------------------------------------------------

// Raw head tensors are (n, A*(C+5), h, w); within an anchor block the channels
// are tx, ty, tw, th, objectness, class logits. Box center is
// (2*sigma(t)-0.5+grid)*stride, box size (2*sigma(t))^2*anchor, score is
// objectness times the best class probability.
template <typename T>
std::vector<Detection> decode(const std::vector<Tensor<T>>& raw, const AnchorSet& anchors,
                              int64_t num_classes, double conf_threshold, int64_t image = 0) {
    if (raw.size() != 3) throw ShapeError("decode: expected 3 head tensors");
    const int64_t per_anchor = num_classes + 5;
    std::vector<Detection> dets;
    for (size_t s = 0; s < raw.size(); ++s) {
        const Tensor<T>& t = raw[s];
        check_axis(t.shape.c, AnchorSet::kNumAnchors * per_anchor, "c", "decode");
        const double stride = static_cast<double>(anchors.strides[s]);
        for (int64_t a = 0; a < AnchorSet::kNumAnchors; ++a) {
            const int64_t c0 = a * per_anchor;
            for (int64_t gy = 0; gy < t.shape.h; ++gy)
                for (int64_t gx = 0; gx < t.shape.w; ++gx) {
                    const double obj = sigmoid_scalar(static_cast<double>(t.at(image, c0 + 4, gy, gx)));
                    double best = -1;
                    int best_cls = -1;
                    for (int64_t k = 0; k < num_classes; ++k) {
                        const double p =
                            sigmoid_scalar(static_cast<double>(t.at(image, c0 + 5 + k, gy, gx)));
                        if (p > best) {
                            best = p;
                            best_cls = static_cast<int>(k);
                        }
                    }
                    const double score = obj * best;
                    if (score <= conf_threshold) continue;
                    Detection d;
                    d.class_id = best_cls;
                    d.score = score;
                    const double sx = sigmoid_scalar(static_cast<double>(t.at(image, c0 + 0, gy, gx)));
                    const double sy = sigmoid_scalar(static_cast<double>(t.at(image, c0 + 1, gy, gx)));
                    const double sw = sigmoid_scalar(static_cast<double>(t.at(image, c0 + 2, gy, gx)));
                    const double sh = sigmoid_scalar(static_cast<double>(t.at(image, c0 + 3, gy, gx)));
                    d.box.cx = (2 * sx - 0.5 + static_cast<double>(gx)) * stride;
                    d.box.cy = (2 * sy - 0.5 + static_cast<double>(gy)) * stride;
                    d.box.w = (2 * sw) * (2 * sw) * anchors.anchors[s][static_cast<size_t>(a)][0];
                    d.box.h = (2 * sh) * (2 * sh) * anchors.anchors[s][static_cast<size_t>(a)][1];
                    dets.push_back(d);
                }
        }
    }
    return dets;
}

// Inverse of the decode parameterization; empty when the box is not encodable
// for this (cell, anchor, stride) combination.
inline std::optional<std::array<double, 4>> encode_box(const Box& gt,
                                                       const std::array<double, 2>& anchor,
                                                       double stride, int64_t gx, int64_t gy) {
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    const double fx = (gt.cx / stride - static_cast<double>(gx) + 0.5) / 2.0;
    const double fy = (gt.cy / stride - static_cast<double>(gy) + 0.5) / 2.0;
    const double fw = std::sqrt(gt.w / anchor[0]) / 2.0;
    const double fh = std::sqrt(gt.h / anchor[1]) / 2.0;
    for (double f : {fx, fy, fw, fh})
        if (f <= 0.0 || f >= 1.0) return std::nullopt;
    return std::array<double, 4>{logit(fx), logit(fy), logit(fw), logit(fh)};
}

// Greedy per-class suppression: sort by score (stable), keep a detection iff
// its IoU with every already-kept same-class detection is below the threshold.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (size_t idx : order) {
        const Detection& d = dets[idx];
        bool ok = true;
        for (const Detection& k : kept) {
            if (k.class_id != d.class_id) continue;
            if (box_iou(k.box, d.box) >= iou_threshold) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(d);
    }
    return kept;
}

// --- CIoU loss -------------------------------------------------------------------
//
// loss = 1 - IoU + rho^2/c^2 + alpha*v with v the aspect-ratio penalty and
// alpha = v/((1-IoU)+v). The alpha*v term is kept as v^2/((1-IoU)+v) so the
// gradient is exact; gradients come from a forward pass over dual numbers.

namespace detail {

struct Dual4 {
    double v = 0;
    std::array<double, 4> d{0, 0, 0, 0};

    Dual4() = default;
    Dual4(double value) : v(value) {}
    static Dual4 var(double value, int slot) {
        Dual4 x(value);
        x.d[static_cast<size_t>(slot)] = 1.0;
        return x;
    }
};
inline Dual4 operator+(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v + b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
}
inline Dual4 operator-(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v - b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
}
inline Dual4 operator*(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v * b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
inline Dual4 operator/(const Dual4& a, const Dual4& b) {
    Dual4 r(a.v / b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
}
inline Dual4 dmax(const Dual4& a, const Dual4& b) { return a.v >= b.v ? a : b; }
inline Dual4 dmin(const Dual4& a, const Dual4& b) { return a.v <= b.v ? a : b; }
inline Dual4 datan(const Dual4& a) {
    Dual4 r(std::atan(a.v));
    const double s = 1.0 / (1.0 + a.v * a.v);
    for (int i = 0; i < 4; ++i) r.d[i] = s * a.d[i];
    return r;
}
inline double dmax(double a, double b) { return a >= b ? a : b; }
inline double dmin(double a, double b) { return a <= b ? a : b; }
inline double datan(double a) { return std::atan(a); }
inline double value_of(double x) { return x; }
inline double value_of(const Dual4& x) { return x.v; }

template <typename S>
S ciou_impl(S pcx, S pcy, S pw, S ph, const Box& gt) {
    const S px1 = pcx - pw / S(2), px2 = pcx + pw / S(2);
    const S py1 = pcy - ph / S(2), py2 = pcy + ph / S(2);
    const double gx1 = gt.x1(), gx2 = gt.x2(), gy1 = gt.y1(), gy2 = gt.y2();

    const S iw = dmax(dmin(px2, S(gx2)) - dmax(px1, S(gx1)), S(0.0));
    const S ih = dmax(dmin(py2, S(gy2)) - dmax(py1, S(gy1)), S(0.0));
    const S inter = iw * ih;
    const S uni = pw * ph + S(gt.w * gt.h) - inter;
    const S iou = inter / uni;

    const S cw = dmax(px2, S(gx2)) - dmin(px1, S(gx1));
    const S ch = dmax(py2, S(gy2)) - dmin(py1, S(gy1));
    const S c2 = cw * cw + ch * ch;
    const S rho2 = (pcx - S(gt.cx)) * (pcx - S(gt.cx)) + (pcy - S(gt.cy)) * (pcy - S(gt.cy));

    constexpr double kFourOverPi2 = 4.0 / (3.14159265358979323846 * 3.14159265358979323846);
    const S dtheta = datan(S(gt.w / gt.h)) - datan(pw / ph);
    const S v = S(kFourOverPi2) * dtheta * dtheta;

    S loss = S(1.0) - iou + rho2 / c2;
    if (value_of(v) > 0.0) loss = loss + v * v / ((S(1.0) - iou) + v);
    return loss;
}

}  // namespace detail

inline void check_box_positive(const Box& b, const char* which) {
    if (!(b.w > 0) || !(b.h > 0))
        throw ValueError(std::string("ciou_loss: degenerate (zero-area) ") + which + " box");
}

inline double ciou_loss(const Box& pred, const Box& gt) {
    check_box_positive(pred, "pred");
    check_box_positive(gt, "gt");
    return detail::ciou_impl<double>(pred.cx, pred.cy, pred.w, pred.h, gt);
}

struct CiouGrad {
    double loss = 0;
    std::array<double, 4> d_pred{0, 0, 0, 0};  // d/d(cx, cy, w, h)
};

inline CiouGrad ciou_loss_grad(const Box& pred, const Box& gt) {
    check_box_positive(pred, "pred");
    check_box_positive(gt, "gt");
    using detail::Dual4;
    Dual4 l = detail::ciou_impl<Dual4>(Dual4::var(pred.cx, 0), Dual4::var(pred.cy, 1),
                                       Dual4::var(pred.w, 2), Dual4::var(pred.h, 3), gt);
    return CiouGrad{l.v, l.d};
}

// --- label smoothing ----------------------------------------------------------------
//
// The smoothed target places 1-(K-1)*eps on the true class and eps on each of
// the other K-1 classes. With eps > 0 every entry of the loss gradient with
// respect to the predicted probabilities is non-zero.

struct SmoothedTarget {
    int64_t num_classes = 0;
    double epsilon = 0;
    int64_t true_class = 0;

    SmoothedTarget(int64_t k, double eps, int64_t c) : num_classes(k), epsilon(eps), true_class(c) {
        if (k < 2) throw ValueError("SmoothedTarget: need at least 2 classes");
        if (c < 0 || c >= k) throw ValueError("SmoothedTarget: true class out of range");
        if (eps < 0) throw ValueError("SmoothedTarget: negative epsilon");
        // true class must keep the majority: 1-(K-1)eps > eps
        if (1.0 - static_cast<double>(k - 1) * eps <= eps)
            throw ValueError("SmoothedTarget: epsilon " + std::to_string(eps) +
                             " too large for K=" + std::to_string(k));
    }

    double weight_true() const { return 1.0 - static_cast<double>(num_classes - 1) * epsilon; }
    double weight_other() const { return epsilon; }
    // the full distribution; sums to 1
    std::vector<double> distribution() const {
        std::vector<double> y(static_cast<size_t>(num_classes), epsilon);
        y[static_cast<size_t>(true_class)] = weight_true();
        return y;
    }
};

template <typename T>
double smoothed_ce_loss(const std::vector<T>& probs, const SmoothedTarget& target) {
    if (static_cast<int64_t>(probs.size()) != target.num_classes)
        throw ShapeError("smoothed_ce_loss: axis 'K' size " + std::to_string(probs.size()) +
                         " != " + std::to_string(target.num_classes));
    double loss = 0;
    for (int64_t i = 0; i < target.num_classes; ++i) {
        const double p = static_cast<double>(probs[static_cast<size_t>(i)]);
        if (!(p > 0)) throw ValueError("smoothed_ce_loss: probabilities must be strictly positive");
        const double y = i == target.true_class ? target.weight_true() : target.weight_other();
        if (y != 0.0) loss -= y * std::log(p);
    }
    return loss;
}

// dL/dp_i per the smoothed cross-entropy: -(1-(K-1)eps)/p_c on the true class,
// -eps/p_i elsewhere.
template <typename T>
std::vector<double> smoothed_ce_grad(const std::vector<T>& probs, const SmoothedTarget& target) {
    if (static_cast<int64_t>(probs.size()) != target.num_classes)
        throw ShapeError("smoothed_ce_grad: axis 'K' mismatch");
    std::vector<double> g(probs.size());
    for (int64_t i = 0; i < target.num_classes; ++i) {
        const double p = static_cast<double>(probs[static_cast<size_t>(i)]);
        if (!(p > 0)) throw ValueError("smoothed_ce_grad: probabilities must be strictly positive");
        const double y = i == target.true_class ? target.weight_true() : target.weight_other();
        g[static_cast<size_t>(i)] = -y / p;
    }
    return g;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> p(z.size());
    double sum = 0;
    for (size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - m);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

// --- target assignment ----------------------------------------------------------------

struct GtBox {
    Box box;
    int class_id = 0;
};

struct Assignment {
    int scale = 0;   // 0,1,2 for strides 8,16,32
    int anchor = 0;  // anchor index within the scale
    int64_t gx = 0, gy = 0;
    size_t gt_index = 0;
};

inline constexpr double kAnchorRatioGate = 4.0;

// A ground truth matches an anchor at its center cell when the larger of the
// width and height ratios (either way around) is under the gate.
inline std::vector<Assignment> assign_targets(const std::vector<GtBox>& gts,
                                              const AnchorSet& anchors, int64_t img_h,
                                              int64_t img_w) {
    std::vector<Assignment> out;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        const Box& b = gts[gi].box;
        if (b.x1() < 0 || b.y1() < 0 || b.x2() > static_cast<double>(img_w) ||
            b.y2() > static_cast<double>(img_h))
            throw ValueError("assign_targets: gt box outside image bounds");
        for (int s = 0; s < 3; ++s) {
            const int64_t stride = anchors.strides[static_cast<size_t>(s)];
            const int64_t gw = img_w / stride, gh = img_h / stride;
            const int64_t gx = std::min(gw - 1, static_cast<int64_t>(b.cx / static_cast<double>(stride)));
            const int64_t gy = std::min(gh - 1, static_cast<int64_t>(b.cy / static_cast<double>(stride)));
            for (int a = 0; a < AnchorSet::kNumAnchors; ++a) {
                const auto& an = anchors.anchors[static_cast<size_t>(s)][static_cast<size_t>(a)];
                const double rw = std::max(b.w / an[0], an[0] / b.w);
                const double rh = std::max(b.h / an[1], an[1] / b.h);
                if (std::max(rw, rh) < kAnchorRatioGate)
                    out.push_back(Assignment{s, a, gx, gy, gi});
            }
        }
    }
    return out;
}

// One JSON record per detection, stable field order, byte-stable formatting.
inline void write_detection_jsonl(std::ostream& os, const std::string& image_id,
                                  const Detection& d) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"image_id\":\"%s\",\"class\":%d,\"score\":%.6f,"
                  "\"box\":{\"cx\":%.3f,\"cy\":%.3f,\"w\":%.3f,\"h\":%.3f}}\n",
                  image_id.c_str(), d.class_id, d.score, d.box.cx, d.box.cy, d.box.w, d.box.h);
    os << buf;
}

}  // namespace yoga
