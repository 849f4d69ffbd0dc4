#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "yoga/detect.hpp"
#include "yoga/graph.hpp"
#include "yoga/rng.hpp"

namespace yoga {

// --- optimizer and schedule ----------------------------------------------------

struct LossWeights {
    double box = 0.05;
    double obj = 1.0;
    double cls = 0.5;
    std::array<double, 3> obj_balance{4.0, 1.0, 0.4};
};

// Box/class weights rebalanced for desk-scale runs: with only a few thousand
// optimizer steps the COCO-calibrated 0.05/0.5 leave box and class heads
// frozen relative to the dense objectness signal.
inline LossWeights toy_loss_weights() {
    LossWeights w;
    w.box = 5.0;
    w.cls = 5.0;
    return w;
}

struct TrainConfig {
    int64_t epochs = 100;
    int64_t batch_size = 8;
    double momentum = 0.937;
    double weight_decay = 0.005;
    double lr_warmup_start = 0.0033;
    double lr_peak = 0.01;
    double lr_final = 0.001;
    double warmup_epochs = 3.0;
    double label_epsilon = 0.1;  // 0 disables label smoothing
    uint64_t seed = 0;
    double holdout_fraction = 0.25;
    double target_ap50 = -1.0;  // stop early when reached (negative: run all epochs)
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
    LossWeights loss_weights = toy_loss_weights();

    void validate() const {
        if (epochs < 1) throw ValueError("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw ValueError("TrainConfig: batch size must be >= 1");
        if (lr_warmup_start <= 0 || lr_peak <= 0 || lr_final <= 0)
            throw ValueError("TrainConfig: learning rates must be positive");
        if (lr_final > lr_peak) throw ValueError("TrainConfig: final lr above peak");
    }
};

// Linear warmup to the peak over warmup_epochs, then cosine decay to the
// final value at the last epoch. Continuous, hits all three anchors exactly.
inline double lr_at(const TrainConfig& c, double epoch) {
    if (epoch < 0) epoch = 0;
    if (epoch < c.warmup_epochs)
        return c.lr_warmup_start + (c.lr_peak - c.lr_warmup_start) * (epoch / c.warmup_epochs);
    const double span = static_cast<double>(c.epochs) - c.warmup_epochs;
    if (span <= 0) return c.lr_peak;
    const double t = std::min(1.0, (epoch - c.warmup_epochs) / span);
    return c.lr_final + (c.lr_peak - c.lr_final) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// velocity = momentum*velocity + grad + wd*param; param -= lr*velocity
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(ModelGraph<T>& g, double lr) {
        std::vector<Tensor<T>*> params;
        g.visit_params([&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
        step_tensors(params, lr);
    }

    void step_tensors(const std::vector<Tensor<T>*>& params, double lr) {
        for (size_t idx = 0; idx < params.size(); ++idx) {
            Tensor<T>& t = *params[idx];
            if (velocity_.size() <= idx) velocity_.emplace_back(t.data.size(), T(0));
            auto& v = velocity_[idx];
            t.ensure_grad();
            for (size_t i = 0; i < t.data.size(); ++i) {
                v[i] = static_cast<T>(momentum_ * v[i] + t.grad[i] + weight_decay_ * t.data[i]);
                t.data[i] -= static_cast<T>(lr) * v[i];
            }
        }
    }

private:
    double momentum_, weight_decay_;
    std::vector<std::vector<T>> velocity_;
};

// --- detection loss -------------------------------------------------------------

struct LossBreakdown {
    double box = 0, obj = 0, cls = 0, total = 0;
    int64_t positives = 0;
};

namespace detail {
inline double bce_with_logits(double t, double y) {
    // stable: max(t,0) - t*y + log(1+exp(-|t|))
    return std::max(t, 0.0) - t * y + std::log1p(std::exp(-std::abs(t)));
}
}  // namespace detail

// Composite loss (CIoU box regression + BCE objectness + label-smoothed
// per-class BCE) with analytic gradients w.r.t. the raw head tensors.
template <typename T>
LossBreakdown detection_loss(const std::vector<Tensor<T>>& heads,
                             const std::vector<std::vector<GtBox>>& gts, const AnchorSet& anchors,
                             int64_t num_classes, int64_t img_h, int64_t img_w, double label_eps,
                             const LossWeights& w, std::vector<Tensor<T>>* head_grads) {
    const int64_t batch = heads.at(0).shape.n;
    const int64_t per_anchor = num_classes + 5;
    if (static_cast<int64_t>(gts.size()) != batch)
        throw ShapeError("detection_loss: axis 'batch' gt list size mismatch");
    if (head_grads) {
        head_grads->clear();
        for (const auto& h : heads) head_grads->push_back(Tensor<T>(h.shape));
    }

    // positives per image
    struct Pos {
        int64_t image;
        Assignment as;
    };
    std::vector<Pos> positives;
    for (int64_t b = 0; b < batch; ++b)
        for (const Assignment& as : assign_targets(gts[static_cast<size_t>(b)], anchors, img_h, img_w))
            positives.push_back({b, as});

    LossBreakdown out;
    out.positives = static_cast<int64_t>(positives.size());
    const double npos = std::max<double>(1.0, static_cast<double>(positives.size()));

    // objectness targets default to zero everywhere
    std::vector<std::map<int64_t, char>> is_pos(heads.size());
    for (const Pos& p : positives) {
        const auto& h = heads[static_cast<size_t>(p.as.scale)];
        const int64_t flat =
            ((p.image * 3 + p.as.anchor) * h.shape.h + p.as.gy) * h.shape.w + p.as.gx;
        is_pos[static_cast<size_t>(p.as.scale)][flat] = 1;
    }

    // box + class terms over positives
    for (const Pos& p : positives) {
        const size_t s = static_cast<size_t>(p.as.scale);
        const Tensor<T>& h = heads[s];
        const double stride = static_cast<double>(anchors.strides[s]);
        const auto& anchor = anchors.anchors[s][static_cast<size_t>(p.as.anchor)];
        const int64_t c0 = p.as.anchor * per_anchor;
        const GtBox& gt = gts[static_cast<size_t>(p.image)][p.as.gt_index];

        const double tx = h.at(p.image, c0 + 0, p.as.gy, p.as.gx);
        const double ty = h.at(p.image, c0 + 1, p.as.gy, p.as.gx);
        const double tw = h.at(p.image, c0 + 2, p.as.gy, p.as.gx);
        const double th = h.at(p.image, c0 + 3, p.as.gy, p.as.gx);
        const double sx = sigmoid_scalar(tx), sy = sigmoid_scalar(ty);
        const double sw = sigmoid_scalar(tw), sh = sigmoid_scalar(th);
        Box pred;
        pred.cx = (2 * sx - 0.5 + static_cast<double>(p.as.gx)) * stride;
        pred.cy = (2 * sy - 0.5 + static_cast<double>(p.as.gy)) * stride;
        pred.w = 4 * sw * sw * anchor[0];
        pred.h = 4 * sh * sh * anchor[1];
        auto cg = ciou_loss_grad(pred, gt.box);
        out.box += cg.loss / npos;
        if (head_grads) {
            auto& gh = (*head_grads)[s];
            const double scale = w.box / npos;
            gh.at(p.image, c0 + 0, p.as.gy, p.as.gx) +=
                static_cast<T>(scale * cg.d_pred[0] * 2 * sx * (1 - sx) * stride);
            gh.at(p.image, c0 + 1, p.as.gy, p.as.gx) +=
                static_cast<T>(scale * cg.d_pred[1] * 2 * sy * (1 - sy) * stride);
            gh.at(p.image, c0 + 2, p.as.gy, p.as.gx) +=
                static_cast<T>(scale * cg.d_pred[2] * 8 * sw * sw * (1 - sw) * anchor[0]);
            gh.at(p.image, c0 + 3, p.as.gy, p.as.gx) +=
                static_cast<T>(scale * cg.d_pred[3] * 8 * sh * sh * (1 - sh) * anchor[1]);
        }

        // label-smoothed class targets as per-class BCE
        const double eps = label_eps;
        const double y_true = 1.0 - static_cast<double>(num_classes - 1) * eps;
        for (int64_t k = 0; k < num_classes; ++k) {
            const double t = h.at(p.image, c0 + 5 + k, p.as.gy, p.as.gx);
            const double y = k == gt.class_id ? y_true : eps;
            out.cls += detail::bce_with_logits(t, y) / (npos * static_cast<double>(num_classes));
            if (head_grads)
                (*head_grads)[s].at(p.image, c0 + 5 + k, p.as.gy, p.as.gx) += static_cast<T>(
                    w.cls * (sigmoid_scalar(t) - y) / (npos * static_cast<double>(num_classes)));
        }
    }

    // objectness over every cell of every scale
    for (size_t s = 0; s < heads.size(); ++s) {
        const Tensor<T>& h = heads[s];
        const double n_elems = static_cast<double>(h.shape.n * 3 * h.shape.h * h.shape.w);
        double term = 0;
        for (int64_t b = 0; b < h.shape.n; ++b)
            for (int64_t a = 0; a < 3; ++a)
                for (int64_t gy = 0; gy < h.shape.h; ++gy)
                    for (int64_t gx = 0; gx < h.shape.w; ++gx) {
                        const int64_t flat = ((b * 3 + a) * h.shape.h + gy) * h.shape.w + gx;
                        const double y = is_pos[s].count(flat) ? 1.0 : 0.0;
                        const double t = h.at(b, a * per_anchor + 4, gy, gx);
                        term += detail::bce_with_logits(t, y) / n_elems;
                        if (head_grads)
                            (*head_grads)[s].at(b, a * per_anchor + 4, gy, gx) += static_cast<T>(
                                w.obj * w.obj_balance[s] * (sigmoid_scalar(t) - y) / n_elems);
                    }
        out.obj += w.obj_balance[s] * term;
    }

    out.total = w.box * out.box + w.obj * out.obj + w.cls * out.cls;
    return out;
}

// --- toy dataset -----------------------------------------------------------------

struct ToyImage {
    Tensor<float> pixels;  // (1, 3, s, s), values in [0,1]
    std::vector<GtBox> gts;
};

struct ToyDataset {
    int64_t image_size = 0;
    int64_t num_classes = 0;
    uint64_t seed = 0;
    std::vector<ToyImage> images;
};

inline constexpr std::array<std::array<double, 3>, 6> kToyPalette{{{0.95, 0.20, 0.15},
                                                                   {0.15, 0.90, 0.25},
                                                                   {0.20, 0.35, 0.95},
                                                                   {0.95, 0.90, 0.15},
                                                                   {0.90, 0.25, 0.90},
                                                                   {0.15, 0.90, 0.90}}};

// Synthetic detection scenes: 1-4 axis-aligned shapes (class = color+form) on
// a noise background, exact ground-truth boxes, deterministic per seed.
inline ToyDataset gen_toy_dataset(int64_t n_images, int64_t image_size, int64_t classes,
                                  uint64_t seed) {
    if (image_size % 32 != 0) throw ValueError("gen_toy_dataset: image size must be divisible by 32");
    if (classes < 1 || classes > static_cast<int64_t>(kToyPalette.size()))
        throw ValueError("gen_toy_dataset: classes must be in 1.." +
                         std::to_string(kToyPalette.size()));
    Rng rng(seed);
    ToyDataset ds;
    ds.image_size = image_size;
    ds.num_classes = classes;
    ds.seed = seed;
    const double smin = 0.18 * static_cast<double>(image_size);
    const double smax = 0.55 * static_cast<double>(image_size);
    for (int64_t i = 0; i < n_images; ++i) {
        ToyImage im;
        im.pixels = Tensor<float>(Shape{1, 3, image_size, image_size});
        for (auto& v : im.pixels.data) v = static_cast<float>(rng.uniform(0.0, 0.25));
        const int64_t n_obj = rng.uniform_int(1, 4);
        for (int64_t o = 0; o < n_obj; ++o) {
            const int cls = static_cast<int>(rng.uniform_int(0, classes - 1));
            Box b;
            for (int attempt = 0; attempt < 20; ++attempt) {
                b.w = rng.uniform(smin, smax);
                b.h = rng.uniform(smin, smax);
                b.cx = rng.uniform(b.w / 2, static_cast<double>(image_size) - b.w / 2);
                b.cy = rng.uniform(b.h / 2, static_cast<double>(image_size) - b.h / 2);
                bool ok = true;
                for (const GtBox& prev : im.gts)
                    if (box_iou(b, prev.box) > 0.15) ok = false;
                if (ok) break;
            }
            const auto& col = kToyPalette[static_cast<size_t>(cls)];
            const bool disc = cls % 2 == 1;  // odd classes are discs, even rectangles
            if (disc) {
                const double r = std::min(b.w, b.h) / 2;
                b.w = 2 * r;
                b.h = 2 * r;
            }
            for (int64_t y = 0; y < image_size; ++y)
                for (int64_t x = 0; x < image_size; ++x) {
                    const double px = static_cast<double>(x) + 0.5;
                    const double py = static_cast<double>(y) + 0.5;
                    bool inside;
                    if (disc) {
                        const double r = b.w / 2;
                        inside = (px - b.cx) * (px - b.cx) + (py - b.cy) * (py - b.cy) <= r * r;
                    } else {
                        inside = px >= b.x1() && px <= b.x2() && py >= b.y1() && py <= b.y2();
                    }
                    if (inside)
                        for (int64_t c = 0; c < 3; ++c)
                            im.pixels.at(0, c, y, x) = static_cast<float>(col[static_cast<size_t>(c)]);
                }
            im.gts.push_back({b, cls});
        }
        ds.images.push_back(std::move(im));
    }
    return ds;
}

// On-disk layout: images/img_#####.ppm (binary P6), labels/img_#####.txt with
// one `class cx cy w h` line per object, coordinates normalized to [0,1].
inline void save_toy_dataset(const ToyDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");
    for (size_t i = 0; i < ds.images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu", i);
        const auto& im = ds.images[i];
        std::ofstream ppm(fs::path(dir) / "images" / (std::string(name) + ".ppm"),
                          std::ios::binary);
        ppm << "P6\n" << ds.image_size << " " << ds.image_size << "\n255\n";
        for (int64_t y = 0; y < ds.image_size; ++y)
            for (int64_t x = 0; x < ds.image_size; ++x)
                for (int64_t c = 0; c < 3; ++c) {
                    const double v = im.pixels.at(0, c, y, x);
                    ppm.put(static_cast<char>(
                        std::clamp<int>(static_cast<int>(std::lround(v * 255.0)), 0, 255)));
                }
        std::ofstream lbl(fs::path(dir) / "labels" / (std::string(name) + ".txt"));
        const double s = static_cast<double>(ds.image_size);
        for (const GtBox& g : im.gts) {
            char line[128];
            std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f\n", g.class_id, g.box.cx / s,
                          g.box.cy / s, g.box.w / s, g.box.h / s);
            lbl << line;
        }
    }
    nlohmann::json manifest;
    manifest["image_size"] = ds.image_size;
    manifest["num_classes"] = ds.num_classes;
    manifest["seed"] = ds.seed;
    manifest["count"] = ds.images.size();
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

inline Tensor<float> load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("ppm: cannot open '" + path + "'");
    std::string magic;
    int64_t w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw LoadError("ppm: '" + path + "' is not a binary P6/255");
    is.get();  // single whitespace after header
    Tensor<float> t(Shape{1, 3, h, w});
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int64_t y = 0; y < h; ++y) {
        if (!is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size())))
            throw LoadError("ppm: truncated pixel data in '" + path + "'");
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                t.at(0, c, y, x) = static_cast<float>(row[static_cast<size_t>(x * 3 + c)]) / 255.0f;
    }
    return t;
}

inline ToyDataset load_toy_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw LoadError("dataset: missing manifest.json in '" + dir + "'");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    ToyDataset ds;
    ds.image_size = manifest.at("image_size").get<int64_t>();
    ds.num_classes = manifest.at("num_classes").get<int64_t>();
    ds.seed = manifest.value("seed", 0ull);
    const size_t count = manifest.at("count").get<size_t>();
    for (size_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu", i);
        ToyImage im;
        im.pixels = load_ppm((fs::path(dir) / "images" / (std::string(name) + ".ppm")).string());
        std::ifstream lbl(fs::path(dir) / "labels" / (std::string(name) + ".txt"));
        if (!lbl) throw LoadError("dataset: missing labels for " + std::string(name));
        double cx, cy, w, h;
        int cls;
        const double s = static_cast<double>(ds.image_size);
        while (lbl >> cls >> cx >> cy >> w >> h)
            im.gts.push_back({Box{cx * s, cy * s, w * s, h * s}, cls});
        ds.images.push_back(std::move(im));
    }
    return ds;
}

// --- AP evaluation ----------------------------------------------------------------

// 101-point interpolated average precision, averaged over classes present in
// the ground truth. Matching is greedy by score: each detection takes the
// unmatched same-class ground truth with the highest IoU above the threshold.
inline double eval_ap(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<GtBox>>& gts, double iou_threshold) {
    if (dets.size() != gts.size()) throw ShapeError("eval_ap: axis 'images' list size mismatch");
    std::vector<int> classes;
    for (const auto& img : gts)
        for (const auto& g : img)
            if (std::find(classes.begin(), classes.end(), g.class_id) == classes.end())
                classes.push_back(g.class_id);
    if (classes.empty()) return 0.0;
    std::sort(classes.begin(), classes.end());

    double ap_sum = 0;
    for (int cls : classes) {
        struct Rec {
            double score;
            size_t image;
            Box box;
        };
        std::vector<Rec> recs;
        int64_t npos = 0;
        for (size_t i = 0; i < gts.size(); ++i)
            for (const auto& g : gts[i])
                if (g.class_id == cls) ++npos;
        for (size_t i = 0; i < dets.size(); ++i)
            for (const auto& d : dets[i])
                if (d.class_id == cls) recs.push_back({d.score, i, d.box});
        std::stable_sort(recs.begin(), recs.end(),
                         [](const Rec& a, const Rec& b) { return a.score > b.score; });

        std::vector<std::vector<bool>> taken(gts.size());
        for (size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
        std::vector<double> precision, recall;
        int64_t tp = 0, fp = 0;
        for (const Rec& r : recs) {
            double best = 0;
            int64_t best_gt = -1;
            const auto& img_gts = gts[r.image];
            for (size_t gi = 0; gi < img_gts.size(); ++gi) {
                if (img_gts[gi].class_id != cls || taken[r.image][gi]) continue;
                const double iou = box_iou(r.box, img_gts[gi].box);
                if (iou >= iou_threshold && iou > best) {
                    best = iou;
                    best_gt = static_cast<int64_t>(gi);
                }
            }
            if (best_gt >= 0) {
                taken[r.image][static_cast<size_t>(best_gt)] = true;
                ++tp;
            } else {
                ++fp;
            }
            precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
            recall.push_back(npos > 0 ? static_cast<double>(tp) / static_cast<double>(npos) : 0.0);
        }
        // 101-point interpolation
        double ap = 0;
        for (int k = 0; k <= 100; ++k) {
            const double r = static_cast<double>(k) / 100.0;
            double pmax = 0;
            for (size_t i = 0; i < recall.size(); ++i)
                if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
            ap += pmax / 101.0;
        }
        ap_sum += ap;
    }
    return ap_sum / static_cast<double>(classes.size());
}

// COCO-style mean over IoU thresholds 0.5:0.05:0.95
inline double eval_ap_range(const std::vector<std::vector<Detection>>& dets,
                            const std::vector<std::vector<GtBox>>& gts) {
    double sum = 0;
    int n = 0;
    for (double thr = 0.5; thr < 0.951; thr += 0.05) {
        sum += eval_ap(dets, gts, thr);
        ++n;
    }
    return sum / n;
}

// --- training loop ----------------------------------------------------------------

struct EpochStats {
    int64_t epoch = 0;
    double lr = 0;
    double loss_total = 0, loss_box = 0, loss_obj = 0, loss_cls = 0;
    double ap50 = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double final_ap50 = 0;
    int64_t epochs_run = 0;
    bool reached_target = false;
    bool label_smoothing = false;
    int64_t epochs_to_target = -1;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["final_ap50"] = final_ap50;
        j["epochs_run"] = epochs_run;
        j["reached_target"] = reached_target;
        j["label_smoothing"] = label_smoothing;
        j["epochs_to_target"] = epochs_to_target;
        j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs)
            j["epochs"].push_back({{"epoch", e.epoch},
                                   {"lr", e.lr},
                                   {"loss", e.loss_total},
                                   {"loss_box", e.loss_box},
                                   {"loss_obj", e.loss_obj},
                                   {"loss_cls", e.loss_cls},
                                   {"ap50", e.ap50}});
        return j;
    }
};

template <typename T>
std::vector<Detection> run_inference(ModelGraph<T>& g, const Tensor<T>& image, double conf,
                                     double iou) {
    auto heads = g.forward(image, Mode::Infer);
    auto dets = decode(heads, g.anchors, g.num_classes, conf);
    return nms(dets, iou);
}

// Deterministic single-threaded training loop over the toy dataset. Aborts
// with a diagnostic naming the step when the loss diverges.
template <typename T>
TrainReport train_toy(ModelGraph<T>& g, const ToyDataset& ds, const TrainConfig& cfg,
                      std::ostream* log = nullptr) {
    cfg.validate();
    if (ds.images.empty()) throw ValueError("train_toy: dataset is empty");
    const int64_t n_hold = std::max<int64_t>(
        1, static_cast<int64_t>(cfg.holdout_fraction * static_cast<double>(ds.images.size())));
    const int64_t n_train = static_cast<int64_t>(ds.images.size()) - n_hold;
    if (n_train < 1) throw ValueError("train_toy: no training images after holdout split");

    SgdOptimizer<T> opt(cfg.momentum, cfg.weight_decay);
    const LossWeights& weights = cfg.loss_weights;
    TrainReport report;
    report.label_smoothing = cfg.label_epsilon > 0;
    Rng shuffle_rng(cfg.seed);
    int64_t step = 0;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n_train));
        for (int64_t i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
        for (int64_t i = n_train - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

        EpochStats es;
        es.epoch = epoch;
        int64_t batches = 0;
        for (int64_t b0 = 0; b0 < n_train; b0 += cfg.batch_size) {
            const int64_t bsz = std::min<int64_t>(cfg.batch_size, n_train - b0);
            Tensor<T> batch(Shape{bsz, 3, ds.image_size, ds.image_size});
            std::vector<std::vector<GtBox>> batch_gts;
            for (int64_t bi = 0; bi < bsz; ++bi) {
                const ToyImage& im = ds.images[static_cast<size_t>(order[static_cast<size_t>(b0 + bi)])];
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t y = 0; y < ds.image_size; ++y)
                        for (int64_t x = 0; x < ds.image_size; ++x)
                            batch.at(bi, c, y, x) = static_cast<T>(im.pixels.at(0, c, y, x));
                batch_gts.push_back(im.gts);
            }
            const double lr =
                lr_at(cfg, static_cast<double>(epoch) +
                               static_cast<double>(b0) / static_cast<double>(n_train));
            g.zero_grad();
            auto heads = g.forward(batch, Mode::Train);
            std::vector<Tensor<T>> head_grads;
            auto loss = detection_loss(heads, batch_gts, g.anchors, g.num_classes, ds.image_size,
                                       ds.image_size, cfg.label_epsilon, weights, &head_grads);
            if (!std::isfinite(loss.total))
                throw ValueError("train_toy: loss diverged (non-finite) at step " +
                                 std::to_string(step) + ", epoch " + std::to_string(epoch));
            g.backward(head_grads);
            opt.step(g, lr);
            es.loss_total += loss.total;
            es.loss_box += loss.box;
            es.loss_obj += loss.obj;
            es.loss_cls += loss.cls;
            es.lr = lr;
            ++batches;
            ++step;
        }
        es.loss_total /= static_cast<double>(batches);
        es.loss_box /= static_cast<double>(batches);
        es.loss_obj /= static_cast<double>(batches);
        es.loss_cls /= static_cast<double>(batches);

        // held-out AP@0.5
        std::vector<std::vector<Detection>> dets;
        std::vector<std::vector<GtBox>> hold_gts;
        for (int64_t i = n_train; i < static_cast<int64_t>(ds.images.size()); ++i) {
            const ToyImage& im = ds.images[static_cast<size_t>(i)];
            Tensor<T> x = im.pixels.template cast<T>();
            dets.push_back(run_inference(g, x, cfg.conf_threshold, cfg.nms_iou));
            hold_gts.push_back(im.gts);
        }
        es.ap50 = eval_ap(dets, hold_gts, 0.5);
        report.epochs.push_back(es);
        report.final_ap50 = es.ap50;
        report.epochs_run = epoch + 1;
        if (log)
            (*log) << "epoch " << epoch << " lr " << es.lr << " loss " << es.loss_total << " ap50 "
                   << es.ap50 << "\n";
        if (cfg.target_ap50 > 0 && es.ap50 >= cfg.target_ap50) {
            report.reached_target = true;
            report.epochs_to_target = epoch + 1;
            break;
        }
    }
    return report;
}

inline void write_training_curves_csv(const TrainReport& r, const std::string& path) {
    std::ofstream os(path);
    os << "epoch,lr,loss,loss_box,loss_obj,loss_cls,ap50\n";
    for (const auto& e : r.epochs) {
        char line[256];
        std::snprintf(line, sizeof(line), "%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                      static_cast<long long>(e.epoch), e.lr, e.loss_total, e.loss_box, e.loss_obj,
                      e.loss_cls, e.ap50);
        os << line;
    }
}

// flat SVG of the loss and AP curves; no interactivity, just an artifact
inline void write_training_curves_svg(const TrainReport& r, const std::string& path) {
    const int W = 640, H = 360, M = 40;
    std::ofstream os(path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!r.epochs.empty()) {
        double max_loss = 1e-9;
        for (const auto& e : r.epochs) max_loss = std::max(max_loss, e.loss_total);
        auto px = [&](size_t i) {
            return M + (W - 2 * M) * static_cast<double>(i) /
                           std::max<size_t>(1, r.epochs.size() - 1);
        };
        auto poly = [&](auto get, const char* color) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
            for (size_t i = 0; i < r.epochs.size(); ++i)
                os << px(i) << "," << (H - M - (H - 2 * M) * get(r.epochs[i])) << " ";
            os << "\"/>\n";
        };
        poly([&](const EpochStats& e) { return e.loss_total / max_loss; }, "green");
        poly([&](const EpochStats& e) { return e.ap50; }, "red");
        os << "<text x=\"" << M << "\" y=\"20\" font-size=\"12\">loss (green, scaled), AP@0.5 "
              "(red), epochs 0.."
           << r.epochs.back().epoch << "</text>\n";
    }
    os << "</svg>\n";
}

}  // namespace yoga
