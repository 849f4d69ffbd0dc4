#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "yoga/blocks.hpp"
#include "yoga/detect.hpp"
#include "yoga/kernels.hpp"
#include "yoga/rng.hpp"
#include "yoga/tensor.hpp"

namespace yoga {

// --- scaling rule ---------------------------------------------------------------

struct ScaleProfile {
    std::string name;
    double depth_factor = 1.0;
    double width_factor = 1.0;

    static ScaleProfile nano() { return {"n", 0.50, 0.33}; }
    static ScaleProfile small() { return {"s", 0.57, 0.68}; }
    static ScaleProfile medium() { return {"m", 1.00, 1.20}; }
    static ScaleProfile large() { return {"l", 1.50, 1.41}; }
    // desk-scale profile for gradient audits and toy training
    static ScaleProfile micro() { return {"micro", 0.10, 0.125}; }

    static ScaleProfile by_name(const std::string& n) {
        for (const ScaleProfile& p : {nano(), small(), medium(), large(), micro()})
            if (p.name == n) return p;
        throw ValueError("unknown profile '" + n + "' (expected n|s|m|l|micro)");
    }
    void validate() const {
        if (depth_factor <= 0 || width_factor <= 0)
            throw ValueError("ScaleProfile: factors must be strictly positive");
    }
};

// ceil(base*factor) to the next multiple of 8, never below 8; the small
// backward nudge keeps exact products (e.g. factor 1.0) from rounding up.
inline int64_t scale_width(int64_t base_width, double width_factor) {
    if (base_width <= 0) throw ValueError("scale_width: base width must be positive");
    if (width_factor <= 0) throw ValueError("scale_width: factor must be positive");
    if (base_width % 8 != 0)
        throw ValueError("scale_width: base width " + std::to_string(base_width) +
                         " is not a multiple of 8");
    const double scaled = static_cast<double>(base_width) * width_factor / 8.0;
    const int64_t r = static_cast<int64_t>(std::ceil(scaled - 1e-9)) * 8;
    return std::max<int64_t>(8, r);
}

inline int64_t scale_depth(int64_t base_repeats, double depth_factor) {
    if (base_repeats < 1) throw ValueError("scale_depth: base repeats must be >= 1");
    const double scaled = static_cast<double>(base_repeats) * depth_factor;
    return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(scaled - 1e-9)));
}

// --- model config (structured text document) --------------------------------------

struct NodeSpec {
    std::string kind;
    std::vector<int> from{-1};
    int64_t repeats = 1;
    int64_t out = 0;     // base output channels (scaled by width factor)
    int64_t k = 1;       // kernel
    int64_t stride = 1;
    int64_t pad = -1;    // -1: same padding (k/2)
};

struct ModelConfig {
    int schema_version = 1;
    std::string name = "yoga";
    std::array<std::array<std::array<double, 2>, 3>, 3> anchors{};
    std::vector<NodeSpec> nodes;

    static ModelConfig yoga_default();
    static ModelConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

inline constexpr const char* kDefaultConfigJson = R"JSON({
  "schema_version": 1,
  "name": "yoga",
  "anchors": [
    [[10, 13], [16, 30], [33, 23]],
    [[30, 61], [62, 45], [59, 119]],
    [[116, 90], [156, 198], [373, 326]]
  ],
  "nodes": [
    {"kind": "ConvBlock", "from": [-1], "out": 40,  "k": 6, "stride": 2, "pad": 2},
    {"kind": "ConvBlock", "from": [-1], "out": 80,  "k": 3, "stride": 2},
    {"kind": "CSPGhost",  "from": [-1], "out": 80,  "repeats": 3},
    {"kind": "ConvBlock", "from": [-1], "out": 160, "k": 3, "stride": 2},
    {"kind": "CSPGhost",  "from": [-1], "out": 160, "repeats": 6},
    {"kind": "ConvBlock", "from": [-1], "out": 320, "k": 3, "stride": 2},
    {"kind": "CSPGhost",  "from": [-1], "out": 320, "repeats": 9},
    {"kind": "ConvBlock", "from": [-1], "out": 640, "k": 3, "stride": 2},
    {"kind": "CSPGhost",  "from": [-1], "out": 640, "repeats": 3},
    {"kind": "SPP",       "from": [-1], "out": 640},
    {"kind": "ConvBlock", "from": [-1], "out": 320, "k": 1, "stride": 1},
    {"kind": "Upsample",  "from": [-1]},
    {"kind": "AFF",       "from": [6, 11]},
    {"kind": "CSPGhost",  "from": [-1], "out": 320, "repeats": 3},
    {"kind": "ConvBlock", "from": [-1], "out": 160, "k": 1, "stride": 1},
    {"kind": "Upsample",  "from": [-1]},
    {"kind": "AFF",       "from": [4, 15]},
    {"kind": "CSPGhost",  "from": [-1], "out": 160, "repeats": 3},
    {"kind": "ConvBlock", "from": [-1], "out": 160, "k": 3, "stride": 2},
    {"kind": "Concat",    "from": [18, 14]},
    {"kind": "CSPGhost",  "from": [-1], "out": 320, "repeats": 3},
    {"kind": "ConvBlock", "from": [-1], "out": 320, "k": 3, "stride": 2},
    {"kind": "Concat",    "from": [21, 10]},
    {"kind": "CSPGhost",  "from": [-1], "out": 640, "repeats": 3},
    {"kind": "Detect",    "from": [17, 20, 23]}
  ]
})JSON";

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != 1)
        throw LoadError("model config: unsupported schema_version " +
                        std::to_string(c.schema_version));
    c.name = j.at("name").get<std::string>();
    const auto& ja = j.at("anchors");
    if (ja.size() != 3) throw LoadError("model config: need 3 anchor scales");
    for (size_t s = 0; s < 3; ++s)
        for (size_t a = 0; a < 3; ++a) {
            c.anchors[s][a][0] = ja.at(s).at(a).at(0).get<double>();
            c.anchors[s][a][1] = ja.at(s).at(a).at(1).get<double>();
        }
    for (const auto& jn : j.at("nodes")) {
        NodeSpec n;
        n.kind = jn.at("kind").get<std::string>();
        if (jn.contains("from")) n.from = jn.at("from").get<std::vector<int>>();
        if (jn.contains("repeats")) n.repeats = jn.at("repeats").get<int64_t>();
        if (jn.contains("out")) n.out = jn.at("out").get<int64_t>();
        if (jn.contains("k")) n.k = jn.at("k").get<int64_t>();
        if (jn.contains("stride")) n.stride = jn.at("stride").get<int64_t>();
        if (jn.contains("pad")) n.pad = jn.at("pad").get<int64_t>();
        c.nodes.push_back(n);
    }
    return c;
}

inline nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["name"] = name;
    nlohmann::json ja = nlohmann::json::array();
    for (size_t s = 0; s < 3; ++s) {
        nlohmann::json js = nlohmann::json::array();
        for (size_t a = 0; a < 3; ++a) js.push_back({anchors[s][a][0], anchors[s][a][1]});
        ja.push_back(js);
    }
    j["anchors"] = ja;
    j["nodes"] = nlohmann::json::array();
    for (const NodeSpec& n : nodes) {
        nlohmann::json jn;
        jn["kind"] = n.kind;
        jn["from"] = n.from;
        if (n.repeats != 1) jn["repeats"] = n.repeats;
        if (n.out) jn["out"] = n.out;
        if (n.k != 1) jn["k"] = n.k;
        if (n.stride != 1) jn["stride"] = n.stride;
        if (n.pad != -1) jn["pad"] = n.pad;
        j["nodes"].push_back(jn);
    }
    return j;
}

inline ModelConfig ModelConfig::yoga_default() {
    return from_json(nlohmann::json::parse(kDefaultConfigJson));
}

// --- the assembled model -----------------------------------------------------------

struct LayerInfo {
    int index = 0;
    std::string kind;
    std::vector<int> from;
    Shape out_shape;
    int64_t params = 0;
    uint64_t flops = 0;
    int64_t repeats = 1;
    // ghost filter economy vs an equivalent standard convolution (1.0 = none)
    double ghost_ratio = 1.0;
};

template <typename T>
class ModelGraph {
public:
    struct Node {
        std::string kind;
        std::vector<int> from;
        std::unique_ptr<Block<T>> block;
        int64_t out_ch = 0;
        int64_t stride = 1;  // cumulative input stride of the output map
        int64_t repeats = 1;
    };

    ScaleProfile profile;
    int64_t num_classes = 0;
    AnchorSet anchors;
    std::string config_name;
    std::vector<Node> nodes;
    int detect_index = -1;

    const std::vector<int>& detect_sources() const { return nodes[detect_index].from; }

    template <typename Fn>
    void visit_params(const Fn& fn) {
        for (size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i].block) continue;
            const std::string prefix = "n" + std::to_string(i) + ".";
            nodes[i].block->visit_params(
                [&](const std::string& n, Tensor<T>& t) { fn(prefix + n, t); });
        }
    }
    template <typename Fn>
    void visit_state(const Fn& fn) {
        for (size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i].block) continue;
            const std::string prefix = "n" + std::to_string(i) + ".";
            nodes[i].block->visit_state(
                [&](const std::string& n, Tensor<T>& t) { fn(prefix + n, t); });
        }
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

    // Runs the whole graph; returns the three raw head tensors. Activations
    // stay cached for a following backward().
    std::vector<Tensor<T>> forward(const Tensor<T>& input, Mode mode, FlopCounter* fc = nullptr) {
        if (input.shape.h % 32 != 0 || input.shape.w % 32 != 0)
            throw ShapeError("forward: input " + input.shape.str() + " not divisible by 32");
        check_axis(input.shape.c, 3, "c", "forward");
        acts_.assign(nodes.size(), {});
        input_ = input;
        for (size_t i = 0; i < nodes.size(); ++i) {
            std::vector<const Tensor<T>*> ins;
            for (int f : nodes[i].from) ins.push_back(source_ptr(static_cast<int>(i), f));
            acts_[i] = nodes[i].block->forward(ins, mode, fc);
        }
        return acts_[static_cast<size_t>(detect_index)];
    }

    // Reverse topological traversal; head_upstreams are gradients w.r.t. the
    // three raw head outputs. Parameter grads accumulate in the blocks.
    void backward(const std::vector<Tensor<T>>& head_upstreams) {
        if (acts_.empty() || acts_[static_cast<size_t>(detect_index)].empty())
            throw UsageError("ModelGraph: backward called before forward");
        std::vector<Tensor<T>> gbuf(nodes.size());
        for (size_t i = 0; i < nodes.size(); ++i)
            if (!acts_[i].empty()) gbuf[i] = Tensor<T>(acts_[i][0].shape);
        auto scatter = [&](int node_idx, int from, const Tensor<T>& g) {
            const int src = from == -1 ? node_idx - 1 : from;
            if (src < 0) return;  // gradient w.r.t. the image is discarded
            auto& dst = gbuf[static_cast<size_t>(src)];
            for (size_t k = 0; k < dst.data.size(); ++k) dst.data[k] += g.data[k];
        };
        for (int i = detect_index; i >= 0; --i) {
            std::vector<const Tensor<T>*> ups;
            if (i == detect_index) {
                if (head_upstreams.size() != acts_[static_cast<size_t>(i)].size())
                    throw ShapeError("backward: expected " +
                                     std::to_string(acts_[static_cast<size_t>(i)].size()) +
                                     " head upstreams");
                for (const auto& u : head_upstreams) ups.push_back(&u);
            } else {
                ups.push_back(&gbuf[static_cast<size_t>(i)]);
            }
            auto input_grads = nodes[static_cast<size_t>(i)].block->backward(ups);
            for (size_t k = 0; k < input_grads.size(); ++k)
                scatter(i, nodes[static_cast<size_t>(i)].from[k], input_grads[k]);
        }
    }

    // Shape propagation without execution (batch 1).
    std::vector<std::vector<Shape>> propagate_shapes(int64_t img_h, int64_t img_w) const {
        std::vector<std::vector<Shape>> shapes(nodes.size());
        Shape in{1, 3, img_h, img_w};
        for (size_t i = 0; i < nodes.size(); ++i) {
            std::vector<Shape> ins;
            for (int f : nodes[i].from)
                ins.push_back(f == -1 ? (i == 0 ? in : shapes[i - 1][0])
                                      : shapes[static_cast<size_t>(f)][0]);
            shapes[i] = nodes[i].block->infer_shapes(ins);
        }
        return shapes;
    }

    uint64_t flop_count(int64_t img_h, int64_t img_w) const {
        auto shapes = propagate_shapes(img_h, img_w);
        uint64_t total = 0;
        Shape in{1, 3, img_h, img_w};
        for (size_t i = 0; i < nodes.size(); ++i) {
            std::vector<Shape> ins;
            for (int f : nodes[i].from)
                ins.push_back(f == -1 ? (i == 0 ? in : shapes[i - 1][0])
                                      : shapes[static_cast<size_t>(f)][0]);
            total += nodes[i].block->count_flops(ins);
        }
        return total;
    }

    std::vector<LayerInfo> describe(int64_t img_h, int64_t img_w) {
        auto shapes = propagate_shapes(img_h, img_w);
        std::vector<LayerInfo> out;
        Shape in{1, 3, img_h, img_w};
        for (size_t i = 0; i < nodes.size(); ++i) {
            LayerInfo li;
            li.index = static_cast<int>(i);
            li.kind = nodes[i].kind;
            li.from = nodes[i].from;
            li.out_shape = shapes[i][0];
            li.params = nodes[i].block->param_count();
            li.repeats = nodes[i].repeats;
            std::vector<Shape> ins;
            for (int f : nodes[i].from)
                ins.push_back(f == -1 ? (i == 0 ? in : shapes[i - 1][0])
                                      : shapes[static_cast<size_t>(f)][0]);
            li.flops = nodes[i].block->count_flops(ins);
            li.ghost_ratio = ghost_ratio_of(static_cast<int>(i));
            out.push_back(li);
        }
        return out;
    }

    // Filter-parameter economy of all ghost convolutions inside node i,
    // against standard convolutions of the same in/out/kernel signature.
    double ghost_ratio_of(int) const;

    uint64_t config_hash() const {
        std::string s = config_name + "|v1|" + profile.name + "|";
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6g,%.6g|C=%lld|", profile.depth_factor,
                      profile.width_factor, static_cast<long long>(num_classes));
        s += buf;
        for (const Node& n : nodes) {
            s += n.kind + "(";
            for (int f : n.from) s += std::to_string(f) + ",";
            s += "c" + std::to_string(n.out_ch) + ",r" + std::to_string(n.repeats) + ");";
        }
        // FNV-1a 64
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    const std::vector<std::vector<Tensor<T>>>& activations() const { return acts_; }
    const Tensor<T>& cached_input() const { return input_; }

private:
    const Tensor<T>* source_ptr(int i, int f) const {
        if (f == -1) return i == 0 ? &input_ : &acts_[static_cast<size_t>(i - 1)][0];
        return &acts_[static_cast<size_t>(f)][0];
    }
    std::vector<std::vector<Tensor<T>>> acts_;
    Tensor<T> input_;
};

// --- builder ----------------------------------------------------------------------

template <typename T>
ModelGraph<T> build_yoga(const ScaleProfile& profile, int64_t num_classes, uint64_t seed,
                         const ModelConfig& config = ModelConfig::yoga_default()) {
    profile.validate();
    if (num_classes < 1) throw ValueError("build_yoga: need at least one class");
    Rng rng(seed);
    ModelGraph<T> g;
    g.profile = profile;
    g.num_classes = num_classes;
    g.config_name = config.name;
    g.anchors.anchors = config.anchors;
    g.anchors.validate();

    std::vector<int64_t> ch;      // resolved output channels per node
    std::vector<int64_t> stride;  // cumulative stride per node
    auto ch_of = [&](int i, int f) -> int64_t {
        if (f == -1) return i == 0 ? 3 : ch[static_cast<size_t>(i - 1)];
        return ch[static_cast<size_t>(f)];
    };
    auto stride_of = [&](int i, int f) -> int64_t {
        if (f == -1) return i == 0 ? 1 : stride[static_cast<size_t>(i - 1)];
        return stride[static_cast<size_t>(f)];
    };

    for (size_t i = 0; i < config.nodes.size(); ++i) {
        const NodeSpec& spec = config.nodes[i];
        for (int f : spec.from)
            if (f != -1 && (f < 0 || f >= static_cast<int>(i)))
                throw ValueError("build_yoga: node " + std::to_string(i) +
                                 " references non-earlier node " + std::to_string(f));
        typename ModelGraph<T>::Node node;
        node.kind = spec.kind;
        node.from = spec.from;
        const int64_t in_ch = ch_of(static_cast<int>(i), spec.from.at(0));
        const int64_t in_stride = stride_of(static_cast<int>(i), spec.from.at(0));

        if (spec.kind == "ConvBlock") {
            const int64_t out = scale_width(spec.out, profile.width_factor);
            node.block = std::make_unique<ConvBlock<T>>(in_ch, out, spec.k, spec.stride, rng,
                                                        Act::Silu, true, false, 1, spec.pad);
            node.out_ch = out;
            node.stride = in_stride * spec.stride;
        } else if (spec.kind == "GhostConv") {
            const int64_t out = scale_width(spec.out, profile.width_factor);
            node.block = std::make_unique<GhostConv<T>>(in_ch, out, spec.k, spec.stride, rng);
            node.out_ch = out;
            node.stride = in_stride * spec.stride;
        } else if (spec.kind == "CSPGhost") {
            const int64_t out = scale_width(spec.out, profile.width_factor);
            const int64_t n = spec.repeats > 1 ? scale_depth(spec.repeats, profile.depth_factor)
                                               : spec.repeats;
            node.block = std::make_unique<CSPGhost<T>>(in_ch, out, n, rng);
            node.out_ch = out;
            node.stride = in_stride;
            node.repeats = n;
        } else if (spec.kind == "SPP") {
            const int64_t out = scale_width(spec.out, profile.width_factor);
            node.block = std::make_unique<SPP<T>>(in_ch, out, rng);
            node.out_ch = out;
            node.stride = in_stride;
        } else if (spec.kind == "Upsample") {
            node.block = std::make_unique<Upsample<T>>();
            node.out_ch = in_ch;
            node.stride = in_stride / 2;
        } else if (spec.kind == "Concat") {
            node.block = std::make_unique<ConcatBlock<T>>(spec.from.size());
            int64_t c = 0;
            for (int f : spec.from) c += ch_of(static_cast<int>(i), f);
            node.out_ch = c;
            node.stride = in_stride;
        } else if (spec.kind == "AFF") {
            if (spec.from.size() != 2) throw ValueError("build_yoga: AFF needs exactly 2 sources");
            const int64_t c0 = ch_of(static_cast<int>(i), spec.from[0]);
            const int64_t c1 = ch_of(static_cast<int>(i), spec.from[1]);
            if (c0 != c1)
                throw ShapeError("build_yoga: AFF sources disagree on channels: " +
                                 std::to_string(c0) + " vs " + std::to_string(c1));
            if (stride_of(static_cast<int>(i), spec.from[0]) !=
                stride_of(static_cast<int>(i), spec.from[1]))
                throw ShapeError("build_yoga: AFF sources disagree on stride");
            node.block = std::make_unique<AFF<T>>(c0, rng);
            node.out_ch = c0;
            node.stride = in_stride;
        } else if (spec.kind == "Detect") {
            if (spec.from.size() != 3) throw ValueError("build_yoga: Detect needs 3 sources");
            std::vector<int64_t> cs;
            for (size_t k = 0; k < 3; ++k) {
                const int f = spec.from[k];
                cs.push_back(ch_of(static_cast<int>(i), f));
                const int64_t want = 8ll << k;
                if (stride_of(static_cast<int>(i), f) != want)
                    throw ShapeError("build_yoga: detect source " + std::to_string(f) +
                                     " has stride " +
                                     std::to_string(stride_of(static_cast<int>(i), f)) +
                                     ", expected " + std::to_string(want));
            }
            node.block =
                std::make_unique<DetectHead<T>>(cs, num_classes, AnchorSet::kNumAnchors, rng);
            node.out_ch = AnchorSet::kNumAnchors * (num_classes + 5);
            node.stride = in_stride;
            g.detect_index = static_cast<int>(i);
        } else {
            throw ValueError("build_yoga: unknown node kind '" + spec.kind + "'");
        }
        ch.push_back(node.out_ch);
        stride.push_back(node.stride);
        g.nodes.push_back(std::move(node));
    }
    if (g.detect_index < 0) throw ValueError("build_yoga: config has no Detect node");
    if (g.detect_index != static_cast<int>(g.nodes.size()) - 1)
        throw ValueError("build_yoga: Detect must be the final node");
    // every non-terminal node must feed something
    std::vector<bool> used(g.nodes.size(), false);
    for (size_t i = 0; i < g.nodes.size(); ++i)
        for (int f : g.nodes[i].from) {
            const int src = f == -1 ? static_cast<int>(i) - 1 : f;
            if (src >= 0) used[static_cast<size_t>(src)] = true;
        }
    for (size_t i = 0; i + 1 < g.nodes.size(); ++i)
        if (!used[i])
            throw ValueError("build_yoga: node " + std::to_string(i) + " is dead code");
    return g;
}

// Ghost filters vs the standard convolution of the same signature: the
// primary filters are exactly half of the standard bank, so the equivalent
// standard count is 2x the primary weight count.
template <typename T>
double ModelGraph<T>::ghost_ratio_of(int index) const {
    int64_t ghost = 0, standard = 0;
    nodes[static_cast<size_t>(index)].block->visit_params(
        [&](const std::string& n, Tensor<T>& t) {
            if (n.size() >= 14 && n.compare(n.size() - 14, 14, "primary.weight") == 0) {
                ghost += t.numel();
                standard += 2 * t.numel();
            } else if (n.size() >= 12 && n.compare(n.size() - 12, 12, "cheap.weight") == 0) {
                ghost += t.numel();
            }
        });
    if (standard == 0) return 1.0;
    return static_cast<double>(ghost) / static_cast<double>(standard);
}

}  // namespace yoga
