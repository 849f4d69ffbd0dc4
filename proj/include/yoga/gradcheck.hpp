#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "yoga/blocks.hpp"
#include "yoga/graph.hpp"
#include "yoga/rng.hpp"

namespace yoga {

// Central finite-difference audit of block and model gradients. Runs in
// 64-bit; the production 32-bit path cannot meet the tolerances.

struct GradCheckReport {
    std::string subject;
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t checked = 0;
    bool passed(double tol) const { return max_rel_err < tol; }
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kPrimitiveTol = 1e-4;
inline constexpr double kCompositeTol = 1e-4;
inline constexpr double kModelTol = 1e-3;

namespace detail {

struct SlotGroup {
    std::string name;
    std::vector<double*> values;
    std::vector<double> analytic;
};

// Relative error is |an - fd| normalized by the infinity norm of the whole
// audited gradient, so parameters whose true gradient is structurally zero
// (e.g. a BN shift feeding straight into another train-mode BN) do not
// degenerate into a noise ratio.
inline GradCheckReport run_fd(const std::string& subject, std::vector<SlotGroup>& groups,
                              const std::function<double()>& eval, double step) {
    GradCheckReport rep;
    rep.subject = subject;
    std::vector<std::vector<double>> fds(groups.size());
    double den = 1e-10;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        auto& g = groups[gi];
        fds[gi].resize(g.values.size());
        for (size_t i = 0; i < g.values.size(); ++i) {
            double* slot = g.values[i];
            const double keep = *slot;
            *slot = keep + step;
            const double up = eval();
            *slot = keep - step;
            const double dn = eval();
            *slot = keep;
            fds[gi][i] = (up - dn) / (2 * step);
            ++rep.checked;
            den = std::max(den, std::max(std::abs(g.analytic[i]), std::abs(fds[gi][i])));
        }
    }
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        double num = 0;
        for (size_t i = 0; i < groups[gi].analytic.size(); ++i)
            num = std::max(num, std::abs(groups[gi].analytic[i] - fds[gi][i]));
        if (num / den > rep.max_rel_err) {
            rep.max_rel_err = num / den;
            rep.worst_param = groups[gi].name;
        }
    }
    return rep;
}

}  // namespace detail

// Audits one block: all parameters and all inputs against central differences
// of a fixed random weighted sum of the outputs. flip_sign corrupts the
// analytic gradient on purpose (exercises the failure-reporting path).
inline GradCheckReport audit_block(Block<double>& block, const std::vector<Shape>& in_shapes,
                                   uint64_t seed, Mode mode = Mode::Train,
                                   bool flip_sign = false) {
    Rng rng(seed);
    std::vector<Tensor<double>> inputs;
    for (const Shape& s : in_shapes) {
        Tensor<double> t(s);
        rng.fill_uniform(t, -1.0, 1.0);
        inputs.push_back(std::move(t));
    }
    std::vector<const Tensor<double>*> in_ptrs;
    for (auto& t : inputs) in_ptrs.push_back(&t);

    // snapshot BN running stats so train-mode FD evals do not drift state
    std::vector<std::pair<Tensor<double>*, std::vector<double>>> state_snapshot;
    block.visit_state([&](const std::string&, Tensor<double>& t) {
        state_snapshot.emplace_back(&t, t.data);
    });
    auto restore_state = [&]() {
        for (auto& [t, data] : state_snapshot) t->data = data;
    };

    auto out_shapes = block.infer_shapes(in_shapes);
    std::vector<Tensor<double>> upstream;
    for (const Shape& s : out_shapes) {
        Tensor<double> u(s);
        rng.fill_uniform(u, -1.0, 1.0);
        upstream.push_back(std::move(u));
    }
    std::vector<const Tensor<double>*> up_ptrs;
    for (auto& u : upstream) up_ptrs.push_back(&u);

    block.zero_grad();
    auto out = block.forward(in_ptrs, mode);
    auto in_grads = block.backward(up_ptrs);
    restore_state();

    std::vector<detail::SlotGroup> groups;
    block.visit_params([&](const std::string& n, Tensor<double>& t) {
        detail::SlotGroup g;
        g.name = n;
        for (auto& v : t.data) g.values.push_back(&v);
        g.analytic.assign(t.grad.begin(), t.grad.end());
        groups.push_back(std::move(g));
    });
    for (size_t i = 0; i < inputs.size(); ++i) {
        detail::SlotGroup g;
        g.name = "input" + std::to_string(i);
        for (auto& v : inputs[i].data) g.values.push_back(&v);
        g.analytic.assign(in_grads[i].data.begin(), in_grads[i].data.end());
        groups.push_back(std::move(g));
    }
    if (flip_sign)
        for (auto& g : groups)
            for (auto& a : g.analytic) a = -a;

    auto eval = [&]() {
        auto o = block.forward(in_ptrs, mode);
        restore_state();
        double s = 0;
        for (size_t i = 0; i < o.size(); ++i)
            for (size_t j = 0; j < o[i].data.size(); ++j) s += o[i].data[j] * upstream[i].data[j];
        return s;
    };
    return detail::run_fd(block.kind(), groups, eval, kFdStep);
}

// Audits a whole model. Perturbed evaluations only recompute the perturbed
// node and everything downstream of it, against cached activations.
inline GradCheckReport audit_graph(ModelGraph<double>& g, int64_t img, uint64_t seed,
                                   Mode mode = Mode::Train) {
    Rng rng(seed);
    Tensor<double> input(Shape{1, 3, img, img});
    rng.fill_uniform(input, 0.0, 1.0);

    std::vector<std::pair<Tensor<double>*, std::vector<double>>> state_snapshot;
    g.visit_state([&](const std::string&, Tensor<double>& t) {
        state_snapshot.emplace_back(&t, t.data);
    });
    auto restore_state = [&]() {
        for (auto& [t, data] : state_snapshot) t->data = data;
    };

    g.zero_grad();
    auto heads = g.forward(input, mode);
    restore_state();
    std::vector<Tensor<double>> upstream;
    for (auto& h : heads) {
        Tensor<double> u(h.shape);
        rng.fill_uniform(u, -1.0, 1.0);
        upstream.push_back(std::move(u));
    }
    g.backward(upstream);
    restore_state();

    // cache baseline activations per node
    const int n_nodes = static_cast<int>(g.nodes.size());
    std::vector<std::vector<Tensor<double>>> base = g.activations();
    const Tensor<double> base_input = input;

    // downstream consumers
    std::vector<std::vector<int>> consumers(g.nodes.size());
    for (int i = 0; i < n_nodes; ++i)
        for (int f : g.nodes[static_cast<size_t>(i)].from) {
            const int src = f == -1 ? i - 1 : f;
            if (src >= 0) consumers[static_cast<size_t>(src)].push_back(i);
        }

    auto eval_from = [&](int start) {
        // recompute nodes in [start, end] whose inputs changed
        std::vector<bool> dirty(g.nodes.size(), false);
        std::vector<std::vector<Tensor<double>>> scratch(g.nodes.size());
        dirty[static_cast<size_t>(start)] = true;
        for (int i = start; i < n_nodes; ++i) {
            bool need = dirty[static_cast<size_t>(i)];
            for (int f : g.nodes[static_cast<size_t>(i)].from) {
                const int src = f == -1 ? i - 1 : f;
                if (src >= 0 && dirty[static_cast<size_t>(src)]) need = true;
            }
            if (!need) continue;
            dirty[static_cast<size_t>(i)] = true;
            std::vector<const Tensor<double>*> ins;
            for (int f : g.nodes[static_cast<size_t>(i)].from) {
                const int src = f == -1 ? i - 1 : f;
                if (src < 0)
                    ins.push_back(&base_input);
                else
                    ins.push_back(dirty[static_cast<size_t>(src)] ? &scratch[static_cast<size_t>(src)][0]
                                                                  : &base[static_cast<size_t>(src)][0]);
            }
            scratch[static_cast<size_t>(i)] = g.nodes[static_cast<size_t>(i)].block->forward(ins, mode);
        }
        restore_state();
        const auto& outs = scratch[static_cast<size_t>(n_nodes - 1)];
        double s = 0;
        for (size_t i = 0; i < outs.size(); ++i)
            for (size_t j = 0; j < outs[i].data.size(); ++j)
                s += outs[i].data[j] * upstream[i].data[j];
        return s;
    };

    GradCheckReport rep;
    rep.subject = "model";
    for (int node = 0; node < n_nodes; ++node) {
        std::vector<detail::SlotGroup> groups;
        g.nodes[static_cast<size_t>(node)].block->visit_params(
            [&](const std::string& n, Tensor<double>& t) {
                detail::SlotGroup grp;
                grp.name = "n" + std::to_string(node) + "." + n;
                for (auto& v : t.data) grp.values.push_back(&v);
                grp.analytic.assign(t.grad.begin(), t.grad.end());
                groups.push_back(std::move(grp));
            });
        auto eval = [&]() { return eval_from(node); };
        GradCheckReport sub = detail::run_fd(rep.subject, groups, eval, kFdStep);
        rep.checked += sub.checked;
        if (sub.max_rel_err > rep.max_rel_err) {
            rep.max_rel_err = sub.max_rel_err;
            rep.worst_param = sub.worst_param;
        }
    }
    return rep;
}

// The standard battery of composite-block audits used by the CLI and the
// acceptance suite: one entry per architectural block type.
inline std::vector<GradCheckReport> audit_standard_blocks(uint64_t seed, Mode mode = Mode::Train,
                                                          const std::string& fault = "") {
    Rng rng(seed + 1000);
    std::vector<GradCheckReport> reports;
    auto run = [&](const std::string& label, std::unique_ptr<Block<double>> b,
                   std::vector<Shape> shapes) {
        auto rep = audit_block(*b, shapes, seed, mode, fault == label);
        rep.subject = label;
        reports.push_back(rep);
    };
    run("ConvBlock", std::make_unique<ConvBlock<double>>(3, 6, 3, 1, rng), {Shape{2, 3, 6, 6}});
    run("GhostConv", std::make_unique<GhostConv<double>>(4, 8, 3, 1, rng), {Shape{2, 4, 5, 5}});
    run("GhostBottleneck", std::make_unique<GhostBottleneck<double>>(4, 1, rng),
        {Shape{2, 4, 5, 5}});
    run("GhostBottleneckS2", std::make_unique<GhostBottleneck<double>>(4, 2, rng),
        {Shape{2, 4, 6, 6}});
    run("CSPGhost", std::make_unique<CSPGhost<double>>(4, 4, 2, rng), {Shape{2, 4, 5, 5}});
    run("SPP", std::make_unique<SPP<double>>(4, 4, rng), {Shape{2, 4, 7, 7}});
    run("MSCAM", std::make_unique<MSCAM<double>>(4, rng), {Shape{2, 4, 5, 5}});
    run("AFF", std::make_unique<AFF<double>>(4, rng), {Shape{2, 4, 5, 5}, Shape{2, 4, 5, 5}});
    run("Detect",
        std::make_unique<DetectHead<double>>(std::vector<int64_t>{4, 6, 8}, 2, 3, rng),
        {Shape{1, 4, 8, 8}, Shape{1, 6, 4, 4}, Shape{1, 8, 2, 2}});
    return reports;
}

}  // namespace yoga
