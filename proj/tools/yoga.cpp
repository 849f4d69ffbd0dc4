// Command-line surface: model description, gradient audit, toy training,
// inference and micro-benchmarks.
//
// Exit codes: 0 success, 1 validation failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "yoga/ga.hpp"
#include "yoga/gradcheck.hpp"
#include "yoga/graph.hpp"
#include "yoga/serialize.hpp"
#include "yoga/train.hpp"
#include "yoga/vc.hpp"

namespace {

using namespace yoga;

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

// published reference totals for the four scaled variants at 640x640
struct PaperRef {
    const char* profile;
    double params;
    double flops;
};
constexpr PaperRef kPaperRefs[] = {
    {"n", 1.9e6, 4.9e9}, {"s", 7.6e6, 16.6e9}, {"m", 16.3e6, 34.6e9}, {"l", 33.6e6, 71.8e9}};

std::string cpu_model() {
    std::ifstream is("/proc/cpuinfo");
    std::string line;
    while (std::getline(is, line))
        if (line.rfind("model name", 0) == 0) {
            const auto pos = line.find(':');
            if (pos != std::string::npos) return line.substr(pos + 2);
        }
    return "unknown cpu";
}

ModelConfig load_config(const std::string& path) {
    if (path.empty()) return ModelConfig::yoga_default();
    std::ifstream is(path);
    if (!is) throw LoadError("config: cannot open '" + path + "'");
    return ModelConfig::from_json(nlohmann::json::parse(is));
}

int cmd_describe(const std::string& profile, int64_t img, int64_t classes,
                 const std::string& format, const std::string& config_path) {
    auto prof = ScaleProfile::by_name(profile);
    auto g = build_yoga<float>(prof, classes, 0, load_config(config_path));
    auto layers = g.describe(img, img);
    const int64_t params = g.param_count();
    const uint64_t flops = g.flop_count(img, img);

    const PaperRef* ref = nullptr;
    for (const auto& r : kPaperRefs)
        if (profile == r.profile) ref = &r;

    if (format == "json") {
        nlohmann::json j;
        j["profile"] = profile;
        j["img_size"] = img;
        j["num_classes"] = classes;
        j["total_params"] = params;
        j["total_flops"] = flops;
        if (ref) {
            j["reference_params"] = ref->params;
            j["reference_flops"] = ref->flops;
            j["delta_params_pct"] = 100.0 * (static_cast<double>(params) - ref->params) / ref->params;
            j["delta_flops_pct"] = 100.0 * (static_cast<double>(flops) - ref->flops) / ref->flops;
        }
        j["layers"] = nlohmann::json::array();
        for (const auto& li : layers) {
            nlohmann::json jl;
            jl["index"] = li.index;
            jl["kind"] = li.kind;
            jl["from"] = li.from;
            jl["out_shape"] = {li.out_shape.n, li.out_shape.c, li.out_shape.h, li.out_shape.w};
            jl["repeats"] = li.repeats;
            jl["params"] = li.params;
            jl["flops"] = li.flops;
            jl["ghost_ratio"] = li.ghost_ratio;
            j["layers"].push_back(jl);
        }
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }

    std::printf("%-4s %-12s %-14s %7s %12s %14s %8s\n", "idx", "kind", "from", "reps", "params",
                "flops", "ghost");
    for (const auto& li : layers) {
        std::string from;
        for (int f : li.from) from += (from.empty() ? "" : ",") + std::to_string(f);
        std::printf("%-4d %-12s %-14s %7lld %12lld %14llu %8.3f\n", li.index, li.kind.c_str(),
                    from.c_str(), static_cast<long long>(li.repeats),
                    static_cast<long long>(li.params), static_cast<unsigned long long>(li.flops),
                    li.ghost_ratio);
    }
    std::printf("\nprofile %s @ %lldx%lld, %lld classes\n", profile.c_str(),
                static_cast<long long>(img), static_cast<long long>(img),
                static_cast<long long>(classes));
    std::printf("total params: %lld (%.3f M)\n", static_cast<long long>(params),
                static_cast<double>(params) / 1e6);
    std::printf("total flops:  %llu (%.3f B)\n", static_cast<unsigned long long>(flops),
                static_cast<double>(flops) / 1e9);
    if (ref) {
        std::printf("reference:    %.1f M / %.1f B  (delta %+.1f%% / %+.1f%%)\n", ref->params / 1e6,
                    ref->flops / 1e9, 100.0 * (static_cast<double>(params) - ref->params) / ref->params,
                    100.0 * (static_cast<double>(flops) - ref->flops) / ref->flops);
    }
    return kExitOk;
}

int cmd_check_grad(uint64_t seed, bool full, int64_t img, const std::string& fault,
                   const std::string& mode_name) {
    const Mode mode = mode_name == "infer" ? Mode::Infer : Mode::Train;
    bool ok = true;
    auto reports = audit_standard_blocks(seed, mode, fault);
    std::printf("%-18s %12s %10s  %s\n", "block", "worst_rel", "checked", "status");
    for (const auto& r : reports) {
        const bool pass = r.passed(kCompositeTol);
        ok = ok && pass;
        std::printf("%-18s %12.3e %10zu  %s%s\n", r.subject.c_str(), r.max_rel_err, r.checked,
                    pass ? "ok" : "FAIL", pass ? "" : (" at " + r.worst_param).c_str());
    }
    if (full) {
        auto g = build_yoga<double>(ScaleProfile::micro(), 1, seed);
        auto rep = audit_graph(g, img, seed, mode);
        const bool pass = rep.passed(kModelTol);
        ok = ok && pass;
        std::printf("%-18s %12.3e %10zu  %s%s\n", "micro-yoga", rep.max_rel_err, rep.checked,
                    pass ? "ok" : "FAIL", pass ? "" : (" at " + rep.worst_param).c_str());
    }
    if (!ok) {
        std::cerr << "gradient audit failed\n";
        return kExitFail;
    }
    return kExitOk;
}

int cmd_gen_data(const std::string& out, int64_t n, int64_t img, int64_t classes, uint64_t seed) {
    auto ds = gen_toy_dataset(n, img, classes, seed);
    save_toy_dataset(ds, out);
    std::cerr << "wrote " << n << " images to " << out << "\n";
    return kExitOk;
}

int cmd_train_toy(const std::string& data_dir, const std::string& profile, int64_t epochs,
                  int64_t batch, uint64_t seed, bool label_smoothing, double target_ap,
                  const std::string& report_path, const std::string& weights_path,
                  const std::string& curves_prefix) {
    auto ds = load_toy_dataset(data_dir);
    auto cfgm = ModelConfig::yoga_default();
    cfgm.anchors = AnchorSet::toy64().anchors;
    auto g = build_yoga<float>(ScaleProfile::by_name(profile), ds.num_classes, seed, cfgm);
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = seed;
    cfg.label_epsilon = label_smoothing ? 0.1 : 0.0;
    cfg.target_ap50 = target_ap;
    cfg.conf_threshold = 0.1;
    auto report = train_toy(g, ds, cfg, &std::cerr);
    std::cout << report.to_json().dump(2) << "\n";
    if (!report_path.empty()) {
        std::ofstream os(report_path);
        os << report.to_json().dump(2) << "\n";
    }
    if (!weights_path.empty()) save_weights(g, weights_path);
    if (!curves_prefix.empty()) {
        write_training_curves_csv(report, curves_prefix + ".csv");
        write_training_curves_svg(report, curves_prefix + ".svg");
    }
    return kExitOk;
}

int cmd_infer(const std::string& weights, const std::string& profile, int64_t classes,
              const std::vector<std::string>& images, double conf, double iou,
              const std::string& out_path, bool toy_anchors) {
    auto cfgm = ModelConfig::yoga_default();
    if (toy_anchors) cfgm.anchors = AnchorSet::toy64().anchors;
    auto g = build_yoga<float>(ScaleProfile::by_name(profile), classes, 0, cfgm);
    load_weights(g, weights);
    std::ofstream out;
    std::ostream* os = &std::cout;
    if (!out_path.empty()) {
        out.open(out_path);
        os = &out;
    }
    for (const auto& path : images) {
        Tensor<float> img = load_ppm(path);
        auto dets = run_inference(g, img, conf, iou);
        const std::string id = std::filesystem::path(path).stem().string();
        for (const auto& d : dets) write_detection_jsonl(*os, id, d);
    }
    return kExitOk;
}

int cmd_bench(const std::string& profile, int64_t img, int64_t runs, int threads,
              uint64_t seed) {
    set_worker_threads(threads);
    auto g = build_yoga<float>(ScaleProfile::by_name(profile), 80, seed);
    Rng rng(seed);
    Tensor<float> x(Shape{1, 3, img, img});
    rng.fill_uniform(x, 0, 1);
    g.forward(x, Mode::Infer);  // warmup, excluded
    std::vector<double> times;
    for (int64_t i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        g.forward(x, Mode::Infer);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    double mean = 0;
    for (double t : times) mean += t;
    mean /= static_cast<double>(times.size());
    const double p50 = times[times.size() / 2];
    const double p95 = times[static_cast<size_t>(0.95 * static_cast<double>(times.size() - 1))];
    const uint64_t flops = g.flop_count(img, img);
    nlohmann::json j;
    j["profile"] = profile;
    j["img_size"] = img;
    j["runs"] = runs;
    j["threads"] = threads;
    j["hardware"] = cpu_model();
    j["mean_s"] = mean;
    j["p50_s"] = p50;
    j["p95_s"] = p95;
    j["flops"] = flops;
    j["gflops_per_s"] = static_cast<double>(flops) / mean / 1e9;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"YOGA object-detection library tool"};
    app.require_subcommand(1);

    std::string profile = "n", format = "table", config_path;
    int64_t img = 640, classes = 80;
    uint64_t seed = 0;

    auto* describe = app.add_subcommand("describe", "per-layer parameter/FLOP report");
    const auto profile_check = CLI::IsMember({"n", "s", "m", "l", "micro"});
    describe->add_option("--profile", profile, "n|s|m|l|micro")
        ->check(profile_check)
        ->capture_default_str();
    describe->add_option("--img-size", img)->capture_default_str();
    describe->add_option("--classes", classes)->capture_default_str();
    describe->add_option("--format", format, "table|json")
        ->check(CLI::IsMember({"table", "json"}))
        ->capture_default_str();
    describe->add_option("--config", config_path, "model config json (default: built-in)");

    bool full = false;
    std::string fault, mode_name = "train";
    int64_t cg_img = 64;
    auto* check = app.add_subcommand("check-grad", "finite-difference gradient audit");
    check->add_option("--seed", seed)->capture_default_str();
    check->add_option("--img", cg_img, "input size for the full-model audit")->capture_default_str();
    check->add_flag("--full", full, "also audit the whole micro model (slow)");
    check->add_option("--mode", mode_name, "train|infer")->capture_default_str();
    check->add_option("--inject-fault", fault, "flip the analytic gradient sign of one block")
        ->group("");

    std::string out_dir = "toy-data";
    int64_t n_images = 200, toy_img = 64, toy_classes = 3;
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic toy detection dataset");
    gen->add_option("--out", out_dir)->capture_default_str();
    gen->add_option("--n", n_images)->capture_default_str();
    gen->add_option("--img-size", toy_img)->capture_default_str();
    gen->add_option("--classes", toy_classes)->capture_default_str();
    gen->add_option("--seed", seed)->capture_default_str();

    std::string data_dir, report_path, weights_path, curves_prefix;
    int64_t epochs = 100, batch = 8;
    std::string smoothing = "on";
    double target_ap = -1.0;
    auto* train = app.add_subcommand("train-toy", "train on the toy dataset");
    train->add_option("--data", data_dir)->required();
    train->add_option("--profile", profile, "model profile")
        ->check(profile_check)
        ->capture_default_str();
    train->add_option("--epochs", epochs)->capture_default_str();
    train->add_option("--batch", batch)->capture_default_str();
    train->add_option("--seed", seed)->capture_default_str();
    train->add_option("--label-smoothing", smoothing, "on|off")->capture_default_str();
    train->add_option("--target-ap", target_ap, "stop early at this held-out AP@0.5")
        ->capture_default_str();
    train->add_option("--out", report_path, "write the training report json here");
    train->add_option("--weights", weights_path, "write trained weights here");
    train->add_option("--curves", curves_prefix, "write <prefix>.csv and <prefix>.svg");

    std::string weights_in, dets_out;
    std::vector<std::string> image_paths;
    double conf = 0.25, iou = 0.45;
    bool toy_anchors = false;
    auto* infer = app.add_subcommand("infer", "run detection on PPM images");
    infer->add_option("--weights", weights_in)->required();
    infer->add_option("--profile", profile)->check(profile_check)->capture_default_str();
    infer->add_option("--classes", classes)->capture_default_str();
    infer->add_option("--image", image_paths, "input image(s), binary PPM")->required();
    infer->add_option("--conf", conf)->capture_default_str();
    infer->add_option("--iou", iou)->capture_default_str();
    infer->add_option("--out", dets_out, "detections jsonl (default stdout)");
    infer->add_flag("--toy-anchors", toy_anchors, "use the small-image anchor preset");

    int64_t runs = 10;
    int threads = 1;
    auto* bench = app.add_subcommand("bench", "forward-pass latency statistics");
    bench->add_option("--profile", profile)->check(profile_check)->capture_default_str();
    bench->add_option("--img-size", img)->capture_default_str();
    bench->add_option("--runs", runs)->check(CLI::Range(static_cast<int64_t>(3), int64_t(100000)))
        ->capture_default_str();
    bench->add_option("--threads", threads)->capture_default_str();
    bench->add_option("--seed", seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints usage/message
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (describe->parsed())
            return cmd_describe(profile, img, classes, format, config_path);
        if (check->parsed()) return cmd_check_grad(seed, full, cg_img, fault, mode_name);
        if (gen->parsed()) return cmd_gen_data(out_dir, n_images, toy_img, toy_classes, seed);
        if (train->parsed())
            return cmd_train_toy(data_dir, profile, epochs, batch, seed, smoothing != "off",
                                 target_ap, report_path, weights_path, curves_prefix);
        if (infer->parsed())
            return cmd_infer(weights_in, profile, classes, image_paths, conf, iou, dets_out,
                             toy_anchors);
        if (bench->parsed()) return cmd_bench(profile, img, runs, threads, seed);
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    } catch (const LoadError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFail;
    }
    return kExitUsage;
}
