#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bvt/checkpoint.hpp"
#include "bvt/cka.hpp"
#include "bvt/config.hpp"
#include "bvt/explain.hpp"
#include "bvt/lrp.hpp"
#include "bvt/training.hpp"

namespace bvt {

/// FNV-1a 64-bit, as 16 lowercase hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string file_hash(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return "fnv1a64:" + fnv1a_hex(ss.str());
}

inline Tensor image_tensor(const Image& img) {
    if (img.channels != 3) throw DimensionError("expected an RGB image");
    return Tensor({3, img.height, img.width}, img.pixels);
}

/// One explanation map for `target`; names follow the CLI method list.
inline SaliencyMap explain_method(const Model& model, const TracedPrediction& tp, const Tensor& image, const std::string& method,
                                  std::size_t target, std::optional<std::size_t> layer = std::nullopt) {
    SaliencyMap m;
    if (method == "attn-last") m = attention_last(tp.trace, target);
    else if (method == "rollout") m = rollout(tp.trace, target);
    else if (method == "grad-cam") m = grad_cam(tp.trace, target, layer);
    else if (method == "ta") m = transformer_attribution(tp.trace, target);
    else if (method == "lrp") m = lrp_epsilon(model, image, target, LrpReadout::all).map;
    else if (method == "lrp-second") m = lrp_epsilon(model, image, target, LrpReadout::second).map;
    else if (method == "lrp-last") m = lrp_epsilon(model, image, target, LrpReadout::last).map;
    else throw ValidationError("unknown explain method '" + method + "'");
    m.method = method;
    return m;
}

inline bool needs_global_attention(const std::string& method) {
    return method == "attn-last" || method == "rollout" || method == "ta";
}

namespace cli {

struct Context {
    RunConfig cfg;
    std::filesystem::path out;
    bool dry_run = false;
    std::size_t threads = 1;
    std::ostream* out_stream = &std::cout;
    std::ostream* err_stream = &std::cerr;

    std::ostream& out_s() const { return *out_stream; }
    std::ostream& err_s() const { return *err_stream; }

    std::filesystem::path output_dir() const {
        std::filesystem::create_directories(out);
        return out;
    }
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
}

inline void write_manifest(const std::filesystem::path& dir, nlohmann::json manifest, const std::vector<std::string>& artifacts) {
    nlohmann::json hashes = nlohmann::json::object();
    for (const auto& a : artifacts) hashes[a] = file_hash(dir / a);
    manifest["artifacts"] = hashes;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_data(Context& ctx) {
    auto ds = ctx.cfg.data.load(ctx.cfg.seed);
    if (!ds.errors.empty()) {
        std::string msg = std::to_string(ds.errors.size()) + " malformed label rows:";
        for (const auto& e : ds.errors) msg += "\n  " + e;
        throw ValidationError(msg);
    }
    ds.validate();
    ctx.cfg.adopt_classes(ds.num_classes());
    return ds;
}

inline Model load_model(const std::filesystem::path& checkpoint) {
    if (!std::filesystem::is_regular_file(checkpoint)) throw ValidationError("checkpoint does not exist: " + checkpoint.string());
    return model_from_checkpoint(load_checkpoint(checkpoint));
}

inline int cmd_gen_data(Context& ctx) {
    if (ctx.cfg.data.source != DataConfig::Source::synthetic) throw ValidationError("gen-data needs a synthetic data source");
    ctx.cfg.data.validate();
    const auto spec = ctx.cfg.data.synthetic_spec(ctx.cfg.seed);
    if (ctx.dry_run) {
        ctx.out_s() << "samples " << spec.total() << "\n";
        return 0;
    }
    const auto ds = generate_synthetic(spec);
    const auto dir = ctx.output_dir();
    write_image_folder(ds, dir);
    nlohmann::json m{{"command", "gen-data"}, {"seed", ctx.cfg.seed}, {"config", ctx.cfg}, {"samples", ds.samples.size()}};
    write_manifest(dir, m, {"labels.csv"});
    ctx.out_s() << "wrote " << ds.samples.size() << " samples to " << dir.string() << "\n";
    return 0;
}

inline int cmd_param_count(Context& ctx) {
    ctx.cfg.model.validate();
    Model model(ctx.cfg.model, ctx.cfg.seed);
    ctx.out_s() << model.param_count() << "\n";
    return 0;
}

inline int cmd_train(Context& ctx) {
    ctx.cfg.validate();
    if (ctx.dry_run) {
        Model model(ctx.cfg.model, ctx.cfg.seed);
        ctx.out_s() << "config ok\nparams " << model.param_count() << "\n";
        return 0;
    }
    auto ds = load_data(ctx);
    ctx.cfg.validate();
    Model model(ctx.cfg.model, ctx.cfg.seed);
    auto train = ctx.cfg.train;
    train.threads = ctx.threads;
    const auto dir = ctx.output_dir();
    std::ofstream log(dir / "metrics.jsonl", std::ios::binary);
    if (!log) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
    auto result = train_loop(model, ds, train, &log);
    log.close();
    save_checkpoint(dir / "checkpoint.bvt", result.best);
    save_checkpoint(dir / "last.bvt", result.last);
    nlohmann::json m{{"command", "train"},
                     {"seed", ctx.cfg.seed},
                     {"config", ctx.cfg},
                     {"params", model.param_count()},
                     {"steps", result.steps},
                     {"best_epoch", result.best_epoch},
                     {"best_val_f1", result.best_val_f1}};
    write_manifest(dir, m, {"checkpoint.bvt", "last.bvt", "metrics.jsonl"});
    const auto& last = result.history.back();
    ctx.out_s() << "trained " << result.steps << " steps; epoch " << last.epoch << " " << last.split << " top1 " << last.top1
                << "; best epoch " << result.best_epoch << "\n";
    return 0;
}

inline int cmd_evaluate(Context& ctx, const std::filesystem::path& checkpoint, const std::string& split_name) {
    const auto split = parse_split(split_name);
    if (!split) throw ValidationError("unknown split '" + split_name + "' (expected train, val or test)");
    auto model = load_model(checkpoint);
    ctx.cfg.model = model.cfg;
    ctx.cfg.num_classes_set = true;
    ctx.cfg.data.validate();
    if (ctx.dry_run) {
        ctx.out_s() << "config ok\n";
        return 0;
    }
    auto ds = load_data(ctx);
    const auto idx = ds.indices(*split);
    if (idx.empty()) throw ValidationError("split " + split_name + " has no samples");
    auto ev = evaluate(model, ds, idx, ctx.cfg.train.loss, ctx.cfg.train.eval_batch_size, ctx.threads);
    auto report = to_json(ev.metrics);
    report["split"] = split_name;
    report["checkpoint"] = checkpoint.string();
    const auto dir = ctx.output_dir();
    write_text(dir / "metrics.json", report.dump(2) + "\n");
    nlohmann::json m{{"command", "evaluate"}, {"seed", ctx.cfg.seed}, {"config", ctx.cfg}, {"checkpoint", checkpoint.string()},
                     {"checkpoint_hash", file_hash(checkpoint)}, {"split", split_name}};
    write_manifest(dir, m, {"metrics.json"});
    ctx.out_s() << split_name << ": " << ev.metrics.count << " samples, top1 " << ev.metrics.top1 << ", f1_macro "
                << ev.metrics.f1_macro << "\n";
    return 0;
}

struct ExplainArgs {
    std::filesystem::path checkpoint, image, mask;
    std::optional<std::size_t> target;
};

inline int cmd_explain(Context& ctx, const ExplainArgs& args) {
    ctx.cfg.validate_explain();
    auto model = load_model(args.checkpoint);
    const auto& ex = ctx.cfg.explain;
    if (is_windowed(model.cfg.family) && !model.cfg.modified_last_block) {
        for (const auto& m : ex.methods) {
            if (needs_global_attention(m)) {
                throw ValidationError("method " + m + " needs global attention, but this " + to_string(model.cfg.family) +
                                      " checkpoint has only window attention; train the modified variant "
                                      "(model.modified_last_block = true)");
            }
        }
    }
    if (!std::filesystem::is_regular_file(args.image)) throw ValidationError("image does not exist: " + args.image.string());
    const auto img = load_ppm(args.image);
    if (img.height != model.cfg.image_size || img.width != model.cfg.image_size) {
        throw DimensionError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + ", model expects " +
                             std::to_string(model.cfg.image_size));
    }
    std::optional<GrayImage> mask;
    auto mask_file = args.mask.empty() ? detail::mask_path_for(args.image) : args.mask;
    if (!args.mask.empty() && !std::filesystem::is_regular_file(mask_file)) {
        throw ValidationError("mask does not exist: " + mask_file.string());
    }
    if (std::filesystem::is_regular_file(mask_file)) mask = load_pgm(mask_file);
    if (ctx.dry_run) {
        ctx.out_s() << "config ok\n";
        return 0;
    }

    const auto image = image_tensor(img);
    auto tp = trace_prediction(model, image, args.target);
    const auto mode = parse_interpolation(ex.interpolation);
    const auto dir = ctx.output_dir();
    std::vector<std::string> artifacts;
    for (const auto& method : ex.methods) {
        auto map = explain_method(model, tp, image, method, tp.target, ex.layer);
        save_pgm(dir / (method + ".pgm"), render_saliency(map, img.height, img.width, mode));
        auto side = sidecar_json(map);
        side["predicted"] = tp.predicted;
        side["interpolation"] = ex.interpolation;
        if (mask) {
            auto loc = localization_score(map, *mask);
            side["localization"] = {{"inside_fraction", loc.inside_fraction}, {"top_fraction", 0.1}, {"top_pixels", loc.top_pixels}};
        }
        write_text(dir / (method + ".json"), side.dump(2) + "\n");
        artifacts.push_back(method + ".pgm");
        artifacts.push_back(method + ".json");
        ctx.out_s() << method << " -> " << (dir / (method + ".pgm")).string() << "\n";
    }
    if (!tp.trace.attention.empty()) {
        auto hm = accumulate_heads(tp.trace.attention.back(), ex.mass);
        std::ostringstream csv;
        for (std::size_t r = 0; r < hm.grid_h; ++r) {
            for (std::size_t c = 0; c < hm.grid_w; ++c) csv << (c ? "," : "") << hm.counts[r * hm.grid_w + c];
            csv << "\n";
        }
        write_text(dir / "head_mass.csv", csv.str());
        artifacts.push_back("head_mass.csv");
    } else {
        ctx.err_s() << "note: no global attention layer, head-mass grid skipped\n";
    }
    nlohmann::json m{{"command", "explain"},
                     {"seed", ctx.cfg.seed},
                     {"config", ctx.cfg},
                     {"checkpoint", args.checkpoint.string()},
                     {"checkpoint_hash", file_hash(args.checkpoint)},
                     {"image", args.image.string()},
                     {"image_hash", file_hash(args.image)},
                     {"class", tp.target},
                     {"predicted", tp.predicted}};
    write_manifest(dir, m, artifacts);
    return 0;
}

struct CkaArgs {
    std::filesystem::path checkpoint;
    std::size_t samples = 64;
    std::string split = "test";
    std::string pooling = "mean_patch";
};

inline int cmd_cka(Context& ctx, const CkaArgs& args) {
    if (args.samples < 32) throw ValidationError("cka needs at least 32 samples, got " + std::to_string(args.samples));
    const auto split = parse_split(args.split);
    if (!split) throw ValidationError("unknown split '" + args.split + "' (expected train, val or test)");
    const auto pooling = parse_pooling(args.pooling);
    auto model = load_model(args.checkpoint);
    ctx.cfg.model = model.cfg;
    ctx.cfg.num_classes_set = true;
    ctx.cfg.data.validate();
    if (ctx.dry_run) {
        ctx.out_s() << "config ok\n";
        return 0;
    }
    auto ds = load_data(ctx);
    auto idx = ds.indices(*split);
    if (idx.size() < args.samples) {
        throw ValidationError("split " + args.split + " has " + std::to_string(idx.size()) + " samples, " +
                              std::to_string(args.samples) + " requested");
    }
    idx.resize(args.samples);
    auto stack = collect_activations(model, ds, idx, pooling);
    auto r = cka_matrix(stack);
    const auto dir = ctx.output_dir();
    std::ostringstream csv;
    write_cka_csv(csv, r);
    write_text(dir / "cka.csv", csv.str());
    nlohmann::json summary{{"layers", r.names},          {"samples", args.samples},
                           {"split", args.split},        {"pooling", to_string(pooling)},
                           {"mean_off_diagonal", r.mean_off_diagonal()}};
    write_text(dir / "cka_summary.json", summary.dump(2) + "\n");
    nlohmann::json m{{"command", "cka"}, {"seed", ctx.cfg.seed}, {"config", ctx.cfg}, {"checkpoint", args.checkpoint.string()},
                     {"checkpoint_hash", file_hash(args.checkpoint)}, {"samples", args.samples}, {"split", args.split},
                     {"pooling", args.pooling}};
    write_manifest(dir, m, {"cka.csv", "cka_summary.json"});
    ctx.out_s() << "mean off-diagonal CKA " << r.mean_off_diagonal() << " over " << r.names.size() << " layers\n";
    return 0;
}

}  // namespace cli

/// Entry point of the `bvt` tool. Exit codes: 0 success, 1 invalid input,
/// 2 numerical abort.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"B-cos vision transformers: training, explanations and CKA", "bvt"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    bool dry_run = false;
    app.add_option("--config", config_path, "JSON run config");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "seed for all randomness");
    app.add_option("--threads", threads, "worker threads (BVT_THREADS overrides)")->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", dry_run, "validate and stop");

    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as PPM images with labels.csv");
    std::optional<std::size_t> per_class;
    gen->add_option("--per-class", per_class, "samples per class");
    auto* train = app.add_subcommand("train", "train a model; writes checkpoint, metrics.jsonl and manifest.json");
    auto* eval = app.add_subcommand("evaluate", "metrics of a checkpoint on one split");
    std::string checkpoint, split = "test";
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--split", split, "train, val or test");
    auto* explain = app.add_subcommand("explain", "saliency maps for one image");
    cli::ExplainArgs ea;
    std::string methods, image, mask;
    std::optional<std::size_t> target, layer;
    std::optional<double> mass;
    explain->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    explain->add_option("--image", image, "PPM image")->required();
    explain->add_option("--methods", methods, "comma list of attn-last, rollout, grad-cam, ta, lrp, lrp-second, lrp-last");
    explain->add_option("--class", target, "class to explain (default: prediction)");
    explain->add_option("--mask", mask, "object mask PGM (default: <image>.mask.pgm when present)");
    explain->add_option("--layer", layer, "block for grad-cam");
    explain->add_option("--mass", mass, "attention mass kept per head");
    auto* cka = app.add_subcommand("cka", "layer-by-layer CKA matrix of a checkpoint");
    cli::CkaArgs ca;
    cka->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    cka->add_option("--samples", ca.samples, "number of samples (at least 32)");
    cka->add_option("--split", ca.split, "train, val or test");
    cka->add_option("--pooling", ca.pooling, "mean_patch or cls");
    auto* params = app.add_subcommand("param-count", "print the parameter count of the configured model");
    for (auto* s : {gen, train, eval, explain, cka, params}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        cli::Context ctx;
        ctx.out_stream = &out;
        ctx.err_stream = &err;
        if (!config_path.empty()) ctx.cfg = load_run_config(config_path);
        if (seed) {
            ctx.cfg.seed = *seed;
            ctx.cfg.train.seed = *seed;
        }
        if (!out_dir.empty()) ctx.cfg.out = out_dir;
        ctx.out = ctx.cfg.out;
        ctx.dry_run = dry_run;
        ctx.threads = threads;
        if (const char* env = std::getenv("BVT_THREADS")) {
            try {
                ctx.threads = std::stoul(env);
            } catch (const std::exception&) {
                throw ValidationError(std::string("BVT_THREADS is not a number: ") + env);
            }
            if (ctx.threads == 0) throw ValidationError("BVT_THREADS must be positive");
        }

        if (gen->parsed()) {
            if (per_class) std::fill(ctx.cfg.data.per_class.begin(), ctx.cfg.data.per_class.end(), *per_class);
            return cli::cmd_gen_data(ctx);
        }
        if (train->parsed()) return cli::cmd_train(ctx);
        if (eval->parsed()) return cli::cmd_evaluate(ctx, checkpoint, split);
        if (explain->parsed()) {
            ea.checkpoint = checkpoint;
            ea.image = image;
            ea.mask = mask;
            ea.target = target;
            if (!methods.empty()) {
                ctx.cfg.explain.methods.clear();
                std::stringstream ss(methods);
                for (std::string m; std::getline(ss, m, ',');)
                    if (!m.empty()) ctx.cfg.explain.methods.push_back(m);
            }
            if (layer) ctx.cfg.explain.layer = layer;
            if (mass) ctx.cfg.explain.mass = *mass;
            return cli::cmd_explain(ctx, ea);
        }
        if (cka->parsed()) {
            ca.checkpoint = checkpoint;
            return cli::cmd_cka(ctx, ca);
        }
        if (params->parsed()) return cli::cmd_param_count(ctx);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace bvt
