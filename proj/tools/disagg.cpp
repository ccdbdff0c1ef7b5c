// Command-line surface: dataset generation, training, prediction,
// evaluation, dasymetric mapping and the region-count sweep.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "disagg/io.hpp"
#include "disagg/mapping.hpp"
#include "disagg/png.hpp"

namespace fs = std::filesystem;
using namespace disagg;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
    cmd->add_option("--config", args.config_path, "run configuration file (key=value lines)");
    cmd->add_option("--seed", args.seed, "override the config seed");
    auto* out = cmd->add_option("--out", args.out, "output directory");
    if (out_required) out->required();
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = read_run_config(args.config_path);
    if (args.seed) cfg.train.seed = *args.seed;
    return cfg;
}

Dataset load_corpus(const RunConfig& cfg) {
    if (cfg.source == "cifar10") {
        if (cfg.cifar_dir.empty())
            throw std::runtime_error("source=cifar10 requires cifar_dir in the config");
        return load_cifar10(cfg.cifar_dir);
    }
    Rng rng(cfg.train.seed);
    Dataset ds = procedural_dataset(rng, cfg.procedural_count);
    ds.set_splits(cfg.n_train, cfg.n_val, cfg.n_test);
    return ds;
}

std::span<const Example> pick_split(const SupervisedSet& set, const std::string& split) {
    if (split == "train") return set.train;
    if (split == "val") return set.val;
    if (split == "test") return set.test;
    throw std::runtime_error("unknown split '" + split + "' (expected train, val or test)");
}

std::string index_name(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%05zu.raster", prefix, i);
    return buf;
}

/// Chunked infer-mode predictions for a list of examples.
std::vector<Grid<float>> predict_densities(const PixelNetParams<float>& params,
                                           std::span<const Example> examples) {
    std::vector<Grid<float>> out;
    out.reserve(examples.size());
    constexpr std::size_t kChunk = 128;
    ChannelMatrix<float> input;
    for (std::size_t start = 0; start < examples.size(); start += kChunk) {
        const std::size_t count = std::min(kChunk, examples.size() - start);
        input.resize(Image::kChannels, static_cast<std::int64_t>(count) * Image::kPixels);
        for (std::size_t b = 0; b < count; ++b)
            for (int ch = 0; ch < Image::kChannels; ++ch) {
                float* dst = input.row(ch) + static_cast<std::int64_t>(b) * Image::kPixels;
                const std::uint8_t* src =
                    examples[start + b].image.planes.data() + ch * Image::kPixels;
                for (int p = 0; p < Image::kPixels; ++p)
                    dst[p] = static_cast<float>(src[p]) / 127.5f - 1.0f;
            }
        const std::vector<float> density = pixelnet_infer(params, input);
        for (std::size_t b = 0; b < count; ++b) {
            Grid<float> g(Image::kHeight, Image::kWidth);
            std::copy_n(density.data() + static_cast<std::int64_t>(b) * Image::kPixels,
                        Image::kPixels, g.flat().data());
            out.push_back(std::move(g));
        }
    }
    return out;
}

int cmd_gen_data(const CommonArgs& common, bool png) {
    const RunConfig cfg = load_config(common);
    const Dataset corpus = load_corpus(cfg);
    const SupervisedSet set = build_supervised_set(corpus, cfg.build_options());
    write_bundle(common.out, set, cfg);
    if (png) {
        const fs::path preview = fs::path(common.out) / "preview";
        fs::create_directories(preview);
        const std::size_t n = std::min<std::size_t>(8, set.train.size());
        for (std::size_t i = 0; i < n; ++i) {
            write_image_png(preview / (std::to_string(i) + "_image.png"), set.train[i].image);
            write_density_png(preview / (std::to_string(i) + "_density.png"),
                              set.train[i].density, 1.0);
        }
    }
    const std::string manifest = read_file(fs::path(common.out) / "manifest.txt");
    std::cout << "bundle written to " << common.out << "\n" << manifest;
    return 0;
}

int cmd_train(const CommonArgs& common, const std::string& data_dir,
              const std::string& resume_path) {
    const RunConfig cfg = load_config(common);
    const SupervisedSet data = read_bundle(data_dir);
    fs::create_directories(common.out);
    write_run_config(fs::path(common.out) / "config.txt", cfg);

    ResumePoint<float> resume;
    const ResumePoint<float>* resume_ptr = nullptr;
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        if (!ck.has_optimizer)
            throw std::runtime_error("resume checkpoint has no optimizer state: " + resume_path);
        resume = {std::move(ck.params), std::move(ck.opt), ck.iteration};
        resume_ptr = &resume;
    }

    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult<float> result =
        train<float>(cfg.train, data, resume_ptr, [&](const MetricsRow& row) {
            if (row.split == "val")
                std::cout << "iter " << row.iteration << "  val region_mae " << row.region_mae
                          << "  pixel_mae " << row.pixel_mae << std::endl;
        });
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const fs::path out(common.out);
    if (cfg.checkpoint_policy != "final")
        save_checkpoint(out / "best.ckpt", result.best, result.best_iteration, nullptr);
    if (cfg.checkpoint_policy != "best")
        save_checkpoint(out / "final.ckpt", result.last, result.end_iteration, &result.opt);
    write_metrics_csv(out / "metrics.csv", result.log);
    std::cout << "trained " << result.end_iteration << " iterations in " << secs
              << " s; best val region_mae " << result.best_val_region_mae << " at iteration "
              << result.best_iteration << "\n";
    return 0;
}

int cmd_predict(const CommonArgs& common, const std::string& checkpoint_path,
                const std::string& data_dir, const std::string& split, bool png) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const SupervisedSet set = read_bundle(data_dir);
    const auto examples = pick_split(set, split);
    if (examples.empty()) throw std::runtime_error("split '" + split + "' is empty");
    const std::vector<Grid<float>> densities = predict_densities(ck.params, examples);

    fs::create_directories(common.out);
    const fs::path out(common.out);
    for (std::size_t i = 0; i < densities.size(); ++i)
        write_raster(out / index_name("pred", i), densities[i]);
    if (png) {
        double vmax = 0;
        for (const auto& g : densities)
            for (const float v : g.flat()) vmax = std::max(vmax, static_cast<double>(v));
        if (vmax <= 0) vmax = 1.0;
        write_file_atomic(out / "vmax.txt", detail::format_real(vmax) + "\n");
        for (std::size_t i = 0; i < densities.size(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "pred_%05zu.png", i);
            write_density_png(out / buf, densities[i], vmax);
        }
    }
    std::cout << "wrote " << densities.size() << " rasters to " << common.out << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& split) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const SupervisedSet set = read_bundle(data_dir);
    const auto examples = pick_split(set, split);
    if (examples.empty()) throw std::runtime_error("split '" + split + "' is empty");
    const EvalResult ev = evaluate_examples(ck.params, examples);
    std::cout << "split=" << split << " pixel_mae=" << ev.pixel_mae
              << " region_mae=" << ev.region_mae << "\n";
    if (!common.out.empty()) {
        std::string csv = "split,pixel_mae,region_mae\n";
        csv += split + "," + detail::format_real(ev.pixel_mae) + "," +
               detail::format_real(ev.region_mae) + "\n";
        fs::create_directories(fs::path(common.out));
        write_file_atomic(fs::path(common.out) / "eval.csv", csv);
    }
    return 0;
}

int cmd_dasymetric(const CommonArgs& common, const std::string& checkpoint_path,
                   const std::string& data_dir, const std::string& split) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const SupervisedSet set = read_bundle(data_dir);
    const auto examples = pick_split(set, split);
    if (examples.empty()) throw std::runtime_error("split '" + split + "' is empty");
    const std::vector<Grid<float>> densities = predict_densities(ck.params, examples);

    fs::create_directories(common.out);
    const fs::path out(common.out);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const Example& ex = examples[i];
        const Grid<float> adjusted =
            dasymetric_map<float>(densities[i], ex.regions, ex.labels, ex.valid);
        write_raster(out / index_name("dasy", i), adjusted);
    }
    std::cout << "wrote " << examples.size() << " adjusted rasters to " << common.out << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& common, const std::vector<int>& ks) {
    const RunConfig cfg = load_config(common);
    const Dataset corpus = load_corpus(cfg);
    fs::create_directories(common.out);
    const std::vector<SweepRow> rows =
        sweep_regions(corpus, cfg.build_options(), cfg.train, ks, [&](const MetricsRow& row) {
            if (row.split == "val")
                std::cout << "iter " << row.iteration << "  val region_mae " << row.region_mae
                          << std::endl;
        });
    std::string csv = "k,pixel_mae,region_mae\n";
    for (const auto& row : rows) {
        csv += std::to_string(row.k) + "," + detail::format_real(row.report.pixel_mae) + "," +
               detail::format_real(row.report.region_mae) + "\n";
        std::cout << "k=" << row.k << " pixel_mae=" << row.report.pixel_mae << "\n";
    }
    write_file_atomic(fs::path(common.out) / "sweep.csv", csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weakly supervised per-pixel density estimation from region aggregates"};
    app.require_subcommand(1);

    CommonArgs gen_args;
    bool gen_png = false;
    auto* gen = app.add_subcommand("gen-data", "generate a dataset bundle");
    add_common(gen, gen_args, true);
    gen->add_flag("--png", gen_png, "also write a few PNG previews");

    CommonArgs train_args;
    std::string train_data, train_resume;
    auto* tr = app.add_subcommand("train", "train a model on a bundle");
    add_common(tr, train_args, true);
    tr->add_option("--data", train_data, "dataset bundle directory")->required();
    tr->add_option("--resume", train_resume, "checkpoint to resume from");

    CommonArgs pred_args;
    std::string pred_ckpt, pred_data, pred_split = "test";
    bool pred_png = false;
    auto* pr = app.add_subcommand("predict", "write per-image density rasters");
    add_common(pr, pred_args, true);
    pr->add_option("--checkpoint", pred_ckpt, "model checkpoint")->required();
    pr->add_option("--data", pred_data, "dataset bundle directory")->required();
    pr->add_option("--split", pred_split, "train, val or test (default test)");
    pr->add_flag("--png", pred_png, "also write PNG visualizations");

    CommonArgs eval_args;
    std::string eval_ckpt, eval_data, eval_split = "test";
    auto* ev = app.add_subcommand("eval", "report pixel and region MAE");
    add_common(ev, eval_args, false);
    ev->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    ev->add_option("--data", eval_data, "dataset bundle directory")->required();
    ev->add_option("--split", eval_split, "train, val or test (default test)");

    CommonArgs dasy_args;
    std::string dasy_ckpt, dasy_data, dasy_split = "test";
    auto* da = app.add_subcommand("dasymetric", "redistribute labels over predictions");
    add_common(da, dasy_args, true);
    da->add_option("--checkpoint", dasy_ckpt, "model checkpoint")->required();
    da->add_option("--data", dasy_data, "dataset bundle directory")->required();
    da->add_option("--split", dasy_split, "train, val or test (default test)");

    CommonArgs sweep_args;
    std::vector<int> sweep_ks = {1, 5, 10, 15, 25};
    auto* sw = app.add_subcommand("sweep", "retrain across region counts");
    add_common(sw, sweep_args, true);
    sw->add_option("--ks", sweep_ks, "region counts to sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args, gen_png);
        if (tr->parsed()) return cmd_train(train_args, train_data, train_resume);
        if (pr->parsed()) return cmd_predict(pred_args, pred_ckpt, pred_data, pred_split, pred_png);
        if (ev->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_data, eval_split);
        if (da->parsed()) return cmd_dasymetric(dasy_args, dasy_ckpt, dasy_data, dasy_split);
        if (sw->parsed()) return cmd_sweep(sweep_args, sweep_ks);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
