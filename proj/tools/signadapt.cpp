// Command-line front end: data generation, training, monitoring, augmentation, retraining, experiments.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fmt/format.h>
#include <iostream>
#include <json.hpp>
#include <fstream>
#include <optional>
#include <sstream>

#include "signadapt/adapt.hpp"
#include "signadapt/checkpoint.hpp"
#include "signadapt/config.hpp"
#include "signadapt/errors.hpp"
#include "signadapt/harness.hpp"
#include "signadapt/image_io.hpp"
#include "signadapt/metrics.hpp"
#include "signadapt/novelty.hpp"

namespace fs = std::filesystem;
using namespace signadapt;

namespace {

struct Globals {
    std::optional<fs::path> config_path;
    std::optional<fs::path> run_dir;
    bool verbose = false;
    bool quiet = false;
};

PipelineConfig load(const Globals& g) {
    PipelineConfig c = g.config_path ? load_config(*g.config_path) : PipelineConfig{};
    if (!g.config_path) c.propagate_seed();
    apply_env_overrides(c);
    return c;
}

// Fresh `runs/<timestamp>-<seed>/` (or the --run-dir override) holding a config snapshot.
fs::path open_run_dir(const Globals& g, const PipelineConfig& c) {
    fs::path dir;
    if (g.run_dir) {
        dir = *g.run_dir;
    } else {
        const std::time_t now = std::time(nullptr);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::gmtime(&now));
        const std::string base = fmt::format("{}-{}", stamp, c.seed);
        dir = c.runs_dir / base;
        for (int n = 1; fs::exists(dir); ++n) dir = c.runs_dir / fmt::format("{}.{}", base, n);
    }
    fs::create_directories(dir);
    write_file_atomic(dir / "config.json", config_to_json(c));
    spdlog::info("run directory {}", dir.string());
    return dir;
}

PrototypeCatalog read_catalog(const fs::path& data_dir, int canvas) {
    return PrototypeCatalog::from_images(read_prototypes(data_dir, canvas));
}

std::vector<Image> read_image_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no .png or .ppm images in " + dir.string());
    std::vector<Image> out;
    for (const auto& f : files) out.push_back(read_image(f));
    return out;
}

Thresholds calibrate(const Checkpoint& ckpt, const std::vector<LabeledSample>& validation,
                     const PipelineConfig& c) {
    const auto unknowns = synthetic_unknowns(validation, c.monitor.calibration_unknowns, derive_seed(c.seed, 0xca1));
    return calibrate_thresholds(validation, unknowns, ckpt.model, ckpt.catalog);
}

fs::path thresholds_path_for(const fs::path& checkpoint) {
    return fs::path(checkpoint.string() + ".thresholds.json");
}

void print_results(std::span<const ExperimentResult> results) {
    std::cout << fmt::format("{:>3}  {:<9} {:<5} {:>9} {:>7} {:>7} {:>8}\n", "exp", "train", "test", "precision",
                             "recall", "f1", "accuracy");
    for (const auto& r : results) {
        std::cout << fmt::format("{:>3}  {:<9} {:<5} {:>9.4f} {:>7.4f} {:>7.4f} {:>8.4f}\n", r.spec.id,
                                 to_string(r.spec.train), to_string(r.spec.test), r.report.precision,
                                 r.report.recall, r.report.f1, r.report.accuracy);
    }
}

ConfusionMatrix read_confusion_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<std::vector<std::int64_t>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::int64_t> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::stoll(cell));
        rows.push_back(std::move(row));
    }
    return ConfusionMatrix::from_rows(rows);
}

}  // namespace

int main(int argc, char** argv) {
    configure_runtime();
    CLI::App app{"Novelty monitoring, style-transfer augmentation and incremental retraining for sign classifiers"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("-c,--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--run-dir", g.run_dir, "Run directory (default: <runs_dir>/<timestamp>-<seed>)");
    app.add_flag("-v,--verbose", g.verbose, "Debug logging");
    app.add_flag("-q,--quiet", g.quiet, "Warnings and errors only");

    fs::path data_dir, out, checkpoint, input, aug_dir, stream_dir, thresholds_file;
    int experiment_id = 0;
    bool all = false;
    double mix_p = -1.0;
    std::size_t mix_size = 0;
    int seeds_per_entry = 0;

    auto* gen = app.add_subcommand("gen-data", "Render the synthetic benchmark into a directory");
    gen->add_option("-o,--out", out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train a VPE on <data>/train and calibrate thresholds on <data>/validation");
    train->add_option("-d,--data", data_dir, "Directory written by gen-data")->required();
    train->add_option("-o,--out", out, "Checkpoint path")->required();

    auto* monitor = app.add_subcommand("monitor", "Judge a directory of images");
    monitor->add_option("-m,--checkpoint", checkpoint)->required();
    monitor->add_option("-i,--input", input, "Image directory")->required();
    monitor->add_option("-t,--thresholds", thresholds_file, "Thresholds JSON (default: <checkpoint>.thresholds.json)");

    auto* augment = app.add_subcommand("augment", "Stylize captured unknowns into an augmentation set");
    augment->add_option("-m,--checkpoint", checkpoint)->required();
    augment->add_option("-d,--data", data_dir, "Directory written by gen-data")->required();
    augment->add_option("-b,--buffer,-i,--input", input, "Directory of buffered unknown images")->required();
    augment->add_option("--seeds", seeds_per_entry, "Style seeds per unknown (default from config)");
    augment->add_option("-o,--out", out, "Output directory")->required();

    auto* mix = app.add_subcommand("mix", "Mix original and augmented samples");
    mix->add_option("-d,--data", data_dir, "Directory written by gen-data")->required();
    mix->add_option("-a,--aug", aug_dir, "Directory written by augment")->required();
    mix->add_option("-p,--ratio", mix_p, "Share of originals (default from config)");
    mix->add_option("-n,--size", mix_size, "Mixed dataset size (default |originals|)");
    mix->add_option("-o,--out", out, "Output directory")->required();

    auto* retrain_cmd = app.add_subcommand("retrain", "Fine-tune a checkpoint on a mixed dataset");
    retrain_cmd->add_option("-m,--checkpoint", checkpoint)->required();
    retrain_cmd->add_option("-d,--data", data_dir, "Directory written by gen-data")->required();
    retrain_cmd->add_option("-x,--mixed", input, "Directory written by mix")->required();
    retrain_cmd->add_option("-o,--out", out, "Checkpoint path")->required();

    auto* experiment = app.add_subcommand("experiment", "Run experiments of the six-experiment matrix");
    auto* id_opt = experiment->add_option("--id", experiment_id, "Experiment 1..6")->check(CLI::Range(1, 6));
    auto* all_opt = experiment->add_flag("--all", all, "Run all six and write summary.csv");
    id_opt->excludes(all_opt);

    auto* loop = app.add_subcommand("loop", "One monitor → augment → retrain cycle over a stream of images");
    loop->add_option("-m,--checkpoint", checkpoint)->required();
    loop->add_option("-d,--data", data_dir, "Directory written by gen-data")->required();
    loop->add_option("-s,--stream", stream_dir, "Image directory")->required();

    auto* report = app.add_subcommand("report", "Print a run's summary and confusion analysis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    spdlog::set_level(g.verbose ? spdlog::level::debug : g.quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        if (*gen) {
            const auto c = load(g);
            const auto b = make_benchmark(c.data);
            write_dataset(out / "train", b.train);
            write_dataset(out / "test", b.test);
            if (!b.validation.empty()) write_dataset(out / "validation", b.validation);
            std::vector<std::pair<int, Image>> protos;
            for (const auto& e : b.catalog.entries) protos.emplace_back(e.class_id, e.prototype);
            write_prototypes(out, protos);
            write_file_atomic(out / "config.json", config_to_json(c));
            std::cout << fmt::format("{} train, {} test, {} validation samples in {}\n", b.train.size(),
                                     b.test.size(), b.validation.size(), out.string());
        } else if (*train) {
            const auto c = load(g);
            const auto samples = ingest_gtsrb(data_dir / "train", {c.data.canvas});
            const auto catalog = read_catalog(data_dir, c.data.canvas);
            auto trained = train_vpe(samples, catalog, c.vpe);
            Checkpoint ckpt{std::move(trained.model), std::move(trained.catalog), {}};
            ckpt.meta.version = ckpt.model.vpe.version;
            ckpt.meta.data_fingerprint = dataset_fingerprint(samples);
            ckpt.meta.seed = c.vpe.seed;
            ckpt.meta.epochs = c.vpe.epochs;
            ckpt.meta.note = "trained on " + (data_dir / "train").string();
            save_checkpoint(out, ckpt);
            write_file_atomic(fs::path(out.string() + ".log.csv"), training_log_csv(trained.log));
            const auto val = ingest_gtsrb(data_dir / "validation", {c.data.canvas});
            const auto t = calibrate(ckpt, val, c);
            save_thresholds(thresholds_path_for(out), t);
            std::cout << fmt::format("saved {} (version {}), tau_d {:.4f} tau_y {:.2f}\n", out.string(),
                                     ckpt.meta.version, t.tau_d, t.tau_y);
        } else if (*monitor) {
            const auto ckpt = load_checkpoint(checkpoint);
            const auto t = load_thresholds(thresholds_file.empty() ? thresholds_path_for(checkpoint) : thresholds_file);
            const auto images = read_image_dir(input);
            const auto verdicts = judge_all(images, ckpt.model, ckpt.catalog, t);
            std::size_t flagged = 0;
            for (const auto& v : verdicts) {
                flagged += v.flagged ? 1 : 0;
                std::cout << nlohmann::json{{"predicted_label", v.predicted_label},
                                            {"confidence", v.confidence},
                                            {"distance", v.distance},
                                            {"nearest_class", v.nearest_class},
                                            {"flagged", v.flagged},
                                            {"trigger", std::string(to_string(v.trigger))}}
                                 .dump()
                          << '\n';
            }
            spdlog::info("{} of {} inputs flagged", flagged, verdicts.size());
        } else if (*augment) {
            const auto c = load(g);
            const auto ckpt = load_checkpoint(checkpoint);
            const auto originals = ingest_gtsrb(data_dir / "train", {c.data.canvas});
            const auto images = read_image_dir(input);
            const auto verdicts = judge_all(images, ckpt.model, ckpt.catalog, Thresholds{});
            std::vector<UnknownCapture> unknowns;
            for (std::size_t i = 0; i < images.size(); ++i) unknowns.push_back({images[i], verdicts[i].nearest_class});
            auto options = c.augmentation;
            if (seeds_per_entry > 0) options.seeds_per_entry = seeds_per_entry;
            const auto set = build_augmentation_set(unknowns, ckpt.catalog, originals, options, c.nst);
            write_augmentation_set(out, set);
            std::cout << fmt::format("{} augmented samples in {}\n", set.samples.size(), out.string());
        } else if (*mix) {
            const auto c = load(g);
            const auto originals = ingest_gtsrb(data_dir / "train", {c.data.canvas});
            const auto aug = read_augmentation_set(aug_dir);
            const double p = mix_p >= 0.0 ? mix_p : c.mix_p;
            const std::size_t n = mix_size > 0 ? mix_size : c.mixed_size > 0 ? c.mixed_size : originals.size();
            const auto mixed = mix_datasets(originals, aug.samples, p, n, derive_seed(c.seed, 0x313));
            write_dataset(out, mixed.samples);
            std::cout << fmt::format("{} samples ({} original, {} augmented) in {}\n", mixed.samples.size(),
                                     mixed.original_count, mixed.augmented_count, out.string());
        } else if (*retrain_cmd) {
            const auto c = load(g);
            const auto base = load_checkpoint(checkpoint);
            const auto originals = ingest_gtsrb(data_dir / "train", {c.data.canvas});
            const auto mixed = ingest_gtsrb(input, {c.data.canvas});
            const auto result = retrain(base, mixed, originals, c.retrain, checkpoint.string());
            save_checkpoint(out, result.checkpoint);
            write_file_atomic(fs::path(out.string() + ".log.csv"), training_log_csv(result.log));
            const auto val = ingest_gtsrb(data_dir / "validation", {c.data.canvas});
            save_thresholds(thresholds_path_for(out), calibrate(result.checkpoint, val, c));
            std::cout << fmt::format("saved {} (version {} from {})\n", out.string(), result.checkpoint.meta.version,
                                     base.meta.version);
        } else if (*experiment) {
            if (experiment_id == 0 && !all) throw ConfigError("experiment needs --id N or --all");
            const auto c = load(g);
            const auto h = harness_config(c);
            const auto dir = open_run_dir(g, c);
            const auto datasets = build_datasets(h);
            std::vector<ExperimentResult> results;
            if (all) {
                results = run_matrix(datasets, h);
            } else {
                results.push_back(run_experiment(ExperimentSpec::by_id(experiment_id), datasets, h));
            }
            emit_report(results, dir);
            print_results(results);
        } else if (*loop) {
            const auto c = load(g);
            const auto dir = open_run_dir(g, c);
            PipelineState state;
            state.live = load_checkpoint(checkpoint);
            const auto tpath = thresholds_path_for(checkpoint);
            state.thresholds = fs::exists(tpath) ? load_thresholds(tpath) : c.monitor.thresholds;
            state.buffer = UnknownBuffer(c.monitor.buffer_capacity);
            state.originals = ingest_gtsrb(data_dir / "train", {c.data.canvas});
            state.calibration_clean = ingest_gtsrb(data_dir / "validation", {c.data.canvas});
            state.calibration_unknowns =
                synthetic_unknowns(state.calibration_clean, c.monitor.calibration_unknowns, derive_seed(c.seed, 0xca1));
            auto a = adaptation_config(c);
            a.run_dir = dir;
            EvaluationSets eval;
            eval.clean_test = ingest_gtsrb(data_dir / "test", {c.data.canvas});
            eval.degraded_test = degrade_samples(eval.clean_test, c.aug_kind, c.aug_severity, derive_seed(c.seed, 0xae));
            const auto stream = read_image_dir(stream_dir);
            const auto r = adaptation_cycle(state, stream, a, &eval);
            write_file_atomic(dir / "report.json", to_json(r));
            std::cout << to_json(r);
        } else if (*report) {
            if (!g.run_dir) throw ConfigError("report needs --run-dir");
            std::ifstream in(*g.run_dir / "summary.csv");
            if (!in) throw IoError("no summary.csv in " + g.run_dir->string());
            std::ostringstream text;
            text << in.rdbuf();
            for (const auto& row : parse_summary_csv(text.str())) {
                std::cout << fmt::format("E{} {:<9} -> {:<4} precision {:.4f} recall {:.4f} f1 {:.4f} accuracy {:.4f}\n",
                                         row.exp, row.train, row.test, row.precision, row.recall, row.f1,
                                         row.accuracy);
                const auto m = read_confusion_csv(*g.run_dir / fmt::format("confusion_{}.csv", row.exp));
                const auto heavy = detect_catch_all(m);
                if (!heavy.empty()) {
                    std::cout << "   catch-all columns:";
                    for (auto k : heavy) std::cout << ' ' << k;
                    std::cout << '\n';
                }
                for (const auto& p : confusion_pairs(m, 3)) {
                    std::cout << fmt::format("   {} -> {}: {}\n", p.truth, p.predicted, p.count);
                }
            }
        }
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return 3;
    }
    return 0;
}
