#include "signadapt/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <random>
#include <set>
#include <sstream>

#include "signadapt/errors.hpp"
#include "signadapt/image_io.hpp"

namespace signadapt {

namespace fs = std::filesystem;

void BenchmarkConfig::validate() const {
    if (classes < 2) throw ConfigError("the benchmark needs at least two classes");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("train and test counts must be >= 1");
    if (validation_per_class < 0) throw ConfigError("validation_per_class must be >= 0");
    if (canvas < 16) throw ConfigError("canvas must be >= 16");
}

Benchmark make_benchmark(const BenchmarkConfig& config) {
    config.validate();
    Benchmark b;
    b.specs = default_catalog(config.classes);
    b.catalog = PrototypeCatalog::from_specs(b.specs, config.canvas);
    for (const auto& spec : b.specs) {
        const auto id = static_cast<std::uint64_t>(spec.class_id);
        auto train = synthesize_observations(spec, config.train_per_class, config.jitter,
                                             derive_seed(config.seed, 0x7a, id), config.canvas);
        auto test = synthesize_observations(spec, config.test_per_class, config.jitter,
                                            derive_seed(config.seed, 0x7e, id), config.canvas);
        std::move(train.begin(), train.end(), std::back_inserter(b.train));
        std::move(test.begin(), test.end(), std::back_inserter(b.test));
        if (config.validation_per_class > 0) {
            auto val = synthesize_observations(spec, config.validation_per_class, config.jitter,
                                               derive_seed(config.seed, 0x7f, id), config.canvas);
            std::move(val.begin(), val.end(), std::back_inserter(b.validation));
        }
    }
    return b;
}

std::vector<LabeledSample> degrade_samples(std::span<const LabeledSample> samples, DegradationKind kind,
                                           double severity, std::uint64_t seed) {
    std::vector<LabeledSample> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::uint64_t s = derive_seed(seed, 0xde9, i);
        out.push_back({apply_degradation(samples[i].image, {kind, severity, s}), samples[i].label, Origin::augmented, s});
    }
    return out;
}

std::vector<Image> synthetic_unknowns(std::span<const LabeledSample> samples, std::size_t count, std::uint64_t seed) {
    if (samples.empty()) throw ConfigError("no samples to degrade");
    constexpr std::array kinds{DegradationKind::rust, DegradationKind::fade, DegradationKind::occlusion,
                               DegradationKind::graffiti};
    std::mt19937_64 rng(derive_seed(seed, 0x5c));
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::uniform_real_distribution<double> severity(0.5, 1.0);
    std::vector<Image> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& src = samples[pick(rng)].image;
        const double sev = severity(rng);
        out.push_back(apply_degradation(src, {kinds[i % kinds.size()], sev, rng()}));
    }
    return out;
}

std::string_view to_string(TrainSource source) {
    switch (source) {
        case TrainSource::orig: return "orig";
        case TrainSource::orig_plus_aug: return "orig+aug";
        case TrainSource::aug: return "aug";
    }
    return "?";
}

std::string_view to_string(TestSource source) {
    return source == TestSource::orig ? "orig" : "aug";
}

ExperimentSpec ExperimentSpec::by_id(int id) {
    switch (id) {
        case 1: return {1, TrainSource::orig, TestSource::orig};
        case 2: return {2, TrainSource::orig, TestSource::aug};
        case 3: return {3, TrainSource::orig_plus_aug, TestSource::orig};
        case 4: return {4, TrainSource::orig_plus_aug, TestSource::aug};
        case 5: return {5, TrainSource::aug, TestSource::orig};
        case 6: return {6, TrainSource::aug, TestSource::aug};
        default: throw ConfigError("experiment id must be 1..6, got " + std::to_string(id));
    }
}

std::array<ExperimentSpec, 6> experiment_matrix() {
    std::array<ExperimentSpec, 6> out;
    for (int i = 0; i < 6; ++i) out[static_cast<std::size_t>(i)] = ExperimentSpec::by_id(i + 1);
    return out;
}

std::string_view to_string(AugSource source) {
    return source == AugSource::oracle ? "oracle" : "nst";
}

AugSource parse_aug_source(std::string_view name) {
    if (name == "oracle") return AugSource::oracle;
    if (name == "nst") return AugSource::nst;
    throw ConfigError("aug_source must be oracle or nst, got '" + std::string(name) + "'");
}

namespace {

// Each sample is re-rendered with the texture of a degraded exemplar drawn from the same split.
std::vector<LabeledSample> stylize_split(std::span<const LabeledSample> samples, const HarnessConfig& config,
                                         std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 0x57));
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::vector<Image> styles;
    std::vector<StyleJob> jobs;
    styles.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        styles.push_back(apply_degradation(samples[pick(rng)].image, {config.aug_kind, config.aug_severity, rng()}));
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        jobs.push_back({&styles[i], &samples[i].image, derive_seed(seed, 0x58, i)});
    }
    auto images = style_transfer_batch(jobs, config.style, FeatureExtractor::random(config.style.feature_extractor_seed));
    std::vector<LabeledSample> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out.push_back({std::move(images[i]), samples[i].label, Origin::augmented, jobs[i].noise_seed});
    }
    return out;
}

}  // namespace

ExperimentDatasets build_datasets(const HarnessConfig& config) {
    if (!(config.aug_severity >= 0.0 && config.aug_severity <= 1.0)) {
        throw ValidationError("aug_severity must lie in [0,1]");
    }
    ExperimentDatasets d;
    d.seed = config.data.seed;
    d.bench = make_benchmark(config.data);
    const std::uint64_t train_seed = derive_seed(config.data.seed, 0xa7);
    const std::uint64_t test_seed = derive_seed(config.data.seed, 0xae);
    std::vector<LabeledSample> protos;
    for (const auto& e : d.bench.catalog.entries) protos.push_back({e.prototype, e.class_id, Origin::original, 0});
    const std::uint64_t proto_seed = derive_seed(config.data.seed, 0xa9);
    std::vector<LabeledSample> aug_protos;
    if (config.aug_source == AugSource::oracle) {
        d.aug_train = degrade_samples(d.bench.train, config.aug_kind, config.aug_severity, train_seed);
        d.aug_test = degrade_samples(d.bench.test, config.aug_kind, config.aug_severity, test_seed);
        aug_protos = degrade_samples(protos, config.aug_kind, config.aug_severity, proto_seed);
    } else {
        spdlog::info("stylizing {} + {} samples", d.bench.train.size(), d.bench.test.size());
        d.aug_train = stylize_split(d.bench.train, config, train_seed);
        d.aug_test = stylize_split(d.bench.test, config, test_seed);
        aug_protos = stylize_split(protos, config, proto_seed);
    }
    std::vector<std::pair<int, Image>> images;
    for (auto& s : aug_protos) images.emplace_back(s.label, std::move(s.image));
    d.aug_catalog = PrototypeCatalog::from_images(std::move(images));
    return d;
}

namespace {

Checkpoint train_fresh(std::span<const LabeledSample> data, const PrototypeCatalog& catalog,
                       const TrainingConfig& training, std::string note) {
    auto trained = train_vpe(data, catalog, training);
    Checkpoint c{std::move(trained.model), std::move(trained.catalog), {}};
    c.meta.version = c.model.vpe.version;
    c.meta.data_fingerprint = dataset_fingerprint(data);
    c.meta.seed = training.seed;
    c.meta.epochs = training.epochs;
    c.meta.note = std::move(note);
    return c;
}

const Checkpoint& model_for(TrainSource source, const ExperimentDatasets& d, const HarnessConfig& config,
                            ModelCache& cache) {
    switch (source) {
        case TrainSource::orig:
            if (!cache.orig) {
                spdlog::info("training on orig ({} samples)", d.bench.train.size());
                cache.orig = train_fresh(d.bench.train, d.bench.catalog, config.training, "trained on orig");
            }
            return *cache.orig;
        case TrainSource::orig_plus_aug:
            if (!cache.orig_plus_aug) {
                const auto& base = model_for(TrainSource::orig, d, config, cache);
                const auto mixed = mix_datasets(d.bench.train, d.aug_train, config.mix_p, d.bench.train.size(),
                                                derive_seed(config.finetune.seed, 0x313));
                spdlog::info("fine-tuning on orig+aug ({} orig, {} aug)", mixed.original_count, mixed.augmented_count);
                cache.orig_plus_aug = retrain(base, mixed.samples, d.bench.train, config.finetune).checkpoint;
            }
            return *cache.orig_plus_aug;
        case TrainSource::aug:
            if (!cache.aug) {
                spdlog::info("training on aug ({} samples)", d.aug_train.size());
                cache.aug = train_fresh(d.aug_train, d.aug_catalog, config.training, "trained on aug");
            }
            return *cache.aug;
    }
    throw ConfigError("unknown training source");
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentDatasets& datasets,
                                const HarnessConfig& config, ModelCache* cache) {
    if (datasets.bench.train.empty() || datasets.bench.test.empty()) throw ConfigError("orig splits are missing");
    if (spec.train != TrainSource::orig && datasets.aug_train.empty()) throw ConfigError("aug train split is missing");
    if (spec.test == TestSource::aug && datasets.aug_test.empty()) throw ConfigError("aug test split is missing");
    ModelCache local;
    const auto& model = model_for(spec.train, datasets, config, cache != nullptr ? *cache : local);
    const auto& test = spec.test == TestSource::orig ? datasets.bench.test : datasets.aug_test;
    ExperimentResult r{spec, evaluate_model(test, model.model.vpe, model.catalog), datasets.seed};
    spdlog::info("E{} ({} -> {}): f1 {:.4f} accuracy {:.4f}", spec.id, to_string(spec.train), to_string(spec.test),
                 r.report.f1, r.report.accuracy);
    return r;
}

std::vector<ExperimentResult> run_matrix(const ExperimentDatasets& datasets, const HarnessConfig& config) {
    ModelCache cache;
    std::vector<ExperimentResult> out;
    for (const auto& spec : experiment_matrix()) out.push_back(run_experiment(spec, datasets, config, &cache));
    return out;
}

std::string summary_csv(std::span<const ExperimentResult> results) {
    std::string s = "exp,train,test,precision,recall,f1,accuracy\n";
    for (const auto& r : results) {
        s += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.spec.id, to_string(r.spec.train),
                         to_string(r.spec.test), r.report.precision, r.report.recall, r.report.f1, r.report.accuracy);
    }
    return s;
}

std::string confusion_csv(const ConfusionMatrix& confusion) {
    std::string s;
    for (std::size_t i = 0; i < confusion.classes(); ++i) {
        for (std::size_t j = 0; j < confusion.classes(); ++j) {
            if (j > 0) s += ',';
            s += std::to_string(confusion.at(i, j));
        }
        s += '\n';
    }
    return s;
}

Image confusion_heatmap(const ConfusionMatrix& confusion, int cell) {
    if (cell < 1) throw ConfigError("heatmap cell size must be >= 1");
    const int k = static_cast<int>(confusion.classes());
    Image img(std::max(1, k) * cell, std::max(1, k) * cell, 1.0f);
    // White → dark blue, by share of the row.
    constexpr Rgb lo{1.0, 1.0, 1.0};
    constexpr Rgb hi{0.03, 0.19, 0.42};
    for (int i = 0; i < k; ++i) {
        const auto row = confusion.row_sum(static_cast<std::size_t>(i));
        for (int j = 0; j < k; ++j) {
            const double t = row > 0 ? static_cast<double>(confusion.at(static_cast<std::size_t>(i),
                                                                          static_cast<std::size_t>(j))) /
                                           static_cast<double>(row)
                                     : 0.0;
            const Rgb c{lo.r + (hi.r - lo.r) * t, lo.g + (hi.g - lo.g) * t, lo.b + (hi.b - lo.b) * t};
            for (int y = 0; y < cell; ++y) {
                for (int x = 0; x < cell; ++x) img.set_pixel(i * cell + y, j * cell + x, c);
            }
        }
    }
    return img;
}

void emit_report(std::span<const ExperimentResult> results, const fs::path& run_dir) {
    if (results.empty()) throw ConfigError("no experiment results to report");
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("cannot create " + run_dir.string() + ": " + ec.message());

    std::set<int> ids;
    std::set<std::uint64_t> seeds;
    for (const auto& r : results) {
        ids.insert(r.spec.id);
        seeds.insert(r.data_seed);
    }
    for (const auto& r : results) {
        const std::string stem = "confusion_" + std::to_string(r.spec.id);
        write_file_atomic(run_dir / (stem + ".csv"), confusion_csv(r.report.confusion));
        const fs::path png = run_dir / (stem + ".png");
        const fs::path tmp = run_dir / (stem + ".png.tmp");
        write_png(tmp, confusion_heatmap(r.report.confusion));
        fs::rename(tmp, png, ec);
        if (ec) throw IoError("cannot replace " + png.string() + ": " + ec.message());
    }
    if (ids.size() == 6 && results.size() == 6 && seeds.size() == 1) {
        std::vector<ExperimentResult> sorted(results.begin(), results.end());
        std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.spec.id < b.spec.id; });
        write_file_atomic(run_dir / "summary.csv", summary_csv(sorted));
    } else {
        fs::remove(run_dir / "summary.csv", ec);
        spdlog::warn("summary.csv not written: it needs all six experiments on one data seed ({} results, {} seeds)",
                     results.size(), seeds.size());
    }
}

std::vector<SummaryRow> parse_summary_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "exp,train,test,precision,recall,f1,accuracy") {
        throw DataError("summary.csv header not recognized");
    }
    std::vector<SummaryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw DataError("summary.csv row has " + std::to_string(f.size()) + " fields");
        try {
            rows.push_back({std::stoi(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                            std::stod(f[6])});
        } catch (const std::exception&) {
            throw DataError("summary.csv row not numeric: " + line);
        }
    }
    return rows;
}

}  // namespace signadapt
