#pragma once

// Synthetic benchmark construction, the six-experiment matrix and its report files.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "signadapt/adapt.hpp"
#include "signadapt/data_forge.hpp"
#include "signadapt/metrics.hpp"
#include "signadapt/style_forge.hpp"
#include "signadapt/vpe.hpp"

namespace signadapt {

struct BenchmarkConfig {
    int classes = 10;
    int train_per_class = 200;
    int test_per_class = 50;
    /// Held-out clean samples for threshold calibration.
    int validation_per_class = 20;
    int canvas = 32;
    Jitter jitter;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Benchmark {
    std::vector<SignClassSpec> specs;
    PrototypeCatalog catalog;
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> test;
    std::vector<LabeledSample> validation;
};

/// Train, test and validation splits use disjoint seed streams.
Benchmark make_benchmark(const BenchmarkConfig& config);

/// Apply `kind` at `severity` to every sample, each with its own derived seed. Labels are kept.
std::vector<LabeledSample> degrade_samples(std::span<const LabeledSample> samples, DegradationKind kind,
                                           double severity, std::uint64_t seed);

/// Calibration unknowns: every degradation kind in turn, severity uniform in [0.5, 1].
std::vector<Image> synthetic_unknowns(std::span<const LabeledSample> samples, std::size_t count, std::uint64_t seed);

enum class TrainSource { orig, orig_plus_aug, aug };
enum class TestSource { orig, aug };

std::string_view to_string(TrainSource source);
std::string_view to_string(TestSource source);

struct ExperimentSpec {
    int id = 1;
    TrainSource train = TrainSource::orig;
    TestSource test = TestSource::orig;

    /// Throws ConfigError outside 1..6.
    static ExperimentSpec by_id(int id);
    friend bool operator==(const ExperimentSpec&, const ExperimentSpec&) = default;
};

std::array<ExperimentSpec, 6> experiment_matrix();

/// How the augmented splits are produced: the parametric degradation itself, or style transfer from
/// degraded exemplars onto the clean samples.
enum class AugSource { oracle, nst };

std::string_view to_string(AugSource source);
AugSource parse_aug_source(std::string_view name);

struct HarnessConfig {
    BenchmarkConfig data;
    TrainingConfig training;
    /// Fine-tuning used for the orig+aug experiments, starting from the orig model.
    RetrainConfig finetune;
    double mix_p = 0.5;
    AugSource aug_source = AugSource::oracle;
    DegradationKind aug_kind = DegradationKind::rust;
    double aug_severity = 0.8;
    StyleTransferConfig style;
};

struct ExperimentDatasets {
    Benchmark bench;
    std::vector<LabeledSample> aug_train;
    std::vector<LabeledSample> aug_test;
    /// Prototypes carrying the augmentation style; the aug-only model is trained and scored against these.
    PrototypeCatalog aug_catalog;
    std::uint64_t seed = 0;
};

ExperimentDatasets build_datasets(const HarnessConfig& config);

struct ExperimentResult {
    ExperimentSpec spec;
    MetricsReport report;
    std::uint64_t data_seed = 0;
};

/// Models trained so far, keyed by training source; lets experiments that share a source reuse one
/// training run.
struct ModelCache {
    std::optional<Checkpoint> orig, orig_plus_aug, aug;
};

/// Trains (or fetches from `cache`) the model for `spec.train` and evaluates it on `spec.test`.
ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentDatasets& datasets,
                                const HarnessConfig& config, ModelCache* cache = nullptr);

/// All six experiments on one dataset build, in id order.
std::vector<ExperimentResult> run_matrix(const ExperimentDatasets& datasets, const HarnessConfig& config);

std::string summary_csv(std::span<const ExperimentResult> results);
std::string confusion_csv(const ConfusionMatrix& confusion);

/// Row-normalized heatmap, `cell` pixels per entry.
Image confusion_heatmap(const ConfusionMatrix& confusion, int cell = 12);

/// Writes summary.csv (only when all six experiments ran on the same data seed; otherwise any old one is
/// removed), confusion_<id>.csv and confusion_<id>.png into `run_dir`. Every file is replaced atomically.
void emit_report(std::span<const ExperimentResult> results, const std::filesystem::path& run_dir);

struct SummaryRow {
    int exp = 0;
    std::string train;
    std::string test;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
};

std::vector<SummaryRow> parse_summary_csv(std::string_view text);

}  // namespace signadapt
