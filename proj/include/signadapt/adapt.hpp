#pragma once

// Fine-tuning with a forgetting-prevention consistency term and the monitor → augment → retrain cycle.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "signadapt/checkpoint.hpp"
#include "signadapt/novelty.hpp"
#include "signadapt/style_forge.hpp"
#include "signadapt/vpe.hpp"

namespace signadapt {

struct RetrainConfig {
    double lambda_consist = 1.0;
    int epochs = 10;
    double learning_rate = 0.003;
    int batch_size = 64;
    double momentum = 0.9;
    double kl_weight = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Guard inside the logarithm of the consistency KL.
inline constexpr double kConsistencyEpsilon = 1e-9;

/// KL(ref ‖ new) for two probability vectors, with both probabilities floored at ε inside the log.
double prediction_kl(std::span<const double> reference, std::span<const double> current);

/// Mean over the batch of KL(ŷ_ref ‖ ŷ_new), ŷ = head(μ(x)).
double consistency_loss(const Model& model_new, const Model& model_ref, std::span<const Image> originals);

/// Reference-model head probabilities for each image (K × N), the frozen target of the consistency term.
nn::Matrix reference_predictions(const Model& model_ref, std::span<const Image> originals);

/// Consistency term and its gradient (added into `grad`, scaled by `lambda`) against fixed reference
/// probabilities (K × N, column per image).
double consistency_term(const Model& model, std::span<const Image* const> originals, const nn::Matrix& reference,
                        double lambda, ModelGradient* grad);

struct TotalLoss {
    LossTerms terms;
    ModelGradient gradient;
};

/// Bundled VPE objective (recon + KL + head CE) on `mixed_batch` plus λ·consistency on `originals_batch`.
TotalLoss total_loss(const Model& model, const Model& model_ref, std::span<const LabeledView> mixed_batch,
                     std::span<const Image> originals_batch, double lambda, double kl_weight,
                     std::uint64_t noise_seed);

struct RetrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
};

/// Fine-tunes a copy of `checkpoint_in` on `mixed` with the consistency term over `originals`.
/// The result has version + 1, a provenance link to the input and recomputed centroids.
RetrainResult retrain(const Checkpoint& checkpoint_in, std::span<const LabeledSample> mixed,
                      std::span<const LabeledSample> originals, const RetrainConfig& config,
                      const std::string& parent_path = {});

/// What the live pipeline holds between cycles.
struct PipelineState {
    Checkpoint live;
    Thresholds thresholds;
    UnknownBuffer buffer{256};
    /// Original training data (mixing source and consistency anchor).
    std::vector<LabeledSample> originals;
    /// Held-out clean samples and synthetic unknowns used for recalibration.
    std::vector<LabeledSample> calibration_clean;
    std::vector<Image> calibration_unknowns;
};

struct AdaptationConfig {
    std::size_t trigger_min = 16;
    double mix_p = 0.5;
    /// Size of D′; 0 means |originals|.
    std::size_t mixed_size = 0;
    AugmentationOptions augmentation;
    StyleTransferConfig style;
    RetrainConfig retrain;
    /// When set, checkpoints are written to `<run_dir>/ckpt_<version>`.
    std::optional<std::filesystem::path> run_dir;
};

/// Optional evaluation sets reported before and after the cycle.
struct EvaluationSets {
    std::vector<LabeledSample> clean_test;
    std::vector<LabeledSample> degraded_test;
};

struct SplitMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
};

struct AdaptationReport {
    bool fired = false;
    std::size_t stream_size = 0;
    std::size_t flagged_count = 0;
    std::size_t n_prime = 0;
    std::optional<SplitMetrics> pre_clean, post_clean, pre_degraded, post_degraded;
    double wall_time = 0.0;
    std::uint64_t version_before = 0;
    std::uint64_t version_after = 0;
    std::string checkpoint_before;
    std::string checkpoint_after;
    Thresholds thresholds_after;
};

std::string to_json(const AdaptationReport& report);

/// Judge the stream; if enough inputs are flagged, augment → mix → retrain → recalibrate and swap the
/// live model. Any failure leaves `state` exactly as it was.
AdaptationReport adaptation_cycle(PipelineState& state, std::span<const Image> stream, const AdaptationConfig& config,
                                  const EvaluationSets* evaluation = nullptr);

/// Nearest-centroid accuracy and macro F1 of `model` on `samples`.
SplitMetrics evaluate_split(const Checkpoint& checkpoint, std::span<const LabeledSample> samples);

}  // namespace signadapt
