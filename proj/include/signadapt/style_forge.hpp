#pragma once

// Gram-matrix style transfer, augmentation-set construction and dataset mixing.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "signadapt/data_forge.hpp"
#include "signadapt/image.hpp"
#include "signadapt/nn.hpp"

namespace signadapt {

struct PrototypeCatalog;

struct ExtractorLayer {
    nn::ConvShape shape;
    nn::Matrix weight;  // out × (in·k·k)
    nn::Vector bias;
};

/// Frozen random-weight conv stack whose activations feed the Gram statistics.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    explicit FeatureExtractor(std::vector<ExtractorLayer> layers);

    /// 3×3 convs: 3→32 (stride 1), 32→64 (stride 2), 64→64 (stride 2), ELU after each.
    static FeatureExtractor random(std::uint64_t seed);

    const std::vector<ExtractorLayer>& layers() const noexcept { return layers_; }

    /// Post-activation maps of every layer for a single image (pixels centred on 0.5), each C_l × H_l·W_l.
    std::vector<nn::Matrix> features(const Image& image) const;

private:
    std::vector<ExtractorLayer> layers_;
};

/// G = F Fᵀ / N for a C × N activation matrix.
nn::Matrix gram_matrix(const nn::Matrix& features);

/// Σ_l ‖G_l(candidate) − G_l(exemplar)‖²_F / ‖G_l(exemplar)‖²_F.
double gram_style_loss(const Image& candidate, const Image& style_exemplar, const FeatureExtractor& extractor);

struct StyleTransferConfig {
    double content_weight = 1.0;
    double style_weight = 10000.0;
    int iterations = 100;
    double step_size = 0.05;
    std::uint64_t feature_extractor_seed = 0;
    std::uint64_t noise_seed = 0;  // ξ
    /// Restrict stylization to the central disc (the sign) and keep the background.
    bool sign_mask = false;

    void validate() const;
};

/// Amplitude of the initial noise added to the content image, derived from ξ.
double noise_amplitude(std::uint64_t noise_seed);

/// Projected gradient descent (iterates kept in [0,1]) from content + ξ-noise on
/// content_weight·Σ(x − content)² + style_weight·gram_style_loss(x, style).
/// Steps that raise the loss are retried at half size.
Image style_transfer(const Image& style_exemplar, const Image& content, const StyleTransferConfig& config);
/// Same as above with an already-built extractor (must match config.feature_extractor_seed to be equivalent).
Image style_transfer(const Image& style_exemplar, const Image& content, const StyleTransferConfig& config,
                     const FeatureExtractor& extractor);

/// One stylization request. Results are identical to calling style_transfer per job.
struct StyleJob {
    const Image* style = nullptr;
    const Image* content = nullptr;
    std::uint64_t noise_seed = 0;
};

/// Runs many jobs with shared GEMMs. `config.noise_seed` is ignored in favour of each job's seed.
std::vector<Image> style_transfer_batch(std::span<const StyleJob> jobs, const StyleTransferConfig& config,
                                        const FeatureExtractor& extractor);

/// A buffered unknown handed to augmentation: the captured image and its pseudo-label.
struct UnknownCapture {
    Image image;
    int pseudo_label = 0;
};

struct ManifestRow {
    std::size_t sample_index = 0;
    std::size_t unknown_id = 0;
    int source_class = 0;
    std::uint64_t xi_seed = 0;
    /// -1 when the content was the class prototype, else the index into the originals.
    long original_index = -1;
};

struct AugmentationSet {
    std::vector<LabeledSample> samples;
    std::vector<ManifestRow> manifest;
};

struct AugmentationOptions {
    int seeds_per_entry = 3;
    int draws_per_seed = 4;
    std::uint64_t seed = 0;
};

/// For every unknown and ξ: stylize the pseudo-label's prototype and `draws_per_seed` random originals.
/// Each output carries the label of its content source.
AugmentationSet build_augmentation_set(std::span<const UnknownCapture> unknowns, const PrototypeCatalog& catalog,
                                       std::span<const LabeledSample> originals, const AugmentationOptions& options,
                                       const StyleTransferConfig& config);

/// Writes `<dir>/<index>.png` and `<dir>/manifest.csv` (aug_path,label,unknown_id,xi_seed).
void write_augmentation_set(const std::filesystem::path& dir, const AugmentationSet& set);
AugmentationSet read_augmentation_set(const std::filesystem::path& dir);

struct MixedDataset {
    std::vector<LabeledSample> samples;
    double ratio_p = 1.0;
    std::size_t original_count = 0;
    std::size_t augmented_count = 0;
};

/// round-half-to-even(p · target_size).
std::size_t original_share(double p, std::size_t target_size);

/// Exactly original_share(p, n) originals plus the rest augmented, seeded shuffle.
/// Draws without replacement while the pool suffices, with replacement otherwise.
MixedDataset mix_datasets(std::span<const LabeledSample> original, std::span<const LabeledSample> augmented,
                          double p, std::size_t target_size, std::uint64_t seed);

}  // namespace signadapt
