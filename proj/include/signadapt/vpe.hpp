#pragma once

// Variational prototyping encoder: observation -> latent code -> prototype image.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "signadapt/data_forge.hpp"
#include "signadapt/image.hpp"
#include "signadapt/nn.hpp"

namespace signadapt {

/// Three stride-2 conv blocks → flatten → (μ, log σ²); mirrored transposed-conv decoder.
struct VpeArchitecture {
    int canvas = 32;
    int latent_dim = 16;
    std::array<int, 3> channels{16, 32, 64};

    /// Throws ConfigError on an unusable combination.
    void validate() const;
    int bottleneck() const { return canvas / 8; }
    int flat_features() const { return channels[2] * bottleneck() * bottleneck(); }

    friend bool operator==(const VpeArchitecture&, const VpeArchitecture&) = default;
};

struct LatentCode {
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

/// Encoder + decoder weights in one flat vector, addressed through named slots.
class VpeParameters {
public:
    VpeParameters() = default;

    /// He-style random initialization.
    static VpeParameters initialize(const VpeArchitecture& arch, std::uint64_t seed);
    /// Rebuild from checkpoint tensors; names and shapes must match `arch`.
    static VpeParameters from_values(const VpeArchitecture& arch, std::vector<double> values);
    /// Layout every parameter vector of this architecture uses.
    static nn::ParameterLayout make_layout(const VpeArchitecture& arch);

    const VpeArchitecture& architecture() const noexcept { return arch_; }
    const nn::ParameterLayout& layout() const noexcept { return layout_; }
    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

    bool all_finite() const;

    /// Bumped every time training changes the weights; catalogs record the version they were built with.
    std::uint64_t version = 0;

    friend bool operator==(const VpeParameters&, const VpeParameters&) = default;

private:
    VpeArchitecture arch_;
    nn::ParameterLayout layout_;
    std::vector<double> values_;
};

/// ŷ = softmax(W z + b).
struct LinearHead {
    nn::Matrix weight;  // K × d_z
    nn::Vector bias;    // K

    static LinearHead zeros(int class_count, int latent_dim);
    int class_count() const noexcept { return static_cast<int>(weight.rows()); }
    int latent_dim() const noexcept { return static_cast<int>(weight.cols()); }

    friend bool operator==(const LinearHead& a, const LinearHead& b) {
        return a.weight == b.weight && a.bias == b.bias;
    }
};

struct Model {
    VpeParameters vpe;
    LinearHead head;

    friend bool operator==(const Model&, const Model&) = default;
};

/// Round every weight to float32, the precision checkpoints store, so saved and live models agree.
void round_to_storage_precision(Model& model);

struct PrototypeEntry {
    int class_id = 0;
    Image prototype;
    LatentCode centroid;
};

/// One rendered prototype and its latent centroid per class, sorted by class id.
struct PrototypeCatalog {
    std::vector<PrototypeEntry> entries;
    /// Equals the VpeParameters::version the centroids were computed with.
    std::uint64_t version = 0;

    static PrototypeCatalog from_specs(std::span<const SignClassSpec> specs, int canvas);
    static PrototypeCatalog from_images(std::vector<std::pair<int, Image>> prototypes);

    bool contains(int class_id) const;
    const PrototypeEntry& at(int class_id) const;
    std::size_t size() const noexcept { return entries.size(); }
    std::vector<int> class_ids() const;
};

/// Throws ConfigError when the catalog was built for different encoder weights.
void require_matching_version(const PrototypeCatalog& catalog, const VpeParameters& params);

struct Sampled {
    std::uint64_t seed = 0;
};

/// μ(x). Deterministic.
LatentCode encode(const Image& image, const VpeParameters& params);
/// μ(x) + σ(x) ⊙ ε with ε ~ N(0, I) drawn from `sampling.seed`.
LatentCode encode(const Image& image, const VpeParameters& params, Sampled sampling);
/// Mean codes for many images, evaluated in batches.
std::vector<LatentCode> encode_all(std::span<const Image> images, const VpeParameters& params);

Image decode(const LatentCode& code, const VpeParameters& params);

/// Softmax(W z + b).
std::vector<double> classify(const LatentCode& code, const LinearHead& head);

PrototypeCatalog compute_centroids(const PrototypeCatalog& catalog, const VpeParameters& params);

/// Per-pixel binary cross-entropy written through the decoder logit.
double bce_with_logit(double logit, double target);
/// Mean per-component BCE of predicted probabilities against targets, probabilities clipped to (0,1).
double binary_cross_entropy(const Image& predicted, const Image& target);
/// KL(N(μ, σ²) ‖ N(0, I)) for one sample.
double gaussian_kl(std::span<const double> mean, std::span<const double> log_variance);

// --- objective ------------------------------------------------------------------

struct LossTerms {
    double recon = 0.0;    // mean per-pixel BCE
    double kl = 0.0;       // unweighted KL, mean over batch
    double ce = 0.0;       // head cross-entropy, mean over batch
    double consist = 0.0;  // unweighted consistency term
    double total = 0.0;
};

struct ModelGradient {
    std::vector<double> vpe;
    nn::Matrix head_weight;
    nn::Vector head_bias;

    static ModelGradient zeros_like(const Model& model);
    void set_zero();
    double max_abs() const;
};

struct ObjectiveWeights {
    double kl_weight = 1e-3;
    double ce_weight = 1.0;
    /// When false the head sees detached codes and CE only moves W and b.
    bool head_trains_encoder = true;
};

struct LabeledView {
    const Image* image = nullptr;
    const Image* target = nullptr;
    int label = -1;  // -1 disables the CE term for this sample
};

/// Reconstruction + weighted KL + weighted head CE, averaged over the batch.
/// Gradients are accumulated (added) into `grad` when non-null.
LossTerms bundle_objective(const Model& model, std::span<const LabeledView> batch, const ObjectiveWeights& weights,
                           std::uint64_t noise_seed, ModelGradient* grad);

struct VpeLoss {
    double loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    std::vector<double> gradients;  // aligned with VpeParameters::values()
};

/// Single-sample reconstruction + KL objective with its gradient.
VpeLoss vpe_loss(const Image& image, const Image& target_prototype, const VpeParameters& params, double kl_weight,
                 std::uint64_t seed);

// --- training -----------------------------------------------------------------------

struct TrainingConfig {
    VpeArchitecture architecture;
    int epochs = 10;
    int batch_size = 64;
    double learning_rate = 0.2;
    double momentum = 0.9;
    double kl_weight = 1e-3;
    double kl_warmup_fraction = 0.2;
    /// Weight of the linear-head CE trained alongside the VPE (on detached codes).
    double head_weight = 1.0;
    std::uint64_t seed = 0;
};

struct EpochLog {
    int epoch = 0;
    double loss_recon = 0.0;
    double loss_kl = 0.0;
    double loss_total = 0.0;
};

struct TrainResult {
    Model model;
    PrototypeCatalog catalog;
    std::vector<EpochLog> log;
};

/// Train a fresh VPE (and its head) on `dataset`; prototypes come from `catalog`.
TrainResult train_vpe(std::span<const LabeledSample> dataset, const PrototypeCatalog& catalog,
                      const TrainingConfig& config);

/// Extra loss evaluated once per optimizer step; must add its gradient into `grad`.
using StepTerm = std::function<LossTerms(const Model& model, int epoch, int step, ModelGradient& grad)>;

struct FitOptions {
    int epochs = 1;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double kl_weight = 1e-3;
    double kl_warmup_fraction = 0.0;
    ObjectiveWeights weights;
    std::uint64_t seed = 0;
};

/// Momentum-SGD loop shared by initial training and fine-tuning. Returns per-epoch means.
std::vector<EpochLog> fit(Model& model, std::span<const LabeledSample> dataset, const PrototypeCatalog& catalog,
                          const FitOptions& options, const StepTerm& extra = {});

std::string training_log_csv(std::span<const EpochLog> log);

/// Fraction of samples whose mean code is nearest to their own class centroid.
double nearest_centroid_accuracy(std::span<const LabeledSample> samples, const VpeParameters& params,
                                 const PrototypeCatalog& catalog);

}  // namespace signadapt
