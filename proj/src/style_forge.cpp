#include "signadapt/style_forge.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "signadapt/errors.hpp"
#include "signadapt/image_io.hpp"
#include "signadapt/vpe.hpp"
#include "signadapt/vpe_network.hpp"

namespace signadapt {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kBatchChunk = 4;

// Mirrors the sign radius used by render_prototype.
constexpr double kSignRadius = 0.86;

nn::Matrix sign_mask(int height, int width) {
    nn::Matrix mask(1, static_cast<long>(height) * width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double u = 2.0 * (x + 0.5) / width - 1.0;
            const double v = 2.0 * (y + 0.5) / height - 1.0;
            mask(0, static_cast<long>(y) * width + x) = u * u + v * v <= kSignRadius * kSignRadius ? 1.0 : 0.0;
        }
    }
    return mask;
}

struct ForwardPass {
    std::vector<nn::ConvCache> caches;
    std::vector<nn::Matrix> activations;
};

// Pixels are centred on mid-gray before the first convolution.
ForwardPass extractor_forward(const FeatureExtractor& extractor, const nn::Matrix& pixels, nn::Extent extent) {
    const nn::Matrix input = pixels.array() - 0.5;
    ForwardPass pass;
    const auto& layers = extractor.layers();
    pass.caches.resize(layers.size());
    pass.activations.resize(layers.size());
    const nn::Matrix* current = &input;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const nn::ConstMatrixMap w(layer.weight.data(), layer.weight.rows(), layer.weight.cols());
        const nn::ConstVectorMap b(layer.bias.data(), layer.bias.size());
        pass.activations[l] = nn::conv_forward(w, b, *current, extent, layer.shape, pass.caches[l]);
        nn::elu(pass.activations[l]);
        extent = pass.caches[l].out;
        current = &pass.activations[l];
    }
    return pass;
}

// Gradient of the loss with respect to the extractor input, given d/d(activation) per layer.
nn::Matrix extractor_backward(const FeatureExtractor& extractor, const ForwardPass& pass,
                              std::vector<nn::Matrix>& grad_activations) {
    const auto& layers = extractor.layers();
    nn::Matrix carry;
    for (std::size_t l = layers.size(); l-- > 0;) {
        nn::Matrix g = std::move(grad_activations[l]);
        if (carry.size() > 0) g += carry;
        nn::elu_backward(pass.activations[l], g);
        nn::Matrix grad_cols(layers[l].weight.cols(), g.cols());
        grad_cols.noalias() = layers[l].weight.transpose() * g;
        carry = nn::col2im(grad_cols, pass.caches[l].in, pass.caches[l].out, layers[l].shape,
                           layers[l].shape.in_channels);
    }
    return carry;
}

// Each layer's Gram difference is measured relative to the exemplar's Gram energy.
double gram_scale(const nn::Matrix& exemplar_gram) {
    return std::max(exemplar_gram.squaredNorm(), 1e-12);
}

auto sample_block(const nn::Matrix& maps, long index, long plane) {
    return maps.middleCols(index * plane, plane);
}

// Per-sample style loss over all layers; optionally writes d/d(activation).
std::vector<double> style_terms(const ForwardPass& pass, const std::vector<std::vector<nn::Matrix>>& targets,
                                std::vector<nn::Matrix>* grads, double weight) {
    const std::size_t batch = targets.size();
    std::vector<double> loss(batch, 0.0);
    if (grads != nullptr) grads->resize(pass.activations.size());
    for (std::size_t l = 0; l < pass.activations.size(); ++l) {
        const auto& a = pass.activations[l];
        const long plane = a.cols() / static_cast<long>(batch);
        if (grads != nullptr) (*grads)[l].resize(a.rows(), a.cols());
        for (std::size_t b = 0; b < batch; ++b) {
            const auto f = sample_block(a, static_cast<long>(b), plane);
            nn::Matrix gram(a.rows(), a.rows());
            gram.noalias() = f * f.transpose();
            gram /= static_cast<double>(plane);
            const nn::Matrix diff = gram - targets[b][l];
            const double scale = gram_scale(targets[b][l]);
            loss[b] += diff.squaredNorm() / scale;
            if (grads != nullptr) {
                (*grads)[l].middleCols(static_cast<long>(b) * plane, plane).noalias() =
                    (weight * 4.0 / (scale * static_cast<double>(plane))) * diff * f;
            }
        }
    }
    return loss;
}

std::vector<nn::Matrix> style_targets(const FeatureExtractor& extractor, const Image& exemplar) {
    std::vector<nn::Matrix> grams;
    for (const auto& f : extractor.features(exemplar)) grams.push_back(gram_matrix(f));
    return grams;
}

void check_same_size(const Image& a, const Image& b) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError("style and content images differ in size");
    }
}

Image column_to_image(const nn::Matrix& x, long index, int height, int width) {
    Image out(height, width);
    const long plane = static_cast<long>(height) * width;
    auto data = out.data();
    for (long p = 0; p < plane; ++p) {
        for (int c = 0; c < Image::kChannels; ++c) {
            data[static_cast<std::size_t>(p * Image::kChannels + c)] =
                static_cast<float>(std::clamp(x(c, index * plane + p), 0.0, 1.0));
        }
    }
    return out;
}

std::vector<Image> transfer_chunk(std::span<const StyleJob> jobs, const StyleTransferConfig& config,
                                  const FeatureExtractor& extractor) {
    const int h = jobs.front().content->height();
    const int w = jobs.front().content->width();
    const long plane = static_cast<long>(h) * w;
    const long batch = static_cast<long>(jobs.size());
    std::vector<const Image*> contents;
    std::vector<std::vector<nn::Matrix>> targets;
    for (const auto& job : jobs) {
        check_same_size(*job.style, *job.content);
        if (job.content->height() != h || job.content->width() != w) throw ShapeError("jobs differ in size");
        contents.push_back(job.content);
        targets.push_back(style_targets(extractor, *job.style));
    }
    const nn::Matrix content = network::to_channel_major(contents);
    const nn::Matrix mask = config.sign_mask ? sign_mask(h, w) : nn::Matrix::Ones(1, plane);

    nn::Matrix x = content;
    for (long b = 0; b < batch; ++b) {
        std::mt19937_64 rng(derive_seed(jobs[static_cast<std::size_t>(b)].noise_seed, 0x0157));
        std::normal_distribution<double> normal(0.0, 1.0);
        const double amp = noise_amplitude(jobs[static_cast<std::size_t>(b)].noise_seed);
        for (long p = 0; p < plane; ++p) {
            for (int c = 0; c < Image::kChannels; ++c) x(c, b * plane + p) += amp * normal(rng) * mask(0, p);
        }
    }

    // Projected descent. A step that raises the loss is undone and retried at half the size; a
    // non-finite loss gets one such retry before the transfer fails.
    std::vector<double> step(static_cast<std::size_t>(batch), config.step_size);
    std::vector<double> last_loss(static_cast<std::size_t>(batch), std::numeric_limits<double>::infinity());
    std::vector<bool> overflowed(static_cast<std::size_t>(batch), false);
    nn::Matrix previous = x;
    nn::Matrix previous_grad = nn::Matrix::Zero(x.rows(), x.cols());
    const nn::Extent extent{static_cast<int>(batch), h, w};
    const double min_step = config.step_size * 1e-6;
    for (int it = 0; it < config.iterations; ++it) {
        const auto pass = extractor_forward(extractor, x, extent);
        std::vector<nn::Matrix> grad_act;
        const auto style = style_terms(pass, targets, &grad_act, config.style_weight);
        nn::Matrix grad = extractor_backward(extractor, pass, grad_act);
        grad += (2.0 * config.content_weight) * (x - content);
        for (long b = 0; b < batch; ++b) {
            auto gb = grad.middleCols(b * plane, plane);
            gb.array().rowwise() *= mask.row(0).array();
            const double content_term =
                config.content_weight * (x.middleCols(b * plane, plane) - content.middleCols(b * plane, plane))
                                            .squaredNorm();
            const double loss = content_term + config.style_weight * style[static_cast<std::size_t>(b)];
            const auto i = static_cast<std::size_t>(b);
            const bool finite = std::isfinite(loss) && gb.allFinite();
            if (!finite) {
                if (overflowed[i] || it == 0) {
                    throw NumericalError("style transfer diverged at iteration " + std::to_string(it), "style");
                }
                overflowed[i] = true;
            }
            if (!finite || loss > last_loss[i]) {
                step[i] *= 0.5;
                x.middleCols(b * plane, plane) = previous.middleCols(b * plane, plane);
                gb = previous_grad.middleCols(b * plane, plane);
            } else {
                last_loss[i] = loss;
            }
        }
        previous = x;
        previous_grad = grad;
        for (long b = 0; b < batch; ++b) {
            const double s = step[static_cast<std::size_t>(b)];
            if (s < min_step) continue;  // converged as far as this step size can tell
            auto xb = x.middleCols(b * plane, plane);
            xb -= s * grad.middleCols(b * plane, plane);
            xb = xb.cwiseMax(0.0).cwiseMin(1.0);
        }
    }
    std::vector<Image> out;
    out.reserve(jobs.size());
    for (long b = 0; b < batch; ++b) out.push_back(column_to_image(x, b, h, w));
    return out;
}

}  // namespace

// --- extractor ----------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(std::vector<ExtractorLayer> layers) : layers_(std::move(layers)) {
    int channels = Image::kChannels;
    for (const auto& layer : layers_) {
        if (layer.shape.in_channels != channels) throw ShapeError("extractor layers do not chain");
        if (layer.weight.rows() != layer.shape.out_channels ||
            layer.weight.cols() != static_cast<long>(layer.shape.in_channels) * layer.shape.kernel * layer.shape.kernel ||
            layer.bias.size() != layer.shape.out_channels) {
            throw ShapeError("extractor weight shape does not match its conv shape");
        }
        channels = layer.shape.out_channels;
    }
}

FeatureExtractor FeatureExtractor::random(std::uint64_t seed) {
    const nn::ConvShape shapes[] = {{3, 32, 3, 1, 1}, {32, 64, 3, 2, 1}, {64, 64, 3, 2, 1}};
    std::mt19937_64 rng(derive_seed(seed, 0xfea7));
    std::vector<ExtractorLayer> layers;
    for (const auto& shape : shapes) {
        const long fan_in = static_cast<long>(shape.in_channels) * shape.kernel * shape.kernel;
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        ExtractorLayer layer{shape, nn::Matrix(shape.out_channels, fan_in), nn::Vector(shape.out_channels)};
        for (long i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = normal(rng);
        for (long i = 0; i < layer.bias.size(); ++i) layer.bias[i] = 0.1 * normal(rng);
        layers.push_back(std::move(layer));
    }
    return FeatureExtractor(std::move(layers));
}

std::vector<nn::Matrix> FeatureExtractor::features(const Image& image) const {
    const Image* one[] = {&image};
    auto pass = extractor_forward(*this, network::to_channel_major(one), {1, image.height(), image.width()});
    return std::move(pass.activations);
}

nn::Matrix gram_matrix(const nn::Matrix& features) {
    if (features.cols() == 0) throw ShapeError("empty feature map");
    nn::Matrix gram(features.rows(), features.rows());
    gram.noalias() = features * features.transpose();
    return gram / static_cast<double>(features.cols());
}

double gram_style_loss(const Image& candidate, const Image& style_exemplar, const FeatureExtractor& extractor) {
    check_same_size(candidate, style_exemplar);
    const auto a = extractor.features(candidate);
    const auto b = extractor.features(style_exemplar);
    double loss = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        const nn::Matrix target = gram_matrix(b[l]);
        loss += (gram_matrix(a[l]) - target).squaredNorm() / gram_scale(target);
    }
    return loss;
}

// --- transfer -----------------------------------------------------------------------------

void StyleTransferConfig::validate() const {
    if (!(content_weight > 0.0) || !std::isfinite(content_weight)) {
        throw ValidationError("content_weight must be finite and > 0");
    }
    if (!(style_weight >= 0.0) || !std::isfinite(style_weight)) {
        throw ValidationError("style_weight must be finite and >= 0");
    }
    if (iterations < 1) throw ValidationError("iterations must be >= 1");
    if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ValidationError("step_size must be finite and > 0");
}

double noise_amplitude(std::uint64_t noise_seed) {
    std::mt19937_64 rng(derive_seed(noise_seed, 0xa3b));
    return std::uniform_real_distribution<double>(0.02, 0.06)(rng);
}

Image style_transfer(const Image& style_exemplar, const Image& content, const StyleTransferConfig& config) {
    return style_transfer(style_exemplar, content, config, FeatureExtractor::random(config.feature_extractor_seed));
}

Image style_transfer(const Image& style_exemplar, const Image& content, const StyleTransferConfig& config,
                     const FeatureExtractor& extractor) {
    config.validate();
    const StyleJob job{&style_exemplar, &content, config.noise_seed};
    return std::move(transfer_chunk(std::span(&job, 1), config, extractor).front());
}

std::vector<Image> style_transfer_batch(std::span<const StyleJob> jobs, const StyleTransferConfig& config,
                                        const FeatureExtractor& extractor) {
    config.validate();
    std::vector<Image> out;
    out.reserve(jobs.size());
    for (std::size_t start = 0; start < jobs.size(); start += kBatchChunk) {
        auto chunk = transfer_chunk(jobs.subspan(start, std::min(kBatchChunk, jobs.size() - start)), config, extractor);
        for (auto& img : chunk) out.push_back(std::move(img));
    }
    return out;
}

// --- augmentation set ---------------------------------------------------------------------

AugmentationSet build_augmentation_set(std::span<const UnknownCapture> unknowns, const PrototypeCatalog& catalog,
                                       std::span<const LabeledSample> originals, const AugmentationOptions& options,
                                       const StyleTransferConfig& config) {
    if (options.seeds_per_entry < 1) throw ValidationError("seeds_per_entry must be >= 1");
    if (options.draws_per_seed < 0) throw ValidationError("draws_per_seed must be >= 0");
    AugmentationSet set;
    if (unknowns.empty()) {
        spdlog::warn("augmentation requested with an empty buffer; nothing to stylize");
        return set;
    }
    if (options.draws_per_seed > 0 && originals.empty()) {
        throw ConfigError("random draws requested but no original samples were given");
    }
    std::vector<StyleJob> jobs;
    for (std::size_t u = 0; u < unknowns.size(); ++u) {
        const auto& unknown = unknowns[u];
        const auto& proto = catalog.at(unknown.pseudo_label);
        for (int s = 0; s < options.seeds_per_entry; ++s) {
            const std::uint64_t xi = derive_seed(options.seed, 0x61, u, static_cast<std::uint64_t>(s));
            jobs.push_back({&unknown.image, &proto.prototype, xi});
            set.manifest.push_back({0, u, unknown.pseudo_label, xi, -1});
            std::mt19937_64 rng(derive_seed(xi, 0xd4a));
            std::uniform_int_distribution<std::size_t> pick(0, originals.empty() ? 0 : originals.size() - 1);
            for (int d = 0; d < options.draws_per_seed; ++d) {
                const std::size_t idx = pick(rng);
                const std::uint64_t draw_xi = derive_seed(xi, 0xd7, static_cast<std::uint64_t>(d));
                jobs.push_back({&unknown.image, &originals[idx].image, draw_xi});
                set.manifest.push_back({0, u, originals[idx].label, draw_xi, static_cast<long>(idx)});
            }
        }
    }
    const auto extractor = FeatureExtractor::random(config.feature_extractor_seed);
    auto images = style_transfer_batch(jobs, config, extractor);
    set.samples.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        set.manifest[i].sample_index = i;
        if (!catalog.contains(set.manifest[i].source_class)) {
            throw ConfigError("augmented label " + std::to_string(set.manifest[i].source_class) + " not in catalog");
        }
        set.samples.push_back({std::move(images[i]), set.manifest[i].source_class, Origin::augmented,
                               set.manifest[i].xi_seed});
    }
    return set;
}

void write_augmentation_set(const fs::path& dir, const AugmentationSet& set) {
    fs::create_directories(dir);
    const fs::path tmp = dir / "manifest.csv.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << "aug_path,label,unknown_id,xi_seed\n";
        for (std::size_t i = 0; i < set.samples.size(); ++i) {
            const std::string rel = std::to_string(i) + ".png";
            write_png(dir / rel, set.samples[i].image);
            const auto& row = set.manifest.at(i);
            out << rel << ',' << set.samples[i].label << ',' << row.unknown_id << ',' << row.xi_seed << '\n';
        }
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    fs::rename(tmp, dir / "manifest.csv");
}

AugmentationSet read_augmentation_set(const fs::path& dir) {
    std::ifstream in(dir / "manifest.csv");
    if (!in) throw DataError("missing manifest " + (dir / "manifest.csv").string());
    AugmentationSet set;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string path, label, unknown, xi;
        if (!std::getline(ss, path, ',') || !std::getline(ss, label, ',') || !std::getline(ss, unknown, ',') ||
            !std::getline(ss, xi)) {
            throw DataError("malformed manifest line: " + line);
        }
        ManifestRow row;
        try {
            row = {set.samples.size(), std::stoul(unknown), std::stoi(label), std::stoull(xi), -1};
        } catch (const std::exception&) {
            throw DataError("malformed manifest line: " + line);
        }
        set.samples.push_back({read_image(dir / path), row.source_class, Origin::augmented, row.xi_seed});
        set.manifest.push_back(row);
    }
    return set;
}

// --- mixing -------------------------------------------------------------------------------

std::size_t original_share(double p, std::size_t target_size) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("mixing ratio p must lie in [0,1]");
    // nearbyint honours the default round-to-nearest-even mode.
    return static_cast<std::size_t>(std::nearbyint(p * static_cast<double>(target_size)));
}

namespace {

void draw_into(std::vector<LabeledSample>& out, std::span<const LabeledSample> pool, std::size_t count,
               std::mt19937_64& rng, const char* what) {
    if (count == 0) return;
    if (pool.empty()) throw ConfigError(std::string("no ") + what + " samples to draw from");
    if (count <= pool.size()) {
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < count; ++i) out.push_back(pool[idx[i]]);
    } else {
        spdlog::info("drawing {} {} samples with replacement from a pool of {}", count, what, pool.size());
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t i = 0; i < count; ++i) out.push_back(pool[pick(rng)]);
    }
}

}  // namespace

MixedDataset mix_datasets(std::span<const LabeledSample> original, std::span<const LabeledSample> augmented,
                          double p, std::size_t target_size, std::uint64_t seed) {
    if (target_size < 1) throw ValidationError("target_size must be >= 1");
    const std::size_t n_orig = original_share(p, target_size);
    MixedDataset mixed;
    mixed.ratio_p = p;
    mixed.original_count = n_orig;
    mixed.augmented_count = target_size - n_orig;
    mixed.samples.reserve(target_size);
    std::mt19937_64 rng(derive_seed(seed, 0x313));
    draw_into(mixed.samples, original, n_orig, rng, "original");
    draw_into(mixed.samples, augmented, mixed.augmented_count, rng, "augmented");
    std::shuffle(mixed.samples.begin(), mixed.samples.end(), rng);
    return mixed;
}

}  // namespace signadapt
