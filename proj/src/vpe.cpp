#include "signadapt/vpe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "signadapt/errors.hpp"
#include "signadapt/vpe_network.hpp"

namespace signadapt {

namespace {

// Slot indices into VpeParameters::layout(); fixed by make_layout().
enum Slot : std::size_t {
    kConv1W, kConv1B, kConv2W, kConv2B, kConv3W, kConv3B,
    kMuW, kMuB, kLogVarW, kLogVarB,
    kFcW, kFcB,
    kDeconv1W, kDeconv1B, kDeconv2W, kDeconv2B, kDeconv3W, kDeconv3B,
    kSlotCount
};

nn::ConvShape encoder_shape(const VpeArchitecture& arch, int block) {
    const int in = block == 0 ? Image::kChannels : arch.channels[block - 1];
    return {in, arch.channels[block], 4, 2, 1};
}

nn::ConvShape decoder_shape(const VpeArchitecture& arch, int block) {
    // block 0: c3 -> c2, block 1: c2 -> c1, block 2: c1 -> rgb
    const int in = arch.channels[2 - block];
    const int out = block == 2 ? Image::kChannels : arch.channels[1 - block];
    return {in, out, 4, 2, 1};
}

nn::Matrix flatten_maps(const nn::Matrix& maps, int batch) {
    const long plane = maps.cols() / batch;
    nn::Matrix flat(maps.rows() * plane, batch);
    for (long c = 0; c < maps.rows(); ++c) {
        for (int b = 0; b < batch; ++b) {
            for (long p = 0; p < plane; ++p) {
                flat(c * plane + p, b) = maps(c, b * plane + p);
            }
        }
    }
    return flat;
}

nn::Matrix unflatten_maps(const nn::Matrix& flat, long channels, int batch) {
    const long plane = flat.rows() / channels;
    nn::Matrix maps(channels, plane * batch);
    for (long c = 0; c < channels; ++c) {
        for (int b = 0; b < batch; ++b) {
            for (long p = 0; p < plane; ++p) {
                maps(c, b * plane + p) = flat(c * plane + p, b);
            }
        }
    }
    return maps;
}

nn::Matrix standard_normal(long rows, long cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    nn::Matrix m(rows, cols);
    // Column-major fill so a sample's noise does not depend on the batch size.
    for (long j = 0; j < cols; ++j) {
        for (long i = 0; i < rows; ++i) {
            m(i, j) = normal(rng);
        }
    }
    return m;
}

void check_image_shape(const Image& image, const VpeArchitecture& arch) {
    if (image.height() != arch.canvas || image.width() != arch.canvas) {
        throw ShapeError("image is " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                         " but the model expects " + std::to_string(arch.canvas) + "x" +
                         std::to_string(arch.canvas));
    }
}

void check_code_shape(const LatentCode& code, int latent_dim) {
    if (static_cast<int>(code.dim()) != latent_dim) {
        throw ShapeError("latent code has dimension " + std::to_string(code.dim()) + ", expected " +
                         std::to_string(latent_dim));
    }
}

}  // namespace

// --- architecture & parameters ---------------------------------------------------------

void VpeArchitecture::validate() const {
    if (canvas < 8 || canvas % 8 != 0) {
        throw ConfigError("canvas must be a positive multiple of 8, got " + std::to_string(canvas));
    }
    if (latent_dim < 2) {
        throw ConfigError("latent_dim must be >= 2, got " + std::to_string(latent_dim));
    }
    for (int c : channels) {
        if (c < 1) throw ConfigError("channel counts must be positive");
    }
}

nn::ParameterLayout VpeParameters::make_layout(const VpeArchitecture& arch) {
    arch.validate();
    using u32 = std::uint32_t;
    const auto c1 = static_cast<u32>(arch.channels[0]);
    const auto c2 = static_cast<u32>(arch.channels[1]);
    const auto c3 = static_cast<u32>(arch.channels[2]);
    const auto rgb = static_cast<u32>(Image::kChannels);
    const auto dz = static_cast<u32>(arch.latent_dim);
    const auto flat = static_cast<u32>(arch.flat_features());
    nn::ParameterLayout layout;
    layout.add("encoder.conv1.weight", {c1, rgb, 4, 4});
    layout.add("encoder.conv1.bias", {c1});
    layout.add("encoder.conv2.weight", {c2, c1, 4, 4});
    layout.add("encoder.conv2.bias", {c2});
    layout.add("encoder.conv3.weight", {c3, c2, 4, 4});
    layout.add("encoder.conv3.bias", {c3});
    layout.add("encoder.mu.weight", {dz, flat});
    layout.add("encoder.mu.bias", {dz});
    layout.add("encoder.logvar.weight", {dz, flat});
    layout.add("encoder.logvar.bias", {dz});
    layout.add("decoder.fc.weight", {flat, dz});
    layout.add("decoder.fc.bias", {flat});
    layout.add("decoder.deconv1.weight", {c3, c2, 4, 4});
    layout.add("decoder.deconv1.bias", {c2});
    layout.add("decoder.deconv2.weight", {c2, c1, 4, 4});
    layout.add("decoder.deconv2.bias", {c1});
    layout.add("decoder.deconv3.weight", {c1, rgb, 4, 4});
    layout.add("decoder.deconv3.bias", {rgb});
    return layout;
}

VpeParameters VpeParameters::initialize(const VpeArchitecture& arch, std::uint64_t seed) {
    VpeParameters p;
    p.arch_ = arch;
    p.layout_ = make_layout(arch);
    p.values_.assign(p.layout_.total(), 0.0);

    std::mt19937_64 rng(seed);
    auto fill = [&](std::size_t slot, double fan_in, double gain) {
        std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / fan_in));
        auto s = p.layout_.slot(slot);
        for (std::size_t i = 0; i < s.count; ++i) p.values_[s.offset + i] = normal(rng);
    };
    const double flat = arch.flat_features();
    fill(kConv1W, Image::kChannels * 16.0, 1.0);
    fill(kConv2W, arch.channels[0] * 16.0, 1.0);
    fill(kConv3W, arch.channels[1] * 16.0, 1.0);
    fill(kMuW, flat, 0.5);
    fill(kLogVarW, flat, 0.05);
    fill(kFcW, arch.latent_dim, 1.0);
    // A stride-2 4x4 transposed conv feeds each output from in_channels * 4 taps.
    fill(kDeconv1W, arch.channels[2] * 4.0, 1.0);
    fill(kDeconv2W, arch.channels[1] * 4.0, 1.0);
    fill(kDeconv3W, arch.channels[0] * 4.0, 0.5);
    return p;
}

VpeParameters VpeParameters::from_values(const VpeArchitecture& arch, std::vector<double> values) {
    VpeParameters p;
    p.arch_ = arch;
    p.layout_ = make_layout(arch);
    if (values.size() != p.layout_.total()) {
        throw ShapeError("parameter vector has " + std::to_string(values.size()) + " entries, architecture needs " +
                         std::to_string(p.layout_.total()));
    }
    p.values_ = std::move(values);
    return p;
}

bool VpeParameters::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

LinearHead LinearHead::zeros(int class_count, int latent_dim) {
    return {nn::Matrix::Zero(class_count, latent_dim), nn::Vector::Zero(class_count)};
}

void round_to_storage_precision(Model& model) {
    auto round = [](double& v) { v = static_cast<double>(static_cast<float>(v)); };
    for (double& v : model.vpe.values()) round(v);
    for (long i = 0; i < model.head.weight.size(); ++i) round(model.head.weight.data()[i]);
    for (long i = 0; i < model.head.bias.size(); ++i) round(model.head.bias.data()[i]);
}

// --- catalog ----------------------------------------------------------------------------

PrototypeCatalog PrototypeCatalog::from_specs(std::span<const SignClassSpec> specs, int canvas) {
    std::vector<std::pair<int, Image>> prototypes;
    prototypes.reserve(specs.size());
    for (const auto& spec : specs) prototypes.emplace_back(spec.class_id, render_prototype(spec, canvas));
    return from_images(std::move(prototypes));
}

PrototypeCatalog PrototypeCatalog::from_images(std::vector<std::pair<int, Image>> prototypes) {
    std::sort(prototypes.begin(), prototypes.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    PrototypeCatalog catalog;
    for (auto& [id, image] : prototypes) {
        if (!catalog.entries.empty() && catalog.entries.back().class_id == id) {
            throw ConfigError("duplicate prototype for class " + std::to_string(id));
        }
        catalog.entries.push_back({id, std::move(image), {}});
    }
    return catalog;
}

bool PrototypeCatalog::contains(int class_id) const {
    return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.class_id == class_id; });
}

const PrototypeEntry& PrototypeCatalog::at(int class_id) const {
    for (const auto& e : entries) {
        if (e.class_id == class_id) return e;
    }
    throw ConfigError("class " + std::to_string(class_id) + " is not in the prototype catalog");
}

std::vector<int> PrototypeCatalog::class_ids() const {
    std::vector<int> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.class_id);
    return ids;
}

void require_matching_version(const PrototypeCatalog& catalog, const VpeParameters& params) {
    if (catalog.version != params.version) {
        throw ConfigError("prototype catalog version " + std::to_string(catalog.version) +
                          " does not match encoder version " + std::to_string(params.version));
    }
}

// --- network passes ---------------------------------------------------------------------

namespace network {

nn::Matrix to_channel_major(std::span<const Image* const> images) {
    if (images.empty()) return {};
    const int h = images.front()->height();
    const int w = images.front()->width();
    const long plane = static_cast<long>(h) * w;
    nn::Matrix m(Image::kChannels, plane * static_cast<long>(images.size()));
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = *images[b];
        if (img.height() != h || img.width() != w) throw ShapeError("batch images differ in size");
        const auto data = img.data();
        for (long p = 0; p < plane; ++p) {
            for (int c = 0; c < Image::kChannels; ++c) {
                m(c, static_cast<long>(b) * plane + p) = data[static_cast<std::size_t>(p) * Image::kChannels + c];
            }
        }
    }
    return m;
}

nn::Matrix to_channel_major(std::span<const Image> images) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& img : images) ptrs.push_back(&img);
    return to_channel_major(std::span<const Image* const>(ptrs));
}

Image logits_to_image(const nn::Matrix& logits, int index, int height, int width) {
    Image out(height, width);
    const long plane = static_cast<long>(height) * width;
    auto data = out.data();
    for (long p = 0; p < plane; ++p) {
        for (int c = 0; c < Image::kChannels; ++c) {
            data[static_cast<std::size_t>(p) * Image::kChannels + c] =
                static_cast<float>(nn::sigmoid(logits(c, index * plane + p)));
        }
    }
    return out;
}

EncoderPass encoder_forward(const VpeParameters& params, const nn::Matrix& input, int batch) {
    const auto& arch = params.architecture();
    const auto& layout = params.layout();
    const auto values = params.values();
    EncoderPass pass;
    pass.batch = batch;
    nn::Extent extent{batch, arch.canvas, arch.canvas};
    const nn::Matrix* current = &input;
    for (int block = 0; block < 3; ++block) {
        const auto shape = encoder_shape(arch, block);
        pass.activations[block] = nn::conv_forward(layout.matrix(kConv1W + 2 * block, values),
                                                   layout.vector(kConv1B + 2 * block, values), *current, extent,
                                                   shape, pass.conv[block]);
        nn::elu(pass.activations[block]);
        extent = pass.conv[block].out;
        current = &pass.activations[block];
    }
    pass.flat = flatten_maps(pass.activations[2], batch);
    pass.mean.noalias() = layout.matrix(kMuW, values) * pass.flat;
    pass.mean.colwise() += layout.vector(kMuB, values);
    pass.log_variance.noalias() = layout.matrix(kLogVarW, values) * pass.flat;
    pass.log_variance.colwise() += layout.vector(kLogVarB, values);
    return pass;
}

void encoder_backward(const VpeParameters& params, const EncoderPass& pass, const nn::Matrix& grad_mean,
                      const nn::Matrix& grad_log_variance, std::span<double> grad) {
    const auto& arch = params.architecture();
    const auto& layout = params.layout();
    const auto values = params.values();

    layout.matrix(kMuW, grad).noalias() += grad_mean * pass.flat.transpose();
    layout.vector(kMuB, grad) += grad_mean.rowwise().sum();
    nn::Matrix grad_flat = layout.matrix(kMuW, values).transpose() * grad_mean;
    if (grad_log_variance.size() > 0) {
        layout.matrix(kLogVarW, grad).noalias() += grad_log_variance * pass.flat.transpose();
        layout.vector(kLogVarB, grad) += grad_log_variance.rowwise().sum();
        grad_flat.noalias() += layout.matrix(kLogVarW, values).transpose() * grad_log_variance;
    }
    nn::Matrix grad_maps = unflatten_maps(grad_flat, arch.channels[2], pass.batch);
    for (int block = 2; block >= 0; --block) {
        nn::elu_backward(pass.activations[block], grad_maps);
        grad_maps = nn::conv_backward(layout.matrix(kConv1W + 2 * block, values), grad_maps, pass.conv[block],
                                      encoder_shape(arch, block), layout.matrix(kConv1W + 2 * block, grad),
                                      layout.vector(kConv1B + 2 * block, grad), block > 0);
    }
}

DecoderPass decoder_forward(const VpeParameters& params, const nn::Matrix& code) {
    const auto& arch = params.architecture();
    const auto& layout = params.layout();
    const auto values = params.values();
    DecoderPass pass;
    pass.batch = static_cast<int>(code.cols());
    pass.code = code;
    pass.hidden.noalias() = layout.matrix(kFcW, values) * code;
    pass.hidden.colwise() += layout.vector(kFcB, values);
    nn::elu(pass.hidden);
    pass.hidden_maps = unflatten_maps(pass.hidden, arch.channels[2], pass.batch);

    nn::Extent extent{pass.batch, arch.bottleneck(), arch.bottleneck()};
    const nn::Matrix* current = &pass.hidden_maps;
    nn::Matrix out;
    for (int block = 0; block < 3; ++block) {
        out = nn::deconv_forward(layout.matrix(kDeconv1W + 2 * block, values),
                                 layout.vector(kDeconv1B + 2 * block, values), *current, extent,
                                 decoder_shape(arch, block), pass.deconv[block]);
        extent = pass.deconv[block].out;
        if (block < 2) {
            nn::elu(out);
            pass.activations[block] = std::move(out);
            current = &pass.activations[block];
        }
    }
    pass.logits = std::move(out);
    return pass;
}

nn::Matrix decoder_backward(const VpeParameters& params, const DecoderPass& pass, const nn::Matrix& grad_logits,
                            std::span<double> grad) {
    const auto& arch = params.architecture();
    const auto& layout = params.layout();
    const auto values = params.values();
    nn::Matrix g = grad_logits;
    for (int block = 2; block >= 0; --block) {
        if (block < 2) nn::elu_backward(pass.activations[block], g);
        g = nn::deconv_backward(layout.matrix(kDeconv1W + 2 * block, values), g, pass.deconv[block],
                                decoder_shape(arch, block), layout.matrix(kDeconv1W + 2 * block, grad),
                                layout.vector(kDeconv1B + 2 * block, grad));
    }
    nn::Matrix grad_hidden = flatten_maps(g, pass.batch);
    nn::elu_backward(pass.hidden, grad_hidden);
    layout.matrix(kFcW, grad).noalias() += grad_hidden * pass.code.transpose();
    layout.vector(kFcB, grad) += grad_hidden.rowwise().sum();
    return layout.matrix(kFcW, values).transpose() * grad_hidden;
}

nn::Matrix head_logits(const LinearHead& head, const nn::Matrix& code) {
    nn::Matrix logits = head.weight * code;
    logits.colwise() += head.bias;
    return logits;
}

}  // namespace network

// --- inference --------------------------------------------------------------------------

LatentCode encode(const Image& image, const VpeParameters& params) {
    check_image_shape(image, params.architecture());
    const Image* one[] = {&image};
    const auto pass = network::encoder_forward(params, network::to_channel_major(one), 1);
    return {std::vector<double>(pass.mean.data(), pass.mean.data() + pass.mean.size())};
}

LatentCode encode(const Image& image, const VpeParameters& params, Sampled sampling) {
    check_image_shape(image, params.architecture());
    const Image* one[] = {&image};
    const auto pass = network::encoder_forward(params, network::to_channel_major(one), 1);
    const auto eps = standard_normal(pass.mean.rows(), 1, sampling.seed);
    LatentCode code;
    code.values.resize(static_cast<std::size_t>(pass.mean.rows()));
    for (long i = 0; i < pass.mean.rows(); ++i) {
        code.values[static_cast<std::size_t>(i)] =
            pass.mean(i, 0) + std::exp(0.5 * pass.log_variance(i, 0)) * eps(i, 0);
    }
    return code;
}

std::vector<LatentCode> encode_all(std::span<const Image> images, const VpeParameters& params) {
    constexpr std::size_t kChunk = 128;
    std::vector<LatentCode> codes;
    codes.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
        for (const auto& img : chunk) check_image_shape(img, params.architecture());
        const auto pass =
            network::encoder_forward(params, network::to_channel_major(chunk), static_cast<int>(chunk.size()));
        for (long b = 0; b < pass.mean.cols(); ++b) {
            LatentCode code;
            code.values.resize(static_cast<std::size_t>(pass.mean.rows()));
            for (long i = 0; i < pass.mean.rows(); ++i) code.values[static_cast<std::size_t>(i)] = pass.mean(i, b);
            codes.push_back(std::move(code));
        }
    }
    return codes;
}

Image decode(const LatentCode& code, const VpeParameters& params) {
    const auto& arch = params.architecture();
    check_code_shape(code, arch.latent_dim);
    const nn::Matrix z = nn::ConstMatrixMap(code.values.data(), arch.latent_dim, 1);
    const auto pass = network::decoder_forward(params, z);
    return network::logits_to_image(pass.logits, 0, arch.canvas, arch.canvas);
}

std::vector<double> classify(const LatentCode& code, const LinearHead& head) {
    check_code_shape(code, head.latent_dim());
    const nn::Matrix z = nn::ConstMatrixMap(code.values.data(), head.latent_dim(), 1);
    const nn::Matrix probs = nn::softmax_columns(network::head_logits(head, z));
    return std::vector<double>(probs.data(), probs.data() + probs.size());
}

PrototypeCatalog compute_centroids(const PrototypeCatalog& catalog, const VpeParameters& params) {
    PrototypeCatalog out = catalog;
    for (auto& entry : out.entries) entry.centroid = encode(entry.prototype, params);
    out.version = params.version;
    return out;
}

// --- losses -----------------------------------------------------------------------------

double bce_with_logit(double logit, double target) {
    return nn::softplus(logit) - target * logit;
}

double binary_cross_entropy(const Image& predicted, const Image& target) {
    if (predicted.height() != target.height() || predicted.width() != target.width()) {
        throw ShapeError("BCE operands differ in size");
    }
    constexpr double kClip = 1e-12;
    const auto p = predicted.data();
    const auto t = target.data();
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(static_cast<double>(p[i]), kClip, 1.0 - kClip);
        total += bce_with_logit(std::log(q / (1.0 - q)), t[i]);
    }
    return p.empty() ? 0.0 : total / static_cast<double>(p.size());
}

double gaussian_kl(std::span<const double> mean, std::span<const double> log_variance) {
    if (mean.size() != log_variance.size()) throw ShapeError("KL operands differ in size");
    double kl = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        kl += 0.5 * (mean[i] * mean[i] + std::exp(log_variance[i]) - 1.0 - log_variance[i]);
    }
    return kl;
}

ModelGradient ModelGradient::zeros_like(const Model& model) {
    return {std::vector<double>(model.vpe.size(), 0.0),
            nn::Matrix::Zero(model.head.weight.rows(), model.head.weight.cols()),
            nn::Vector::Zero(model.head.bias.size())};
}

void ModelGradient::set_zero() {
    std::fill(vpe.begin(), vpe.end(), 0.0);
    head_weight.setZero();
    head_bias.setZero();
}

double ModelGradient::max_abs() const {
    double m = 0.0;
    for (double v : vpe) m = std::max(m, std::abs(v));
    if (head_weight.size() > 0) m = std::max(m, head_weight.cwiseAbs().maxCoeff());
    if (head_bias.size() > 0) m = std::max(m, head_bias.cwiseAbs().maxCoeff());
    return m;
}

LossTerms bundle_objective(const Model& model, std::span<const LabeledView> batch, const ObjectiveWeights& weights,
                           std::uint64_t noise_seed, ModelGradient* grad) {
    if (batch.empty()) return {};
    const auto& params = model.vpe;
    const auto& arch = params.architecture();
    const int n = static_cast<int>(batch.size());
    std::vector<const Image*> inputs;
    std::vector<const Image*> targets;
    inputs.reserve(batch.size());
    targets.reserve(batch.size());
    for (const auto& v : batch) {
        check_image_shape(*v.image, arch);
        check_image_shape(*v.target, arch);
        inputs.push_back(v.image);
        targets.push_back(v.target);
    }
    const nn::Matrix input = network::to_channel_major(inputs);
    const nn::Matrix target = network::to_channel_major(targets);

    const auto enc = network::encoder_forward(params, input, n);
    const nn::Matrix eps = standard_normal(enc.mean.rows(), n, noise_seed);
    const nn::Matrix sigma = (0.5 * enc.log_variance.array()).exp().matrix();
    const nn::Matrix code = enc.mean + sigma.cwiseProduct(eps);
    const auto dec = network::decoder_forward(params, code);

    LossTerms terms;
    const double pixel_count = static_cast<double>(dec.logits.size());
    nn::Matrix grad_logits(dec.logits.rows(), dec.logits.cols());
    {
        double total = 0.0;
        const double* l = dec.logits.data();
        const double* t = target.data();
        double* g = grad_logits.data();
        for (long i = 0; i < dec.logits.size(); ++i) {
            total += bce_with_logit(l[i], t[i]);
            g[i] = (nn::sigmoid(l[i]) - t[i]) / pixel_count;
        }
        terms.recon = total / pixel_count;
    }
    double kl_total = 0.0;
    for (int b = 0; b < n; ++b) {
        for (long i = 0; i < enc.mean.rows(); ++i) {
            const double mu = enc.mean(i, b);
            const double lv = enc.log_variance(i, b);
            kl_total += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
        }
    }
    terms.kl = kl_total / n;

    nn::Matrix head_grad;
    bool any_labels = false;
    if (weights.ce_weight > 0.0) {
        const nn::Matrix probs = nn::softmax_columns(network::head_logits(model.head, enc.mean));
        head_grad = probs;
        double ce_total = 0.0;
        int labeled = 0;
        for (int b = 0; b < n; ++b) {
            const int label = batch[static_cast<std::size_t>(b)].label;
            if (label < 0) {
                head_grad.col(b).setZero();
                continue;
            }
            if (label >= model.head.class_count()) {
                throw ShapeError("label " + std::to_string(label) + " outside head with " +
                                 std::to_string(model.head.class_count()) + " classes");
            }
            ce_total += -std::log(std::max(probs(label, b), 1e-300));
            head_grad(label, b) -= 1.0;
            ++labeled;
        }
        any_labels = labeled > 0;
        terms.ce = any_labels ? ce_total / labeled : 0.0;
        if (any_labels) head_grad *= weights.ce_weight / labeled;
    }
    terms.total = terms.recon + weights.kl_weight * terms.kl + weights.ce_weight * terms.ce;
    if (!std::isfinite(terms.recon)) throw NumericalError("reconstruction loss is not finite", "recon");
    if (!std::isfinite(terms.kl)) throw NumericalError("KL term is not finite", "kl");
    if (!std::isfinite(terms.ce)) throw NumericalError("classifier cross-entropy is not finite", "ce");

    if (grad == nullptr) return terms;

    const nn::Matrix grad_code = network::decoder_backward(params, dec, grad_logits, grad->vpe);
    // d/dmu and d/dlogvar of reconstruction (via reparameterization) plus weighted KL.
    nn::Matrix grad_mean = grad_code + (weights.kl_weight / n) * enc.mean;
    nn::Matrix grad_logvar = 0.5 * grad_code.cwiseProduct(eps).cwiseProduct(sigma) +
                             (0.5 * weights.kl_weight / n) * (enc.log_variance.array().exp() - 1.0).matrix();
    if (any_labels) {
        grad->head_weight.noalias() += head_grad * enc.mean.transpose();
        grad->head_bias += head_grad.rowwise().sum();
        if (weights.head_trains_encoder) grad_mean.noalias() += model.head.weight.transpose() * head_grad;
    }
    network::encoder_backward(params, enc, grad_mean, grad_logvar, grad->vpe);
    return terms;
}

VpeLoss vpe_loss(const Image& image, const Image& target_prototype, const VpeParameters& params, double kl_weight,
                 std::uint64_t seed) {
    if (!(kl_weight >= 0.0)) throw ValidationError("kl_weight must be >= 0");
    Model model{params, LinearHead::zeros(1, params.architecture().latent_dim)};
    auto grad = ModelGradient::zeros_like(model);
    const LabeledView view{&image, &target_prototype, -1};
    const auto terms = bundle_objective(model, std::span(&view, 1), {kl_weight, 0.0, false}, seed, &grad);
    return {terms.total, terms.recon, terms.kl, std::move(grad.vpe)};
}

// --- training ---------------------------------------------------------------------------

std::vector<EpochLog> fit(Model& model, std::span<const LabeledSample> dataset, const PrototypeCatalog& catalog,
                          const FitOptions& options, const StepTerm& extra) {
    if (dataset.empty()) throw ConfigError("cannot train on an empty dataset");
    if (options.epochs < 1 || options.batch_size < 1) throw ConfigError("epochs and batch_size must be >= 1");
    std::vector<const Image*> targets;
    targets.reserve(dataset.size());
    for (const auto& s : dataset) targets.push_back(&catalog.at(s.label).prototype);

    nn::MomentumSgd vpe_opt(model.vpe.size(), options.momentum);
    nn::MomentumSgd head_w_opt(static_cast<std::size_t>(model.head.weight.size()), options.momentum);
    nn::MomentumSgd head_b_opt(static_cast<std::size_t>(model.head.bias.size()), options.momentum);
    auto grad = ModelGradient::zeros_like(model);

    const int warmup_epochs =
        std::max(1, static_cast<int>(std::lround(options.kl_warmup_fraction * options.epochs)));
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochLog> log;
    std::vector<LabeledView> views;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(options.seed, 0x5eed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        const double ramp = options.kl_warmup_fraction > 0.0
                                ? std::min(1.0, static_cast<double>(epoch + 1) / warmup_epochs)
                                : 1.0;
        ObjectiveWeights weights = options.weights;
        weights.kl_weight = options.kl_weight * ramp;

        EpochLog row{epoch, 0.0, 0.0, 0.0};
        int step = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size), ++step) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
            views.clear();
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = dataset[order[i]];
                views.push_back({&s.image, targets[order[i]], s.label});
            }
            grad.set_zero();
            LossTerms terms;
            try {
                terms = bundle_objective(model, views,
                                         weights, derive_seed(options.seed, 0xe95, static_cast<std::uint64_t>(epoch),
                                                              static_cast<std::uint64_t>(step)),
                                         &grad);
                if (extra) {
                    const auto more = extra(model, epoch, step, grad);
                    terms.consist += more.consist;
                    terms.total += more.total;
                }
            } catch (const NumericalError& e) {
                throw TrainingError(std::string("training diverged: ") + e.what(), epoch);
            }
            if (!std::isfinite(terms.total) || !std::isfinite(grad.max_abs())) {
                throw TrainingError("training diverged at epoch " + std::to_string(epoch), epoch);
            }
            vpe_opt.step(model.vpe.values(), grad.vpe, options.learning_rate);
            head_w_opt.step(std::span(model.head.weight.data(), static_cast<std::size_t>(model.head.weight.size())),
                            std::span<const double>(grad.head_weight.data(),
                                                    static_cast<std::size_t>(grad.head_weight.size())),
                            options.learning_rate);
            head_b_opt.step(std::span(model.head.bias.data(), static_cast<std::size_t>(model.head.bias.size())),
                            std::span<const double>(grad.head_bias.data(),
                                                    static_cast<std::size_t>(grad.head_bias.size())),
                            options.learning_rate);
            const double w = static_cast<double>(end - start);
            row.loss_recon += terms.recon * w;
            row.loss_kl += terms.kl * w;
            row.loss_total += terms.total * w;
        }
        const double n = static_cast<double>(dataset.size());
        row.loss_recon /= n;
        row.loss_kl /= n;
        row.loss_total /= n;
        log.push_back(row);
    }
    if (!model.vpe.all_finite()) throw TrainingError("parameters became non-finite", options.epochs - 1);
    return log;
}

TrainResult train_vpe(std::span<const LabeledSample> dataset, const PrototypeCatalog& catalog,
                      const TrainingConfig& config) {
    config.architecture.validate();
    for (const auto& s : dataset) {
        if (!catalog.contains(s.label)) {
            throw ConfigError("sample label " + std::to_string(s.label) + " has no prototype");
        }
    }
    int max_class = 0;
    for (int id : catalog.class_ids()) max_class = std::max(max_class, id);

    TrainResult result;
    result.model.vpe = VpeParameters::initialize(config.architecture, derive_seed(config.seed, 0x1417));
    result.model.head = LinearHead::zeros(max_class + 1, config.architecture.latent_dim);

    FitOptions options;
    options.epochs = config.epochs;
    options.batch_size = config.batch_size;
    options.learning_rate = config.learning_rate;
    options.momentum = config.momentum;
    options.kl_weight = config.kl_weight;
    options.kl_warmup_fraction = config.kl_warmup_fraction;
    options.weights = {config.kl_weight, config.head_weight, false};
    options.seed = config.seed;
    result.log = fit(result.model, dataset, catalog, options);

    round_to_storage_precision(result.model);
    result.model.vpe.version += 1;
    result.catalog = compute_centroids(catalog, result.model.vpe);
    return result;
}

std::string training_log_csv(std::span<const EpochLog> log) {
    std::ostringstream out;
    out.precision(9);
    out << "epoch,loss_recon,loss_kl,loss_total\n";
    for (const auto& row : log) {
        out << row.epoch << ',' << row.loss_recon << ',' << row.loss_kl << ',' << row.loss_total << '\n';
    }
    return out.str();
}

double nearest_centroid_accuracy(std::span<const LabeledSample> samples, const VpeParameters& params,
                                 const PrototypeCatalog& catalog) {
    if (samples.empty()) return 0.0;
    std::vector<Image> images;
    images.reserve(samples.size());
    for (const auto& s : samples) images.push_back(s.image);
    const auto codes = encode_all(images, params);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        int best_class = -1;
        for (const auto& e : catalog.entries) {
            double d = 0.0;
            for (std::size_t j = 0; j < e.centroid.values.size(); ++j) {
                const double diff = codes[i].values[j] - e.centroid.values[j];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                best_class = e.class_id;
            }
        }
        if (best_class == samples[i].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace signadapt
