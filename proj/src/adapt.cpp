#include "signadapt/adapt.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <json.hpp>
#include <random>

#include "signadapt/errors.hpp"
#include "signadapt/metrics.hpp"
#include "signadapt/vpe_network.hpp"

namespace signadapt {

namespace fs = std::filesystem;

void RetrainConfig::validate() const {
    if (!(lambda_consist >= 0.0) || !std::isfinite(lambda_consist)) {
        throw ValidationError("lambda_consist must be finite and >= 0");
    }
    if (epochs < 1) throw ValidationError("retraining needs at least one epoch");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ValidationError("learning_rate must lie in (0,1]");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(kl_weight >= 0.0)) throw ValidationError("kl_weight must be >= 0");
}

double prediction_kl(std::span<const double> reference, std::span<const double> current) {
    if (reference.size() != current.size()) throw ShapeError("probability vectors differ in length");
    double kl = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double r = reference[i];
        if (r == 0.0) continue;
        kl += r * (std::log(std::max(r, kConsistencyEpsilon)) - std::log(std::max(current[i], kConsistencyEpsilon)));
    }
    return kl;
}

nn::Matrix reference_predictions(const Model& model_ref, std::span<const Image> originals) {
    const auto codes = encode_all(originals, model_ref.vpe);
    nn::Matrix z(model_ref.vpe.architecture().latent_dim, static_cast<long>(codes.size()));
    for (std::size_t b = 0; b < codes.size(); ++b) {
        for (std::size_t i = 0; i < codes[b].dim(); ++i) z(static_cast<long>(i), static_cast<long>(b)) = codes[b].values[i];
    }
    return nn::softmax_columns(network::head_logits(model_ref.head, z));
}

double consistency_term(const Model& model, std::span<const Image* const> originals, const nn::Matrix& reference,
                        double lambda, ModelGradient* grad) {
    if (originals.empty()) return 0.0;
    const long n = static_cast<long>(originals.size());
    if (reference.cols() != n || reference.rows() != model.head.class_count()) {
        throw ShapeError("reference predictions do not match the consistency batch");
    }
    const auto enc = network::encoder_forward(model.vpe, network::to_channel_major(originals), static_cast<int>(n));
    const nn::Matrix q = nn::softmax_columns(network::head_logits(model.head, enc.mean));
    double total = 0.0;
    nn::Matrix g(q.rows(), q.cols());
    for (long b = 0; b < n; ++b) {
        double live_mass = 0.0;  // Σ_j r_j over entries whose probability is above the floor
        for (long k = 0; k < q.rows(); ++k) {
            const double r = reference(k, b);
            if (r != 0.0) {
                total += r * (std::log(std::max(r, kConsistencyEpsilon)) - std::log(std::max(q(k, b), kConsistencyEpsilon)));
            }
            if (q(k, b) > kConsistencyEpsilon) live_mass += r;
        }
        for (long k = 0; k < q.rows(); ++k) {
            const double own = q(k, b) > kConsistencyEpsilon ? reference(k, b) : 0.0;
            g(k, b) = q(k, b) * live_mass - own;
        }
    }
    const double value = total / static_cast<double>(n);
    if (!std::isfinite(value)) throw NumericalError("consistency loss is not finite", "consist");
    if (grad != nullptr && lambda != 0.0) {
        g *= lambda / static_cast<double>(n);
        grad->head_weight.noalias() += g * enc.mean.transpose();
        grad->head_bias += g.rowwise().sum();
        const nn::Matrix grad_mean = model.head.weight.transpose() * g;
        network::encoder_backward(model.vpe, enc, grad_mean, nn::Matrix(), grad->vpe);
    }
    return value;
}

double consistency_loss(const Model& model_new, const Model& model_ref, std::span<const Image> originals) {
    if (model_new.vpe.architecture() != model_ref.vpe.architecture() ||
        model_new.head.class_count() != model_ref.head.class_count()) {
        throw ShapeError("consistency needs models with the same architecture");
    }
    if (originals.empty()) return 0.0;
    std::vector<const Image*> ptrs;
    for (const auto& img : originals) ptrs.push_back(&img);
    return consistency_term(model_new, ptrs, reference_predictions(model_ref, originals), 0.0, nullptr);
}

TotalLoss total_loss(const Model& model, const Model& model_ref, std::span<const LabeledView> mixed_batch,
                     std::span<const Image> originals_batch, double lambda, double kl_weight,
                     std::uint64_t noise_seed) {
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
    TotalLoss out{{}, ModelGradient::zeros_like(model)};
    out.terms = bundle_objective(model, mixed_batch, {kl_weight, 1.0, true}, noise_seed, &out.gradient);
    std::vector<const Image*> ptrs;
    for (const auto& img : originals_batch) ptrs.push_back(&img);
    if (!ptrs.empty()) {
        const nn::Matrix reference = reference_predictions(model_ref, originals_batch);
        out.terms.consist = consistency_term(model, ptrs, reference, lambda, &out.gradient);
        out.terms.total += lambda * out.terms.consist;
    }
    if (!std::isfinite(out.terms.total)) throw NumericalError("total loss is not finite", "total");
    return out;
}

RetrainResult retrain(const Checkpoint& checkpoint_in, std::span<const LabeledSample> mixed,
                      std::span<const LabeledSample> originals, const RetrainConfig& config,
                      const std::string& parent_path) {
    config.validate();
    if (mixed.empty()) throw ConfigError("retraining needs a non-empty mixed dataset");
    require_matching_version(checkpoint_in.catalog, checkpoint_in.model.vpe);

    Model model = checkpoint_in.model;
    std::vector<Image> anchor_images;
    anchor_images.reserve(originals.size());
    for (const auto& s : originals) anchor_images.push_back(s.image);
    const nn::Matrix reference = anchor_images.empty() || config.lambda_consist == 0.0
                                     ? nn::Matrix()
                                     : reference_predictions(checkpoint_in.model, anchor_images);

    StepTerm consistency;
    if (reference.size() > 0) {
        consistency = [&](const Model& m, int epoch, int step, ModelGradient& grad) {
            std::mt19937_64 rng(derive_seed(config.seed, 0xc0, static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(step)));
            std::uniform_int_distribution<std::size_t> pick(0, anchor_images.size() - 1);
            const std::size_t count = std::min(anchor_images.size(), static_cast<std::size_t>(config.batch_size));
            std::vector<const Image*> batch;
            nn::Matrix ref(reference.rows(), static_cast<long>(count));
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t idx = pick(rng);
                batch.push_back(&anchor_images[idx]);
                ref.col(static_cast<long>(i)) = reference.col(static_cast<long>(idx));
            }
            LossTerms t;
            t.consist = consistency_term(m, batch, ref, config.lambda_consist, &grad);
            t.total = config.lambda_consist * t.consist;
            return t;
        };
    }

    FitOptions options;
    options.epochs = config.epochs;
    options.batch_size = config.batch_size;
    options.learning_rate = config.learning_rate;
    options.momentum = config.momentum;
    options.kl_weight = config.kl_weight;
    options.kl_warmup_fraction = 0.0;
    options.weights = {config.kl_weight, 1.0, true};
    options.seed = config.seed;

    RetrainResult result;
    result.log = fit(model, mixed, checkpoint_in.catalog, options, consistency);
    round_to_storage_precision(model);
    model.vpe.version = checkpoint_in.model.vpe.version + 1;
    result.checkpoint.catalog = compute_centroids(checkpoint_in.catalog, model.vpe);
    result.checkpoint.model = std::move(model);
    auto& meta = result.checkpoint.meta;
    meta.version = result.checkpoint.model.vpe.version;
    meta.parent_version = checkpoint_in.model.vpe.version;
    meta.parent_path = parent_path;
    meta.data_fingerprint = dataset_fingerprint(mixed);
    meta.seed = config.seed;
    meta.epochs = config.epochs;
    meta.note = "fine-tuned with consistency weight " + std::to_string(config.lambda_consist);
    return result;
}

SplitMetrics evaluate_split(const Checkpoint& checkpoint, std::span<const LabeledSample> samples) {
    const auto report = evaluate_model(samples, checkpoint.model.vpe, checkpoint.catalog);
    return {report.accuracy, report.f1};
}

namespace {

nlohmann::json split_json(const std::optional<SplitMetrics>& m) {
    if (!m) return nullptr;
    return {{"accuracy", m->accuracy}, {"f1", m->f1}};
}

fs::path checkpoint_path(const fs::path& run_dir, std::uint64_t version) {
    return run_dir / ("ckpt_" + std::to_string(version));
}

}  // namespace

std::string to_json(const AdaptationReport& r) {
    nlohmann::json j;
    j["fired"] = r.fired;
    j["stream_size"] = r.stream_size;
    j["flagged_count"] = r.flagged_count;
    j["n_prime"] = r.n_prime;
    j["pre"] = {{"clean", split_json(r.pre_clean)}, {"degraded", split_json(r.pre_degraded)}};
    j["post"] = {{"clean", split_json(r.post_clean)}, {"degraded", split_json(r.post_degraded)}};
    j["wall_time"] = r.wall_time;
    j["checkpoint_before"] = {{"version", r.version_before}, {"path", r.checkpoint_before}};
    j["checkpoint_after"] = {{"version", r.version_after}, {"path", r.checkpoint_after}};
    j["thresholds_after"] = {{"tau_d", r.thresholds_after.tau_d}, {"tau_y", r.thresholds_after.tau_y}};
    return j.dump(2) + "\n";
}

AdaptationReport adaptation_cycle(PipelineState& state, std::span<const Image> stream, const AdaptationConfig& config,
                                  const EvaluationSets* evaluation) {
    const auto start = std::chrono::steady_clock::now();
    AdaptationReport report;
    report.stream_size = stream.size();
    report.version_before = state.live.model.vpe.version;
    report.version_after = report.version_before;
    report.thresholds_after = state.thresholds;
    if (config.run_dir) report.checkpoint_before = checkpoint_path(*config.run_dir, report.version_before).string();

    // Everything below works on copies; `state` changes only in the final commit.
    UnknownBuffer buffer = state.buffer;
    const auto verdicts = judge_all(stream, state.live.model, state.live.catalog, state.thresholds);
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        if (!verdicts[i].flagged) continue;
        ++report.flagged_count;
        buffer.push(stream[i], verdicts[i]);
    }
    const auto events = buffer.take_events();
    if (config.run_dir && !events.empty()) {
        fs::create_directories(*config.run_dir);
        append_events(*config.run_dir / "events.jsonl", events);
    }
    if (evaluation != nullptr) {
        if (!evaluation->clean_test.empty()) report.pre_clean = evaluate_split(state.live, evaluation->clean_test);
        if (!evaluation->degraded_test.empty()) {
            report.pre_degraded = evaluate_split(state.live, evaluation->degraded_test);
        }
    }
    if (buffer.size() < config.trigger_min) {
        spdlog::info("{} of {} inputs flagged; buffer holds {} (< {}), no adaptation", report.flagged_count,
                     stream.size(), buffer.size(), config.trigger_min);
        state.buffer = std::move(buffer);
        report.post_clean = report.pre_clean;
        report.post_degraded = report.pre_degraded;
        report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return report;
    }

    const auto entries = buffer.drain();
    std::vector<UnknownCapture> unknowns;
    unknowns.reserve(entries.size());
    for (const auto& e : entries) unknowns.push_back({e.image, e.verdict.nearest_class});
    spdlog::info("adaptation fired: {} buffered unknowns", unknowns.size());

    const auto aug = build_augmentation_set(unknowns, state.live.catalog, state.originals, config.augmentation,
                                            config.style);
    report.n_prime = aug.samples.size();
    const std::size_t target = config.mixed_size > 0 ? config.mixed_size : state.originals.size();
    const auto mixed = mix_datasets(state.originals, aug.samples, config.mix_p, target,
                                    derive_seed(config.retrain.seed, 0x313));
    auto result = retrain(state.live, mixed.samples, state.originals, config.retrain, report.checkpoint_before);

    Thresholds thresholds = state.thresholds;
    if (!state.calibration_clean.empty() && !state.calibration_unknowns.empty()) {
        thresholds = calibrate_thresholds(state.calibration_clean, state.calibration_unknowns, result.checkpoint.model,
                                          result.checkpoint.catalog);
    }
    if (config.run_dir) {
        const auto before = checkpoint_path(*config.run_dir, report.version_before);
        if (!fs::exists(before)) save_checkpoint(before, state.live);
        const auto after = checkpoint_path(*config.run_dir, result.checkpoint.model.vpe.version);
        save_checkpoint(after, result.checkpoint);
        report.checkpoint_after = after.string();
        save_thresholds(*config.run_dir / "thresholds.json", thresholds);
    }
    if (evaluation != nullptr) {
        if (!evaluation->clean_test.empty()) report.post_clean = evaluate_split(result.checkpoint, evaluation->clean_test);
        if (!evaluation->degraded_test.empty()) {
            report.post_degraded = evaluate_split(result.checkpoint, evaluation->degraded_test);
        }
    }

    // Commit: swap the live model, thresholds and the drained buffer together.
    state.live = std::move(result.checkpoint);
    state.thresholds = thresholds;
    state.buffer = std::move(buffer);
    report.fired = true;
    report.version_after = state.live.model.vpe.version;
    report.thresholds_after = thresholds;
    report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace signadapt
