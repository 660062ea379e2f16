#include "signadapt/novelty.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "signadapt/errors.hpp"

namespace signadapt {

namespace {

constexpr double kMinTauD = 1e-12;

struct GridCounts {
    std::size_t clean_flagged = 0;
    std::size_t unknown_flagged = 0;
};

bool flags(const NoveltyScore& s, double tau_d, double tau_y) {
    return s.distance > tau_d || s.confidence < tau_y;
}

GridCounts count_flags(std::span<const NoveltyScore> clean, std::span<const NoveltyScore> unknown, double tau_d,
                       double tau_y) {
    GridCounts c;
    for (const auto& s : clean) c.clean_flagged += flags(s, tau_d, tau_y) ? 1 : 0;
    for (const auto& s : unknown) c.unknown_flagged += flags(s, tau_d, tau_y) ? 1 : 0;
    return c;
}

}  // namespace

void Thresholds::validate() const {
    if (!std::isfinite(tau_d) || !(tau_d > 0.0)) throw ValidationError("tau_d must be finite and > 0");
    if (!(tau_y > 0.0 && tau_y < 1.0)) throw ValidationError("tau_y must lie strictly inside (0,1)");
}

std::string_view to_string(Trigger trigger) {
    switch (trigger) {
        case Trigger::none: return "none";
        case Trigger::distance: return "distance";
        case Trigger::confidence: return "confidence";
        case Trigger::both: return "both";
    }
    return "none";
}

NearestCentroid latent_distance(const LatentCode& code, const PrototypeCatalog& catalog) {
    if (catalog.entries.empty()) throw ConfigError("prototype catalog is empty");
    NearestCentroid best{std::numeric_limits<double>::infinity(), 0};
    for (const auto& e : catalog.entries) {
        if (e.centroid.dim() != code.dim()) {
            throw ShapeError("code dimension " + std::to_string(code.dim()) + " differs from centroid dimension " +
                             std::to_string(e.centroid.dim()));
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < code.dim(); ++i) {
            const double d = code.values[i] - e.centroid.values[i];
            sq += d * d;
        }
        const double dist = std::sqrt(sq);
        if (dist < best.distance || (dist == best.distance && e.class_id < best.class_id)) {
            best = {dist, e.class_id};
        }
    }
    return best;
}

DetectionVerdict make_verdict(double distance, int nearest_class, std::span<const double> probabilities,
                              const Thresholds& thresholds) {
    if (probabilities.empty()) throw ShapeError("empty probability vector");
    DetectionVerdict v;
    const auto top = std::max_element(probabilities.begin(), probabilities.end());
    v.predicted_label = static_cast<int>(top - probabilities.begin());
    v.confidence = *top;
    v.distance = distance;
    v.nearest_class = nearest_class;
    const bool far = distance > thresholds.tau_d;
    const bool unsure = v.confidence < thresholds.tau_y;
    v.trigger = far && unsure ? Trigger::both : far ? Trigger::distance : unsure ? Trigger::confidence : Trigger::none;
    v.flagged = v.trigger != Trigger::none;
    return v;
}

DetectionVerdict judge(const Image& image, const Model& model, const PrototypeCatalog& catalog,
                       const Thresholds& thresholds) {
    require_matching_version(catalog, model.vpe);
    const auto code = encode(image, model.vpe);
    const auto nearest = latent_distance(code, catalog);
    const auto probs = classify(code, model.head);
    return make_verdict(nearest.distance, nearest.class_id, probs, thresholds);
}

std::vector<DetectionVerdict> judge_all(std::span<const Image> images, const Model& model,
                                        const PrototypeCatalog& catalog, const Thresholds& thresholds) {
    require_matching_version(catalog, model.vpe);
    const auto codes = encode_all(images, model.vpe);
    std::vector<DetectionVerdict> out;
    out.reserve(codes.size());
    for (const auto& code : codes) {
        const auto nearest = latent_distance(code, catalog);
        const auto probs = classify(code, model.head);
        out.push_back(make_verdict(nearest.distance, nearest.class_id, probs, thresholds));
    }
    return out;
}

std::vector<NoveltyScore> novelty_scores(std::span<const Image> images, const Model& model,
                                         const PrototypeCatalog& catalog) {
    require_matching_version(catalog, model.vpe);
    const auto codes = encode_all(images, model.vpe);
    std::vector<NoveltyScore> out;
    out.reserve(codes.size());
    for (const auto& code : codes) {
        const auto probs = classify(code, model.head);
        out.push_back({latent_distance(code, catalog).distance, *std::max_element(probs.begin(), probs.end())});
    }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ValidationError("percentile of an empty sample");
    if (!(q >= 0.0 && q <= 100.0)) throw ValidationError("percentile rank must lie in [0,100]");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

CalibrationResult calibrate_from_scores(std::span<const NoveltyScore> clean, std::span<const NoveltyScore> unknown) {
    if (clean.empty() || unknown.empty()) {
        throw ValidationError("calibration needs clean and unknown samples");
    }
    std::vector<double> distances;
    distances.reserve(clean.size());
    for (const auto& s : clean) distances.push_back(s.distance);

    CalibrationResult best;
    best.f1 = -1.0;
    bool separates = false;
    const double n_clean = static_cast<double>(clean.size());
    const double n_unknown = static_cast<double>(unknown.size());
    for (int q = 50; q <= 99; ++q) {
        const double tau_d = std::max(percentile(distances, q), kMinTauD);
        for (int i = 16; i >= 0; --i) {
            const double tau_y = 0.10 + 0.05 * i;
            const auto c = count_flags(clean, unknown, tau_d, tau_y);
            if (static_cast<double>(c.unknown_flagged) / n_unknown > static_cast<double>(c.clean_flagged) / n_clean) {
                separates = true;
            }
            const double tp = static_cast<double>(c.unknown_flagged);
            const double fp = static_cast<double>(c.clean_flagged);
            const double fn = n_unknown - tp;
            const double f1 = tp > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
            if (f1 > best.f1) best = {{tau_d, tau_y}, f1, false};
        }
    }
    if (!separates) {
        spdlog::warn("threshold calibration is degenerate: no grid pair separates unknowns from clean inputs");
        const double tau_d = std::max(percentile(distances, 99.0), kMinTauD);
        const auto c = count_flags(clean, unknown, tau_d, 0.5);
        const double tp = static_cast<double>(c.unknown_flagged);
        const double f1 = tp > 0.0 ? 2.0 * tp / (2.0 * tp + static_cast<double>(c.clean_flagged) + n_unknown - tp) : 0.0;
        return {{tau_d, 0.5}, f1, true};
    }
    return best;
}

Thresholds calibrate_thresholds(std::span<const LabeledSample> clean_validation,
                                std::span<const Image> synthetic_unknowns, const Model& model,
                                const PrototypeCatalog& catalog) {
    if (clean_validation.empty() || synthetic_unknowns.empty()) {
        throw ValidationError("calibration needs clean and unknown samples");
    }
    std::vector<Image> clean_images;
    clean_images.reserve(clean_validation.size());
    for (const auto& s : clean_validation) clean_images.push_back(s.image);
    const auto clean = novelty_scores(clean_images, model, catalog);
    const auto unknown = novelty_scores(synthetic_unknowns, model, catalog);
    const auto result = calibrate_from_scores(clean, unknown);
    spdlog::info("calibrated tau_d={:.4f} tau_y={:.2f} (flag F1 {:.3f})", result.thresholds.tau_d,
                 result.thresholds.tau_y, result.f1);
    return result.thresholds;
}

std::string thresholds_to_json(const Thresholds& thresholds) {
    nlohmann::json j{{"tau_d", thresholds.tau_d}, {"tau_y", thresholds.tau_y}};
    return j.dump(2) + "\n";
}

Thresholds thresholds_from_json(std::string_view text) {
    Thresholds t;
    try {
        const auto j = nlohmann::json::parse(text);
        t.tau_d = j.at("tau_d").get<double>();
        t.tau_y = j.at("tau_y").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid thresholds JSON: ") + e.what());
    }
    t.validate();
    return t;
}

void save_thresholds(const std::filesystem::path& path, const Thresholds& thresholds) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << thresholds_to_json(thresholds);
}

Thresholds load_thresholds(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read thresholds file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return thresholds_from_json(ss.str());
}

std::string to_json_line(const OperatorEvent& event) {
    nlohmann::json j{{"seq", event.seq},
                     {"distance", event.distance},
                     {"confidence", event.confidence},
                     {"predicted_label", event.predicted_label},
                     {"trigger", std::string(to_string(event.trigger))}};
    return j.dump();
}

UnknownBuffer::UnknownBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ValidationError("buffer capacity must be >= 1");
}

void UnknownBuffer::push(Image image, const DetectionVerdict& verdict) {
    if (!verdict.flagged) throw ContractViolation("only flagged verdicts may enter the unknown buffer");
    const std::uint64_t seq = next_seq_++;
    entries_.push_back({std::move(image), verdict, seq});
    if (entries_.size() > capacity_) entries_.pop_front();
    events_.push_back({seq, verdict.distance, verdict.confidence, verdict.predicted_label, verdict.trigger});
    spdlog::debug("unfamiliar input #{} flagged ({})", seq, to_string(verdict.trigger));
}

std::vector<BufferEntry> UnknownBuffer::drain() {
    std::vector<BufferEntry> out(std::make_move_iterator(entries_.begin()), std::make_move_iterator(entries_.end()));
    entries_.clear();
    if (!out.empty()) spdlog::warn("operator warning: {} unfamiliar inputs handed to adaptation", out.size());
    return out;
}

std::vector<OperatorEvent> UnknownBuffer::take_events() {
    std::vector<OperatorEvent> out;
    out.swap(events_);
    return out;
}

void append_events(const std::filesystem::path& path, std::span<const OperatorEvent> events) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot append to " + path.string());
    for (const auto& e : events) out << to_json_line(e) << '\n';
}

}  // namespace signadapt
