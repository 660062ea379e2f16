#pragma once

// Runtime novelty monitor: latent distance + classifier confidence, flag buffer, threshold calibration.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "signadapt/image.hpp"
#include "signadapt/vpe.hpp"

namespace signadapt {

struct Thresholds {
    double tau_d = 1.0;  // flag when distance > tau_d
    double tau_y = 0.5;  // flag when confidence < tau_y

    /// Throws ValidationError unless tau_d is finite positive and tau_y in (0,1).
    void validate() const;
    friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

enum class Trigger { none, distance, confidence, both };

std::string_view to_string(Trigger trigger);

struct DetectionVerdict {
    int predicted_label = 0;  // argmax of the head
    double confidence = 0.0;  // max softmax probability
    double distance = 0.0;    // to the nearest centroid
    int nearest_class = 0;    // pseudo-label used for augmentation
    bool flagged = false;
    Trigger trigger = Trigger::none;
};

struct NearestCentroid {
    double distance = 0.0;
    int class_id = 0;
};

/// min_c ‖z − z_c‖₂, ties to the smaller class id. Throws ConfigError on an empty catalog.
NearestCentroid latent_distance(const LatentCode& code, const PrototypeCatalog& catalog);

/// Applies the strict flag rule to precomputed scores.
DetectionVerdict make_verdict(double distance, int nearest_class, std::span<const double> probabilities,
                              const Thresholds& thresholds);

DetectionVerdict judge(const Image& image, const Model& model, const PrototypeCatalog& catalog,
                       const Thresholds& thresholds);
/// Batched judge; identical verdicts to calling judge per image.
std::vector<DetectionVerdict> judge_all(std::span<const Image> images, const Model& model,
                                        const PrototypeCatalog& catalog, const Thresholds& thresholds);

/// Distance and confidence of one input; what calibration consumes.
struct NoveltyScore {
    double distance = 0.0;
    double confidence = 0.0;
};

std::vector<NoveltyScore> novelty_scores(std::span<const Image> images, const Model& model,
                                         const PrototypeCatalog& catalog);

/// Linear-interpolation percentile (q in [0,100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

struct CalibrationResult {
    Thresholds thresholds;
    double f1 = 0.0;
    bool degenerate = false;
};

/// Grid search: tau_d over the 50th..99th percentiles of clean distances, tau_y over 0.10..0.90 step 0.05.
/// Maximizes flagging F1 with unknowns as positives; ties prefer smaller tau_d, then larger tau_y.
/// When no grid pair separates the sets (flag rate on unknowns never exceeds the clean rate) the
/// result is degenerate: 99th percentile and tau_y = 0.5.
CalibrationResult calibrate_from_scores(std::span<const NoveltyScore> clean, std::span<const NoveltyScore> unknown);

Thresholds calibrate_thresholds(std::span<const LabeledSample> clean_validation,
                                std::span<const Image> synthetic_unknowns, const Model& model,
                                const PrototypeCatalog& catalog);

std::string thresholds_to_json(const Thresholds& thresholds);
Thresholds thresholds_from_json(std::string_view text);
void save_thresholds(const std::filesystem::path& path, const Thresholds& thresholds);
Thresholds load_thresholds(const std::filesystem::path& path);

struct BufferEntry {
    Image image;
    DetectionVerdict verdict;
    std::uint64_t timestamp = 0;  // monotone push counter
};

/// Operator-facing record for a flagged input.
struct OperatorEvent {
    std::uint64_t seq = 0;
    double distance = 0.0;
    double confidence = 0.0;
    int predicted_label = 0;
    Trigger trigger = Trigger::none;
};

std::string to_json_line(const OperatorEvent& event);

/// FIFO store of flagged inputs awaiting augmentation.
class UnknownBuffer {
public:
    explicit UnknownBuffer(std::size_t capacity = 256);

    /// Appends a flagged entry, evicting the oldest beyond capacity. Throws ContractViolation if unflagged.
    void push(Image image, const DetectionVerdict& verdict);
    /// Returns every entry in arrival order and empties the buffer.
    std::vector<BufferEntry> drain();

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    bool empty() const noexcept { return entries_.empty(); }
    const std::deque<BufferEntry>& entries() const noexcept { return entries_; }

    /// Events emitted by push (one each) since the last take_events call.
    std::vector<OperatorEvent> take_events();

private:
    std::deque<BufferEntry> entries_;
    std::vector<OperatorEvent> events_;
    std::size_t capacity_;
    std::uint64_t next_seq_ = 0;
};

/// Appends events as JSON lines.
void append_events(const std::filesystem::path& path, std::span<const OperatorEvent> events);

}  // namespace signadapt
