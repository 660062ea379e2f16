#pragma once

// Confusion matrices, macro-averaged metrics and confusion analyses.

#include <cstdint>
#include <span>
#include <vector>

#include "signadapt/image.hpp"
#include "signadapt/vpe.hpp"

namespace signadapt {

/// K×K counts; rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {}
    static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows);

    std::size_t classes() const noexcept { return k_; }
    std::int64_t& at(std::size_t truth, std::size_t predicted) { return counts_.at(truth * k_ + predicted); }
    std::int64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * k_ + predicted); }

    std::int64_t total() const;
    std::int64_t trace() const;
    std::int64_t row_sum(std::size_t truth) const;
    std::int64_t col_sum(std::size_t predicted) const;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t k_ = 0;
    std::vector<std::int64_t> counts_;
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::int64_t support = 0;
};

struct MetricsReport {
    double precision = 0.0;  // macro
    double recall = 0.0;     // macro
    double f1 = 0.0;         // macro: mean of per-class F1
    double accuracy = 0.0;   // trace / total
    std::vector<ClassMetrics> per_class;
    ConfusionMatrix confusion;
};

/// Throws ValidationError for an empty or all-zero matrix.
MetricsReport compute_metrics(const ConfusionMatrix& confusion);

/// Classes whose share of all off-diagonal errors exceeds `mass_threshold`, by descending share.
std::vector<std::size_t> detect_catch_all(const ConfusionMatrix& confusion, double mass_threshold = 0.15);

struct ConfusionPair {
    std::size_t truth = 0;
    std::size_t predicted = 0;
    std::int64_t count = 0;

    friend bool operator==(const ConfusionPair&, const ConfusionPair&) = default;
};

/// The `top_k` largest non-zero off-diagonal cells; ties ordered by (row, col).
std::vector<ConfusionPair> confusion_pairs(const ConfusionMatrix& confusion, std::size_t top_k);

/// Nearest-centroid class id for each sample's mean code.
std::vector<int> predict_nearest_centroid(std::span<const LabeledSample> samples, const VpeParameters& params,
                                          const PrototypeCatalog& catalog);

/// Confusion over the catalog's classes (index = rank of the class id in the catalog).
ConfusionMatrix confusion_from_predictions(std::span<const int> class_ids, std::span<const int> truth,
                                           std::span<const int> predicted);

/// Predict with the nearest-centroid rule and score against the sample labels.
MetricsReport evaluate_model(std::span<const LabeledSample> samples, const VpeParameters& params,
                             const PrototypeCatalog& catalog);

}  // namespace signadapt
