#include "signadapt/metrics.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>

#include "signadapt/errors.hpp"

namespace signadapt {

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
    ConfusionMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix must be square");
        for (std::size_t j = 0; j < rows.size(); ++j) {
            if (rows[i][j] < 0) throw ValidationError("confusion counts must be non-negative");
            m.at(i, j) = rows[i][j];
        }
    }
    return m;
}

std::int64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::trace() const {
    std::int64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, i);
    return t;
}

std::int64_t ConfusionMatrix::row_sum(std::size_t truth) const {
    std::int64_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
    return s;
}

std::int64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, predicted);
    return s;
}

MetricsReport compute_metrics(const ConfusionMatrix& confusion) {
    const std::size_t k = confusion.classes();
    if (k == 0 || confusion.total() == 0) throw ValidationError("confusion matrix is empty");
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            if (confusion.at(i, j) < 0) throw ValidationError("confusion counts must be non-negative");
        }
    }
    MetricsReport r;
    r.confusion = confusion;
    r.per_class.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
        auto& m = r.per_class[c];
        const auto tp = static_cast<double>(confusion.at(c, c));
        const auto col = confusion.col_sum(c);
        const auto row = confusion.row_sum(c);
        m.support = row;
        if (col == 0) {
            spdlog::warn("class index {} was never predicted; its precision is reported as 0", c);
        } else {
            m.precision = tp / static_cast<double>(col);
        }
        if (row == 0) {
            spdlog::warn("class index {} has no test samples; its recall is reported as 0", c);
        } else {
            m.recall = tp / static_cast<double>(row);
        }
        m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        r.precision += m.precision;
        r.recall += m.recall;
        r.f1 += m.f1;
    }
    const double kd = static_cast<double>(k);
    r.precision /= kd;
    r.recall /= kd;
    r.f1 /= kd;
    r.accuracy = static_cast<double>(confusion.trace()) / static_cast<double>(confusion.total());
    return r;
}

std::vector<std::size_t> detect_catch_all(const ConfusionMatrix& confusion, double mass_threshold) {
    const std::size_t k = confusion.classes();
    const std::int64_t errors = confusion.total() - confusion.trace();
    if (errors <= 0) return {};
    std::vector<std::pair<double, std::size_t>> heavy;
    for (std::size_t c = 0; c < k; ++c) {
        const double mass = static_cast<double>(confusion.col_sum(c) - confusion.at(c, c)) / static_cast<double>(errors);
        if (mass > mass_threshold) heavy.emplace_back(mass, c);
    }
    std::stable_sort(heavy.begin(), heavy.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> out;
    for (const auto& h : heavy) out.push_back(h.second);
    return out;
}

std::vector<ConfusionPair> confusion_pairs(const ConfusionMatrix& confusion, std::size_t top_k) {
    std::vector<ConfusionPair> cells;
    for (std::size_t i = 0; i < confusion.classes(); ++i) {
        for (std::size_t j = 0; j < confusion.classes(); ++j) {
            if (i != j && confusion.at(i, j) > 0) cells.push_back({i, j, confusion.at(i, j)});
        }
    }
    // Cells are generated in (row, col) order, so a stable sort keeps that as the tie-break.
    std::stable_sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
    if (cells.size() > top_k) cells.resize(top_k);
    return cells;
}

std::vector<int> predict_nearest_centroid(std::span<const LabeledSample> samples, const VpeParameters& params,
                                          const PrototypeCatalog& catalog) {
    require_matching_version(catalog, params);
    if (catalog.entries.empty()) throw ConfigError("prototype catalog is empty");
    std::vector<Image> images;
    images.reserve(samples.size());
    for (const auto& s : samples) images.push_back(s.image);
    const auto codes = encode_all(images, params);
    std::vector<int> out;
    out.reserve(codes.size());
    for (const auto& code : codes) {
        double best = std::numeric_limits<double>::infinity();
        int best_id = catalog.entries.front().class_id;
        for (const auto& e : catalog.entries) {
            double sq = 0.0;
            for (std::size_t i = 0; i < code.dim(); ++i) {
                const double d = code.values[i] - e.centroid.values[i];
                sq += d * d;
            }
            if (sq < best) {
                best = sq;
                best_id = e.class_id;
            }
        }
        out.push_back(best_id);
    }
    return out;
}

ConfusionMatrix confusion_from_predictions(std::span<const int> class_ids, std::span<const int> truth,
                                           std::span<const int> predicted) {
    if (truth.size() != predicted.size()) throw ShapeError("truth and prediction counts differ");
    std::map<int, std::size_t> index;
    for (std::size_t i = 0; i < class_ids.size(); ++i) index[class_ids[i]] = i;
    ConfusionMatrix m(class_ids.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = index.find(truth[i]);
        const auto p = index.find(predicted[i]);
        if (t == index.end() || p == index.end()) throw ConfigError("label outside the class list");
        ++m.at(t->second, p->second);
    }
    return m;
}

MetricsReport evaluate_model(std::span<const LabeledSample> samples, const VpeParameters& params,
                             const PrototypeCatalog& catalog) {
    const auto predicted = predict_nearest_centroid(samples, params, catalog);
    std::vector<int> truth;
    truth.reserve(samples.size());
    for (const auto& s : samples) truth.push_back(s.label);
    const auto ids = catalog.class_ids();
    return compute_metrics(confusion_from_predictions(ids, truth, predicted));
}

}  // namespace signadapt
