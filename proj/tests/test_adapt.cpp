#include <doctest.h>

#include <cmath>
#include <random>

#include "signadapt/adapt.hpp"
#include "signadapt/errors.hpp"
#include "test_util.hpp"

using namespace signadapt;
using testutil::random_image;

namespace {

double naive_kl(const std::vector<double>& r, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
        if (r[k] > 0.0) s += r[k] * std::log(std::max(r[k], 1e-9) / std::max(q[k], 1e-9));
    }
    return s;
}

std::vector<double> random_simplex(std::mt19937_64& rng, int k) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> p(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (auto& v : p) sum += (v = e(rng));
    for (auto& v : p) v /= sum;
    return p;
}

Checkpoint tiny_checkpoint(const testutil::TinyData& data, std::uint64_t seed) {
    Checkpoint c;
    c.model = testutil::tiny_model(static_cast<int>(data.catalog.size()), seed);
    c.catalog = compute_centroids(data.catalog, c.model.vpe);
    return c;
}

RetrainConfig quick_retrain(double lambda) {
    RetrainConfig r;
    r.lambda_consist = lambda;
    r.epochs = 3;
    r.batch_size = 8;
    r.learning_rate = 0.01;
    r.seed = 4;
    return r;
}

}  // namespace

TEST_CASE("prediction KL worked examples and properties") {
    const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
    CHECK(prediction_kl(p, p) == doctest::Approx(0.0));
    CHECK(prediction_kl(p, q) == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
    // A zero in the current prediction is floored instead of producing infinity.
    const std::vector<double> hard{1.0, 0.0};
    CHECK(prediction_kl(p, hard) == doctest::Approx(0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-9)));
    CHECK_THROWS(prediction_kl(p, std::vector<double>{1.0}));
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const auto r = random_simplex(rng, 5), c = random_simplex(rng, 5);
        const double kl = prediction_kl(r, c);
        CHECK(kl >= -1e-12);
        CHECK(kl == doctest::Approx(naive_kl(r, c)).epsilon(1e-9));
    }
}

TEST_CASE("consistency loss is zero against itself and matches per-image KL") {
    const auto data = testutil::tiny_data(3, 3, 8, 1);
    const auto a = testutil::tiny_model(3, 2), b = testutil::tiny_model(3, 5);
    std::vector<Image> imgs;
    for (const auto& s : data.samples) imgs.push_back(s.image);
    CHECK(consistency_loss(a, a, imgs) == doctest::Approx(0.0).epsilon(1e-12));
    double want = 0.0;
    for (const auto& img : imgs) want += naive_kl(classify(encode(img, b.vpe), b.head), classify(encode(img, a.vpe), a.head));
    CHECK(consistency_loss(a, b, imgs) == doctest::Approx(want / static_cast<double>(imgs.size())).epsilon(1e-9));
    CHECK_THROWS_AS(consistency_loss(a, testutil::tiny_model(4, 1), imgs), ShapeError);
}

TEST_CASE("total loss gradient matches finite differences") {
    const auto data = testutil::tiny_data(3, 1, 8, 1);
    auto m = testutil::tiny_model(3, 3);
    auto ref = m;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto& v : ref.vpe.values()) v += 0.1 * nd(rng);
    for (long i = 0; i < ref.head.weight.size(); ++i) ref.head.weight.data()[i] += nd(rng);
    std::vector<LabeledView> views;
    std::vector<Image> originals;
    for (const auto& s : data.samples) {
        views.push_back({&s.image, &data.catalog.at(s.label).prototype, s.label});
        originals.push_back(s.image);
    }
    const double lambda = 0.7, kl = 1e-2;
    const auto f = [&](const Model& x) { return total_loss(x, ref, views, originals, lambda, kl, 9).terms.total; };
    const auto tl = total_loss(m, ref, views, originals, lambda, kl, 9);
    CHECK(tl.terms.consist > 0.0);
    const auto bundle = bundle_objective(m, views, {kl, 1.0, true}, 9, nullptr);
    CHECK(tl.terms.total == doctest::Approx(bundle.total + lambda * tl.terms.consist).epsilon(1e-12));

    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t i = 0; i < m.vpe.size(); i += 3) {
        auto a = m, b = m;
        a.vpe.values()[i] += h;
        b.vpe.values()[i] -= h;
        worst = std::max(worst, testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.vpe[i]));
    }
    for (long i = 0; i < m.head.weight.size(); ++i) {
        auto a = m, b = m;
        a.head.weight.data()[i] += h;
        b.head.weight.data()[i] -= h;
        worst = std::max(worst, testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.head_weight.data()[i]));
    }
    for (long i = 0; i < m.head.bias.size(); ++i) {
        auto a = m, b = m;
        a.head.bias[i] += h;
        b.head.bias[i] -= h;
        worst = std::max(worst, testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.head_bias[i]));
    }
    CHECK(worst <= 1e-3);
    CHECK_THROWS_AS(total_loss(m, ref, views, originals, -1.0, kl, 9), ValidationError);
}

TEST_CASE("zero lambda reduces the total loss to the bundled objective") {
    const auto data = testutil::tiny_data(2, 2, 8, 1);
    const auto m = testutil::tiny_model(2, 3), ref = testutil::tiny_model(2, 8);
    std::vector<LabeledView> views;
    std::vector<Image> originals;
    for (const auto& s : data.samples) {
        views.push_back({&s.image, &data.catalog.at(s.label).prototype, s.label});
        originals.push_back(s.image);
    }
    const auto tl = total_loss(m, ref, views, originals, 0.0, 1e-3, 2);
    CHECK(tl.terms.total == doctest::Approx(bundle_objective(m, views, {1e-3, 1.0, true}, 2, nullptr).total));
}

TEST_CASE("retrain bumps the version and records provenance") {
    const auto data = testutil::tiny_data(3, 6, 8, 2);
    const auto ck = tiny_checkpoint(data, 1);
    const auto r = retrain(ck, data.samples, data.samples, quick_retrain(1.0), "parent.ckpt");
    CHECK(r.checkpoint.model.vpe.version == ck.model.vpe.version + 1);
    CHECK(r.checkpoint.catalog.version == r.checkpoint.model.vpe.version);
    REQUIRE(r.checkpoint.meta.parent_version.has_value());
    CHECK(*r.checkpoint.meta.parent_version == ck.model.vpe.version);
    CHECK(r.checkpoint.meta.parent_path == "parent.ckpt");
    CHECK(r.log.size() == 3);
    CHECK_FALSE(r.checkpoint.model == ck.model);
    const auto again = retrain(ck, data.samples, data.samples, quick_retrain(1.0), "parent.ckpt");
    CHECK(again.checkpoint.model == r.checkpoint.model);
    auto bad = quick_retrain(1.0);
    bad.epochs = 0;
    CHECK_THROWS_AS(retrain(ck, data.samples, data.samples, bad), ValidationError);
}

TEST_CASE("the consistency term limits prediction drift on originals") {
    const auto data = testutil::tiny_data(3, 8, 8, 3);
    const auto ck = tiny_checkpoint(data, 2);
    // Fine-tune on shuffled labels: without the anchor the head drifts away from its old predictions.
    auto relabeled = data.samples;
    for (auto& s : relabeled) s.label = (s.label + 1) % 3;
    std::vector<Image> originals;
    for (const auto& s : data.samples) originals.push_back(s.image);
    const auto free = retrain(ck, relabeled, data.samples, quick_retrain(0.0));
    const auto anchored = retrain(ck, relabeled, data.samples, quick_retrain(20.0));
    CHECK(consistency_loss(anchored.checkpoint.model, ck.model, originals) <
          consistency_loss(free.checkpoint.model, ck.model, originals));
}

TEST_CASE("adaptation cycle below the trigger only buffers") {
    const auto data = testutil::tiny_data(3, 4, 16, 1);
    PipelineState state;
    state.live.model = {VpeParameters::initialize({16, 4, {4, 4, 4}}, 1), LinearHead::zeros(3, 4)};
    state.live.catalog = compute_centroids(data.catalog, state.live.model.vpe);
    state.thresholds = {1e-6, 0.9};  // flags everything
    state.originals = data.samples;
    AdaptationConfig cfg;
    cfg.trigger_min = 10;
    const std::vector<Image> stream{random_image(16, 1), random_image(16, 2), random_image(16, 3)};
    const auto report = adaptation_cycle(state, stream, cfg);
    CHECK_FALSE(report.fired);
    CHECK(report.flagged_count == 3);
    CHECK(state.buffer.size() == 3);
    CHECK(state.live.model.vpe.version == 0);
}

TEST_CASE("adaptation cycle retrains, recalibrates and writes its run directory") {
    const auto data = testutil::tiny_data(3, 4, 16, 1);
    PipelineState state;
    state.live.model = {VpeParameters::initialize({16, 4, {4, 4, 4}}, 1), LinearHead::zeros(3, 4)};
    state.live.catalog = compute_centroids(data.catalog, state.live.model.vpe);
    state.thresholds = {1e-6, 0.9};
    state.originals = data.samples;
    state.calibration_clean = data.samples;
    state.calibration_unknowns = {random_image(16, 7), random_image(16, 8)};
    const auto dir = testutil::fresh_dir("cycle");
    AdaptationConfig cfg;
    cfg.trigger_min = 2;
    cfg.augmentation = {1, 1, 3};
    cfg.style.iterations = 5;
    cfg.retrain = quick_retrain(1.0);
    cfg.run_dir = dir;
    const std::vector<Image> stream{random_image(16, 1), random_image(16, 2)};
    EvaluationSets eval{data.samples, data.samples};
    const auto report = adaptation_cycle(state, stream, cfg, &eval);
    CHECK(report.fired);
    CHECK(report.n_prime == 2 * 2);
    CHECK(state.live.model.vpe.version == 1);
    CHECK(state.buffer.empty());
    CHECK(report.pre_clean.has_value());
    CHECK(report.post_degraded.has_value());
    CHECK(std::filesystem::exists(dir / "events.jsonl"));
    CHECK(std::filesystem::exists(report.checkpoint_before));
    CHECK(std::filesystem::exists(report.checkpoint_after));
    CHECK(load_thresholds(dir / "thresholds.json") == state.thresholds);
    CHECK(to_json(report).find("\"fired\": true") != std::string::npos);
}

TEST_CASE("a failing adaptation cycle leaves the state untouched") {
    const auto data = testutil::tiny_data(3, 4, 16, 1);
    PipelineState state;
    state.live.model = {VpeParameters::initialize({16, 4, {4, 4, 4}}, 1), LinearHead::zeros(3, 4)};
    state.live.catalog = compute_centroids(data.catalog, state.live.model.vpe);
    state.thresholds = {1e-6, 0.9};
    // No originals: augmentation cannot draw content images.
    AdaptationConfig cfg;
    cfg.trigger_min = 1;
    cfg.augmentation = {1, 2, 3};
    cfg.style.iterations = 2;
    const auto before_model = state.live.model;
    const std::vector<Image> stream{random_image(16, 1)};
    CHECK_THROWS_AS(adaptation_cycle(state, stream, cfg), ConfigError);
    CHECK(state.live.model == before_model);
    CHECK(state.buffer.empty());
    CHECK(state.thresholds == Thresholds{1e-6, 0.9});
}

TEST_CASE("evaluate_split reports accuracy and F1 in [0,1]") {
    const auto data = testutil::tiny_data(3, 4, 8, 1);
    const auto ck = tiny_checkpoint(data, 1);
    const auto m = evaluate_split(ck, data.samples);
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    CHECK(m.f1 >= 0.0);
    CHECK(m.f1 <= 1.0);
    // Prototypes sit on their centroids, so they are classified perfectly.
    std::vector<LabeledSample> protos;
    for (const auto& e : ck.catalog.entries) protos.push_back({e.prototype, e.class_id, Origin::original, 0});
    CHECK(evaluate_split(ck, protos).accuracy == doctest::Approx(1.0));
}

TEST_CASE("retrain config validation") {
    CHECK_NOTHROW(RetrainConfig{}.validate());
    auto r = RetrainConfig{};
    r.lambda_consist = -0.1;
    CHECK_THROWS(r.validate());
    r = {};
    r.learning_rate = 0.0;
    CHECK_THROWS(r.validate());
}
