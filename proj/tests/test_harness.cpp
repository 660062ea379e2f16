#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "signadapt/errors.hpp"
#include "signadapt/harness.hpp"
#include "signadapt/image_io.hpp"
#include "test_util.hpp"

using namespace signadapt;
namespace fs = std::filesystem;

namespace {

HarnessConfig small_harness() {
    HarnessConfig h;
    h.data.classes = 3;
    h.data.train_per_class = 8;
    h.data.test_per_class = 4;
    h.data.validation_per_class = 2;
    h.data.canvas = 16;
    h.data.seed = 5;
    h.training.architecture = {16, 4, {4, 8, 8}};
    h.training.epochs = 2;
    h.training.batch_size = 8;
    h.training.learning_rate = 0.05;
    h.finetune.epochs = 1;
    h.finetune.batch_size = 8;
    return h;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// One shared matrix run keeps the suite fast.
const std::vector<ExperimentResult>& small_matrix() {
    static const auto results = [] {
        const auto cfg = small_harness();
        return run_matrix(build_datasets(cfg), cfg);
    }();
    return results;
}

}  // namespace

TEST_CASE("benchmark splits are sized, seeded and disjoint") {
    BenchmarkConfig cfg = small_harness().data;
    const auto a = make_benchmark(cfg);
    CHECK(a.train.size() == 24);
    CHECK(a.test.size() == 12);
    CHECK(a.validation.size() == 6);
    CHECK(a.catalog.size() == 3);
    const auto b = make_benchmark(cfg);
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].image == b.train[i].image);
    CHECK_FALSE(a.train[0].image == a.test[0].image);
    CHECK_FALSE(a.train[0].image == a.validation[0].image);
    cfg.classes = 1;
    CHECK_THROWS_AS(make_benchmark(cfg), ConfigError);
}

TEST_CASE("degraded splits keep labels and differ from the source") {
    const auto bench = make_benchmark(small_harness().data);
    const auto aug = degrade_samples(bench.test, DegradationKind::rust, 0.8, 3);
    REQUIRE(aug.size() == bench.test.size());
    for (std::size_t i = 0; i < aug.size(); ++i) {
        CHECK(aug[i].label == bench.test[i].label);
        CHECK(aug[i].origin == Origin::augmented);
        CHECK(mean_abs_difference(aug[i].image, bench.test[i].image) > 0.0);
    }
}

TEST_CASE("synthetic unknowns are deterministic and counted") {
    const auto bench = make_benchmark(small_harness().data);
    const auto u = synthetic_unknowns(bench.validation, 9, 1);
    CHECK(u.size() == 9);
    const auto v = synthetic_unknowns(bench.validation, 9, 1);
    for (std::size_t i = 0; i < u.size(); ++i) CHECK(u[i] == v[i]);
    CHECK_THROWS_AS(synthetic_unknowns({}, 3, 1), ConfigError);
}

TEST_CASE("experiment specs") {
    const auto m = experiment_matrix();
    CHECK(m[0] == ExperimentSpec{1, TrainSource::orig, TestSource::orig});
    CHECK(m[3] == ExperimentSpec{4, TrainSource::orig_plus_aug, TestSource::aug});
    CHECK(m[5] == ExperimentSpec{6, TrainSource::aug, TestSource::aug});
    CHECK_THROWS_AS(ExperimentSpec::by_id(0), ConfigError);
    CHECK_THROWS_AS(ExperimentSpec::by_id(7), ConfigError);
    CHECK(parse_aug_source("nst") == AugSource::nst);
    CHECK_THROWS_AS(parse_aug_source("gan"), ConfigError);
}

TEST_CASE("augmented prototypes carry the augmentation") {
    const auto d = build_datasets(small_harness());
    REQUIRE(d.aug_catalog.size() == d.bench.catalog.size());
    for (std::size_t i = 0; i < d.aug_catalog.size(); ++i) {
        CHECK(d.aug_catalog.entries[i].class_id == d.bench.catalog.entries[i].class_id);
        CHECK(mean_abs_difference(d.aug_catalog.entries[i].prototype, d.bench.catalog.entries[i].prototype) > 0.0);
    }
}

TEST_CASE("the matrix runs all six experiments with bounded metrics") {
    const auto& r = small_matrix();
    REQUIRE(r.size() == 6);
    for (std::size_t i = 0; i < r.size(); ++i) {
        CHECK(r[i].spec.id == static_cast<int>(i) + 1);
        CHECK(r[i].report.f1 >= 0.0);
        CHECK(r[i].report.f1 <= 1.0);
        CHECK(r[i].report.confusion.total() == 12);
    }
    CHECK(summary_csv(r).rfind("exp,train,test,precision,recall,f1,accuracy\n", 0) == 0);
}

TEST_CASE("a single experiment reproduces its matrix result") {
    const auto cfg = small_harness();
    const auto d = build_datasets(cfg);
    const auto one = run_experiment(ExperimentSpec::by_id(2), d, cfg);
    CHECK(one.report.confusion == small_matrix()[1].report.confusion);
    auto missing = d;
    missing.aug_test.clear();
    CHECK_THROWS_AS(run_experiment(ExperimentSpec::by_id(2), missing, cfg), ConfigError);
}

TEST_CASE("emit_report writes the summary, confusions and heatmaps") {
    const auto& r = small_matrix();
    const auto dir = testutil::fresh_dir("report");
    emit_report(r, dir);
    const std::string text = slurp(dir / "summary.csv");
    CHECK(std::count(text.begin(), text.end(), '\n') == 7);
    for (int id = 1; id <= 6; ++id) {
        CHECK(fs::exists(dir / ("confusion_" + std::to_string(id) + ".csv")));
        CHECK(read_image(dir / ("confusion_" + std::to_string(id) + ".png")).height() == 3 * 12);
    }
    const auto rows = parse_summary_csv(text);
    REQUIRE(rows.size() == 6);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].exp == r[i].spec.id);
        CHECK(rows[i].f1 == doctest::Approx(r[i].report.f1).epsilon(1e-4));
        CHECK(rows[i].accuracy == doctest::Approx(r[i].report.accuracy).epsilon(1e-4));
        CHECK(rows[i].train == to_string(r[i].spec.train));
    }
    // Re-emitting replaces files rather than appending.
    emit_report(r, dir);
    CHECK(slurp(dir / "summary.csv") == text);
    for (const auto& entry : fs::directory_iterator(dir)) CHECK(entry.path().extension() != ".tmp");
}

TEST_CASE("partial or mixed-seed results produce no summary") {
    const auto& r = small_matrix();
    const auto dir = testutil::fresh_dir("report_partial");
    emit_report(r, dir);
    REQUIRE(fs::exists(dir / "summary.csv"));
    emit_report(std::span(r.data(), 4), dir);
    CHECK_FALSE(fs::exists(dir / "summary.csv"));
    auto mixed = r;
    mixed[5].data_seed = 99;
    emit_report(mixed, dir);
    CHECK_FALSE(fs::exists(dir / "summary.csv"));
    CHECK_THROWS_AS(emit_report({}, dir), ConfigError);
}

TEST_CASE("confusion csv and heatmap") {
    const auto cm = ConfusionMatrix::from_rows({{3, 1}, {0, 4}});
    CHECK(confusion_csv(cm) == "3,1\n0,4\n");
    const Image h = confusion_heatmap(cm, 5);
    CHECK(h.height() == 10);
    CHECK(h.width() == 10);
    // Full rows are darkest on the diagonal; empty cells stay white.
    CHECK(h.at(7, 2, 0) == doctest::Approx(1.0f));
    CHECK(h.at(7, 7, 0) < h.at(2, 2, 0));
}

TEST_CASE("summary parsing rejects malformed input") {
    CHECK_THROWS_AS(parse_summary_csv("nope\n"), DataError);
    CHECK_THROWS_AS(parse_summary_csv("exp,train,test,precision,recall,f1,accuracy\n1,orig,orig,x,1,1,1\n"), DataError);
    CHECK_THROWS_AS(parse_summary_csv("exp,train,test,precision,recall,f1,accuracy\n1,orig\n"), DataError);
}
