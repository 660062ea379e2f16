// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fmt/format.h>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "signadapt/adapt.hpp"
#include "signadapt/config.hpp"
#include "signadapt/harness.hpp"
#include "signadapt/metrics.hpp"
#include "signadapt/novelty.hpp"
#include "test_util.hpp"

using namespace signadapt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---- 1 -------------------------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = Clock::now();
    const double h = 1e-6;
    const auto data = testutil::tiny_data(3, 1, 8, 1);
    const auto base = testutil::tiny_model(3, 3);

    double worst_vpe = 0.0;
    const Image& x = data.samples[0].image;
    const Image& target = data.catalog.at(data.samples[0].label).prototype;
    const auto loss = vpe_loss(x, target, base.vpe, 0.05, 7);
    for (std::size_t i = 0; i < base.vpe.size(); ++i) {
        auto a = base.vpe, b = base.vpe;
        a.values()[i] += h;
        b.values()[i] -= h;
        const double fd = (vpe_loss(x, target, a, 0.05, 7).loss - vpe_loss(x, target, b, 0.05, 7).loss) / (2 * h);
        worst_vpe = std::max(worst_vpe, testutil::relative_error(fd, loss.gradients[i]));
    }

    auto ref = base;
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
    const auto f = [&](const Model& m) { return total_loss(m, ref, views, originals, 0.7, 1e-2, 9).terms.total; };
    const auto tl = total_loss(base, ref, views, originals, 0.7, 1e-2, 9);
    double worst_total = 0.0;
    for (std::size_t i = 0; i < base.vpe.size(); ++i) {
        auto a = base, b = base;
        a.vpe.values()[i] += h;
        b.vpe.values()[i] -= h;
        worst_total = std::max(worst_total, testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.vpe[i]));
    }
    for (long i = 0; i < base.head.weight.size(); ++i) {
        auto a = base, b = base;
        a.head.weight.data()[i] += h;
        b.head.weight.data()[i] -= h;
        worst_total = std::max(worst_total,
                               testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.head_weight.data()[i]));
    }
    for (long i = 0; i < base.head.bias.size(); ++i) {
        auto a = base, b = base;
        a.head.bias[i] += h;
        b.head.bias[i] -= h;
        worst_total = std::max(worst_total, testutil::relative_error((f(a) - f(b)) / (2 * h), tl.gradient.head_bias[i]));
    }
    const double secs = seconds_since(t0);
    return {worst_vpe <= 1e-3 && worst_total <= 1e-3 && secs < 30.0,
            fmt::format("vpe_loss max rel err {:.2e}, total_loss {:.2e}, {} weights, {:.1f} s", worst_vpe, worst_total,
                        base.vpe.size(), secs)};
}

// ---- 2 -------------------------------------------------------------------------------------

Outcome metric_and_simplex() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 3.0);
    const auto code = [&](std::size_t d) {
        LatentCode z;
        for (std::size_t i = 0; i < d; ++i) z.values.push_back(nd(rng));
        return z;
    };
    const auto dist = [](const LatentCode& a, const LatentCode& b) {
        PrototypeCatalog c;
        c.entries.push_back({0, Image(1, 1), b});
        return latent_distance(a, c).distance;
    };
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = 2 + static_cast<std::size_t>(trial % 15);
        const auto a = code(d), b = code(d), c = code(d);
        const double ab = dist(a, b), ba = dist(b, a), ac = dist(a, c), bc = dist(b, c);
        if (ab < 0.0 || dist(a, a) != 0.0) ++violations;
        if (std::abs(ab - ba) > 1e-12) ++violations;
        if (ac > ab + bc + 1e-9) ++violations;
        if (ab == 0.0 && a != b) ++violations;
    }
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = 2 + trial % 20, dz = 2 + trial % 7;
        auto head = LinearHead::zeros(k, dz);
        for (long i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = 5.0 * nd(rng);
        for (long i = 0; i < head.bias.size(); ++i) head.bias[i] = 5.0 * nd(rng);
        const auto y = classify(code(static_cast<std::size_t>(dz)), head);
        double sum = 0.0;
        for (double v : y) {
            if (!(v >= 0.0 && v <= 1.0)) ++violations;
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) ++violations;
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && secs < 10.0, fmt::format("{} violations in 2000 trials, {:.2f} s", violations, secs)};
}

// ---- 3 -------------------------------------------------------------------------------------

Outcome mixing() {
    const auto t0 = Clock::now();
    std::vector<LabeledSample> orig, aug;
    for (int i = 0; i < 50; ++i) orig.push_back({Image(1, 1), i % 5, Origin::original, 0});
    for (int i = 0; i < 20; ++i) aug.push_back({Image(1, 1), i % 5, Origin::augmented, 0});
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const double p = trial % 10 == 0 ? 0.0 : trial % 10 == 1 ? 1.0 : trial % 10 == 2 ? 0.5 : u(rng);
        const std::size_t n = 1 + rng() % 120;
        const auto mixed = mix_datasets(orig, aug, p, n, rng());
        // Round half to even, written out by hand.
        const double exact = p * static_cast<double>(n);
        double want = std::floor(exact);
        const double frac = exact - want;
        if (frac > 0.5 || (frac == 0.5 && std::fmod(want, 2.0) != 0.0)) want += 1.0;
        std::size_t originals = 0;
        for (const auto& s : mixed.samples) originals += s.origin == Origin::original ? 1 : 0;
        if (mixed.samples.size() != n || originals != static_cast<std::size_t>(want)) ++mismatches;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 5.0, fmt::format("{} mismatches in 200 pairs, {:.2f} s", mismatches, secs)};
}

// ---- 4 -------------------------------------------------------------------------------------

Outcome flag_monotonicity() {
    const auto t0 = Clock::now();
    BenchmarkConfig bc;
    bc.classes = 10;
    bc.train_per_class = 50;
    bc.test_per_class = 1;
    bc.validation_per_class = 0;
    bc.seed = 4;
    const auto bench = make_benchmark(bc);
    std::vector<Image> batch;
    for (std::size_t i = 0; i < bench.train.size(); ++i) {
        const auto& img = bench.train[i].image;
        batch.push_back(i % 2 == 0 ? img : apply_degradation(img, {static_cast<DegradationKind>(i % 4), 0.7, i}));
    }
    Model model{VpeParameters::initialize({}, 4), LinearHead::zeros(10, 16)};
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (long i = 0; i < model.head.weight.size(); ++i) model.head.weight.data()[i] = nd(rng);
    const auto catalog = compute_centroids(bench.catalog, model.vpe);
    std::vector<double> distances;
    for (const auto& s : novelty_scores(batch, model, catalog)) distances.push_back(s.distance);

    std::array<std::array<std::size_t, 10>, 10> flagged{};
    std::array<double, 10> tau_d{}, tau_y{};
    for (int i = 0; i < 10; ++i) {
        tau_d[static_cast<std::size_t>(i)] = percentile(distances, 5.0 + 10.0 * i);
        tau_y[static_cast<std::size_t>(i)] = 0.05 + 0.1 * i;
    }
    for (std::size_t i = 0; i < 10; ++i) {
        for (std::size_t j = 0; j < 10; ++j) {
            for (const auto& v : judge_all(batch, model, catalog, {tau_d[i], tau_y[j]})) flagged[i][j] += v.flagged;
        }
    }
    int violations = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        for (std::size_t j = 0; j < 10; ++j) {
            if (i + 1 < 10 && flagged[i + 1][j] > flagged[i][j]) ++violations;  // larger tau_d flags fewer
            if (j + 1 < 10 && flagged[i][j + 1] < flagged[i][j]) ++violations;  // larger tau_y flags more
        }
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && secs < 30.0,
            fmt::format("{} violations on 500 images x 100 thresholds (flagged {}..{}), {:.1f} s", violations,
                        flagged[9][0], flagged[0][9], secs)};
}

// ---- 5 -------------------------------------------------------------------------------------

Outcome matrix() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string lines;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PipelineConfig pc;
        pc.seed = seed;
        pc.propagate_seed();
        const auto h = harness_config(pc);
        const auto results = run_matrix(build_datasets(h), h);
        std::array<double, 7> f{};
        for (const auto& r : results) f[static_cast<std::size_t>(r.spec.id)] = r.report.f1;
        const bool pass = f[1] >= 0.90 && f[1] - f[2] >= 0.10 && f[4] - f[2] >= 0.10 && f[1] - f[3] <= 0.08 &&
                          f[6] > f[5];
        ok = ok && pass;
        lines += fmt::format("\n      seed {}: F1 E1..E6 = {:.3f} {:.3f} {:.3f} {:.3f} {:.3f} {:.3f}{}", seed, f[1], f[2],
                             f[3], f[4], f[5], f[6], pass ? "" : "  <- fails");
    }
    const double secs = seconds_since(t0);
    return {ok && secs <= 1200.0, fmt::format("5 seeds, {:.0f} s{}", secs, lines)};
}

// ---- 6 -------------------------------------------------------------------------------------

Outcome adaptation(const fs::path& work) {
    const std::uint64_t seed = 0;
    BenchmarkConfig bc;
    bc.seed = seed;
    const auto bench = make_benchmark(bc);
    TrainingConfig tc;
    tc.seed = seed;
    auto trained = train_vpe(bench.train, bench.catalog, tc);

    PipelineState state;
    state.live = {std::move(trained.model), std::move(trained.catalog), {}};
    state.live.meta.version = state.live.model.vpe.version;
    state.originals = bench.train;
    state.calibration_clean = bench.validation;
    state.calibration_unknowns = synthetic_unknowns(bench.validation, 200, derive_seed(seed, 0xca1));
    state.thresholds =
        calibrate_thresholds(state.calibration_clean, state.calibration_unknowns, state.live.model, state.live.catalog);

    // The stream comes from observations never seen in training.
    BenchmarkConfig sc = bc;
    sc.seed = derive_seed(seed, 0x57);
    sc.train_per_class = 10;
    sc.test_per_class = 1;
    sc.validation_per_class = 0;
    std::vector<Image> stream;
    for (const auto& s : degrade_samples(make_benchmark(sc).train, DegradationKind::rust, 0.8, derive_seed(seed, 0x58))) {
        stream.push_back(s.image);
    }
    const EvaluationSets eval{bench.test, degrade_samples(bench.test, DegradationKind::rust, 0.8, derive_seed(seed, 0xae))};

    AdaptationConfig ac;
    ac.augmentation = {2, 3, seed};
    ac.retrain.seed = seed;
    ac.style.noise_seed = seed;
    ac.run_dir = work / "cycle";
    fs::remove_all(*ac.run_dir);
    const auto report = adaptation_cycle(state, stream, ac, &eval);

    const double gain = report.fired ? report.post_degraded->accuracy - report.pre_degraded->accuracy : 0.0;
    const double drop = report.fired ? report.pre_clean->f1 - report.post_clean->f1 : 1.0;
    const bool ok = report.fired && gain >= 0.15 && drop <= 0.08 && report.wall_time <= 300.0;
    return {ok, fmt::format("flagged {}/{}, degraded accuracy {:.3f} -> {:.3f} ({:+.1f} points), clean F1 {:.3f} -> "
                            "{:.3f}, cycle {:.0f} s",
                            report.flagged_count, report.stream_size, report.pre_degraded->accuracy,
                            report.post_degraded->accuracy, 100.0 * gain, report.pre_clean->f1, report.post_clean->f1,
                            report.wall_time)};
}

// ---- 7 -------------------------------------------------------------------------------------

Outcome catch_all() {
    const auto t0 = Clock::now();
    // 10 classes, 90 errors: 36 (40%) land in column 3, the other 54 spread 6 per column elsewhere.
    ConfusionMatrix cm(10);
    for (std::size_t c = 0; c < 10; ++c) cm.at(c, c) = 40;
    for (std::size_t r = 0, placed = 0; placed < 36; r = (r + 1) % 10) {
        if (r == 3) continue;
        ++cm.at(r, 3);
        ++placed;
    }
    for (std::size_t col = 0; col < 10; ++col) {
        if (col == 3) continue;
        for (std::size_t e = 1; e <= 6; ++e) ++cm.at((col + e) % 10, col);
    }
    // Oracle: per-column off-diagonal share of all off-diagonal counts.
    std::int64_t errors = 0;
    std::array<std::int64_t, 10> col{};
    for (std::size_t r = 0; r < 10; ++r) {
        for (std::size_t c = 0; c < 10; ++c) {
            if (r != c) {
                errors += cm.at(r, c);
                col[c] += cm.at(r, c);
            }
        }
    }
    std::vector<std::size_t> expected;
    for (std::size_t c = 0; c < 10; ++c) {
        if (static_cast<double>(col[c]) / static_cast<double>(errors) > 0.15) expected.push_back(c);
    }
    const auto got = detect_catch_all(cm);
    const double share = static_cast<double>(col[3]) / static_cast<double>(errors);
    const double secs = seconds_since(t0);
    const bool ok = got == std::vector<std::size_t>{3} && expected == got && std::abs(share - 0.4) < 1e-12 && secs < 1.0;
    return {ok, fmt::format("column 3 holds {:.0f}% of errors, detector returned [{}], {:.3f} s", 100 * share,
                            fmt::join(got, ","), secs)};
}

// ---- 8 -------------------------------------------------------------------------------------

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism(const std::string& cli, const fs::path& work) {
    const auto t0 = Clock::now();
    std::array<std::string, 2> summaries;
    for (int run = 0; run < 2; ++run) {
        const fs::path dir = work / fmt::format("determinism_{}", run);
        fs::remove_all(dir);
        const std::string cmd = fmt::format("\"{}\" -q --run-dir \"{}\" experiment --all > \"{}\" 2>&1", cli,
                                            dir.string(), (work / fmt::format("determinism_{}.log", run)).string());
        const int rc = std::system(cmd.c_str());
        if (rc != 0) return {false, fmt::format("experiment --all exited with status {}", rc)};
        summaries[static_cast<std::size_t>(run)] = read_text(dir / "summary.csv");
    }
    const bool same = !summaries[0].empty() && summaries[0] == summaries[1];
    return {same, fmt::format("summary.csv {} ({} bytes), {:.0f} s", same ? "identical" : "differs",
                              summaries[0].size(), seconds_since(t0))};
}

// ---- 9 -------------------------------------------------------------------------------------

Outcome calibration() {
    const auto t0 = Clock::now();
    int mismatches = 0;
    double best_f1 = 0.0;
    std::mt19937_64 rng(9);
    for (int config = 0; config < 20; ++config) {
        const int classes = 3 + config % 4;
        const auto data = testutil::tiny_data(classes, 6 + config % 5, 16, static_cast<std::uint64_t>(config));
        Model model{VpeParameters::initialize({16, 4, {4, 8, 8}}, rng()), LinearHead::zeros(classes, 4)};
        std::normal_distribution<double> nd(0.0, 1.0 + 0.2 * config);
        for (long i = 0; i < model.head.weight.size(); ++i) model.head.weight.data()[i] = nd(rng);
        const auto catalog = compute_centroids(data.catalog, model.vpe);
        std::vector<Image> unknowns;
        for (std::size_t i = 0; i < 10 + static_cast<std::size_t>(config); ++i) {
            const auto& src = data.samples[i % data.samples.size()].image;
            unknowns.push_back(apply_degradation(src, {static_cast<DegradationKind>(i % 4), 0.5 + 0.025 * config, rng()}));
        }
        // Oracle scores straight from the encoder and head.
        const auto score = [&](const Image& img) {
            const auto z = encode(img, model.vpe);
            double best = INFINITY;
            for (const auto& e : catalog.entries) {
                double s = 0.0;
                for (std::size_t k = 0; k < z.dim(); ++k) s += (z.values[k] - e.centroid.values[k]) * (z.values[k] - e.centroid.values[k]);
                best = std::min(best, std::sqrt(s));
            }
            const auto p = classify(z, model.head);
            return NoveltyScore{best, *std::max_element(p.begin(), p.end())};
        };
        std::vector<NoveltyScore> clean, unknown;
        for (const auto& s : data.samples) clean.push_back(score(s.image));
        for (const auto& u : unknowns) unknown.push_back(score(u));
        const auto want = oracle::calibrate(clean, unknown);
        const auto got = calibrate_thresholds(data.samples, unknowns, model, catalog);
        const bool match = std::abs(got.tau_d - want.tau_d) <= 1e-9 * std::max(1.0, want.tau_d) &&
                           std::abs(got.tau_y - want.tau_y) <= 1e-9;
        if (!match) ++mismatches;
        best_f1 += want.f1 / 20.0;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 60.0,
            fmt::format("{} mismatches over 20 configurations (mean optimal flag F1 {:.3f}), {:.1f} s", mismatches,
                        best_f1, secs)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string cli;
    fs::path work = fs::temp_directory_path() / "signadapt_acceptance";
    std::vector<int> only;
    app.add_option("--cli", cli, "Path to the signadapt executable")->required();
    app.add_option("--work", work, "Scratch directory");
    app.add_option("--only", only, "Run just these criteria");
    CLI11_PARSE(app, argc, argv);

    configure_runtime();
    spdlog::set_level(spdlog::level::err);
    fs::create_directories(work);

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradients},
        {"metric and simplex properties", metric_and_simplex},
        {"mixing exactness", mixing},
        {"flag monotonicity", flag_monotonicity},
        {"six-experiment matrix", matrix},
        {"end-to-end adaptation cycle", [&] { return adaptation(work); }},
        {"catch-all detector", catch_all},
        {"determinism", [&] { return determinism(cli, work); }},
        {"calibration optimality", calibration},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
