#include <doctest.h>

#include <map>
#include <Eigen/Eigenvalues>
#include <random>

#include "signadapt/errors.hpp"
#include "signadapt/style_forge.hpp"
#include "signadapt/vpe.hpp"
#include "test_util.hpp"

using namespace signadapt;
using testutil::random_image;

namespace {

nn::Matrix naive_gram(const nn::Matrix& f) {
    nn::Matrix g(f.rows(), f.rows());
    for (long i = 0; i < f.rows(); ++i) {
        for (long j = 0; j < f.rows(); ++j) {
            double s = 0.0;
            for (long n = 0; n < f.cols(); ++n) s += f(i, n) * f(j, n);
            g(i, j) = s / static_cast<double>(f.cols());
        }
    }
    return g;
}

double naive_style_loss(const Image& a, const Image& b, const FeatureExtractor& fx) {
    const auto fa = fx.features(a), fb = fx.features(b);
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const auto ga = naive_gram(fa[l]), gb = naive_gram(fb[l]);
        double num = 0.0, den = 0.0;
        for (long i = 0; i < ga.size(); ++i) {
            num += (ga.data()[i] - gb.data()[i]) * (ga.data()[i] - gb.data()[i]);
            den += gb.data()[i] * gb.data()[i];
        }
        total += num / den;
    }
    return total;
}

StyleTransferConfig quick_config() {
    StyleTransferConfig c;
    c.iterations = 15;
    c.noise_seed = 3;
    return c;
}

}  // namespace

TEST_CASE("extractor is a fixed function of its seed") {
    const auto a = FeatureExtractor::random(1), b = FeatureExtractor::random(1);
    REQUIRE(a.layers().size() == 3);
    CHECK(a.layers()[0].weight.rows() == 32);
    CHECK(a.layers()[2].weight.rows() == 64);
    const Image img = random_image(16, 1);
    const auto fa = a.features(img), fb = b.features(img);
    for (std::size_t l = 0; l < fa.size(); ++l) CHECK(fa[l] == fb[l]);
    CHECK(fa[0].cols() == 16 * 16);
    CHECK(fa[1].cols() == 8 * 8);
    CHECK(fa[2].cols() == 4 * 4);
    CHECK_FALSE(FeatureExtractor::random(2).features(img)[0] == fa[0]);
}

TEST_CASE("gram matrix matches the naive sum and is symmetric PSD") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 20; ++trial) {
        nn::Matrix f(3 + trial % 4, 5 + trial);
        for (long i = 0; i < f.size(); ++i) f.data()[i] = nd(rng);
        const auto g = gram_matrix(f);
        const auto want = naive_gram(f);
        CHECK((g - want).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((g - g.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        const Eigen::MatrixXd dense = g;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense);
        CHECK(eig.eigenvalues().minCoeff() > -1e-10);
    }
}

TEST_CASE("style loss matches the naive per-layer sum") {
    const auto fx = FeatureExtractor::random(4);
    for (int trial = 0; trial < 4; ++trial) {
        const Image a = random_image(16, 10 + trial), b = random_image(16, 20 + trial);
        CHECK(gram_style_loss(a, b, fx) == doctest::Approx(naive_style_loss(a, b, fx)).epsilon(1e-9));
        CHECK(gram_style_loss(a, a, fx) == doctest::Approx(0.0));
    }
}

TEST_CASE("config validation and noise amplitude range") {
    CHECK_NOTHROW(StyleTransferConfig{}.validate());
    auto c = StyleTransferConfig{};
    c.iterations = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = {};
    c.content_weight = 0.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = {};
    c.style_weight = -1.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    for (std::uint64_t s = 0; s < 200; ++s) {
        const double a = noise_amplitude(s);
        CHECK(a >= 0.02);
        CHECK(a <= 0.06);
        CHECK(a == noise_amplitude(s));
    }
}

TEST_CASE("style transfer is deterministic, bounded and moves toward the style") {
    const auto specs = default_catalog(4);
    const Image content = render_prototype(specs[1], 16);
    const Image style = apply_degradation(render_prototype(specs[3], 16), {DegradationKind::rust, 1.0, 2});
    const auto cfg = quick_config();
    const Image a = style_transfer(style, content, cfg);
    CHECK(a == style_transfer(style, content, cfg));
    CHECK_NOTHROW(a.validate());
    const auto fx = FeatureExtractor::random(cfg.feature_extractor_seed);
    CHECK(gram_style_loss(a, style, fx) < gram_style_loss(content, style, fx));
    auto other = cfg;
    other.noise_seed = 4;
    CHECK_FALSE(style_transfer(style, content, other) == a);
    CHECK_THROWS(style_transfer(random_image(8, 1), content, cfg));
}

TEST_CASE("zero style weight keeps the result near the content") {
    const Image content = render_prototype(default_catalog(2)[0], 16);
    StyleTransferConfig cfg;
    cfg.style_weight = 0.0;
    cfg.noise_seed = 8;
    const Image out = style_transfer(random_image(16, 5), content, cfg);
    CHECK(mean_abs_difference(out, content) < 1e-3);
}

TEST_CASE("sign mask leaves the corners untouched") {
    const Image content = render_prototype(default_catalog(2)[1], 16);
    auto cfg = quick_config();
    cfg.sign_mask = true;
    const Image out = style_transfer(random_image(16, 6), content, cfg);
    for (int c = 0; c < 3; ++c) {
        CHECK(out.at(0, 0, c) == content.at(0, 0, c));
        CHECK(out.at(15, 15, c) == content.at(15, 15, c));
    }
}

TEST_CASE("batched style transfer equals per-job transfer") {
    const Image s1 = random_image(16, 1), s2 = random_image(16, 2);
    const Image c1 = render_prototype(default_catalog(3)[0], 16), c2 = render_prototype(default_catalog(3)[2], 16);
    const std::vector<StyleJob> jobs{{&s1, &c1, 7}, {&s2, &c2, 8}, {&s1, &c2, 9}};
    const auto cfg = quick_config();
    const auto fx = FeatureExtractor::random(cfg.feature_extractor_seed);
    const auto batch = style_transfer_batch(jobs, cfg, fx);
    REQUIRE(batch.size() == 3);
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        auto single = cfg;
        single.noise_seed = jobs[i].noise_seed;
        CHECK(batch[i] == style_transfer(*jobs[i].style, *jobs[i].content, single, fx));
    }
}

TEST_CASE("augmentation set size, labels and manifest") {
    const auto data = testutil::tiny_data(3, 4, 16, 2);
    std::vector<UnknownCapture> unknowns{{random_image(16, 1), 0}, {random_image(16, 2), 2}};
    AugmentationOptions opt{2, 1, 5};
    const auto set = build_augmentation_set(unknowns, data.catalog, data.samples, opt, quick_config());
    REQUIRE(set.samples.size() == 2 * 2 * (1 + 1));
    REQUIRE(set.manifest.size() == set.samples.size());
    std::map<std::size_t, int> per_unknown;
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        const auto& row = set.manifest[i];
        CHECK(row.sample_index == i);
        CHECK(set.samples[i].origin == Origin::augmented);
        CHECK(set.samples[i].label == row.source_class);
        if (row.original_index < 0) {
            CHECK(row.source_class == unknowns[row.unknown_id].pseudo_label);
        } else {
            CHECK(row.source_class == data.samples[static_cast<std::size_t>(row.original_index)].label);
        }
        ++per_unknown[row.unknown_id];
    }
    CHECK(per_unknown[0] == 4);
    CHECK(per_unknown[1] == 4);

    const auto dir = testutil::fresh_dir("augset");
    write_augmentation_set(dir, set);
    const auto back = read_augmentation_set(dir);
    REQUIRE(back.samples.size() == set.samples.size());
    for (std::size_t i = 0; i < back.samples.size(); ++i) {
        CHECK(back.samples[i].label == set.samples[i].label);
        CHECK(back.manifest[i].xi_seed == set.manifest[i].xi_seed);
        CHECK(mean_abs_difference(back.samples[i].image, set.samples[i].image) < 1.0 / 255.0);
    }
    CHECK(build_augmentation_set({}, data.catalog, data.samples, opt, quick_config()).samples.empty());
    CHECK_THROWS_AS(build_augmentation_set(unknowns, data.catalog, {}, opt, quick_config()), ConfigError);
    CHECK_THROWS_AS(read_augmentation_set(testutil::fresh_dir("augset_missing")), DataError);
}

TEST_CASE("original share rounds half to even") {
    CHECK(original_share(0.5, 5) == 2);
    CHECK(original_share(0.5, 7) == 4);
    CHECK(original_share(0.25, 10) == 2);
    CHECK(original_share(0.0, 9) == 0);
    CHECK(original_share(1.0, 9) == 9);
    CHECK_THROWS_AS(original_share(1.5, 9), ValidationError);
}

TEST_CASE("mixing yields exact counts for random ratios and sizes") {
    std::vector<LabeledSample> orig, aug;
    for (int i = 0; i < 30; ++i) orig.push_back({Image(2, 2), i % 3, Origin::original, 0});
    for (int i = 0; i < 12; ++i) aug.push_back({Image(2, 2), i % 3, Origin::augmented, 0});
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const double p = u(rng);
        const std::size_t n = 1 + rng() % 60;
        const auto mixed = mix_datasets(orig, aug, p, n, trial);
        const auto want = static_cast<std::size_t>(std::nearbyint(p * static_cast<double>(n)));
        std::size_t originals = 0;
        for (const auto& s : mixed.samples) originals += s.origin == Origin::original;
        CHECK(mixed.samples.size() == n);
        CHECK(originals == want);
        CHECK(mixed.original_count == want);
        CHECK(mixed.augmented_count == n - want);
    }
    const auto a = mix_datasets(orig, aug, 0.5, 20, 1), b = mix_datasets(orig, aug, 0.5, 20, 1);
    for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(a.samples[i].label == b.samples[i].label);
    CHECK_THROWS_AS(mix_datasets(orig, {}, 0.5, 10, 1), ConfigError);
    CHECK_THROWS_AS(mix_datasets(orig, aug, 0.5, 0, 1), ValidationError);
}
