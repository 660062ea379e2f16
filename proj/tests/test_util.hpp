#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "signadapt/data_forge.hpp"
#include "signadapt/vpe.hpp"

namespace testutil {

inline std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("signadapt_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline signadapt::Image random_image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    signadapt::Image img(size, size);
    for (auto& v : img.data()) v = u(rng);
    return img;
}

// 8 px canvas, 4-d latent: small enough for finite differences over every weight.
inline signadapt::VpeArchitecture tiny_arch() { return {8, 4, {4, 4, 4}}; }

inline signadapt::Model tiny_model(int classes, std::uint64_t seed) {
    signadapt::Model m{signadapt::VpeParameters::initialize(tiny_arch(), seed),
                       signadapt::LinearHead::zeros(classes, tiny_arch().latent_dim)};
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (long i = 0; i < m.head.weight.size(); ++i) m.head.weight.data()[i] = nd(rng);
    for (long i = 0; i < m.head.bias.size(); ++i) m.head.bias[i] = nd(rng);
    return m;
}

// Prototypes and observations of the first `classes` catalog entries, scaled down to `canvas`.
struct TinyData {
    signadapt::PrototypeCatalog catalog;
    std::vector<signadapt::LabeledSample> samples;
};

inline TinyData tiny_data(int classes, int per_class, int canvas, std::uint64_t seed) {
    TinyData d;
    std::vector<std::pair<int, signadapt::Image>> protos;
    const auto specs = signadapt::default_catalog(classes);
    for (const auto& spec : specs) {
        protos.emplace_back(spec.class_id, signadapt::resize_bilinear(signadapt::render_prototype(spec, 32), canvas, canvas));
        for (auto& s : signadapt::synthesize_observations(spec, per_class, signadapt::Jitter{}, seed, 32)) {
            s.image = signadapt::resize_bilinear(s.image, canvas, canvas);
            d.samples.push_back(std::move(s));
        }
    }
    d.catalog = signadapt::PrototypeCatalog::from_images(std::move(protos));
    return d;
}

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b));
}

}  // namespace testutil
