#pragma once

// Synthetic sign-glyph benchmark, parametric degradations and GTSRB-style ingestion.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "signadapt/image.hpp"

namespace signadapt {

enum class SignShape { circle, triangle, octagon, diamond, square };

struct SignClassSpec {
    int class_id = 0;
    SignShape shape = SignShape::circle;
    Rgb border_color;
    Rgb fill_color;
    int glyph_id = 0;

    void validate() const;
};

/// Number of entries in the built-in glyph table.
int glyph_count();
std::string_view glyph_name(int glyph_id);

/// Distinct, deterministic class catalog with `class_count` entries (1..43).
std::vector<SignClassSpec> default_catalog(int class_count);

/// Background every prototype and degradation assumes.
inline constexpr Rgb kBackground{0.5, 0.5, 0.5};

/// Anti-aliased render of shape, border and glyph on the neutral background. canvas >= 16.
Image render_prototype(const SignClassSpec& spec, int canvas);

/// Observation noise model. All-zero amplitudes reproduce the prototype exactly.
struct Jitter {
    double max_rotation_deg = 15.0;
    double min_scale = 0.8;
    double max_scale = 1.2;
    double brightness = 0.1;  // additive, uniform in ±brightness
    double contrast = 0.15;   // multiplicative around 0.5, uniform in 1±contrast
    double noise_sigma = 0.03;

    static Jitter none() { return {0.0, 1.0, 1.0, 0.0, 0.0, 0.0}; }
};

enum class Origin { original, augmented, unknown_capture };

std::string_view to_string(Origin origin);

struct LabeledSample {
    Image image;
    int label = 0;
    Origin origin = Origin::original;
    std::uint64_t provenance_seed = 0;
};

std::vector<LabeledSample> synthesize_observations(const SignClassSpec& spec, int count, const Jitter& jitter,
                                                   std::uint64_t seed, int canvas);

enum class DegradationKind { rust, fade, occlusion, graffiti };

std::string_view to_string(DegradationKind kind);
/// Throws ValidationError on an unknown name.
DegradationKind parse_degradation_kind(std::string_view name);

struct DegradationRecipe {
    DegradationKind kind = DegradationKind::rust;
    double severity = 0.0;
    std::uint64_t seed = 0;
};

/// Severity 0 is an exact identity; the result is a pure function of (image, recipe).
Image apply_degradation(const Image& image, const DegradationRecipe& recipe);

/// One recipe per line, `kind severity seed`; blank lines and `#` comments are skipped.
std::vector<DegradationRecipe> parse_recipes(std::istream& in);
std::string format_recipe(const DegradationRecipe& recipe);

/// Octave-summed value noise in [0,1], pure in (x, y, seed).
double fractal_noise(double x, double y, std::uint64_t seed, int octaves);

struct IngestOptions {
    int canvas = 32;
    /// Fraction of undecodable files tolerated before ingestion fails.
    double max_skip_fraction = 0.01;
};

/// Reads `<root>/labels.csv` (path,class_id) or per-class GTSRB `GT-*.csv` index files.
/// PNG and PPM payloads are accepted. Samples are sorted by (class_id, filename).
std::vector<LabeledSample> ingest_gtsrb(const std::filesystem::path& root, const IngestOptions& options = {});

/// Writes `<root>/<class_id>/<index>.png` and `<root>/labels.csv`. Returns the relative paths written.
std::vector<std::string> write_dataset(const std::filesystem::path& root, std::span<const LabeledSample> samples);

/// Writes `<root>/prototypes/<class_id>.png` for every spec.
void write_prototypes(const std::filesystem::path& root, std::span<const std::pair<int, Image>> prototypes);
/// Reads `<root>/prototypes/*.png`, resized to `canvas`, sorted by class id.
std::vector<std::pair<int, Image>> read_prototypes(const std::filesystem::path& root, int canvas);

}  // namespace signadapt
