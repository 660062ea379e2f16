#include "signadapt/data_forge.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "signadapt/errors.hpp"
#include "signadapt/image_io.hpp"

namespace fs = std::filesystem;

namespace signadapt {

namespace {

// --- glyph table ------------------------------------------------------------------------

struct Glyph {
    std::string_view name;
    std::array<std::string_view, 7> rows;
};

// clang-format off
constexpr std::array<Glyph, 14> kGlyphs{{
    {"bar_h",       {".......", ".......", "#######", "#######", "#######", ".......", "......."}},
    {"bar_v",       {"..###..", "..###..", "..###..", "..###..", "..###..", "..###..", "..###.."}},
    {"arrow_right", {"...#...", "...##..", "#######", "#######", "...##..", "...#...", "......."}},
    {"arrow_left",  {"...#...", "..##...", "#######", "#######", "..##...", "...#...", "......."}},
    {"arrow_up",    {"...#...", "..###..", ".#####.", "#.###.#", "..###..", "..###..", "..###.."}},
    {"digit_3",     {"######.", ".....##", ".....##", "..####.", ".....##", ".....##", "######."}},
    {"digit_5",     {"#######", "##.....", "######.", ".....##", ".....##", "##...##", ".#####."}},
    {"digit_8",     {".#####.", "##...##", "##...##", ".#####.", "##...##", "##...##", ".#####."}},
    {"exclaim",     {"..###..", "..###..", "..###..", "..###..", ".......", "..###..", "..###.."}},
    {"cross",       {"##...##", ".##.##.", "..###..", "...#...", "..###..", ".##.##.", "##...##"}},
    {"chevron",     {"##.....", ".##....", "..##...", "...##..", "..##...", ".##....", "##....."}},
    {"dot",         {".......", "..###..", ".#####.", ".#####.", ".#####.", "..###..", "......."}},
    {"digit_2",     {".#####.", "##...##", ".....##", "...###.", ".##....", "##.....", "#######"}},
    {"digit_7",     {"#######", ".....##", "....##.", "...##..", "..##...", "..##...", "..##..."}},
}};
// clang-format on

bool glyph_bit(int glyph_id, double gx, double gy) {
    // gx, gy in [0,1)
    const auto& g = kGlyphs[static_cast<std::size_t>(glyph_id)];
    const int col = std::clamp(static_cast<int>(gx * 7.0), 0, 6);
    const int row = std::clamp(static_cast<int>(gy * 7.0), 0, 6);
    return g.rows[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)] == '#';
}

// --- shapes -----------------------------------------------------------------------------

bool inside_shape(SignShape shape, double u, double v, double r) {
    switch (shape) {
        case SignShape::circle:
            return u * u + v * v <= r * r;
        case SignShape::square:
            return std::max(std::abs(u), std::abs(v)) <= r * 0.82;
        case SignShape::diamond:
            return std::abs(u) + std::abs(v) <= r;
        case SignShape::octagon: {
            const double a = r * std::cos(std::numbers::pi / 8.0);
            return std::max({std::abs(u), std::abs(v), (std::abs(u) + std::abs(v)) / std::numbers::sqrt2}) <= a;
        }
        case SignShape::triangle: {
            // Upward equilateral triangle with circumradius r; v grows downward.
            const double vv = v - 0.12 * r;
            return vv <= r * 0.5 && std::abs(u) <= (vv + r) / std::numbers::sqrt3;
        }
    }
    return false;
}

double luminance(const Rgb& c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

void check_color(const Rgb& c, const char* what) {
    for (double v : {c.r, c.g, c.b}) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw ConfigError(std::string(what) + " color component outside [0,1]");
        }
    }
}

// --- noise ------------------------------------------------------------------------------

double lattice_value(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
    const std::uint64_t h = derive_seed(seed, static_cast<std::uint64_t>(ix), static_cast<std::uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double x, double y, std::uint64_t seed) {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double tx = smooth(x - fx);
    const double ty = smooth(y - fy);
    const double a = lattice_value(ix, iy, seed);
    const double b = lattice_value(ix + 1, iy, seed);
    const double c = lattice_value(ix, iy + 1, seed);
    const double d = lattice_value(ix + 1, iy + 1, seed);
    return (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
}

double smoothstep(double lo, double hi, double x) {
    return smooth(std::clamp((x - lo) / (hi - lo), 0.0, 1.0));
}

// --- degradations ----------------------------------------------------------------------

// Rust tuning: blotch coverage grows as the noise threshold drops with severity; the overall
// stain layer adds a faint global cast. Both opacities are non-decreasing in severity.
constexpr double kRustThresholdHigh = 0.70;
constexpr double kRustThresholdSlope = 0.36;
constexpr double kRustBlotchOpacity = 0.85;
constexpr double kRustStainOpacity = 0.30;
constexpr double kRustFrequency = 5.0;

Image rust(const Image& image, double severity, std::uint64_t seed) {
    Image out = image;
    const int h = image.height();
    const int w = image.width();
    const double threshold = kRustThresholdHigh - kRustThresholdSlope * severity;
    const Rgb dark{0.30, 0.13, 0.05};
    const Rgb orange{0.74, 0.38, 0.11};
    const std::uint64_t mask_seed = derive_seed(seed, 1);
    const std::uint64_t tone_seed = derive_seed(seed, 2);
    const std::uint64_t grain_seed = derive_seed(seed, 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double u = kRustFrequency * (x + 0.5) / w;
            const double v = kRustFrequency * (y + 0.5) / h;
            const double n = fractal_noise(u, v, mask_seed, 4);
            const double mask = smoothstep(threshold - 0.06, threshold + 0.06, n);
            const double tone = fractal_noise(2.0 * u, 2.0 * v, tone_seed, 3);
            const double grain = fractal_noise(4.0 * u, 4.0 * v, grain_seed, 2);
            const Rgb color = lerp(dark, orange, std::clamp(1.6 * (tone - 0.5) + 0.5, 0.0, 1.0));
            const double blotch = kRustBlotchOpacity * severity * mask * (0.7 + 0.3 * grain);
            const double stain = kRustStainOpacity * severity;
            const double alpha = 1.0 - (1.0 - blotch) * (1.0 - stain);
            out.set_pixel(y, x, lerp(image.pixel(y, x), color, alpha));
        }
    }
    return out;
}

Image fade(const Image& image, double severity) {
    Image out = image;
    constexpr double kPale = 0.78;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            const Rgb p = image.pixel(y, x);
            const double g = 0.5 * luminance(p) + 0.5 * kPale;
            out.set_pixel(y, x, lerp(p, Rgb{g, g, g}, 0.85 * severity));
        }
    }
    return out;
}

Image occlusion(const Image& image, double severity, std::uint64_t seed) {
    Image out = image;
    std::mt19937_64 rng(derive_seed(seed, 11));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int h = image.height();
    const int w = image.width();
    constexpr int kRects = 3;
    for (int r = 0; r < kRects; ++r) {
        const double cx = (0.15 + 0.7 * unit(rng)) * w;
        const double cy = (0.15 + 0.7 * unit(rng)) * h;
        const double aspect = std::exp(std::log(0.5) + unit(rng) * std::log(4.0));
        const double half = 0.2 * severity * w;
        const double hx = half * std::sqrt(aspect);
        const double hy = half / std::sqrt(aspect);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (std::abs(x + 0.5 - cx) <= hx && std::abs(y + 0.5 - cy) <= hy) out.set_pixel(y, x, kBackground);
            }
        }
    }
    return out;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax;
    const double dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    const double t = len2 > 0.0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    const double qx = ax + t * dx - px;
    const double qy = ay + t * dy - py;
    return std::sqrt(qx * qx + qy * qy);
}

Image graffiti(const Image& image, double severity, std::uint64_t seed) {
    Image out = image;
    std::mt19937_64 rng(derive_seed(seed, 21));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    constexpr std::array<Rgb, 4> kPalette{{{0.05, 0.05, 0.05}, {0.85, 0.10, 0.75}, {0.10, 0.75, 0.20}, {0.10, 0.25, 0.90}}};
    const Rgb color = kPalette[static_cast<std::size_t>(derive_seed(seed, 22) % kPalette.size())];
    const int h = image.height();
    const int w = image.width();
    constexpr int kMaxStrokes = 6;
    struct Stroke {
        std::array<double, 6> pts;
    };
    std::vector<Stroke> strokes(kMaxStrokes);
    for (auto& s : strokes) {
        for (std::size_t i = 0; i < 6; i += 2) {
            s.pts[i] = (0.1 + 0.8 * unit(rng)) * w;
            s.pts[i + 1] = (0.1 + 0.8 * unit(rng)) * h;
        }
    }
    const int active = static_cast<int>(std::ceil(severity * kMaxStrokes));
    const double width = (0.6 + 1.4 * severity) * w / 32.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double coverage = 0.0;
            for (int k = 0; k < active; ++k) {
                const auto& p = strokes[static_cast<std::size_t>(k)].pts;
                const double d = std::min(segment_distance(x + 0.5, y + 0.5, p[0], p[1], p[2], p[3]),
                                          segment_distance(x + 0.5, y + 0.5, p[2], p[3], p[4], p[5]));
                coverage = std::max(coverage, std::clamp(0.5 * width + 0.5 - d, 0.0, 1.0));
            }
            if (coverage > 0.0) out.set_pixel(y, x, lerp(image.pixel(y, x), color, 0.9 * coverage));
        }
    }
    return out;
}

// --- ingestion helpers ------------------------------------------------------------------

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(line);
    while (std::getline(in, part, sep)) parts.push_back(trim(part));
    return parts;
}

struct IndexEntry {
    fs::path path;
    int class_id = 0;
    std::optional<std::array<int, 4>> roi;
};

std::vector<IndexEntry> read_labels_csv(const fs::path& root) {
    std::ifstream in(root / "labels.csv");
    std::vector<IndexEntry> entries;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("path", 0) == 0) continue;
        }
        const auto cols = split(line, ',');
        if (cols.size() < 2) throw DataError("malformed labels.csv line: " + line);
        try {
            entries.push_back({root / cols[0], std::stoi(cols[1]), std::nullopt});
        } catch (const std::exception&) {
            throw DataError("malformed class id in labels.csv line: " + line);
        }
    }
    return entries;
}

// Official GTSRB layout: <root>/<class>/GT-<class>.csv with Filename;...;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId
std::vector<IndexEntry> read_gtsrb_indices(const fs::path& root) {
    std::vector<IndexEntry> entries;
    std::vector<fs::path> index_files;
    for (const auto& dir : fs::directory_iterator(root)) {
        if (!dir.is_directory()) continue;
        for (const auto& f : fs::directory_iterator(dir.path())) {
            const auto name = f.path().filename().string();
            if (name.rfind("GT-", 0) == 0 && f.path().extension() == ".csv") index_files.push_back(f.path());
        }
    }
    std::sort(index_files.begin(), index_files.end());
    for (const auto& file : index_files) {
        std::ifstream in(file);
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            line = trim(line);
            if (line.empty()) continue;
            if (header) {
                header = false;
                if (line.rfind("Filename", 0) == 0) continue;
            }
            const auto cols = split(line, ';');
            if (cols.size() < 8) throw DataError("malformed GTSRB index line in " + file.string());
            try {
                entries.push_back({file.parent_path() / cols[0], std::stoi(cols[7]),
                                   std::array<int, 4>{std::stoi(cols[3]), std::stoi(cols[4]), std::stoi(cols[5]),
                                                      std::stoi(cols[6])}});
            } catch (const std::exception&) {
                throw DataError("malformed GTSRB index line in " + file.string());
            }
        }
    }
    return entries;
}

Image crop(const Image& image, const std::array<int, 4>& roi) {
    const int x1 = std::clamp(roi[0], 0, image.width() - 1);
    const int y1 = std::clamp(roi[1], 0, image.height() - 1);
    const int x2 = std::clamp(roi[2], x1, image.width() - 1);
    const int y2 = std::clamp(roi[3], y1, image.height() - 1);
    Image out(y2 - y1 + 1, x2 - x1 + 1);
    for (int y = y1; y <= y2; ++y) {
        for (int x = x1; x <= x2; ++x) out.set_pixel(y - y1, x - x1, image.pixel(y, x));
    }
    return out;
}

}  // namespace

// --- catalog & rendering ----------------------------------------------------------------

void SignClassSpec::validate() const {
    if (class_id < 0) throw ConfigError("class_id must be >= 0");
    if (glyph_id < 0 || glyph_id >= glyph_count()) {
        throw ConfigError("glyph_id " + std::to_string(glyph_id) + " is not in the glyph table");
    }
    check_color(border_color, "border");
    check_color(fill_color, "fill");
}

int glyph_count() { return static_cast<int>(kGlyphs.size()); }

std::string_view glyph_name(int glyph_id) {
    if (glyph_id < 0 || glyph_id >= glyph_count()) throw ConfigError("invalid glyph id");
    return kGlyphs[static_cast<std::size_t>(glyph_id)].name;
}

std::vector<SignClassSpec> default_catalog(int class_count) {
    if (class_count < 1 || class_count > 43) throw ConfigError("class_count must be in [1, 43]");
    const Rgb red{0.80, 0.08, 0.10};
    const Rgb white{0.96, 0.96, 0.96};
    const Rgb blue{0.10, 0.25, 0.70};
    const Rgb yellow{0.95, 0.78, 0.10};
    const Rgb black{0.08, 0.08, 0.08};
    const Rgb green{0.10, 0.55, 0.25};
    // Hand-picked head of the catalog: a stop sign, limits, warnings, mandatory and info signs.
    std::vector<SignClassSpec> specs{
        {0, SignShape::octagon, red, red, 0},
        {1, SignShape::circle, red, white, 5},
        {2, SignShape::circle, red, white, 7},
        {3, SignShape::triangle, red, white, 8},
        {4, SignShape::circle, blue, blue, 2},
        {5, SignShape::circle, blue, blue, 4},
        {6, SignShape::diamond, white, yellow, 11},
        {7, SignShape::square, white, blue, 1},
        {8, SignShape::triangle, red, white, 9},
        {9, SignShape::circle, black, white, 0},
    };
    // Deterministic extension over (shape, scheme, glyph) combinations not used above.
    const std::array<std::pair<Rgb, Rgb>, 6> schemes{
        {{red, white}, {blue, blue}, {white, yellow}, {black, white}, {white, green}, {red, red}}};
    const std::array<SignShape, 5> shapes{SignShape::circle, SignShape::triangle, SignShape::square,
                                          SignShape::diamond, SignShape::octagon};
    int k = 0;
    while (static_cast<int>(specs.size()) < class_count) {
        const auto shape = shapes[static_cast<std::size_t>(k % 5)];
        const auto& scheme = schemes[static_cast<std::size_t>((k / 5) % 6)];
        const int glyph = (k * 5 + 3) % glyph_count();
        ++k;
        const bool taken = std::any_of(specs.begin(), specs.end(), [&](const SignClassSpec& s) {
            return s.shape == shape && s.border_color == scheme.first && s.fill_color == scheme.second &&
                   s.glyph_id == glyph;
        });
        if (taken) continue;
        specs.push_back({static_cast<int>(specs.size()), shape, scheme.first, scheme.second, glyph});
    }
    specs.resize(static_cast<std::size_t>(class_count));
    return specs;
}

Image render_prototype(const SignClassSpec& spec, int canvas) {
    if (canvas < 16) throw ConfigError("canvas must be >= 16, got " + std::to_string(canvas));
    spec.validate();
    constexpr int kSuper = 4;
    constexpr double kRadius = 0.86;
    constexpr double kBorder = 0.22;
    const double inner = kRadius * (1.0 - kBorder);
    const Rgb glyph_color = luminance(spec.fill_color) > 0.5 ? Rgb{0.05, 0.05, 0.05} : Rgb{0.97, 0.97, 0.97};
    // Glyph box, in the same normalized coordinates; triangles get a smaller, lower box.
    const bool tri = spec.shape == SignShape::triangle;
    const double box_half = tri ? 0.26 : (spec.shape == SignShape::diamond ? 0.30 : 0.40);
    const double box_cy = tri ? 0.16 : 0.0;

    Image image(canvas, canvas);
    for (int y = 0; y < canvas; ++y) {
        for (int x = 0; x < canvas; ++x) {
            Rgb acc{0, 0, 0};
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    const double u = 2.0 * (x + (sx + 0.5) / kSuper) / canvas - 1.0;
                    const double v = 2.0 * (y + (sy + 0.5) / kSuper) / canvas - 1.0;
                    Rgb c = kBackground;
                    if (inside_shape(spec.shape, u, v, kRadius)) {
                        c = spec.border_color;
                        if (inside_shape(spec.shape, u, v, inner)) {
                            c = spec.fill_color;
                            const double gx = (u + box_half) / (2.0 * box_half);
                            const double gy = (v - box_cy + box_half) / (2.0 * box_half);
                            if (gx >= 0.0 && gx < 1.0 && gy >= 0.0 && gy < 1.0 && glyph_bit(spec.glyph_id, gx, gy)) {
                                c = glyph_color;
                            }
                        }
                    }
                    acc.r += c.r;
                    acc.g += c.g;
                    acc.b += c.b;
                }
            }
            constexpr double n = kSuper * kSuper;
            image.set_pixel(y, x, {acc.r / n, acc.g / n, acc.b / n});
        }
    }
    return image;
}

std::string_view to_string(Origin origin) {
    switch (origin) {
        case Origin::original: return "original";
        case Origin::augmented: return "augmented";
        case Origin::unknown_capture: return "unknown_capture";
    }
    return "?";
}

std::vector<LabeledSample> synthesize_observations(const SignClassSpec& spec, int count, const Jitter& jitter,
                                                   std::uint64_t seed, int canvas) {
    if (count < 1) throw ConfigError("count must be >= 1");
    const Image prototype = render_prototype(spec, canvas);
    std::vector<LabeledSample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    const double center = (canvas - 1) / 2.0;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t sample_seed =
            derive_seed(seed, static_cast<std::uint64_t>(spec.class_id), static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(sample_seed);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const double angle = (2.0 * unit(rng) - 1.0) * jitter.max_rotation_deg * std::numbers::pi / 180.0;
        const double scale = jitter.min_scale + unit(rng) * (jitter.max_scale - jitter.min_scale);
        const double brightness = (2.0 * unit(rng) - 1.0) * jitter.brightness;
        const double contrast = 1.0 + (2.0 * unit(rng) - 1.0) * jitter.contrast;

        Image img = prototype;
        if (angle != 0.0 || scale != 1.0) {
            const double ca = std::cos(angle) / scale;
            const double sa = std::sin(angle) / scale;
            for (int y = 0; y < canvas; ++y) {
                for (int x = 0; x < canvas; ++x) {
                    // Inverse map: output pixel -> source coordinate in the prototype.
                    const double dx = x - center;
                    const double dy = y - center;
                    const double sx = ca * dx + sa * dy + center;
                    const double sy = -sa * dx + ca * dy + center;
                    const int x0 = static_cast<int>(std::floor(sx));
                    const int y0 = static_cast<int>(std::floor(sy));
                    const double wx = sx - x0;
                    const double wy = sy - y0;
                    auto fetch = [&](int yy, int xx) {
                        return (yy < 0 || yy >= canvas || xx < 0 || xx >= canvas) ? kBackground
                                                                                   : prototype.pixel(yy, xx);
                    };
                    const Rgb top = lerp(fetch(y0, x0), fetch(y0, x0 + 1), wx);
                    const Rgb bottom = lerp(fetch(y0 + 1, x0), fetch(y0 + 1, x0 + 1), wx);
                    img.set_pixel(y, x, lerp(top, bottom, wy));
                }
            }
        }
        if (brightness != 0.0 || contrast != 1.0) {
            for (float& v : img.data()) v = static_cast<float>((v - 0.5) * contrast + 0.5 + brightness);
        }
        if (jitter.noise_sigma > 0.0) {
            std::normal_distribution<double> noise(0.0, jitter.noise_sigma);
            for (float& v : img.data()) v = static_cast<float>(v + noise(rng));
        }
        img.clamp();
        samples.push_back({std::move(img), spec.class_id, Origin::original, sample_seed});
    }
    return samples;
}

// --- degradations ----------------------------------------------------------------------

std::string_view to_string(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::rust: return "rust";
        case DegradationKind::fade: return "fade";
        case DegradationKind::occlusion: return "occlusion";
        case DegradationKind::graffiti: return "graffiti";
    }
    return "?";
}

DegradationKind parse_degradation_kind(std::string_view name) {
    for (auto kind : {DegradationKind::rust, DegradationKind::fade, DegradationKind::occlusion,
                      DegradationKind::graffiti}) {
        if (to_string(kind) == name) return kind;
    }
    throw ValidationError("unknown degradation kind '" + std::string(name) + "'");
}

double fractal_noise(double x, double y, std::uint64_t seed, int octaves) {
    double total = 0.0;
    double norm = 0.0;
    double amplitude = 1.0;
    double frequency = 1.0;
    for (int o = 0; o < octaves; ++o) {
        total += amplitude * value_noise(x * frequency, y * frequency, derive_seed(seed, 0x0c7a, o));
        norm += amplitude;
        amplitude *= 0.5;
        frequency *= 2.0;
    }
    return norm > 0.0 ? total / norm : 0.0;
}

Image apply_degradation(const Image& image, const DegradationRecipe& recipe) {
    if (!std::isfinite(recipe.severity) || recipe.severity < 0.0 || recipe.severity > 1.0) {
        throw ValidationError("severity must be in [0,1], got " + std::to_string(recipe.severity));
    }
    image.validate();
    if (recipe.severity == 0.0) return image;
    Image out;
    switch (recipe.kind) {
        case DegradationKind::rust: out = rust(image, recipe.severity, recipe.seed); break;
        case DegradationKind::fade: out = fade(image, recipe.severity); break;
        case DegradationKind::occlusion: out = occlusion(image, recipe.severity, recipe.seed); break;
        case DegradationKind::graffiti: out = graffiti(image, recipe.severity, recipe.seed); break;
    }
    out.clamp();
    return out;
}

std::vector<DegradationRecipe> parse_recipes(std::istream& in) {
    std::vector<DegradationRecipe> recipes;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        std::istringstream fields(line);
        std::string kind;
        DegradationRecipe r;
        if (!(fields >> kind >> r.severity >> r.seed)) {
            throw ConfigError("recipe line " + std::to_string(line_no) + ": expected `kind severity seed`");
        }
        r.kind = parse_degradation_kind(kind);
        if (r.severity < 0.0 || r.severity > 1.0) {
            throw ValidationError("recipe line " + std::to_string(line_no) + ": severity outside [0,1]");
        }
        recipes.push_back(r);
    }
    return recipes;
}

std::string format_recipe(const DegradationRecipe& recipe) {
    std::ostringstream out;
    out << to_string(recipe.kind) << ' ' << recipe.severity << ' ' << recipe.seed;
    return out.str();
}

// --- ingestion --------------------------------------------------------------------------

std::vector<LabeledSample> ingest_gtsrb(const fs::path& root, const IngestOptions& options) {
    if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
    std::vector<IndexEntry> index;
    if (fs::exists(root / "labels.csv")) {
        index = read_labels_csv(root);
    } else {
        index = read_gtsrb_indices(root);
        if (index.empty()) throw DataError("no labels.csv or GT-*.csv index under " + root.string());
    }
    if (index.empty()) throw DataError("index under " + root.string() + " lists no images");

    std::sort(index.begin(), index.end(), [](const IndexEntry& a, const IndexEntry& b) {
        return std::tie(a.class_id, a.path) < std::tie(b.class_id, b.path);
    });
    std::vector<LabeledSample> samples;
    samples.reserve(index.size());
    std::size_t skipped = 0;
    for (const auto& entry : index) {
        try {
            Image img = read_image(entry.path);
            if (entry.roi) img = crop(img, *entry.roi);
            img = resize_bilinear(img, options.canvas, options.canvas);
            img.clamp();
            samples.push_back({std::move(img), entry.class_id, Origin::original,
                               std::hash<std::string>{}(entry.path.filename().string())});
        } catch (const DataError& e) {
            ++skipped;
            spdlog::warn("skipping undecodable image {}: {}", entry.path.string(), e.what());
        }
    }
    if (static_cast<double>(skipped) > options.max_skip_fraction * static_cast<double>(index.size())) {
        throw DataError("skipped " + std::to_string(skipped) + " of " + std::to_string(index.size()) +
                        " images, above the tolerated fraction");
    }
    return samples;
}

std::vector<std::string> write_dataset(const fs::path& root, std::span<const LabeledSample> samples) {
    fs::create_directories(root);
    std::map<int, int> next_index;
    std::vector<std::string> paths;
    paths.reserve(samples.size());
    std::ofstream labels(root / "labels.csv");
    if (!labels) throw IoError("cannot write " + (root / "labels.csv").string());
    labels << "path,class_id\n";
    for (const auto& s : samples) {
        const int index = next_index[s.label]++;
        const std::string rel = std::to_string(s.label) + "/" + std::to_string(index) + ".png";
        fs::create_directories(root / std::to_string(s.label));
        write_png(root / rel, s.image);
        labels << rel << ',' << s.label << '\n';
        paths.push_back(rel);
    }
    return paths;
}

void write_prototypes(const fs::path& root, std::span<const std::pair<int, Image>> prototypes) {
    fs::create_directories(root / "prototypes");
    for (const auto& [id, image] : prototypes) write_png(root / "prototypes" / (std::to_string(id) + ".png"), image);
}

std::vector<std::pair<int, Image>> read_prototypes(const fs::path& root, int canvas) {
    const fs::path dir = root / "prototypes";
    if (!fs::is_directory(dir)) throw DataError("missing prototypes directory " + dir.string());
    std::vector<std::pair<int, Image>> out;
    for (const auto& f : fs::directory_iterator(dir)) {
        if (!f.is_regular_file()) continue;
        const auto ext = f.path().extension().string();
        if (ext != ".png" && ext != ".ppm") continue;
        int id = 0;
        try {
            id = std::stoi(f.path().stem().string());
        } catch (const std::exception&) {
            continue;
        }
        out.emplace_back(id, resize_bilinear(read_image(f.path()), canvas, canvas));
    }
    if (out.empty()) throw DataError("no prototype images in " + dir.string());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

}  // namespace signadapt
