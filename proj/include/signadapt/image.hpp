#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace signadapt {

struct Rgb {
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;

    friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Square-or-not H×W×3 image, interleaved channels, components in [0,1].
class Image {
public:
    static constexpr int kChannels = 3;

    Image() = default;
    Image(int height, int width, float fill = 0.0f);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

    Rgb pixel(int y, int x) const;
    void set_pixel(int y, int x, const Rgb& value);

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    /// Throws ValidationError unless every component is finite and in [0,1].
    void validate() const;
    /// Clamp every component into [0,1].
    void clamp();

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x)) *
                   kChannels +
               static_cast<std::size_t>(c);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

/// Mean absolute per-component difference. Images must share dimensions.
double mean_abs_difference(const Image& a, const Image& b);
/// Mean squared per-component difference. Images must share dimensions.
double mean_squared_difference(const Image& a, const Image& b);
/// Bilinear resample to the given size.
Image resize_bilinear(const Image& source, int height, int width);

/// SplitMix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t c = 0) noexcept {
    return mix_seed(mix_seed(mix_seed(mix_seed(base) ^ a) ^ (b * 0x2545f4914f6cdd1dULL)) ^
                    (c * 0x9e3779b97f4a7c15ULL + 1));
}

}  // namespace signadapt
