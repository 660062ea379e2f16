#include "signadapt/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "signadapt/errors.hpp"

namespace signadapt {

Image::Image(int height, int width, float fill) : height_(height), width_(width) {
    if (height < 0 || width < 0) {
        throw ShapeError("image dimensions must be non-negative");
    }
    data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * kChannels, fill);
}

Rgb Image::pixel(int y, int x) const {
    const std::size_t i = index(y, x, 0);
    return {data_[i], data_[i + 1], data_[i + 2]};
}

void Image::set_pixel(int y, int x, const Rgb& value) {
    const std::size_t i = index(y, x, 0);
    data_[i] = static_cast<float>(value.r);
    data_[i + 1] = static_cast<float>(value.g);
    data_[i + 2] = static_cast<float>(value.b);
}

void Image::validate() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        const float v = data_[i];
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
            throw ValidationError("image component " + std::to_string(i) + " outside [0,1]: " +
                                  std::to_string(v));
        }
    }
}

void Image::clamp() {
    for (float& v : data_) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
}

namespace {

void require_same_shape(const Image& a, const Image& b) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError("image dimensions differ: " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()));
    }
}

}  // namespace

double mean_abs_difference(const Image& a, const Image& b) {
    require_same_shape(a, b);
    if (a.empty()) return 0.0;
    double total = 0.0;
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        total += std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i]));
    }
    return total / static_cast<double>(da.size());
}

double mean_squared_difference(const Image& a, const Image& b) {
    require_same_shape(a, b);
    if (a.empty()) return 0.0;
    double total = 0.0;
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        const double d = static_cast<double>(da[i]) - static_cast<double>(db[i]);
        total += d * d;
    }
    return total / static_cast<double>(da.size());
}

Image resize_bilinear(const Image& source, int height, int width) {
    if (source.empty() || height <= 0 || width <= 0) {
        throw ShapeError("cannot resize an empty image or to an empty size");
    }
    if (source.height() == height && source.width() == width) {
        return source;
    }
    Image out(height, width);
    const double sy = static_cast<double>(source.height()) / height;
    const double sx = static_cast<double>(source.width()) / width;
    for (int y = 0; y < height; ++y) {
        // Pixel-center alignment.
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, source.height() - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, source.height() - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, source.width() - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, source.width() - 1);
            const double wx = fx - x0;
            for (int c = 0; c < Image::kChannels; ++c) {
                const double top = source.at(y0, x0, c) * (1 - wx) + source.at(y0, x1, c) * wx;
                const double bottom = source.at(y1, x0, c) * (1 - wx) + source.at(y1, x1, c) * wx;
                out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bottom * wy);
            }
        }
    }
    return out;
}

}  // namespace signadapt
