#include "signadapt/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "signadapt/errors.hpp"

namespace signadapt {

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
        throw DataError("invalid PNG " + name + ": " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&png);
        throw DataError("cannot decode PNG " + name + ": " + png.message);
    }
    Image image(static_cast<int>(png.height), static_cast<int>(png.width));
    auto data = image.data();
    for (std::size_t i = 0; i < buffer.size(); ++i) data[i] = static_cast<float>(buffer[i] / 255.0);
    return image;
}

class PpmReader {
public:
    explicit PpmReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    long next_int() {
        skip_space_and_comments();
        long value = 0;
        bool any = false;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            value = value * 10 + (bytes_[pos_] - '0');
            if (value > (1L << 24)) throw DataError("PPM header value too large");
            ++pos_;
            any = true;
        }
        if (!any) throw DataError("malformed PPM header");
        return value;
    }

    std::size_t position() const { return pos_; }
    void advance(std::size_t n) { pos_ += n; }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 2;
};

}  // namespace

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '3')) {
        throw DataError("not a PPM payload");
    }
    const bool binary = bytes[1] == '6';
    PpmReader reader(bytes);
    const long width = reader.next_int();
    const long height = reader.next_int();
    const long maxval = reader.next_int();
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) throw DataError("invalid PPM dimensions");
    Image image(static_cast<int>(height), static_cast<int>(width));
    auto data = image.data();
    if (binary) {
        reader.advance(1);  // single whitespace after maxval
        const std::size_t sample_bytes = maxval < 256 ? 1 : 2;
        const std::size_t needed = data.size() * sample_bytes;
        if (bytes.size() < reader.position() + needed) throw DataError("truncated PPM payload");
        const std::uint8_t* p = bytes.data() + reader.position();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const unsigned v = sample_bytes == 1 ? p[i] : (static_cast<unsigned>(p[2 * i]) << 8) | p[2 * i + 1];
            data[i] = static_cast<float>(static_cast<double>(v) / maxval);
        }
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) {
            const long v = reader.next_int();
            if (v > maxval) throw DataError("PPM sample exceeds maxval");
            data[i] = static_cast<float>(static_cast<double>(v) / maxval);
        }
    }
    return image;
}

Image read_image(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, path.string());
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '3')) {
        try {
            return decode_ppm(bytes);
        } catch (const DataError& e) {
            throw DataError(path.string() + ": " + e.what());
        }
    }
    throw DataError("unrecognized image format: " + path.string());
}

void write_png(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> buffer(image.size());
    const auto data = image.data();
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const double v = std::clamp(static_cast<double>(data[i]), 0.0, 1.0);
        buffer[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width());
    png.height = static_cast<png_uint_32>(image.height());
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
        throw IoError("cannot write PNG " + path.string() + ": " + png.message);
    }
}

}  // namespace signadapt
