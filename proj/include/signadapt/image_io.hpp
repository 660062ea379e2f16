#pragma once

#include <filesystem>
#include <vector>
#include <cstdint>

#include "signadapt/image.hpp"

namespace signadapt {

/// Decode a PNG or binary/ASCII PPM file (chosen by magic bytes). Throws DataError.
Image read_image(const std::filesystem::path& path);

/// 8-bit RGB PNG. Throws IoError.
void write_png(const std::filesystem::path& path, const Image& image);

/// Decode an in-memory PPM (P3 or P6, maxval <= 65535).
Image decode_ppm(const std::vector<std::uint8_t>& bytes);

}  // namespace signadapt
