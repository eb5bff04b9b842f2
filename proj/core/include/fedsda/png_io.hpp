#pragma once

#include "fedsda/image.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedsda::io {

/// Reads any PNG libpng understands and converts it to 8-bit RGB (alpha dropped).
RgbImage read_png(const std::filesystem::path& path);

/// Writes 8-bit RGB. Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const RgbImage& img);

/// Writes a 16-bit single-channel PNG.
void write_png_gray16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      std::span<const std::uint16_t> values);
std::vector<std::uint16_t> read_png_gray16(const std::filesystem::path& path, std::size_t& width, std::size_t& height);

/// *.png files directly inside `dir`, sorted by filename.
std::vector<std::filesystem::path> list_png_files(const std::filesystem::path& dir);

} // namespace fedsda::io
