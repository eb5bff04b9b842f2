#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fedsda {

/// 8-bit RGB image, interleaved row-major. I0 is the illuminating intensity used by
/// the optical-density transform.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels; ///< width * height * 3
    double I0 = 255.0;

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0);

    std::size_t pixel_count() const noexcept { return width * height; }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    /// Throws ValidationError on empty dimensions or a pixel buffer of the wrong size.
    void validate() const;

    bool operator==(const RgbImage& o) const { return width == o.width && height == o.height && pixels == o.pixels; }
};

} // namespace fedsda
