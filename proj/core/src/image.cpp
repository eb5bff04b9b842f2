#include "fedsda/image.hpp"

#include "fedsda/error.hpp"

#include <string>

namespace fedsda {

RgbImage::RgbImage(std::size_t w, std::size_t h, std::uint8_t fill) : width(w), height(h), pixels(w * h * 3, fill) {}

void RgbImage::validate() const {
    if (width == 0 || height == 0) throw ValidationError("image: width and height must be at least 1");
    if (pixels.size() != width * height * 3) {
        throw ValidationError("image: expected " + std::to_string(width * height * 3) + " bytes, got " + std::to_string(pixels.size()));
    }
    if (!(I0 > 0.0)) throw ValidationError("image: illuminating intensity I0 must be positive");
}

} // namespace fedsda
