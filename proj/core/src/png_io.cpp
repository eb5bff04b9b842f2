#include "fedsda/png_io.hpp"

#include "fedsda/error.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <memory>

namespace fedsda::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) {
        if (mode[0] == 'r') throw ValidationError("png: cannot open " + path.string());
        throw StageError("png", "cannot open " + path.string() + " for writing");
    }
    return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    (void)png;
    throw StageError("png", msg);
}

void png_warn(png_structp, png_const_charp) {}

// libpng's setjmp-based error path is replaced by throwing from the error callback;
// the read/write structs are released by these guards.
struct ReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~ReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};
struct WriteGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~WriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

void write_rows(const std::filesystem::path& path, std::size_t width, std::size_t height, int bit_depth, int color_type,
                const std::vector<png_bytep>& rows) {
    auto f = open_file(path, "wb");
    WriteGuard g;
    g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    if (!g.png) throw StageError("png", "png_create_write_struct failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw StageError("png", "png_create_info_struct failed");
    png_init_io(g.png, f.get());
    png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(g.png, g.info);
    if (bit_depth == 16) png_set_swap(g.png);
    png_write_image(g.png, const_cast<png_bytepp>(rows.data()));
    png_write_end(g.png, nullptr);
}

} // namespace

RgbImage read_png(const std::filesystem::path& path) {
    auto f = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw ValidationError("png: " + path.string() + " is not a PNG file");
    ReadGuard g;
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    if (!g.png) throw StageError("png", "png_create_read_struct failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw StageError("png", "png_create_info_struct failed");
    png_init_io(g.png, f.get());
    png_set_sig_bytes(g.png, 8);
    png_read_info(g.png, g.info);

    const auto color = png_get_color_type(g.png, g.info);
    const auto depth = png_get_bit_depth(g.png, g.info);
    if (depth == 16) png_set_strip_16(g.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
    if (png_get_valid(g.png, g.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(g.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(g.png);
    png_set_strip_alpha(g.png);
    png_read_update_info(g.png, g.info);

    const std::size_t width = png_get_image_width(g.png, g.info);
    const std::size_t height = png_get_image_height(g.png, g.info);
    if (png_get_rowbytes(g.png, g.info) != width * 3) throw StageError("png", "unexpected row layout in " + path.string());
    RgbImage img(width, height);
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = img.pixels.data() + y * width * 3;
    png_read_image(g.png, rows.data());
    png_read_end(g.png, nullptr);
    return img;
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
    img.validate();
    std::vector<png_bytep> rows(img.height);
    auto* base = const_cast<std::uint8_t*>(img.pixels.data());
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = base + y * img.width * 3;
    write_rows(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

void write_png_gray16(const std::filesystem::path& path, std::size_t width, std::size_t height, std::span<const std::uint16_t> values) {
    if (width == 0 || height == 0 || values.size() != width * height) throw ValidationError("png: gray16 buffer does not match dimensions");
    std::vector<png_bytep> rows(height);
    auto* base = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(values.data()));
    for (std::size_t y = 0; y < height; ++y) rows[y] = base + y * width * 2;
    write_rows(path, width, height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

std::vector<std::uint16_t> read_png_gray16(const std::filesystem::path& path, std::size_t& width, std::size_t& height) {
    auto f = open_file(path, "rb");
    ReadGuard g;
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    g.info = png_create_info_struct(g.png);
    png_init_io(g.png, f.get());
    png_read_info(g.png, g.info);
    if (png_get_bit_depth(g.png, g.info) != 16 || png_get_color_type(g.png, g.info) != PNG_COLOR_TYPE_GRAY)
        throw ValidationError("png: " + path.string() + " is not 16-bit grayscale");
    png_set_swap(g.png);
    png_read_update_info(g.png, g.info);
    width = png_get_image_width(g.png, g.info);
    height = png_get_image_height(g.png, g.info);
    std::vector<std::uint16_t> out(width * height);
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = reinterpret_cast<png_bytep>(out.data() + y * width);
    png_read_image(g.png, rows.data());
    return out;
}

std::vector<std::filesystem::path> list_png_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

} // namespace fedsda::io
