#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "glacier/error.hpp"

namespace glacier::png {

/// 8-bit image with `channels` interleaved samples per pixel (1, 3 or 4).
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;
};

namespace detail {

inline void write_cb(png_structp p, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
    out->insert(out->end(), data, data + len);
}
inline void flush_cb(png_structp) {}

struct ReadState {
    const std::vector<std::uint8_t>* bytes;
    std::size_t pos;
};

inline void read_cb(png_structp p, png_bytep data, png_size_t len) {
    auto* st = static_cast<ReadState*>(png_get_io_ptr(p));
    if (st->pos + len > st->bytes->size()) png_error(p, "truncated PNG");
    std::memcpy(data, st->bytes->data() + st->pos, len);
    st->pos += len;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Image& img) {
    if (img.pixels.size() != img.width * img.height * static_cast<std::size_t>(img.channels))
        throw ShapeError("PNG pixel buffer does not match dimensions");
    int color = img.channels == 1   ? PNG_COLOR_TYPE_GRAY
                : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                : img.channels == 4 ? PNG_COLOR_TYPE_RGBA
                                    : -1;
    if (color < 0) throw ConfigError("PNG supports 1, 3 or 4 channels");
    png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = p ? png_create_info_struct(p) : nullptr;
    if (!p || !info) {
        png_destroy_write_struct(&p, &info);
        throw IoError("libpng initialization failed");
    }
    std::vector<std::uint8_t> out;
    if (setjmp(png_jmpbuf(p))) {
        png_destroy_write_struct(&p, &info);
        throw IoError("PNG encoding failed");
    }
    png_set_write_fn(p, &out, detail::write_cb, detail::flush_cb);
    png_set_IHDR(p, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(p, info);
    const std::size_t stride = img.width * static_cast<std::size_t>(img.channels);
    for (std::size_t y = 0; y < img.height; ++y)
        png_write_row(p, const_cast<png_bytep>(img.pixels.data() + y * stride));
    png_write_end(p, nullptr);
    png_destroy_write_struct(&p, &info);
    return out;
}

inline Image decode(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("not a PNG stream", 0);
    png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = p ? png_create_info_struct(p) : nullptr;
    if (!p || !info) {
        png_destroy_read_struct(&p, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    detail::ReadState st{&bytes, 0};
    Image img;
    if (setjmp(png_jmpbuf(p))) {
        png_destroy_read_struct(&p, &info, nullptr);
        throw FormatError("PNG decoding failed", st.pos);
    }
    png_set_read_fn(p, &st, detail::read_cb);
    png_read_info(p, info);
    if (png_get_bit_depth(p, info) != 8) png_error(p, "only 8-bit PNG is supported");
    img.width = png_get_image_width(p, info);
    img.height = png_get_image_height(p, info);
    img.channels = png_get_channels(p, info);
    img.pixels.resize(img.width * img.height * static_cast<std::size_t>(img.channels));
    const std::size_t stride = img.width * static_cast<std::size_t>(img.channels);
    for (std::size_t y = 0; y < img.height; ++y) png_read_row(p, img.pixels.data() + y * stride, nullptr);
    png_destroy_read_struct(&p, &info, nullptr);
    return img;
}

inline void write(const std::filesystem::path& path, const Image& img) {
    auto bytes = encode(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

}  // namespace glacier::png
