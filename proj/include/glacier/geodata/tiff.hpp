#pragma once

// Minimal GeoTIFF codec: classic (32-bit offset) TIFF, strips or tiles,
// chunky or planar layout, no compression or Deflate, horizontal and
// floating-point predictors, integer and IEEE sample formats. Georeferencing
// is read from ModelPixelScale + ModelTiepoint or ModelTransformation; nodata
// from the GDAL_NODATA tag.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glacier/error.hpp"
#include "glacier/geodata/transform.hpp"

namespace glacier::tiff {

enum class SampleType { u8, u16, i16, u32, i32, f32, f64 };

struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    SampleType sample_type = SampleType::f32;
    std::vector<std::vector<float>> bands;
    /// 1 where any band equals the nodata value (or is NaN).
    std::vector<std::uint8_t> nodata_mask;
    std::optional<double> nodata;
    std::optional<GeoTransform> transform;
    std::string description;
    std::string datetime;
};

namespace tag {
inline constexpr std::uint16_t image_width = 256, image_length = 257, bits_per_sample = 258,
                               compression = 259, photometric = 262, image_description = 270,
                               strip_offsets = 273, samples_per_pixel = 277, rows_per_strip = 278,
                               strip_byte_counts = 279, planar_config = 284, datetime = 306, predictor = 317,
                               tile_width = 322, tile_length = 323, tile_offsets = 324, tile_byte_counts = 325,
                               extra_samples = 338, sample_format = 339, model_pixel_scale = 33550,
                               model_tiepoint = 33922, model_transformation = 34264, geo_key_directory = 34735,
                               gdal_nodata = 42113;
}

namespace detail {

struct Entry {
    std::uint16_t type = 0;
    std::uint32_t count = 0;
    std::size_t value_offset = 0;  // absolute offset of the first value byte
};

class Reader {
public:
    Reader(std::vector<std::uint8_t> bytes, std::string path) : b_(std::move(bytes)), path_(std::move(path)) {
        if (b_.size() < 8) throw FormatError(path_ + ": file too short for a TIFF header", b_.size());
        if (b_[0] == 'I' && b_[1] == 'I') little_ = true;
        else if (b_[0] == 'M' && b_[1] == 'M') little_ = false;
        else throw FormatError(path_ + ": not a TIFF file (bad byte-order mark)", 0);
        auto magic = u16(2);
        if (magic == 43) throw FormatError(path_ + ": BigTIFF is not supported", 2);
        if (magic != 42) throw FormatError(path_ + ": not a TIFF file (bad magic)", 2);
        std::size_t ifd = u32(4);
        need(ifd, 2);
        std::size_t n = u16(ifd);
        need(ifd + 2, n * 12);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t e = ifd + 2 + i * 12;
            Entry en;
            auto t = u16(e);
            en.type = u16(e + 2);
            en.count = u32(e + 4);
            std::size_t total = type_size(en.type) * en.count;
            en.value_offset = total <= 4 ? e + 8 : u32(e + 8);
            need(en.value_offset, total);
            entries_[t] = en;
        }
    }

    bool has(std::uint16_t t) const { return entries_.count(t) != 0; }

    std::vector<double> numbers(std::uint16_t t) const {
        auto it = entries_.find(t);
        if (it == entries_.end()) return {};
        const Entry& e = it->second;
        std::vector<double> out;
        out.reserve(e.count);
        std::size_t sz = type_size(e.type);
        for (std::uint32_t i = 0; i < e.count; ++i) {
            std::size_t o = e.value_offset + i * sz;
            switch (e.type) {
                case 1: case 7: out.push_back(b_[o]); break;
                case 6: out.push_back(static_cast<std::int8_t>(b_[o])); break;
                case 3: out.push_back(u16(o)); break;
                case 8: out.push_back(static_cast<std::int16_t>(u16(o))); break;
                case 4: out.push_back(u32(o)); break;
                case 9: out.push_back(static_cast<std::int32_t>(u32(o))); break;
                case 5: out.push_back(static_cast<double>(u32(o)) / u32(o + 4)); break;
                case 10:
                    out.push_back(static_cast<double>(static_cast<std::int32_t>(u32(o))) /
                                  static_cast<std::int32_t>(u32(o + 4)));
                    break;
                case 11: out.push_back(std::bit_cast<float>(u32(o))); break;
                case 12: out.push_back(std::bit_cast<double>(u64(o))); break;
                default: throw FormatError(path_ + ": unsupported field type " + std::to_string(e.type), o);
            }
        }
        return out;
    }

    std::optional<double> number(std::uint16_t t) const {
        auto v = numbers(t);
        if (v.empty()) return std::nullopt;
        return v[0];
    }

    std::string text(std::uint16_t t) const {
        auto it = entries_.find(t);
        if (it == entries_.end()) return {};
        const Entry& e = it->second;
        std::string s(reinterpret_cast<const char*>(b_.data() + e.value_offset), e.count);
        while (!s.empty() && s.back() == '\0') s.pop_back();
        return s;
    }

    const std::vector<std::uint8_t>& bytes() const { return b_; }
    bool little() const { return little_; }
    const std::string& path() const { return path_; }

    void need(std::size_t off, std::size_t len) const {
        if (off > b_.size() || len > b_.size() - off)
            throw FormatError(path_ + ": truncated file, expected " + std::to_string(len) + " bytes but only " +
                                  std::to_string(off > b_.size() ? 0 : b_.size() - off) + " available",
                              off);
    }

    std::uint16_t u16(std::size_t o) const {
        return little_ ? static_cast<std::uint16_t>(b_[o] | (b_[o + 1] << 8))
                       : static_cast<std::uint16_t>((b_[o] << 8) | b_[o + 1]);
    }
    std::uint32_t u32(std::size_t o) const {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[o + i]) << (little_ ? 8 * i : 8 * (3 - i));
        return v;
    }
    std::uint64_t u64(std::size_t o) const {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[o + i]) << (little_ ? 8 * i : 8 * (7 - i));
        return v;
    }

    static std::size_t type_size(std::uint16_t type) {
        switch (type) {
            case 1: case 2: case 6: case 7: return 1;
            case 3: case 8: return 2;
            case 4: case 9: case 11: return 4;
            case 5: case 10: case 12: case 16: return 8;
            default: return 1;
        }
    }

private:
    std::vector<std::uint8_t> b_;
    std::string path_;
    bool little_ = true;
    std::map<std::uint16_t, Entry> entries_;
};

inline std::size_t sample_bytes(SampleType t) {
    switch (t) {
        case SampleType::u8: return 1;
        case SampleType::u16: case SampleType::i16: return 2;
        case SampleType::u32: case SampleType::i32: case SampleType::f32: return 4;
        case SampleType::f64: return 8;
    }
    return 1;
}

inline std::vector<std::uint8_t> inflate_block(const std::uint8_t* src, std::size_t len, std::size_t expected,
                                               const std::string& path, std::size_t offset) {
    std::vector<std::uint8_t> out(expected);
    uLongf out_len = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &out_len, src, static_cast<uLong>(len));
    if (rc != Z_OK && rc != Z_BUF_ERROR) throw FormatError(path + ": deflate stream is corrupt", offset);
    if (out_len != expected)
        throw FormatError(path + ": deflate block decoded to " + std::to_string(out_len) + " bytes, expected " +
                              std::to_string(expected),
                          offset);
    return out;
}

/// Read one sample from raw row-major bytes in file byte order.
inline double read_sample(const std::uint8_t* p, SampleType t, bool little) {
    auto load = [&](std::size_t n) {
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (little ? 8 * i : 8 * (n - 1 - i));
        return v;
    };
    switch (t) {
        case SampleType::u8: return p[0];
        case SampleType::u16: return static_cast<double>(load(2));
        case SampleType::i16: return static_cast<std::int16_t>(load(2));
        case SampleType::u32: return static_cast<double>(load(4));
        case SampleType::i32: return static_cast<std::int32_t>(load(4));
        case SampleType::f32: return std::bit_cast<float>(static_cast<std::uint32_t>(load(4)));
        case SampleType::f64: return std::bit_cast<double>(load(8));
    }
    return 0;
}

/// Undo the horizontal-differencing predictor on one decoded block.
inline void undo_predictor2(std::vector<std::uint8_t>& buf, std::size_t block_w, std::size_t rows, std::size_t spp,
                            SampleType t, bool little) {
    const std::size_t sb = sample_bytes(t);
    const std::size_t row_bytes = block_w * spp * sb;
    for (std::size_t r = 0; r < rows; ++r) {
        std::uint8_t* row = buf.data() + r * row_bytes;
        for (std::size_t i = spp; i < block_w * spp; ++i) {
            std::uint8_t* cur = row + i * sb;
            const std::uint8_t* prev = row + (i - spp) * sb;
            // Integer add in file byte order.
            std::uint64_t a = 0, b = 0;
            for (std::size_t k = 0; k < sb; ++k) {
                std::size_t sh = little ? 8 * k : 8 * (sb - 1 - k);
                a |= static_cast<std::uint64_t>(cur[k]) << sh;
                b |= static_cast<std::uint64_t>(prev[k]) << sh;
            }
            std::uint64_t s = a + b;
            for (std::size_t k = 0; k < sb; ++k) {
                std::size_t sh = little ? 8 * k : 8 * (sb - 1 - k);
                cur[k] = static_cast<std::uint8_t>(s >> sh);
            }
        }
    }
}

/// Undo the floating-point predictor (byte-wise differencing of
/// most-significant-first byte planes), leaving samples in little-endian order.
inline void undo_predictor3(std::vector<std::uint8_t>& buf, std::size_t block_w, std::size_t rows, std::size_t spp,
                            SampleType t) {
    const std::size_t sb = sample_bytes(t);
    const std::size_t n = block_w * spp;
    const std::size_t row_bytes = n * sb;
    std::vector<std::uint8_t> tmp(row_bytes);
    for (std::size_t r = 0; r < rows; ++r) {
        std::uint8_t* row = buf.data() + r * row_bytes;
        for (std::size_t i = spp; i < row_bytes; ++i) row[i] = static_cast<std::uint8_t>(row[i] + row[i - spp]);
        std::memcpy(tmp.data(), row, row_bytes);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < sb; ++k) row[i * sb + k] = tmp[(sb - 1 - k) * n + i];
    }
}

inline SampleType sample_type_of(int format, int bits, const std::string& path) {
    if (format == 1 && bits == 8) return SampleType::u8;
    if (format == 1 && bits == 16) return SampleType::u16;
    if (format == 2 && bits == 16) return SampleType::i16;
    if (format == 1 && bits == 32) return SampleType::u32;
    if (format == 2 && bits == 32) return SampleType::i32;
    if (format == 3 && bits == 32) return SampleType::f32;
    if (format == 3 && bits == 64) return SampleType::f64;
    if (format == 2 && bits == 8) return SampleType::u8;
    throw FormatError(path + ": unsupported sample format " + std::to_string(format) + " with " +
                          std::to_string(bits) + " bits",
                      0);
}

inline std::string epsg_from_geokeys(const std::vector<double>& keys) {
    if (keys.size() < 4) return {};
    std::size_t n = static_cast<std::size_t>(keys[3]);
    std::string crs;
    for (std::size_t i = 0; i < n && 4 + 4 * i + 3 < keys.size(); ++i) {
        int id = static_cast<int>(keys[4 + 4 * i]);
        int loc = static_cast<int>(keys[4 + 4 * i + 1]);
        int value = static_cast<int>(keys[4 + 4 * i + 3]);
        if (loc != 0) continue;
        if (id == 3072 && value > 0 && value != 32767) return "EPSG:" + std::to_string(value);
        if (id == 2048 && value > 0 && value != 32767) crs = "EPSG:" + std::to_string(value);
    }
    return crs;
}

}  // namespace detail

inline Raster decode(std::vector<std::uint8_t> bytes, const std::string& path) {
    detail::Reader rd(std::move(bytes), path);
    Raster out;
    auto w = rd.number(tag::image_width), h = rd.number(tag::image_length);
    if (!w || !h) throw FormatError(path + ": missing image dimensions", 0);
    out.width = static_cast<std::size_t>(*w);
    out.height = static_cast<std::size_t>(*h);
    const std::size_t spp = static_cast<std::size_t>(rd.number(tag::samples_per_pixel).value_or(1));
    auto bits = rd.numbers(tag::bits_per_sample);
    auto formats = rd.numbers(tag::sample_format);
    int bps = bits.empty() ? 1 : static_cast<int>(bits[0]);
    int fmt = formats.empty() ? 1 : static_cast<int>(formats[0]);
    for (auto b : bits)
        if (static_cast<int>(b) != bps) throw FormatError(path + ": mixed bits-per-sample is not supported", 0);
    out.sample_type = detail::sample_type_of(fmt, bps, path);
    const std::size_t sb = detail::sample_bytes(out.sample_type);
    const int compression = static_cast<int>(rd.number(tag::compression).value_or(1));
    if (compression != 1 && compression != 8 && compression != 32946)
        throw FormatError(path + ": unsupported compression " + std::to_string(compression), 0);
    const int predictor = static_cast<int>(rd.number(tag::predictor).value_or(1));
    const bool planar = rd.number(tag::planar_config).value_or(1) == 2;

    const bool tiled = rd.has(tag::tile_offsets);
    std::size_t block_w = out.width, block_h = 0;
    std::vector<double> offsets, counts;
    if (tiled) {
        block_w = static_cast<std::size_t>(rd.number(tag::tile_width).value_or(0));
        block_h = static_cast<std::size_t>(rd.number(tag::tile_length).value_or(0));
        offsets = rd.numbers(tag::tile_offsets);
        counts = rd.numbers(tag::tile_byte_counts);
    } else {
        block_h = static_cast<std::size_t>(rd.number(tag::rows_per_strip).value_or(static_cast<double>(out.height)));
        if (block_h == 0 || block_h > out.height) block_h = out.height;
        offsets = rd.numbers(tag::strip_offsets);
        counts = rd.numbers(tag::strip_byte_counts);
    }
    if (block_w == 0 || block_h == 0 || offsets.empty() || offsets.size() != counts.size())
        throw FormatError(path + ": invalid strip/tile layout", 0);

    const std::size_t blocks_across = (out.width + block_w - 1) / block_w;
    const std::size_t blocks_down = (out.height + block_h - 1) / block_h;
    const std::size_t per_plane = blocks_across * blocks_down;
    const std::size_t planes = planar ? spp : 1;
    if (offsets.size() < per_plane * planes)
        throw FormatError(path + ": expected " + std::to_string(per_plane * planes) + " data blocks, found " +
                              std::to_string(offsets.size()),
                          0);
    const std::size_t block_spp = planar ? 1 : spp;

    std::vector<double> nd_values;
    std::string nd_text = rd.text(tag::gdal_nodata);
    if (!nd_text.empty()) {
        try {
            out.nodata = std::stod(nd_text);
        } catch (...) {
            if (nd_text.find("nan") != std::string::npos || nd_text.find("NaN") != std::string::npos)
                out.nodata = std::nan("");
        }
    }

    out.bands.assign(spp, std::vector<float>(out.width * out.height));
    out.nodata_mask.assign(out.width * out.height, 0);
    const bool little = rd.little();
    for (std::size_t plane = 0; plane < planes; ++plane) {
        for (std::size_t by = 0; by < blocks_down; ++by) {
            for (std::size_t bx = 0; bx < blocks_across; ++bx) {
                std::size_t idx = plane * per_plane + by * blocks_across + bx;
                std::size_t off = static_cast<std::size_t>(offsets[idx]);
                std::size_t len = static_cast<std::size_t>(counts[idx]);
                // Strips at the bottom may be short; tiles are always full size.
                std::size_t rows = tiled ? block_h : std::min(block_h, out.height - by * block_h);
                std::size_t expected = block_w * rows * block_spp * sb;
                rd.need(off, len);
                std::vector<std::uint8_t> buf;
                if (compression == 1) {
                    if (len < expected)
                        throw FormatError(path + ": data block holds " + std::to_string(len) +
                                              " bytes, expected " + std::to_string(expected),
                                          off);
                    buf.assign(rd.bytes().begin() + static_cast<long>(off),
                               rd.bytes().begin() + static_cast<long>(off + expected));
                } else {
                    buf = detail::inflate_block(rd.bytes().data() + off, len, expected, path, off);
                }
                bool buf_little = little;
                if (predictor == 2) detail::undo_predictor2(buf, block_w, rows, block_spp, out.sample_type, little);
                if (predictor == 3) {
                    detail::undo_predictor3(buf, block_w, rows, block_spp, out.sample_type);
                    buf_little = true;
                }
                for (std::size_t r = 0; r < rows; ++r) {
                    std::size_t y = by * block_h + r;
                    if (y >= out.height) break;
                    for (std::size_t c = 0; c < block_w; ++c) {
                        std::size_t x = bx * block_w + c;
                        if (x >= out.width) break;
                        for (std::size_t s = 0; s < block_spp; ++s) {
                            const std::uint8_t* p = buf.data() + ((r * block_w + c) * block_spp + s) * sb;
                            double v = detail::read_sample(p, out.sample_type, buf_little);
                            std::size_t band = planar ? plane : s;
                            std::size_t cell = y * out.width + x;
                            bool missing = std::isnan(v) ||
                                           (out.nodata && !std::isnan(*out.nodata) && v == *out.nodata);
                            if (missing) out.nodata_mask[cell] = 1;
                            out.bands[band][cell] = static_cast<float>(v);
                        }
                    }
                }
            }
        }
    }

    auto scale = rd.numbers(tag::model_pixel_scale);
    auto tie = rd.numbers(tag::model_tiepoint);
    auto mtx = rd.numbers(tag::model_transformation);
    if (mtx.size() == 16) {
        GeoTransform t;
        t.origin_x = mtx[3];
        t.pixel_width = mtx[0];
        t.row_rotation = mtx[1];
        t.origin_y = mtx[7];
        t.col_rotation = mtx[4];
        t.pixel_height = mtx[5];
        out.transform = t;
    } else if (scale.size() >= 2 && tie.size() >= 6) {
        GeoTransform t;
        t.pixel_width = scale[0];
        t.pixel_height = -scale[1];
        t.origin_x = tie[3] - tie[0] * t.pixel_width;
        t.origin_y = tie[4] - tie[1] * t.pixel_height;
        out.transform = t;
    }
    if (out.transform) out.transform->crs_code = detail::epsg_from_geokeys(rd.numbers(tag::geo_key_directory));
    out.description = rd.text(tag::image_description);
    out.datetime = rd.text(tag::datetime);
    return out;
}

inline Raster read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open raster '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(std::move(bytes), path.string());
}

namespace detail {

class Writer {
public:
    void add(std::uint16_t t, std::uint16_t type, std::vector<std::uint8_t> payload, std::uint32_t count) {
        fields_[t] = Field{type, count, std::move(payload)};
    }
    void shorts(std::uint16_t t, const std::vector<std::uint16_t>& v) {
        std::vector<std::uint8_t> p;
        for (auto x : v) put(p, x, 2);
        add(t, 3, std::move(p), static_cast<std::uint32_t>(v.size()));
    }
    void longs(std::uint16_t t, const std::vector<std::uint32_t>& v) {
        std::vector<std::uint8_t> p;
        for (auto x : v) put(p, x, 4);
        add(t, 4, std::move(p), static_cast<std::uint32_t>(v.size()));
    }
    void doubles(std::uint16_t t, const std::vector<double>& v) {
        std::vector<std::uint8_t> p;
        for (auto x : v) put(p, std::bit_cast<std::uint64_t>(x), 8);
        add(t, 12, std::move(p), static_cast<std::uint32_t>(v.size()));
    }
    void ascii(std::uint16_t t, const std::string& s) {
        std::vector<std::uint8_t> p(s.begin(), s.end());
        p.push_back(0);
        auto n = static_cast<std::uint32_t>(p.size());
        add(t, 2, std::move(p), n);
    }

    /// Lay out header, IFD, out-of-line values, then pixel blocks. Strip
    /// offsets are patched once the block positions are known.
    std::vector<std::uint8_t> finish(const std::vector<std::vector<std::uint8_t>>& blocks) {
        std::vector<std::uint32_t> counts;
        for (const auto& b : blocks) counts.push_back(static_cast<std::uint32_t>(b.size()));
        longs(tag::strip_byte_counts, counts);
        longs(tag::strip_offsets, std::vector<std::uint32_t>(blocks.size(), 0));

        std::vector<std::uint8_t> out = {'I', 'I', 42, 0, 8, 0, 0, 0};
        const std::size_t ifd_size = 2 + fields_.size() * 12 + 4;
        std::size_t extra = 8 + ifd_size;
        std::map<std::uint16_t, std::size_t> value_pos;
        for (auto& [t, f] : fields_) {
            if (f.payload.size() > 4) {
                if (extra % 2) ++extra;
                value_pos[t] = extra;
                extra += f.payload.size();
            }
        }
        if (extra % 2) ++extra;
        std::vector<std::uint32_t> offsets;
        std::size_t pos = extra;
        for (const auto& b : blocks) {
            offsets.push_back(static_cast<std::uint32_t>(pos));
            pos += b.size();
        }
        {
            std::vector<std::uint8_t> p;
            for (auto x : offsets) put(p, x, 4);
            fields_[tag::strip_offsets].payload = std::move(p);
        }
        out.reserve(pos);
        put(out, fields_.size(), 2);
        for (auto& [t, f] : fields_) {
            put(out, t, 2);
            put(out, f.type, 2);
            put(out, f.count, 4);
            if (f.payload.size() <= 4) {
                auto v = f.payload;
                v.resize(4, 0);
                out.insert(out.end(), v.begin(), v.end());
            } else {
                put(out, value_pos[t], 4);
            }
        }
        put(out, 0, 4);
        for (auto& [t, f] : fields_) {
            if (f.payload.size() <= 4) continue;
            out.resize(value_pos[t], 0);
            out.insert(out.end(), f.payload.begin(), f.payload.end());
        }
        out.resize(extra, 0);
        for (const auto& b : blocks) out.insert(out.end(), b.begin(), b.end());
        return out;
    }

    static void put(std::vector<std::uint8_t>& p, std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) p.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

private:
    struct Field {
        std::uint16_t type;
        std::uint32_t count;
        std::vector<std::uint8_t> payload;
    };
    std::map<std::uint16_t, Field> fields_;
};

inline int epsg_number(const std::string& crs) {
    if (crs.rfind("EPSG:", 0) != 0) return 0;
    try {
        return std::stoi(crs.substr(5));
    } catch (...) {
        return 0;
    }
}

}  // namespace detail

/// Encode as little-endian planar TIFF, one strip per band. `out_type` is
/// f32 or u8 (values rounded and clamped to [0, 255]).
inline std::vector<std::uint8_t> encode(const Raster& r, SampleType out_type = SampleType::f32) {
    if (out_type != SampleType::f32 && out_type != SampleType::u8)
        throw ConfigError("GeoTIFF writer supports f32 and u8 output only");
    if (r.bands.empty()) throw ConfigError("cannot write a raster with no bands");
    const auto spp = static_cast<std::uint16_t>(r.bands.size());
    const std::uint16_t bits = out_type == SampleType::f32 ? 32 : 8;
    const std::uint16_t fmt = out_type == SampleType::f32 ? 3 : 1;
    detail::Writer w;
    w.longs(tag::image_width, {static_cast<std::uint32_t>(r.width)});
    w.longs(tag::image_length, {static_cast<std::uint32_t>(r.height)});
    w.shorts(tag::bits_per_sample, std::vector<std::uint16_t>(spp, bits));
    w.shorts(tag::compression, {1});
    w.shorts(tag::photometric, {1});
    if (!r.description.empty()) w.ascii(tag::image_description, r.description);
    w.shorts(tag::samples_per_pixel, {spp});
    w.longs(tag::rows_per_strip, {static_cast<std::uint32_t>(r.height)});
    w.shorts(tag::planar_config, {2});
    if (!r.datetime.empty()) w.ascii(tag::datetime, r.datetime);
    if (spp > 1) w.shorts(tag::extra_samples, std::vector<std::uint16_t>(spp - 1, 0));
    w.shorts(tag::sample_format, std::vector<std::uint16_t>(spp, fmt));
    if (r.transform) {
        const GeoTransform& t = *r.transform;
        if (t.row_rotation == 0.0 && t.col_rotation == 0.0) {
            w.doubles(tag::model_pixel_scale, {t.pixel_width, -t.pixel_height, 0.0});
            w.doubles(tag::model_tiepoint, {0, 0, 0, t.origin_x, t.origin_y, 0});
        } else {
            w.doubles(tag::model_transformation, {t.pixel_width, t.row_rotation, 0, t.origin_x, t.col_rotation,
                                                  t.pixel_height, 0, t.origin_y, 0, 0, 0, 0, 0, 0, 0, 1});
        }
        int epsg = detail::epsg_number(t.crs_code);
        bool geographic = epsg >= 4000 && epsg < 5000;
        std::vector<std::uint16_t> keys = {1, 1, 0, 0};
        keys.insert(keys.end(), {1024, 0, 1, static_cast<std::uint16_t>(geographic ? 2 : 1)});
        keys.insert(keys.end(), {1025, 0, 1, 1});
        if (epsg > 0)
            keys.insert(keys.end(), {static_cast<std::uint16_t>(geographic ? 2048 : 3072), 0, 1,
                                     static_cast<std::uint16_t>(epsg)});
        keys[3] = static_cast<std::uint16_t>((keys.size() - 4) / 4);
        w.shorts(tag::geo_key_directory, keys);
    }
    if (r.nodata) {
        std::string nd = std::isnan(*r.nodata) ? "nan" : std::to_string(*r.nodata);
        w.ascii(tag::gdal_nodata, nd);
    }
    std::vector<std::vector<std::uint8_t>> blocks;
    for (const auto& band : r.bands) {
        if (band.size() != r.width * r.height) throw ShapeError("band size does not match raster dimensions");
        std::vector<std::uint8_t> b;
        b.reserve(band.size() * (bits / 8));
        for (float v : band) {
            if (out_type == SampleType::f32) {
                detail::Writer::put(b, std::bit_cast<std::uint32_t>(v), 4);
            } else {
                float c = std::isnan(v) ? 0.0f : std::clamp(std::round(v), 0.0f, 255.0f);
                b.push_back(static_cast<std::uint8_t>(c));
            }
        }
        blocks.push_back(std::move(b));
    }
    return w.finish(blocks);
}

inline void write(const std::filesystem::path& path, const Raster& r, SampleType out_type = SampleType::f32) {
    auto bytes = encode(r, out_type);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write raster '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace glacier::tiff
