#pragma once

// GLPX binary container shared by patches, checkpoints and pixel models:
//
//   "GLPX" | u32 LE header length | UTF-8 JSON header | LE payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"

namespace glacier::container {

inline constexpr char kMagic[4] = {'G', 'L', 'P', 'X'};

struct Document {
    nlohmann::json header;
    std::vector<std::uint8_t> payload;
};

template <class T>
void append_le(std::vector<std::uint8_t>& out, const T* values, std::size_t count) {
    const std::size_t start = out.size();
    out.resize(start + count * sizeof(T));
    std::memcpy(out.data() + start, values, count * sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (std::size_t i = 0; i < count; ++i) {
            auto* p = out.data() + start + i * sizeof(T);
            for (std::size_t a = 0, b = sizeof(T) - 1; a < b; ++a, --b) std::swap(p[a], p[b]);
        }
    }
}

template <class T>
void read_le(const std::uint8_t* src, T* values, std::size_t count) {
    std::memcpy(values, src, count * sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        auto* bytes = reinterpret_cast<std::uint8_t*>(values);
        for (std::size_t i = 0; i < count; ++i) {
            auto* p = bytes + i * sizeof(T);
            for (std::size_t a = 0, b = sizeof(T) - 1; a < b; ++a, --b) std::swap(p[a], p[b]);
        }
    }
}

inline std::vector<std::uint8_t> encode(const Document& doc) {
    const std::string header = doc.header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    const auto len = static_cast<std::uint32_t>(header.size());
    append_le(out, &len, 1);
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), doc.payload.begin(), doc.payload.end());
    return out;
}

/// Decode a container. `expected_payload` (if given) is computed from the
/// header by the caller-supplied function and checked against the byte count.
template <class SizeFn>
Document decode(const std::vector<std::uint8_t>& bytes, SizeFn expected_payload) {
    if (bytes.size() < 8) throw FormatError("container shorter than its 8-byte preamble", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected GLPX", 0);
    std::uint32_t len = 0;
    read_le(bytes.data() + 4, &len, 1);
    if (bytes.size() - 8 < len)
        throw FormatError("header declares " + std::to_string(len) + " bytes but only " +
                              std::to_string(bytes.size() - 8) + " follow",
                          4);
    Document doc;
    try {
        doc.header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed JSON header: ") + e.what(), 8 + (e.byte > 0 ? e.byte - 1 : 0));
    }
    if (!doc.header.is_object()) throw FormatError("JSON header is not an object", 8);
    const std::size_t start = 8 + static_cast<std::size_t>(len);
    const std::size_t actual = bytes.size() - start;
    std::size_t expected = 0;
    try {
        expected = expected_payload(doc.header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("header is missing required fields: ") + e.what(), 8);
    }
    if (actual != expected)
        throw FormatError("payload has " + std::to_string(actual) + " bytes, expected " + std::to_string(expected),
                          start + std::min(actual, expected));
    doc.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
    return doc;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

}  // namespace glacier::container
