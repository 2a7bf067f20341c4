#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/container.hpp"
#include "glacier/error.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/grid.hpp"

namespace glacier {

struct PatchMeta {
    std::string patch_id;
    std::string source_tile_id;
    std::string timestamp;
    std::string crs_code;
    MapRect bounds;
    std::size_t row = 0, col = 0;  // grid position within the source tile
    std::size_t pixel_row = 0, pixel_col = 0;  // top-left pixel within the source tile
    double glacier_fraction_clean = 0.0;
    double glacier_fraction_debris = 0.0;

    MapPoint centroid() const { return {bounds.center_x(), bounds.center_y()}; }
    bool operator==(const PatchMeta&) const = default;
};

inline nlohmann::json to_json(const PatchMeta& m) {
    return {{"patch_id", m.patch_id},
            {"source_tile_id", m.source_tile_id},
            {"timestamp", m.timestamp},
            {"crs_code", m.crs_code},
            {"bounds", {m.bounds.min_x, m.bounds.min_y, m.bounds.max_x, m.bounds.max_y}},
            {"row", m.row},
            {"col", m.col},
            {"pixel_row", m.pixel_row},
            {"pixel_col", m.pixel_col},
            {"glacier_fraction_clean", m.glacier_fraction_clean},
            {"glacier_fraction_debris", m.glacier_fraction_debris}};
}

inline PatchMeta meta_from_json(const nlohmann::json& j) {
    PatchMeta m;
    m.patch_id = j.at("patch_id").get<std::string>();
    m.source_tile_id = j.value("source_tile_id", "");
    m.timestamp = j.value("timestamp", "");
    m.crs_code = j.value("crs_code", "");
    const auto& b = j.at("bounds");
    m.bounds = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    m.row = j.value("row", std::size_t{0});
    m.col = j.value("col", std::size_t{0});
    m.pixel_row = j.value("pixel_row", std::size_t{0});
    m.pixel_col = j.value("pixel_col", std::size_t{0});
    m.glacier_fraction_clean = j.value("glacier_fraction_clean", 0.0);
    m.glacier_fraction_debris = j.value("glacier_fraction_debris", 0.0);
    return m;
}

/// C x H x W image patch.
struct Patch {
    Tensor3<float> data;
    std::vector<std::string> channels;
    PatchMeta meta;

    bool operator==(const Patch&) const = default;
};

/// Binary class planes. Slicing produces the three exclusive planes
/// (clean_ice, debris, background).
struct MaskPatch {
    Tensor3<std::uint8_t> data;
    std::vector<std::string> planes;
    PatchMeta meta;

    /// Per-pixel class codes recovered from clean_ice/debris planes.
    MaskGrid classes() const {
        MaskGrid g(data.width(), data.height(), 0);
        auto find = [&](const char* n) -> long {
            auto it = std::find(planes.begin(), planes.end(), n);
            return it == planes.end() ? -1 : static_cast<long>(it - planes.begin());
        };
        const long ci = find("clean_ice"), di = find("debris");
        auto v = g.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (ci >= 0 && data.plane(static_cast<std::size_t>(ci))[i]) v[i] = 1;
            if (di >= 0 && data.plane(static_cast<std::size_t>(di))[i]) v[i] = 2;
        }
        return g;
    }

    bool operator==(const MaskPatch&) const = default;
};

inline MaskPatch mask_patch_from_classes(const MaskGrid& classes, PatchMeta meta = {}) {
    MaskPatch m;
    m.planes = {"clean_ice", "debris", "background"};
    m.data = Tensor3<std::uint8_t>(3, classes.height(), classes.width(), 0);
    const auto v = classes.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::size_t plane = v[i] == 1 ? 0 : v[i] == 2 ? 1 : 2;
        m.data.plane(plane)[i] = 1;
    }
    m.meta = std::move(meta);
    return m;
}

struct PatchPair {
    Patch patch;
    MaskPatch mask;
};

enum class GlacierKind { clean_ice, debris };

/// Fraction of pixels positive in any of the selected class planes.
inline double glacier_fraction(const MaskPatch& mask, const std::set<GlacierKind>& classes) {
    if (classes.empty()) throw ConfigError("glacier_fraction needs at least one class");
    std::vector<std::span<const std::uint8_t>> planes;
    for (auto k : classes) {
        const char* name = k == GlacierKind::clean_ice ? "clean_ice" : "debris";
        auto it = std::find(mask.planes.begin(), mask.planes.end(), name);
        if (it == mask.planes.end()) throw ConfigError(std::string("mask has no '") + name + "' plane");
        planes.push_back(mask.data.plane(static_cast<std::size_t>(it - mask.planes.begin())));
    }
    const std::size_t n = mask.data.plane_size();
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (const auto& p : planes)
            if (p[i]) {
                ++count;
                break;
            }
    return n == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(n);
}

/// Number of window positions along one axis.
inline std::size_t slice_positions(std::size_t extent, std::size_t patch_size, std::size_t stride) {
    return extent < patch_size ? 0 : (extent - patch_size) / stride + 1;
}

/// Cut aligned patch pairs in row-major grid order. Edge remainders are dropped.
inline std::vector<PatchPair> slice_tile(const RasterTile& tile, const MaskGrid& mask, std::size_t patch_size = 512,
                                         std::size_t stride = 512) {
    if (patch_size == 0 || stride == 0) throw ConfigError("patch size and stride must be at least 1");
    if (mask.width() != tile.width || mask.height() != tile.height)
        throw ValidationError("mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                              ", tile is " + std::to_string(tile.width) + "x" + std::to_string(tile.height));
    tile.validate();
    const std::size_t ny = slice_positions(tile.height, patch_size, stride);
    const std::size_t nx = slice_positions(tile.width, patch_size, stride);
    const std::size_t c = tile.channels.size();
    std::vector<PatchPair> out;
    out.reserve(ny * nx);
    for (std::size_t gy = 0; gy < ny; ++gy)
        for (std::size_t gx = 0; gx < nx; ++gx) {
            const std::size_t r0 = gy * stride, c0 = gx * stride;
            PatchMeta meta;
            meta.patch_id = tile.id + "_r" + std::to_string(gy) + "_c" + std::to_string(gx);
            meta.source_tile_id = tile.id;
            meta.timestamp = tile.timestamp;
            meta.crs_code = tile.transform.crs_code;
            meta.bounds = window_bounds(tile.transform, static_cast<double>(r0), static_cast<double>(c0),
                                        static_cast<double>(patch_size), static_cast<double>(patch_size));
            meta.row = gy;
            meta.col = gx;
            meta.pixel_row = r0;
            meta.pixel_col = c0;

            PatchPair pp;
            pp.patch.data = Tensor3<float>(c, patch_size, patch_size);
            pp.patch.channels = tile.channel_names();
            for (std::size_t ch = 0; ch < c; ++ch) {
                const auto& g = *tile.channels[ch].grid;
                for (std::size_t y = 0; y < patch_size; ++y)
                    std::copy_n(&g(r0 + y, c0), patch_size, &pp.patch.data(ch, y, 0));
            }
            MaskGrid sub(patch_size, patch_size);
            for (std::size_t y = 0; y < patch_size; ++y) std::copy_n(&mask(r0 + y, c0), patch_size, &sub(y, 0));
            pp.mask = mask_patch_from_classes(sub);
            meta.glacier_fraction_clean = glacier_fraction(pp.mask, {GlacierKind::clean_ice});
            meta.glacier_fraction_debris = glacier_fraction(pp.mask, {GlacierKind::debris});
            pp.patch.meta = meta;
            pp.mask.meta = meta;
            out.push_back(std::move(pp));
        }
    return out;
}

struct FilterConfig {
    double min_glacier_fraction = 0.10;
    std::set<GlacierKind> classes_counted = {GlacierKind::clean_ice, GlacierKind::debris};

    void validate() const {
        if (!(min_glacier_fraction >= 0.0 && min_glacier_fraction <= 1.0))
            throw ConfigError("min_glacier_fraction must lie in [0, 1]");
        if (classes_counted.empty()) throw ConfigError("filter needs at least one counted class");
    }
};

/// Fraction of the counted classes from precomputed metadata (classes are exclusive).
inline double counted_fraction(const PatchMeta& m, const std::set<GlacierKind>& classes) {
    double f = 0.0;
    if (classes.count(GlacierKind::clean_ice)) f += m.glacier_fraction_clean;
    if (classes.count(GlacierKind::debris)) f += m.glacier_fraction_debris;
    return f;
}

/// Keep pairs whose counted glacier fraction is at least the threshold; order is kept.
inline std::vector<PatchPair> filter_patches(std::vector<PatchPair> pairs, const FilterConfig& config) {
    config.validate();
    std::vector<PatchPair> out;
    for (auto& p : pairs)
        if (counted_fraction(p.mask.meta, config.classes_counted) >= config.min_glacier_fraction)
            out.push_back(std::move(p));
    return out;
}

inline Patch impute_nan(Patch patch, float value = 0.0f) {
    for (auto& v : patch.data.storage())
        if (std::isnan(v)) v = value;
    return patch;
}

struct ChannelStats {
    double mean = 0.0;
    double std = 0.0;
};

/// Population mean and standard deviation of one plane, in double.
inline ChannelStats plane_stats(std::span<const float> v) {
    ChannelStats s;
    if (v.empty()) return s;
    double sum = 0.0;
    for (float x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (float x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size()));
    return s;
}

/// Per-channel statistics pooled over a patch set (for global normalization).
inline std::vector<ChannelStats> global_stats(const std::vector<const Patch*>& patches) {
    if (patches.empty()) throw ConfigError("global statistics need at least one patch");
    const std::size_t c = patches.front()->data.channels();
    std::vector<ChannelStats> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, n = 0.0;
        for (const auto* p : patches)
            for (float x : p->data.plane(ch)) sum += x, n += 1.0;
        const double mean = sum / n;
        double ss = 0.0;
        for (const auto* p : patches)
            for (float x : p->data.plane(ch)) ss += (x - mean) * (x - mean);
        out[ch] = {mean, std::sqrt(ss / n)};
    }
    return out;
}

struct NormalizeConfig {
    double epsilon = 1e-6;
    bool use_global_stats = false;
    std::vector<ChannelStats> global;  // required when use_global_stats
};

/// Per-channel z-score (x - mean) / (std + epsilon). Constant channels become 0.
inline Patch normalize_patch(Patch patch, const NormalizeConfig& config = {}) {
    const std::size_t c = patch.data.channels();
    if (config.use_global_stats && config.global.size() != c)
        throw ConfigError("global statistics cover " + std::to_string(config.global.size()) + " channels, patch has " +
                          std::to_string(c));
    for (std::size_t ch = 0; ch < c; ++ch) {
        auto plane = patch.data.plane(ch);
        const ChannelStats s = config.use_global_stats ? config.global[ch] : plane_stats(plane);
        if (s.std == 0.0) {
            std::fill(plane.begin(), plane.end(), 0.0f);
            continue;
        }
        const double denom = s.std + config.epsilon;
        for (auto& v : plane) v = static_cast<float>((v - s.mean) / denom);
    }
    return patch;
}

/// Imputation followed by normalization.
inline Patch preprocess_patch(Patch patch, const NormalizeConfig& config = {}) {
    return normalize_patch(impute_nan(std::move(patch)), config);
}

// ---- GLPX patch files ----

namespace detail {

template <class T>
nlohmann::json tensor_header(const Tensor3<T>& t, const std::vector<std::string>& names, const PatchMeta& meta) {
    return {{"dtype", sizeof(T) == 4 ? "f32" : "u8"},
            {"shape", {t.channels(), t.height(), t.width()}},
            {"channels", names},
            {"meta", to_json(meta)}};
}

inline std::size_t tensor_payload_size(const nlohmann::json& h) {
    const std::string dtype = h.at("dtype").get<std::string>();
    std::size_t bytes = dtype == "f32" ? 4 : dtype == "u8" ? 1 : 0;
    if (bytes == 0) throw FormatError("unsupported dtype '" + dtype + "'", 8);
    const auto& s = h.at("shape");
    if (!s.is_array() || s.size() != 3) throw FormatError("shape must have three dimensions", 8);
    return bytes * s[0].get<std::size_t>() * s[1].get<std::size_t>() * s[2].get<std::size_t>();
}

template <class T>
Tensor3<T> tensor_from(const container::Document& doc, const std::string& path) {
    const std::string want = sizeof(T) == 4 ? "f32" : "u8";
    if (doc.header.at("dtype").get<std::string>() != want)
        throw FormatError("'" + path + "' holds dtype " + doc.header.at("dtype").get<std::string>() + ", expected " +
                              want,
                          8);
    const auto& s = doc.header.at("shape");
    Tensor3<T> t(s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>());
    container::read_le(doc.payload.data(), t.data(), t.size());
    return t;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_patch(const Patch& p) {
    container::Document doc{detail::tensor_header(p.data, p.channels, p.meta), {}};
    container::append_le(doc.payload, p.data.data(), p.data.size());
    return container::encode(doc);
}

inline std::vector<std::uint8_t> encode_mask(const MaskPatch& m) {
    container::Document doc{detail::tensor_header(m.data, m.planes, m.meta), {}};
    container::append_le(doc.payload, m.data.data(), m.data.size());
    return container::encode(doc);
}

inline Patch decode_patch(const std::vector<std::uint8_t>& bytes, const std::string& path = "<memory>") {
    auto doc = container::decode(bytes, detail::tensor_payload_size);
    Patch p;
    p.data = detail::tensor_from<float>(doc, path);
    p.channels = doc.header.at("channels").get<std::vector<std::string>>();
    p.meta = meta_from_json(doc.header.at("meta"));
    return p;
}

inline MaskPatch decode_mask(const std::vector<std::uint8_t>& bytes, const std::string& path = "<memory>") {
    auto doc = container::decode(bytes, detail::tensor_payload_size);
    MaskPatch m;
    m.data = detail::tensor_from<std::uint8_t>(doc, path);
    m.planes = doc.header.at("channels").get<std::vector<std::string>>();
    m.meta = meta_from_json(doc.header.at("meta"));
    return m;
}

inline std::filesystem::path patch_path(const std::filesystem::path& dir, const std::string& id) {
    return dir / (id + ".glpx");
}

inline std::filesystem::path mask_path(const std::filesystem::path& dir, const std::string& id) {
    return dir / (id + ".mask.glpx");
}

inline std::filesystem::path write_patch(const Patch& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto path = patch_path(dir, p.meta.patch_id);
    container::write_file(path, encode_patch(p));
    return path;
}

inline std::filesystem::path write_patch(const MaskPatch& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto path = mask_path(dir, m.meta.patch_id);
    container::write_file(path, encode_mask(m));
    return path;
}

inline Patch read_patch(const std::filesystem::path& path) {
    return decode_patch(container::read_file(path), path.string());
}

inline MaskPatch read_mask(const std::filesystem::path& path) {
    return decode_mask(container::read_file(path), path.string());
}

}  // namespace glacier
