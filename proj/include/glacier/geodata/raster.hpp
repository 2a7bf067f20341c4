#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/png.hpp"
#include "glacier/geodata/tiff.hpp"
#include "glacier/geodata/transform.hpp"
#include "glacier/grid.hpp"

namespace glacier {

using ChannelGrid = Grid<float>;
using SharedGrid = std::shared_ptr<const ChannelGrid>;

struct Channel {
    std::string name;
    SharedGrid grid;
};

/// Georeferenced multi-channel raster. Channel grids are immutable and shared
/// between tiles derived from one another (channel selection, terrain
/// attachment), so copies are cheap.
struct RasterTile {
    std::string id;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<Channel> channels;
    Grid<std::uint8_t> nodata_mask;
    GeoTransform transform;
    std::string timestamp;  // ISO date, may be empty

    bool has_channel(const std::string& name) const {
        return std::any_of(channels.begin(), channels.end(), [&](const Channel& c) { return c.name == name; });
    }

    const ChannelGrid& channel(const std::string& name) const {
        for (const auto& c : channels)
            if (c.name == name) return *c.grid;
        throw ConfigError("tile '" + id + "' has no channel '" + name + "'");
    }

    SharedGrid shared_channel(const std::string& name) const {
        for (const auto& c : channels)
            if (c.name == name) return c.grid;
        throw ConfigError("tile '" + id + "' has no channel '" + name + "'");
    }

    std::vector<std::string> channel_names() const {
        std::vector<std::string> names;
        for (const auto& c : channels) names.push_back(c.name);
        return names;
    }

    MapRect bounds() const {
        return window_bounds(transform, 0, 0, static_cast<double>(height), static_cast<double>(width));
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& c : channels) {
            if (!c.grid) throw ValidationError("channel '" + c.name + "' has no data");
            if (c.grid->width() != width || c.grid->height() != height)
                throw ValidationError("channel '" + c.name + "' is " + std::to_string(c.grid->width()) + "x" +
                                      std::to_string(c.grid->height()) + ", tile is " + std::to_string(width) +
                                      "x" + std::to_string(height));
            if (!seen.insert(c.name).second) throw ConfigError("duplicate channel '" + c.name + "'");
        }
        if (nodata_mask.width() != width || nodata_mask.height() != height)
            throw ValidationError("nodata mask does not match tile dimensions");
        transform.validate();
    }
};

namespace detail {

inline std::string iso_date_from_tiff(const std::string& dt) {
    // "YYYY:MM:DD HH:MM:SS" -> "YYYY-MM-DD"
    if (dt.size() < 10) return {};
    std::string d = dt.substr(0, 10);
    if (d[4] == ':') d[4] = '-';
    if (d[7] == ':') d[7] = '-';
    return d;
}

inline nlohmann::json description_json(const std::string& text) {
    if (text.empty() || text.front() != '{') return nlohmann::json::object();
    auto j = nlohmann::json::parse(text, nullptr, false);
    return j.is_discarded() ? nlohmann::json::object() : j;
}

}  // namespace detail

/// Load a GeoTIFF raster. Cells flagged as nodata in any band become NaN in
/// every channel and are set in `nodata_mask`. When `channel_names` is empty
/// the names stored by `write_tile` are used.
inline RasterTile load_tile(const std::filesystem::path& path, const std::vector<std::string>& channel_names = {}) {
    if (!std::filesystem::exists(path)) throw IoError("raster '" + path.string() + "' does not exist");
    tiff::Raster r = tiff::read(path);
    auto desc = detail::description_json(r.description);

    std::vector<std::string> names = channel_names;
    if (names.empty() && desc.contains("channels")) names = desc["channels"].get<std::vector<std::string>>();
    if (names.size() != r.bands.size())
        throw ConfigError("raster '" + path.string() + "' has " + std::to_string(r.bands.size()) + " bands but " +
                          std::to_string(names.size()) + " channel names were supplied");
    if (!r.transform) throw MetadataError("raster '" + path.string() + "' has no georeferencing tags");

    RasterTile tile;
    tile.id = desc.value("id", path.stem().string());
    tile.width = r.width;
    tile.height = r.height;
    tile.transform = *r.transform;
    if (desc.contains("crs")) tile.transform.crs_code = desc["crs"].get<std::string>();
    tile.timestamp = desc.value("timestamp", detail::iso_date_from_tiff(r.datetime));
    tile.nodata_mask = Grid<std::uint8_t>(r.width, r.height, std::move(r.nodata_mask));
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (std::size_t b = 0; b < r.bands.size(); ++b) {
        auto& band = r.bands[b];
        for (std::size_t i = 0; i < band.size(); ++i)
            if (tile.nodata_mask.storage()[i]) band[i] = nan;
        tile.channels.push_back({names[b], std::make_shared<const ChannelGrid>(r.width, r.height, std::move(band))});
    }
    tile.validate();
    return tile;
}

/// Write a tile as float32 GeoTIFF with NaN nodata; channel names, id, CRS
/// and timestamp are kept in the image description.
inline void write_tile(const RasterTile& tile, const std::filesystem::path& path) {
    tile.validate();
    tiff::Raster r;
    r.width = tile.width;
    r.height = tile.height;
    r.transform = tile.transform;
    r.nodata = std::nan("");
    nlohmann::json desc = {{"id", tile.id}, {"channels", tile.channel_names()}, {"crs", tile.transform.crs_code},
                           {"timestamp", tile.timestamp}};
    r.description = desc.dump();
    if (tile.timestamp.size() == 10) {
        std::string dt = tile.timestamp;
        dt[4] = ':';
        dt[7] = ':';
        r.datetime = dt + " 00:00:00";
    }
    for (const auto& c : tile.channels) r.bands.push_back(c.grid->storage());
    tiff::write(path, r);
}

/// Write a class mask (u8) aligned with a tile.
inline void write_mask(const MaskGrid& mask, const GeoTransform& t, const std::filesystem::path& path) {
    tiff::Raster r;
    r.width = mask.width();
    r.height = mask.height();
    r.transform = t;
    r.description = nlohmann::json{{"kind", "class_mask"}, {"crs", t.crs_code}}.dump();
    r.bands.emplace_back(mask.storage().begin(), mask.storage().end());
    tiff::write(path, r, tiff::SampleType::u8);
}

inline std::pair<MaskGrid, GeoTransform> load_mask(const std::filesystem::path& path) {
    tiff::Raster r = tiff::read(path);
    if (r.bands.size() != 1) throw ConfigError("mask '" + path.string() + "' must have exactly one band");
    if (!r.transform) throw MetadataError("mask '" + path.string() + "' has no georeferencing tags");
    MaskGrid m(r.width, r.height);
    for (std::size_t i = 0; i < m.size(); ++i) {
        float v = r.bands[0][i];
        m.storage()[i] = std::isnan(v) ? 0 : static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
    }
    GeoTransform t = *r.transform;
    auto desc = detail::description_json(r.description);
    if (desc.contains("crs")) t.crs_code = desc["crs"].get<std::string>();
    return {std::move(m), t};
}

/// Minimum and maximum of the finite values in a grid; {0, 0} when none.
inline std::pair<float, float> finite_range(const ChannelGrid& g) {
    float lo = std::numeric_limits<float>::infinity(), hi = -std::numeric_limits<float>::infinity();
    for (float v : g.values()) {
        if (!std::isfinite(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo > hi) return {0.0f, 0.0f};
    return {lo, hi};
}

/// Linear map of v from [lo, hi] to a byte. NaN and a zero range map to 0.
inline std::uint8_t scale_to_byte(float v, float lo, float hi) {
    if (!std::isfinite(v) || !(hi > lo)) return 0;
    double s = 255.0 * (static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo);
    return static_cast<std::uint8_t>(std::lround(std::clamp(s, 0.0, 255.0)));
}

inline png::Image preview_image(const RasterTile& tile, const std::array<std::string, 3>& channel_triplet) {
    std::array<const ChannelGrid*, 3> grids{};
    for (int i = 0; i < 3; ++i) grids[i] = &tile.channel(channel_triplet[i]);
    png::Image img{tile.width, tile.height, 3, std::vector<std::uint8_t>(tile.width * tile.height * 3)};
    for (int i = 0; i < 3; ++i) {
        auto [lo, hi] = finite_range(*grids[i]);
        auto vals = grids[i]->values();
        for (std::size_t p = 0; p < vals.size(); ++p) img.pixels[p * 3 + i] = scale_to_byte(vals[p], lo, hi);
    }
    return img;
}

/// 8-bit RGB composite of three channels, each min-max scaled over its finite values.
inline void render_preview(const RasterTile& tile, const std::array<std::string, 3>& channel_triplet,
                           const std::filesystem::path& out) {
    png::write(out, preview_image(tile, channel_triplet));
}

}  // namespace glacier
