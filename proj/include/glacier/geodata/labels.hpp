#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/geometry.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/grid.hpp"

namespace glacier {

struct LabelPolygon {
    Polygon rings;
    GlacierClass class_tag = GlacierClass::clean_ice;
};

/// Glacier outlines in map coordinates.
struct LabelVectors {
    std::vector<LabelPolygon> polygons;

    void validate() const {
        for (std::size_t i = 0; i < polygons.size(); ++i) {
            const auto& p = polygons[i];
            if (p.class_tag != GlacierClass::clean_ice && p.class_tag != GlacierClass::debris)
                throw ValidationError("label polygon " + std::to_string(i) + " has a non-glacier class tag");
            if (p.rings.empty()) throw ValidationError("label polygon " + std::to_string(i) + " has no rings");
            for (std::size_t r = 0; r < p.rings.size(); ++r)
                validate_ring(p.rings[r], "label polygon " + std::to_string(i) + " ring " + std::to_string(r));
        }
    }
};

/// Region of interest (e.g. an administrative border); even-odd over all rings.
struct RegionBoundary {
    std::vector<Ring> rings;

    void validate() const {
        if (rings.empty()) throw ValidationError("region boundary has no rings");
        for (std::size_t r = 0; r < rings.size(); ++r) validate_ring(rings[r], "boundary ring " + std::to_string(r));
    }
};

namespace detail {

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

/// Accepts the artifact's own tags and the wording used in ICIMOD attribute
/// tables ("Clean Ice", "Debris covered").
inline GlacierClass class_from_text(const std::string& text) {
    std::string t = lower(text);
    if (t.find("debris") != std::string::npos) return GlacierClass::debris;
    if (t.find("clean") != std::string::npos || t.find("ice") != std::string::npos) return GlacierClass::clean_ice;
    throw ValidationError("unrecognized glacier class '" + text + "'");
}

inline Ring ring_from_json(const nlohmann::json& coords) {
    Ring r;
    for (const auto& pt : coords) {
        if (!pt.is_array() || pt.size() < 2) throw ValidationError("GeoJSON position must have two coordinates");
        r.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    return r;
}

/// Polygons of a GeoJSON geometry (Polygon or MultiPolygon).
inline std::vector<Polygon> polygons_from_geometry(const nlohmann::json& geom) {
    std::vector<Polygon> out;
    if (geom.is_null()) return out;
    const std::string type = geom.at("type").get<std::string>();
    auto poly = [](const nlohmann::json& rings) {
        Polygon p;
        for (const auto& r : rings) p.push_back(ring_from_json(r));
        return p;
    };
    if (type == "Polygon") {
        out.push_back(poly(geom.at("coordinates")));
    } else if (type == "MultiPolygon") {
        for (const auto& p : geom.at("coordinates")) out.push_back(poly(p));
    } else {
        throw ValidationError("unsupported geometry type '" + type + "' (expected Polygon or MultiPolygon)");
    }
    return out;
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + ": " + e.what(), e.byte);
    }
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline nlohmann::json feature_list(const nlohmann::json& doc) {
    if (doc.is_object() && doc.value("type", "") == "FeatureCollection") return doc.at("features");
    if (doc.is_object() && doc.value("type", "") == "Feature") return nlohmann::json::array({doc});
    if (doc.is_object() && doc.contains("coordinates"))
        return nlohmann::json::array({{{"type", "Feature"}, {"geometry", doc}, {"properties", nlohmann::json::object()}}});
    throw ValidationError("expected a GeoJSON FeatureCollection, Feature or geometry");
}

}  // namespace detail

/// Parse labels from GeoJSON. The class is taken from the first present
/// property among `class`, `class_tag`, `Glaciers`, `glacier_type`.
inline LabelVectors labels_from_geojson(const std::string& text) {
    auto doc = detail::parse_json_text(text, "label GeoJSON");
    LabelVectors lv;
    for (const auto& f : detail::feature_list(doc)) {
        const auto& props = f.contains("properties") && f["properties"].is_object() ? f["properties"]
                                                                                   : nlohmann::json::object();
        std::string tag;
        for (const char* key : {"class", "class_tag", "Glaciers", "glacier_type"})
            if (props.contains(key) && props[key].is_string()) {
                tag = props[key].get<std::string>();
                break;
            }
        if (tag.empty()) throw ValidationError("label feature has no class property");
        GlacierClass cls = detail::class_from_text(tag);
        for (auto& p : detail::polygons_from_geometry(f.at("geometry"))) lv.polygons.push_back({std::move(p), cls});
    }
    lv.validate();
    return lv;
}

inline LabelVectors load_labels(const std::filesystem::path& path) {
    return labels_from_geojson(detail::read_text(path));
}

inline std::string labels_to_geojson(const LabelVectors& lv, const std::string& crs_code = {}) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& p : lv.polygons) {
        nlohmann::json rings = nlohmann::json::array();
        for (const auto& r : p.rings) {
            nlohmann::json ring = nlohmann::json::array();
            for (const auto& pt : r) ring.push_back({pt.x, pt.y});
            rings.push_back(std::move(ring));
        }
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", std::move(rings)}}},
                            {"properties", {{"class", class_name(p.class_tag)}}}});
    }
    nlohmann::json doc = {{"type", "FeatureCollection"}, {"features", std::move(features)}};
    if (!crs_code.empty()) doc["crs_code"] = crs_code;
    return doc.dump();
}

inline RegionBoundary boundary_from_geojson(const std::string& text) {
    auto doc = detail::parse_json_text(text, "boundary GeoJSON");
    RegionBoundary b;
    for (const auto& f : detail::feature_list(doc))
        for (auto& p : detail::polygons_from_geometry(f.at("geometry")))
            for (auto& r : p) b.rings.push_back(std::move(r));
    b.validate();
    return b;
}

inline RegionBoundary load_boundary(const std::filesystem::path& path) {
    return boundary_from_geojson(detail::read_text(path));
}

/// Burn label polygons into a class grid by pixel-center membership
/// (boundary inclusive). Debris is burned after clean ice so it wins on overlap.
inline MaskGrid rasterize_labels(const LabelVectors& vectors, const GeoTransform& transform, std::size_t width,
                                 std::size_t height) {
    transform.validate();
    vectors.validate();
    MaskGrid mask(width, height, static_cast<std::uint8_t>(GlacierClass::background));
    for (GlacierClass pass : {GlacierClass::clean_ice, GlacierClass::debris}) {
        for (const auto& p : vectors.polygons) {
            if (p.class_tag != pass) continue;
            auto rings = to_pixel_rings(p.rings, transform);
            scanline_fill(std::span<const Ring>(rings), width, height,
                          [&](std::size_t r, std::size_t c) { mask(r, c) = static_cast<std::uint8_t>(pass); });
        }
    }
    return mask;
}

/// 1 where the pixel center lies inside (or on) the boundary.
inline Grid<std::uint8_t> boundary_membership(const RegionBoundary& boundary, const GeoTransform& transform,
                                              std::size_t width, std::size_t height) {
    boundary.validate();
    Grid<std::uint8_t> inside(width, height, 0);
    auto rings = to_pixel_rings(boundary.rings, transform);
    scanline_fill(std::span<const Ring>(rings), width, height, [&](std::size_t r, std::size_t c) { inside(r, c) = 1; });
    return inside;
}

/// Crop by masking: pixels outside the boundary become NaN / background and
/// nodata; dimensions and transform are unchanged.
inline std::pair<RasterTile, MaskGrid> crop_to_boundary(const RasterTile& tile, const MaskGrid& mask,
                                                        const RegionBoundary& boundary) {
    if (mask.width() != tile.width || mask.height() != tile.height)
        throw ValidationError("mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                              " but tile is " + std::to_string(tile.width) + "x" + std::to_string(tile.height));
    auto inside = boundary_membership(boundary, tile.transform, tile.width, tile.height);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    RasterTile out = tile;
    bool all_inside = std::all_of(inside.values().begin(), inside.values().end(), [](auto v) { return v != 0; });
    MaskGrid out_mask = mask;
    if (all_inside) return {std::move(out), std::move(out_mask)};
    for (auto& ch : out.channels) {
        auto g = std::make_shared<ChannelGrid>(*ch.grid);
        for (std::size_t i = 0; i < g->size(); ++i)
            if (!inside.storage()[i]) g->storage()[i] = nan;
        ch.grid = std::move(g);
    }
    for (std::size_t i = 0; i < out_mask.size(); ++i)
        if (!inside.storage()[i]) {
            out_mask.storage()[i] = static_cast<std::uint8_t>(GlacierClass::background);
            out.nodata_mask.storage()[i] = 1;
        }
    return {std::move(out), std::move(out_mask)};
}

}  // namespace glacier
