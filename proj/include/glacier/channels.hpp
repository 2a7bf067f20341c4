#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/labels.hpp"
#include "glacier/geodata/raster.hpp"

namespace glacier {

/// How a named channel is obtained.
struct ChannelDef {
    enum class Kind { raw_band, index, terrain };
    Kind kind = Kind::raw_band;
    int band = -1;              // raw_band: 0-based position in the source raster
    std::string a, b;           // index: (a - b) / (a + b)
};

/// Named channel definitions. The default registry holds the nine Landsat 7
/// bands, a quality-band slot, the three normalized-difference indices and
/// the two terrain layers.
class ChannelRegistry {
public:
    static ChannelRegistry landsat7() {
        ChannelRegistry r;
        const char* bands[] = {"B1", "B2", "B3", "B4", "B5", "B6_VCID_1", "B6_VCID_2", "B7", "B8", "BQA"};
        for (int i = 0; i < 10; ++i) r.defs_[bands[i]] = {ChannelDef::Kind::raw_band, i, {}, {}};
        r.defs_["NDSI"] = {ChannelDef::Kind::index, -1, "B2", "B5"};
        r.defs_["NDVI"] = {ChannelDef::Kind::index, -1, "B4", "B3"};
        r.defs_["NDWI"] = {ChannelDef::Kind::index, -1, "B4", "B5"};
        r.defs_["ELEVATION"] = {ChannelDef::Kind::terrain, -1, {}, {}};
        r.defs_["SLOPE"] = {ChannelDef::Kind::terrain, -1, {}, {}};
        return r;
    }

    /// {"NAME": {"source": 3} | {"index": ["A", "B"]} | {"terrain": true}, ...}
    static ChannelRegistry from_json(const nlohmann::json& j) {
        ChannelRegistry r;
        if (!j.is_object()) throw ConfigError("channel registry must be a JSON object");
        for (const auto& [name, def] : j.items()) {
            ChannelDef d;
            if (def.contains("source")) {
                d.kind = ChannelDef::Kind::raw_band;
                d.band = def["source"].get<int>();
            } else if (def.contains("index")) {
                const auto& in = def["index"];
                if (!in.is_array() || in.size() != 2)
                    throw ConfigError("index channel '" + name + "' needs exactly two input bands");
                d.kind = ChannelDef::Kind::index;
                d.a = in[0].get<std::string>();
                d.b = in[1].get<std::string>();
            } else if (def.contains("terrain")) {
                d.kind = ChannelDef::Kind::terrain;
            } else {
                throw ConfigError("channel '" + name + "' needs one of source, index, terrain");
            }
            r.defs_[name] = d;
        }
        return r;
    }

    static ChannelRegistry load(const std::filesystem::path& path) {
        return from_json(detail::parse_json_text(detail::read_text(path), "channel registry"));
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [name, d] : defs_) {
            switch (d.kind) {
                case ChannelDef::Kind::raw_band: j[name] = {{"source", d.band}}; break;
                case ChannelDef::Kind::index: j[name] = {{"index", {d.a, d.b}}}; break;
                case ChannelDef::Kind::terrain: j[name] = {{"terrain", true}}; break;
            }
        }
        return j;
    }

    void define(const std::string& name, ChannelDef def) { defs_[name] = std::move(def); }

    bool contains(const std::string& name) const { return defs_.count(name) != 0; }

    const ChannelDef& at(const std::string& name) const {
        auto it = defs_.find(name);
        if (it == defs_.end()) throw ConfigError("channel '" + name + "' is not registered");
        return it->second;
    }

    /// Raw-band names ordered by band position.
    std::vector<std::string> raw_bands() const {
        std::vector<std::pair<int, std::string>> v;
        for (const auto& [n, d] : defs_)
            if (d.kind == ChannelDef::Kind::raw_band) v.emplace_back(d.band, n);
        std::sort(v.begin(), v.end());
        std::vector<std::string> out;
        for (auto& p : v) out.push_back(p.second);
        return out;
    }

    /// Names of one kind, alphabetical.
    std::vector<std::string> names_of(ChannelDef::Kind kind) const {
        std::vector<std::string> out;
        for (const auto& [n, d] : defs_)
            if (d.kind == kind) out.push_back(n);
        return out;
    }

private:
    std::map<std::string, ChannelDef> defs_;
};

/// Normalized difference (a - b) / (a + b) per pixel. A zero denominator
/// gives 0; NaN in either input gives NaN.
inline ChannelGrid normalized_difference(const ChannelGrid& a, const ChannelGrid& b) {
    if (!a.same_shape(b)) throw ValidationError("index input bands differ in shape");
    ChannelGrid out(a.width(), a.height());
    const auto av = a.values();
    const auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        double x = av[i], y = bv[i];
        if (std::isnan(x) || std::isnan(y)) {
            ov[i] = std::numeric_limits<float>::quiet_NaN();
            continue;
        }
        double den = x + y;
        ov[i] = den == 0.0 ? 0.0f : static_cast<float>((x - y) / den);
    }
    return out;
}

/// Compute a registered index channel (NDSI, NDVI, NDWI or a user-defined one).
inline ChannelGrid compute_index(const RasterTile& tile, const std::string& kind,
                                 const ChannelRegistry& registry = ChannelRegistry::landsat7()) {
    const ChannelDef& d = registry.at(kind);
    if (d.kind != ChannelDef::Kind::index) throw ConfigError("'" + kind + "' is not an index channel");
    for (const auto& src : {d.a, d.b})
        if (!tile.has_channel(src))
            throw ConfigError("index " + kind + " needs band " + src + ", missing from tile '" + tile.id + "'");
    return normalized_difference(tile.channel(d.a), tile.channel(d.b));
}

/// Tile with the named index channels appended.
inline RasterTile add_indices(const RasterTile& tile, const std::vector<std::string>& kinds,
                              const ChannelRegistry& registry = ChannelRegistry::landsat7()) {
    RasterTile out = tile;
    for (const auto& k : kinds) {
        if (out.has_channel(k)) throw ConfigError("tile already has channel '" + k + "'");
        out.channels.push_back({k, std::make_shared<const ChannelGrid>(compute_index(tile, k, registry))});
    }
    return out;
}

/// Tile with ELEVATION and SLOPE appended; existing channels are shared, not copied.
inline RasterTile attach_terrain(const RasterTile& tile, const ChannelGrid& elevation, const ChannelGrid& slope) {
    for (const auto* g : {&elevation, &slope})
        if (g->width() != tile.width || g->height() != tile.height)
            throw ValidationError("terrain grid is " + std::to_string(g->width()) + "x" +
                                  std::to_string(g->height()) + ", tile is " + std::to_string(tile.width) + "x" +
                                  std::to_string(tile.height));
    for (const char* n : {"ELEVATION", "SLOPE"})
        if (tile.has_channel(n)) throw ConfigError("tile already has channel '" + std::string(n) + "'");
    RasterTile out = tile;
    out.channels.push_back({"ELEVATION", std::make_shared<const ChannelGrid>(elevation)});
    out.channels.push_back({"SLOPE", std::make_shared<const ChannelGrid>(slope)});
    return out;
}

/// Slope in degrees from an elevation grid by central differences
/// (one-sided at the edges). `pixel_size` is in elevation units.
inline ChannelGrid slope_from_elevation(const ChannelGrid& elev, double pixel_size) {
    const std::size_t w = elev.width(), h = elev.height();
    ChannelGrid out(w, h);
    auto at = [&](long r, long c) {
        r = std::clamp(r, 0L, static_cast<long>(h) - 1);
        c = std::clamp(c, 0L, static_cast<long>(w) - 1);
        return static_cast<double>(elev(static_cast<std::size_t>(r), static_cast<std::size_t>(c)));
    };
    for (long r = 0; r < static_cast<long>(h); ++r)
        for (long c = 0; c < static_cast<long>(w); ++c) {
            double dx_span = (c == 0 || c == static_cast<long>(w) - 1) ? 1.0 : 2.0;
            double dy_span = (r == 0 || r == static_cast<long>(h) - 1) ? 1.0 : 2.0;
            if (w == 1) dx_span = 1.0;
            if (h == 1) dy_span = 1.0;
            double dzdx = (at(r, c + 1) - at(r, c - 1)) / (dx_span * pixel_size);
            double dzdy = (at(r + 1, c) - at(r - 1, c)) / (dy_span * pixel_size);
            out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
                static_cast<float>(std::atan(std::hypot(dzdx, dzdy)) * 180.0 / 3.14159265358979323846);
        }
    return out;
}

/// A named subset of channels; the experiment variable of band selection.
struct ChannelSubsetSpec {
    std::string label;
    std::vector<std::string> members;

    void validate() const {
        if (members.empty()) throw ConfigError("channel subset '" + label + "' is empty");
        std::set<std::string> seen;
        for (const auto& m : members)
            if (!seen.insert(m).second) throw ConfigError("channel subset '" + label + "' repeats '" + m + "'");
    }
};

/// Ordered channel list resolved against a tile. Order is tensor channel order.
struct ChannelStack {
    std::vector<std::string> names;
    std::vector<SharedGrid> grids;

    static ChannelStack from_tile(const RasterTile& tile) {
        ChannelStack s;
        for (const auto& c : tile.channels) {
            s.names.push_back(c.name);
            s.grids.push_back(c.grid);
        }
        return s;
    }

    std::size_t size() const { return names.size(); }

    const ChannelGrid& operator[](const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return *grids[i];
        throw ConfigError("channel '" + name + "' is not in the stack");
    }
};

inline ChannelStack select_channels(const ChannelStack& stack, const ChannelSubsetSpec& spec) {
    spec.validate();
    ChannelStack out;
    for (const auto& m : spec.members) {
        auto it = std::find(stack.names.begin(), stack.names.end(), m);
        if (it == stack.names.end())
            throw ConfigError("channel '" + m + "' of subset '" + spec.label + "' is not available");
        out.names.push_back(m);
        out.grids.push_back(stack.grids[static_cast<std::size_t>(it - stack.names.begin())]);
    }
    return out;
}

/// Tile restricted to (and reordered by) a channel subset.
inline RasterTile select_tile_channels(const RasterTile& tile, const ChannelSubsetSpec& spec) {
    ChannelStack s = select_channels(ChannelStack::from_tile(tile), spec);
    RasterTile out = tile;
    out.channels.clear();
    for (std::size_t i = 0; i < s.size(); ++i) out.channels.push_back({s.names[i], s.grids[i]});
    return out;
}

inline std::vector<ChannelSubsetSpec> subsets_from_json(const nlohmann::json& j) {
    std::vector<ChannelSubsetSpec> out;
    for (const auto& s : j) {
        ChannelSubsetSpec spec;
        if (s.is_array()) {
            spec.members = s.get<std::vector<std::string>>();
            for (const auto& m : spec.members) spec.label += (spec.label.empty() ? "" : ",") + m;
        } else {
            spec.label = s.at("label").get<std::string>();
            spec.members = s.at("members").get<std::vector<std::string>>();
        }
        spec.validate();
        out.push_back(std::move(spec));
    }
    return out;
}

}  // namespace glacier
