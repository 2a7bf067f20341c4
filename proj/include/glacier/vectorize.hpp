#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/geometry.hpp"
#include "glacier/geodata/labels.hpp"
#include "glacier/geodata/transform.hpp"
#include "glacier/grid.hpp"

namespace glacier {

/// One polygon per connected region of a single class. rings[0] is the
/// exterior (counter-clockwise in map coordinates), the rest are holes.
struct VectorFeature {
    Polygon rings;
    GlacierClass class_tag = GlacierClass::clean_ice;
    double mean_probability = 1.0;
    std::size_t pixel_area = 0;

    bool operator==(const VectorFeature&) const = default;
};

struct PolygonSet {
    std::vector<VectorFeature> features;
    std::string crs_code;
    std::string model_id;
    std::string created_at;

    void validate() const {
        for (std::size_t i = 0; i < features.size(); ++i) {
            const auto& f = features[i];
            const std::string what = "feature " + std::to_string(i);
            if (f.class_tag != GlacierClass::clean_ice && f.class_tag != GlacierClass::debris)
                throw ValidationError(what + " has a non-glacier class tag");
            if (f.pixel_area < 1) throw ValidationError(what + " has pixel_area 0");
            if (f.rings.empty()) throw ValidationError(what + " has no rings");
            for (std::size_t r = 0; r < f.rings.size(); ++r) {
                validate_ring(f.rings[r], what + " ring " + std::to_string(r));
                if (!ring_is_simple(f.rings[r]))
                    throw ValidationError(what + " ring " + std::to_string(r) + " intersects itself");
            }
        }
    }

    std::size_t vertex_count() const {
        std::size_t n = 0;
        for (const auto& f : features)
            for (const auto& r : f.rings) n += r.size();
        return n;
    }

    bool operator==(const PolygonSet&) const = default;
};

namespace detail {

// Boundary edges between vertex ids (row * (w + 1) + col) of the vertex lattice.
struct TraceEdge {
    std::uint32_t from, to;
    std::uint32_t comp;
};

}  // namespace detail

/// Vectorize a class mask: one feature per 4-connected component of each
/// nonzero class, traced along pixel edges. `confidence`, if given, is
/// averaged over each component's pixels into mean_probability.
inline PolygonSet polygonize(const MaskGrid& mask, const GeoTransform& transform, std::size_t min_area = 16,
                             const Grid<float>* confidence = nullptr) {
    transform.validate();
    const std::size_t w = mask.width(), h = mask.height();
    if (confidence && (confidence->width() != w || confidence->height() != h))
        throw ShapeError("confidence grid does not match the mask");
    for (std::uint8_t v : mask.storage())
        if (v > static_cast<std::uint8_t>(GlacierClass::debris))
            throw ValidationError("mask value " + std::to_string(v) + " is not a class code");

    PolygonSet out;
    out.crs_code = transform.crs_code;
    if (w == 0 || h == 0) return out;

    // 4-connected labelling, raster-scan discovery order.
    constexpr std::uint32_t none = UINT32_MAX;
    std::vector<std::uint32_t> comp(w * h, none);
    std::vector<std::size_t> sizes;
    std::vector<double> prob_sum;
    std::vector<std::uint8_t> comp_class;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < w * h; ++start) {
        const std::uint8_t cls = mask.storage()[start];
        if (cls == 0 || comp[start] != none) continue;
        const auto id = static_cast<std::uint32_t>(sizes.size());
        sizes.push_back(0);
        prob_sum.push_back(0);
        comp_class.push_back(cls);
        comp[start] = id;
        stack.assign(1, start);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++sizes[id];
            if (confidence) prob_sum[id] += confidence->storage()[i];
            const std::size_t r = i / w, c = i % w;
            auto visit = [&](std::size_t j) {
                if (comp[j] == none && mask.storage()[j] == cls) {
                    comp[j] = id;
                    stack.push_back(j);
                }
            };
            if (c > 0) visit(i - 1);
            if (c + 1 < w) visit(i + 1);
            if (r > 0) visit(i - w);
            if (r + 1 < h) visit(i + w);
        }
    }

    // Directed edges with the component on the right in (col, row) coordinates.
    const std::size_t vw = w + 1;
    auto vid = [&](std::size_t r, std::size_t c) { return static_cast<std::uint32_t>(r * vw + c); };
    std::vector<detail::TraceEdge> edges;
    auto same = [&](std::size_t r, std::size_t c, long dr, long dc) {
        const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) return false;
        return comp[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)] == comp[r * w + c];
    };
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const std::uint32_t id = comp[r * w + c];
            if (id == none || sizes[id] < min_area) continue;
            if (!same(r, c, -1, 0)) edges.push_back({vid(r, c), vid(r, c + 1), id});
            if (!same(r, c, 0, 1)) edges.push_back({vid(r, c + 1), vid(r + 1, c + 1), id});
            if (!same(r, c, 1, 0)) edges.push_back({vid(r + 1, c + 1), vid(r + 1, c), id});
            if (!same(r, c, 0, -1)) edges.push_back({vid(r + 1, c), vid(r, c), id});
        }

    // Outgoing edges per vertex, bucketed (counting sort on the start vertex).
    const std::size_t nv = vw * (h + 1);
    std::vector<std::uint32_t> first(nv + 1, 0), order(edges.size());
    for (const auto& e : edges) ++first[e.from + 1];
    for (std::size_t v = 0; v < nv; ++v) first[v + 1] += first[v];
    {
        std::vector<std::uint32_t> fill(first.begin(), first.end() - 1);
        for (std::uint32_t i = 0; i < edges.size(); ++i) order[fill[edges[i].from]++] = i;
    }
    auto dir = [&](const detail::TraceEdge& e) {
        const long dx = static_cast<long>(e.to % vw) - static_cast<long>(e.from % vw);
        const long dy = static_cast<long>(e.to / vw) - static_cast<long>(e.from / vw);
        return std::array<long, 2>{dx, dy};
    };

    std::vector<char> used(edges.size(), 0);
    std::vector<std::vector<Ring>> rings_of(sizes.size());
    std::vector<std::uint32_t> chain;
    for (std::uint32_t e0 = 0; e0 < edges.size(); ++e0) {
        if (used[e0]) continue;
        chain.clear();
        std::uint32_t e = e0;
        while (!used[e]) {
            used[e] = 1;
            chain.push_back(e);
            const auto& cur = edges[e];
            const auto din = dir(cur);
            std::uint32_t next = UINT32_MAX;
            // At a pinch (two diagonal pixels of one component) take the turn
            // toward the background side so each ring follows one background region.
            for (std::uint32_t k = first[cur.to]; k < first[cur.to + 1]; ++k) {
                const std::uint32_t cand = order[k];
                if (edges[cand].comp != cur.comp) continue;
                const auto d = dir(edges[cand]);
                const long cross = din[0] * d[1] - din[1] * d[0];
                if (next == UINT32_MAX || cross < 0) next = cand;
            }
            if (next == UINT32_MAX) throw Error("internal", "open boundary while tracing");
            e = next;  // a used edge here is e0: the ring is closed
        }
        // Corners only: drop vertices where the direction does not change.
        Ring ring;
        const std::size_t n = chain.size();
        for (std::size_t i = 0; i < n; ++i) {
            const auto a = dir(edges[chain[(i + n - 1) % n]]), b = dir(edges[chain[i]]);
            if (a == b) continue;
            const std::uint32_t v = edges[chain[i]].from;
            ring.push_back(transform.to_map(static_cast<double>(v % vw), static_cast<double>(v / vw)));
        }
        ring.push_back(ring.front());
        rings_of[edges[e0].comp].push_back(std::move(ring));
    }

    for (std::uint32_t id = 0; id < sizes.size(); ++id) {
        auto& rings = rings_of[id];
        if (rings.empty()) continue;
        // The exterior encloses the largest area; every other ring is a hole.
        std::size_t outer = 0;
        for (std::size_t i = 1; i < rings.size(); ++i)
            if (std::abs(ring_signed_area(rings[i])) > std::abs(ring_signed_area(rings[outer])))
                outer = i;
        std::swap(rings[0], rings[outer]);
        for (std::size_t i = 0; i < rings.size(); ++i) {
            const double a = ring_signed_area(rings[i]);
            if ((i == 0) != (a > 0)) std::reverse(rings[i].begin(), rings[i].end());
        }
        VectorFeature f;
        f.rings = std::move(rings);
        f.class_tag = static_cast<GlacierClass>(comp_class[id]);
        f.pixel_area = sizes[id];
        f.mean_probability = confidence ? prob_sum[id] / static_cast<double>(sizes[id]) : 1.0;
        out.features.push_back(std::move(f));
    }
    return out;
}

struct RasterizeResult {
    MaskGrid mask;
    std::size_t clipped = 0;  // features with geometry outside the grid
};

/// Burn features by pixel-center membership (even-odd over each feature's
/// rings), in feature order. Geometry beyond the grid is clipped.
inline RasterizeResult rasterize_polygons(const PolygonSet& ps, const GeoTransform& transform, std::size_t width,
                                          std::size_t height) {
    transform.validate();
    RasterizeResult res{MaskGrid(width, height, 0), 0};
    for (const auto& f : ps.features) {
        auto rings = to_pixel_rings(f.rings, transform);
        bool outside = false;
        for (const auto& r : rings)
            for (const auto& p : r)
                if (p.x < 0 || p.y < 0 || p.x > static_cast<double>(width) || p.y > static_cast<double>(height))
                    outside = true;
        if (outside) ++res.clipped;
        scanline_fill(std::span<const Ring>(rings), width, height,
                      [&](std::size_t r, std::size_t c) { res.mask(r, c) = static_cast<std::uint8_t>(f.class_tag); });
    }
    return res;
}

namespace detail {

inline double point_segment_distance(const MapPoint& p, const MapPoint& a, const MapPoint& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    if (len2 == 0) return std::hypot(p.x - a.x, p.y - a.y);
    const double t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
    return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

inline void douglas_peucker(const Ring& pts, std::size_t i, std::size_t j, double tol, std::vector<char>& keep) {
    std::vector<std::pair<std::size_t, std::size_t>> todo{{i, j}};
    while (!todo.empty()) {
        auto [a, b] = todo.back();
        todo.pop_back();
        double best = -1;
        std::size_t at = a;
        for (std::size_t k = a + 1; k < b; ++k) {
            double d = point_segment_distance(pts[k], pts[a], pts[b]);
            if (d > best) best = d, at = k;
        }
        if (best > tol) {
            keep[at] = 1;
            todo.emplace_back(a, at);
            todo.emplace_back(at, b);
        }
    }
}

inline Ring simplify_ring(const Ring& ring, double tol) {
    const std::size_t n = ring.size();
    if (n < 5) return ring;
    // Split the closed ring at its first vertex and the vertex farthest from it.
    std::size_t far = 1;
    for (std::size_t k = 1; k + 1 < n; ++k)
        if (std::hypot(ring[k].x - ring[0].x, ring[k].y - ring[0].y) >
            std::hypot(ring[far].x - ring[0].x, ring[far].y - ring[0].y))
            far = k;
    std::vector<char> keep(n, 0);
    keep[0] = keep[far] = keep[n - 1] = 1;
    douglas_peucker(ring, 0, far, tol, keep);
    douglas_peucker(ring, far, n - 1, tol, keep);
    Ring out;
    for (std::size_t k = 0; k < n; ++k)
        if (keep[k]) out.push_back(ring[k]);
    // A collapsed or self-crossing result keeps the original ring.
    if (out.size() < 4 || !ring_is_simple(out) || ring_signed_area(out) == 0) return ring;
    return out;
}

}  // namespace detail

/// Douglas-Peucker per ring (`tolerance` in map units). Tolerance 0 returns
/// the input unchanged.
inline PolygonSet simplify(const PolygonSet& ps, double tolerance) {
    if (!(tolerance >= 0)) throw ConfigError("simplification tolerance must be >= 0");
    if (tolerance == 0) return ps;
    PolygonSet out = ps;
    for (auto& f : out.features)
        for (auto& r : f.rings) r = detail::simplify_ring(r, tolerance);
    return out;
}

/// GeoJSON FeatureCollection in map coordinates.
inline std::string to_geojson(const PolygonSet& ps, int indent = -1) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& f : ps.features) {
        nlohmann::json rings = nlohmann::json::array();
        for (const auto& r : f.rings) {
            nlohmann::json pts = nlohmann::json::array();
            for (const auto& p : r) pts.push_back({p.x, p.y});
            rings.push_back(std::move(pts));
        }
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", std::move(rings)}}},
                            {"properties",
                             {{"class", class_name(f.class_tag)},
                              {"class_tag", static_cast<int>(f.class_tag)},
                              {"mean_prob", f.mean_probability},
                              {"mean_probability", f.mean_probability},
                              {"pixel_area", f.pixel_area},
                              {"model_id", ps.model_id},
                              {"created_at", ps.created_at},
                              {"crs_code", ps.crs_code}}}});
    }
    nlohmann::json doc = {{"type", "FeatureCollection"},
                          {"crs_code", ps.crs_code},
                          {"model_id", ps.model_id},
                          {"created_at", ps.created_at},
                          {"features", std::move(features)}};
    return doc.dump(indent);
}

inline PolygonSet from_geojson(const std::string& text) {
    auto doc = detail::parse_json_text(text, "polygon GeoJSON");
    PolygonSet ps;
    if (doc.is_object()) {
        ps.crs_code = doc.value("crs_code", "");
        ps.model_id = doc.value("model_id", "");
        ps.created_at = doc.value("created_at", "");
    }
    try {
        for (const auto& f : detail::feature_list(doc)) {
            const auto& props = f.contains("properties") && f["properties"].is_object() ? f["properties"]
                                                                                          : nlohmann::json::object();
            auto set_if_empty = [&](std::string& dst, const char* key) {
                if (dst.empty() && props.contains(key) && props[key].is_string()) dst = props[key].get<std::string>();
            };
            set_if_empty(ps.crs_code, "crs_code");
            set_if_empty(ps.model_id, "model_id");
            set_if_empty(ps.created_at, "created_at");
            GlacierClass cls;
            if (props.contains("class_tag") && props["class_tag"].is_number_integer())
                cls = static_cast<GlacierClass>(props["class_tag"].get<int>());
            else if (props.contains("class") && props["class"].is_string())
                cls = detail::class_from_text(props["class"].get<std::string>());
            else
                throw ValidationError("feature has no class_tag or class property");
            double prob = props.contains("mean_probability") ? props["mean_probability"].get<double>()
                                                             : props.value("mean_prob", 1.0);
            std::size_t area = props.value("pixel_area", std::size_t{1});
            for (auto& poly : detail::polygons_from_geometry(f.at("geometry")))
                ps.features.push_back({std::move(poly), cls, prob, area});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("polygon GeoJSON: ") + e.what());
    }
    ps.validate();
    return ps;
}

/// Features as label outlines (for applying edited polygons as training labels).
inline LabelVectors to_label_vectors(const PolygonSet& ps) {
    LabelVectors lv;
    for (const auto& f : ps.features) lv.polygons.push_back({f.rings, f.class_tag});
    return lv;
}

}  // namespace glacier
