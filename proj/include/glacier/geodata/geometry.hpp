#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "glacier/error.hpp"
#include "glacier/geodata/transform.hpp"

namespace glacier {

using Ring = std::vector<MapPoint>;
/// First ring is the outer boundary, any further rings are holes.
using Polygon = std::vector<Ring>;

inline bool ring_closed(const Ring& ring) {
    return !ring.empty() && ring.front() == ring.back();
}

/// Throws ValidationError naming `what` when the ring is open or too short.
inline void validate_ring(const Ring& ring, const std::string& what) {
    if (ring.size() < 4)
        throw ValidationError(what + " has " + std::to_string(ring.size()) +
                              " points; a closed ring needs at least 4");
    if (!ring_closed(ring)) throw ValidationError(what + " is not closed (first point != last point)");
    for (const auto& p : ring)
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw ValidationError(what + " has a non-finite coordinate");
}

/// Signed shoelace area; positive for counter-clockwise rings in a y-up frame.
inline double ring_signed_area(const Ring& ring) {
    double a = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i)
        a += ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
    return 0.5 * a;
}

inline double polygon_area(const Polygon& poly) {
    if (poly.empty()) return 0.0;
    double a = std::fabs(ring_signed_area(poly[0]));
    for (std::size_t i = 1; i < poly.size(); ++i) a -= std::fabs(ring_signed_area(poly[i]));
    return a;
}

namespace detail {

inline double cross(const MapPoint& o, const MapPoint& a, const MapPoint& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(const MapPoint& p, const MapPoint& q, const MapPoint& r) {
    return std::min(p.x, r.x) <= q.x && q.x <= std::max(p.x, r.x) && std::min(p.y, r.y) <= q.y &&
           q.y <= std::max(p.y, r.y);
}

inline bool segments_intersect(const MapPoint& p1, const MapPoint& p2, const MapPoint& q1, const MapPoint& q2) {
    double d1 = cross(q1, q2, p1), d2 = cross(q1, q2, p2);
    double d3 = cross(p1, p2, q1), d4 = cross(p1, p2, q2);
    if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) return true;
    if (d1 == 0 && on_segment(q1, p1, q2)) return true;
    if (d2 == 0 && on_segment(q1, p2, q2)) return true;
    if (d3 == 0 && on_segment(p1, q1, p2)) return true;
    if (d4 == 0 && on_segment(p1, q2, p2)) return true;
    return false;
}

}  // namespace detail

/// True when no two non-adjacent edges of the closed ring touch or cross.
/// Rings that touch themselves only at a repeated vertex (pinch points from
/// edge tracing) are accepted.
inline bool ring_is_simple(const Ring& ring) {
    const std::size_t n = ring.size() - 1;  // edge count
    if (ring.size() < 4) return false;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
            if (adjacent) continue;
            const auto &a = ring[i], &b = ring[i + 1], &c = ring[j], &d = ring[j + 1];
            if (!detail::segments_intersect(a, b, c, d)) continue;
            // Allow contact only at shared vertices.
            bool shared = a == c || a == d || b == c || b == d;
            if (!shared) return false;
            // Collinear overlap beyond a single shared vertex is not simple.
            if (detail::cross(a, b, c) == 0 && detail::cross(a, b, d) == 0) {
                int shared_count = (a == c) + (a == d) + (b == c) + (b == d);
                if (shared_count < 2) {
                    // Overlap test: some endpoint strictly inside the other segment.
                    auto strictly_inside = [](const MapPoint& p, const MapPoint& q, const MapPoint& r) {
                        return detail::on_segment(p, q, r) && !(q == p) && !(q == r);
                    };
                    if (strictly_inside(a, c, b) || strictly_inside(a, d, b) || strictly_inside(c, a, d) ||
                        strictly_inside(c, b, d))
                        return false;
                }
            }
        }
    }
    return true;
}

/// Visit every pixel (row, col) of a width x height grid whose center lies
/// inside the polygon or on its boundary. `rings` are in continuous pixel
/// coordinates (col, row). Even-odd rule across all rings.
template <class Fn>
void scanline_fill(std::span<const Ring> rings, std::size_t width, std::size_t height, Fn&& visit) {
    double min_y = INFINITY, max_y = -INFINITY;
    for (const auto& r : rings)
        for (const auto& p : r) {
            min_y = std::min(min_y, p.y);
            max_y = std::max(max_y, p.y);
        }
    if (!(min_y <= max_y)) return;
    long r0 = std::max(0L, static_cast<long>(std::ceil(min_y - 0.5)));
    long r1 = std::min(static_cast<long>(height) - 1, static_cast<long>(std::floor(max_y - 0.5)));
    std::vector<double> xs;
    std::vector<std::pair<double, double>> spans;
    std::vector<std::pair<long, long>> cols;
    for (long row = r0; row <= r1; ++row) {
        const double y = static_cast<double>(row) + 0.5;
        xs.clear();
        spans.clear();
        for (const auto& ring : rings) {
            for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
                const MapPoint& p = ring[i];
                const MapPoint& q = ring[i + 1];
                if (p.y == y) spans.emplace_back(p.x, p.x);
                if (p.y == q.y) {
                    if (p.y == y) spans.emplace_back(std::min(p.x, q.x), std::max(p.x, q.x));
                    continue;
                }
                if ((p.y <= y && y < q.y) || (q.y <= y && y < p.y))
                    xs.push_back(p.x + (y - p.y) * (q.x - p.x) / (q.y - p.y));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t i = 0; i + 1 < xs.size(); i += 2) spans.emplace_back(xs[i], xs[i + 1]);
        if (spans.empty()) continue;
        cols.clear();
        for (const auto& [a, b] : spans) {
            long c0 = std::max(0L, static_cast<long>(std::ceil(a - 0.5)));
            long c1 = std::min(static_cast<long>(width) - 1, static_cast<long>(std::floor(b - 0.5)));
            if (c0 <= c1) cols.emplace_back(c0, c1);
        }
        std::sort(cols.begin(), cols.end());
        long next = 0;  // first column not yet visited on this row
        for (const auto& [c0, c1] : cols) {
            for (long c = std::max(c0, next); c <= c1; ++c)
                visit(static_cast<std::size_t>(row), static_cast<std::size_t>(c));
            next = std::max(next, c1 + 1);
        }
    }
}

/// Convert map-coordinate rings to continuous pixel coordinates.
inline std::vector<Ring> to_pixel_rings(std::span<const Ring> rings, const GeoTransform& t) {
    std::vector<Ring> out;
    out.reserve(rings.size());
    for (const auto& r : rings) {
        Ring pr;
        pr.reserve(r.size());
        for (const auto& p : r) pr.push_back(t.to_pixel(p.x, p.y));
        out.push_back(std::move(pr));
    }
    return out;
}

}  // namespace glacier
