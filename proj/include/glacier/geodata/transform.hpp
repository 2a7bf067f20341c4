#pragma once

#include <cmath>
#include <string>

#include "glacier/error.hpp"

namespace glacier {

struct MapPoint {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const MapPoint&) const = default;
};

/// Affine pixel -> map transform (GDAL ordering).
///
///   map_x = origin_x + col * pixel_width + row * row_rotation
///   map_y = origin_y + col * col_rotation + row * pixel_height
///
/// `col`/`row` are continuous pixel coordinates; the center of pixel (r, c)
/// is at (c + 0.5, r + 0.5).
struct GeoTransform {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double pixel_width = 1.0;
    double pixel_height = -1.0;
    double row_rotation = 0.0;
    double col_rotation = 0.0;
    std::string crs_code;

    void validate() const {
        if (pixel_width == 0.0 || pixel_height == 0.0)
            throw ValidationError("geotransform pixel size must be nonzero");
        if (determinant() == 0.0) throw ValidationError("geotransform is not invertible");
        if (!std::isfinite(origin_x) || !std::isfinite(origin_y))
            throw ValidationError("geotransform origin is not finite");
    }

    double determinant() const { return pixel_width * pixel_height - row_rotation * col_rotation; }

    MapPoint to_map(double col, double row) const {
        return {origin_x + col * pixel_width + row * row_rotation,
                origin_y + col * col_rotation + row * pixel_height};
    }

    MapPoint pixel_center(std::size_t row, std::size_t col) const {
        return to_map(static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5);
    }

    /// Inverse mapping; returns {col, row} in continuous pixel coordinates.
    MapPoint to_pixel(double x, double y) const {
        double dx = x - origin_x;
        double dy = y - origin_y;
        if (row_rotation == 0.0 && col_rotation == 0.0) return {dx / pixel_width, dy / pixel_height};
        double det = determinant();
        return {(dx * pixel_height - dy * row_rotation) / det,
                (dy * pixel_width - dx * col_rotation) / det};
    }

    /// Transform of the sub-window whose top-left pixel is (row, col).
    GeoTransform window(std::size_t row, std::size_t col) const {
        GeoTransform t = *this;
        MapPoint o = to_map(static_cast<double>(col), static_cast<double>(row));
        t.origin_x = o.x;
        t.origin_y = o.y;
        return t;
    }

    bool operator==(const GeoTransform&) const = default;
};

/// Axis-aligned map rectangle.
struct MapRect {
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;

    bool intersects(const MapRect& o) const {
        return min_x < o.max_x && o.min_x < max_x && min_y < o.max_y && o.min_y < max_y;
    }
    bool contains(double x, double y) const { return x >= min_x && x <= max_x && y >= min_y && y <= max_y; }
    double center_x() const { return 0.5 * (min_x + max_x); }
    double center_y() const { return 0.5 * (min_y + max_y); }
    bool operator==(const MapRect&) const = default;
};

/// Map-space bounding rectangle of the pixel window [col0, col0+w) x [row0, row0+h).
inline MapRect window_bounds(const GeoTransform& t, double row0, double col0, double h, double w) {
    MapPoint c[4] = {t.to_map(col0, row0), t.to_map(col0 + w, row0), t.to_map(col0, row0 + h),
                     t.to_map(col0 + w, row0 + h)};
    MapRect r{c[0].x, c[0].y, c[0].x, c[0].y};
    for (const auto& p : c) {
        r.min_x = std::fmin(r.min_x, p.x);
        r.max_x = std::fmax(r.max_x, p.x);
        r.min_y = std::fmin(r.min_y, p.y);
        r.max_y = std::fmax(r.max_y, p.y);
    }
    return r;
}

}  // namespace glacier
