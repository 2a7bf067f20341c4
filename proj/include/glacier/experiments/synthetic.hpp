#pragma once

// Seeded synthetic glacier scenes for desk-scale experiments.
//
// Terrain is fractal value noise. Above a regional snowline, gentle terrain
// carries clean ice; in a band below it, gentle valley floors carry a debris
// mantle over most of the ablation zone, with gaps from a patchiness noise.
// Clean ice is bright in the visible and NIR bands and dark in SWIR. Debris
// has the spectral mean of bare rock and differs only by a fine speckle
// texture. Seasonal snow patches, spectrally identical to ice, lie anywhere
// off the glaciers; only terrain separates them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/grid.hpp"
#include "glacier/rng.hpp"

namespace glacier::experiments {

struct SyntheticConfig {
    std::string version = "synthetic-v1";
    std::size_t tiles = 20;
    std::size_t tile_size = 1024;
    std::size_t tiles_per_row = 5;
    double pixel_size = 30.0;
    std::uint64_t seed = 0;

    double base_elevation = 4700.0;   // m
    double relief = 1300.0;           // amplitude of the large-scale terrain
    double relief_scale = 320.0;      // pixels
    double ridge_relief = 260.0;      // small-scale roughness
    double ridge_scale = 48.0;
    double snowline = 5150.0;         // regional mean
    double snowline_jitter = 150.0;
    double max_ice_slope = 24.0;      // degrees
    double debris_band = 350.0;       // m below the snowline
    double max_debris_slope = 14.0;
    double debris_patchiness = -0.35;  // threshold on patch noise; lower = more debris
    double snow_threshold = 0.36;     // threshold on snow noise; higher = fewer decoys
    double snow_scale = 36.0;
    double speckle = 0.07;            // debris texture amplitude (reflectance)
    double speckle_scale = 1.6;       // pixels
    double sensor_noise = 0.012;

    void validate() const {
        if (tiles == 0 || tile_size < 8 || tiles_per_row == 0) throw ConfigError("synthetic scene size is empty");
        if (!(pixel_size > 0) || !(relief_scale > 0) || !(ridge_scale > 0) || !(snow_scale > 0) ||
            !(speckle_scale > 0))
            throw ConfigError("synthetic scales must be positive");
    }

    nlohmann::json to_json() const {
        return {{"version", version},
                {"tiles", tiles},
                {"tile_size", tile_size},
                {"tiles_per_row", tiles_per_row},
                {"pixel_size", pixel_size},
                {"seed", seed},
                {"base_elevation", base_elevation},
                {"relief", relief},
                {"relief_scale", relief_scale},
                {"ridge_relief", ridge_relief},
                {"ridge_scale", ridge_scale},
                {"snowline", snowline},
                {"snowline_jitter", snowline_jitter},
                {"max_ice_slope", max_ice_slope},
                {"debris_band", debris_band},
                {"max_debris_slope", max_debris_slope},
                {"debris_patchiness", debris_patchiness},
                {"snow_threshold", snow_threshold},
                {"snow_scale", snow_scale},
                {"speckle", speckle},
                {"speckle_scale", speckle_scale},
                {"sensor_noise", sensor_noise}};
    }

    static SyntheticConfig from_json(const nlohmann::json& j) {
        SyntheticConfig c;
        c.version = j.value("version", c.version);
        if (c.version != "synthetic-v1") throw ConfigError("unknown synthetic generator version '" + c.version + "'");
        c.tiles = j.value("tiles", c.tiles);
        c.tile_size = j.value("tile_size", c.tile_size);
        c.tiles_per_row = j.value("tiles_per_row", c.tiles_per_row);
        c.pixel_size = j.value("pixel_size", c.pixel_size);
        c.seed = j.value("seed", c.seed);
        c.base_elevation = j.value("base_elevation", c.base_elevation);
        c.relief = j.value("relief", c.relief);
        c.relief_scale = j.value("relief_scale", c.relief_scale);
        c.ridge_relief = j.value("ridge_relief", c.ridge_relief);
        c.ridge_scale = j.value("ridge_scale", c.ridge_scale);
        c.snowline = j.value("snowline", c.snowline);
        c.snowline_jitter = j.value("snowline_jitter", c.snowline_jitter);
        c.max_ice_slope = j.value("max_ice_slope", c.max_ice_slope);
        c.debris_band = j.value("debris_band", c.debris_band);
        c.max_debris_slope = j.value("max_debris_slope", c.max_debris_slope);
        c.debris_patchiness = j.value("debris_patchiness", c.debris_patchiness);
        c.snow_threshold = j.value("snow_threshold", c.snow_threshold);
        c.snow_scale = j.value("snow_scale", c.snow_scale);
        c.speckle = j.value("speckle", c.speckle);
        c.speckle_scale = j.value("speckle_scale", c.speckle_scale);
        c.sensor_noise = j.value("sensor_noise", c.sensor_noise);
        c.validate();
        return c;
    }
};

inline const std::vector<std::string> kSyntheticChannels = {"B2", "B4", "B5", "ELEVATION", "SLOPE"};

namespace detail {

inline double lattice(std::uint64_t key, long ix, long iy) {
    std::uint64_t h = Rng::splitmix(key ^ Rng::splitmix(static_cast<std::uint64_t>(ix) * 0x9e3779b97f4a7c15ULL ^
                                                        static_cast<std::uint64_t>(iy)));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;  // [-1, 1)
}

/// Smooth value noise in [-1, 1] with feature size `scale` pixels.
inline double value_noise(std::uint64_t key, double x, double y, double scale) {
    const double gx = x / scale, gy = y / scale;
    const double fx0 = std::floor(gx), fy0 = std::floor(gy);
    const long ix = static_cast<long>(fx0), iy = static_cast<long>(fy0);
    double fx = gx - fx0, fy = gy - fy0;
    fx = fx * fx * (3 - 2 * fx);
    fy = fy * fy * (3 - 2 * fy);
    const double a = lattice(key, ix, iy), b = lattice(key, ix + 1, iy);
    const double c = lattice(key, ix, iy + 1), d = lattice(key, ix + 1, iy + 1);
    return (a + (b - a) * fx) + ((c + (d - c) * fx) - (a + (b - a) * fx)) * fy;
}

inline double fbm(std::uint64_t key, double x, double y, double scale, int octaves) {
    double sum = 0, amp = 1, norm = 0;
    for (int o = 0; o < octaves; ++o) {
        sum += amp * value_noise(key + static_cast<std::uint64_t>(o) * 0x51ed27ULL, x, y, scale);
        norm += amp;
        amp *= 0.5;
        scale *= 0.5;
    }
    return sum / norm;
}

enum NoiseKey : std::uint64_t {
    kTerrain = 1,
    kRidge,
    kSnowline,
    kIce,
    kDebrisPatch,
    kSnow,
    kRock0,
    kRock1,
    kRock2,
    kSpeckle,
    kSensor,
};

}  // namespace detail

struct SyntheticTile {
    RasterTile tile;
    MaskGrid mask;
};

/// Tile `index` of the scene. Tiles sit on a regular grid so terrain and
/// snowline are continuous across tile borders.
inline SyntheticTile generate_tile(const SyntheticConfig& cfg, std::size_t index) {
    cfg.validate();
    if (index >= cfg.tiles) throw ConfigError("synthetic tile index out of range");
    const std::size_t n = cfg.tile_size;
    const double ox = static_cast<double>((index % cfg.tiles_per_row) * n);
    const double oy = static_cast<double>((index / cfg.tiles_per_row) * n);
    auto key = [&](std::uint64_t k) { return Rng::splitmix(cfg.seed * 0x100000001b3ULL + k); };
    const std::uint64_t kt = key(detail::kTerrain), kr = key(detail::kRidge);

    auto elevation_at = [&](double x, double y) {
        const double ridge = 1.0 - std::abs(detail::value_noise(kr, x, y, cfg.ridge_scale));
        return cfg.base_elevation + cfg.relief * detail::fbm(kt, x, y, cfg.relief_scale, 4) +
               cfg.ridge_relief * ridge;
    };
    // One-pixel margin so slopes at tile borders see real neighbours.
    Grid<double> ext(n + 2, n + 2);
    for (std::size_t r = 0; r < n + 2; ++r)
        for (std::size_t c = 0; c < n + 2; ++c)
            ext(r, c) = elevation_at(ox + static_cast<double>(c) - 1.0, oy + static_cast<double>(r) - 1.0);

    auto elev = std::make_shared<ChannelGrid>(n, n);
    auto slope = std::make_shared<ChannelGrid>(n, n);
    auto b2 = std::make_shared<ChannelGrid>(n, n), b4 = std::make_shared<ChannelGrid>(n, n),
         b5 = std::make_shared<ChannelGrid>(n, n);
    SyntheticTile out;
    out.mask = MaskGrid(n, n, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            const double x = ox + static_cast<double>(c), y = oy + static_cast<double>(r);
            const double e = ext(r + 1, c + 1);
            const double dzdx = (ext(r + 1, c + 2) - ext(r + 1, c)) / (2 * cfg.pixel_size);
            const double dzdy = (ext(r + 2, c + 1) - ext(r, c + 1)) / (2 * cfg.pixel_size);
            const double s = std::atan(std::hypot(dzdx, dzdy)) * 180.0 / 3.14159265358979323846;
            const double line =
                cfg.snowline + cfg.snowline_jitter * detail::value_noise(key(detail::kSnowline), x, y, 2048.0);

            std::uint8_t cls = 0;
            if (e > line && s < cfg.max_ice_slope && detail::fbm(key(detail::kIce), x, y, 64.0, 2) > -0.55)
                cls = 1;
            else if (e <= line && e > line - cfg.debris_band && s < cfg.max_debris_slope &&
                     detail::fbm(key(detail::kDebrisPatch), x, y, 80.0, 2) > cfg.debris_patchiness)
                cls = 2;
            const bool snow = cls == 0 && detail::fbm(key(detail::kSnow), x, y, cfg.snow_scale, 2) > cfg.snow_threshold;

            double v2, v4, v5;
            if (cls == 1 || snow) {
                v2 = 0.72, v4 = 0.62, v5 = 0.10;
            } else {
                v2 = 0.16 + 0.05 * detail::value_noise(key(detail::kRock0), x, y, 24.0);
                v4 = 0.26 + 0.05 * detail::value_noise(key(detail::kRock1), x, y, 24.0);
                v5 = 0.31 + 0.05 * detail::value_noise(key(detail::kRock2), x, y, 24.0);
            }
            if (cls == 2) {
                // Fine hummocky texture, shared by the three bands.
                const double t = cfg.speckle * detail::value_noise(key(detail::kSpeckle), x, y, cfg.speckle_scale);
                v2 += t, v4 += t, v5 += t;
            }
            const std::uint64_t ks = key(detail::kSensor);
            v2 += cfg.sensor_noise * detail::lattice(ks, static_cast<long>(x), static_cast<long>(y) * 3);
            v4 += cfg.sensor_noise * detail::lattice(ks, static_cast<long>(x), static_cast<long>(y) * 3 + 1);
            v5 += cfg.sensor_noise * detail::lattice(ks, static_cast<long>(x), static_cast<long>(y) * 3 + 2);

            (*elev)(r, c) = static_cast<float>(e);
            (*slope)(r, c) = static_cast<float>(s);
            (*b2)(r, c) = static_cast<float>(v2);
            (*b4)(r, c) = static_cast<float>(v4);
            (*b5)(r, c) = static_cast<float>(v5);
            out.mask(r, c) = cls;
        }

    RasterTile& t = out.tile;
    t.id = "syn" + std::to_string(cfg.seed) + "_t" + std::to_string(index);
    t.width = t.height = n;
    t.channels = {{"B2", b2}, {"B4", b4}, {"B5", b5}, {"ELEVATION", elev}, {"SLOPE", slope}};
    t.nodata_mask = Grid<std::uint8_t>(n, n, 0);
    t.transform.origin_x = 300000.0 + ox * cfg.pixel_size;
    t.transform.origin_y = 3300000.0 - oy * cfg.pixel_size;
    t.transform.pixel_width = cfg.pixel_size;
    t.transform.pixel_height = -cfg.pixel_size;
    t.transform.crs_code = "EPSG:32645";
    t.timestamp = "2005-10-15";
    return out;
}

}  // namespace glacier::experiments
