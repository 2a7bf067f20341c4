#pragma once

// Shared test helpers and brute-force oracles. Oracles here are deliberately
// naive and independent of the library code paths they check.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "glacier/geodata/geometry.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/grid.hpp"

namespace glacier::testing {

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("glacier_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Boundary-inclusive point-in-polygon by crossing number over all rings.
inline bool oracle_point_in_rings(const std::vector<Ring>& rings, double x, double y) {
    for (const auto& ring : rings)
        for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
            const auto& a = ring[i];
            const auto& b = ring[i + 1];
            double cr = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
            if (std::fabs(cr) <= 1e-12 && x >= std::min(a.x, b.x) - 1e-12 && x <= std::max(a.x, b.x) + 1e-12 &&
                y >= std::min(a.y, b.y) - 1e-12 && y <= std::max(a.y, b.y) + 1e-12)
                return true;
        }
    bool inside = false;
    for (const auto& ring : rings)
        for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
            const auto& a = ring[i];
            const auto& b = ring[i + 1];
            if ((a.y > y) != (b.y > y)) {
                double xi = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
                if (x < xi) inside = !inside;
            }
        }
    return inside;
}

inline Ring rect_ring(double x0, double y0, double x1, double y1) {
    return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
}

/// Bitwise float comparison that treats identical NaN payloads as equal.
inline bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline RasterTile make_tile(std::size_t w, std::size_t h, const std::vector<std::string>& names,
                            std::uint64_t seed = 1, GeoTransform t = {500000.0, 3000000.0, 30.0, -30.0, 0, 0,
                                                                      "EPSG:32645"}) {
    RasterTile tile;
    tile.id = "tile";
    tile.width = w;
    tile.height = h;
    tile.transform = t;
    tile.timestamp = "2005-10-14";
    tile.nodata_mask = Grid<std::uint8_t>(w, h, 0);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (const auto& n : names) {
        auto g = std::make_shared<ChannelGrid>(w, h);
        for (auto& v : g->storage()) v = u(rng);
        tile.channels.push_back({n, g});
    }
    return tile;
}

}  // namespace glacier::testing
