#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "glacier/geodata/labels.hpp"
#include "glacier/geodata/raster.hpp"
#include "support.hpp"

using namespace glacier;
using glacier::testing::TempDir;

namespace {

tiff::Raster raster_with_bands(std::size_t w, std::size_t h, std::size_t bands) {
    tiff::Raster r;
    r.width = w;
    r.height = h;
    r.transform = GeoTransform{300000.0, 4000000.0, 30.0, -30.0, 0, 0, "EPSG:32644"};
    for (std::size_t b = 0; b < bands; ++b) {
        std::vector<float> v(w * h);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(b * 1000 + i % 97) * 0.25f;
        r.bands.push_back(std::move(v));
    }
    return r;
}

}  // namespace

TEST(GeoTransform, PixelMapRoundTrip) {
    GeoTransform t{512345.5, 3123456.25, 30.0, -30.0, 0.7, -0.3, "EPSG:32645"};
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 8000.0);
    for (int i = 0; i < 1000; ++i) {
        double c = u(rng), r = u(rng);
        MapPoint m = t.to_map(c, r);
        MapPoint p = t.to_pixel(m.x, m.y);
        MapPoint m2 = t.to_map(p.x, p.y);
        EXPECT_NEAR(m2.x, m.x, 1e-9);
        EXPECT_NEAR(m2.y, m.y, 1e-9);
    }
}

TEST(GeoTransform, ZeroPixelSizeIsInvalid) {
    GeoTransform t{0, 0, 0.0, -30.0};
    EXPECT_THROW(t.validate(), ValidationError);
}

TEST(LoadTile, ThreeBandDimensions) {
    TempDir dir;
    tiff::write(dir / "t.tif", raster_with_bands(64, 64, 3));
    RasterTile tile = load_tile(dir / "t.tif", {"B1", "B2", "B3"});
    EXPECT_EQ(tile.width, 64u);
    EXPECT_EQ(tile.height, 64u);
    ASSERT_EQ(tile.channels.size(), 3u);
    EXPECT_EQ(tile.channel_names(), (std::vector<std::string>{"B1", "B2", "B3"}));
    EXPECT_DOUBLE_EQ(tile.transform.origin_x, 300000.0);
    EXPECT_DOUBLE_EQ(tile.transform.pixel_height, -30.0);
    EXPECT_EQ(tile.transform.crs_code, "EPSG:32644");
    EXPECT_EQ(tile.channel("B2")(0, 5), 1000.0f * 0.25f + 5 * 0.25f);
}

TEST(LoadTile, NodataBecomesNaN) {
    TempDir dir;
    auto r = raster_with_bands(8, 8, 2);
    r.bands[0][0] = 0.0f;
    r.bands[1][0] = 7.0f;
    r.nodata = 0.0;
    tiff::write(dir / "nd.tif", r);
    RasterTile tile = load_tile(dir / "nd.tif", {"B1", "B2"});
    EXPECT_TRUE(std::isnan(tile.channel("B1")(0, 0)));
    EXPECT_TRUE(std::isnan(tile.channel("B2")(0, 0)));
    EXPECT_TRUE(tile.nodata_mask(0, 0));
    EXPECT_FALSE(tile.nodata_mask(0, 1));
}

TEST(LoadTile, BandCountMismatchIsConfigError) {
    TempDir dir;
    tiff::write(dir / "t.tif", raster_with_bands(16, 16, 3));
    EXPECT_THROW(load_tile(dir / "t.tif", {"B1", "B2"}), ConfigError);
}

TEST(LoadTile, MissingGeoreferencingIsMetadataError) {
    TempDir dir;
    auto r = raster_with_bands(16, 16, 1);
    r.transform.reset();
    tiff::write(dir / "t.tif", r);
    EXPECT_THROW(load_tile(dir / "t.tif", {"B1"}), MetadataError);
}

TEST(LoadTile, UnreadableFileIsIoError) {
    EXPECT_THROW(load_tile("/nonexistent/file.tif", {"B1"}), IoError);
}

TEST(LoadTile, TruncatedFileIsFormatError) {
    TempDir dir;
    auto bytes = tiff::encode(raster_with_bands(16, 16, 2));
    bytes.resize(bytes.size() - 100);
    EXPECT_THROW(tiff::decode(bytes, "cut.tif"), FormatError);
}

TEST(LoadTile, WriteReloadIsBitwiseIdentical) {
    TempDir dir;
    auto tile = glacier::testing::make_tile(37, 23, {"B1", "B2", "B5"}, 11);
    auto g = std::make_shared<ChannelGrid>(*tile.channels[1].grid);
    (*g)(3, 4) = std::numeric_limits<float>::quiet_NaN();
    tile.channels[1].grid = g;
    tile.nodata_mask(3, 4) = 1;
    write_tile(tile, dir / "a.tif");
    RasterTile once = load_tile(dir / "a.tif");
    write_tile(once, dir / "b.tif");
    RasterTile twice = load_tile(dir / "b.tif");
    ASSERT_EQ(once.channels.size(), twice.channels.size());
    for (std::size_t i = 0; i < once.channels.size(); ++i)
        EXPECT_TRUE(glacier::testing::bitwise_equal(once.channels[i].grid->storage(), twice.channels[i].grid->storage()));
    EXPECT_EQ(once.id, "tile");
    EXPECT_EQ(once.timestamp, "2005-10-14");
    EXPECT_EQ(once.transform, twice.transform);
    // Non-nodata values survive the first write exactly.
    EXPECT_EQ(once.channel("B5")(10, 10), tile.channel("B5")(10, 10));
}

TEST(RasterizeLabels, SquareCoversFourCenters) {
    GeoTransform t{0, 4, 1, -1};  // row r spans y in [4-r-1, 4-r]
    LabelVectors lv;
    // Pixel centers (1,1),(1,2),(2,1),(2,2) lie at x,y in {1.5, 2.5}.
    lv.polygons.push_back({{glacier::testing::rect_ring(1.0, 1.0, 3.0, 3.0)}, GlacierClass::clean_ice});
    MaskGrid m = rasterize_labels(lv, t, 4, 4);
    int n = 0;
    for (auto v : m.values()) n += v == static_cast<std::uint8_t>(GlacierClass::clean_ice);
    EXPECT_EQ(n, 4);
    EXPECT_EQ(m(1, 1), 1);
    EXPECT_EQ(m(2, 2), 1);
    EXPECT_EQ(m(0, 0), 0);
}

TEST(RasterizeLabels, EmptyVectorsGiveBackground) {
    MaskGrid m = rasterize_labels({}, GeoTransform{}, 8, 8);
    for (auto v : m.values()) EXPECT_EQ(v, 0);
}

TEST(RasterizeLabels, DegenerateRingIsValidationError) {
    LabelVectors lv;
    lv.polygons.push_back({{{{0, 0}, {1, 0}, {0, 0}}}, GlacierClass::debris});
    EXPECT_THROW(rasterize_labels(lv, GeoTransform{}, 4, 4), ValidationError);
}

TEST(RasterizeLabels, BoundaryCenterCountsAsInside) {
    GeoTransform t{0, 4, 1, -1};
    LabelVectors lv;
    // Right edge passes exactly through the centers x = 2.5.
    lv.polygons.push_back({{glacier::testing::rect_ring(0.2, 0.2, 2.5, 3.8)}, GlacierClass::clean_ice});
    MaskGrid m = rasterize_labels(lv, t, 4, 4);
    EXPECT_EQ(m(1, 2), 1);
    EXPECT_EQ(m(1, 3), 0);
}

TEST(RasterizeLabels, DebrisWinsOverlap) {
    GeoTransform t{0, 8, 1, -1};
    LabelVectors lv;
    lv.polygons.push_back({{glacier::testing::rect_ring(3, 3, 8, 8)}, GlacierClass::debris});
    lv.polygons.push_back({{glacier::testing::rect_ring(0, 0, 6, 6)}, GlacierClass::clean_ice});
    MaskGrid m = rasterize_labels(lv, t, 8, 8);
    EXPECT_EQ(m(3, 4), 2);  // center (4.5, 4.5) in both
    EXPECT_EQ(m(7, 0), 1);
}

TEST(RasterizeLabels, HoleIsExcluded) {
    GeoTransform t{0, 8, 1, -1};
    LabelVectors lv;
    lv.polygons.push_back(
        {{glacier::testing::rect_ring(0, 0, 8, 8), glacier::testing::rect_ring(3, 3, 5, 5)}, GlacierClass::clean_ice});
    MaskGrid m = rasterize_labels(lv, t, 8, 8);
    EXPECT_EQ(m(0, 0), 1);
    EXPECT_EQ(m(3, 3), 0);
    EXPECT_EQ(m(4, 4), 0);
    EXPECT_EQ(m(2, 2), 1);
}

TEST(RasterizeLabels, RandomRectanglesMatchBruteForce) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-40.0, 1000.0);
    std::uniform_int_distribution<int> count(0, 3), cls(1, 2);
    GeoTransform t{0.0, 960.0, 30.0, -30.0};
    for (int trial = 0; trial < 200; ++trial) {
        LabelVectors lv;
        int n = count(rng);
        for (int i = 0; i < n; ++i) {
            double x0 = u(rng), x1 = u(rng), y0 = u(rng), y1 = u(rng);
            if (x0 > x1) std::swap(x0, x1);
            if (y0 > y1) std::swap(y0, y1);
            if (x1 - x0 < 1 || y1 - y0 < 1) continue;
            lv.polygons.push_back({{glacier::testing::rect_ring(x0, y0, x1, y1)}, static_cast<GlacierClass>(cls(rng))});
        }
        MaskGrid m = rasterize_labels(lv, t, 32, 32);
        for (std::size_t r = 0; r < 32; ++r)
            for (std::size_t c = 0; c < 32; ++c) {
                MapPoint p = t.pixel_center(r, c);
                std::uint8_t expected = 0;
                for (const auto& poly : lv.polygons)
                    if (glacier::testing::oracle_point_in_rings(poly.rings, p.x, p.y))
                        expected = std::max(expected, static_cast<std::uint8_t>(poly.class_tag));
                ASSERT_EQ(m(r, c), expected) << "trial " << trial << " pixel " << r << "," << c;
            }
    }
}

TEST(CropToBoundary, FullExtentIsIdentity) {
    auto tile = glacier::testing::make_tile(16, 16, {"B1", "B2"});
    MaskGrid mask(16, 16, 1);
    RegionBoundary b{{glacier::testing::rect_ring(tile.bounds().min_x, tile.bounds().min_y, tile.bounds().max_x,
                                                  tile.bounds().max_y)}};
    auto [t2, m2] = crop_to_boundary(tile, mask, b);
    EXPECT_EQ(m2, mask);
    for (std::size_t i = 0; i < 2; ++i)
        EXPECT_TRUE(glacier::testing::bitwise_equal(t2.channels[i].grid->storage(), tile.channels[i].grid->storage()));
}

TEST(CropToBoundary, LeftHalf) {
    auto tile = glacier::testing::make_tile(16, 16, {"B1"});
    MaskGrid mask(16, 16, 2);
    auto bb = tile.bounds();
    RegionBoundary b{{glacier::testing::rect_ring(bb.min_x, bb.min_y, bb.center_x(), bb.max_y)}};
    auto [t2, m2] = crop_to_boundary(tile, mask, b);
    EXPECT_EQ(t2.width, 16u);
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
            if (c < 8) {
                EXPECT_EQ(t2.channel("B1")(r, c), tile.channel("B1")(r, c));
                EXPECT_EQ(m2(r, c), 2);
            } else {
                EXPECT_TRUE(std::isnan(t2.channel("B1")(r, c)));
                EXPECT_EQ(m2(r, c), 0);
            }
        }
}

TEST(CropToBoundary, RandomConvexBoundaryMatchesBruteForce) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        auto tile = glacier::testing::make_tile(16, 16, {"B1"}, static_cast<std::uint64_t>(trial));
        MaskGrid mask(16, 16, 1);
        auto bb = tile.bounds();
        // Convex polygon: random points on an ellipse sorted by angle.
        std::uniform_real_distribution<double> ang(0.0, 2 * 3.14159265358979);
        std::vector<double> as(7);
        for (auto& a : as) a = ang(rng);
        std::sort(as.begin(), as.end());
        Ring ring;
        for (double a : as)
            ring.push_back({bb.center_x() + 0.45 * (bb.max_x - bb.min_x) * std::cos(a),
                            bb.center_y() + 0.4 * (bb.max_y - bb.min_y) * std::sin(a)});
        ring.push_back(ring.front());
        RegionBoundary b{{ring}};
        auto [t2, m2] = crop_to_boundary(tile, mask, b);
        for (std::size_t r = 0; r < 16; ++r)
            for (std::size_t c = 0; c < 16; ++c) {
                MapPoint p = tile.transform.pixel_center(r, c);
                bool in = glacier::testing::oracle_point_in_rings(b.rings, p.x, p.y);
                ASSERT_EQ(m2(r, c), in ? 1 : 0);
                ASSERT_EQ(std::isnan(t2.channel("B1")(r, c)), !in);
            }
    }
}

TEST(CropToBoundary, DimensionMismatchIsValidationError) {
    auto tile = glacier::testing::make_tile(16, 16, {"B1"});
    RegionBoundary b{{glacier::testing::rect_ring(0, 0, 1, 1)}};
    EXPECT_THROW(crop_to_boundary(tile, MaskGrid(8, 16), b), ValidationError);
}

TEST(Labels, GeoJsonParsingAcceptsIcimodClassNames) {
    std::string doc = R"({"type":"FeatureCollection","features":[
      {"type":"Feature","properties":{"Glaciers":"Debris covered"},
       "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}},
      {"type":"Feature","properties":{"class":"clean_ice"},
       "geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[2,0],[2,2],[0,0]]],[[[5,5],[6,5],[6,6],[5,5]]]]}}]})";
    LabelVectors lv = labels_from_geojson(doc);
    ASSERT_EQ(lv.polygons.size(), 3u);
    EXPECT_EQ(lv.polygons[0].class_tag, GlacierClass::debris);
    EXPECT_EQ(lv.polygons[2].class_tag, GlacierClass::clean_ice);
    LabelVectors again = labels_from_geojson(labels_to_geojson(lv));
    EXPECT_EQ(again.polygons.size(), 3u);
    EXPECT_EQ(again.polygons[1].rings, lv.polygons[1].rings);
}

TEST(Labels, OpenRingRejected) {
    std::string doc = R"({"type":"Feature","properties":{"class":"debris"},
       "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1]]]}})";
    EXPECT_THROW(labels_from_geojson(doc), ValidationError);
}

TEST(Labels, TruncatedDocumentIsParseError) {
    try {
        labels_from_geojson(R"({"type":"FeatureCollection","features":[)");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_GT(e.offset, 0u);
    }
}

TEST(RenderPreview, DerivedByteValues) {
    TempDir dir;
    RasterTile tile = glacier::testing::make_tile(2, 2, {"A"});
    auto g = std::make_shared<ChannelGrid>(2, 2, std::vector<float>{0.0f, 0.5f, 1.0f, NAN});
    tile.channels[0].grid = g;
    tile.channels.push_back({"B", g});
    tile.channels.push_back({"C", g});
    render_preview(tile, {"A", "B", "C"}, dir / "p.png");
    png::Image img = png::read(dir / "p.png");
    ASSERT_EQ(img.channels, 3);
    std::vector<std::uint8_t> red;
    for (std::size_t p = 0; p < 4; ++p) red.push_back(img.pixels[p * 3]);
    EXPECT_EQ(red, (std::vector<std::uint8_t>{0, 128, 255, 0}));
}

TEST(RenderPreview, ConstantChannelIsZero) {
    TempDir dir;
    RasterTile tile = glacier::testing::make_tile(4, 4, {"A", "B", "C"});
    tile.channels[0].grid = std::make_shared<ChannelGrid>(4, 4, 0.7f);
    png::Image img = preview_image(tile, {"A", "B", "C"});
    for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(img.pixels[p * 3], 0);
}

TEST(RenderPreview, UnitRangeMapsLinearly) {
    RasterTile tile = glacier::testing::make_tile(5, 1, {"A"});
    tile.channels[0].grid = std::make_shared<ChannelGrid>(5, 1, std::vector<float>{0.0f, 0.1f, 0.25f, 0.9f, 1.0f});
    tile.channels.push_back({"B", tile.channels[0].grid});
    tile.channels.push_back({"C", tile.channels[0].grid});
    png::Image img = preview_image(tile, {"A", "B", "C"});
    std::vector<float> v{0.0f, 0.1f, 0.25f, 0.9f, 1.0f};
    for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(img.pixels[p * 3], std::lround(255.0 * v[p]));
}

TEST(RenderPreview, MissingChannelIsConfigError) {
    TempDir dir;
    RasterTile tile = glacier::testing::make_tile(4, 4, {"A", "B"});
    EXPECT_THROW(render_preview(tile, {"A", "B", "Z"}, dir / "p.png"), ConfigError);
}
