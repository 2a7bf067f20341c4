#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/transform.hpp"
#include "glacier/rng.hpp"

namespace glacier {

enum class SplitPart { train, dev, test, unused };

inline std::string split_name(SplitPart p) {
    switch (p) {
        case SplitPart::train: return "train";
        case SplitPart::dev: return "dev";
        case SplitPart::test: return "test";
        case SplitPart::unused: return "unused";
    }
    return "unused";
}

inline SplitPart parse_split(const std::string& s) {
    for (auto p : {SplitPart::train, SplitPart::dev, SplitPart::test, SplitPart::unused})
        if (split_name(p) == s) return p;
    throw ConfigError("unknown split '" + s + "'");
}

/// Assignment of every patch to exactly one split part. `order` keeps the
/// input order of patch ids; `assignment` is keyed by id.
struct SplitManifest {
    std::uint64_t seed = 0;
    std::string method;  // "random" | "geographic"
    std::vector<std::string> order;
    std::map<std::string, SplitPart> assignment;
    nlohmann::json parameters = nlohmann::json::object();

    std::vector<std::string> members(SplitPart part) const {
        std::vector<std::string> out;
        for (const auto& id : order)
            if (assignment.at(id) == part) out.push_back(id);
        return out;
    }

    std::size_t count(SplitPart part) const {
        return static_cast<std::size_t>(
            std::count_if(assignment.begin(), assignment.end(), [&](const auto& kv) { return kv.second == part; }));
    }

    nlohmann::json to_json() const {
        nlohmann::json a = nlohmann::json::object();
        for (const auto& id : order) a[id] = split_name(assignment.at(id));
        return {{"seed", seed}, {"method", method}, {"parameters", parameters}, {"assignment", a}, {"order", order}};
    }

    static SplitManifest from_json(const nlohmann::json& j) {
        SplitManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.method = j.at("method").get<std::string>();
        m.parameters = j.value("parameters", nlohmann::json::object());
        m.order = j.at("order").get<std::vector<std::string>>();
        for (const auto& id : m.order) m.assignment[id] = parse_split(j.at("assignment").at(id).get<std::string>());
        return m;
    }

    bool operator==(const SplitManifest& o) const {
        return seed == o.seed && method == o.method && order == o.order && assignment == o.assignment &&
               parameters == o.parameters;
    }
};

/// Stream tags for Rng::derive, so the two split methods never share draws.
inline constexpr std::uint64_t kRandomSplitStream = 0x5350'4c49'5452'4e44ULL;
inline constexpr std::uint64_t kGeoSplitStream = 0x5350'4c49'5447'454fULL;

struct SplitFractions {
    double train = 0.7, dev = 0.1, test = 0.2;
    /// Where the unallocated share 1 - (train + dev + test) goes.
    SplitPart remainder = SplitPart::test;
};

/// Random split. Sizes are round(train*N) and round(dev*N); test gets
/// round(test*N) and the remainder goes to `remainder`.
///
/// Algorithm: Rng::derive(seed, {kRandomSplitStream}), Fisher-Yates shuffle
/// of the input positions, then the first n_train positions are train, the
/// next n_dev dev, the next n_test test, the rest go to `remainder`.
inline SplitManifest random_split(const std::vector<std::string>& ids, const SplitFractions& f, std::uint64_t seed) {
    for (double v : {f.train, f.dev, f.test})
        if (!(v >= 0.0)) throw ConfigError("split fractions must be nonnegative");
    if (f.train + f.dev + f.test > 1.0 + 1e-12) throw ConfigError("split fractions sum to more than 1");
    if (f.remainder == SplitPart::train || f.remainder == SplitPart::dev)
        throw ConfigError("split remainder must go to test or unused");
    const std::size_t n = ids.size();
    auto rounded = [n](double frac) {
        return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
    };
    std::size_t n_train = std::min(n, rounded(f.train));
    std::size_t n_dev = std::min(n - n_train, rounded(f.dev));
    std::size_t n_test = std::min(n - n_train - n_dev, rounded(f.test));

    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    Rng rng = Rng::derive(seed, {kRandomSplitStream});
    rng.shuffle(std::span<std::size_t>(pos));

    SplitManifest m;
    m.seed = seed;
    m.method = "random";
    m.order = ids;
    m.parameters = {{"fractions", {f.train, f.dev, f.test}}, {"remainder", split_name(f.remainder)}};
    for (std::size_t i = 0; i < n; ++i) {
        SplitPart part = i < n_train                   ? SplitPart::train
                         : i < n_train + n_dev          ? SplitPart::dev
                         : i < n_train + n_dev + n_test ? SplitPart::test
                                                        : f.remainder;
        if (!m.assignment.emplace(ids[pos[i]], part).second)
            throw ConfigError("duplicate patch id '" + ids[pos[i]] + "' in split input");
    }
    return m;
}

struct GeoPoint {
    std::string id;
    MapPoint centroid;
};

/// Count of points the ball must contain: ceil(fraction * N), tolerant of
/// representation error in fraction * N.
inline std::size_t ball_quota(double fraction, std::size_t n) {
    const double want = fraction * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(want - 1e-9 * std::max(1.0, want)));
    return std::clamp<std::size_t>(k, 1, n);
}

/// Geographic split around a given seed point. The radius is the smallest
/// that puts at least ball_quota points inside (distance <= radius).
inline SplitManifest geographic_split_at(const std::vector<GeoPoint>& points, MapPoint center, double ball_fraction,
                                         double dev_fraction_within_ball, std::uint64_t seed) {
    if (points.size() < 3) throw ConfigError("geographic split needs at least 3 patches");
    if (!(ball_fraction > 0.0 && ball_fraction <= 1.0)) throw ConfigError("ball_fraction must lie in (0, 1]");
    if (!(dev_fraction_within_ball >= 0.0 && dev_fraction_within_ball <= 1.0))
        throw ConfigError("dev_fraction_within_ball must lie in [0, 1]");
    const std::size_t n = points.size();
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i)
        dist[i] = std::hypot(points[i].centroid.x - center.x, points[i].centroid.y - center.y);
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    const double radius = sorted[ball_quota(ball_fraction, n) - 1];

    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < n; ++i)
        if (dist[i] <= radius) inside.push_back(i);
    Rng rng = Rng::derive(seed, {kGeoSplitStream, 1});
    rng.shuffle(std::span<std::size_t>(inside));
    const auto n_dev = static_cast<std::size_t>(
        std::llround(dev_fraction_within_ball * static_cast<double>(inside.size())));

    SplitManifest m;
    m.seed = seed;
    m.method = "geographic";
    for (const auto& p : points) {
        if (!m.assignment.emplace(p.id, SplitPart::test).second)
            throw ConfigError("duplicate patch id '" + p.id + "' in split input");
        m.order.push_back(p.id);
    }
    for (std::size_t k = 0; k < inside.size(); ++k)
        m.assignment[points[inside[k]].id] = k < n_dev ? SplitPart::dev : SplitPart::train;
    m.parameters = {{"center", {center.x, center.y}},
                    {"radius", radius},
                    {"ball_fraction", ball_fraction},
                    {"dev_fraction_within_ball", dev_fraction_within_ball}};
    return m;
}

/// Seed point drawn uniformly from the bounding box of the centroids.
inline MapPoint geographic_seed_point(const std::vector<GeoPoint>& points, std::uint64_t seed) {
    if (points.empty()) throw ConfigError("geographic split needs at least 3 patches");
    double x0 = points[0].centroid.x, x1 = x0, y0 = points[0].centroid.y, y1 = y0;
    for (const auto& p : points) {
        x0 = std::min(x0, p.centroid.x);
        x1 = std::max(x1, p.centroid.x);
        y0 = std::min(y0, p.centroid.y);
        y1 = std::max(y1, p.centroid.y);
    }
    Rng rng = Rng::derive(seed, {kGeoSplitStream, 0});
    const double x = rng.uniform(x0, x1);
    const double y = rng.uniform(y0, y1);
    return {x, y};
}

inline SplitManifest geographic_split(const std::vector<GeoPoint>& points, double ball_fraction = 0.8,
                                      double dev_fraction_within_ball = 0.1, std::uint64_t seed = 0) {
    if (points.size() < 3) throw ConfigError("geographic split needs at least 3 patches");
    return geographic_split_at(points, geographic_seed_point(points, seed), ball_fraction, dev_fraction_within_ball,
                               seed);
}

}  // namespace glacier
