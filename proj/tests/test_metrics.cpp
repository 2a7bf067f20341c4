#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "glacier/metrics.hpp"

using namespace glacier;

namespace {

// Per-pixel tally by row/column walk, independent of confusion_counts.
struct Tally {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Tally oracle_tally(const Grid<std::uint8_t>& p, const Grid<std::uint8_t>& t) {
    Tally r;
    for (std::size_t y = 0; y < p.height(); ++y)
        for (std::size_t x = 0; x < p.width(); ++x) {
            if (p(y, x) && t(y, x)) ++r.tp;
            else if (p(y, x)) ++r.fp;
            else if (t(y, x)) ++r.fn;
            else ++r.tn;
        }
    return r;
}

Grid<std::uint8_t> random_mask(std::mt19937_64& g, std::size_t w, std::size_t h) {
    // Vary density so some pairs are empty or full.
    const double density = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    const int mode = static_cast<int>(g() % 10);
    Grid<std::uint8_t> m(w, h, 0);
    for (auto& v : m.storage())
        v = mode == 0 ? 0 : mode == 1 ? 1 : std::uniform_real_distribution<double>(0.0, 1.0)(g) < density;
    return m;
}

}  // namespace

TEST(Metrics, MatchBruteForceOn200RandomPairs) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 g(20240601);
    std::vector<Grid<std::uint8_t>> preds, truths;
    Tally total;
    for (int k = 0; k < 200; ++k) {
        auto p = random_mask(g, 32, 32), t = random_mask(g, 32, 32);
        const Tally o = oracle_tally(p, t);
        const ConfusionCounts c = confusion_counts(p, t);
        ASSERT_EQ(c.tp, o.tp);
        ASSERT_EQ(c.fp, o.fp);
        ASSERT_EQ(c.fn, o.fn);
        ASSERT_EQ(c.tn, o.tn);
        const double den_iou = double(o.tp + o.fp + o.fn), den_p = double(o.tp + o.fp), den_r = double(o.tp + o.fn);
        EXPECT_EQ(iou(c).value, den_iou == 0 ? 0.0 : double(o.tp) / den_iou);
        EXPECT_EQ(iou(c).degenerate, den_iou == 0);
        EXPECT_EQ(precision(c).value, den_p == 0 ? 0.0 : double(o.tp) / den_p);
        EXPECT_EQ(precision(c).degenerate, den_p == 0);
        EXPECT_EQ(recall(c).value, den_r == 0 ? 0.0 : double(o.tp) / den_r);
        EXPECT_EQ(recall(c).degenerate, den_r == 0);
        total.tp += o.tp, total.fp += o.fp, total.fn += o.fn, total.tn += o.tn;
        preds.push_back(std::move(p));
        truths.push_back(std::move(t));
    }
    const MetricRow row = evaluate_set(preds, truths);
    EXPECT_EQ(row.counts.tp, total.tp);
    EXPECT_EQ(row.counts.fp, total.fp);
    EXPECT_EQ(row.counts.fn, total.fn);
    EXPECT_EQ(row.counts.tn, total.tn);
    EXPECT_EQ(row.iou.value, double(total.tp) / double(total.tp + total.fp + total.fn));
    EXPECT_EQ(row.precision.value, double(total.tp) / double(total.tp + total.fp));
    EXPECT_EQ(row.recall.value, double(total.tp) / double(total.tp + total.fn));
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}

TEST(Metrics, HandCase) {
    // tp=1, fp=1, fn=2 -> IoU 1/4, precision 1/2, recall 1/3.
    Grid<std::uint8_t> p(3, 2, 0), t(3, 2, 0);
    p(0, 0) = 1, t(0, 0) = 1;
    p(0, 1) = 1;
    t(1, 0) = 1, t(1, 1) = 1;
    const auto c = confusion_counts(p, t);
    EXPECT_EQ(c, (ConfusionCounts{1, 1, 2, 2}));
    EXPECT_DOUBLE_EQ(iou(c).value, 0.25);
    EXPECT_DOUBLE_EQ(precision(c).value, 0.5);
    EXPECT_DOUBLE_EQ(recall(c).value, 1.0 / 3.0);
}

TEST(Metrics, EmptyUnionIsDegenerateZero) {
    Grid<std::uint8_t> z(4, 4, 0);
    const auto c = confusion_counts(z, z);
    EXPECT_EQ(iou(c), (Ratio{0.0, true}));
    EXPECT_EQ(precision(c), (Ratio{0.0, true}));
    EXPECT_EQ(recall(c), (Ratio{0.0, true}));
}

TEST(Metrics, SetLevelIsNotMeanOfPatches) {
    // Patch A: tp 1, union 1 (IoU 1). Patch B: tp 0, union 3 (IoU 0).
    // Set IoU = 1/4, mean of patch IoUs = 1/2.
    Grid<std::uint8_t> pa(2, 2, 0), ta(2, 2, 0), pb(2, 2, 0), tb(2, 2, 0);
    pa(0, 0) = ta(0, 0) = 1;
    pb(0, 0) = 1;
    tb(1, 0) = tb(1, 1) = 1;
    const auto row = evaluate_set({pa, pb}, {ta, tb});
    EXPECT_DOUBLE_EQ(row.iou.value, 0.25);
}

TEST(Metrics, ShapeAndSizeErrors) {
    Grid<std::uint8_t> a(2, 2, 0), b(3, 2, 0);
    EXPECT_THROW(confusion_counts(a, b), ShapeError);
    EXPECT_THROW(evaluate_set({}, {}), ValidationError);
    EXPECT_THROW(evaluate_set({a}, {a, a}), ValidationError);
}

TEST(Metrics, BinarizeThresholdInclusive) {
    std::vector<float> p = {0.49f, 0.5f, 0.51f, 0.0f};
    auto g = binarize<float>(p, 2, 2);
    EXPECT_EQ(g.storage(), (std::vector<std::uint8_t>{0, 1, 1, 0}));
}

TEST(Metrics, ClassReportRows) {
    MaskGrid pred(2, 2, 0), truth(2, 2, 0);
    pred.storage() = {1, 2, 2, 0};
    truth.storage() = {1, 1, 2, 0};
    auto r = evaluate_classes({pred}, {truth});
    EXPECT_DOUBLE_EQ(r.row("glacier").iou.value, 1.0);
    EXPECT_DOUBLE_EQ(r.row("clean_ice").iou.value, 0.5);
    EXPECT_DOUBLE_EQ(r.row("debris").iou.value, 0.5);
    EXPECT_NE(r.to_csv().find("class,tp,fp,fn,tn,iou,precision,recall,degenerate"), std::string::npos);
    EXPECT_EQ(r.to_json()["rows"].size(), 3u);
}

namespace {

// Per-patch counts for 100 patches in five debris bins, built so that the
// cumulative strata reproduce the published binary and multiclass IoUs.
struct Fixture {
    std::vector<double> debris;
    std::vector<std::vector<ConfusionCounts>> counts{2};
};

Fixture debris_fixture() {
    struct Bin {
        std::size_t n;
        double fraction;
        std::uint64_t denom, tp_binary, tp_multi;
    };
    // Bins from most to least debris: >10%, (5,10], (2,5], (1,2], (0,1].
    const std::vector<Bin> bins = {{6, 0.20, 1000, 460, 603},
                                   {12, 0.07, 1000, 534, 539},
                                   {34, 0.03, 2000, 1102, 1034},
                                   {25, 0.015, 4000, 2088, 2080},
                                   {23, 0.005, 8000, 3432, 3312}};
    Fixture f;
    for (const auto& b : bins) {
        const std::uint64_t tps[2] = {b.tp_binary, b.tp_multi};
        for (std::size_t j = 0; j < b.n; ++j) {
            f.debris.push_back(b.fraction);
            for (int m = 0; m < 2; ++m) {
                // Spread counts across the bin; the first patch absorbs remainders.
                auto share = [&](std::uint64_t total) { return total / b.n + (j == 0 ? total % b.n : 0); };
                const std::uint64_t tp = share(tps[m]);
                const std::uint64_t err = share(b.denom - tps[m]);
                f.counts[m].push_back({tp, err / 2, err - err / 2, 1000});
            }
        }
    }
    return f;
}

}  // namespace

TEST(Stratification, ReproducesPublishedDifferences) {
    const Fixture f = debris_fixture();
    ASSERT_EQ(f.debris.size(), 100u);
    const auto rows = stratify_by_debris(f.counts, f.debris);
    ASSERT_EQ(rows.size(), 5u);
    const std::vector<double> shares = {1.00, 0.77, 0.52, 0.18, 0.06};
    const std::vector<double> binary = {0.476, 0.523, 0.524, 0.497, 0.460};
    const std::vector<double> multi = {0.473, 0.532, 0.544, 0.571, 0.603};
    const std::vector<double> diff = {-0.3, 0.9, 2.0, 7.4, 14.3};
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_DOUBLE_EQ(rows[i].data_share, shares[i]) << i;
        EXPECT_DOUBLE_EQ(*rows[i].iou[0], binary[i]) << i;
        EXPECT_DOUBLE_EQ(*rows[i].iou[1], multi[i]) << i;
        EXPECT_EQ(*iou_difference_points(rows[i]), diff[i]) << i;
    }
    const std::string md = stratification_table(rows, {"Binary", "Multiclass"}, true);
    EXPECT_NE(md.find("| % of Debris | % of Data | Binary IoU | Multiclass IoU | IoU Difference |"), std::string::npos);
    EXPECT_NE(md.find("| > 10% | 6% | 0.460 | 0.603 | +14.3% |"), std::string::npos);
    EXPECT_NE(md.find("| > 0% | 100% | 0.476 | 0.473 | -0.3% |"), std::string::npos);
}

TEST(Stratification, ThresholdIsStrict) {
    std::vector<double> debris = {0.01, 0.0100001, 0.0};
    std::vector<std::vector<ConfusionCounts>> counts = {{{1, 0, 0, 0}, {1, 1, 0, 0}, {0, 0, 1, 0}}};
    const auto rows = stratify_by_debris(counts, debris, {0.0, 1.0});
    EXPECT_EQ(rows[0].patch_count, 2u);
    EXPECT_EQ(rows[1].patch_count, 1u);
    EXPECT_DOUBLE_EQ(*rows[1].iou[0], 0.5);
}

TEST(Stratification, EmptyStratumHasNoValue) {
    std::vector<double> debris = {0.001, 0.002};
    std::vector<std::vector<ConfusionCounts>> counts = {{{1, 0, 0, 0}, {1, 0, 0, 0}}, {{1, 0, 0, 0}, {1, 0, 0, 0}}};
    const auto rows = stratify_by_debris(counts, debris);
    EXPECT_EQ(rows[4].patch_count, 0u);
    EXPECT_FALSE(rows[4].iou[0].has_value());
    EXPECT_FALSE(iou_difference_points(rows[4]).has_value());
    EXPECT_TRUE(to_json(rows[4])["iou"][0].is_null());
    EXPECT_THROW(stratify_by_debris({{{1, 0, 0, 0}}}, debris), ValidationError);
}
