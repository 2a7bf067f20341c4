#include <gtest/gtest.h>

#include <random>
#include <set>

#include "glacier/baselines.hpp"
#include "support.hpp"

using namespace glacier;
using namespace glacier::baselines;

namespace {

PatchPair random_pair(std::mt19937_64& g, std::size_t size, std::size_t channels, const std::string& id) {
    PatchPair pp;
    pp.patch.data = Tensor3<float>(channels, size, size);
    for (auto& v : pp.patch.data.storage()) v = std::uniform_real_distribution<float>(-1, 1)(g);
    for (std::size_t c = 0; c < channels; ++c) pp.patch.channels.push_back("C" + std::to_string(c));
    pp.patch.meta.patch_id = id;
    MaskGrid cls(size, size, 0);
    for (auto& v : cls.storage()) v = static_cast<std::uint8_t>(g() % 3);
    pp.mask = mask_patch_from_classes(cls);
    return pp;
}

PixelDataset table(const std::vector<std::vector<float>>& rows, const std::vector<std::uint8_t>& labels,
                   std::vector<std::string> names) {
    PixelDataset ds;
    ds.feature_names = std::move(names);
    ds.n_features = ds.feature_names.size();
    for (std::size_t i = 0; i < rows.size(); ++i) ds.push(rows[i].data(), labels[i]);
    return ds;
}

PixelDataset separable(std::uint64_t seed, std::size_t n) {
    std::mt19937_64 g(seed);
    std::vector<std::vector<float>> rows;
    std::vector<std::uint8_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
        const float a = std::uniform_real_distribution<float>(0, 1)(g), b = std::uniform_real_distribution<float>(0, 1)(g);
        rows.push_back({a, b});
        labels.push_back(a + b > 1.0f ? 2 : 0);
    }
    return table(rows, labels, {"x", "y"});
}

}  // namespace

TEST(SamplePixels, ExhaustiveCountsAndDeterminism) {
    std::mt19937_64 g(1);
    std::vector<PatchPair> pairs;
    for (int i = 0; i < 10; ++i) pairs.push_back(random_pair(g, 16, 3, "p" + std::to_string(i)));
    auto all = sample_pixels(pairs, 256, 0);
    ASSERT_EQ(all.rows(), 2560u);
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (std::size_t i = 0; i < all.rows(); ++i) seen.insert({all.row_patch[i], all.row_pixel[i]});
    EXPECT_EQ(seen.size(), 2560u);
    // Row features and labels come from the right pixel.
    for (std::size_t i = 0; i < all.rows(); i += 97) {
        const auto& pp = pairs[all.row_patch[i]];
        EXPECT_EQ(all.row(i)[2], pp.patch.data.plane(2)[all.row_pixel[i]]);
        EXPECT_EQ(all.labels[i], pp.mask.classes().storage()[all.row_pixel[i]]);
    }
    auto a = sample_pixels(pairs, 100, 5), b = sample_pixels(pairs, 100, 5), c = sample_pixels(pairs, 100, 6);
    EXPECT_EQ(a.rows(), 1000u);
    EXPECT_EQ(a.row_pixel, b.row_pixel);
    EXPECT_EQ(a.features, b.features);
    EXPECT_NE(a.row_pixel, c.row_pixel);
    const auto counts = a.class_counts();
    EXPECT_EQ(counts[0] + counts[1] + counts[2], 1000u);
    EXPECT_THROW(sample_pixels(std::vector<PatchPair>{}, 10, 0), ConfigError);
    pairs[0].patch.data.data()[0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(sample_pixels(pairs, 256, 0), ValidationError);
}

TEST(SamplePixels, FullSizePatchEveryPixelOnce) {
    std::mt19937_64 g(2);
    std::vector<PatchPair> pairs = {random_pair(g, 512, 1, "big")};
    auto ds = sample_pixels(pairs, 512 * 512, 3);
    ASSERT_EQ(ds.rows(), 512u * 512u);
    for (std::size_t i = 0; i < ds.rows(); ++i) ASSERT_EQ(ds.row_pixel[i], i);
}

TEST(RandomForest, SeparableTrainingAccuracyIsOne) {
    auto ds = separable(3, 500);
    auto m = fit_pixel_classifier(ds, PixelModelKind::random_forest);
    EXPECT_EQ(accuracy(m, ds), 1.0);
}

TEST(RandomForest, NoiseLabelsHeldOutNearChance) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 g(100 + seed);
        auto make = [&](std::size_t n) {
            std::vector<std::vector<float>> rows;
            std::vector<std::uint8_t> labels;
            for (std::size_t i = 0; i < n; ++i) {
                rows.push_back({std::uniform_real_distribution<float>(0, 1)(g), std::uniform_real_distribution<float>(0, 1)(g),
                                std::uniform_real_distribution<float>(0, 1)(g)});
                labels.push_back(i % 2 ? 1 : 0);
            }
            return table(rows, labels, {"a", "b", "c"});
        };
        auto train = make(1000), test = make(1000);
        PixelHyperparams h;
        h.seed = seed;
        h.n_trees = 50;
        auto m = fit_pixel_classifier(train, PixelModelKind::random_forest, h);
        const double acc = accuracy(m, test);
        EXPECT_GE(acc, 0.4) << seed;
        EXPECT_LE(acc, 0.6) << seed;
    }
}

TEST(RandomForest, DeterministicAndThreadIndependent) {
    auto ds = separable(4, 300);
    PixelHyperparams h;
    h.seed = 9;
    h.n_trees = 20;
    auto a = fit_pixel_classifier(ds, PixelModelKind::random_forest, h);
    auto b = fit_pixel_classifier(ds, PixelModelKind::random_forest, h);
    h.threads = 3;
    auto c = fit_pixel_classifier(ds, PixelModelKind::random_forest, h);
    auto probe = separable(5, 200);
    for (std::size_t i = 0; i < probe.rows(); ++i) {
        EXPECT_EQ(a.predict_proba(probe.row(i)), b.predict_proba(probe.row(i)));
        EXPECT_EQ(a.predict_proba(probe.row(i)), c.predict_proba(probe.row(i)));
    }
    EXPECT_EQ(a.importances, c.importances);
}

TEST(RandomForest, SingleClassIsTrainingError) {
    auto ds = table({{0.0f}, {1.0f}}, {1, 1}, {"a"});
    EXPECT_THROW(fit_pixel_classifier(ds, PixelModelKind::random_forest), TrainingError);
    EXPECT_THROW(fit_pixel_classifier(ds, PixelModelKind::gradient_boosting), TrainingError);
    EXPECT_THROW(fit_pixel_classifier(ds, PixelModelKind::mlp), TrainingError);
}

TEST(RandomForest, ImportancesFavourInformativeFeature) {
    std::mt19937_64 g(6);
    std::vector<std::vector<float>> rows;
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 1000; ++i) {
        const float e = std::uniform_real_distribution<float>(0, 1)(g);
        rows.push_back({std::uniform_real_distribution<float>(0, 1)(g), e, std::uniform_real_distribution<float>(0, 1)(g)});
        labels.push_back(e > 0.6f ? 1 : 0);
    }
    auto m = fit_pixel_classifier(table(rows, labels, {"B1", "ELEVATION", "B3"}), PixelModelKind::random_forest);
    auto rep = impurity_importance(m);
    EXPECT_NO_THROW(rep.validate());
    double s = 0.0;
    for (double v : rep.importance) {
        EXPECT_GE(v, 0.0);
        s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(rep.channels[rep.ordering()[0]], "ELEVATION");
    EXPECT_EQ(rep.to_csv().substr(0, 28), "channel,importance\nELEVATION");
    auto perm = permutation_importance(m, table(rows, labels, {"B1", "ELEVATION", "B3"}), 1);
    EXPECT_NO_THROW(perm.validate());
    EXPECT_EQ(perm.channels[perm.ordering()[0]], "ELEVATION");
}

TEST(SelectByImportance, StrictThreshold) {
    ImportanceReport r{{"B1", "B2", "NDSI", "SLOPE", "ELEVATION", "B3", "B4", "B5"},
                       {0.04, 0.04, 0.20, 0.25, 0.30, 0.04, 0.04, 0.09}};
    auto spec = select_by_importance(r);
    EXPECT_EQ(spec.members, (std::vector<std::string>{"ELEVATION", "SLOPE", "NDSI", "B5"}));

    ImportanceReport edge{{"A", "B", "C", "D"}, {0.05, 0.05, 0.45, 0.45}};
    EXPECT_EQ(select_by_importance(edge).members, (std::vector<std::string>{"C", "D"}));

    ImportanceReport flat;
    for (int i = 0; i < 20; ++i) flat.channels.push_back("F" + std::to_string(i)), flat.importance.push_back(1.0 / 20);
    EXPECT_THROW(select_by_importance(flat), ConfigError);

    ImportanceReport bad{{"A", "B"}, {0.7, 0.7}};
    EXPECT_THROW(select_by_importance(bad), ValidationError);
}

TEST(SelectByImportance, PublishedShapedExample) {
    // ELEVATION 0.30, SLOPE 0.25, NDSI 0.20, B2 0.04, rest <= 0.04.
    ImportanceReport r{{"ELEVATION", "SLOPE", "NDSI", "B2", "B1", "B3", "B4", "B5", "B6"},
                       {0.30, 0.25, 0.20, 0.04, 0.04, 0.04, 0.04, 0.04, 0.05}};
    EXPECT_EQ(select_by_importance(r).members, (std::vector<std::string>{"ELEVATION", "SLOPE", "NDSI"}));
}

TEST(PredictMask, ElevationThresholdMatchesOracle) {
    // Integer elevations with 20 rows per value; debris above 49.5.
    std::mt19937_64 g(7);
    std::vector<std::vector<float>> rows;
    std::vector<std::uint8_t> labels;
    for (int e = 0; e < 100; ++e)
        for (int r = 0; r < 20; ++r) {
            rows.push_back({static_cast<float>(e), std::uniform_real_distribution<float>(0, 1)(g)});
            labels.push_back(e > 49 ? 2 : 0);
        }
    PixelHyperparams h;
    h.rf_max_features = 2;
    h.n_trees = 10;
    auto m = fit_pixel_classifier(table(rows, labels, {"ELEVATION", "NOISE"}), PixelModelKind::random_forest, h);
    Patch p;
    p.channels = {"ELEVATION", "NOISE"};
    p.data = Tensor3<float>(2, 32, 32);
    for (std::size_t i = 0; i < 1024; ++i) {
        p.data.data()[i] = static_cast<float>(g() % 100);
        p.data.data()[1024 + i] = std::uniform_real_distribution<float>(0, 1)(g);
    }
    auto cls = predict_classes(m, p);
    for (std::size_t i = 0; i < 1024; ++i) ASSERT_EQ(cls.storage()[i], p.data.data()[i] > 49.5f ? 2 : 0) << i;
    auto mp = predict_mask(m, p);
    EXPECT_EQ(mp.classes().storage(), cls.storage());

    // Pointwise: predicting then cropping equals cropping then predicting.
    Patch crop;
    crop.channels = p.channels;
    crop.data = Tensor3<float>(2, 8, 8);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) crop.data(c, y, x) = p.data(c, 10 + y, 5 + x);
    auto cc = predict_classes(m, crop);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(cc(y, x), cls(10 + y, 5 + x));

    Patch constant = p;
    std::fill(constant.data.storage().begin(), constant.data.storage().end(), 3.0f);
    auto k = predict_classes(m, constant);
    EXPECT_TRUE(std::all_of(k.storage().begin(), k.storage().end(), [&](std::uint8_t v) { return v == k.storage()[0]; }));

    Patch wrong;
    wrong.data = Tensor3<float>(3, 4, 4);
    EXPECT_THROW(predict_classes(m, wrong), ConfigError);
    Patch swapped = p;
    swapped.channels = {"NOISE", "ELEVATION"};
    EXPECT_THROW(predict_classes(m, swapped), ConfigError);
}

TEST(PredictMask, FifteenChannelsIntoFourteenFeatureModel) {
    std::mt19937_64 g(8);
    std::vector<std::vector<float>> rows;
    std::vector<std::uint8_t> labels;
    std::vector<std::string> names;
    for (int j = 0; j < 14; ++j) names.push_back("F" + std::to_string(j));
    for (int i = 0; i < 50; ++i) {
        std::vector<float> r(14);
        for (auto& v : r) v = std::uniform_real_distribution<float>(0, 1)(g);
        rows.push_back(r);
        labels.push_back(static_cast<std::uint8_t>(i % 2));
    }
    PixelHyperparams h;
    h.n_trees = 3;
    auto m = fit_pixel_classifier(table(rows, labels, names), PixelModelKind::random_forest, h);
    Patch p;
    p.data = Tensor3<float>(15, 4, 4);
    EXPECT_THROW(predict_classes(m, p), ConfigError);
}

TEST(PredictMask, TiesGoToLowerClassCode) {
    PixelModel m;
    m.kind = PixelModelKind::random_forest;
    m.n_features = 1;
    m.classes = {0, 1, 2};
    Tree t;
    t.value_dim = 3;
    t.add_node();
    t.value = {0.4f, 0.4f, 0.2f};
    m.trees.push_back(t);
    float x = 0.0f;
    EXPECT_EQ(m.predict(&x), 0);
    m.trees[0].value = {0.2f, 0.4f, 0.4f};
    EXPECT_EQ(m.predict(&x), 1);
}

TEST(OtherClassifiers, LearnSeparableData) {
    auto train = separable(10, 1000), test = separable(11, 500);
    PixelHyperparams h;
    auto gbt = fit_pixel_classifier(train, PixelModelKind::gradient_boosting, h);
    EXPECT_GT(accuracy(gbt, test), 0.9);
    EXPECT_NO_THROW(impurity_importance(gbt).validate());
    auto mlp = fit_pixel_classifier(train, PixelModelKind::mlp, h);
    EXPECT_GT(accuracy(mlp, test), 0.9);
    EXPECT_THROW(impurity_importance(mlp), ConfigError);
    auto mlp2 = fit_pixel_classifier(train, PixelModelKind::mlp, h);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(mlp.predict_proba(test.row(i)), mlp2.predict_proba(test.row(i)));
}

TEST(Serialization, RoundTripAllKinds) {
    glacier::testing::TempDir dir;
    auto train = separable(12, 300), probe = separable(13, 100);
    PixelHyperparams h;
    h.n_trees = 10;
    h.gbt_rounds = 10;
    h.mlp_epochs = 5;
    for (auto kind : {PixelModelKind::random_forest, PixelModelKind::gradient_boosting, PixelModelKind::mlp}) {
        auto m = fit_pixel_classifier(train, kind, h);
        save_model(dir / (kind_name(kind) + ".glpx"), m);
        auto r = load_model(dir / (kind_name(kind) + ".glpx"));
        EXPECT_EQ(r.kind, kind);
        EXPECT_EQ(r.feature_names, m.feature_names);
        for (std::size_t i = 0; i < probe.rows(); ++i)
            ASSERT_EQ(r.predict_proba(probe.row(i)), m.predict_proba(probe.row(i))) << kind_name(kind);
    }
    auto bytes = encode_model(fit_pixel_classifier(train, PixelModelKind::random_forest, h));
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(decode_model(bytes), FormatError);
}
