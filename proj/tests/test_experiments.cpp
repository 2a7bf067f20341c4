#include <gtest/gtest.h>

#include <fstream>

#include "glacier/experiments/harness.hpp"
#include "glacier/experiments/plan.hpp"
#include "glacier/experiments/report.hpp"
#include "support.hpp"

using namespace glacier;
using namespace glacier::experiments;
using glacier::testing::TempDir;

namespace {

// Small scenes and a tiny network so a full plan runs in seconds.
nlohmann::json small_plan_json() {
    return {{"id", "small"},
            {"dataset",
             {{"synthetic", {{"tiles", 4}, {"tile_size", 256}, {"tiles_per_row", 2}}},
              {"patch_size", 32},
              {"min_glacier_fraction", 0.1}}},
            {"max_train", 16},
            {"max_dev", 4},
            {"max_test", 10},
            {"model", {{"depth", 2}, {"base_channels", 4}}},
            {"pixel", {{"n_trees", 5}}},
            {"pixels_per_patch", 50},
            {"train", {{"epochs", 1}, {"batch_size", 4}, {"learning_rate", 1e-3}}},
            {"grid",
             {{"models", {"unet"}},
              {"tasks", {"multiclass_3"}},
              {"subsets",
               {{{"label", "spectral"}, {"members", {"B2", "B4", "B5"}}},
                {{"label", "spectral+terrain"}, {"members", {"B2", "B4", "B5", "ELEVATION", "SLOPE"}}}}},
              {"seeds", {1}}}}};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

RunResult fake_result(const std::string& id, double iou_value, TaskMode task) {
    RunResult r;
    r.spec.id = id;
    r.spec.task = task;
    r.spec.subset = {"s,1", {"B2"}};
    r.spec.seed = 7;
    ConfusionCounts c{3, 1, 2, 10};
    r.report.rows.push_back(MetricRow::from("glacier", c));
    if (task != TaskMode::binary_union) {
        r.report.rows.push_back(MetricRow::from("clean_ice", {1, 1, 1, 1}));
        r.report.rows.push_back(MetricRow::from("debris", {1, 2, 3, 4}));
    }
    r.report.rows[0].iou.value = iou_value;
    r.checkpoints = {"runs/" + id + "/model.glpx"};
    return r;
}

}  // namespace

TEST(Plan, GridExpandsToRuns) {
    auto j = small_plan_json();
    j["grid"]["seeds"] = {1, 2};
    const ExperimentPlan p = plan_from_json(j);
    ASSERT_EQ(p.runs.size(), 4u);
    EXPECT_EQ(p.runs[0].id, "unet_multiclass_3_spectral_s1");
    EXPECT_EQ(p.runs[3].id, "unet_multiclass_3_spectral+terrain_s2");
    EXPECT_EQ(p.runs[3].train.seed, 2u);
    EXPECT_EQ(p.runs[3].train.epochs, 1u);
    EXPECT_EQ(p.seeds(), (std::set<std::uint64_t>{1, 2}));
    EXPECT_EQ(plan_from_json(p.to_json()).to_json(), p.to_json());
}

TEST(Plan, DuplicateSubsetLabelsRejected) {
    auto j = small_plan_json();
    j["grid"]["subsets"][1]["label"] = "spectral";
    EXPECT_THROW(plan_from_json(j), ValidationError);

    // The same label for two channel lists in explicit runs.
    auto k = small_plan_json();
    k.erase("grid");
    k["runs"] = {{{"id", "a"}, {"subset", {{"label", "x"}, {"members", {"B2"}}}}},
                 {{"id", "b"}, {"subset", {{"label", "x"}, {"members", {"B4"}}}}}};
    EXPECT_THROW(plan_from_json(k), ValidationError);
}

TEST(Plan, ChannelSelectionRejectsRepeatedSubsetPerSeed) {
    auto k = small_plan_json();
    k.erase("grid");
    k["runs"] = {{{"id", "a"}, {"subset", {{"label", "x"}, {"members", {"B2"}}}}},
                 {{"id", "b"}, {"subset", {{"label", "x"}, {"members", {"B2"}}}}}};
    EXPECT_THROW(run_channel_selection(plan_from_json(k)), ValidationError);
}

TEST(Plan, InvalidPlansRejected) {
    auto dup = small_plan_json();
    dup.erase("grid");
    dup["runs"] = {{{"id", "a"}, {"subset", {"B2"}}}, {{"id", "a"}, {"subset", {"B4"}}}};
    EXPECT_THROW(plan_from_json(dup), ValidationError);

    auto odd = small_plan_json();
    odd["dataset"]["patch_size"] = 30;
    EXPECT_THROW(plan_from_json(odd), ValidationError);

    auto model = small_plan_json();
    model["grid"]["models"] = {"svm"};
    EXPECT_THROW(plan_from_json(model), ValidationError);

    auto pixel_task = small_plan_json();
    pixel_task["grid"]["models"] = {"random_forest"};
    pixel_task["grid"]["tasks"] = {"binary_debris"};
    EXPECT_THROW(plan_from_json(pixel_task), ValidationError);

    auto no_data = small_plan_json();
    no_data["dataset"].erase("synthetic");
    EXPECT_THROW(plan_from_json(no_data), ValidationError);

    EXPECT_THROW(plan_from_json(nlohmann::json::object()), ValidationError);
}

TEST(Plan, LoadFromFileReportsMalformedJson) {
    TempDir dir;
    std::ofstream(dir / "p.json") << "{\"id\": \"x\", ";
    EXPECT_THROW(load_plan(dir / "p.json"), ParseError);
}

TEST(Plan, CanonicalSubsets) {
    ChannelRegistry reg = ChannelRegistry::landsat7();
    auto subsets = canonical_subsets(reg);
    ASSERT_EQ(subsets.size(), 12u);
    EXPECT_EQ(subsets[0].label, "B5B4B2");
    EXPECT_EQ(subsets[0].members, (std::vector<std::string>{"B5", "B4", "B2"}));
    EXPECT_EQ(subsets[1].label, "B5B4B2+terrain");
    EXPECT_EQ(subsets[1].members.back(), "SLOPE");
    EXPECT_EQ(subsets[3].label, "B5B4B2+indices+terrain");
    EXPECT_EQ(subsets[11].label, "all_bands+indices+terrain");
    std::set<std::string> labels;
    for (const auto& s : subsets) labels.insert(s.label);
    EXPECT_EQ(labels.size(), 12u);
}

TEST(Harness, SharedSplitAndCaps) {
    const ExperimentPlan p = plan_from_json(small_plan_json());
    const PatchSet set = build_patch_set(p.dataset, 1);
    ASSERT_GT(set.pairs.size(), 30u);
    for (const auto& pair : set.pairs)
        EXPECT_GE(pair.patch.meta.glacier_fraction_clean + pair.patch.meta.glacier_fraction_debris, 0.1);
    const SplitParts a = random_parts(set, p, 1), b = random_parts(set, p, 1);
    EXPECT_EQ(a.manifest, b.manifest);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.train.size(), 16u);
    EXPECT_EQ(a.dev.size(), 4u);
    EXPECT_EQ(a.test.size(), 10u);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    all.insert(a.dev.begin(), a.dev.end());
    all.insert(a.test.begin(), a.test.end());
    EXPECT_EQ(all.size(), 30u);
    EXPECT_TRUE(std::is_sorted(a.test.begin(), a.test.end()));
}

TEST(Harness, EndToEndReproducible) {
    TempDir d1, d2;
    auto j = small_plan_json();
    j["grid"]["models"] = {"unet", "random_forest"};
    ExperimentPlan p = plan_from_json(j);
    p.output_dir = d1.path();
    const auto r1 = run_plan(p);
    p.output_dir = d2.path();
    p.workers = 2;
    const auto r2 = run_plan(p);
    ASSERT_EQ(r1.size(), 4u);
    for (const auto& r : r1) {
        EXPECT_TRUE(r.ok()) << r.error;
        EXPECT_EQ(r.test_patches, 10u);
        EXPECT_EQ(r.checkpoints.size(), 1u);
        EXPECT_EQ(r.patch_union.size(), 10u);
    }
    for (const auto& f : {"split_s1.json", "runs/unet_multiclass_3_spectral_s1/history.csv",
                          "runs/unet_multiclass_3_spectral_s1/model.glpx",
                          "runs/random_forest_multiclass_3_spectral+terrain_s1/model.glpx",
                          "runs/random_forest_multiclass_3_spectral+terrain_s1/report.json"}) {
        ASSERT_TRUE(std::filesystem::exists(d1 / f)) << f;
        EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
    }
    // Reports differ only through the output directory embedded in paths.
    auto strip = [](std::vector<RunResult> rs) {
        for (auto& r : rs) r.histories.clear(), r.checkpoints.clear();
        return report_csv(rs);
    };
    EXPECT_EQ(strip(r1), strip(r2));
    EXPECT_TRUE(r1[2].importance.has_value());
}

TEST(Harness, FailedRunIsRecordedNotFatal) {
    auto j = small_plan_json();
    j["grid"]["subsets"].push_back({{"label", "missing"}, {"members", {"B7"}}});
    const auto results = run_plan(plan_from_json(j));
    ASSERT_EQ(results.size(), 3u);
    EXPECT_TRUE(results[0].ok());
    EXPECT_EQ(results[2].status, "failed");
    EXPECT_NE(results[2].error.find("B7"), std::string::npos);
    const auto rows = report_rows(results);
    EXPECT_TRUE(rows[2]["iou_glacier"].is_null());
}

TEST(Harness, ChannelSelectionAddsRfSubset) {
    auto j = small_plan_json();
    j["rf_selected"] = true;
    const auto res = run_channel_selection(plan_from_json(j));
    ASSERT_EQ(res.runs.size(), 3u);
    EXPECT_EQ(res.runs[2].spec.subset.label, "rf_selected");
    ASSERT_EQ(res.importance.count(1), 1u);
    EXPECT_EQ(res.importance.at(1).channels.size(), 5u);
    EXPECT_EQ(res.labels.back(), "rf_selected");
    EXPECT_EQ(res.wins("spectral+terrain", "spectral").second, 1u);
    EXPECT_NE(res.markdown().find("| spectral+terrain |"), std::string::npos);
}

TEST(Harness, TaskComparisonRowsAndStrata) {
    auto j = small_plan_json();
    j["grid"]["tasks"] = {"binary_union", "multiclass_3", "two_binaries"};
    j["grid"]["subsets"] = {{{"label", "all"}, {"members", {"B2", "B4", "B5", "ELEVATION", "SLOPE"}}}};
    j["max_test"] = 0;
    TempDir out;
    j["output_dir"] = out.path().string();
    const auto cmp = run_task_comparison(plan_from_json(j));
    ASSERT_EQ(cmp.rows.size(), 3u);
    for (const auto& r : cmp.runs) {
        ASSERT_TRUE(r.ok()) << r.error;
        for (double f : r.test_debris_fraction) EXPECT_GT(f, 0.0);
    }
    EXPECT_TRUE(cmp.rows[0].glacier.has_value());
    EXPECT_FALSE(cmp.rows[0].debris.has_value());
    EXPECT_TRUE(cmp.rows[1].debris.has_value());
    EXPECT_TRUE(cmp.rows[2].clean_ice.has_value());
    EXPECT_EQ(cmp.runs[2].checkpoints.size(), 2u);
    ASSERT_EQ(cmp.strata.count(1), 1u);
    EXPECT_EQ(cmp.strata.at(1).size(), 5u);
    EXPECT_DOUBLE_EQ(cmp.strata.at(1)[0].data_share, 1.0);
    // The >0% stratum is every test patch, so it equals the set-level IoU.
    EXPECT_DOUBLE_EQ(*cmp.strata.at(1)[0].iou[1], *cmp.runs[1].metric("glacier"));
    EXPECT_EQ(cmp.markdown().substr(0, 56), "| Model | IoU Glaciers | IoU Clean Ice | IoU Debris |\n|-");
}

TEST(Harness, TaskComparisonNeedsDebris) {
    auto j = small_plan_json();
    j["dataset"]["synthetic"]["debris_band"] = 0.0;
    EXPECT_THROW(run_task_comparison(plan_from_json(j)), ValidationError);
}

TEST(Harness, TwoBinariesCombination) {
    Tensor3<float> c(1, 1, 4), d(1, 1, 4);
    const float cv[] = {0.9f, 0.6f, 0.2f, 0.4f}, dv[] = {0.7f, 0.8f, 0.9f, 0.1f};
    std::copy(cv, cv + 4, c.data());
    std::copy(dv, dv + 4, d.data());
    const MaskGrid g = experiments::detail::combine_binaries(c, d);
    EXPECT_EQ(std::vector<std::uint8_t>(g.values().begin(), g.values().end()), (std::vector<std::uint8_t>{1, 2, 2, 0}));
}

TEST(Harness, GeoGeneralizationDeterministic) {
    auto j = small_plan_json();
    j["grid"]["subsets"] = {{{"label", "all"}, {"members", {"B2", "B4", "B5", "ELEVATION", "SLOPE"}}}};
    j["max_train"] = 12;
    j["max_test"] = 8;
    const ExperimentPlan p = plan_from_json(j);
    const auto a = run_geo_generalization(p, 3), b = run_geo_generalization(p, 3);
    ASSERT_EQ(a.rows.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(a.rows[k].manifest, b.rows[k].manifest);
        EXPECT_EQ(a.rows[k].manifest.method, "geographic");
        EXPECT_EQ(a.rows[k].status, "ok") << a.rows[k].error;
        EXPECT_TRUE(a.rows[k].train_iou && a.rows[k].dev_iou && a.rows[k].test_iou);
        EXPECT_EQ(a.rows[k].test_iou, b.rows[k].test_iou);
        std::size_t n = 0;
        for (auto v : a.rows[k].density.at("train")) n += v;
        EXPECT_EQ(n, a.rows[k].train_patches);
    }
    EXPECT_NE(a.rows[0].manifest.parameters, a.rows[1].manifest.parameters);
    EXPECT_EQ(a.to_json(), b.to_json());
}

TEST(Report, ThreeRunsCsvJsonAgree) {
    TempDir dir;
    std::vector<RunResult> rs = {fake_result("a", 0.1 + 0.2, TaskMode::multiclass_3),
                                 fake_result("b", 1.0 / 3.0, TaskMode::binary_union),
                                 fake_result("c", 0.0, TaskMode::multiclass_3)};
    rs[2].status = "failed";
    rs[2].error = "boom, \"quoted\"";
    const auto csv = emit_report(rs, "csv", dir.path());
    const auto json = emit_report(rs, "json", dir.path());
    const auto md = emit_report(rs, "markdown", dir.path());
    const std::string text = slurp(csv);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
    EXPECT_EQ(text.substr(0, text.find('\n')),
              "run_id,model,task,subset,seed,status,train_patches,dev_patches,test_patches,iou_glacier,"
              "precision_glacier,recall_glacier,iou_clean_ice,iou_debris,history,checkpoint,error");
    const auto from_csv = parse_report_csv(text);
    const auto from_json = nlohmann::json::parse(slurp(json)).at("rows");
    EXPECT_EQ(from_csv, from_json);
    EXPECT_EQ(from_json[0]["iou_glacier"].get<double>(), 0.1 + 0.2);
    EXPECT_TRUE(from_json[1]["iou_debris"].is_null());
    const std::string mdtext = slurp(md);
    EXPECT_EQ(std::count(mdtext.begin(), mdtext.end(), '\n'), 5);
    EXPECT_THROW(emit_report({}, "csv", dir.path()), ValidationError);
    EXPECT_THROW(emit_report(rs, "xml", dir.path()), ConfigError);
}

TEST(Report, IoErrorsSurface) {
    TempDir dir;
    std::ofstream(dir / "file") << "x";
    EXPECT_THROW(emit_report({fake_result("a", 0.5, TaskMode::multiclass_3)}, "csv", dir / "file"), std::exception);
}
