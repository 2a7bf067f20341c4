#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/baselines.hpp"
#include "glacier/channels.hpp"
#include "glacier/error.hpp"
#include "glacier/experiments/synthetic.hpp"
#include "glacier/geodata/labels.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/pipeline/split.hpp"
#include "glacier/task.hpp"
#include "glacier/unet/train.hpp"

namespace glacier::experiments {

inline const std::vector<std::string> kRunModels = {"unet", "random_forest", "gradient_boosting", "mlp"};

struct RunSpec {
    std::string id;
    std::string model = "unet";
    ChannelSubsetSpec subset;
    TaskMode task = TaskMode::multiclass_3;
    unet::TrainConfig train;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"id", id},
                {"model", model},
                {"subset", {{"label", subset.label}, {"members", subset.members}}},
                {"task", task_name(task)},
                {"train", train.to_json()},
                {"seed", seed}};
    }
};

/// Where patches come from: the seeded synthetic generator, or a patch
/// manifest written by the pipeline.
struct DatasetSpec {
    std::optional<SyntheticConfig> synthetic;
    bool seed_from_run = true;  // synthetic scene seed follows the run seed unless pinned
    std::filesystem::path manifest;
    std::size_t patch_size = 64;
    std::size_t stride = 64;
    double min_glacier_fraction = 0.10;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"patch_size", patch_size}, {"stride", stride}, {"min_glacier_fraction", min_glacier_fraction}};
        if (synthetic) {
            j["synthetic"] = synthetic->to_json();
            if (seed_from_run) j["synthetic"].erase("seed");
        }
        if (!manifest.empty()) j["manifest"] = manifest.string();
        return j;
    }
};

struct ExperimentPlan {
    std::string id;
    DatasetSpec dataset;
    SplitFractions split;
    std::size_t max_train = 0, max_dev = 0, max_test = 0;  // 0 keeps the whole part
    std::string normalization = "global";                  // "global" (train-set statistics) or "patch"
    unet::UNetConfig model{3, 8, 1, 1, 0.3};
    baselines::PixelHyperparams pixel;
    std::size_t pixels_per_patch = 200;
    std::vector<RunSpec> runs;
    std::size_t workers = 1;
    bool rf_selected = false;  // channel selection: add the subset chosen by RF importance
    double rf_threshold = 0.05;
    std::filesystem::path output_dir;

    void validate() const {
        if (id.empty()) throw ValidationError("experiment plan needs an id");
        if (!dataset.synthetic && dataset.manifest.empty())
            throw ValidationError("plan '" + id + "' names neither a synthetic dataset nor a manifest");
        if (dataset.patch_size == 0 || dataset.stride == 0) throw ValidationError("patch size and stride must be positive");
        if (dataset.patch_size % model.divisor())
            throw ValidationError("patch size " + std::to_string(dataset.patch_size) + " is not divisible by " +
                                  std::to_string(model.divisor()));
        if (normalization != "global" && normalization != "patch")
            throw ValidationError("normalization must be 'global' or 'patch'");
        if (workers == 0) throw ValidationError("workers must be at least 1");
        std::set<std::string> ids;
        std::map<std::string, std::vector<std::string>> labels;
        for (const auto& r : runs) {
            if (r.id.empty()) throw ValidationError("run without an id");
            if (!ids.insert(r.id).second) throw ValidationError("duplicate run id '" + r.id + "'");
            if (std::find(kRunModels.begin(), kRunModels.end(), r.model) == kRunModels.end())
                throw ValidationError("run '" + r.id + "' has unknown model '" + r.model + "'");
            try {
                r.subset.validate();
                r.train.validate();
            } catch (const ConfigError& e) {
                throw ValidationError("run '" + r.id + "': " + e.what());
            }
            auto [it, fresh] = labels.emplace(r.subset.label, r.subset.members);
            if (!fresh && it->second != r.subset.members)
                throw ValidationError("subset label '" + r.subset.label + "' names two different channel lists");
            if (r.model != "unet" && r.task != TaskMode::multiclass_3 && r.task != TaskMode::binary_union)
                throw ValidationError("pixel baselines support multiclass_3 and binary_union only");
        }
    }

    std::set<std::uint64_t> seeds() const {
        std::set<std::uint64_t> s;
        for (const auto& r : runs) s.insert(r.seed);
        return s;
    }

    nlohmann::json to_json() const {
        nlohmann::json runs_json = nlohmann::json::array();
        for (const auto& r : runs) runs_json.push_back(r.to_json());
        return {{"id", id},
                {"dataset", dataset.to_json()},
                {"split", {{"train", split.train}, {"dev", split.dev}, {"test", split.test}}},
                {"max_train", max_train},
                {"max_dev", max_dev},
                {"max_test", max_test},
                {"normalization", normalization},
                {"model",
                 {{"depth", model.depth},
                  {"base_channels", model.base_channels},
                  {"spatial_dropout_rate", model.spatial_dropout_rate}}},
                {"pixel", pixel.to_json()},
                {"pixels_per_patch", pixels_per_patch},
                {"workers", workers},
                {"rf_selected", rf_selected},
                {"rf_threshold", rf_threshold},
                {"output_dir", output_dir.string()},
                {"runs", std::move(runs_json)}};
    }
};

namespace detail {

inline std::string default_run_id(const std::string& model, TaskMode task, const std::string& label, std::uint64_t seed) {
    return model + "_" + task_name(task) + "_" + label + "_s" + std::to_string(seed);
}

inline ChannelSubsetSpec subset_from_json(const nlohmann::json& s) {
    auto v = subsets_from_json(nlohmann::json::array({s}));
    return v.front();
}

}  // namespace detail

/// Parse a plan. Runs are listed explicitly under "runs", or generated as
/// the product of "grid": {"models", "tasks", "subsets", "seeds"}.
inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
    ExperimentPlan p;
    try {
        p.id = j.at("id").get<std::string>();
        const auto& d = j.at("dataset");
        if (d.contains("synthetic")) {
            p.dataset.synthetic = SyntheticConfig::from_json(d["synthetic"]);
            p.dataset.seed_from_run = !d["synthetic"].contains("seed");
        }
        p.dataset.manifest = d.value("manifest", std::string());
        p.dataset.patch_size = d.value("patch_size", p.dataset.patch_size);
        p.dataset.stride = d.value("stride", p.dataset.patch_size);
        p.dataset.min_glacier_fraction = d.value("min_glacier_fraction", p.dataset.min_glacier_fraction);
        if (j.contains("split")) {
            p.split.train = j["split"].value("train", p.split.train);
            p.split.dev = j["split"].value("dev", p.split.dev);
            p.split.test = j["split"].value("test", p.split.test);
        }
        p.max_train = j.value("max_train", p.max_train);
        p.max_dev = j.value("max_dev", p.max_dev);
        p.max_test = j.value("max_test", p.max_test);
        p.normalization = j.value("normalization", p.normalization);
        if (j.contains("model")) {
            p.model.depth = j["model"].value("depth", p.model.depth);
            p.model.base_channels = j["model"].value("base_channels", p.model.base_channels);
            p.model.spatial_dropout_rate = j["model"].value("spatial_dropout_rate", p.model.spatial_dropout_rate);
        }
        if (j.contains("pixel")) p.pixel = baselines::PixelHyperparams::from_json(j["pixel"]);
        p.pixels_per_patch = j.value("pixels_per_patch", p.pixels_per_patch);
        p.workers = j.value("workers", p.workers);
        p.rf_selected = j.value("rf_selected", p.rf_selected);
        p.rf_threshold = j.value("rf_threshold", p.rf_threshold);
        p.output_dir = j.value("output_dir", std::string());
        const nlohmann::json base_train = j.value("train", nlohmann::json::object());

        auto make_train = [&](const nlohmann::json& overrides, std::uint64_t seed) {
            nlohmann::json t = base_train;
            for (auto it = overrides.begin(); it != overrides.end(); ++it) t[it.key()] = it.value();
            if (!t.contains("seed")) t["seed"] = seed;
            return unet::TrainConfig::from_json(t);
        };
        if (j.contains("runs")) {
            for (const auto& r : j["runs"]) {
                RunSpec rs;
                rs.model = r.value("model", rs.model);
                rs.task = parse_task(r.value("task", task_name(rs.task)));
                rs.subset = detail::subset_from_json(r.at("subset"));
                rs.seed = r.value("seed", std::uint64_t{0});
                rs.train = make_train(r.value("train", nlohmann::json::object()), rs.seed);
                rs.id = r.value("id", detail::default_run_id(rs.model, rs.task, rs.subset.label, rs.seed));
                p.runs.push_back(std::move(rs));
            }
        }
        if (j.contains("grid")) {
            const auto& g = j["grid"];
            std::vector<ChannelSubsetSpec> subsets = subsets_from_json(g.at("subsets"));
            std::set<std::string> labels;
            for (const auto& s : subsets)
                if (!labels.insert(s.label).second) throw ValidationError("duplicate subset label '" + s.label + "'");
            const auto models = g.value("models", std::vector<std::string>{"unet"});
            const auto tasks = g.value("tasks", std::vector<std::string>{"multiclass_3"});
            const auto seeds = g.value("seeds", std::vector<std::uint64_t>{0});
            for (auto seed : seeds)
                for (const auto& model : models)
                    for (const auto& task : tasks)
                        for (const auto& s : subsets) {
                            RunSpec rs;
                            rs.model = model;
                            rs.task = parse_task(task);
                            rs.subset = s;
                            rs.seed = seed;
                            rs.train = make_train(nlohmann::json::object(), seed);
                            rs.id = detail::default_run_id(model, rs.task, s.label, seed);
                            p.runs.push_back(std::move(rs));
                        }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("experiment plan: ") + e.what());
    } catch (const ConfigError& e) {
        throw ValidationError(std::string("experiment plan: ") + e.what());
    }
    p.validate();
    return p;
}

inline ExperimentPlan load_plan(const std::filesystem::path& path) {
    return plan_from_json(glacier::detail::parse_json_text(glacier::detail::read_text(path), path.string()));
}

/// Canonical band-selection subsets for a registry with Landsat 7 band
/// names: true-colour {B3,B2,B1}, {B5,B4,B2} and all raw bands, each with
/// and without the spectral indices and with and without ELEVATION+SLOPE.
inline std::vector<ChannelSubsetSpec> canonical_subsets(const ChannelRegistry& registry) {
    const std::vector<std::string> indices = registry.names_of(ChannelDef::Kind::index);
    const std::vector<std::pair<std::string, std::vector<std::string>>> bases = {
        {"B5B4B2", {"B5", "B4", "B2"}}, {"B3B2B1", {"B3", "B2", "B1"}}, {"all_bands", registry.raw_bands()}};
    std::vector<ChannelSubsetSpec> out;
    for (const auto& [label, members] : bases)
        for (int with_idx = 0; with_idx < 2; ++with_idx)
            for (int with_terrain = 0; with_terrain < 2; ++with_terrain) {
                ChannelSubsetSpec s{label, members};
                if (with_idx) {
                    s.label += "+indices";
                    s.members.insert(s.members.end(), indices.begin(), indices.end());
                }
                if (with_terrain) {
                    s.label += "+terrain";
                    s.members.push_back("ELEVATION");
                    s.members.push_back("SLOPE");
                }
                out.push_back(std::move(s));
            }
    return out;
}

}  // namespace glacier::experiments
