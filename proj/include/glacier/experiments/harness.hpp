#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/baselines.hpp"
#include "glacier/experiments/plan.hpp"
#include "glacier/experiments/synthetic.hpp"
#include "glacier/metrics.hpp"
#include "glacier/pipeline/manifest.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/pipeline/split.hpp"
#include "glacier/rng.hpp"
#include "glacier/unet/train.hpp"

namespace glacier::experiments {

// ---- datasets ----

/// All filtered patches of one dataset instance, in generation order.
struct PatchSet {
    std::vector<PatchPair> pairs;
    std::vector<std::string> channels;

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& p : pairs) out.push_back(p.patch.meta.patch_id);
        return out;
    }

    std::vector<GeoPoint> centroids() const {
        std::vector<GeoPoint> out;
        for (const auto& p : pairs) out.push_back({p.patch.meta.patch_id, p.patch.meta.centroid()});
        return out;
    }
};

inline bool keep_patch(const PatchMeta& m, double min_fraction) {
    return m.glacier_fraction_clean + m.glacier_fraction_debris >= min_fraction;
}

/// Dataset for one seed. Synthetic scenes are regenerated from the seed
/// (unless the plan pins the scene seed); manifests are loaded as written.
inline PatchSet build_patch_set(const DatasetSpec& d, std::uint64_t seed) {
    PatchSet s;
    if (d.synthetic) {
        SyntheticConfig cfg = *d.synthetic;
        if (d.seed_from_run) cfg.seed = seed;
        for (std::size_t t = 0; t < cfg.tiles; ++t) {
            SyntheticTile st = generate_tile(cfg, t);
            for (auto& p : slice_tile(st.tile, st.mask, d.patch_size, d.stride))
                if (keep_patch(p.patch.meta, d.min_glacier_fraction)) s.pairs.push_back(std::move(p));
        }
    } else {
        const Manifest m = load_manifest(d.manifest);
        for (const auto& e : m.entries) {
            PatchPair p = load_pair(e, d.manifest);
            if (p.patch.data.width() != d.patch_size || p.patch.data.height() != d.patch_size)
                throw ValidationError("patch '" + e.meta.patch_id + "' is not " + std::to_string(d.patch_size) +
                                      " pixels square");
            if (keep_patch(p.patch.meta, d.min_glacier_fraction)) s.pairs.push_back(std::move(p));
        }
    }
    if (s.pairs.empty()) throw ValidationError("dataset has no patches above the glacier-fraction filter");
    s.channels = s.pairs.front().patch.channels;
    for (const auto& p : s.pairs)
        if (p.patch.channels != s.channels)
            throw ValidationError("patch '" + p.patch.meta.patch_id + "' has a different channel list");
    return s;
}

/// Patches with both clean ice and debris present (the task-comparison protocol).
inline PatchSet both_classes_only(const PatchSet& s) {
    PatchSet out;
    out.channels = s.channels;
    for (const auto& p : s.pairs)
        if (p.patch.meta.glacier_fraction_clean > 0.0 && p.patch.meta.glacier_fraction_debris > 0.0)
            out.pairs.push_back(p);
    return out;
}

inline constexpr std::uint64_t kCapStream = 0x43415053ULL;

struct SplitParts {
    SplitManifest manifest;
    std::vector<std::size_t> train, dev, test;  // indices into PatchSet::pairs, ascending
};

/// Resolve a split manifest to patch indices and apply the per-part caps:
/// an over-full part keeps the first `max` of a shuffle drawn from
/// Rng::derive(seed, {kCapStream, part}), then returns to input order.
inline SplitParts resolve_split(const PatchSet& s, SplitManifest manifest, const ExperimentPlan& plan) {
    SplitParts out;
    for (std::size_t i = 0; i < s.pairs.size(); ++i) {
        auto it = manifest.assignment.find(s.pairs[i].patch.meta.patch_id);
        if (it == manifest.assignment.end())
            throw ValidationError("split does not assign patch '" + s.pairs[i].patch.meta.patch_id + "'");
        (it->second == SplitPart::train ? out.train : it->second == SplitPart::dev ? out.dev : out.test).push_back(i);
    }
    auto cap = [&](std::vector<std::size_t>& v, std::size_t max, std::uint64_t part) {
        if (max == 0 || v.size() <= max) return;
        Rng::derive(manifest.seed, {kCapStream, part}).shuffle(std::span<std::size_t>(v));
        v.resize(max);
        std::sort(v.begin(), v.end());
    };
    cap(out.train, plan.max_train, 0);
    cap(out.dev, plan.max_dev, 1);
    cap(out.test, plan.max_test, 2);
    out.manifest = std::move(manifest);
    return out;
}

/// Shared random split for every run with this seed.
inline SplitParts random_parts(const PatchSet& s, const ExperimentPlan& plan, std::uint64_t seed) {
    return resolve_split(s, random_split(s.ids(), plan.split, seed), plan);
}

// ---- runs ----

struct RunResult {
    RunSpec spec;
    std::string status = "ok";  // ok | failed | skipped
    std::string error;
    EvalReport report;                       // test set
    std::map<std::string, MetricRow> parts;  // union row per part when requested
    std::vector<std::string> test_ids;
    std::vector<double> test_debris_fraction;
    std::vector<ConfusionCounts> patch_union;          // glacier plane per test patch
    std::vector<ConfusionCounts> patch_debris;         // debris plane per test patch (class-aware models)
    std::vector<ConfusionCounts> patch_debris_region;  // predicted glacier vs true debris, clean-ice pixels excluded
    std::optional<baselines::ImportanceReport> importance;
    std::vector<std::string> histories, checkpoints;
    std::size_t train_patches = 0, dev_patches = 0, test_patches = 0;
    double seconds = 0.0;

    bool ok() const { return status == "ok"; }

    std::optional<double> metric(const std::string& row) const {
        if (!ok()) return std::nullopt;
        for (const auto& r : report.rows)
            if (r.name == row) return r.iou.value;
        return std::nullopt;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"spec", spec.to_json()},
                            {"status", status},
                            {"error", error},
                            {"histories", histories},
                            {"checkpoints", checkpoints},
                            {"train_patches", train_patches},
                            {"dev_patches", dev_patches},
                            {"test_patches", test_patches}};
        if (ok()) j["report"] = report.to_json();
        for (const auto& [k, r] : parts) j["parts"][k] = glacier::to_json(r);
        if (importance) j["importance"] = importance->to_json();
        return j;
    }
};

namespace detail {

inline Patch subset_patch(const Patch& p, const std::vector<std::size_t>& idx) {
    Patch out;
    out.meta = p.meta;
    out.data = Tensor3<float>(idx.size(), p.data.height(), p.data.width());
    for (std::size_t c = 0; c < idx.size(); ++c) {
        auto src = p.data.plane(idx[c]);
        std::copy(src.begin(), src.end(), out.data.plane(c).begin());
        out.channels.push_back(p.channels[idx[c]]);
    }
    return out;
}

inline std::vector<std::size_t> channel_positions(const std::vector<std::string>& available,
                                                  const ChannelSubsetSpec& subset) {
    std::vector<std::size_t> idx;
    for (const auto& m : subset.members) {
        auto it = std::find(available.begin(), available.end(), m);
        if (it == available.end())
            throw ValidationError("channel '" + m + "' of subset '" + subset.label + "' is not in the dataset");
        idx.push_back(static_cast<std::size_t>(it - available.begin()));
    }
    return idx;
}

/// Subset patches of one part, imputed but not normalized.
inline std::vector<Patch> part_patches(const PatchSet& s, const std::vector<std::size_t>& part,
                                       const std::vector<std::size_t>& idx) {
    std::vector<Patch> out;
    out.reserve(part.size());
    for (std::size_t i : part) out.push_back(impute_nan(subset_patch(s.pairs[i].patch, idx)));
    return out;
}

inline std::filesystem::path run_dir(const ExperimentPlan& plan, const RunSpec& r) {
    return plan.output_dir / "runs" / r.id;
}

/// Two binary heads to class codes: each head votes at p >= 0.5 and the
/// larger probability wins when both vote.
inline MaskGrid combine_binaries(const Tensor3<float>& clean, const Tensor3<float>& debris) {
    MaskGrid g(clean.width(), clean.height(), 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const float c = clean.data()[i], d = debris.data()[i];
        const bool vc = c >= 0.5f, vd = d >= 0.5f;
        g.storage()[i] = vc && vd ? (d > c ? 2 : 1) : vc ? 1 : vd ? 2 : 0;
    }
    return g;
}

struct TrainedUnet {
    unet::ModelParams<float> params;
    std::vector<unet::EpochRecord> history;
};

inline TrainedUnet train_unet(const ExperimentPlan& plan, const RunSpec& run, TaskMode task,
                              const std::vector<Patch>& train, const std::vector<Patch>& dev,
                              const std::vector<MaskGrid>& train_cls, const std::vector<MaskGrid>& dev_cls) {
    auto samples = [&](const std::vector<Patch>& ps, const std::vector<MaskGrid>& cls) {
        std::vector<unet::Sample<float>> out;
        out.reserve(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({ps[i].data, task_target(cls[i], task)});
        return out;
    };
    unet::UNetConfig cfg = plan.model;
    cfg.in_channels = run.subset.members.size();
    cfg.out_classes = task_classes(task);
    auto fit = unet::fit(unet::build_unet(cfg, run.seed), samples(train, train_cls), samples(dev, dev_cls), run.train);
    return {std::move(fit.params), std::move(fit.history)};
}

inline void save_unet(const ExperimentPlan& plan, const RunSpec& run, const std::string& suffix, TaskMode task,
                      const TrainedUnet& m, const NormalizeConfig& norm, RunResult& res) {
    if (plan.output_dir.empty()) return;
    const auto dir = run_dir(plan, run);
    const auto hist = dir / ("history" + suffix + ".csv");
    write_text(hist, unet::history_csv(m.history));
    unet::CheckpointInfo info;
    info.epoch = m.history.empty() ? 0 : m.history.back().epoch;
    nlohmann::json stats = nlohmann::json::array();
    for (const auto& s : norm.global) stats.push_back({s.mean, s.std});
    info.extra = {{"run_id", run.id},     {"task", task_name(task)},       {"channels", run.subset.members},
                  {"subset", run.subset.label}, {"normalization", plan.normalization}, {"global_stats", stats}};
    const auto ckpt = dir / ("model" + suffix + ".glpx");
    unet::save_checkpoint(ckpt, m.params, info);
    res.histories.push_back(hist.string());
    res.checkpoints.push_back(ckpt.string());
}

inline void tally_patches(RunResult& res, const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& truths,
                          bool class_aware) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto p = preds[i].values(), t = truths[i].values();
        ConfusionCounts u, d, r;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const bool pg = p[k] != 0, tg = t[k] != 0, pd = p[k] == 2, td = t[k] == 2;
            u.tp += pg && tg, u.fp += pg && !tg, u.fn += !pg && tg, u.tn += !pg && !tg;
            d.tp += pd && td, d.fp += pd && !td, d.fn += !pd && td, d.tn += !pd && !td;
            if (t[k] != 1) r.tp += pg && td, r.fp += pg && !td, r.fn += !pg && td, r.tn += !pg && !td;
        }
        res.patch_union.push_back(u);
        if (class_aware) res.patch_debris.push_back(d);
        res.patch_debris_region.push_back(r);
    }
}

}  // namespace detail

/// Train and evaluate one run on a resolved split. Errors are captured in
/// the result rather than thrown.
inline RunResult execute_run(const RunSpec& run, const ExperimentPlan& plan, const PatchSet& set,
                             const SplitParts& parts, bool evaluate_all_parts = false) {
    RunResult res;
    res.spec = run;
    res.train_patches = parts.train.size();
    res.dev_patches = parts.dev.size();
    res.test_patches = parts.test.size();
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (parts.train.empty()) throw ValidationError("run '" + run.id + "' has an empty training part");
        if (parts.test.empty()) throw ValidationError("run '" + run.id + "' has an empty test part");
        const auto idx = detail::channel_positions(set.channels, run.subset);
        std::vector<Patch> train = detail::part_patches(set, parts.train, idx);
        std::vector<Patch> dev = detail::part_patches(set, parts.dev, idx);
        std::vector<Patch> test = detail::part_patches(set, parts.test, idx);
        auto classes_of = [&](const std::vector<std::size_t>& part) {
            std::vector<MaskGrid> out;
            for (std::size_t i : part) out.push_back(set.pairs[i].mask.classes());
            return out;
        };
        const auto train_cls = classes_of(parts.train), dev_cls = classes_of(parts.dev), test_cls = classes_of(parts.test);
        for (std::size_t i : parts.test) {
            res.test_ids.push_back(set.pairs[i].patch.meta.patch_id);
            res.test_debris_fraction.push_back(set.pairs[i].patch.meta.glacier_fraction_debris);
        }
        const bool binary = run.task == TaskMode::binary_union;
        const bool class_aware = run.task == TaskMode::multiclass_3 || run.task == TaskMode::two_binaries;
        std::function<std::vector<MaskGrid>(const std::vector<Patch>&)> predict;

        if (run.model == "unet") {
            NormalizeConfig norm;
            if (plan.normalization == "global") {
                std::vector<const Patch*> ptrs;
                for (const auto& p : train) ptrs.push_back(&p);
                norm.use_global_stats = true;
                norm.global = global_stats(ptrs);
            }
            for (auto* part : {&train, &dev, &test})
                for (auto& p : *part) p = normalize_patch(std::move(p), norm);
            if (run.task == TaskMode::two_binaries) {
                auto clean = detail::train_unet(plan, run, TaskMode::binary_clean, train, dev, train_cls, dev_cls);
                detail::save_unet(plan, run, "_clean", TaskMode::binary_clean, clean, norm, res);
                auto debris = detail::train_unet(plan, run, TaskMode::binary_debris, train, dev, train_cls, dev_cls);
                detail::save_unet(plan, run, "_debris", TaskMode::binary_debris, debris, norm, res);
                predict = [c = std::move(clean.params), d = std::move(debris.params)](const std::vector<Patch>& ps) {
                    std::vector<MaskGrid> out;
                    for (const auto& p : ps) out.push_back(detail::combine_binaries(unet::forward(c, p.data), unet::forward(d, p.data)));
                    return out;
                };
            } else {
                auto m = detail::train_unet(plan, run, run.task, train, dev, train_cls, dev_cls);
                detail::save_unet(plan, run, "", run.task, m, norm, res);
                predict = [p = std::move(m.params), task = run.task](const std::vector<Patch>& ps) {
                    std::vector<MaskGrid> out;
                    for (const auto& x : ps) out.push_back(unet::task_classes(unet::forward(p, x.data), task));
                    return out;
                };
            }
        } else {
            std::vector<const Patch*> pp;
            std::vector<const MaskPatch*> mp;
            for (std::size_t k = 0; k < train.size(); ++k) pp.push_back(&train[k]), mp.push_back(&set.pairs[parts.train[k]].mask);
            auto ds = baselines::sample_pixels(pp, mp, plan.pixels_per_patch, run.seed);
            if (binary)
                for (auto& l : ds.labels) l = l != 0;
            auto hyper = plan.pixel;
            hyper.seed = run.seed;
            auto model = baselines::fit_pixel_classifier(ds, baselines::parse_kind(run.model), hyper);
            if (model.kind != baselines::PixelModelKind::mlp) res.importance = baselines::impurity_importance(model);
            if (!plan.output_dir.empty()) {
                const auto path = detail::run_dir(plan, run) / "model.glpx";
                std::filesystem::create_directories(path.parent_path());
                baselines::save_model(path, model);
                res.checkpoints.push_back(path.string());
            }
            predict = [m = std::move(model)](const std::vector<Patch>& ps) {
                std::vector<MaskGrid> out;
                for (const auto& p : ps) out.push_back(baselines::predict_classes(m, p));
                return out;
            };
        }

        const auto preds = predict(test);
        res.report = evaluate_classes(preds, test_cls, binary);
        detail::tally_patches(res, preds, test_cls, class_aware);
        if (evaluate_all_parts) {
            res.parts["test"] = res.report.row("glacier");
            res.parts["train"] = evaluate_classes(predict(train), train_cls, true).row("glacier");
            if (!dev.empty()) res.parts["dev"] = evaluate_classes(predict(dev), dev_cls, true).row("glacier");
        }
        for (const auto& r : res.report.rows)
            if (!std::isfinite(r.iou.value)) throw TrainingError("run '" + run.id + "' produced a non-finite metric");
        if (!plan.output_dir.empty())
            write_text(detail::run_dir(plan, run) / "report.json", res.report.to_json().dump(2) + "\n");
    } catch (const std::exception& e) {
        res.status = "failed";
        res.error = e.what();
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// Run `jobs` on a pool of `workers` threads; results keep the job order.
template <class Job>
std::vector<RunResult> run_pool(const std::vector<Job>& jobs, std::size_t workers) {
    std::vector<RunResult> out(jobs.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next++) < jobs.size();) out[i] = jobs[i]();
    };
    const std::size_t n = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(jobs.size(), 1));
    if (n == 1) {
        work();
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    return out;
}

using ProgressFn = std::function<void(const RunResult&)>;

/// Every run of a plan grouped by seed: one dataset and one shared random
/// split per seed, runs within a seed on the worker pool.
inline std::vector<RunResult> run_plan(const ExperimentPlan& plan, const std::vector<RunSpec>& runs,
                                       const std::function<PatchSet(const PatchSet&)>& filter = {},
                                       const ProgressFn& progress = {}) {
    std::vector<RunResult> out(runs.size());
    std::set<std::uint64_t> seeds;
    for (const auto& r : runs) seeds.insert(r.seed);
    for (auto seed : seeds) {
        PatchSet set = build_patch_set(plan.dataset, seed);
        if (filter) set = filter(set);
        if (set.pairs.empty()) throw ValidationError("no patches left after filtering for seed " + std::to_string(seed));
        const SplitParts parts = random_parts(set, plan, seed);
        if (!plan.output_dir.empty())
            write_text(plan.output_dir / ("split_s" + std::to_string(seed) + ".json"), parts.manifest.to_json().dump(2) + "\n");
        std::vector<std::size_t> which;
        std::vector<std::function<RunResult()>> jobs;
        for (std::size_t i = 0; i < runs.size(); ++i)
            if (runs[i].seed == seed) {
                which.push_back(i);
                jobs.push_back([&, i] { return execute_run(runs[i], plan, set, parts); });
            }
        auto done = run_pool(jobs, plan.workers);
        for (std::size_t k = 0; k < which.size(); ++k) {
            if (progress) progress(done[k]);
            out[which[k]] = std::move(done[k]);
        }
    }
    return out;
}

inline std::vector<RunResult> run_plan(const ExperimentPlan& plan) { return run_plan(plan, plan.runs); }

// ---- channel selection ----

/// RF impurity importances over every dataset channel, fitted on pixels of
/// the training part.
inline baselines::ImportanceReport rf_importance(const ExperimentPlan& plan, const PatchSet& set,
                                                 const SplitParts& parts, std::uint64_t seed) {
    std::vector<std::size_t> all(set.channels.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<Patch> train = detail::part_patches(set, parts.train, all);
    std::vector<const Patch*> pp;
    std::vector<const MaskPatch*> mp;
    for (std::size_t k = 0; k < train.size(); ++k) pp.push_back(&train[k]), mp.push_back(&set.pairs[parts.train[k]].mask);
    auto hyper = plan.pixel;
    hyper.seed = seed;
    auto model = baselines::fit_pixel_classifier(baselines::sample_pixels(pp, mp, plan.pixels_per_patch, seed),
                                                 baselines::PixelModelKind::random_forest, hyper);
    return baselines::impurity_importance(model);
}

struct ChannelSelectionResult {
    std::vector<RunResult> runs;
    std::map<std::uint64_t, baselines::ImportanceReport> importance;
    std::vector<std::string> labels;  // first-seen order
    std::vector<std::uint64_t> seeds;

    /// Set-level glacier IoU of a subset for one seed, if that run succeeded.
    std::optional<double> iou(const std::string& label, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.spec.subset.label == label && r.spec.seed == seed) return r.metric("glacier");
        return std::nullopt;
    }

    /// Seeds where `with` beats `without`, out of seeds where both ran.
    std::pair<std::size_t, std::size_t> wins(const std::string& with, const std::string& without) const {
        std::size_t w = 0, n = 0;
        for (auto s : seeds) {
            auto a = iou(with, s), b = iou(without, s);
            if (a && b) ++n, w += *a > *b;
        }
        return {w, n};
    }

    std::string markdown() const {
        std::ostringstream os;
        os << "| Subset |";
        for (auto s : seeds) os << " IoU seed " << s << " |";
        os << " Mean IoU |\n|---|";
        for (std::size_t i = 0; i < seeds.size(); ++i) os << "---|";
        os << "---|\n";
        for (const auto& l : labels) {
            os << "| " << l << " |";
            double sum = 0.0;
            std::size_t n = 0;
            for (auto s : seeds) {
                auto v = iou(l, s);
                os << " " << (v ? glacier::detail::fmt(*v) : std::string("failed")) << " |";
                if (v) sum += *v, ++n;
            }
            os << " " << (n ? glacier::detail::fmt(sum / static_cast<double>(n)) : std::string()) << " |\n";
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"labels", labels}, {"seeds", seeds}, {"runs", nlohmann::json::array()}};
        for (const auto& r : runs) j["runs"].push_back(r.to_json());
        for (const auto& [s, rep] : importance) j["importance"][std::to_string(s)] = rep.to_json();
        return j;
    }
};

/// One trained model per subset and seed. With `rf_selected` the plan gains,
/// per seed, a U-Net run on the channels whose RF importance exceeds
/// `rf_threshold`.
inline ChannelSelectionResult run_channel_selection(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    ChannelSelectionResult out;
    std::set<std::pair<std::string, std::uint64_t>> keys;
    for (const auto& r : plan.runs)
        if (!keys.insert({r.subset.label + "/" + r.model + "/" + task_name(r.task), r.seed}).second)
            throw ValidationError("duplicate subset label '" + r.subset.label + "' for seed " + std::to_string(r.seed));
    for (const auto& r : plan.runs)
        if (std::find(out.labels.begin(), out.labels.end(), r.subset.label) == out.labels.end())
            out.labels.push_back(r.subset.label);
    for (auto s : plan.seeds()) out.seeds.push_back(s);

    std::vector<RunSpec> runs = plan.runs;
    if (plan.rf_selected) {
        const TaskMode task = plan.runs.empty() ? TaskMode::multiclass_3 : plan.runs.front().task;
        for (auto seed : out.seeds) {
            PatchSet set = build_patch_set(plan.dataset, seed);
            const SplitParts parts = random_parts(set, plan, seed);
            auto rep = rf_importance(plan, set, parts, seed);
            out.importance.emplace(seed, rep);
            RunSpec rs;
            rs.model = "unet";
            rs.task = task;
            rs.seed = seed;
            rs.subset = baselines::select_by_importance(rep, plan.rf_threshold);
            rs.train = plan.runs.empty() ? unet::TrainConfig{} : plan.runs.front().train;
            rs.train.seed = seed;
            rs.id = detail::default_run_id(rs.model, task, rs.subset.label, seed);
            runs.push_back(std::move(rs));
        }
        out.labels.push_back("rf_selected");
    }
    out.runs = run_plan(plan, runs, {}, progress);
    return out;
}

// ---- task definition ----

struct TaskRow {
    std::string task;
    std::uint64_t seed = 0;
    std::optional<double> glacier, clean_ice, debris;
};

struct TaskComparison {
    std::vector<RunResult> runs;
    std::vector<TaskRow> rows;
    std::vector<std::uint64_t> seeds;
    /// Per seed: union-IoU strata, columns (binary_union, multiclass_3).
    std::map<std::uint64_t, std::vector<StratumRow>> strata;
    /// Per seed: debris strata, columns (binary_union debris-region IoU, multiclass_3 debris IoU).
    std::map<std::uint64_t, std::vector<StratumRow>> debris_strata;

    const RunResult* find(const std::string& task, std::uint64_t seed, const std::string& model = "unet") const {
        for (const auto& r : runs)
            if (task_name(r.spec.task) == task && r.spec.seed == seed && r.spec.model == model) return &r;
        return nullptr;
    }

    /// Mean over seeds of each task's IoUs, in the layout
    /// Model | IoU Glaciers | IoU Clean Ice | IoU Debris.
    std::string markdown() const {
        std::ostringstream os;
        os << "| Model | IoU Glaciers | IoU Clean Ice | IoU Debris |\n|---|---|---|---|\n";
        std::vector<std::string> order;
        for (const auto& r : rows)
            if (std::find(order.begin(), order.end(), r.task) == order.end()) order.push_back(r.task);
        auto mean = [&](const std::string& t, auto field) -> std::string {
            double s = 0.0;
            std::size_t n = 0;
            for (const auto& r : rows)
                if (r.task == t && (r.*field)) s += *(r.*field), ++n;
            return n ? glacier::detail::fmt(s / static_cast<double>(n), 3) : "";
        };
        for (const auto& t : order)
            os << "| " << t << " | " << mean(t, &TaskRow::glacier) << " | " << mean(t, &TaskRow::clean_ice) << " | "
               << mean(t, &TaskRow::debris) << " |\n";
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"seeds", seeds}, {"rows", nlohmann::json::array()}, {"runs", nlohmann::json::array()}};
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        for (const auto& r : rows)
            j["rows"].push_back({{"task", r.task},
                                 {"seed", r.seed},
                                 {"iou_glacier", opt(r.glacier)},
                                 {"iou_clean_ice", opt(r.clean_ice)},
                                 {"iou_debris", opt(r.debris)}});
        for (const auto& r : runs) j["runs"].push_back(r.to_json());
        for (const auto& [s, rows] : strata)
            for (const auto& r : rows) j["strata"][std::to_string(s)].push_back(glacier::to_json(r));
        for (const auto& [s, rows] : debris_strata)
            for (const auto& r : rows) j["debris_strata"][std::to_string(s)].push_back(glacier::to_json(r));
        return j;
    }
};

/// Binary-union, multiclass and two-binaries models on patches holding
/// both clean ice and debris, with debris-fraction strata on the test part.
inline TaskComparison run_task_comparison(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    TaskComparison out;
    for (auto s : plan.seeds()) out.seeds.push_back(s);
    std::vector<RunSpec> runs = plan.runs;
    for (const auto& r : runs)
        if (r.task != TaskMode::binary_union && r.task != TaskMode::multiclass_3 && r.task != TaskMode::two_binaries)
            throw ValidationError("task comparison takes binary_union, multiclass_3 and two_binaries runs, not " +
                                  task_name(r.task));
    auto filter = [](const PatchSet& s) {
        bool any_debris = false;
        for (const auto& p : s.pairs) any_debris |= p.patch.meta.glacier_fraction_debris > 0.0;
        if (!any_debris) throw ValidationError("task comparison needs debris labels; the dataset has none");
        return both_classes_only(s);
    };
    out.runs = run_plan(plan, runs, filter, progress);
    for (const auto& r : out.runs)
        out.rows.push_back({task_name(r.spec.task) + (r.spec.model == "unet" ? "" : " (" + r.spec.model + ")"),
                            r.spec.seed, r.metric("glacier"), r.metric("clean_ice"), r.metric("debris")});
    for (auto s : out.seeds) {
        const RunResult* b = out.find("binary_union", s);
        const RunResult* m = out.find("multiclass_3", s);
        if (!b || !m || !b->ok() || !m->ok()) continue;
        out.strata[s] = stratify_by_debris({b->patch_union, m->patch_union}, b->test_debris_fraction);
        out.debris_strata[s] = stratify_by_debris({b->patch_debris_region, m->patch_debris}, b->test_debris_fraction);
    }
    return out;
}

// ---- geographic generalization ----

struct GeoRow {
    std::size_t split = 0;
    std::string run_id;
    std::uint64_t seed = 0;
    std::string status = "ok";
    std::string error;
    std::optional<double> train_iou, dev_iou, test_iou;
    std::size_t train_patches = 0, dev_patches = 0, test_patches = 0;
    SplitManifest manifest;
    std::map<std::string, std::vector<std::size_t>> density;  // per part: glacier-fraction histogram, 10 bins
};

constexpr std::size_t kDensityBins = 10;

inline std::vector<std::size_t> fraction_histogram(const PatchSet& s, const std::vector<std::size_t>& part) {
    std::vector<std::size_t> h(kDensityBins, 0);
    for (std::size_t i : part) {
        const auto& m = s.pairs[i].patch.meta;
        const double f = std::clamp(m.glacier_fraction_clean + m.glacier_fraction_debris, 0.0, 1.0);
        ++h[std::min(kDensityBins - 1, static_cast<std::size_t>(f * kDensityBins))];
    }
    return h;
}

struct GeoResult {
    std::vector<GeoRow> rows;

    std::string markdown() const {
        std::ostringstream os;
        os << "| Split | Run | Train IoU | Dev IoU | Test IoU | Train patches | Test patches | Status |\n"
              "|---|---|---|---|---|---|---|---|\n";
        for (const auto& r : rows)
            os << "| " << r.split << " | " << r.run_id << " | " << glacier::detail::opt_fmt(r.train_iou) << " | "
               << glacier::detail::opt_fmt(r.dev_iou) << " | " << glacier::detail::opt_fmt(r.test_iou) << " | "
               << r.train_patches << " | " << r.test_patches << " | " << r.status << " |\n";
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        for (const auto& r : rows)
            j.push_back({{"split", r.split},
                         {"run_id", r.run_id},
                         {"seed", r.seed},
                         {"status", r.status},
                         {"error", r.error},
                         {"train_iou", opt(r.train_iou)},
                         {"dev_iou", opt(r.dev_iou)},
                         {"test_iou", opt(r.test_iou)},
                         {"train_patches", r.train_patches},
                         {"dev_patches", r.dev_patches},
                         {"test_patches", r.test_patches},
                         {"density", r.density},
                         {"split_parameters", r.manifest.parameters}});
        return j;
    }
};

/// For each run and each split k in [0, n_splits): geographic split seeded
/// with k, train, and report train/dev/test union IoU plus per-part
/// glacier-fraction histograms.
inline GeoResult run_geo_generalization(const ExperimentPlan& plan, std::size_t n_splits,
                                        const ProgressFn& progress = {}) {
    plan.validate();
    if (n_splits == 0) throw ValidationError("n_splits must be at least 1");
    GeoResult out;
    for (auto seed : plan.seeds()) {
        const PatchSet set = build_patch_set(plan.dataset, seed);
        const auto points = set.centroids();
        for (std::size_t k = 0; k < n_splits; ++k) {
            SplitParts parts;
            try {
                parts = resolve_split(set, geographic_split(points, 0.8, 0.1, k), plan);
            } catch (const ConfigError& e) {
                for (const auto& r : plan.runs)
                    if (r.seed == seed) {
                        GeoRow row;
                        row.split = k;
                        row.run_id = r.id + "_geo" + std::to_string(k);
                        row.seed = seed;
                        row.status = "skipped";
                        row.error = e.what();
                        out.rows.push_back(std::move(row));
                    }
                continue;
            }
            if (!plan.output_dir.empty())
                write_text(plan.output_dir / ("geo_split_s" + std::to_string(seed) + "_k" + std::to_string(k) + ".json"),
                           parts.manifest.to_json().dump(2) + "\n");
            std::vector<std::function<RunResult()>> jobs;
            for (const auto& r : plan.runs)
                if (r.seed == seed) {
                    RunSpec rs = r;
                    rs.id += "_geo" + std::to_string(k);
                    jobs.push_back([&plan, &set, &parts, rs] { return execute_run(rs, plan, set, parts, true); });
                }
            auto done = run_pool(jobs, plan.workers);
            for (const auto& res : done) {
                if (progress) progress(res);
                GeoRow row;
                row.split = k;
                row.run_id = res.spec.id;
                row.seed = seed;
                row.manifest = parts.manifest;
                row.train_patches = parts.train.size();
                row.dev_patches = parts.dev.size();
                row.test_patches = parts.test.size();
                row.density["train"] = fraction_histogram(set, parts.train);
                row.density["dev"] = fraction_histogram(set, parts.dev);
                row.density["test"] = fraction_histogram(set, parts.test);
                if (parts.test.empty()) {
                    row.status = "skipped";
                    row.error = "empty test region";
                } else if (!res.ok()) {
                    row.status = "failed";
                    row.error = res.error;
                } else {
                    auto get = [&](const char* p) -> std::optional<double> {
                        auto it = res.parts.find(p);
                        return it == res.parts.end() ? std::nullopt : std::optional<double>(it->second.iou.value);
                    };
                    row.train_iou = get("train");
                    row.dev_iou = get("dev");
                    row.test_iou = get("test");
                }
                out.rows.push_back(std::move(row));
            }
        }
    }
    return out;
}

}  // namespace glacier::experiments
