// glacier: one subcommand per pipeline stage. Each command validates its
// inputs first, prints a one-line JSON summary on stdout, and reports
// failures as one JSON object on stderr (exit 1; usage errors exit 2).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "glacier/baselines.hpp"
#include "glacier/channels.hpp"
#include "glacier/experiments/harness.hpp"
#include "glacier/experiments/report.hpp"
#include "glacier/geodata/labels.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/metrics.hpp"
#include "glacier/pipeline.hpp"
#include "glacier/unet/predict.hpp"
#include "glacier/unet/train.hpp"
#include "glacier/vectorize.hpp"
#include "glacier/server/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace glacier;

namespace {

struct Globals {
    bool dry_run = false;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

void summary(const std::string& command, const Globals& g, json body) {
    body["command"] = command;
    body["dry_run"] = g.dry_run;
    std::cout << body.dump() << std::endl;
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw IoError(what + " '" + p.string() + "' does not exist");
}

/// Path of `rel` (relative to `from_dir`) re-expressed relative to `to_dir`.
std::string rebase(const std::string& rel, const fs::path& from_dir, const fs::path& to_dir) {
    const fs::path abs = fs::absolute(from_dir / rel).lexically_normal();
    return abs.lexically_relative(fs::absolute(to_dir).lexically_normal()).string();
}

Manifest rebased(Manifest m, const fs::path& from, const fs::path& to_dir) {
    for (auto& e : m.entries) {
        e.patch_file = rebase(e.patch_file, from.parent_path(), to_dir);
        e.mask_file = rebase(e.mask_file, from.parent_path(), to_dir);
    }
    return m;
}

std::set<GlacierKind> parse_kinds(const std::string& s) {
    std::set<GlacierKind> out;
    for (const auto& k : split_list(s)) {
        if (k == "clean_ice") out.insert(GlacierKind::clean_ice);
        else if (k == "debris") out.insert(GlacierKind::debris);
        else throw ValidationError("unknown glacier class '" + k + "' (clean_ice, debris)");
    }
    return out;
}

// ---- models on disk ----

/// Either a U-Net checkpoint or a pixel classifier, with what is needed to
/// turn a patch into class codes.
struct AnyModel {
    std::string name;
    std::string kind;  // unet | random_forest | gradient_boosting | mlp
    TaskMode task = TaskMode::multiclass_3;
    std::vector<std::string> channels;
    std::optional<unet::ModelParams<float>> unet;
    NormalizeConfig normalize;
    std::optional<baselines::PixelModel> pixel;

    MaskGrid classify(Patch p) const {
        if (unet) {
            p = preprocess_patch(std::move(p), normalize);
            return unet::task_classes(unet::forward(*unet, p.data), task);
        }
        return baselines::predict_classes(*pixel, impute_nan(std::move(p)));
    }
};

AnyModel load_any_model(const fs::path& path) {
    require_file(path, "checkpoint");
    AnyModel m;
    m.name = path.stem().string();
    try {
        auto lm = server::load_model(m.name, path);
        m.kind = "unet";
        m.task = lm.task;
        m.channels = lm.channels;
        m.normalize = lm.normalize;
        m.unet = std::move(lm.params);
        return m;
    } catch (const FormatError&) {
        // not a U-Net checkpoint; try a pixel model below
    }
    m.pixel = baselines::load_model(path);
    m.kind = baselines::kind_name(m.pixel->kind);
    m.channels = m.pixel->feature_names;
    const bool binary = m.pixel->classes.size() <= 2 &&
                        std::none_of(m.pixel->classes.begin(), m.pixel->classes.end(), [](auto c) { return c == 2; });
    m.task = binary ? TaskMode::binary_union : TaskMode::multiclass_3;
    return m;
}

Patch select(const Patch& p, const std::vector<std::string>& names) {
    ChannelSubsetSpec spec{"cli", names};
    return experiments::detail::subset_patch(p, experiments::detail::channel_positions(p.channels, spec));
}

std::vector<const ManifestEntry*> manifest_part(const Manifest& m, const std::string& part) {
    std::vector<const ManifestEntry*> out;
    if (part == "all") {
        for (const auto& e : m.entries) out.push_back(&e);
        return out;
    }
    if (!m.split) throw ValidationError("manifest has no split; run 'glacier split' first or pass --split all");
    return m.part(parse_split(part));
}

// ---- subcommands ----

struct IngestArgs {
    std::string tile, labels, boundary, elevation, out = ".", channels, indices, preview;
};

void cmd_ingest(const IngestArgs& a, const Globals& g) {
    require_file(a.tile, "tile");
    RasterTile tile = load_tile(a.tile, split_list(a.channels));
    tile.validate();
    if (!a.indices.empty()) tile = add_indices(tile, split_list(a.indices));
    if (!a.elevation.empty()) {
        require_file(a.elevation, "elevation");
        RasterTile e = load_tile(a.elevation);
        if (e.channels.size() != 1) throw ValidationError("elevation raster must have exactly one band");
        const ChannelGrid& elev = *e.channels[0].grid;
        tile = attach_terrain(tile, elev, slope_from_elevation(elev, std::abs(tile.transform.pixel_width)));
    }
    std::optional<MaskGrid> mask;
    if (!a.labels.empty()) {
        require_file(a.labels, "labels");
        mask = rasterize_labels(load_labels(a.labels), tile.transform, tile.width, tile.height);
    }
    if (!a.boundary.empty()) {
        require_file(a.boundary, "boundary");
        auto [t, m] = crop_to_boundary(tile, mask ? *mask : MaskGrid(tile.width, tile.height, 0), load_boundary(a.boundary));
        tile = std::move(t);
        if (mask) mask = std::move(m);
    }
    std::vector<std::string> pv = split_list(a.preview);
    if (pv.empty()) {
        pv = {"B5", "B4", "B2"};
        if (!std::all_of(pv.begin(), pv.end(), [&](const auto& n) { return tile.has_channel(n); })) {
            auto names = tile.channel_names();
            pv.assign(names.begin(), names.begin() + std::min<std::size_t>(3, names.size()));
            while (pv.size() < 3) pv.push_back(pv.back());
        }
    }
    if (pv.size() != 3) throw ValidationError("--preview needs exactly three channel names");
    const std::array<std::string, 3> triplet = {pv[0], pv[1], pv[2]};
    for (const auto& n : triplet)
        if (!tile.has_channel(n)) throw ValidationError("tile has no preview channel '" + n + "'");
    const fs::path out = a.out;
    if (!g.dry_run) {
        fs::create_directories(out);
        write_tile(tile, out / "tile.tif");
        if (mask) write_mask(*mask, tile.transform, out / "mask.tif");
        render_preview(tile, triplet, out / "preview.png");
    }
    summary("ingest", g,
            {{"tile", (out / "tile.tif").string()},
             {"mask", mask ? json((out / "mask.tif").string()) : json(nullptr)},
             {"preview", (out / "preview.png").string()},
             {"width", tile.width},
             {"height", tile.height},
             {"channels", tile.channel_names()}});
}

void cmd_rasterize(const std::string& labels, const std::string& tile_path, const std::string& channels,
                   const std::string& out, const Globals& g) {
    require_file(labels, "labels");
    require_file(tile_path, "tile");
    RasterTile tile = load_tile(tile_path, split_list(channels));
    MaskGrid mask = rasterize_labels(load_labels(labels), tile.transform, tile.width, tile.height);
    std::size_t clean = 0, debris = 0;
    for (auto v : mask.values()) clean += v == 1, debris += v == 2;
    if (!g.dry_run) {
        fs::create_directories(out);
        write_mask(mask, tile.transform, fs::path(out) / "mask.tif");
    }
    summary("rasterize", g, {{"mask", (fs::path(out) / "mask.tif").string()}, {"clean_ice_pixels", clean}, {"debris_pixels", debris}});
}

struct SliceArgs {
    std::string tile, labels, mask, channels, out = ".";
    std::size_t size = 512, stride = 0;
};

void cmd_slice(const SliceArgs& a, const Globals& g) {
    require_file(a.tile, "tile");
    if (a.labels.empty() == a.mask.empty()) throw ValidationError("pass exactly one of --labels or --mask");
    RasterTile tile = load_tile(a.tile, split_list(a.channels));
    MaskGrid mask;
    if (!a.labels.empty()) {
        require_file(a.labels, "labels");
        mask = rasterize_labels(load_labels(a.labels), tile.transform, tile.width, tile.height);
    } else {
        require_file(a.mask, "mask");
        auto [m, t] = load_mask(a.mask);
        if (m.width() != tile.width || m.height() != tile.height || t.origin_x != tile.transform.origin_x ||
            t.origin_y != tile.transform.origin_y || t.pixel_width != tile.transform.pixel_width ||
            t.pixel_height != tile.transform.pixel_height)
            throw ValidationError("mask and tile are not aligned");
        mask = std::move(m);
    }
    const std::size_t stride = a.stride ? a.stride : a.size;
    auto pairs = slice_tile(tile, mask, a.size, stride);
    if (pairs.empty())
        throw ValidationError("no " + std::to_string(a.size) + " px patch fits in a " + std::to_string(tile.width) + "x" +
                              std::to_string(tile.height) + " tile");
    const fs::path out = a.out, manifest = out / "manifest.geojson";
    if (fs::exists(manifest)) {
        const auto existing = load_manifest(manifest);
        for (const auto& p : pairs)
            for (const auto& e : existing.entries)
                if (e.meta.patch_id == p.patch.meta.patch_id)
                    throw ValidationError("manifest already has patch '" + e.meta.patch_id + "'");
    }
    if (!g.dry_run) {
        fs::create_directories(out);
        ManifestWriter w(manifest);
        for (const auto& p : pairs) w.add(p, out / "patches");
    }
    summary("slice", g, {{"manifest", manifest.string()}, {"patches", pairs.size()}, {"patch_size", a.size}, {"stride", stride}});
}

void cmd_filter(const std::string& manifest_path, double min_fraction, const std::string& classes, const std::string& out,
                const Globals& g) {
    require_file(manifest_path, "manifest");
    FilterConfig cfg;
    cfg.min_glacier_fraction = min_fraction;
    cfg.classes_counted = parse_kinds(classes);
    cfg.validate();
    Manifest m = load_manifest(manifest_path);
    Manifest kept;
    for (const auto& e : m.entries)
        if (counted_fraction(e.meta, cfg.classes_counted) >= cfg.min_glacier_fraction) kept.entries.push_back(e);
    kept = rebased(std::move(kept), manifest_path, out);
    if (!g.dry_run) {
        fs::create_directories(out);
        save_manifest(kept, fs::path(out) / "manifest.geojson");
    }
    summary("filter", g, {{"manifest", (fs::path(out) / "manifest.geojson").string()}, {"input", m.entries.size()}, {"kept", kept.entries.size()}});
}

struct SplitArgs {
    std::string manifest, method = "random", out = ".";
    double train = 0.7, dev = 0.1, test = 0.2;
    double ball_fraction = 0.8, dev_fraction = 0.1;
};

void cmd_split(const SplitArgs& a, const Globals& g) {
    require_file(a.manifest, "manifest");
    Manifest m = load_manifest(a.manifest);
    if (m.entries.empty()) throw ValidationError("manifest has no patches");
    const std::uint64_t seed = g.seed.value_or(0);
    SplitManifest s;
    if (a.method == "random") {
        SplitFractions f;
        f.train = a.train, f.dev = a.dev, f.test = a.test;
        s = random_split(m.ids(), f, seed);
    } else if (a.method == "geographic") {
        s = geographic_split(m.centroids(), a.ball_fraction, a.dev_fraction, seed);
    } else {
        throw ValidationError("unknown split method '" + a.method + "' (random, geographic)");
    }
    m.apply(s);
    m = rebased(std::move(m), a.manifest, a.out);
    if (!g.dry_run) {
        fs::create_directories(a.out);
        save_manifest(m, fs::path(a.out) / "manifest.geojson");
        write_text(fs::path(a.out) / "split.json", s.to_json().dump(1) + "\n");
    }
    summary("split", g,
            {{"manifest", (fs::path(a.out) / "manifest.geojson").string()},
             {"method", a.method},
             {"seed", seed},
             {"train", s.count(SplitPart::train)},
             {"dev", s.count(SplitPart::dev)},
             {"test", s.count(SplitPart::test)},
             {"unused", s.count(SplitPart::unused)}});
}

struct TrainArgs {
    std::string manifest, task = "multiclass_3", config, channels, model = "unet", out = ".";
};

void cmd_train(const TrainArgs& a, const Globals& g) {
    require_file(a.manifest, "manifest");
    const TaskMode task = parse_task(a.task);
    if (task == TaskMode::two_binaries)
        throw ValidationError("train the two heads separately with --task binary_clean and --task binary_debris");
    if (a.model != "unet" && task != TaskMode::multiclass_3 && task != TaskMode::binary_union)
        throw ValidationError("pixel baselines support multiclass_3 and binary_union only");
    json cfg = json::object();
    if (!a.config.empty()) {
        require_file(a.config, "train config");
        cfg = glacier::detail::parse_json_text(glacier::detail::read_text(a.config), a.config);
        if (!cfg.is_object()) throw ValidationError("train config must be a JSON object");
    }
    json tj = cfg.value("train", json::object());
    if (g.seed) tj["seed"] = *g.seed;
    tj["threads"] = g.jobs;
    unet::TrainConfig tc;
    try {
        tc = unet::TrainConfig::from_json(tj);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("train config: ") + e.what());
    }
    const std::string normalization = cfg.value("normalization", std::string("global"));
    if (normalization != "global" && normalization != "patch") throw ValidationError("normalization must be 'global' or 'patch'");

    const Manifest m = load_manifest(a.manifest);
    const auto train_e = manifest_part(m, "train"), dev_e = manifest_part(m, "dev");
    if (train_e.empty()) throw ValidationError("manifest has no training patches");
    std::vector<PatchPair> train, dev;
    for (auto* e : train_e) train.push_back(load_pair(*e, a.manifest));
    for (auto* e : dev_e) dev.push_back(load_pair(*e, a.manifest));
    std::vector<std::string> channels = split_list(a.channels);
    if (channels.empty()) channels = cfg.value("channels", train.front().patch.channels);
    auto prepare = [&](std::vector<PatchPair>& v) {
        std::vector<Patch> out;
        for (auto& p : v) out.push_back(impute_nan(select(p.patch, channels)));
        return out;
    };
    std::vector<Patch> xt = prepare(train), xd = prepare(dev);

    const fs::path out = a.out;
    json result = {{"task", task_name(task)}, {"model", a.model}, {"channels", channels}, {"train_patches", xt.size()},
                   {"dev_patches", xd.size()}, {"checkpoint", (out / "model.glpx").string()}};
    if (a.model == "unet") {
        unet::UNetConfig mc;
        const json mj = cfg.value("model", json::object());
        mc.depth = mj.value("depth", mc.depth);
        mc.base_channels = mj.value("base_channels", mc.base_channels);
        mc.spatial_dropout_rate = mj.value("spatial_dropout_rate", mc.spatial_dropout_rate);
        mc.in_channels = channels.size();
        mc.out_classes = task_classes(task);
        mc.validate();
        for (const auto& p : xt)
            if (p.data.width() % mc.divisor() || p.data.height() % mc.divisor())
                throw ValidationError("patch size " + std::to_string(p.data.width()) + " is not divisible by " +
                                      std::to_string(mc.divisor()) + " for depth " + std::to_string(mc.depth));
        result["history"] = (out / "history.csv").string();
        if (g.dry_run) return summary("train", g, result);

        NormalizeConfig norm;
        if (normalization == "global") {
            std::vector<const Patch*> ptrs;
            for (const auto& p : xt) ptrs.push_back(&p);
            norm.use_global_stats = true;
            norm.global = global_stats(ptrs);
        }
        auto samples = [&](const std::vector<Patch>& xs, const std::vector<PatchPair>& ps) {
            std::vector<unet::Sample<float>> s;
            for (std::size_t i = 0; i < xs.size(); ++i)
                s.push_back({normalize_patch(xs[i], norm).data, task_target(ps[i].mask.classes(), task)});
            return s;
        };
        auto fit = unet::fit(unet::build_unet(mc, tc.seed), samples(xt, train), samples(xd, dev), tc);
        unet::CheckpointInfo info;
        info.epoch = fit.best_epoch;
        info.metrics = {{"best_dev_iou", fit.best_dev_iou}};
        json stats = json::array();
        for (const auto& s : norm.global) stats.push_back({s.mean, s.std});
        info.extra = {{"task", task_name(task)}, {"channels", channels}, {"normalization", normalization},
                      {"global_stats", stats}, {"train", tc.to_json()}};
        fs::create_directories(out);
        unet::save_checkpoint(out / "model.glpx", fit.params, info);
        write_text(out / "history.csv", unet::history_csv(fit.history));
        result["best_epoch"] = fit.best_epoch;
        return summary("train", g, result);
    }
    baselines::PixelHyperparams hyper = baselines::PixelHyperparams::from_json(cfg.value("pixel", json::object()));
    hyper.seed = tc.seed;
    const std::size_t per_patch = cfg.value("pixels_per_patch", std::size_t{200});
    if (g.dry_run) return summary("train", g, result);
    std::vector<const Patch*> pp;
    std::vector<const MaskPatch*> mp;
    for (std::size_t i = 0; i < xt.size(); ++i) pp.push_back(&xt[i]), mp.push_back(&train[i].mask);
    auto ds = baselines::sample_pixels(pp, mp, per_patch, tc.seed);
    if (task == TaskMode::binary_union)
        for (auto& l : ds.labels) l = l != 0;
    auto model = baselines::fit_pixel_classifier(ds, baselines::parse_kind(a.model), hyper);
    fs::create_directories(out);
    baselines::save_model(out / "model.glpx", model);
    summary("train", g, result);
}

struct EvalArgs {
    std::string manifest, split = "test", names, out = ".";
    std::vector<std::string> checkpoints;
    bool stratify = false;
};

void cmd_eval(const EvalArgs& a, const Globals& g) {
    require_file(a.manifest, "manifest");
    if (a.checkpoints.empty()) throw ValidationError("pass at least one --checkpoint");
    std::vector<AnyModel> models;
    for (const auto& c : a.checkpoints) models.push_back(load_any_model(c));
    const auto names = split_list(a.names);
    if (!names.empty() && names.size() != models.size())
        throw ValidationError("--names lists " + std::to_string(names.size()) + " names for " +
                              std::to_string(models.size()) + " checkpoints");
    for (std::size_t i = 0; i < names.size(); ++i) models[i].name = names[i];
    const Manifest m = load_manifest(a.manifest);
    const auto entries = manifest_part(m, a.split);
    if (entries.empty()) throw ValidationError("split part '" + a.split + "' is empty");
    if (g.dry_run) {
        json ms = json::array();
        for (const auto& md : models) ms.push_back({{"name", md.name}, {"kind", md.kind}, {"task", task_name(md.task)}});
        return summary("eval", g, {{"patches", entries.size()}, {"models", ms}});
    }

    std::vector<MaskGrid> truths;
    std::vector<double> debris;
    std::vector<Patch> patches;
    for (auto* e : entries) {
        PatchPair p = load_pair(*e, a.manifest);
        truths.push_back(p.mask.classes());
        debris.push_back(e->meta.glacier_fraction_debris);
        patches.push_back(std::move(p.patch));
    }
    json report = {{"split", a.split}, {"patches", entries.size()}, {"models", json::array()}};
    std::ostringstream csv;
    csv << "model,class,tp,fp,fn,tn,iou,precision,recall\n";
    std::vector<std::vector<ConfusionCounts>> union_counts;
    std::vector<std::string> model_names;
    for (const auto& md : models) {
        std::vector<MaskGrid> preds;
        for (const auto& p : patches) preds.push_back(md.classify(select(p, md.channels)));
        const EvalReport r = evaluate_classes(preds, truths, md.task == TaskMode::binary_union);
        std::vector<ConfusionCounts> per;
        for (std::size_t i = 0; i < preds.size(); ++i)
            per.push_back(confusion_counts(glacier_plane(preds[i]), glacier_plane(truths[i])));
        union_counts.push_back(std::move(per));
        model_names.push_back(md.name);
        report["models"].push_back({{"name", md.name}, {"kind", md.kind}, {"task", task_name(md.task)}, {"report", r.to_json()}});
        for (const auto& row : r.rows)
            csv << md.name << "," << row.name << "," << row.counts.tp << "," << row.counts.fp << "," << row.counts.fn << ","
                << row.counts.tn << "," << experiments::detail::exact(row.iou.value) << ","
                << experiments::detail::exact(row.precision.value) << "," << experiments::detail::exact(row.recall.value)
                << "\n";
    }
    const fs::path out = a.out;
    fs::create_directories(out);
    json body = {{"report", (out / "report.json").string()}};
    if (a.stratify) {
        const auto rows = stratify_by_debris(union_counts, debris);
        report["stratification"] = json::array();
        for (const auto& r : rows) report["stratification"].push_back(glacier::to_json(r));
        write_text(out / "stratification.md", stratification_table(rows, model_names, true));
        write_text(out / "stratification.csv", stratification_table(rows, model_names, false));
        body["stratification"] = (out / "stratification.md").string();
    }
    write_text(out / "report.json", report.dump(2) + "\n");
    write_text(out / "report.csv", csv.str());
    summary("eval", g, body);
}

struct PredictArgs {
    std::string tile, checkpoint, channels, out = ".";
    std::size_t window = 512, overlap = 64;
};

void cmd_predict(const PredictArgs& a, const Globals& g) {
    require_file(a.tile, "tile");
    AnyModel md = load_any_model(a.checkpoint);
    RasterTile tile = load_tile(a.tile, split_list(a.channels));
    for (const auto& c : md.channels)
        if (!tile.has_channel(c)) throw ValidationError("tile has no channel '" + c + "' needed by the model");
    unet::PredictConfig pc{a.window, a.overlap, true, md.normalize};
    if (md.unet) {
        try {
            pc.validate(md.unet->config);
        } catch (const ConfigError& e) {
            throw ValidationError(e.what());
        }
    }
    const fs::path out = a.out;
    json body = {{"classes", (out / "classes.tif").string()}, {"confidence", (out / "confidence.tif").string()},
                 {"width", tile.width}, {"height", tile.height}};
    if (g.dry_run) return summary("predict", g, body);
    MaskGrid classes;
    Grid<float> conf(tile.width, tile.height, 1.0f);
    if (md.unet) {
        const Tensor3<float> probs = unet::predict_tile(*md.unet, tile, md.channels, pc);
        classes = unet::task_classes(probs, md.task);
        conf = server::detail::class_confidence(probs, classes);
    } else {
        Patch p;
        p.data = unet::stack_tensor(tile, md.channels);
        p.channels = md.channels;
        classes = md.classify(std::move(p));
    }
    RasterTile ct;
    ct.id = tile.id + "_confidence";
    ct.width = tile.width;
    ct.height = tile.height;
    ct.transform = tile.transform;
    ct.nodata_mask = Grid<std::uint8_t>(tile.width, tile.height, 0);
    ct.channels.push_back({"confidence", std::make_shared<const ChannelGrid>(std::move(conf))});
    fs::create_directories(out);
    write_mask(classes, tile.transform, out / "classes.tif");
    write_tile(ct, out / "confidence.tif");
    summary("predict", g, body);
}

void cmd_polygonize(const std::string& mask_path, const std::string& conf_path, std::size_t min_area, double simplify_tol,
                    const std::string& model_id, const std::string& out, const Globals& g) {
    require_file(mask_path, "mask");
    auto [mask, t] = load_mask(mask_path);
    std::optional<Grid<float>> conf;
    if (!conf_path.empty()) {
        require_file(conf_path, "confidence raster");
        RasterTile c = load_tile(conf_path);
        if (c.channels.size() != 1 || c.width != mask.width() || c.height != mask.height())
            throw ValidationError("confidence raster must be one band matching the mask");
        conf = *c.channels[0].grid;
    }
    if (!(simplify_tol >= 0)) throw ValidationError("--simplify must be >= 0");
    PolygonSet ps = simplify(polygonize(mask, t, min_area, conf ? &*conf : nullptr), simplify_tol);
    ps.model_id = model_id;
    const fs::path path = fs::path(out) / "polygons.geojson";
    if (!g.dry_run) {
        fs::create_directories(out);
        write_text(path, to_geojson(ps) + "\n");
    }
    summary("polygonize", g, {{"polygons", path.string()}, {"features", ps.features.size()}, {"vertices", ps.vertex_count()}});
}

struct ServeArgs {
    std::string config, data_dir, checkpoint, tile_channels, token, preview, static_dir;
    std::vector<std::string> tiles;
    int port = -1;
    std::size_t workers = 0;
};

void cmd_serve(const ServeArgs& a, const Globals& g) {
    server::ServerConfig cfg;
    if (!a.config.empty()) {
        require_file(a.config, "server config");
        cfg = server::ServerConfig::from_json(glacier::detail::parse_json_text(glacier::detail::read_text(a.config), a.config));
    }
    cfg.apply_env();
    if (a.port >= 0) cfg.port = a.port;
    if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
    if (!a.checkpoint.empty()) cfg.models["default"] = a.checkpoint;
    for (const auto& t : a.tiles) cfg.tiles.emplace_back(t);
    if (!a.tile_channels.empty()) cfg.tile_channels = split_list(a.tile_channels);
    if (!a.token.empty()) cfg.token = a.token;
    if (!a.static_dir.empty()) cfg.static_dir = a.static_dir;
    if (!a.preview.empty()) {
        auto v = split_list(a.preview);
        if (v.size() != 3) throw ValidationError("--preview needs exactly three channel names");
        cfg.preview_channels = {v[0], v[1], v[2]};
    }
    if (a.workers) cfg.workers = a.workers;
    cfg.validate();
    for (const auto& t : cfg.tiles) require_file(t, "tile");
    for (const auto& [id, p] : cfg.models) require_file(p, "checkpoint for model '" + id + "'");
    server::Resources res = server::load_resources(cfg);
    const server::TilePyramid pyramid(&res.tiles, cfg.preview_channels, 1);
    json body = {{"port", cfg.port}, {"data_dir", cfg.data_dir.string()}, {"tiles", res.tiles.size()},
                 {"models", res.models.size()}, {"max_zoom", pyramid.max_zoom()}};
    if (g.dry_run) return summary("serve", g, body);
    server::Server srv(cfg, std::move(res));
    summary("serve", g, body);
    srv.run();
}

struct ExperimentArgs {
    std::string plan, out = ".", study = "runs", format = "all";
    std::size_t geo_splits = 3;
};

void cmd_experiment(const ExperimentArgs& a, const Globals& g) {
    require_file(a.plan, "plan");
    if (g.seed) throw ValidationError("experiment seeds come from the plan; drop --seed");
    experiments::ExperimentPlan plan = experiments::load_plan(a.plan);
    plan.output_dir = a.out;
    plan.workers = g.jobs;
    const std::set<std::string> studies = {"runs", "channel_selection", "task_comparison", "geo"};
    if (!studies.count(a.study)) throw ValidationError("unknown study '" + a.study + "'");
    const std::set<std::string> formats = {"all", "csv", "json", "markdown", "md"};
    if (!formats.count(a.format)) throw ValidationError("unknown report format '" + a.format + "'");
    if (!plan.dataset.manifest.empty()) require_file(plan.dataset.manifest, "dataset manifest");
    json body = {{"plan", plan.id}, {"study", a.study}, {"runs", plan.runs.size()}, {"out", a.out}};
    if (g.dry_run) return summary("experiment run", g, body);

    auto progress = [](const experiments::RunResult& r) {
        std::cerr << json{{"event", "run_finished"}, {"run_id", r.spec.id}, {"status", r.status}, {"seconds", r.seconds}}.dump()
                  << std::endl;
    };
    std::vector<experiments::RunResult> results;
    const fs::path out = a.out;
    fs::create_directories(out);
    if (a.study == "runs") {
        results = experiments::run_plan(plan, plan.runs, {}, progress);
    } else if (a.study == "channel_selection") {
        auto r = experiments::run_channel_selection(plan, progress);
        write_text(out / "channel_selection.md", r.markdown());
        write_text(out / "channel_selection.json", r.to_json().dump(2) + "\n");
        results = r.runs;
    } else if (a.study == "task_comparison") {
        auto r = experiments::run_task_comparison(plan, progress);
        write_text(out / "task_comparison.md", r.markdown());
        write_text(out / "task_comparison.json", r.to_json().dump(2) + "\n");
        results = r.runs;
    } else {
        auto r = experiments::run_geo_generalization(plan, a.geo_splits, progress);
        write_text(out / "geo.md", r.markdown());
        write_text(out / "geo.json", r.to_json().dump(2) + "\n");
        std::size_t failed = 0;
        for (const auto& row : r.rows) failed += row.status == "failed";
        body["failed"] = failed;
        return summary("experiment run", g, body);
    }
    if (a.format == "all")
        for (const char* f : {"csv", "json", "markdown"}) experiments::emit_report(results, f, out);
    else
        experiments::emit_report(results, a.format, out);
    experiments::emit_timings(results, out);
    std::size_t failed = 0;
    for (const auto& r : results) failed += !r.ok();
    body["failed"] = failed;
    summary("experiment run", g, body);
}

void print_error(const std::string& kind, const std::string& reason) {
    std::cerr << json{{"error", kind}, {"reason", reason}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"glacier: glacier mapping pipeline (ingest, slice, train, eval, predict, serve, experiments)"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_flag("--dry-run", g.dry_run, "Validate inputs and print what would be done; write nothing");
    app.add_option("--seed", g.seed, "Seed for splits, sampling and training");
    app.add_option("--jobs", g.jobs, "Worker threads (training, experiment pool)")->check(CLI::PositiveNumber);

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Load a tile, add indices/terrain, rasterize labels, crop, render a preview");
    c_ingest->add_option("--tile", ingest.tile, "GeoTIFF tile")->required();
    c_ingest->add_option("--channels", ingest.channels, "Comma-separated band names (default: from the file)");
    c_ingest->add_option("--labels", ingest.labels, "Label GeoJSON");
    c_ingest->add_option("--boundary", ingest.boundary, "Region boundary GeoJSON");
    c_ingest->add_option("--indices", ingest.indices, "Spectral indices to add, e.g. NDSI,NDVI,NDWI");
    c_ingest->add_option("--elevation", ingest.elevation, "One-band elevation GeoTIFF; adds ELEVATION and SLOPE");
    c_ingest->add_option("--preview", ingest.preview, "Three preview channels (default B5,B4,B2)");
    c_ingest->add_option("--out", ingest.out, "Output root")->capture_default_str();

    std::string r_labels, r_tile, r_channels, r_out = ".";
    auto* c_rast = app.add_subcommand("rasterize", "Burn label polygons into a class mask on a tile's grid");
    c_rast->add_option("--labels", r_labels, "Label GeoJSON")->required();
    c_rast->add_option("--tile", r_tile, "Reference GeoTIFF tile")->required();
    c_rast->add_option("--channels", r_channels, "Comma-separated band names");
    c_rast->add_option("--out", r_out, "Output root")->capture_default_str();

    SliceArgs slice;
    auto* c_slice = app.add_subcommand("slice", "Cut a tile and its mask into patches and append them to a manifest");
    c_slice->add_option("--tile", slice.tile, "GeoTIFF tile")->required();
    c_slice->add_option("--labels", slice.labels, "Label GeoJSON");
    c_slice->add_option("--mask", slice.mask, "Class mask GeoTIFF");
    c_slice->add_option("--channels", slice.channels, "Comma-separated band names");
    c_slice->add_option("--size", slice.size, "Patch size in pixels")->check(CLI::PositiveNumber);
    c_slice->add_option("--stride", slice.stride, "Stride in pixels (default: patch size)");
    c_slice->add_option("--out", slice.out, "Output directory (patches/ and manifest.geojson)")->capture_default_str();

    std::string f_manifest, f_classes = "clean_ice,debris", f_out = ".";
    double f_min = 0.10;
    auto* c_filter = app.add_subcommand("filter", "Keep patches above a glacier-fraction threshold");
    c_filter->add_option("--manifest", f_manifest, "Input manifest")->required();
    c_filter->add_option("--min-fraction", f_min, "Minimum counted glacier fraction");
    c_filter->add_option("--classes", f_classes, "Classes counted: clean_ice,debris");
    c_filter->add_option("--out", f_out, "Output root")->capture_default_str();

    SplitArgs split;
    auto* c_split = app.add_subcommand("split", "Assign patches to train/dev/test");
    c_split->add_option("--manifest", split.manifest, "Input manifest")->required();
    c_split->add_option("--method", split.method, "random or geographic");
    c_split->add_option("--train", split.train, "Random: train fraction");
    c_split->add_option("--dev", split.dev, "Random: dev fraction");
    c_split->add_option("--test", split.test, "Random: test fraction");
    c_split->add_option("--ball-fraction", split.ball_fraction, "Geographic: share inside the ball");
    c_split->add_option("--dev-fraction", split.dev_fraction, "Geographic: dev share within the ball");
    c_split->add_option("--out", split.out, "Output root")->capture_default_str();

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Train a U-Net or pixel baseline on a split manifest");
    c_train->add_option("--manifest", train.manifest, "Manifest with a split")->required();
    c_train->add_option("--task", train.task, "binary_union, multiclass_3, binary_clean, binary_debris");
    c_train->add_option("--config", train.config, "JSON: {train, model, normalization, channels, pixel}");
    c_train->add_option("--channels", train.channels, "Comma-separated input channels");
    c_train->add_option("--model", train.model, "unet, random_forest, gradient_boosting, mlp");
    c_train->add_option("--out", train.out, "Output root")->capture_default_str();

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Evaluate checkpoints on a split part");
    c_eval->add_option("--manifest", eval.manifest, "Manifest")->required();
    c_eval->add_option("--checkpoint", eval.checkpoints, "Checkpoint (repeatable)")->required();
    c_eval->add_option("--names", eval.names, "Comma-separated model names for the report");
    c_eval->add_option("--split", eval.split, "train, dev, test or all");
    c_eval->add_flag("--stratify-debris", eval.stratify, "Add the debris-stratified IoU table");
    c_eval->add_option("--out", eval.out, "Output root")->capture_default_str();

    PredictArgs predict;
    auto* c_pred = app.add_subcommand("predict", "Sliding-window prediction over a tile");
    c_pred->add_option("--tile", predict.tile, "GeoTIFF tile")->required();
    c_pred->add_option("--checkpoint", predict.checkpoint, "Checkpoint")->required();
    c_pred->add_option("--channels", predict.channels, "Comma-separated band names of the tile");
    c_pred->add_option("--window", predict.window, "Window size");
    c_pred->add_option("--overlap", predict.overlap, "Window overlap");
    c_pred->add_option("--out", predict.out, "Output root")->capture_default_str();

    std::string p_mask, p_conf, p_model, p_out = ".";
    std::size_t p_min_area = 16;
    double p_simplify = 0.0;
    auto* c_poly = app.add_subcommand("polygonize", "Trace a class mask into GeoJSON polygons");
    c_poly->add_option("--mask", p_mask, "Class mask GeoTIFF")->required();
    c_poly->add_option("--confidence", p_conf, "Confidence GeoTIFF from predict");
    c_poly->add_option("--min-area", p_min_area, "Minimum component size in pixels");
    c_poly->add_option("--simplify", p_simplify, "Douglas-Peucker tolerance in map units");
    c_poly->add_option("--model-id", p_model, "model_id property");
    c_poly->add_option("--out", p_out, "Output root")->capture_default_str();

    ServeArgs serve;
    auto* c_serve = app.add_subcommand("serve", "Run the prediction and corrections server");
    c_serve->add_option("--config", serve.config, "Server config JSON");
    c_serve->add_option("--port", serve.port, "Port (0 picks one)");
    c_serve->add_option("--data-dir", serve.data_dir, "Store directory");
    c_serve->add_option("--checkpoint", serve.checkpoint, "Checkpoint served as model 'default'");
    c_serve->add_option("--tile", serve.tiles, "Tile GeoTIFF (repeatable)");
    c_serve->add_option("--tile-channels", serve.tile_channels, "Band names for the tiles");
    c_serve->add_option("--preview", serve.preview, "Three preview channels");
    c_serve->add_option("--token", serve.token, "Required X-Glacier-Token value");
    c_serve->add_option("--static-dir", serve.static_dir, "Directory served at /");
    c_serve->add_option("--workers", serve.workers, "Inference workers");

    ExperimentArgs exp;
    auto* c_exp = app.add_subcommand("experiment", "Experiment plans");
    c_exp->require_subcommand(1);
    c_exp->fallthrough();
    auto* c_run = c_exp->add_subcommand("run", "Run a plan and write reports");
    c_run->add_option("--plan", exp.plan, "Plan JSON")->required();
    c_run->add_option("--out", exp.out, "Output root")->capture_default_str();
    c_run->add_option("--study", exp.study, "runs, channel_selection, task_comparison, geo");
    c_run->add_option("--format", exp.format, "all, csv, json, markdown");
    c_run->add_option("--geo-splits", exp.geo_splits, "Number of geographic splits (geo study)");

    for (auto* sc : {c_ingest, c_rast, c_slice, c_filter, c_split, c_train, c_eval, c_pred, c_poly, c_serve, c_run})
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error("usage_error", e.what());
        return 2;
    }

    try {
        if (*c_ingest) cmd_ingest(ingest, g);
        else if (*c_rast) cmd_rasterize(r_labels, r_tile, r_channels, r_out, g);
        else if (*c_slice) cmd_slice(slice, g);
        else if (*c_filter) cmd_filter(f_manifest, f_min, f_classes, f_out, g);
        else if (*c_split) cmd_split(split, g);
        else if (*c_train) cmd_train(train, g);
        else if (*c_eval) cmd_eval(eval, g);
        else if (*c_pred) cmd_predict(predict, g);
        else if (*c_poly) cmd_polygonize(p_mask, p_conf, p_min_area, p_simplify, p_model, p_out, g);
        else if (*c_serve) cmd_serve(serve, g);
        else if (*c_run) cmd_experiment(exp, g);
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal_error", e.what());
        return 1;
    }
    return 0;
}
