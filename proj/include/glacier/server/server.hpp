#pragma once

// REST backend of the correction tool: async prediction jobs, polygon
// retrieval, a preview tile pyramid and the corrections store.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/png.hpp"
#include "glacier/geodata/raster.hpp"
#include "glacier/server/store.hpp"
#include "glacier/task.hpp"
#include "glacier/unet/predict.hpp"
#include "glacier/unet/train.hpp"
#include "glacier/vectorize.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro clashes with
// Eigen parameter names.
#include <httplib.h>

namespace glacier::server {

/// A checkpoint ready for inference.
struct LoadedModel {
    std::string id;
    unet::ModelParams<float> params;
    std::vector<std::string> channels;
    TaskMode task = TaskMode::multiclass_3;
    NormalizeConfig normalize;
};

/// Read a checkpoint written by the trainer. The channel list, task and
/// normalization come from the checkpoint's extra header.
inline LoadedModel load_model(const std::string& id, const std::filesystem::path& path) {
    auto [params, info] = unet::load_checkpoint<float>(path);
    LoadedModel m{id, std::move(params), {}, TaskMode::multiclass_3, {}};
    const auto& x = info.extra;
    if (!x.contains("channels")) throw ConfigError("checkpoint '" + path.string() + "' does not record its channels");
    m.channels = x.at("channels").get<std::vector<std::string>>();
    m.task = parse_task(x.value("task", std::string("multiclass_3")));
    if (m.task == TaskMode::two_binaries) throw ConfigError("serve the two binary heads as separate models");
    if (x.value("normalization", std::string("patch")) == "global" && x.contains("global_stats")) {
        m.normalize.use_global_stats = true;
        for (const auto& s : x["global_stats"]) m.normalize.global.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    }
    if (m.channels.size() != m.params.config.in_channels)
        throw ConfigError("checkpoint '" + path.string() + "' names " + std::to_string(m.channels.size()) +
                          " channels for a " + std::to_string(m.params.config.in_channels) + "-channel model");
    return m;
}

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path data_dir = "glacier-data";
    std::map<std::string, std::filesystem::path> models;  // model_id -> checkpoint
    std::vector<std::filesystem::path> tiles;
    std::vector<std::string> tile_channels;  // names for the tile bands; empty reads them from the files
    std::array<std::string, 3> preview_channels = {"B5", "B4", "B2"};
    std::string token;  // empty disables the check
    std::size_t workers = 1;  // 0 accepts jobs but leaves them queued
    std::size_t window = 512;
    std::size_t overlap = 64;
    std::size_t min_area = 16;
    std::size_t snapshot_every = 1000;
    std::size_t tile_cache = 1024;
    std::filesystem::path static_dir;

    void validate() const {
        if (port < 0 || port > 65535) throw ConfigError("port " + std::to_string(port) + " is out of range");
        if (overlap >= window) throw ConfigError("prediction overlap must be smaller than the window");
        if (data_dir.empty()) throw ConfigError("data_dir is empty");
    }

    static ServerConfig from_json(const nlohmann::json& j) {
        ServerConfig c;
        try {
            c.host = j.value("host", c.host);
            c.port = j.value("port", c.port);
            c.data_dir = j.value("data_dir", c.data_dir.string());
            if (j.contains("models"))
                for (auto it = j["models"].begin(); it != j["models"].end(); ++it)
                    c.models[it.key()] = it.value().get<std::string>();
            for (const auto& t : j.value("tiles", std::vector<std::string>{})) c.tiles.emplace_back(t);
            c.tile_channels = j.value("tile_channels", c.tile_channels);
            if (j.contains("preview_channels")) {
                auto v = j["preview_channels"].get<std::vector<std::string>>();
                if (v.size() != 3) throw ConfigError("preview_channels needs exactly 3 names");
                c.preview_channels = {v[0], v[1], v[2]};
            }
            c.token = j.value("token", c.token);
            c.workers = j.value("workers", c.workers);
            c.window = j.value("window", c.window);
            c.overlap = j.value("overlap", c.overlap);
            c.min_area = j.value("min_area", c.min_area);
            c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
            c.tile_cache = j.value("tile_cache", c.tile_cache);
            c.static_dir = j.value("static_dir", std::string());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("server config: ") + e.what());
        }
        return c;
    }

    /// GLACIER_PORT, GLACIER_DATA_DIR, GLACIER_CHECKPOINT (added as model
    /// "default"), GLACIER_PREVIEW_CHANNELS ("B5,B4,B2"), GLACIER_TOKEN.
    void apply_env(const std::function<const char*(const char*)>& get = [](const char* k) { return std::getenv(k); }) {
        if (const char* v = get("GLACIER_PORT")) {
            try {
                port = std::stoi(v);
            } catch (const std::exception&) {
                throw ConfigError(std::string("GLACIER_PORT is not a number: '") + v + "'");
            }
        }
        if (const char* v = get("GLACIER_DATA_DIR")) data_dir = v;
        if (const char* v = get("GLACIER_CHECKPOINT")) models["default"] = v;
        if (const char* v = get("GLACIER_PREVIEW_CHANNELS")) {
            std::vector<std::string> names;
            std::string s = v, cur;
            for (char ch : s + ",") {
                if (ch == ',') {
                    if (!cur.empty()) names.push_back(cur);
                    cur.clear();
                } else if (ch != ' ') {
                    cur += ch;
                }
            }
            if (names.size() != 3) throw ConfigError("GLACIER_PREVIEW_CHANNELS needs exactly 3 names");
            preview_channels = {names[0], names[1], names[2]};
        }
        if (const char* v = get("GLACIER_TOKEN")) token = v;
    }
};

/// Tiles and models handed to the server directly instead of being loaded
/// from the paths in the config.
struct Resources {
    std::vector<RasterTile> tiles;
    std::map<std::string, std::shared_ptr<const LoadedModel>> models;
};

inline Resources load_resources(const ServerConfig& cfg) {
    Resources r;
    for (const auto& p : cfg.tiles) r.tiles.push_back(load_tile(p, cfg.tile_channels));
    for (const auto& [id, path] : cfg.models) r.models[id] = std::make_shared<const LoadedModel>(load_model(id, path));
    return r;
}

/// Slippy-style pyramid over the mosaic of all tiles. The deepest level
/// shows one mosaic pixel per tile pixel; each level above halves the
/// resolution. Sampling is nearest-neighbour at pixel centres.
class TilePyramid {
public:
    static constexpr std::size_t kSize = 256;

    TilePyramid() = default;
    TilePyramid(const std::vector<RasterTile>* tiles, const std::array<std::string, 3>& channels, std::size_t cache_cap)
        : tiles_(tiles), channels_(channels), cache_cap_(cache_cap) {
        if (tiles_->empty()) return;
        const auto& t0 = tiles_->front().transform;
        if (t0.row_rotation != 0.0 || t0.col_rotation != 0.0)
            throw ConfigError("the preview pyramid needs north-up tiles");
        px_w_ = std::abs(t0.pixel_width);
        px_h_ = std::abs(t0.pixel_height);
        extent_ = tiles_->front().bounds();
        for (const auto& t : *tiles_) {
            for (const auto& c : channels_)
                if (!t.has_channel(c)) throw ConfigError("tile '" + t.id + "' has no preview channel '" + c + "'");
            const auto b = t.bounds();
            extent_ = {std::min(extent_.min_x, b.min_x), std::min(extent_.min_y, b.min_y),
                       std::max(extent_.max_x, b.max_x), std::max(extent_.max_y, b.max_y)};
        }
        for (int i = 0; i < 3; ++i) {
            lo_[i] = std::numeric_limits<float>::infinity();
            hi_[i] = -std::numeric_limits<float>::infinity();
            for (const auto& t : *tiles_) {
                auto [lo, hi] = finite_range(t.channel(channels_[i]));
                if (lo == 0.0f && hi == 0.0f) continue;
                lo_[i] = std::min(lo_[i], lo);
                hi_[i] = std::max(hi_[i], hi);
            }
        }
        const double mw = std::ceil((extent_.max_x - extent_.min_x) / px_w_ - 1e-9);
        const double mh = std::ceil((extent_.max_y - extent_.min_y) / px_h_ - 1e-9);
        mosaic_px_ = static_cast<std::size_t>(std::max(mw, mh));
        max_zoom_ = 0;
        while ((kSize << max_zoom_) < mosaic_px_) ++max_zoom_;
    }

    bool empty() const { return !tiles_ || tiles_->empty(); }
    int max_zoom() const { return max_zoom_; }
    const MapRect& extent() const { return extent_; }

    /// Map rectangle covered by tile (z, x, y); y counts down from the top.
    MapRect tile_rect(int z, long x, long y) const {
        const double span = static_cast<double>(kSize << (max_zoom_ - z));
        return {extent_.min_x + x * span * px_w_, extent_.max_y - (y + 1) * span * px_h_,
                extent_.min_x + (x + 1) * span * px_w_, extent_.max_y - y * span * px_h_};
    }

    /// RGBA image of one tile; pixels outside every raster or with a NaN
    /// preview value are transparent.
    png::Image render(int z, long x, long y) const {
        png::Image img{kSize, kSize, 4, std::vector<std::uint8_t>(kSize * kSize * 4, 0)};
        if (empty()) return img;
        const double scale = static_cast<double>(std::size_t{1} << (max_zoom_ - z));
        for (std::size_t i = 0; i < kSize; ++i)
            for (std::size_t j = 0; j < kSize; ++j) {
                const double mx = (static_cast<double>(x) * kSize + j + 0.5) * scale;
                const double my = (static_cast<double>(y) * kSize + i + 0.5) * scale;
                const double wx = extent_.min_x + mx * px_w_, wy = extent_.max_y - my * px_h_;
                if (!extent_.contains(wx, wy)) continue;
                for (const auto& t : *tiles_) {
                    const MapPoint p = t.transform.to_pixel(wx, wy);
                    if (!(p.x >= 0 && p.y >= 0 && p.x < t.width && p.y < t.height)) continue;
                    const auto r = static_cast<std::size_t>(p.y), c = static_cast<std::size_t>(p.x);
                    std::array<float, 3> v{};
                    bool ok = true;
                    for (int k = 0; k < 3; ++k) {
                        v[k] = t.channel(channels_[k])(r, c);
                        ok = ok && std::isfinite(v[k]);
                    }
                    if (!ok) break;
                    std::uint8_t* px = &img.pixels[(i * kSize + j) * 4];
                    for (int k = 0; k < 3; ++k) px[k] = scale_to_byte(v[k], lo_[k], hi_[k]);
                    px[3] = 255;
                    break;
                }
            }
        return img;
    }

    /// Encoded PNG, cached by tile address.
    std::shared_ptr<const std::vector<std::uint8_t>> png(int z, long x, long y) const {
        const std::string key = std::to_string(z) + "/" + std::to_string(x) + "/" + std::to_string(y);
        {
            std::lock_guard lock(mu_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        auto bytes = std::make_shared<const std::vector<std::uint8_t>>(png::encode(render(z, x, y)));
        std::lock_guard lock(mu_);
        if (cache_.size() >= cache_cap_) cache_.clear();
        cache_.emplace(key, bytes);
        return bytes;
    }

private:
    const std::vector<RasterTile>* tiles_ = nullptr;
    std::array<std::string, 3> channels_;
    std::array<float, 3> lo_{}, hi_{};
    double px_w_ = 1, px_h_ = 1;
    MapRect extent_;
    std::size_t mosaic_px_ = 0;
    int max_zoom_ = 0;
    std::size_t cache_cap_ = 1024;
    mutable std::mutex mu_;
    mutable std::map<std::string, std::shared_ptr<const std::vector<std::uint8_t>>> cache_;
};

namespace detail {

/// Pixel window [r0, r1) x [c0, c1) of `tile` whose pixel centres fall in `aoi`.
struct PixelWindow {
    std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
    bool empty() const { return r1 <= r0 || c1 <= c0; }
};

inline PixelWindow aoi_window(const RasterTile& tile, const MapRect& aoi) {
    PixelWindow w;
    if (!tile.bounds().intersects(aoi)) return w;
    const MapPoint corners[4] = {tile.transform.to_pixel(aoi.min_x, aoi.min_y), tile.transform.to_pixel(aoi.max_x, aoi.min_y),
                                 tile.transform.to_pixel(aoi.min_x, aoi.max_y), tile.transform.to_pixel(aoi.max_x, aoi.max_y)};
    double cmin = corners[0].x, cmax = cmin, rmin = corners[0].y, rmax = rmin;
    for (const auto& p : corners) {
        cmin = std::min(cmin, p.x), cmax = std::max(cmax, p.x);
        rmin = std::min(rmin, p.y), rmax = std::max(rmax, p.y);
    }
    auto clamp_to = [](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n)));
    };
    // Pixel k is inside when its centre k + 0.5 lies in [min, max].
    w.c0 = clamp_to(std::ceil(cmin - 0.5), tile.width);
    w.c1 = clamp_to(std::floor(cmax - 0.5) + 1, tile.width);
    w.r0 = clamp_to(std::ceil(rmin - 0.5), tile.height);
    w.r1 = clamp_to(std::floor(rmax - 0.5) + 1, tile.height);
    return w;
}

inline RasterTile crop(const RasterTile& tile, const PixelWindow& w) {
    RasterTile out;
    out.id = tile.id;
    out.width = w.c1 - w.c0;
    out.height = w.r1 - w.r0;
    out.transform = tile.transform.window(w.r0, w.c0);
    out.timestamp = tile.timestamp;
    out.nodata_mask = Grid<std::uint8_t>(out.width, out.height, 0);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c) out.nodata_mask(r, c) = tile.nodata_mask(w.r0 + r, w.c0 + c);
    for (const auto& ch : tile.channels) {
        auto g = std::make_shared<ChannelGrid>(out.width, out.height);
        for (std::size_t r = 0; r < out.height; ++r)
            for (std::size_t c = 0; c < out.width; ++c) (*g)(r, c) = (*ch.grid)(w.r0 + r, w.c0 + c);
        out.channels.push_back({ch.name, std::move(g)});
    }
    return out;
}

/// Probability of the chosen class at each pixel.
inline Grid<float> class_confidence(const Tensor3<float>& probs, const MaskGrid& classes) {
    Grid<float> g(probs.width(), probs.height(), 0.0f);
    const std::size_t n = probs.plane_size();
    for (std::size_t i = 0; i < n; ++i) {
        if (probs.channels() == 1) {
            g.storage()[i] = classes.storage()[i] ? probs.data()[i] : 1.0f - probs.data()[i];
        } else {
            const std::size_t plane = classes.storage()[i] == 1 ? 0 : classes.storage()[i] == 2 ? 1 : 2;
            g.storage()[i] = probs.data()[plane * n + i];
        }
    }
    return g;
}

inline std::optional<MapRect> parse_aoi(const nlohmann::json& a) {
    MapRect r;
    if (a.is_array() && a.size() == 4 && std::all_of(a.begin(), a.end(), [](const auto& v) { return v.is_number(); })) {
        r = {a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>()};
    } else if (a.is_object()) {
        for (const char* k : {"min_x", "min_y", "max_x", "max_y"})
            if (!a.contains(k) || !a[k].is_number()) return std::nullopt;
        r = {a["min_x"].get<double>(), a["min_y"].get<double>(), a["max_x"].get<double>(), a["max_y"].get<double>()};
    } else {
        return std::nullopt;
    }
    if (!std::isfinite(r.min_x) || !std::isfinite(r.min_y) || !std::isfinite(r.max_x) || !std::isfinite(r.max_y))
        return std::nullopt;
    if (!(r.min_x < r.max_x && r.min_y < r.max_y)) return std::nullopt;
    return r;
}

inline std::optional<long> parse_index(const std::string& s) {
    if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
        return std::nullopt;
    return std::stol(s);
}

}  // namespace detail

class Server {
public:
    using LogSink = std::function<void(const std::string&)>;

    explicit Server(ServerConfig cfg, std::optional<Resources> res = std::nullopt, LogSink log = nullptr)
        : cfg_(std::move(cfg)), log_(log ? std::move(log) : [](const std::string& s) { std::cerr << s << "\n"; }) {
        cfg_.validate();
        res_ = res ? std::move(*res) : load_resources(cfg_);
        for (const auto& t : res_.tiles) t.validate();
        for (const auto& [id, m] : res_.models) {
            unet::PredictConfig pc{cfg_.window, cfg_.overlap, true, m->normalize};
            pc.validate(m->params.config);
        }
        pyramid_ = std::make_unique<TilePyramid>(&res_.tiles, cfg_.preview_channels, cfg_.tile_cache);
        std::filesystem::create_directories(cfg_.data_dir / "jobs");
        store_ = std::make_unique<Store>(cfg_.data_dir, cfg_.snapshot_every);
        routes();
    }

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;
    ~Server() { stop(); }

    /// Bind, start the workers and serve on a background thread. Returns the bound port.
    int start() {
        bind();
        start_workers();
        listener_ = std::thread([this] { http_.listen_after_bind(); });
        http_.wait_until_ready();
        return port_;
    }

    /// Bind and serve on the calling thread until stop().
    void run() {
        bind();
        start_workers();
        http_.listen_after_bind();
    }

    void stop() {
        http_.stop();
        if (listener_.joinable()) listener_.join();
        {
            std::lock_guard lock(queue_mu_);
            stopping_ = true;
        }
        queue_cv_.notify_all();
        for (auto& w : workers_)
            if (w.joinable()) w.join();
        workers_.clear();
    }

    int port() const { return port_; }
    Store& store() { return *store_; }
    const TilePyramid& pyramid() const { return *pyramid_; }

    /// Run one job to completion on the calling thread.
    void execute(std::uint64_t job_id) {
        auto job = store_->job(job_id);
        if (!job || job->state == JobState::done || job->state == JobState::failed) return;
        store_->update_job(job_id, JobState::running);
        try {
            auto it = res_.models.find(job->model_id);
            if (it == res_.models.end()) throw ConfigError("model '" + job->model_id + "' is no longer configured");
            const LoadedModel& m = *it->second;
            PolygonSet all;
            all.model_id = m.id;
            all.created_at = utc_now();
            unet::PredictConfig pc{cfg_.window, cfg_.overlap, true, m.normalize};
            for (const auto& tile : res_.tiles) {
                const auto win = detail::aoi_window(tile, job->aoi);
                if (win.empty()) continue;
                const RasterTile part = detail::crop(tile, win);
                const Tensor3<float> probs = unet::predict_tile(m.params, part, m.channels, pc);
                const MaskGrid classes = unet::task_classes(probs, m.task);
                const Grid<float> conf = detail::class_confidence(probs, classes);
                PolygonSet ps = polygonize(classes, part.transform, cfg_.min_area, &conf);
                if (all.crs_code.empty()) all.crs_code = ps.crs_code;
                for (auto& f : ps.features) all.features.push_back(std::move(f));
            }
            const std::string rel = "jobs/" + std::to_string(job_id) + ".geojson";
            detail::durable_write(cfg_.data_dir / rel, to_geojson(all) + "\n");
            store_->update_job(job_id, JobState::done, {}, rel, all.features.size());
        } catch (const std::exception& e) {
            store_->update_job(job_id, JobState::failed, e.what());
        }
    }

private:
    void bind() {
        port_ = cfg_.port == 0 ? http_.bind_to_any_port(cfg_.host) : (http_.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
        if (port_ < 0) throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    }

    void start_workers() {
        {
            std::lock_guard lock(queue_mu_);
            stopping_ = false;
            // Jobs interrupted by a restart run again from the start.
            for (const auto& [id, j] : store_->view()->jobs)
                if (j->state == JobState::queued || j->state == JobState::running) queue_.push_back(id);
        }
        for (std::size_t i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
    }

    void worker_loop() {
        for (;;) {
            std::uint64_t id;
            {
                std::unique_lock lock(queue_mu_);
                queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
                if (stopping_) return;
                id = queue_.front();
                queue_.pop_front();
            }
            execute(id);
        }
    }

    void enqueue(std::uint64_t id) {
        {
            std::lock_guard lock(queue_mu_);
            queue_.push_back(id);
        }
        queue_cv_.notify_one();
    }

    static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& reason) {
        send_json(res, status, {{"error", kind}, {"reason", reason}});
    }

    static std::optional<nlohmann::json> body_json(const httplib::Request& req, httplib::Response& res) {
        try {
            auto j = nlohmann::json::parse(req.body);
            if (!j.is_object()) {
                send_error(res, 400, "parse_error", "request body must be a JSON object");
                return std::nullopt;
            }
            return j;
        } catch (const nlohmann::json::parse_error& e) {
            send_error(res, 400, "parse_error", e.what());
            return std::nullopt;
        }
    }

    std::optional<PredictionJob> job_from_path(const httplib::Request& req, httplib::Response& res) {
        auto id = detail::parse_index(req.matches[1]);
        std::optional<PredictionJob> job = id ? store_->job(static_cast<std::uint64_t>(*id)) : std::nullopt;
        if (!job) send_error(res, 404, "not_found", "unknown job '" + std::string(req.matches[1]) + "'");
        return job;
    }

    void routes() {
        http_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            if (cfg_.token.empty() || req.path == "/health") return httplib::Server::HandlerResponse::Unhandled;
            std::string got = req.get_header_value("X-Glacier-Token");
            const std::string auth = req.get_header_value("Authorization");
            if (got.empty() && auth.rfind("Bearer ", 0) == 0) got = auth.substr(7);
            if (got == cfg_.token) return httplib::Server::HandlerResponse::Unhandled;
            send_error(res, 401, "unauthorized", "missing or wrong token");
            return httplib::Server::HandlerResponse::Handled;
        });
        http_.set_logger([this](const httplib::Request& req, const httplib::Response& res) {
            nlohmann::json line = {{"ts", utc_now()},     {"method", req.method}, {"path", req.path},
                                   {"status", res.status}, {"remote", req.remote_addr}, {"bytes", res.body.size()}};
            log_(line.dump());
        });

        http_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json models = nlohmann::json::array();
            for (const auto& [id, m] : res_.models) models.push_back(id);
            send_json(res, 200, {{"status", "ok"}, {"tiles", res_.tiles.size()}, {"models", models},
                                 {"max_zoom", pyramid_->max_zoom()}});
        });

        http_.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_json(req, res);
            if (!body) return;
            if (!body->contains("model_id") || !(*body)["model_id"].is_string())
                return send_error(res, 400, "validation_error", "model_id must be a string");
            auto aoi = detail::parse_aoi(body->value("aoi", nlohmann::json()));
            if (!aoi)
                return send_error(res, 400, "validation_error",
                                  "aoi must be [min_x, min_y, max_x, max_y] with min < max");
            const std::string model_id = (*body)["model_id"].get<std::string>();
            if (!res_.models.count(model_id)) return send_error(res, 404, "not_found", "unknown model '" + model_id + "'");
            const bool hits = std::any_of(res_.tiles.begin(), res_.tiles.end(),
                                          [&](const RasterTile& t) { return !detail::aoi_window(t, *aoi).empty(); });
            if (!hits) return send_error(res, 422, "validation_error", "aoi does not intersect any available tile");
            std::string key = req.get_header_value("Idempotency-Key");
            if (key.empty()) key = body->value("idempotency_key", std::string());
            auto [job, fresh] = store_->create_job(*aoi, model_id, key);
            if (fresh) enqueue(job.job_id);
            send_json(res, 202, {{"job_id", job.job_id}, {"state", state_name(job.state)}});
        });

        http_.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            if (auto job = job_from_path(req, res)) send_json(res, 200, job->to_json());
        });

        http_.Get(R"(/jobs/([^/]+)/polygons)", [this](const httplib::Request& req, httplib::Response& res) {
            auto job = job_from_path(req, res);
            if (!job) return;
            if (job->state == JobState::failed)
                return send_json(res, 409, {{"error", "job_failed"}, {"reason", job->error}, {"job_id", job->job_id}});
            if (job->state != JobState::done)
                return send_json(res, 202, {{"job_id", job->job_id}, {"state", state_name(job->state)}});
            try {
                res.status = 200;
                res.set_content(glacier::detail::read_text(cfg_.data_dir / job->result_file), "application/geo+json");
            } catch (const Error& e) {
                send_error(res, 500, e.kind(), e.what());
            }
        });

        http_.Post("/corrections", [this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_json(req, res);
            if (!body) return;
            const auto& b = *body;
            if (!b.contains("job_id") || !b["job_id"].is_number_unsigned())
                return send_error(res, 400, "validation_error", "job_id must be a non-negative integer");
            if (!b.contains("author") || !b["author"].is_string())
                return send_error(res, 400, "validation_error", "author must be a string");
            if (!b.contains("geometry")) return send_error(res, 400, "validation_error", "geometry is required");
            const std::string kind = b.value("edit_kind", std::string());
            if (kind != "add" && kind != "modify" && kind != "delete")
                return send_error(res, 422, "validation_error", "edit_kind must be add, modify or delete");
            CorrectionRecord c;
            c.job_id = b["job_id"].get<std::uint64_t>();
            if (!store_->job(c.job_id)) return send_error(res, 404, "not_found", "unknown job " + std::to_string(c.job_id));
            c.author = b["author"].get<std::string>();
            c.geometry = b["geometry"];
            c.edit_kind = kind;
            try {
                from_geojson(c.geometry.dump());
            } catch (const Error& e) {
                return send_error(res, 422, "validation_error", e.what());
            }
            try {
                c = store_->append_correction(std::move(c));
            } catch (const ValidationError& e) {
                return send_error(res, 404, "not_found", e.what());
            } catch (const Error& e) {
                return send_error(res, 500, e.kind(), e.what());
            }
            send_json(res, 201, {{"correction_id", c.correction_id}, {"created_at", c.created_at}});
        });

        http_.Get("/corrections", [this](const httplib::Request& req, httplib::Response& res) {
            std::optional<std::uint64_t> job_id;
            if (req.has_param("job_id")) {
                auto id = detail::parse_index(req.get_param_value("job_id"));
                if (!id) return send_error(res, 400, "validation_error", "job_id must be a non-negative integer");
                job_id = static_cast<std::uint64_t>(*id);
                if (!store_->job(*job_id)) return send_error(res, 404, "not_found", "unknown job " + std::to_string(*job_id));
            }
            nlohmann::json out = nlohmann::json::array();
            for (const auto& c : store_->corrections(job_id)) out.push_back(c.to_json());
            send_json(res, 200, {{"corrections", std::move(out)}});
        });

        http_.Get(R"(/tiles/([^/]+)/([^/]+)/([^/]+)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
            auto z = detail::parse_index(req.matches[1]), x = detail::parse_index(req.matches[2]),
                 y = detail::parse_index(req.matches[3]);
            if (!z || !x || !y) return send_error(res, 400, "validation_error", "tile coordinates must be non-negative integers");
            if (*z > pyramid_->max_zoom())
                return send_error(res, 400, "validation_error",
                                  "zoom " + std::to_string(*z) + " is beyond the pyramid depth " +
                                      std::to_string(pyramid_->max_zoom()));
            auto bytes = pyramid_->png(static_cast<int>(*z), *x, *y);
            res.status = 200;
            res.set_content(reinterpret_cast<const char*>(bytes->data()), bytes->size(), "image/png");
        });

        if (!cfg_.static_dir.empty() && !http_.set_mount_point("/", cfg_.static_dir.string()))
            throw ConfigError("static_dir '" + cfg_.static_dir.string() + "' is not a directory");
    }

    ServerConfig cfg_;
    LogSink log_;
    Resources res_;
    std::unique_ptr<TilePyramid> pyramid_;
    std::unique_ptr<Store> store_;
    httplib::Server http_;
    int port_ = -1;
    std::thread listener_;
    std::vector<std::thread> workers_;
    std::mutex queue_mu_;
    std::condition_variable queue_cv_;
    std::deque<std::uint64_t> queue_;
    bool stopping_ = false;
};

}  // namespace glacier::server
