#include <gtest/gtest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <set>
#include <thread>

#include "glacier/server/server.hpp"
#include "support.hpp"

using namespace glacier;
using namespace glacier::server;
using glacier::testing::TempDir;
using nlohmann::json;

namespace {

// 300 x 100 tile at 10 m, three bands; one NaN pixel.
RasterTile make_tile(double ox = 1000.0, double oy = 5000.0) {
    RasterTile t;
    t.id = "t0";
    t.width = 300;
    t.height = 100;
    t.transform = {ox, oy, 10.0, -10.0, 0.0, 0.0, "EPSG:32645"};
    t.nodata_mask = Grid<std::uint8_t>(t.width, t.height, 0);
    for (const char* name : {"B2", "B4", "B5"}) {
        auto g = std::make_shared<ChannelGrid>(t.width, t.height);
        for (std::size_t r = 0; r < t.height; ++r)
            for (std::size_t c = 0; c < t.width; ++c)
                (*g)(r, c) = static_cast<float>(std::sin(0.05 * c + name[1]) + 0.02 * r);
        (*g)(5, 5) = std::numeric_limits<float>::quiet_NaN();
        t.channels.push_back({name, std::move(g)});
    }
    return t;
}

std::shared_ptr<const LoadedModel> make_model(const std::string& id, std::vector<std::string> channels = {"B5", "B4", "B2"}) {
    unet::UNetConfig cfg{1, 2, 3, 3, 0.0};
    return std::make_shared<const LoadedModel>(
        LoadedModel{id, unet::build_unet<float>(cfg, 7), std::move(channels), TaskMode::multiclass_3, {}});
}

Resources resources() {
    Resources r;
    r.tiles.push_back(make_tile());
    r.models["toy"] = make_model("toy");
    r.models["broken"] = make_model("broken", {"B5", "B4", "NOPE"});
    return r;
}

ServerConfig config(const TempDir& dir, std::size_t workers = 1) {
    ServerConfig c;
    c.port = 0;
    c.data_dir = dir / "data";
    c.workers = workers;
    c.window = 64;
    c.overlap = 16;
    c.min_area = 1;
    return c;
}

// Tile map bounds: x in [1000, 4000], y in [4000, 5000].
const json kAoi = {1200.0, 4100.0, 2000.0, 4900.0};

json square(double x0, double y0, double s, bool closed = true) {
    json ring = json::array({{x0, y0}, {x0 + s, y0}, {x0 + s, y0 + s}, {x0, y0 + s}});
    if (closed) ring.push_back({x0, y0});
    return {{"type", "FeatureCollection"},
            {"features",
             {{{"type", "Feature"},
               {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}},
               {"properties", {{"class", "debris"}, {"pixel_area", 4}}}}}}};
}

json correction(std::uint64_t job, double x0 = 1500.0) {
    return {{"job_id", job}, {"author", "analyst"}, {"edit_kind", "modify"}, {"geometry", square(x0, 4500.0, 20.0)}};
}

std::uint64_t post_job(httplib::Client& cli, const std::string& model = "toy", const std::string& key = "") {
    httplib::Headers h;
    if (!key.empty()) h.emplace("Idempotency-Key", key);
    auto r = cli.Post("/jobs", h, json{{"aoi", kAoi}, {"model_id", model}}.dump(), "application/json");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 202);
    return json::parse(r->body).at("job_id").get<std::uint64_t>();
}

std::string wait_terminal(httplib::Client& cli, std::uint64_t id, std::vector<std::string>* seen = nullptr) {
    for (int i = 0; i < 2000; ++i) {
        auto r = cli.Get("/jobs/" + std::to_string(id));
        const std::string s = json::parse(r->body).at("state").get<std::string>();
        if (seen && (seen->empty() || seen->back() != s)) seen->push_back(s);
        if (s == "done" || s == "failed") return s;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    return "timeout";
}

}  // namespace

TEST(Store, ReplayReconstructsState) {
    TempDir dir;
    json before;
    {
        Store s(dir.path(), 0);
        auto [j, fresh] = s.create_job({0, 0, 1, 1}, "m", "k1");
        EXPECT_TRUE(fresh);
        EXPECT_FALSE(s.create_job({0, 0, 1, 1}, "m", "k1").second);
        s.create_job({0, 0, 2, 2}, "m", "");
        s.update_job(j.job_id, JobState::running);
        s.update_job(j.job_id, JobState::done, "", "jobs/1.geojson", 3);
        for (int i = 0; i < 5; ++i) s.append_correction({0, j.job_id, "a", json::object(), "add", ""});
        before = {{"jobs", json::array()}, {"corr", json::array()}};
        for (const auto& [id, job] : s.view()->jobs) before["jobs"].push_back(job->to_json());
        for (const auto& c : s.corrections()) before["corr"].push_back(c.to_json());
    }
    Store s(dir.path(), 0);
    json after = {{"jobs", json::array()}, {"corr", json::array()}};
    for (const auto& [id, job] : s.view()->jobs) after["jobs"].push_back(job->to_json());
    for (const auto& c : s.corrections()) after["corr"].push_back(c.to_json());
    EXPECT_EQ(before, after);
    EXPECT_EQ(s.create_job({0, 0, 1, 1}, "m", "k1").first.job_id, 1u);
    EXPECT_EQ(s.append_correction({0, 1, "a", json::object(), "add", ""}).correction_id, 6u);
}

TEST(Store, StateMachineNeverRegresses) {
    TempDir dir;
    Store s(dir.path());
    auto id = s.create_job({0, 0, 1, 1}, "m", "").first.job_id;
    EXPECT_THROW(s.update_job(id, JobState::done), ValidationError);
    s.update_job(id, JobState::running);
    s.update_job(id, JobState::failed, "boom");
    EXPECT_THROW(s.update_job(id, JobState::running), ValidationError);
    EXPECT_THROW(s.update_job(id, JobState::queued), ValidationError);
    EXPECT_THROW(s.append_correction({0, 99, "a", json::object(), "add", ""}), ValidationError);
}

TEST(Store, TornTailIsDropped) {
    TempDir dir;
    {
        Store s(dir.path(), 0);
        auto id = s.create_job({0, 0, 1, 1}, "m", "").first.job_id;
        for (int i = 0; i < 3; ++i) s.append_correction({0, id, "a", json::object(), "add", ""});
    }
    {
        std::FILE* f = std::fopen((dir.path() / "store.log").c_str(), "ab");
        std::fputs("0badc0de {\"type\":\"correction\",\"corr", f);
        std::fclose(f);
    }
    {
        Store s(dir.path(), 0);
        EXPECT_EQ(s.corrections().size(), 3u);
        EXPECT_EQ(s.append_correction({0, 1, "a", json::object(), "add", ""}).correction_id, 4u);
    }
    Store s(dir.path(), 0);
    EXPECT_EQ(s.corrections().size(), 4u);
}

TEST(Store, CorruptLineStopsReplay) {
    TempDir dir;
    {
        Store s(dir.path(), 0);
        auto id = s.create_job({0, 0, 1, 1}, "m", "").first.job_id;
        s.append_correction({0, id, "a", json::object(), "add", ""});
    }
    std::string text = glacier::detail::read_text(dir.path() / "store.log");
    text[text.size() - 5] ^= 1;  // flip a bit in the last record
    glacier::write_text(dir.path() / "store.log", text);
    Store s(dir.path(), 0);
    EXPECT_EQ(s.corrections().size(), 0u);
    EXPECT_EQ(s.view()->jobs.size(), 1u);
}

TEST(Store, SnapshotPlusLogReplays) {
    TempDir dir;
    {
        Store s(dir.path(), 4);
        auto id = s.create_job({0, 0, 1, 1}, "m", "").first.job_id;
        for (int i = 0; i < 10; ++i) s.append_correction({0, id, "a", json{{"i", i}}, "add", ""});
    }
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "snapshot.json"));
    Store s(dir.path(), 4);
    auto cs = s.corrections();
    ASSERT_EQ(cs.size(), 10u);
    for (std::size_t i = 0; i < cs.size(); ++i) {
        EXPECT_EQ(cs[i].correction_id, i + 1);
        EXPECT_EQ(cs[i].geometry.at("i").get<int>(), static_cast<int>(i));
    }
}

TEST(ServerConfig, FileAndEnvOverrides) {
    auto c = ServerConfig::from_json({{"port", 9000}, {"data_dir", "/tmp/x"}, {"workers", 3}, {"preview_channels", {"B3", "B2", "B1"}}});
    EXPECT_EQ(c.port, 9000);
    EXPECT_EQ(c.workers, 3u);
    std::map<std::string, std::string> env = {{"GLACIER_PORT", "9100"},
                                              {"GLACIER_DATA_DIR", "/tmp/y"},
                                              {"GLACIER_CHECKPOINT", "m.glpx"},
                                              {"GLACIER_PREVIEW_CHANNELS", "B5, B4, B2"},
                                              {"GLACIER_TOKEN", "s3cret"}};
    c.apply_env([&](const char* k) -> const char* {
        auto it = env.find(k);
        return it == env.end() ? nullptr : it->second.c_str();
    });
    EXPECT_EQ(c.port, 9100);
    EXPECT_EQ(c.data_dir, "/tmp/y");
    EXPECT_EQ(c.models.at("default"), "m.glpx");
    EXPECT_EQ(c.preview_channels[0], "B5");
    EXPECT_EQ(c.preview_channels[2], "B2");
    EXPECT_EQ(c.token, "s3cret");
    env["GLACIER_PORT"] = "abc";
    EXPECT_THROW(c.apply_env([&](const char* k) -> const char* {
                     auto it = env.find(k);
                     return it == env.end() ? nullptr : it->second.c_str();
                 }),
                 ConfigError);
    EXPECT_THROW(ServerConfig::from_json({{"preview_channels", {"B1"}}}), ConfigError);
}

TEST(Server, JobsLifecycle) {
    TempDir dir;
    std::vector<std::string> logs;
    std::mutex log_mu;
    Server srv(config(dir), resources(), [&](const std::string& s) {
        std::lock_guard lock(log_mu);
        logs.push_back(s);
    });
    httplib::Client cli("127.0.0.1", srv.start());

    const auto id = post_job(cli, "toy", "abc");
    EXPECT_EQ(post_job(cli, "toy", "abc"), id);
    EXPECT_NE(post_job(cli, "toy", "other"), id);

    auto r = cli.Post("/jobs", json{{"aoi", kAoi}, {"model_id", "nope"}}.dump(), "application/json");
    EXPECT_EQ(r->status, 404);
    r = cli.Post("/jobs", json{{"aoi", {0, 0, 10, 10}}, {"model_id", "toy"}}.dump(), "application/json");
    EXPECT_EQ(r->status, 422);
    r = cli.Post("/jobs", "{not json", "application/json");
    EXPECT_EQ(r->status, 400);
    r = cli.Post("/jobs", json{{"aoi", {5, 0, 1, 10}}, {"model_id", "toy"}}.dump(), "application/json");
    EXPECT_EQ(r->status, 400);

    std::vector<std::string> seen;
    ASSERT_EQ(wait_terminal(cli, id, &seen), "done");
    const std::vector<std::string> order = {"queued", "running", "done"};
    std::size_t pos = 0;
    for (const auto& s : seen) {
        auto it = std::find(order.begin(), order.end(), s);
        ASSERT_NE(it, order.end());
        EXPECT_GE(static_cast<std::size_t>(it - order.begin()), pos);
        pos = static_cast<std::size_t>(it - order.begin());
    }

    r = cli.Get("/jobs/" + std::to_string(id) + "/polygons");
    ASSERT_EQ(r->status, 200);
    PolygonSet ps = from_geojson(r->body);
    EXPECT_EQ(ps.model_id, "toy");
    EXPECT_EQ(json::parse(cli.Get("/jobs/" + std::to_string(id))->body).at("feature_count").get<std::size_t>(),
              ps.features.size());
    // Every polygon lies inside the AOI's pixel window.
    for (const auto& f : ps.features)
        for (const auto& p : f.rings[0]) {
            EXPECT_GE(p.x, 1200.0 - 1e-9);
            EXPECT_LE(p.x, 2000.0 + 1e-9);
            EXPECT_GE(p.y, 4100.0 - 1e-9);
            EXPECT_LE(p.y, 4900.0 + 1e-9);
        }

    EXPECT_EQ(cli.Get("/jobs/999")->status, 404);
    EXPECT_EQ(cli.Get("/jobs/abc")->status, 404);
    EXPECT_EQ(cli.Get("/jobs/999/polygons")->status, 404);

    const auto bad = post_job(cli, "broken");
    ASSERT_EQ(wait_terminal(cli, bad), "failed");
    r = cli.Get("/jobs/" + std::to_string(bad) + "/polygons");
    EXPECT_EQ(r->status, 409);
    EXPECT_NE(json::parse(r->body).at("reason").get<std::string>().find("NOPE"), std::string::npos);

    srv.stop();
    ASSERT_FALSE(logs.empty());
    auto line = json::parse(logs.front());
    EXPECT_EQ(line.at("method"), "POST");
    EXPECT_EQ(line.at("path"), "/jobs");
    EXPECT_EQ(line.at("status"), 202);
}

TEST(Server, QueuedJobPollsAs202AndRestartResumes) {
    TempDir dir;
    std::uint64_t id;
    {
        Server srv(config(dir, 0), resources(), [](const std::string&) {});
        httplib::Client cli("127.0.0.1", srv.start());
        id = post_job(cli);
        auto r = cli.Get("/jobs/" + std::to_string(id) + "/polygons");
        EXPECT_EQ(r->status, 202);
        EXPECT_EQ(json::parse(r->body).at("state"), "queued");
    }
    Server srv(config(dir, 1), resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    EXPECT_EQ(wait_terminal(cli, id), "done");
    EXPECT_EQ(cli.Get("/jobs/" + std::to_string(id) + "/polygons")->status, 200);
}

TEST(Server, Corrections) {
    TempDir dir;
    Server srv(config(dir, 0), resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    const auto job = post_job(cli);

    const json body = correction(job);
    auto r = cli.Post("/corrections", body.dump(), "application/json");
    ASSERT_EQ(r->status, 201);
    const auto cid = json::parse(r->body).at("correction_id").get<std::uint64_t>();

    r = cli.Get("/corrections?job_id=" + std::to_string(job));
    ASSERT_EQ(r->status, 200);
    auto list = json::parse(r->body).at("corrections");
    ASSERT_EQ(list.size(), 1u);
    EXPECT_EQ(list[0].at("correction_id"), cid);
    EXPECT_EQ(list[0].at("geometry"), body.at("geometry"));
    EXPECT_EQ(list[0].at("author"), "analyst");
    EXPECT_EQ(list[0].at("edit_kind"), "modify");

    json open = body;
    open["geometry"] = square(1500, 4500, 20, false);
    r = cli.Post("/corrections", open.dump(), "application/json");
    ASSERT_EQ(r->status, 422);
    const std::string reason = json::parse(r->body).at("reason");
    EXPECT_NE(reason.find("feature 0 ring 0"), std::string::npos) << reason;
    EXPECT_NE(reason.find("not closed"), std::string::npos) << reason;

    json unknown = correction(777);
    EXPECT_EQ(cli.Post("/corrections", unknown.dump(), "application/json")->status, 404);
    json kind = body;
    kind["edit_kind"] = "rename";
    EXPECT_EQ(cli.Post("/corrections", kind.dump(), "application/json")->status, 422);
    EXPECT_EQ(cli.Post("/corrections", "[]", "application/json")->status, 400);
    EXPECT_EQ(cli.Get("/corrections?job_id=777")->status, 404);

    // Corrections leave the job untouched.
    EXPECT_EQ(json::parse(cli.Get("/jobs/" + std::to_string(job))->body).at("state"), "queued");
}

TEST(Server, ConcurrentWritersGetUniqueIncreasingIds) {
    TempDir dir;
    Server srv(config(dir, 0), resources(), [](const std::string&) {});
    const int port = srv.start();
    httplib::Client setup("127.0.0.1", port);
    const auto job = post_job(setup);
    std::vector<std::uint64_t> ids[2];
    std::atomic<int> failures{0};
    auto client = [&](int k) {
        httplib::Client cli("127.0.0.1", port);
        for (int i = 0; i < 50; ++i) {
            auto r = cli.Post("/corrections", correction(job, 1500.0 + k).dump(), "application/json");
            if (!r || r->status != 201) {
                ++failures;
                continue;
            }
            ids[k].push_back(json::parse(r->body).at("correction_id").get<std::uint64_t>());
        }
    };
    std::thread a(client, 0), b(client, 1);
    a.join();
    b.join();
    EXPECT_EQ(failures.load(), 0);
    std::set<std::uint64_t> all;
    for (auto& v : ids) {
        EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
        EXPECT_EQ(std::adjacent_find(v.begin(), v.end()), v.end());
        all.insert(v.begin(), v.end());
    }
    EXPECT_EQ(all.size(), 100u);
    EXPECT_EQ(*all.begin(), 1u);
    EXPECT_EQ(*all.rbegin(), 100u);
    auto list = json::parse(setup.Get("/corrections?job_id=" + std::to_string(job))->body).at("corrections");
    ASSERT_EQ(list.size(), 100u);
    for (std::size_t i = 0; i < list.size(); ++i) EXPECT_EQ(list[i].at("correction_id"), i + 1);
}

TEST(Server, PreviewTiles) {
    TempDir dir;
    Server srv(config(dir, 0), resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    // 300 px wide mosaic -> one level below the root.
    EXPECT_EQ(srv.pyramid().max_zoom(), 1);

    auto r = cli.Get("/tiles/1/0/0.png");
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    auto img = png::decode(std::vector<std::uint8_t>(r->body.begin(), r->body.end()));
    ASSERT_EQ(img.width, 256u);
    ASSERT_EQ(img.height, 256u);
    ASSERT_EQ(img.channels, 4u);
    auto alpha = [&](std::size_t row, std::size_t col) { return img.pixels[(row * 256 + col) * 4 + 3]; };
    EXPECT_EQ(alpha(0, 0), 255);
    EXPECT_EQ(alpha(5, 5), 0);      // NaN pixel
    EXPECT_EQ(alpha(150, 10), 0);   // below the 100-row raster
    // Pixel (0, 0) of B5 at full resolution matches the preview scaling rule.
    const auto tile = make_tile();
    auto [lo, hi] = finite_range(tile.channel("B5"));
    EXPECT_EQ(img.pixels[0], scale_to_byte(tile.channel("B5")(0, 0), lo, hi));

    r = cli.Get("/tiles/1/0/1.png");
    ASSERT_EQ(r->status, 200);
    img = png::decode(std::vector<std::uint8_t>(r->body.begin(), r->body.end()));
    EXPECT_TRUE(std::all_of(img.pixels.begin(), img.pixels.end(), [](std::uint8_t v) { return v == 0; }));
    EXPECT_EQ(cli.Get("/tiles/0/5/5.png")->status, 200);

    EXPECT_EQ(cli.Get("/tiles/2/0/0.png")->status, 400);
    EXPECT_EQ(cli.Get("/tiles/a/0/0.png")->status, 400);
    EXPECT_EQ(cli.Get("/tiles/0/-1/0.png")->status, 400);

    // Cached bytes are identical.
    EXPECT_EQ(cli.Get("/tiles/0/0/0.png")->body, cli.Get("/tiles/0/0/0.png")->body);
}

TEST(Server, TokenHeader) {
    TempDir dir;
    auto cfg = config(dir, 0);
    cfg.token = "s3cret";
    Server srv(cfg, resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    EXPECT_EQ(cli.Get("/health")->status, 200);
    EXPECT_EQ(cli.Get("/corrections")->status, 401);
    httplib::Headers h = {{"X-Glacier-Token", "s3cret"}};
    EXPECT_EQ(cli.Get("/corrections", h)->status, 200);
    h = {{"Authorization", "Bearer s3cret"}};
    EXPECT_EQ(cli.Get("/corrections", h)->status, 200);
    h = {{"X-Glacier-Token", "wrong"}};
    EXPECT_EQ(cli.Get("/corrections", h)->status, 401);
}

TEST(Server, StaticMount) {
    TempDir dir;
    std::filesystem::create_directories(dir / "www");
    glacier::write_text(dir / "www" / "index.html", "<html>ok</html>");
    auto cfg = config(dir, 0);
    cfg.static_dir = dir / "www";
    Server srv(cfg, resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    auto r = cli.Get("/index.html");
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->body, "<html>ok</html>");
}

TEST(Server, CheckpointRoundTripServes) {
    TempDir dir;
    unet::UNetConfig mc{1, 2, 3, 1, 0.0};
    unet::CheckpointInfo info;
    info.extra = {{"channels", {"B5", "B4", "B2"}}, {"task", "binary_union"}, {"normalization", "global"},
                  {"global_stats", {{0.0, 1.0}, {0.0, 1.0}, {0.5, 2.0}}}};
    unet::save_checkpoint(dir / "m.glpx", unet::build_unet<float>(mc, 3), info);
    auto m = load_model("m", dir / "m.glpx");
    EXPECT_EQ(m.task, TaskMode::binary_union);
    ASSERT_TRUE(m.normalize.use_global_stats);
    EXPECT_DOUBLE_EQ(m.normalize.global[2].std, 2.0);

    Resources res;
    res.tiles.push_back(make_tile());
    res.models["m"] = std::make_shared<const LoadedModel>(std::move(m));
    Server srv(config(dir, 1), std::move(res), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    const auto id = post_job(cli, "m");
    ASSERT_EQ(wait_terminal(cli, id), "done");
    auto ps = from_geojson(cli.Get("/jobs/" + std::to_string(id) + "/polygons")->body);
    for (const auto& f : ps.features) EXPECT_EQ(f.class_tag, GlacierClass::clean_ice);

    info.extra.erase("channels");
    unet::save_checkpoint(dir / "bad.glpx", unet::build_unet<float>(mc, 3), info);
    EXPECT_THROW(load_model("bad", dir / "bad.glpx"), ConfigError);
}

// kill -9 a serving process after 100 acknowledged corrections; a new
// process on the same data dir must list exactly those 100.
TEST(Server, DurableAcrossKill9) {
    TempDir dir;
    int fds[2];
    ASSERT_EQ(::pipe(fds), 0);
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        ::close(fds[0]);
        try {
            Server srv(config(dir, 0), resources(), [](const std::string&) {});
            const int port = srv.start();
            if (::write(fds[1], &port, sizeof port) != sizeof port) ::_exit(3);
            for (;;) ::pause();
        } catch (...) {
            ::_exit(2);
        }
    }
    ::close(fds[1]);
    int port = 0;
    ASSERT_EQ(::read(fds[0], &port, sizeof port), static_cast<ssize_t>(sizeof port));
    ::close(fds[0]);

    std::vector<std::uint64_t> acked;
    std::uint64_t job = 0;
    {
        httplib::Client cli("127.0.0.1", port);
        job = post_job(cli);
        for (int i = 0; i < 100; ++i) {
            auto r = cli.Post("/corrections", correction(job, 1500.0 + i).dump(), "application/json");
            ASSERT_TRUE(r);
            ASSERT_EQ(r->status, 201);
            acked.push_back(json::parse(r->body).at("correction_id").get<std::uint64_t>());
        }
    }
    ASSERT_EQ(::kill(pid, SIGKILL), 0);
    int status = 0;
    ASSERT_EQ(::waitpid(pid, &status, 0), pid);
    ASSERT_TRUE(WIFSIGNALED(status));

    Server srv(config(dir, 0), resources(), [](const std::string&) {});
    httplib::Client cli("127.0.0.1", srv.start());
    auto list = json::parse(cli.Get("/corrections?job_id=" + std::to_string(job))->body).at("corrections");
    ASSERT_EQ(list.size(), 100u);
    for (std::size_t i = 0; i < 100; ++i) {
        EXPECT_EQ(list[i].at("correction_id").get<std::uint64_t>(), acked[i]);
        if (i) {
            EXPECT_GT(acked[i], acked[i - 1]);
        }
        EXPECT_DOUBLE_EQ(list[i].at("geometry").at("features").at(0).at("geometry").at("coordinates").at(0).at(0).at(0).get<double>(),
                         1500.0 + static_cast<double>(i));
    }
    auto r = cli.Post("/corrections", correction(job).dump(), "application/json");
    EXPECT_EQ(json::parse(r->body).at("correction_id").get<std::uint64_t>(), 101u);
}
