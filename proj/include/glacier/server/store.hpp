#pragma once

// Embedded persistence for the prediction service: an append-only log of
// job and correction records plus a periodic snapshot. Each log line is
// "<crc32 hex> <json>\n" and is fsync'ed before the call returns.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/geodata/transform.hpp"

namespace glacier::server {

enum class JobState { queued, running, done, failed };

inline std::string state_name(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::done: return "done";
        case JobState::failed: return "failed";
    }
    return "?";
}

inline JobState parse_state(const std::string& s) {
    if (s == "queued") return JobState::queued;
    if (s == "running") return JobState::running;
    if (s == "done") return JobState::done;
    if (s == "failed") return JobState::failed;
    throw FormatError("unknown job state '" + s + "'", 0);
}

/// queued -> running -> {done, failed}; a state may be re-entered.
inline bool transition_allowed(JobState from, JobState to) {
    if (from == to) return from == JobState::running;
    if (from == JobState::queued) return to == JobState::running;
    if (from == JobState::running) return to == JobState::done || to == JobState::failed;
    return false;
}

inline std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

struct PredictionJob {
    std::uint64_t job_id = 0;
    MapRect aoi;
    std::string model_id;
    JobState state = JobState::queued;
    std::string error;
    std::string idempotency_key;
    std::string created_at;
    std::string result_file;  // relative to the data dir
    std::size_t feature_count = 0;

    nlohmann::json to_json() const {
        return {{"job_id", job_id},
                {"aoi", {aoi.min_x, aoi.min_y, aoi.max_x, aoi.max_y}},
                {"model_id", model_id},
                {"state", state_name(state)},
                {"error", error},
                {"idempotency_key", idempotency_key},
                {"created_at", created_at},
                {"result_file", result_file},
                {"feature_count", feature_count}};
    }

    static PredictionJob from_json(const nlohmann::json& j) {
        PredictionJob p;
        p.job_id = j.at("job_id").get<std::uint64_t>();
        const auto& a = j.at("aoi");
        p.aoi = {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(), a.at(3).get<double>()};
        p.model_id = j.at("model_id").get<std::string>();
        p.state = parse_state(j.at("state").get<std::string>());
        p.error = j.value("error", "");
        p.idempotency_key = j.value("idempotency_key", "");
        p.created_at = j.value("created_at", "");
        p.result_file = j.value("result_file", "");
        p.feature_count = j.value("feature_count", std::size_t{0});
        return p;
    }
};

struct CorrectionRecord {
    std::uint64_t correction_id = 0;
    std::uint64_t job_id = 0;
    std::string author;
    nlohmann::json geometry;  // FeatureCollection as submitted
    std::string edit_kind;    // add | modify | delete
    std::string created_at;

    nlohmann::json to_json() const {
        return {{"correction_id", correction_id}, {"job_id", job_id},       {"author", author},
                {"geometry", geometry},           {"edit_kind", edit_kind}, {"created_at", created_at}};
    }

    static CorrectionRecord from_json(const nlohmann::json& j) {
        CorrectionRecord c;
        c.correction_id = j.at("correction_id").get<std::uint64_t>();
        c.job_id = j.at("job_id").get<std::uint64_t>();
        c.author = j.at("author").get<std::string>();
        c.geometry = j.at("geometry");
        c.edit_kind = j.at("edit_kind").get<std::string>();
        c.created_at = j.value("created_at", "");
        return c;
    }
};

/// Immutable view of the store; readers hold one without locking.
struct StoreState {
    std::map<std::uint64_t, std::shared_ptr<const PredictionJob>> jobs;
    std::vector<std::shared_ptr<const CorrectionRecord>> corrections;  // id order
    std::map<std::string, std::uint64_t> idempotency;
    std::uint64_t next_job_id = 1, next_correction_id = 1, seq = 0;
};

namespace detail {

inline std::string crc_hex(const std::string& s) {
    const auto c = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(c));
    return buf;
}

inline void write_all(int fd, const std::string& s, const std::string& what) {
    std::size_t off = 0;
    while (off < s.size()) {
        const ssize_t n = ::write(fd, s.data() + off, s.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError("write to " + what + " failed");
        }
        off += static_cast<std::size_t>(n);
    }
}

inline void fsync_dir(const std::filesystem::path& dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
}

/// Write a file durably: temp file, fsync, rename, fsync the directory.
inline void durable_write(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw IoError("cannot create '" + tmp + "'");
    write_all(fd, text, tmp);
    if (::fsync(fd) != 0) {
        ::close(fd);
        throw IoError("fsync of '" + tmp + "' failed");
    }
    ::close(fd);
    std::filesystem::rename(tmp, path);
    fsync_dir(path.parent_path());
}

}  // namespace detail

class Store {
public:
    explicit Store(std::filesystem::path dir, std::size_t snapshot_every = 1000)
        : dir_(std::move(dir)), snapshot_every_(snapshot_every) {
        std::filesystem::create_directories(dir_);
        auto st = std::make_shared<StoreState>();
        recover(*st);
        state_ = std::move(st);
        fd_ = ::open(log_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open log '" + log_path().string() + "'");
    }

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;
    ~Store() {
        if (fd_ >= 0) ::close(fd_);
    }

    std::filesystem::path log_path() const { return dir_ / "store.log"; }
    std::filesystem::path snapshot_path() const { return dir_ / "snapshot.json"; }
    const std::filesystem::path& dir() const { return dir_; }

    /// Current immutable state.
    std::shared_ptr<const StoreState> view() const { return std::atomic_load(&state_); }

    /// New queued job, or the existing one for a repeated idempotency key
    /// (second member false).
    std::pair<PredictionJob, bool> create_job(const MapRect& aoi, const std::string& model_id, const std::string& key) {
        std::lock_guard lock(write_mu_);
        auto cur = view();
        if (!key.empty()) {
            auto it = cur->idempotency.find(key);
            if (it != cur->idempotency.end()) return {*cur->jobs.at(it->second), false};
        }
        PredictionJob j;
        j.job_id = cur->next_job_id;
        j.aoi = aoi;
        j.model_id = model_id;
        j.idempotency_key = key;
        j.created_at = utc_now();
        commit({{"type", "job"}, {"job", j.to_json()}});
        return {j, true};
    }

    /// Move a job forward. Throws ValidationError on a regressing transition.
    PredictionJob update_job(std::uint64_t id, JobState to, const std::string& error = {},
                             const std::string& result_file = {}, std::size_t feature_count = 0) {
        std::lock_guard lock(write_mu_);
        auto cur = view();
        auto it = cur->jobs.find(id);
        if (it == cur->jobs.end()) throw ValidationError("unknown job " + std::to_string(id));
        if (!transition_allowed(it->second->state, to))
            throw ValidationError("job " + std::to_string(id) + " cannot go from " + state_name(it->second->state) +
                                  " to " + state_name(to));
        PredictionJob j = *it->second;
        j.state = to;
        j.error = error;
        if (!result_file.empty()) j.result_file = result_file;
        j.feature_count = feature_count;
        commit({{"type", "job"}, {"job", j.to_json()}});
        return j;
    }

    /// Append a correction; the id is assigned here and the record is on
    /// disk when this returns.
    CorrectionRecord append_correction(CorrectionRecord c) {
        std::lock_guard lock(write_mu_);
        auto cur = view();
        if (!cur->jobs.count(c.job_id)) throw ValidationError("unknown job " + std::to_string(c.job_id));
        c.correction_id = cur->next_correction_id;
        if (c.created_at.empty()) c.created_at = utc_now();
        commit({{"type", "correction"}, {"correction", c.to_json()}});
        return c;
    }

    std::optional<PredictionJob> job(std::uint64_t id) const {
        auto cur = view();
        auto it = cur->jobs.find(id);
        if (it == cur->jobs.end()) return std::nullopt;
        return *it->second;
    }

    std::vector<CorrectionRecord> corrections(std::optional<std::uint64_t> job_id = std::nullopt) const {
        auto cur = view();
        std::vector<CorrectionRecord> out;
        for (const auto& c : cur->corrections)
            if (!job_id || c->job_id == *job_id) out.push_back(*c);
        return out;
    }

    /// Write the full state as a snapshot and truncate the log.
    void snapshot() {
        std::lock_guard lock(write_mu_);
        snapshot_locked();
    }

private:
    static std::shared_ptr<StoreState> apply(const StoreState& base, const nlohmann::json& rec) {
        auto next = std::make_shared<StoreState>(base);
        apply_in_place(*next, rec);
        return next;
    }

    static void apply_in_place(StoreState& s, const nlohmann::json& rec) {
        const std::string type = rec.at("type").get<std::string>();
        if (type == "job") {
            auto j = std::make_shared<const PredictionJob>(PredictionJob::from_json(rec.at("job")));
            if (!j->idempotency_key.empty()) s.idempotency[j->idempotency_key] = j->job_id;
            s.next_job_id = std::max(s.next_job_id, j->job_id + 1);
            s.jobs[j->job_id] = std::move(j);
        } else if (type == "correction") {
            auto c = std::make_shared<const CorrectionRecord>(CorrectionRecord::from_json(rec.at("correction")));
            s.next_correction_id = std::max(s.next_correction_id, c->correction_id + 1);
            s.corrections.push_back(std::move(c));
        } else {
            throw FormatError("unknown log record type '" + type + "'", 0);
        }
        s.seq = rec.at("seq").get<std::uint64_t>();
    }

    // Caller holds write_mu_.
    void commit(nlohmann::json rec) {
        auto cur = view();
        rec["seq"] = cur->seq + 1;
        const std::string body = rec.dump();
        detail::write_all(fd_, detail::crc_hex(body) + " " + body + "\n", log_path().string());
        if (::fdatasync(fd_) != 0) throw IoError("fsync of the store log failed");
        std::atomic_store(&state_, std::shared_ptr<const StoreState>(apply(*cur, rec)));
        if (snapshot_every_ && ++since_snapshot_ >= snapshot_every_) snapshot_locked();
    }

    void snapshot_locked() {
        auto cur = view();
        nlohmann::json j = {{"seq", cur->seq}, {"jobs", nlohmann::json::array()}, {"corrections", nlohmann::json::array()}};
        for (const auto& [id, job] : cur->jobs) j["jobs"].push_back(job->to_json());
        for (const auto& c : cur->corrections) j["corrections"].push_back(c->to_json());
        detail::durable_write(snapshot_path(), j.dump() + "\n");
        // Records up to seq are in the snapshot; replay skips them if the
        // truncation below does not happen.
        if (::ftruncate(fd_, 0) != 0 || ::fsync(fd_) != 0) throw IoError("cannot truncate the store log");
        since_snapshot_ = 0;
    }

    void recover(StoreState& s) {
        if (std::filesystem::exists(snapshot_path())) {
            std::FILE* f = std::fopen(snapshot_path().c_str(), "rb");
            if (!f) throw IoError("cannot read '" + snapshot_path().string() + "'");
            std::string text;
            char buf[65536];
            for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, f)) > 0;) text.append(buf, n);
            std::fclose(f);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(text);
            } catch (const nlohmann::json::parse_error& e) {
                throw FormatError(std::string("store snapshot: ") + e.what(), e.byte);
            }
            for (const auto& job : j.at("jobs")) apply_in_place(s, {{"type", "job"}, {"job", job}, {"seq", 0}});
            for (const auto& c : j.at("corrections"))
                apply_in_place(s, {{"type", "correction"}, {"correction", c}, {"seq", 0}});
            s.seq = j.at("seq").get<std::uint64_t>();
        }
        if (!std::filesystem::exists(log_path())) return;
        std::FILE* f = std::fopen(log_path().c_str(), "rb");
        if (!f) throw IoError("cannot read '" + log_path().string() + "'");
        std::string text;
        char buf[65536];
        for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, f)) > 0;) text.append(buf, n);
        std::fclose(f);
        std::size_t pos = 0, good = 0;
        while (pos < text.size()) {
            const std::size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) break;  // torn tail: never acknowledged
            const std::string line = text.substr(pos, nl - pos);
            if (line.size() < 10 || line[8] != ' ' || detail::crc_hex(line.substr(9)) != line.substr(0, 8)) break;
            const auto rec = nlohmann::json::parse(line.substr(9));
            if (rec.at("seq").get<std::uint64_t>() > s.seq) apply_in_place(s, rec);
            pos = good = nl + 1;
        }
        if (good < text.size()) {
            // Drop the unacknowledged tail so new appends follow a valid line.
            if (::truncate(log_path().c_str(), static_cast<off_t>(good)) != 0)
                throw IoError("cannot truncate the torn tail of the store log");
        }
    }

    std::filesystem::path dir_;
    std::size_t snapshot_every_;
    std::size_t since_snapshot_ = 0;
    int fd_ = -1;
    std::mutex write_mu_;
    std::shared_ptr<const StoreState> state_;
};

}  // namespace glacier::server
