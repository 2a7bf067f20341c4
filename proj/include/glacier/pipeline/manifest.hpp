#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "glacier/container.hpp"
#include "glacier/geodata/labels.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/pipeline/split.hpp"

namespace glacier {

/// One manifest row. File paths are relative to the manifest's directory.
struct ManifestEntry {
    PatchMeta meta;
    std::string patch_file;
    std::string mask_file;
    std::optional<SplitPart> split;

    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::optional<SplitManifest> split;

    const ManifestEntry& at(const std::string& patch_id) const {
        for (const auto& e : entries)
            if (e.meta.patch_id == patch_id) return e;
        throw ConfigError("manifest has no patch '" + patch_id + "'");
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& e : entries) out.push_back(e.meta.patch_id);
        return out;
    }

    std::vector<GeoPoint> centroids() const {
        std::vector<GeoPoint> out;
        for (const auto& e : entries) out.push_back({e.meta.patch_id, e.meta.centroid()});
        return out;
    }

    /// Record a split on the manifest and on every entry.
    void apply(const SplitManifest& s) {
        for (auto& e : entries) {
            auto it = s.assignment.find(e.meta.patch_id);
            if (it == s.assignment.end())
                throw ValidationError("split does not assign patch '" + e.meta.patch_id + "'");
            e.split = it->second;
        }
        if (s.assignment.size() != entries.size())
            throw ValidationError("split assigns " + std::to_string(s.assignment.size()) + " patches, manifest has " +
                                  std::to_string(entries.size()));
        split = s;
    }

    std::vector<const ManifestEntry*> part(SplitPart p) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries)
            if (e.split == p) out.push_back(&e);
        return out;
    }
};

inline nlohmann::json manifest_feature(const ManifestEntry& e) {
    const auto& b = e.meta.bounds;
    nlohmann::json props = to_json(e.meta);
    props["patch_file"] = e.patch_file;
    props["mask_file"] = e.mask_file;
    props["split"] = e.split ? nlohmann::json(split_name(*e.split)) : nlohmann::json(nullptr);
    return {{"type", "Feature"},
            {"geometry",
             {{"type", "Polygon"},
              {"coordinates",
               {{{b.min_x, b.min_y}, {b.max_x, b.min_y}, {b.max_x, b.max_y}, {b.min_x, b.max_y}, {b.min_x, b.min_y}}}}}},
            {"properties", props}};
}

inline std::string manifest_to_geojson(const Manifest& m) {
    nlohmann::json doc = {{"type", "FeatureCollection"}, {"features", nlohmann::json::array()}};
    for (const auto& e : m.entries) doc["features"].push_back(manifest_feature(e));
    if (m.split) doc["split"] = m.split->to_json();
    return doc.dump(1);
}

inline Manifest manifest_from_geojson(const std::string& text) {
    nlohmann::json doc = detail::parse_json_text(text, "manifest");
    Manifest m;
    for (const auto& f : detail::feature_list(doc)) {
        const auto& p = f.at("properties");
        ManifestEntry e;
        e.meta = meta_from_json(p);
        e.patch_file = p.value("patch_file", "");
        e.mask_file = p.value("mask_file", "");
        if (p.contains("split") && p["split"].is_string()) e.split = parse_split(p["split"].get<std::string>());
        m.entries.push_back(std::move(e));
    }
    if (doc.contains("split")) m.split = SplitManifest::from_json(doc["split"]);
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    return manifest_from_geojson(detail::read_text(path));
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    const std::string text = manifest_to_geojson(m);
    container::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Single serialization point for manifest updates. Appends take an
/// in-process mutex and an exclusive flock on "<manifest>.lock", re-read the
/// current file, add the entry, and replace the file by atomic rename.
class ManifestWriter {
public:
    explicit ManifestWriter(std::filesystem::path path) : path_(std::move(path)) {}

    void append(const ManifestEntry& entry) {
        std::lock_guard<std::mutex> guard(mutex_);
        FileLock lock(lock_path());
        Manifest m = std::filesystem::exists(path_) ? load_manifest(path_) : Manifest{};
        for (const auto& e : m.entries)
            if (e.meta.patch_id == entry.meta.patch_id)
                throw ValidationError("manifest already has patch '" + entry.meta.patch_id + "'");
        m.entries.push_back(entry);
        save_manifest(m, path_);
    }

    /// Write patch and mask files next to the manifest and append their entry.
    ManifestEntry add(const PatchPair& pair, const std::filesystem::path& patch_dir) {
        const auto base = path_.parent_path();
        ManifestEntry e;
        e.meta = pair.patch.meta;
        e.patch_file = std::filesystem::relative(write_patch(pair.patch, patch_dir), base).string();
        e.mask_file = std::filesystem::relative(write_patch(pair.mask, patch_dir), base).string();
        append(e);
        return e;
    }

    const std::filesystem::path& path() const { return path_; }

private:
    struct FileLock {
        explicit FileLock(const std::filesystem::path& p) {
            fd = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
            if (fd < 0) throw IoError("cannot open lock file '" + p.string() + "'");
            if (::flock(fd, LOCK_EX) != 0) {
                ::close(fd);
                throw IoError("cannot lock '" + p.string() + "'");
            }
        }
        ~FileLock() {
            ::flock(fd, LOCK_UN);
            ::close(fd);
        }
        int fd = -1;
    };

    std::filesystem::path lock_path() const {
        auto p = path_;
        p += ".lock";
        return p;
    }

    std::filesystem::path path_;
    std::mutex mutex_;
};

/// Load the patch/mask pair of a manifest entry.
inline PatchPair load_pair(const ManifestEntry& e, const std::filesystem::path& manifest_path) {
    const auto base = manifest_path.parent_path();
    return {read_patch(base / e.patch_file), read_mask(base / e.mask_file)};
}

}  // namespace glacier
