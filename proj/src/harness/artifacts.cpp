#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "uforge/harness.hpp"

namespace uforge::harness {

using nlohmann::json;
namespace fs = std::filesystem;

std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("manifest: cannot hash missing file " + path);
    Fnv1a h;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h.add_bytes(buf, static_cast<size_t>(f.gcount()));
    }
    return Fnv1a::hex(h.digest());
}

void write_text_atomic(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        f << text;
        if (!f) throw IoError("write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

std::string Manifest::hash() const {
    // out_dir is where the experiment lives, not what it is; drop it so the
    // same config run in two locations hashes identically
    json cfg = json::parse(config_json);
    cfg.erase("out_dir");
    Fnv1a h;
    h.add_string(cfg.dump(2));
    h.add_string(tool_version);
    for (const auto& [path, digest] : artifacts) {  // std::map: sorted
        h.add_string(path);
        h.add_string(digest);
    }
    return Fnv1a::hex(h.digest());
}

namespace {

Manifest load_manifest_if_matching(const std::string& path,
                                   const std::string& config_json) {
    Manifest m;
    m.config_json = config_json;
    m.tool_version = kToolVersion;
    std::ifstream f(path);
    if (!f) return m;
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::parse_error&) {
        return m;  // unreadable manifest: start fresh
    }
    if (!doc.contains("config") || doc["config"].dump(2) + "\n" != config_json)
        return m;  // different experiment: do not merge
    if (doc.contains("artifacts"))
        for (const auto& [k, v] : doc["artifacts"].items())
            m.artifacts[k] = v.get<std::string>();
    if (doc.contains("timings"))
        for (const auto& [k, v] : doc["timings"].items())
            m.timings[k] = v.get<double>();
    return m;
}

}  // namespace

ArtifactStore::ArtifactStore(const RunConfig& cfg)
    : out_dir_(cfg.out_dir), config_json_(cfg.to_json_string()) {
    fs::create_directories(out_dir_);
}

std::string ArtifactStore::path(const std::string& rel) const {
    return (fs::path(out_dir_) / rel).string();
}

void ArtifactStore::record(const std::string& rel) { recorded_.push_back(rel); }

void ArtifactStore::commit(const std::string& command, double seconds) {
    std::string manifest_path = path("manifest.json");
    Manifest m = load_manifest_if_matching(manifest_path, config_json_);
    for (const auto& rel : recorded_) m.artifacts[rel] = hash_file(path(rel));
    m.timings[command] = seconds;

    json doc;
    doc["tool_version"] = m.tool_version;
    doc["config"] = json::parse(m.config_json);
    json arts = json::object();
    for (const auto& [k, v] : m.artifacts) arts[k] = v;
    doc["artifacts"] = arts;
    json times = json::object();
    for (const auto& [k, v] : m.timings) times[k] = v;
    doc["timings"] = times;
    doc["manifest_hash"] = m.hash();  // covers config + artifacts, never timings
    write_text_atomic(manifest_path, doc.dump(2) + "\n");
}

}  // namespace uforge::harness
