#pragma once

// Raw scanner exports -> canonical <slide><sector>/zNNNN.<ext> layout with scale metadata.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "phyto/error.hpp"
#include "phyto/image.hpp"
#include "phyto/image_io.hpp"
#include "phyto/ini.hpp"
#include "phyto/util.hpp"

namespace phyto::ingest {

namespace fs = std::filesystem;

struct SliceIdentity {
    std::string slide_id;  // UABPL-NNNNNN
    char sector = 'a';
    int z_index = 0;
    int chunk = 0;

    [[nodiscard]] std::string sector_id() const { return slide_id + sector; }
    friend bool operator==(const SliceIdentity&, const SliceIdentity&) = default;
};

struct ScaleInfo {
    double microns_per_pixel = 0.091;
    double z_step = 0.267;
    int n_slices = 1;
    std::optional<int> chunk_boundary;

    friend bool operator==(const ScaleInfo&, const ScaleInfo&) = default;
};

struct ZStack {
    std::string slide_id;
    char sector = 'a';
    std::vector<RgbImage> slices;
    ScaleInfo scale;

    [[nodiscard]] std::string sector_id() const { return slide_id + sector; }
    [[nodiscard]] int width() const { return slices.empty() ? 0 : slices.front().width(); }
    [[nodiscard]] int height() const { return slices.empty() ? 0 : slices.front().height(); }
    [[nodiscard]] int depth() const { return static_cast<int>(slices.size()); }
};

inline bool is_canonical_slide_id(std::string_view id) {
    static const std::regex re(R"(^UABPL-\d{6}$)");
    return std::regex_match(id.begin(), id.end(), re);
}

/// Splits "UABPL-240125d" into ("UABPL-240125", 'd').
inline std::pair<std::string, char> parse_sector_id(std::string_view sector_id) {
    static const std::regex re(R"(^(UABPL-\d{6})([a-z])$)");
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_match(sector_id.begin(), sector_id.end(), m, re))
        fail(Errc::UnrecognisedName, "not a canonical sector id: " + std::string(sector_id));
    return {m[1].str(), m[2].str()[0]};
}

/// User-supplied grammar for scanner export names. INI layout:
///   pattern = <regex with slide, sector, z capture groups>
///   slide_group = 1 / sector_group = 2 / z_group = 3
///   [slides]  scanner token -> UABPL-NNNNNN
///   [sectors] scanner token -> sector letter
struct MappingRule {
    std::string pattern;
    int slide_group = 1;
    int sector_group = 2;
    int z_group = 3;
    std::map<std::string, std::string> slides;
    std::map<std::string, std::string> sectors;

    static MappingRule parse(const std::string& text) {
        const auto ini = IniFile::parse(text);
        MappingRule rule;
        auto pat = ini.get("", "pattern");
        if (!pat) fail(Errc::MissingKey, "mapping rule needs 'pattern'");
        rule.pattern = *pat;
        if (auto v = ini.get("", "slide_group")) rule.slide_group = static_cast<int>(parse_int(*v));
        if (auto v = ini.get("", "sector_group")) rule.sector_group = static_cast<int>(parse_int(*v));
        if (auto v = ini.get("", "z_group")) rule.z_group = static_cast<int>(parse_int(*v));
        rule.slides = ini.section("slides");
        rule.sectors = ini.section("sectors");
        for (const auto& [token, id] : rule.slides)
            if (!is_canonical_slide_id(id)) fail(Errc::InvalidArgument, "mapping target is not canonical: " + id);
        for (const auto& [token, s] : rule.sectors)
            if (s.size() != 1 || s[0] < 'a' || s[0] > 'z')
                fail(Errc::InvalidArgument, "sector mapping must be one lowercase letter: " + s);
        return rule;
    }

    static MappingRule load(const fs::path& path) { return parse(read_file(path)); }
};

inline std::string format_canonical(const SliceIdentity& id, std::string_view ext = "png") {
    char z[16];
    std::snprintf(z, sizeof z, "_z%04d.", id.z_index);
    return id.sector_id() + z + std::string(ext);
}

/// Canonical names parse directly; anything else goes through `rule` when given.
inline SliceIdentity parse_scanner_filename(std::string_view raw_name, const MappingRule* rule = nullptr) {
    static const std::regex canonical(R"(^(UABPL-\d{6})([a-z])_z(\d{4,})\.(png|jpg|jpeg)$)",
                                      std::regex::icase);
    const std::string name(raw_name);
    std::smatch m;
    if (std::regex_match(name, m, canonical)) {
        SliceIdentity id;
        id.slide_id = m[1].str();
        id.sector = static_cast<char>(std::tolower(m[2].str()[0]));
        id.z_index = static_cast<int>(parse_int(m[3].str()));
        return id;
    }
    if (rule) {
        const std::regex re(rule->pattern);
        if (std::regex_match(name, m, re)) {
            const auto max_group = static_cast<int>(m.size()) - 1;
            if (rule->slide_group > max_group || rule->sector_group > max_group || rule->z_group > max_group)
                fail(Errc::InvalidArgument, "mapping rule group index exceeds pattern groups");
            const auto slide_tok = m[rule->slide_group].str();
            const auto sector_tok = m[rule->sector_group].str();
            auto slide = rule->slides.find(slide_tok);
            if (slide == rule->slides.end())
                fail(Errc::UnrecognisedName, name + ": no slide mapping for token '" + slide_tok + "'");
            std::string sector;
            if (auto s = rule->sectors.find(sector_tok); s != rule->sectors.end())
                sector = s->second;
            else if (sector_tok.size() == 1 && sector_tok[0] >= 'a' && sector_tok[0] <= 'z')
                sector = sector_tok;
            else
                fail(Errc::UnrecognisedName, name + ": no sector mapping for token '" + sector_tok + "'");
            SliceIdentity id;
            id.slide_id = slide->second;
            id.sector = sector[0];
            id.z_index = static_cast<int>(parse_int(m[rule->z_group].str()));
            return id;
        }
    }
    fail(Errc::UnrecognisedName, "unrecognised slice name: " + name);
}

// ---------------------------------------------------------------- scale metadata

inline ScaleInfo parse_scale_metadata(const std::string& text) {
    const auto ini = IniFile::parse(text);
    auto lookup = [&](const std::string& key) -> std::optional<std::string> {
        if (auto v = ini.get("", key)) return v;
        for (const auto& section : {"scale", "metadata", "stack"})
            if (auto v = ini.get(section, key)) return v;
        return std::nullopt;
    };
    auto require = [&](const std::string& key) {
        auto v = lookup(key);
        if (!v) fail(Errc::MissingKey, "metadata missing '" + key + "'");
        return *v;
    };
    ScaleInfo s;
    s.microns_per_pixel = parse_double(require("microns_per_pixel"));
    s.z_step = parse_double(require("z_step"));
    const auto n = parse_int(require("n_slices"));
    if (!(s.microns_per_pixel > 0.0)) fail(Errc::NonPositiveScale, "microns_per_pixel must be > 0");
    if (!(s.z_step > 0.0)) fail(Errc::NonPositiveScale, "z_step must be > 0");
    if (n < 1) fail(Errc::NonPositiveScale, "n_slices must be >= 1");
    s.n_slices = static_cast<int>(n);
    if (auto b = lookup("chunk_boundary"); b && !trim(*b).empty()) {
        const auto boundary = parse_int(*b);
        if (boundary <= 0 || boundary >= s.n_slices)
            fail(Errc::InvalidArgument, "chunk_boundary must lie in (0, n_slices)");
        s.chunk_boundary = static_cast<int>(boundary);
    }
    return s;
}

inline ScaleInfo read_scale_metadata(const fs::path& path) { return parse_scale_metadata(read_file(path)); }

inline std::string format_scale_metadata(const ScaleInfo& s) {
    std::string out = "microns_per_pixel = " + format_double(s.microns_per_pixel) + "\n";
    out += "z_step = " + format_double(s.z_step) + "\n";
    out += "n_slices = " + std::to_string(s.n_slices) + "\n";
    if (s.chunk_boundary) out += "chunk_boundary = " + std::to_string(*s.chunk_boundary) + "\n";
    return out;
}

// ---------------------------------------------------------------- stacks

inline std::string slice_filename(int z, std::string_view ext = "png") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "z%04d.", z);
    return buf + std::string(ext);
}

/// Loads `<dir>/zNNNN.(png|jpg)` + `<dir>/metadata.ini`; the directory name is the sector id.
inline ZStack load_zstack(const fs::path& sector_dir) {
    if (!fs::is_directory(sector_dir)) fail(Errc::IoFailure, "not a directory: " + sector_dir.string());
    ZStack stack;
    std::tie(stack.slide_id, stack.sector) = parse_sector_id(sector_dir.filename().string());
    stack.scale = read_scale_metadata(sector_dir / "metadata.ini");

    static const std::regex slice_re(R"(^z(\d{4,})\.(png|jpg|jpeg)$)", std::regex::icase);
    std::map<int, fs::path> by_z;
    for (const auto& entry : fs::directory_iterator(sector_dir)) {
        const auto name = entry.path().filename().string();
        std::smatch m;
        if (!std::regex_match(name, m, slice_re)) continue;
        const int z = static_cast<int>(parse_int(m[1].str()));
        if (!by_z.emplace(z, entry.path()).second)
            fail(Errc::DuplicateSlice, sector_dir.string() + ": z=" + std::to_string(z) + " appears twice");
    }
    for (int z = 0; z < stack.scale.n_slices; ++z)
        if (!by_z.contains(z)) fail(Errc::GapInStack, sector_dir.string() + ": missing z=" + std::to_string(z));
    if (static_cast<int>(by_z.size()) != stack.scale.n_slices)
        fail(Errc::GapInStack, sector_dir.string() + ": slices beyond n_slices");

    stack.slices.reserve(by_z.size());
    for (const auto& [z, path] : by_z) {
        auto img = io::read_rgb(path);
        if (!stack.slices.empty() && !img.same_size(stack.slices.front()))
            fail(Errc::DimensionMismatch, path.string() + " differs in size from z=0");
        stack.slices.push_back(std::move(img));
    }
    return stack;
}

inline void write_zstack(const fs::path& sector_dir, const ZStack& stack) {
    fs::create_directories(sector_dir);
    for (int z = 0; z < stack.depth(); ++z) io::write_png(sector_dir / slice_filename(z), stack.slices[z]);
    write_file(sector_dir / "metadata.ini", format_scale_metadata(stack.scale));
}

// ---------------------------------------------------------------- ingest run

struct IngestEntry {
    std::string source;
    SliceIdentity identity;
    std::string destination;
    std::string sha256;
};

/// Tracks identities within one run so duplicates are caught across files.
class IngestRun {
public:
    explicit IngestRun(std::optional<MappingRule> rule = std::nullopt) : rule_(std::move(rule)) {}

    SliceIdentity accept(std::string_view raw_name) {
        auto id = parse_scanner_filename(raw_name, rule_ ? &*rule_ : nullptr);
        if (!seen_.emplace(id.sector_id(), id.z_index).second)
            fail(Errc::DuplicateSlice, std::string(raw_name) + " duplicates " + format_canonical(id));
        return id;
    }

private:
    std::optional<MappingRule> rule_;
    std::set<std::pair<std::string, int>> seen_;
};

/// Copies a flat export directory into the canonical layout and returns the manifest entries.
/// Metadata files named `<slide><sector>.ini` (and opaque `.xml` sidecars) are placed next to
/// their sector's slices; a single `metadata.ini` in `raw_dir` applies to every sector.
inline std::vector<IngestEntry> ingest_directory(const fs::path& raw_dir, const fs::path& out_dir,
                                                 std::optional<MappingRule> rule = std::nullopt) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(raw_dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());

    IngestRun run(std::move(rule));
    std::vector<IngestEntry> entries;
    std::set<std::string> sectors;
    std::map<std::string, fs::path> metadata;
    std::vector<std::pair<std::string, fs::path>> sidecars;
    std::optional<fs::path> shared_metadata;
    static const std::regex sector_meta(R"(^(UABPL-\d{6}[a-z])\.(ini|xml)$)");

    for (const auto& path : files) {
        const auto name = path.filename().string();
        std::smatch m;
        if (name == "metadata.ini") {
            shared_metadata = path;
            continue;
        }
        if (std::regex_match(name, m, sector_meta)) {
            if (m[2] == "ini")
                metadata[m[1].str()] = path;
            else
                sidecars.emplace_back(m[1].str(), path);
            continue;
        }
        const auto id = run.accept(name);
        auto ext = path.extension().string().substr(1);
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == "jpeg") ext = "jpg";
        const auto dest = out_dir / id.sector_id() / slice_filename(id.z_index, ext);
        const auto bytes = read_file(path);
        write_file(dest, bytes);
        entries.push_back({name, id, fs::relative(dest, out_dir).generic_string(), sha256_hex(bytes)});
        sectors.insert(id.sector_id());
    }
    for (const auto& sector : sectors) {
        const auto dir = out_dir / sector;
        if (auto it = metadata.find(sector); it != metadata.end())
            fs::copy_file(it->second, dir / "metadata.ini", fs::copy_options::overwrite_existing);
        else if (shared_metadata)
            fs::copy_file(*shared_metadata, dir / "metadata.ini", fs::copy_options::overwrite_existing);
        else
            fail(Errc::MissingKey, "no metadata for sector " + sector);
        const auto scale = read_scale_metadata(dir / "metadata.ini");
        for (auto& e : entries)
            if (e.identity.sector_id() == sector && scale.chunk_boundary)
                e.identity.chunk = e.identity.z_index >= *scale.chunk_boundary ? 1 : 0;
    }
    for (const auto& [sector, path] : sidecars)
        if (sectors.contains(sector))
            fs::copy_file(path, out_dir / sector / "metadata.xml", fs::copy_options::overwrite_existing);

    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        return std::tie(a.identity.slide_id, a.identity.sector, a.identity.z_index) <
               std::tie(b.identity.slide_id, b.identity.sector, b.identity.z_index);
    });
    return entries;
}

inline nlohmann::json ingest_manifest_json(const std::vector<IngestEntry>& entries) {
    auto arr = nlohmann::json::array();
    for (const auto& e : entries)
        arr.push_back({{"source", e.source},
                       {"slide_id", e.identity.slide_id},
                       {"sector", std::string(1, e.identity.sector)},
                       {"z_index", e.identity.z_index},
                       {"chunk", e.identity.chunk},
                       {"path", e.destination},
                       {"sha256", e.sha256}});
    return {{"slices", arr}};
}

}  // namespace phyto::ingest
