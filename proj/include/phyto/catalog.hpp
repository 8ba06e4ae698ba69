#pragma once

// Label journal (append-only JSONL + snapshot), codebook, label queries and dataset assembly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/inference_gate.hpp"
#include "phyto/util.hpp"
#include "phyto/wordlist.hpp"

namespace phyto::catalog {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class Quality { Singlet, PoorlySegmented, Trash, Multicell, SpongeSpicule, Diatom };

inline constexpr std::array<std::string_view, 6> kQualityNames{"Singlet",   "PoorlySegmented", "Trash",
                                                               "Multicell", "SpongeSpicule",   "Diatom"};

inline std::string_view quality_name(Quality q) { return kQualityNames[static_cast<std::size_t>(q)]; }

inline Quality parse_quality(std::string_view s) {
    for (std::size_t i = 0; i < kQualityNames.size(); ++i)
        if (kQualityNames[i] == s) return static_cast<Quality>(i);
    fail(Errc::InvalidArgument, "unknown quality value '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- timestamps

/// Milliseconds since the Unix epoch, UTC.
using Millis = std::int64_t;

inline std::string format_timestamp(Millis ms) {
    const auto secs = static_cast<std::time_t>(ms >= 0 ? ms / 1000 : (ms - 999) / 1000);
    const int frac = static_cast<int>(ms - static_cast<Millis>(secs) * 1000);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, frac);
    return buf;
}

/// Accepts `YYYY-MM-DDTHH:MM:SS[.fff]Z`.
inline Millis parse_timestamp(std::string_view s) {
    std::tm tm{};
    int frac = 0;
    const std::string str(s);
    int n = 0;
    if (std::sscanf(str.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour,
                    &tm.tm_min, &tm.tm_sec, &n) != 6)
        fail(Errc::ParseError, "bad timestamp '" + str + "'");
    std::string_view rest = s.substr(static_cast<std::size_t>(n));
    if (!rest.empty() && rest[0] == '.') {
        std::size_t i = 1;
        int digits = 0;
        while (i < rest.size() && std::isdigit(static_cast<unsigned char>(rest[i]))) {
            if (digits < 3) frac = frac * 10 + (rest[i] - '0'), ++digits;
            ++i;
        }
        if (digits == 0) fail(Errc::ParseError, "bad timestamp '" + str + "'");
        while (digits < 3) frac *= 10, ++digits;
        rest = rest.substr(i);
    }
    if (rest != "Z") fail(Errc::ParseError, "timestamp must be UTC ('Z' suffix): '" + str + "'");
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    return static_cast<Millis>(timegm(&tm)) * 1000 + frac;
}

inline Millis now_millis() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

// ---------------------------------------------------------------- codebook

class Codebook {
public:
    Codebook() = default;

    void add(const std::string& code, const std::string& name) {
        const auto c = std::string(trim(code));
        if (c.empty()) fail(Errc::ParseError, "empty code in codebook");
        if (!entries_.emplace(c, std::string(trim(name))).second) fail(Errc::ParseError, "duplicate code " + c);
    }

    static Codebook parse(std::string_view text) {
        const auto t = csv::parse(text);
        if (t.header != csv::Row{"code", "name"}) fail(Errc::ParseError, "codebook header must be 'code,name'");
        Codebook cb;
        for (const auto& r : t.rows) cb.add(r[0], r[1]);
        if (cb.entries_.empty()) fail(Errc::ParseError, "codebook is empty");
        return cb;
    }
    static Codebook load(const std::filesystem::path& path) { return parse(read_file(path)); }

    [[nodiscard]] bool contains(const std::string& code) const { return entries_.count(code) > 0; }
    [[nodiscard]] const std::map<std::string, std::string>& entries() const noexcept { return entries_; }
    [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }

    /// Machine class names listed in a code's display name (separated by '/' or ';').
    [[nodiscard]] std::vector<std::string> machine_classes(const std::string& code) const {
        std::vector<std::string> out;
        auto it = entries_.find(code);
        if (it == entries_.end()) return out;
        std::string cur;
        for (char ch : it->second + "/") {
            if (ch == '/' || ch == ';') {
                auto t = std::string(trim(cur));
                if (!t.empty()) out.push_back(t);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        return out;
    }

    /// Codes whose display name lists the machine class, or the class itself when it is a code.
    [[nodiscard]] std::vector<std::string> codes_for_class(const std::string& machine_class) const {
        std::vector<std::string> out;
        for (const auto& [code, _] : entries_) {
            const auto classes = machine_classes(code);
            if (code == machine_class || std::find(classes.begin(), classes.end(), machine_class) != classes.end())
                out.push_back(code);
        }
        return out;
    }

private:
    std::map<std::string, std::string> entries_;
};

// ---------------------------------------------------------------- records

struct LabelRecord {
    std::string segment_id;
    std::string reviewer;
    Millis timestamp = 0;
    Quality quality = Quality::Singlet;
    std::optional<std::string> morph_code;
    std::string notes;
    std::uint64_t id = 0;  // journal sequence number, assigned on upsert

    friend bool operator==(const LabelRecord&, const LabelRecord&) = default;

    [[nodiscard]] std::string slide_id() const { return segment_id.substr(0, std::min<std::size_t>(12, segment_id.size())); }
};

inline std::vector<std::string> tags_in(const std::string& notes) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < notes.size(); ++i) {
        if (notes[i] != '#' || (i > 0 && !std::isspace(static_cast<unsigned char>(notes[i - 1])))) continue;
        std::size_t j = i + 1;
        while (j < notes.size() && (std::isalnum(static_cast<unsigned char>(notes[j])) || notes[j] == '_' || notes[j] == '-'))
            ++j;
        if (j > i + 1) out.push_back(notes.substr(i + 1, j - i - 1));
        i = j - 1;
    }
    return out;
}

inline json record_to_json(const LabelRecord& r) {
    return {{"schema", kSchemaVersion},
            {"id", r.id},
            {"segment_id", r.segment_id},
            {"reviewer", r.reviewer},
            {"timestamp", format_timestamp(r.timestamp)},
            {"quality", quality_name(r.quality)},
            {"morph_code", r.morph_code ? json(*r.morph_code) : json(nullptr)},
            {"notes", r.notes}};
}

inline LabelRecord record_from_json(const json& j) {
    try {
        if (j.at("schema").get<int>() != kSchemaVersion)
            fail(Errc::WorkspaceCorrupt, "unsupported journal schema " + j.at("schema").dump());
        LabelRecord r;
        r.id = j.at("id").get<std::uint64_t>();
        r.segment_id = j.at("segment_id").get<std::string>();
        r.reviewer = j.at("reviewer").get<std::string>();
        r.timestamp = parse_timestamp(j.at("timestamp").get<std::string>());
        r.quality = parse_quality(j.at("quality").get<std::string>());
        if (!j.at("morph_code").is_null()) r.morph_code = j.at("morph_code").get<std::string>();
        r.notes = j.value("notes", "");
        return r;
    } catch (const json::exception& e) {
        fail(Errc::WorkspaceCorrupt, std::string("bad journal record: ") + e.what());
    }
}

struct LabelFilter {
    std::optional<std::string> slide;
    std::optional<Quality> quality;
    std::optional<std::string> code;
    std::optional<std::string> reviewer;
    // Max-probability range, joined against a probability table by segment_id.
    std::optional<double> p_min;
    std::optional<double> p_max;
    const inference::ProbabilityTable* table = nullptr;
};

/// Append-only label store. Mutations are serialised; readers see a consistent state.
class LabelStore {
public:
    LabelStore() = default;

    /// Opens (or creates) a journal. A snapshot beside it, if present and consistent, shortcuts replay.
    explicit LabelStore(std::filesystem::path journal, Codebook codebook = {}, std::set<std::string> known = {})
        : journal_(std::move(journal)), codebook_(std::move(codebook)), known_segments_(std::move(known)) {
        replay();
    }

    void set_codebook(Codebook cb) {
        std::unique_lock lock(mutex_);
        codebook_ = std::move(cb);
    }
    void set_known_segments(std::set<std::string> known) {
        std::unique_lock lock(mutex_);
        known_segments_ = std::move(known);
    }

    /// Validates, journals and applies a record; returns its id. A zero timestamp means "now".
    std::uint64_t upsert(LabelRecord record) {
        std::unique_lock lock(mutex_);
        validate(record);
        if (record.timestamp == 0) record.timestamp = now_millis();
        record.id = next_id_;
        if (!journal_.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(journal_.parent_path().empty() ? "." : journal_.parent_path(), ec);
            std::ofstream out(journal_, std::ios::app | std::ios::binary);
            out << record_to_json(record).dump() << '\n';
            out.flush();
            if (!out) fail(Errc::IoFailure, "cannot append to " + journal_.string());
        }
        ++journal_lines_;
        apply(record);
        return record.id;
    }

    void validate(const LabelRecord& r) const {
        if (trim(r.reviewer).empty()) fail(Errc::MissingReviewer, "reviewer initials are required");
        if (r.segment_id.empty()) fail(Errc::UnknownSegment, "segment_id is required");
        if (!known_segments_.empty() && !known_segments_.count(r.segment_id))
            fail(Errc::UnknownSegment, "unknown segment " + r.segment_id);
        if (r.morph_code && r.quality != Quality::Singlet)
            fail(Errc::CodeNotInCodebook, "a morphotype code requires quality Singlet");
        if (r.quality == Quality::Singlet) {
            if (!r.morph_code) fail(Errc::CodeNotInCodebook, "a Singlet label requires a morphotype code");
            if (!codebook_.empty() && !codebook_.contains(*r.morph_code))
                fail(Errc::CodeNotInCodebook, "code '" + *r.morph_code + "' is not in the codebook");
        }
    }

    /// Latest record per (segment, reviewer), ordered by (timestamp, segment_id, reviewer).
    [[nodiscard]] std::vector<LabelRecord> query(const LabelFilter& f = {}) const {
        std::shared_lock lock(mutex_);
        std::vector<LabelRecord> out;
        for (const auto& [key, r] : latest_) {
            if (f.slide && r.segment_id.rfind(*f.slide, 0) != 0) continue;
            if (f.quality && r.quality != *f.quality) continue;
            if (f.code && r.morph_code != *f.code) continue;
            if (f.reviewer && r.reviewer != *f.reviewer) continue;
            if (f.p_min || f.p_max) {
                if (!f.table) fail(Errc::NoTableLoaded, "probability filter needs a probability table");
                const auto* row = f.table->find(r.segment_id);
                if (!row) continue;
                const double p = *std::max_element(row->begin(), row->end());
                if ((f.p_min && p < *f.p_min) || (f.p_max && p > *f.p_max)) continue;
            }
            out.push_back(r);
        }
        std::sort(out.begin(), out.end(), [](const LabelRecord& a, const LabelRecord& b) {
            return std::tie(a.timestamp, a.segment_id, a.reviewer, a.id) <
                   std::tie(b.timestamp, b.segment_id, b.reviewer, b.id);
        });
        return out;
    }

    /// Every journalled record for a segment (all reviewers), in journal order.
    [[nodiscard]] std::vector<LabelRecord> history(const std::string& segment_id) const {
        std::shared_lock lock(mutex_);
        std::vector<LabelRecord> out;
        for_each_journal_record([&](const LabelRecord& r) {
            if (r.segment_id == segment_id) out.push_back(r);
        });
        return out;
    }

    [[nodiscard]] std::size_t journal_size() const {
        std::shared_lock lock(mutex_);
        return journal_lines_;
    }

    /// Writes the visible state beside the journal; later opens replay only newer lines.
    void snapshot() const {
        std::shared_lock lock(mutex_);
        if (journal_.empty()) return;
        json j{{"schema", kSchemaVersion}, {"journal_lines", journal_lines_}, {"next_id", next_id_},
               {"journal_sha256_prefix", journal_prefix_hash(journal_lines_)}};
        auto& recs = j["records"] = json::array();
        for (const auto& [key, r] : latest_) recs.push_back(record_to_json(r));
        write_file(snapshot_path(), j.dump(1) + "\n");
    }

    [[nodiscard]] std::filesystem::path snapshot_path() const {
        return journal_.string() + ".snapshot.json";
    }

    [[nodiscard]] const Codebook& codebook() const noexcept { return codebook_; }

private:
    void apply(const LabelRecord& r) {
        latest_[{r.segment_id, r.reviewer}] = r;
        next_id_ = std::max(next_id_, r.id + 1);
    }

    template <typename F>
    void for_each_journal_record(F&& fn, std::size_t skip = 0) const {
        if (journal_.empty() || !std::filesystem::exists(journal_)) return;
        std::ifstream in(journal_, std::ios::binary);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            if (n++ < skip) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                fail(Errc::WorkspaceCorrupt, journal_.string() + ": line " + std::to_string(n) + ": " + e.what());
            }
            fn(record_from_json(j));
        }
    }

    [[nodiscard]] std::string journal_prefix_hash(std::size_t lines) const {
        if (journal_.empty() || !std::filesystem::exists(journal_)) return sha256_hex("");
        std::ifstream in(journal_, std::ios::binary);
        std::string line, prefix;
        std::size_t n = 0;
        while (n < lines && std::getline(in, line)) {
            if (trim(line).empty()) continue;
            prefix += line + "\n";
            ++n;
        }
        return sha256_hex(prefix);
    }

    void replay() {
        latest_.clear();
        next_id_ = 1;
        journal_lines_ = 0;
        std::size_t skip = 0;
        if (std::filesystem::exists(snapshot_path())) {
            try {
                const auto j = json::parse(read_file(snapshot_path()));
                const auto lines = j.at("journal_lines").get<std::size_t>();
                if (j.at("schema").get<int>() == kSchemaVersion &&
                    j.at("journal_sha256_prefix").get<std::string>() == journal_prefix_hash(lines)) {
                    for (const auto& r : j.at("records")) apply(record_from_json(r));
                    next_id_ = std::max(next_id_, j.at("next_id").get<std::uint64_t>());
                    skip = journal_lines_ = lines;
                }
            } catch (const std::exception&) {
                // Stale or damaged snapshot: fall back to full replay.
                latest_.clear();
                next_id_ = 1;
                skip = journal_lines_ = 0;
            }
        }
        for_each_journal_record(
            [&](const LabelRecord& r) {
                apply(r);
                ++journal_lines_;
            },
            skip);
    }

    std::filesystem::path journal_;
    Codebook codebook_;
    std::set<std::string> known_segments_;
    std::map<std::pair<std::string, std::string>, LabelRecord> latest_;
    std::uint64_t next_id_ = 1;
    std::size_t journal_lines_ = 0;
    mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------- datasets

enum class LabelType { Classified, AllClasses };

inline std::string_view label_type_name(LabelType t) { return t == LabelType::Classified ? "Classified" : "AllClasses"; }

inline LabelType parse_label_type(std::string_view s) {
    if (s == "Classified") return LabelType::Classified;
    if (s == "AllClasses") return LabelType::AllClasses;
    fail(Errc::InvalidArgument, "label type must be Classified or AllClasses, got '" + std::string(s) + "'");
}

struct Exclusions {
    std::set<Quality> qualities;
    std::set<std::string> tags;
};

struct DatasetItem {
    std::string segment_id;
    std::string cls;
    friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

struct ClassCount {
    std::size_t train = 0;
    std::size_t test = 0;
    friend bool operator==(const ClassCount&, const ClassCount&) = default;
};

struct DatasetManifest {
    std::string name;
    LabelType label_type = LabelType::Classified;
    double train_ratio = 0.8;
    std::uint64_t seed = 0;
    std::vector<DatasetItem> train;
    std::vector<DatasetItem> test;
    std::map<std::string, ClassCount> counts;

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Train share of a class: ratio * n rounded half up.
inline std::size_t train_count(std::size_t n, double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
}

inline std::string random_word(std::uint64_t seed) {
    auto rng = make_rng(seed, 0x776f7264);  // "word"
    return std::string(kWordList[uniform_below(rng, kWordList.size())]);
}

inline std::string dataset_name(LabelType t, const std::string& yyyymmdd, std::uint64_t seed) {
    return std::string(label_type_name(t)) + "-" + yyyymmdd + "-" + random_word(seed);
}

inline std::string today_yyyymmdd() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[16];
    std::strftime(buf, sizeof buf, "%Y%m%d", &tm);
    return buf;
}

/// Stratified split of already-classed items: per class, sort by segment_id, seeded shuffle, take
/// round-half-up(ratio * n) for training.
inline DatasetManifest split_items(std::vector<DatasetItem> items, LabelType type, double ratio, std::uint64_t seed,
                                   const std::string& yyyymmdd) {
    if (!(ratio > 0.0 && ratio < 1.0)) fail(Errc::InvalidArgument, "train_ratio must be in (0, 1)");
    if (items.empty()) fail(Errc::EmptyAfterExclusions, "no items remain after exclusions");
    std::map<std::string, std::vector<std::string>> by_class;
    for (auto& it : items) by_class[it.cls].push_back(std::move(it.segment_id));
    DatasetManifest m;
    m.label_type = type;
    m.train_ratio = ratio;
    m.seed = seed;
    m.name = dataset_name(type, yyyymmdd, seed);
    for (const auto& [cls, ids] : by_class)
        if (ids.size() < 2) fail(Errc::ClassTooSmall, "class '" + cls + "' has fewer than 2 items");
    std::uint64_t stream = 1;
    for (auto& [cls, ids] : by_class) {
        std::sort(ids.begin(), ids.end());
        auto rng = make_rng(seed, stream++);
        shuffle_in_place(ids, rng);
        const auto k = train_count(ids.size(), ratio);
        for (std::size_t i = 0; i < ids.size(); ++i) (i < k ? m.train : m.test).push_back({ids[i], cls});
        m.counts[cls] = {k, ids.size() - k};
    }
    return m;
}

/// One record per segment (latest timestamp wins across reviewers), filtered, classed and split.
inline DatasetManifest build_dataset(const LabelStore& store, LabelType type, double ratio, const Exclusions& excl,
                                     std::uint64_t seed, const std::string& yyyymmdd = today_yyyymmdd()) {
    std::map<std::string, LabelRecord> per_segment;
    for (const auto& r : store.query()) {
        auto [it, inserted] = per_segment.emplace(r.segment_id, r);
        if (!inserted && std::tie(r.timestamp, r.id) > std::tie(it->second.timestamp, it->second.id)) it->second = r;
    }
    std::vector<DatasetItem> items;
    for (const auto& [seg, r] : per_segment) {
        if (excl.qualities.count(r.quality)) continue;
        const auto tags = tags_in(r.notes);
        if (std::any_of(tags.begin(), tags.end(), [&](const std::string& t) { return excl.tags.count(t) > 0; }))
            continue;
        if (type == LabelType::Classified) {
            if (r.quality != Quality::Singlet || !r.morph_code) continue;
            items.push_back({seg, *r.morph_code});
        } else {
            items.push_back({seg, std::string(quality_name(r.quality))});
        }
    }
    return split_items(std::move(items), type, ratio, seed, yyyymmdd);
}

inline json manifest_to_json(const DatasetManifest& m) {
    json j{{"name", m.name}, {"label_type", label_type_name(m.label_type)}, {"train_ratio", m.train_ratio},
           {"seed", m.seed},  {"train_file", "train.csv"},                   {"test_file", "test.csv"}};
    auto& counts = j["counts"] = json::object();
    for (const auto& [cls, c] : m.counts) counts[cls] = {{"train", c.train}, {"test", c.test}};
    j["n_train"] = m.train.size();
    j["n_test"] = m.test.size();
    return j;
}

inline std::string items_csv(const std::vector<DatasetItem>& items) {
    csv::Table t;
    t.header = {"segment_id", "class"};
    for (const auto& i : items) t.rows.push_back({i.segment_id, i.cls});
    return csv::format(t);
}

/// Writes `<dir>/<name>/{manifest.json,train.csv,test.csv}` and returns the dataset directory.
inline std::filesystem::path write_dataset(const DatasetManifest& m, const std::filesystem::path& dir) {
    const auto out = dir / m.name;
    write_file(out / "manifest.json", manifest_to_json(m).dump(2) + "\n");
    write_file(out / "train.csv", items_csv(m.train));
    write_file(out / "test.csv", items_csv(m.test));
    return out;
}

}  // namespace phyto::catalog
