#pragma once

// HTTP + JSON service over a workspace: browsing, binary pass-through, label submission and background jobs.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "phyto/catalog.hpp"
#include "phyto/error.hpp"
#include "phyto/image_io.hpp"
#include "phyto/inference_gate.hpp"
#include "phyto/ini.hpp"
#include "phyto/pipeline.hpp"
#include "phyto/segmenter.hpp"
#include "phyto/util.hpp"

// must follow the Eigen includes; the other order breaks Eigen product kernels
#include <httplib.h>

namespace phyto::service {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- workspace index

struct SegmentEntry {
    segment::IndexRow row;
    std::string sector_id;
    fs::path dir;  // segments/<sector>

    [[nodiscard]] fs::path cloud_file() const { return dir / row.cloud_path; }
    [[nodiscard]] fs::path crop_file() const { return dir / row.crop_path; }
};

/// slides -> sectors -> segments, plus what else the workspace holds. Built by scanning the tree.
class WorkspaceIndex {
public:
    static WorkspaceIndex scan(const pipeline::Workspace& ws) {
        WorkspaceIndex idx;
        std::set<std::string> sectors;
        for (const auto& base : {ws.stacks(), ws.root / "extract", ws.segments_root()}) {
            if (!fs::is_directory(base)) continue;
            for (const auto& e : fs::directory_iterator(base)) {
                if (!e.is_directory()) continue;
                const auto name = e.path().filename().string();
                try {
                    ingest::parse_sector_id(name);
                    sectors.insert(name);
                } catch (const Error&) {
                    // not a sector folder
                }
            }
        }
        for (const auto& s : sectors) idx.slides_[pipeline::slide_of_sector(s)].insert(s);
        for (const auto& s : sectors) {
            const auto dir = ws.segments(s);
            const auto index_path = dir / "segments.csv";
            if (!fs::exists(index_path)) continue;
            std::vector<segment::IndexRow> rows;
            try {
                rows = segment::read_index(index_path);
            } catch (const Error& e) {
                fail(Errc::WorkspaceCorrupt, e.what());
            }
            for (auto& r : rows) {
                SegmentEntry entry{std::move(r), s, dir};
                if (!fs::exists(entry.cloud_file()) || !fs::exists(entry.crop_file()))
                    fail(Errc::WorkspaceCorrupt, "segment " + entry.row.segment_id + " references missing files");
                const auto id = entry.row.segment_id;
                if (!idx.segments_.emplace(id, std::move(entry)).second)
                    fail(Errc::WorkspaceCorrupt, "duplicate segment id " + id);
                idx.by_sector_[s].push_back(id);
            }
        }
        if (fs::is_directory(ws.datasets()))
            for (const auto& e : fs::directory_iterator(ws.datasets()))
                if (fs::exists(e.path() / "manifest.json")) idx.datasets_.push_back(e.path().filename().string());
        std::sort(idx.datasets_.begin(), idx.datasets_.end());
        return idx;
    }

    [[nodiscard]] std::vector<std::string> slides() const {
        std::vector<std::string> out;
        for (const auto& [s, _] : slides_) out.push_back(s);
        return out;
    }
    [[nodiscard]] std::optional<std::vector<std::string>> sectors(const std::string& slide) const {
        const auto it = slides_.find(slide);
        if (it == slides_.end()) return std::nullopt;
        return std::vector<std::string>(it->second.begin(), it->second.end());
    }
    [[nodiscard]] bool has_sector(const std::string& sector) const {
        for (const auto& [_, secs] : slides_)
            if (secs.count(sector)) return true;
        return false;
    }
    [[nodiscard]] std::vector<const SegmentEntry*> segments(const std::string& sector) const {
        std::vector<const SegmentEntry*> out;
        if (const auto it = by_sector_.find(sector); it != by_sector_.end())
            for (const auto& id : it->second) out.push_back(&segments_.at(id));
        return out;
    }
    [[nodiscard]] const SegmentEntry* find(const std::string& id) const {
        const auto it = segments_.find(id);
        return it == segments_.end() ? nullptr : &it->second;
    }
    [[nodiscard]] std::set<std::string> segment_ids() const {
        std::set<std::string> out;
        for (const auto& [id, _] : segments_) out.insert(id);
        return out;
    }
    [[nodiscard]] const std::vector<std::string>& datasets() const { return datasets_; }

private:
    std::map<std::string, std::set<std::string>> slides_;
    std::map<std::string, std::vector<std::string>> by_sector_;
    std::map<std::string, SegmentEntry> segments_;
    std::vector<std::string> datasets_;
};

// ---------------------------------------------------------------- predictions

struct RankedClass {
    std::string cls;
    double probability = 0;
    std::vector<std::string> codes;  // codebook entries mapped to this machine class
};

struct Suggestions {
    std::string segment_id;
    bool found = false;
    std::vector<RankedClass> ranked;
};

/// Classes by descending probability (ties by name); each carries every codebook code it maps to.
inline Suggestions predictions_for(const inference::ProbabilityTable* table, const catalog::Codebook& codebook,
                                   const std::string& segment_id) {
    if (!table) fail(Errc::NoTableLoaded, "no probability table loaded");
    Suggestions s{segment_id, false, {}};
    const auto* row = table->find(segment_id);
    if (!row) return s;
    s.found = true;
    const auto& names = table->class_names();
    for (std::size_t i = 0; i < names.size(); ++i) s.ranked.push_back({names[i], (*row)[i], codebook.codes_for_class(names[i])});
    std::stable_sort(s.ranked.begin(), s.ranked.end(), [](const RankedClass& a, const RankedClass& b) {
        return a.probability != b.probability ? a.probability > b.probability : a.cls < b.cls;
    });
    return s;
}

inline json suggestions_json(const Suggestions& s) {
    json ranked = json::array();
    for (const auto& r : s.ranked) ranked.push_back({{"class", r.cls}, {"probability", r.probability}, {"codes", r.codes}});
    return {{"segment_id", s.segment_id}, {"found", s.found}, {"ranked", ranked}};
}

// ---------------------------------------------------------------- jobs

struct Job {
    std::string id;
    std::string stage;
    pipeline::Params params;
    std::string status = "queued";  // queued | running | done | failed
    std::optional<pipeline::RunManifest> manifest;
    std::string error;
};

/// Single worker executing stage runs in submission order.
class JobQueue {
public:
    explicit JobQueue(pipeline::Workspace ws) : ws_(std::move(ws)), worker_([this](std::stop_token st) { loop(st); }) {}
    ~JobQueue() {
        worker_.request_stop();
        cv_.notify_all();
    }
    JobQueue(const JobQueue&) = delete;
    JobQueue& operator=(const JobQueue&) = delete;

    std::string submit(const std::string& stage, pipeline::Params params) {
        std::lock_guard lock(mutex_);
        char buf[16];
        std::snprintf(buf, sizeof buf, "job-%06zu", jobs_.size() + 1);
        Job job;
        job.id = buf;
        job.stage = stage;
        job.params = std::move(params);
        jobs_.emplace(job.id, job);
        pending_.push_back(job.id);
        cv_.notify_all();
        return job.id;
    }

    [[nodiscard]] std::optional<Job> get(const std::string& id) const {
        std::lock_guard lock(mutex_);
        const auto it = jobs_.find(id);
        if (it == jobs_.end()) return std::nullopt;
        return it->second;
    }

    /// Blocks until the job leaves queued/running (test helper and CLI use).
    Job wait(const std::string& id) {
        std::unique_lock lock(mutex_);
        done_cv_.wait(lock, [&] {
            const auto& s = jobs_.at(id).status;
            return s == "done" || s == "failed";
        });
        return jobs_.at(id);
    }

private:
    void loop(std::stop_token st) {
        for (;;) {
            std::string id;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [&] { return st.stop_requested() || !pending_.empty(); });
                if (st.stop_requested()) return;
                id = pending_.front();
                pending_.pop_front();
                jobs_.at(id).status = "running";
            }
            Job snapshot = *get(id);
            std::optional<pipeline::RunManifest> manifest;
            std::string error;
            try {
                manifest = pipeline::run_stage(ws_, snapshot.stage, snapshot.params);
            } catch (const std::exception& e) {
                error = e.what();
            }
            {
                std::lock_guard lock(mutex_);
                auto& job = jobs_.at(id);
                job.manifest = std::move(manifest);
                job.error = error;
                job.status = error.empty() ? "done" : "failed";
            }
            done_cv_.notify_all();
        }
    }

    pipeline::Workspace ws_;
    mutable std::mutex mutex_;
    std::condition_variable_any cv_;
    std::condition_variable done_cv_;
    std::map<std::string, Job> jobs_;
    std::deque<std::string> pending_;
    std::jthread worker_;
};

inline json job_json(const Job& j) {
    json out{{"id", j.id}, {"stage", j.stage}, {"status", j.status}, {"params", j.params}};
    out["manifest"] = j.manifest ? json::parse(pipeline::manifest_to_json(*j.manifest).dump()) : json(nullptr);
    out["error"] = j.error.empty() ? json(nullptr) : json(j.error);
    return out;
}

// ---------------------------------------------------------------- service

struct ServiceOptions {
    std::string table = "gate/probabilities.csv";  // workspace-relative probability table
    std::optional<IniFile> config;                 // same stage defaults as the CLI
    int context_padding = 128;                     // pixels around the bbox in context tiles
};

class Service {
public:
    explicit Service(pipeline::Workspace ws, ServiceOptions opt = {})
        : ws_(std::move(ws)), opt_(std::move(opt)), jobs_(ws_) {
        // Address reuse only: the library default also sets SO_REUSEPORT, which lets a second
        // server bind the same port silently.
        server_.set_socket_options([](socket_t sock) {
            int yes = 1;
            ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof yes);
        });
        reload();
        routes();
    }

    /// Rescans the workspace, reloads the codebook, table and label store.
    void reload() {
        std::unique_lock lock(state_mutex_);
        index_ = WorkspaceIndex::scan(ws_);
        codebook_ = fs::exists(ws_.codebook()) ? catalog::Codebook::load(ws_.codebook()) : catalog::Codebook{};
        const auto tpath = ws_.resolve(opt_.table);
        table_.reset();
        if (fs::exists(tpath)) table_ = inference::load_probability_table(tpath);
        store_ = std::make_unique<catalog::LabelStore>(ws_.journal(), codebook_, index_.segment_ids());
        orthos_.clear();
    }

    /// Binds (port 0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port) {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) fail(Errc::BindFailure, "cannot bind " + host + ":" + std::to_string(port));
        return bound;
    }
    void listen_after_bind() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

    JobQueue& jobs() { return jobs_; }
    httplib::Server& server() { return server_; }

private:
    static int status_for(Errc c) {
        switch (c) {
        case Errc::UnknownSegment: return 404;
        case Errc::NoTableLoaded: return 409;
        case Errc::InvalidArgument:
        case Errc::ParseError:
        case Errc::MissingKey: return 400;
        default: return 500;
        }
    }

    static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg) {
        res.status = status;
        res.set_content(json{{"error", code}, {"message", msg}}.dump(), "application/json");
    }

    /// Content-hash ETag; a matching If-None-Match yields 304 with no body.
    static void send(const httplib::Request& req, httplib::Response& res, const std::string& body, const char* type) {
        const auto etag = "\"" + sha256_hex(body) + "\"";
        res.set_header("ETag", etag);
        res.set_header("Cache-Control", "no-cache");
        if (req.has_header("If-None-Match")) {
            for (const auto& tag : split(req.get_header_value("If-None-Match"), ','))
                if (trim(tag) == etag || trim(tag) == "*") {
                    res.status = 304;
                    return;
                }
        }
        res.status = 200;
        res.set_content(body, type);
    }

    template <typename F>
    auto guarded(F&& fn) {
        return [this, fn = std::forward<F>(fn)](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const Error& e) {
                send_error(res, status_for(e.code()), std::string(errc_name(e.code())), e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "Internal", e.what());
            }
        };
    }

    static std::optional<std::string> param(const httplib::Request& req, const char* key) {
        if (!req.has_param(key)) return std::nullopt;
        return req.get_param_value(key);
    }

    json record_json(const catalog::LabelRecord& r) const { return catalog::record_to_json(r); }

    const RgbImage& orthoimage(const std::string& sector) {
        std::lock_guard lock(ortho_mutex_);
        auto it = orthos_.find(sector);
        if (it == orthos_.end()) {
            const auto path = ws_.extract(sector) / "orthoimage.png";
            if (!fs::exists(path)) fail(Errc::UnknownSegment, "no orthoimage for sector " + sector);
            it = orthos_.emplace(sector, io::read_rgb(path)).first;
        }
        return it->second;
    }

    json segment_json(const SegmentEntry& e) const {
        const auto& b = e.row.bbox;
        json j{{"segment_id", e.row.segment_id},
               {"sector_id", e.sector_id},
               {"bbox", {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}}},
               {"n_points", e.row.n_points},
               {"crop_url", "/api/segments/" + e.row.segment_id + "/crop"},
               {"cloud_url", "/api/segments/" + e.row.segment_id + "/cloud"}};
        j["prediction"] = nullptr;
        if (table_)
            if (const auto* row = table_->find(e.row.segment_id)) {
                const auto p = inference::argmax_class(*row, table_->class_names(), e.row.segment_id);
                j["prediction"] = {{"class", p.cls}, {"confidence", p.confidence}};
            }
        return j;
    }

    void routes() {
        server_.Get("/api/slides", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            send(req, res, json(index_.slides()).dump(), "application/json");
        }));

        server_.Get(R"(/api/slides/([^/]+)/sectors)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            const auto secs = index_.sectors(req.matches[1]);
            if (!secs) return send_error(res, 404, "UnknownSlide", "unknown slide " + req.matches[1].str());
            send(req, res, json(*secs).dump(), "application/json");
        }));

        // Filters: class, p_min, p_max (predicted class / confidence), quality, code, reviewer (labels),
        // labelled=0|1; pagination with offset/limit over segment_id order.
        server_.Get(R"(/api/sectors/([^/]+)/segments)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            const std::string sector = req.matches[1];
            if (!index_.has_sector(sector)) return send_error(res, 404, "UnknownSector", "unknown sector " + sector);
            const auto cls = param(req, "class");
            const auto p_min = param(req, "p_min"), p_max = param(req, "p_max");
            const auto quality = param(req, "quality"), code = param(req, "code"), reviewer = param(req, "reviewer");
            const auto labelled = param(req, "labelled");
            if ((cls || p_min || p_max) && !table_) fail(Errc::NoTableLoaded, "prediction filters need a probability table");
            std::map<std::string, std::vector<catalog::LabelRecord>> labels;
            catalog::LabelFilter lf;
            lf.slide = pipeline::slide_of_sector(sector);
            for (auto& r : store_->query(lf))
                if (pipeline::sector_of_segment(r.segment_id) == sector) labels[r.segment_id].push_back(r);
            json rows = json::array();
            for (const auto* e : index_.segments(sector)) {
                auto j = segment_json(*e);
                if (cls || p_min || p_max) {
                    if (j["prediction"].is_null()) continue;
                    const double c = j["prediction"]["confidence"];
                    if (cls && j["prediction"]["class"] != *cls) continue;
                    if (p_min && c < parse_double(*p_min)) continue;
                    if (p_max && c > parse_double(*p_max)) continue;
                }
                const auto& recs = labels[e->row.segment_id];
                if (labelled && (parse_int(*labelled) != 0) != !recs.empty()) continue;
                if (quality || code || reviewer) {
                    const bool any = std::any_of(recs.begin(), recs.end(), [&](const catalog::LabelRecord& r) {
                        return (!quality || catalog::quality_name(r.quality) == *quality) && (!code || r.morph_code == *code) &&
                               (!reviewer || r.reviewer == *reviewer);
                    });
                    if (!any) continue;
                }
                json lj = json::array();
                for (const auto& r : recs) lj.push_back(record_json(r));
                j["labels"] = lj;
                rows.push_back(std::move(j));
            }
            const auto total = rows.size();
            const auto offset = static_cast<std::size_t>(param(req, "offset") ? parse_int(*param(req, "offset")) : 0);
            const auto limit = static_cast<std::size_t>(param(req, "limit") ? parse_int(*param(req, "limit")) : total);
            json page = json::array();
            for (std::size_t i = offset; i < total && i - offset < limit; ++i) page.push_back(rows[i]);
            send(req, res, json{{"sector_id", sector}, {"total", total}, {"offset", offset}, {"segments", page}}.dump(),
                 "application/json");
        }));

        server_.Get(R"(/api/segments/([^/]+)/(crop|cloud))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            const auto* e = index_.find(req.matches[1]);
            if (!e) fail(Errc::UnknownSegment, "unknown segment " + req.matches[1].str());
            if (req.matches[2] == "crop")
                send(req, res, read_file(e->crop_file()), "image/png");
            else
                send(req, res, read_file(e->cloud_file()), "application/octet-stream");
        }));

        server_.Get(R"(/api/segments/([^/]+)/context(\.png)?)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            const auto* e = index_.find(req.matches[1]);
            if (!e) fail(Errc::UnknownSegment, "unknown segment " + req.matches[1].str());
            const auto& ortho = orthoimage(e->sector_id);
            const int pad = param(req, "pad") ? static_cast<int>(parse_int(*param(req, "pad"))) : opt_.context_padding;
            const auto& b = e->row.bbox;
            const int x0 = std::max(0, b.x_min - pad), y0 = std::max(0, b.y_min - pad);
            const int x1 = std::min(ortho.width() - 1, b.x_max + pad), y1 = std::min(ortho.height() - 1, b.y_max + pad);
            if (req.matches[2].length() > 0) {
                send(req, res, io::encode_png(ortho.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1)), "image/png");
                return;
            }
            double mpp = 0;
            const auto info = ws_.extract(e->sector_id) / "extract.json";
            if (fs::exists(info)) mpp = json::parse(read_file(info)).value("microns_per_pixel", 0.0);
            json j{{"segment_id", e->row.segment_id},
                   {"sector_id", e->sector_id},
                   {"bbox", {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}}},
                   {"tile", {{"x", x0}, {"y", y0}, {"width", x1 - x0 + 1}, {"height", y1 - y0 + 1}}},
                   {"orthoimage", {{"width", ortho.width()}, {"height", ortho.height()}}},
                   {"microns_per_pixel", mpp},
                   {"tile_url", "/api/segments/" + e->row.segment_id + "/context.png?pad=" + std::to_string(pad)}};
            send(req, res, j.dump(), "application/json");
        }));

        server_.Get("/api/codebook", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            json arr = json::array();
            for (const auto& [code, name] : codebook_.entries())
                arr.push_back({{"code", code}, {"name", name}, {"machine_classes", codebook_.machine_classes(code)}});
            send(req, res, arr.dump(), "application/json");
        }));

        server_.Get("/api/labels", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            if (param(req, "history")) {
                const auto seg = param(req, "segment");
                if (!seg) return send_error(res, 400, "MissingKey", "history needs segment");
                json arr = json::array();
                for (const auto& r : store_->history(*seg)) arr.push_back(record_json(r));
                return send(req, res, arr.dump(), "application/json");
            }
            catalog::LabelFilter f;
            if (auto v = param(req, "slide")) f.slide = *v;
            if (auto v = param(req, "quality")) f.quality = catalog::parse_quality(*v);
            if (auto v = param(req, "code")) f.code = *v;
            if (auto v = param(req, "reviewer")) f.reviewer = *v;
            if (auto v = param(req, "p_min")) f.p_min = parse_double(*v);
            if (auto v = param(req, "p_max")) f.p_max = parse_double(*v);
            f.table = table_ ? &*table_ : nullptr;
            const auto seg = param(req, "segment");
            json arr = json::array();
            for (const auto& r : store_->query(f))
                if (!seg || r.segment_id == *seg) arr.push_back(record_json(r));
            send(req, res, arr.dump(), "application/json");
        }));

        server_.Post("/api/labels", guarded([this](const httplib::Request& req, httplib::Response& res) {
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::parse_error& e) {
                return send_error(res, 400, "ParseError", e.what());
            }
            if (!body.is_object()) return send_error(res, 400, "ParseError", "body must be a JSON object");
            json errors = json::array();
            auto field_error = [&](const std::string& field, const std::string& msg) {
                errors.push_back({{"field", field}, {"message", msg}});
            };
            auto str = [&](const char* key) -> std::optional<std::string> {
                if (!body.contains(key) || body[key].is_null()) return std::nullopt;
                if (!body[key].is_string()) {
                    field_error(key, "must be a string");
                    return std::nullopt;
                }
                return body[key].get<std::string>();
            };
            catalog::LabelRecord rec;
            rec.segment_id = str("segment_id").value_or("");
            rec.reviewer = str("reviewer").value_or("");
            rec.morph_code = str("morph_code");
            rec.notes = str("notes").value_or("");
            if (const auto q = str("quality")) {
                try {
                    rec.quality = catalog::parse_quality(*q);
                } catch (const Error& e) {
                    field_error("quality", e.what());
                }
            } else {
                field_error("quality", "quality is required");
            }
            if (const auto ts = str("timestamp")) {
                try {
                    rec.timestamp = catalog::parse_timestamp(*ts);
                } catch (const Error& e) {
                    field_error("timestamp", e.what());
                }
            }
            if (errors.empty()) {
                std::lock_guard write(write_mutex_);
                std::shared_lock lock(state_mutex_);
                try {
                    const auto id = store_->upsert(rec);
                    res.status = 201;
                    res.set_content(json{{"id", id}}.dump(), "application/json");
                    return;
                } catch (const Error& e) {
                    const std::map<Errc, std::string> fields{{Errc::MissingReviewer, "reviewer"},
                                                             {Errc::UnknownSegment, "segment_id"},
                                                             {Errc::CodeNotInCodebook, "morph_code"}};
                    const auto it = fields.find(e.code());
                    if (it == fields.end()) throw;
                    field_error(it->second, e.what());
                }
            }
            res.status = 422;
            res.set_content(json{{"error", "ValidationFailed"}, {"errors", errors}}.dump(), "application/json");
        }));

        server_.Get("/api/predictions", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::shared_lock lock(state_mutex_);
            const auto* table = table_ ? &*table_ : nullptr;
            if (auto seg = param(req, "segment"))
                return send(req, res, suggestions_json(predictions_for(table, codebook_, *seg)).dump(), "application/json");
            const auto slide = param(req, "slide");
            if (!slide) return send_error(res, 400, "MissingKey", "pass slide= or segment=");
            if (!table) fail(Errc::NoTableLoaded, "no probability table loaded");
            json arr = json::array();
            for (const auto& id : table->segment_ids())
                if (id.rfind(*slide, 0) == 0) arr.push_back(suggestions_json(predictions_for(table, codebook_, id)));
            send(req, res, json{{"slide", *slide}, {"found", !arr.empty()}, {"segments", arr}}.dump(), "application/json");
        }));

        server_.Post(R"(/api/jobs/(stats|mixture|dataset))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            pipeline::Params overrides;
            if (!req.body.empty()) {
                json body;
                try {
                    body = json::parse(req.body);
                } catch (const json::parse_error& e) {
                    return send_error(res, 400, "ParseError", e.what());
                }
                if (!body.is_object()) return send_error(res, 400, "ParseError", "body must be a JSON object");
                for (const auto& [k, v] : body.items()) overrides[k] = v.is_string() ? v.get<std::string>() : v.dump();
            }
            const std::string stage = req.matches[1];
            pipeline::Params params;
            try {
                params = pipeline::resolve_params(stage, opt_.config ? &*opt_.config : nullptr, overrides);
            } catch (const Error& e) {
                res.status = 422;
                res.set_content(json{{"error", errc_name(e.code())}, {"message", e.what()}}.dump(), "application/json");
                return;
            }
            const auto id = jobs_.submit(stage, params);
            res.status = 202;
            res.set_content(json{{"job_id", id}, {"status_url", "/api/jobs/" + id}}.dump(), "application/json");
        }));

        server_.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto job = jobs_.get(req.matches[1]);
            if (!job) return send_error(res, 404, "UnknownJob", "unknown job " + req.matches[1].str());
            res.set_content(job_json(*job).dump(), "application/json");
        }));
    }

    pipeline::Workspace ws_;
    ServiceOptions opt_;
    httplib::Server server_;
    mutable std::shared_mutex state_mutex_;
    std::mutex write_mutex_;  // serialises label writes
    std::mutex ortho_mutex_;
    WorkspaceIndex index_;
    catalog::Codebook codebook_;
    std::optional<inference::ProbabilityTable> table_;
    std::unique_ptr<catalog::LabelStore> store_;
    std::map<std::string, RgbImage> orthos_;
    JobQueue jobs_;
};

}  // namespace phyto::service
