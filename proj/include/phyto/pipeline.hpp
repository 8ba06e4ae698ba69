#pragma once

// Stage runners shared by the CLI and the service: parameter schema, workspace layout and run manifests.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phyto/assemblage.hpp"
#include "phyto/catalog.hpp"
#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/focus_engine.hpp"
#include "phyto/image_io.hpp"
#include "phyto/inference_gate.hpp"
#include "phyto/ini.hpp"
#include "phyto/mixture.hpp"
#include "phyto/plots.hpp"
#include "phyto/point_cloud.hpp"
#include "phyto/segmenter.hpp"
#include "phyto/stack_ingest.hpp"
#include "phyto/util.hpp"

namespace phyto::pipeline {

namespace fs = std::filesystem;
using Params = std::map<std::string, std::string>;

inline constexpr const char* kArtifactVersion = "phyto-0.1.0";

// ---------------------------------------------------------------- parameter schema

struct ParamSpec {
    std::string key;
    std::string default_value;  // empty + required => must be supplied
    std::string doc;
    bool required = false;
};

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> v{"ingest", "extract", "segment", "gate", "stats", "mixture", "dataset"};
    return v;
}

inline const std::vector<ParamSpec>& stage_schema(const std::string& stage) {
    static const std::map<std::string, std::vector<ParamSpec>> schema{
        {"ingest",
         {{"raw_dir", "", "directory of scanner exports", true},
          {"mapping_rule", "", "INI mapping rule for non-canonical names (optional)"}}},
        {"extract",
         {{"sector", "", "sector id, e.g. UABPL-000001a", true},
          {"bilateral_d", "15", "bilateral filter diameter (px)"},
          {"sigma_color", "35", "bilateral colour sigma"},
          {"sigma_space", "", "bilateral spatial sigma (empty: bilateral_d / 2)"},
          {"laplacian_ksize", "3", "Laplacian aperture (odd)"},
          {"k", "3.75", "threshold multiplier on log-response std"},
          {"final_bilateral_d", "20", "display smoothing diameter (px)"}}},
        {"segment",
         {{"sector", "", "sector id", true},
          {"octree_level", "12", "grid subdivision level"},
          {"min_component_size", "750", "smallest kept component (points)"},
          {"max_components", "99999", "largest number of segments kept"}}},
        {"gate",
         {{"quality_table", "", "quality-class probability CSV", true},
          {"morphotype_table", "", "morphotype probability CSV (optional)"}}},
        {"stats",
         {{"table", "gate/probabilities.csv", "probability table of gated segments"},
          {"alpha", "0.05", "chi-square significance level"},
          {"residual_cutoff", "1.96", "|standardised residual| flag threshold"},
          {"kde_points", "256", "density grid size"},
          {"bandwidth", "0", "KDE bandwidth (0: Silverman rule)"}}},
        {"mixture",
         {{"reference", "", "reference matrix CSV (process,<classes>)", true},
          {"counts", "", "observed counts CSV (class,count)", true},
          {"name", "mixture", "output folder name under mixture/"},
          {"alpha", "1", "Dirichlet concentration, one value or ';'-separated per process"},
          {"preset", "default", "default | looped (7 chains)"},
          {"chains", "4", "independent chains"},
          {"iterations", "2000", "iterations per chain"},
          {"warmup", "1000", "warmup iterations per chain"},
          {"target_accept", "0.9", "step-size adaptation target"},
          {"max_depth", "12", "trajectory doubling cap"},
          {"seed", "1", "sampler seed"},
          {"predictive_seed", "2", "posterior predictive seed"},
          {"allow_failed", "false", "write weights/report even when divergences exceed 10 %"}}},
        {"dataset",
         {{"label_type", "Classified", "Classified | AllClasses"},
          {"train_ratio", "0.8", "train share per class"},
          {"seed", "1", "split seed"},
          {"date", "", "YYYYMMDD used in the dataset name (empty: today)"},
          {"exclude_qualities", "", "';'-separated quality classes to drop"},
          {"exclude_tags", "", "';'-separated #tags to drop"}}},
    };
    const auto it = schema.find(stage);
    if (it == schema.end()) fail(Errc::InvalidArgument, "unknown stage '" + stage + "'");
    return it->second;
}

/// Defaults, then the stage's INI section, then explicit overrides. Unknown keys are rejected.
inline Params resolve_params(const std::string& stage, const IniFile* ini = nullptr, const Params& overrides = {}) {
    const auto& spec = stage_schema(stage);
    Params p;
    for (const auto& s : spec) p[s.key] = s.default_value;
    auto apply = [&](const std::map<std::string, std::string>& src, const std::string& origin) {
        for (const auto& [k, v] : src) {
            if (!p.count(k)) fail(Errc::InvalidArgument, origin + ": unknown key '" + k + "' for stage " + stage);
            p[k] = v;
        }
    };
    if (ini) apply(ini->section(stage), "config");
    apply(overrides, "override");
    for (const auto& s : spec)
        if (s.required && p[s.key].empty()) fail(Errc::MissingKey, "stage " + stage + " needs '" + s.key + "'");
    return p;
}

namespace detail {

inline double get_double(const Params& p, const std::string& k) { return parse_double(p.at(k)); }
inline long long get_int(const Params& p, const std::string& k) { return parse_int(p.at(k)); }
inline bool get_bool(const Params& p, const std::string& k) {
    const auto& v = p.at(k);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no" || v.empty()) return false;
    fail(Errc::InvalidArgument, k + ": expected a boolean, got '" + v + "'");
}
inline std::vector<std::string> get_list(const Params& p, const std::string& k) {
    std::vector<std::string> out;
    for (const auto& s : split(p.at(k), ';'))
        if (!trim(s).empty()) out.emplace_back(trim(s));
    return out;
}

}  // namespace detail

inline focus::ExtractionConfig extraction_config(const Params& p) {
    focus::ExtractionConfig c;
    c.bilateral_d = static_cast<int>(detail::get_int(p, "bilateral_d"));
    c.sigma_color = detail::get_double(p, "sigma_color");
    if (!p.at("sigma_space").empty()) c.sigma_space = detail::get_double(p, "sigma_space");
    c.laplacian_ksize = static_cast<int>(detail::get_int(p, "laplacian_ksize"));
    c.k = detail::get_double(p, "k");
    c.final_bilateral_d = static_cast<int>(detail::get_int(p, "final_bilateral_d"));
    c.validate();
    return c;
}

inline segment::SegmentationConfig segmentation_config(const Params& p) {
    segment::SegmentationConfig c;
    c.octree_level = static_cast<int>(detail::get_int(p, "octree_level"));
    c.min_component_size = static_cast<std::size_t>(detail::get_int(p, "min_component_size"));
    c.max_components = static_cast<std::size_t>(detail::get_int(p, "max_components"));
    c.validate();
    return c;
}

inline mixture::SamplerConfig sampler_config(const Params& p) {
    mixture::SamplerConfig c;
    const auto& preset = p.at("preset");
    if (preset == "looped")
        c = mixture::SamplerConfig::looped();
    else if (preset != "default")
        fail(Errc::InvalidArgument, "preset must be default or looped");
    if (preset == "default") c.chains = static_cast<int>(detail::get_int(p, "chains"));
    c.iterations = static_cast<int>(detail::get_int(p, "iterations"));
    c.warmup = static_cast<int>(detail::get_int(p, "warmup"));
    c.target_accept = detail::get_double(p, "target_accept");
    c.max_depth = static_cast<int>(detail::get_int(p, "max_depth"));
    c.seed = static_cast<std::uint64_t>(detail::get_int(p, "seed"));
    c.validate();
    return c;
}

// ---------------------------------------------------------------- workspace layout

/// Directory layout of a workspace; every stage reads and writes below `root`.
struct Workspace {
    fs::path root;

    [[nodiscard]] fs::path stacks() const { return root / "stacks"; }
    [[nodiscard]] fs::path extract(const std::string& sector) const { return root / "extract" / sector; }
    [[nodiscard]] fs::path segments(const std::string& sector) const { return root / "segments" / sector; }
    [[nodiscard]] fs::path segments_root() const { return root / "segments"; }
    [[nodiscard]] fs::path gate() const { return root / "gate"; }
    [[nodiscard]] fs::path stats() const { return root / "stats"; }
    [[nodiscard]] fs::path mixture(const std::string& name) const { return root / "mixture" / name; }
    [[nodiscard]] fs::path datasets() const { return root / "datasets"; }
    [[nodiscard]] fs::path journal() const { return root / "catalog" / "journal.jsonl"; }
    [[nodiscard]] fs::path codebook() const { return root / "catalog" / "codebook.csv"; }
    [[nodiscard]] fs::path manifests() const { return root / "manifests"; }

    /// Relative paths resolve against the workspace root.
    [[nodiscard]] fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() ? path : root / path;
    }
    [[nodiscard]] std::string relative(const fs::path& p) const {
        return fs::relative(p, root).generic_string();
    }
};

inline std::string sector_of_segment(const std::string& segment_id) {
    const auto dash = segment_id.rfind('-');
    if (dash == std::string::npos || dash == 0) fail(Errc::InvalidArgument, "not a segment id: " + segment_id);
    return segment_id.substr(0, dash);
}

inline std::string slide_of_sector(const std::string& sector_id) { return ingest::parse_sector_id(sector_id).first; }

// ---------------------------------------------------------------- manifests

struct FileHash {
    std::string path;  // workspace-relative when inside the workspace
    std::string sha256;
    friend bool operator==(const FileHash&, const FileHash&) = default;
};

struct RunManifest {
    std::string run_id;
    std::string stage;
    Params params;
    std::vector<FileHash> inputs;
    std::vector<FileHash> outputs;
    std::string started;
    std::string finished;
    std::string artifact_version = kArtifactVersion;
    std::vector<std::string> notes;
};

inline nlohmann::ordered_json manifest_to_json(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["run_id"] = m.run_id;
    j["stage"] = m.stage;
    j["artifact_version"] = m.artifact_version;
    j["params"] = nlohmann::ordered_json(m.params);
    auto files = [](const std::vector<FileHash>& v) {
        auto a = nlohmann::ordered_json::array();
        for (const auto& f : v) a.push_back({{"path", f.path}, {"sha256", f.sha256}});
        return a;
    };
    j["inputs"] = files(m.inputs);
    j["outputs"] = files(m.outputs);
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["notes"] = m.notes;
    return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    try {
        RunManifest m;
        m.run_id = j.at("run_id").get<std::string>();
        m.stage = j.at("stage").get<std::string>();
        m.artifact_version = j.at("artifact_version").get<std::string>();
        m.params = j.at("params").get<Params>();
        for (const auto& f : j.at("inputs")) m.inputs.push_back({f.at("path"), f.at("sha256")});
        for (const auto& f : j.at("outputs")) m.outputs.push_back({f.at("path"), f.at("sha256")});
        m.started = j.value("started", "");
        m.finished = j.value("finished", "");
        if (j.contains("notes")) m.notes = j.at("notes").get<std::vector<std::string>>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::ParseError, std::string("bad run manifest: ") + e.what());
    }
}

inline RunManifest load_manifest(const fs::path& path) {
    try {
        return manifest_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::ParseError, path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- stages

namespace detail {

struct StageIo {
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
    std::vector<std::string> notes;
};

inline std::vector<fs::path> files_under(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline void reset_dir(const fs::path& dir) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
}

inline StageIo run_ingest(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto raw = ws.resolve(p.at("raw_dir"));
    if (!fs::is_directory(raw)) fail(Errc::IoFailure, "raw_dir is not a directory: " + raw.string());
    std::optional<ingest::MappingRule> rule;
    if (!p.at("mapping_rule").empty()) {
        const auto path = ws.resolve(p.at("mapping_rule"));
        rule = ingest::MappingRule::load(path);
        sio.inputs.push_back(path);
    }
    for (const auto& e : fs::directory_iterator(raw))
        if (e.is_regular_file()) sio.inputs.push_back(e.path());
    std::sort(sio.inputs.begin(), sio.inputs.end());
    const auto entries = ingest::ingest_directory(raw, ws.stacks(), rule);
    std::set<std::string> sectors;
    for (const auto& e : entries) sectors.insert(e.identity.sector_id());
    for (const auto& s : sectors)
        for (const auto& f : files_under(ws.stacks() / s)) sio.outputs.push_back(f);
    write_file(ws.stacks() / "ingest.json", ingest::ingest_manifest_json(entries).dump(2) + "\n");
    sio.outputs.push_back(ws.stacks() / "ingest.json");
    return sio;
}

inline StageIo run_extract(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto sector = p.at("sector");
    const auto cfg = extraction_config(p);
    const auto src = ws.stacks() / sector;
    sio.inputs = files_under(src);
    if (sio.inputs.empty()) fail(Errc::IoFailure, "no stack for sector " + sector);
    auto stack = ingest::load_zstack(src);
    nlohmann::ordered_json info;
    if (stack.scale.chunk_boundary) {
        const auto merged = focus::merge_chunked_stack(stack);
        stack = merged.stack;
        info["chunk_offset"] = {merged.offset.dx, merged.offset.dy};
        auto gains = nlohmann::ordered_json::array();
        for (const auto& g : merged.gain.channel) gains.push_back({{"alpha", g.alpha}, {"beta", g.beta}});
        info["chunk_gain"] = gains;
    }
    const auto filtered = focus::filter_stack(stack, cfg);
    const auto ortho = focus::compose_orthoimage(filtered, cfg);
    const auto extracted = focus::extract_points(filtered, cfg, stack.scale);
    const auto out = ws.extract(sector);
    reset_dir(out);
    io::write_png(out / "orthoimage.png", ortho.display);
    io::write_png(out / "composite.png", ortho.rgb);
    write_file(out / "depth.png", io::encode_png16(ortho.depth));
    srpc::write(out / "cloud.srpc", extracted.cloud);
    info["depth"] = stack.depth();
    info["points"] = extracted.cloud.size();
    info["log_response_mean"] = extracted.stats.mean;
    info["log_response_std"] = extracted.stats.stddev;
    info["threshold"] = extracted.stats.threshold;
    info["microns_per_pixel"] = stack.scale.microns_per_pixel;
    info["z_step"] = stack.scale.z_step;
    if (extracted.warning) {
        info["warning"] = *extracted.warning;
        sio.notes.push_back(*extracted.warning);
    }
    write_file(out / "extract.json", info.dump(2) + "\n");
    sio.outputs = files_under(out);
    return sio;
}

inline StageIo run_segment(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto sector = p.at("sector");
    const auto cfg = segmentation_config(p);
    const auto src = ws.extract(sector);
    sio.inputs = {src / "cloud.srpc", src / "orthoimage.png"};
    for (const auto& f : sio.inputs)
        if (!fs::exists(f)) fail(Errc::IoFailure, "missing " + f.string() + " (run extract first)");
    const auto cloud = srpc::read(src / "cloud.srpc");
    const auto ortho = io::read_rgb(src / "orthoimage.png");
    auto segs = segment::segment_sector(cloud, sector, cfg);
    const auto out = ws.segments(sector);
    reset_dir(out);
    segment::export_segments(segs, ortho, out);
    sio.outputs = files_under(out);
    if (segs.empty()) sio.notes.push_back("no components reached min_component_size");
    return sio;
}

inline StageIo run_gate(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto qpath = ws.resolve(p.at("quality_table"));
    sio.inputs.push_back(qpath);
    const auto quality = inference::load_probability_table(qpath);
    const auto gate = inference::quality_gate(inference::predict_all(quality));
    const auto out = ws.gate();
    reset_dir(out);
    write_file(out / "gate_report.csv", inference::gate_report_csv(gate));
    csv::Table retained;
    retained.header = {"segment_id", "quality", "confidence"};
    std::set<std::string> keep;
    for (const auto& r : gate.retained) {
        retained.rows.push_back({r.segment_id, r.cls, format_double(r.confidence)});
        keep.insert(r.segment_id);
    }
    write_file(out / "retained.csv", csv::format(retained));
    if (!p.at("morphotype_table").empty()) {
        const auto mpath = ws.resolve(p.at("morphotype_table"));
        sio.inputs.push_back(mpath);
        const auto morph = inference::load_probability_table(mpath);
        inference::ProbabilityTable kept(morph.class_names());
        csv::Table preds;
        preds.header = {"segment_id", "class", "confidence"};
        for (std::size_t i = 0; i < morph.size(); ++i) {
            const auto& id = morph.segment_ids()[i];
            if (!keep.count(id)) continue;
            const auto row = morph.row(i);
            kept.add_row(id, std::vector<double>(row.begin(), row.end()));
            const auto pr = inference::argmax_class(row, morph.class_names(), id);
            preds.rows.push_back({id, pr.cls, format_double(pr.confidence)});
        }
        write_file(out / "probabilities.csv", inference::format_probability_table(kept));
        write_file(out / "predictions.csv", csv::format(preds));
    }
    sio.outputs = files_under(out);
    return sio;
}

inline StageIo run_stats(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto tpath = ws.resolve(p.at("table"));
    sio.inputs.push_back(tpath);
    const auto table = inference::load_probability_table(tpath);
    const auto preds = inference::predict_all(table);
    if (preds.empty()) fail(Errc::EmptyInput, "probability table has no rows");

    std::map<std::string, std::vector<inference::Prediction>> by_sector;
    for (const auto& pr : preds) by_sector[sector_of_segment(pr.segment_id)].push_back(pr);
    plots::PlotBundle b;
    for (const auto& [sector, ps] : by_sector) b.compositions.push_back(assemblage::composition_counts(ps, sector));

    std::map<std::string, std::vector<double>> conf;
    for (const auto& pr : preds) conf[pr.cls].push_back(pr.confidence);
    const auto points = static_cast<std::size_t>(get_int(p, "kde_points"));
    const double bw = get_double(p, "bandwidth");
    for (const auto& [cls, v] : conf) b.densities[cls] = assemblage::kde_confidence(v, table.class_names().size(), bw, points);

    const auto classes = assemblage::class_union(b.compositions);
    if (b.compositions.size() >= 2 && classes.size() >= 2) {
        try {
            const auto x = assemblage::ilr_matrix(b.compositions, classes);
            b.pca = assemblage::pca(x);
            for (const auto& c : b.compositions) b.pca_unit_names.push_back(c.unit_id);
            for (Eigen::Index k = 0; k < x.cols(); ++k) b.pca_coord_names.push_back("z" + std::to_string(k + 1));
            b.dendrogram = assemblage::ward_cluster(x);
        } catch (const Error& e) {
            b.pca.reset();
            b.pca_unit_names.clear();
            b.pca_coord_names.clear();
            sio.notes.push_back(std::string("PCA and clustering skipped: ") + e.what());
        }
    } else {
        sio.notes.push_back("PCA and clustering skipped: need at least two sectors and two classes");
    }

    std::map<std::string, std::vector<const assemblage::Composition*>> by_slide;
    for (const auto& c : b.compositions) by_slide[slide_of_sector(c.unit_id)].push_back(&c);
    for (const auto& [slide, comps] : by_slide) {
        std::vector<std::vector<double>> tab;
        std::vector<std::string> rows;
        for (const auto* c : comps) {
            tab.push_back(assemblage::count_vector(*c, classes));
            rows.push_back(c->unit_id);
        }
        try {
            b.chi_square.emplace_back(slide, assemblage::chi_square_independence(tab, rows, classes));
        } catch (const Error& e) {
            sio.notes.push_back("chi-square skipped for " + slide + ": " + e.what());
        }
    }
    assemblage::ChiSquareReportOptions opt;
    opt.alpha = get_double(p, "alpha");
    opt.residual_cutoff = get_double(p, "residual_cutoff");
    const auto out = ws.stats();
    reset_dir(out);
    plots::export_plots(b, out, opt);
    sio.outputs = files_under(out);
    return sio;
}

inline StageIo run_mixture(const Workspace& ws, const Params& p) {
    StageIo sio;
    const auto rpath = ws.resolve(p.at("reference"));
    const auto cpath = ws.resolve(p.at("counts"));
    sio.inputs = {rpath, cpath};
    const auto ref = mixture::parse_reference(read_file(rpath));
    const auto y = mixture::parse_counts(read_file(cpath), ref);
    mixture::MixturePrior prior;
    prior.alpha.clear();
    for (const auto& a : get_list(p, "alpha")) prior.alpha.push_back(parse_double(a));
    if (prior.alpha.empty()) fail(Errc::InvalidArgument, "alpha is empty");
    const auto cfg = sampler_config(p);
    const auto result = mixture::sample_posterior(ref, y, prior, cfg);
    const auto out = ws.mixture(p.at("name"));
    reset_dir(out);
    const auto written = mixture::export_mixture_report(result, out, get_bool(p, "allow_failed"));
    if (written.size() > 1) {
        csv::Table q;
        q.header = result.class_names;
        for (Eigen::Index d = 0; d < result.implied_q_draws.rows(); ++d) {
            csv::Row row;
            for (Eigen::Index c = 0; c < result.implied_q_draws.cols(); ++c) row.push_back(format_double(result.implied_q_draws(d, c)));
            q.rows.push_back(std::move(row));
        }
        write_file(out / "implied_q.csv", csv::format(q));
        const auto pp = mixture::posterior_predictive(result, y.total(), static_cast<std::uint64_t>(get_int(p, "predictive_seed")));
        csv::Table t;
        t.header = result.class_names;
        for (Eigen::Index d = 0; d < pp.rows(); ++d) {
            csv::Row row;
            for (Eigen::Index c = 0; c < pp.cols(); ++c) row.push_back(std::to_string(pp(d, c)));
            t.rows.push_back(std::move(row));
        }
        write_file(out / "predictive_counts.csv", csv::format(t));
    }
    if (result.failed) sio.notes.push_back("DivergenceRateExceeded: " + format_double(result.diagnostics.divergence_rate));
    if (result.not_converged) sio.notes.push_back("NotConverged: some split R-hat above 1.01");
    sio.outputs = files_under(out);
    return sio;
}

inline StageIo run_dataset(const Workspace& ws, const Params& p) {
    StageIo sio;
    sio.inputs.push_back(ws.journal());
    catalog::Codebook cb;
    if (fs::exists(ws.codebook())) {
        cb = catalog::Codebook::load(ws.codebook());
        sio.inputs.push_back(ws.codebook());
    }
    if (!fs::exists(ws.journal())) fail(Errc::IoFailure, "no label journal at " + ws.journal().string());
    const catalog::LabelStore store(ws.journal(), cb);
    catalog::Exclusions excl;
    for (const auto& q : get_list(p, "exclude_qualities")) excl.qualities.insert(catalog::parse_quality(q));
    for (const auto& t : get_list(p, "exclude_tags")) excl.tags.insert(t[0] == '#' ? t : "#" + t);
    const auto m = catalog::build_dataset(store, catalog::parse_label_type(p.at("label_type")), get_double(p, "train_ratio"),
                                          excl, static_cast<std::uint64_t>(get_int(p, "seed")), p.at("date"));
    const auto dir = catalog::write_dataset(m, ws.datasets());
    sio.outputs = files_under(dir);
    sio.notes.push_back("dataset " + m.name);
    return sio;
}

inline std::string iso_now() { return catalog::format_timestamp(catalog::now_millis()); }

inline std::vector<FileHash> hash_files(const Workspace& ws, const std::vector<fs::path>& files) {
    std::vector<FileHash> out;
    for (const auto& f : files) {
        const auto rel = fs::relative(f, ws.root);
        const bool inside = !rel.empty() && *rel.begin() != "..";
        out.push_back({inside ? rel.generic_string() : fs::absolute(f).generic_string(), sha256_file(f)});
    }
    return out;
}

}  // namespace detail

/// Executes a stage with fully resolved parameters and writes `manifests/<stage>-<run_id>.json`.
inline RunManifest run_stage(const Workspace& ws, const std::string& stage, Params params) {
    const auto& spec = stage_schema(stage);
    for (const auto& s : spec)
        if (!params.count(s.key)) params[s.key] = s.default_value;
    if (stage == "dataset" && params["date"].empty()) params["date"] = catalog::today_yyyymmdd();

    RunManifest m;
    m.stage = stage;
    m.params = params;
    m.started = detail::iso_now();
    detail::StageIo sio;
    if (stage == "ingest") sio = detail::run_ingest(ws, params);
    else if (stage == "extract") sio = detail::run_extract(ws, params);
    else if (stage == "segment") sio = detail::run_segment(ws, params);
    else if (stage == "gate") sio = detail::run_gate(ws, params);
    else if (stage == "stats") sio = detail::run_stats(ws, params);
    else if (stage == "mixture") sio = detail::run_mixture(ws, params);
    else if (stage == "dataset") sio = detail::run_dataset(ws, params);
    m.finished = detail::iso_now();
    m.inputs = detail::hash_files(ws, sio.inputs);
    m.outputs = detail::hash_files(ws, sio.outputs);
    m.notes = sio.notes;

    nlohmann::ordered_json key{{"stage", stage}, {"params", params}};
    for (const auto& f : m.inputs) key["inputs"].push_back(f.sha256);
    m.run_id = sha256_hex(key.dump()).substr(0, 16);
    write_file(ws.manifests() / (stage + "-" + m.run_id + ".json"), manifest_to_json(m).dump(2) + "\n");
    return m;
}

struct RerunReport {
    RunManifest manifest;
    std::vector<std::string> changed_inputs;
    std::vector<std::string> mismatched_outputs;  // hash differs or file missing/extra
    [[nodiscard]] bool reproduced() const { return changed_inputs.empty() && mismatched_outputs.empty(); }
};

/// Re-executes a recorded run and compares every output hash against the record.
inline RerunReport rerun(const Workspace& ws, const RunManifest& recorded) {
    RerunReport r;
    for (const auto& f : recorded.inputs) {
        const auto path = ws.resolve(f.path);
        if (!fs::exists(path) || sha256_file(path) != f.sha256) r.changed_inputs.push_back(f.path);
    }
    r.manifest = run_stage(ws, recorded.stage, recorded.params);
    std::map<std::string, std::string> now;
    for (const auto& f : r.manifest.outputs) now[f.path] = f.sha256;
    std::set<std::string> seen;
    for (const auto& f : recorded.outputs) {
        seen.insert(f.path);
        const auto it = now.find(f.path);
        if (it == now.end() || it->second != f.sha256) r.mismatched_outputs.push_back(f.path);
    }
    for (const auto& [path, _] : now)
        if (!seen.count(path)) r.mismatched_outputs.push_back(path);
    return r;
}

}  // namespace phyto::pipeline
