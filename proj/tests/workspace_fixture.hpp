#pragma once

// Synthetic scanner exports: flat background with textured discs, each sharp in one plane.

#include <random>
#include <string>
#include <vector>

#include "phyto/image_io.hpp"
#include "phyto/pipeline.hpp"
#include "phyto/stack_ingest.hpp"
#include "support.hpp"

namespace phyto::fixture {

struct Disc {
    int cx, cy, r, z;
};

inline ingest::ZStack disc_stack(const std::string& slide, char sector, int w, int h, int n_slices,
                                 const std::vector<Disc>& discs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> amp(40.0, 70.0);
    ingest::ZStack st;
    st.slide_id = slide;
    st.sector = sector;
    st.scale.microns_per_pixel = 0.5;
    st.scale.z_step = 2.0;
    st.scale.n_slices = n_slices;
    // One sharp layer per disc, composited over the background at each plane after blurring.
    std::vector<GrayImage> layers;
    for (const auto& d : discs) {
        GrayImage g(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const bool inside = (x - d.cx) * (x - d.cx) + (y - d.cy) * (y - d.cy) <= d.r * d.r;
                const double a = amp(rng);
                g.at(x, y) = inside ? 120.0 + (((x + y) % 2) ? a : -a) : 200.0;
            }
        layers.push_back(std::move(g));
    }
    for (int z = 0; z < n_slices; ++z) {
        RgbImage slice(w, h);
        GrayImage acc(w, h);
        for (auto& v : acc.data()) v = 200.0;
        for (std::size_t i = 0; i < discs.size(); ++i) {
            const auto b = gaussian_blur(layers[i], 1.2 * std::abs(z - discs[i].z));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (b.at(x, y) != 200.0) acc.at(x, y) += b.at(x, y) - 200.0;
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = std::clamp(acc.at(x, y), 0.0, 255.0);
                slice.at(x, y, 0) = static_cast<std::uint8_t>(std::lround(v * 0.8));
                slice.at(x, y, 1) = static_cast<std::uint8_t>(std::lround(v));
                slice.at(x, y, 2) = static_cast<std::uint8_t>(std::lround(v * 0.7));
            }
        st.slices.push_back(std::move(slice));
    }
    return st;
}

/// Writes a flat scanner export for two sectors of one slide and one sector of a second slide.
inline std::vector<std::string> write_raw_export(const fs::path& raw) {
    fs::create_directories(raw);
    struct Spec {
        std::string slide;
        char sector;
        std::vector<Disc> discs;
    };
    const std::vector<Spec> specs{
        {"UABPL-000001", 'a', {{30, 30, 14, 1}, {90, 40, 12, 3}, {55, 85, 16, 4}}},
        {"UABPL-000001", 'b', {{35, 70, 15, 2}, {95, 30, 13, 0}}},
        {"UABPL-000002", 'a', {{40, 40, 14, 3}, {90, 80, 15, 1}, {25, 95, 11, 2}}},
    };
    std::vector<std::string> sectors;
    std::uint64_t seed = 11;
    for (const auto& s : specs) {
        const auto st = disc_stack(s.slide, s.sector, 128, 112, 5, s.discs, seed++);
        const auto sector = st.sector_id();
        for (int z = 0; z < st.depth(); ++z) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_z%04d.png", sector.c_str(), z);
            io::write_png(raw / name, st.slices[static_cast<std::size_t>(z)]);
        }
        write_file(raw / (sector + ".ini"), ingest::format_scale_metadata(st.scale));
        sectors.push_back(sector);
    }
    return sectors;
}

inline const std::vector<std::string>& morph_classes() {
    static const std::vector<std::string> v{"Ceratium", "Dinobryon", "Peridinium"};
    return v;
}

/// Quality and morphotype tables over every segment found under segments/. Two segments are
/// gated out as Trash; the rest are Singlets with a deterministic morphotype spread.
inline void write_classifier_tables(const pipeline::Workspace& ws) {
    std::vector<std::string> ids;
    for (const auto& f : pipeline::detail::files_under(ws.segments_root()))
        if (f.filename() == "segments.csv")
            for (const auto& r : segment::read_index(f)) ids.push_back(r.segment_id);
    std::sort(ids.begin(), ids.end());
    std::string q = "segment_id,Singlet,PoorlySegmented,Trash,Multicell,SpongeSpicule,Diatom\n";
    std::string m = "segment_id,Ceratium,Dinobryon,Peridinium\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        q += ids[i] + (i % 4 == 3 ? ",0.1,0.05,0.8,0.02,0.02,0.01\n" : ",0.9,0.02,0.04,0.02,0.01,0.01\n");
        const double top = 0.5 + 0.05 * static_cast<double>(i);
        const double rest = (1 - top) / 2;
        std::vector<double> row(3, rest);
        row[i % 3] = top;
        m += ids[i];
        for (double v : row) m += "," + format_double(v);
        m += "\n";
    }
    write_file(ws.root / "tables" / "quality.csv", q);
    write_file(ws.root / "tables" / "morphotype.csv", m);
    write_file(ws.codebook(), "code,name\nCER,Ceratium\nDIN,Dinobryon\nPER,Peridinium\nDIP,Dinobryon/Peridinium\n");
    write_file(ws.root / "tables" / "reference.csv",
               "process,Ceratium,Dinobryon,Peridinium\nlake,0.7,0.2,0.1\nriver,0.1,0.3,0.6\n");
    write_file(ws.root / "tables" / "counts.csv", "class,count\nCeratium,40\nDinobryon,25\nPeridinium,35\n");
}

/// Runs ingest, extract, segment and gate over the synthetic export; returns the manifests in order.
inline std::vector<pipeline::RunManifest> build_workspace(const pipeline::Workspace& ws, const fs::path& raw) {
    std::vector<pipeline::RunManifest> out;
    const auto sectors = write_raw_export(raw);
    auto run = [&](const std::string& stage, const pipeline::Params& overrides) {
        out.push_back(pipeline::run_stage(ws, stage, pipeline::resolve_params(stage, nullptr, overrides)));
    };
    run("ingest", {{"raw_dir", raw.string()}});
    for (const auto& s : sectors) {
        run("extract", {{"sector", s}});
        run("segment", {{"sector", s}, {"octree_level", "6"}, {"min_component_size", "100"}});
    }
    write_classifier_tables(ws);
    run("gate", {{"quality_table", "tables/quality.csv"}, {"morphotype_table", "tables/morphotype.csv"}});
    return out;
}

}  // namespace phyto::fixture
