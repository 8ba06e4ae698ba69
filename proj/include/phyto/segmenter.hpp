#pragma once

// Octree-grid connected components over a sector point cloud, plus crop pairing and export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <tuple>
#include <string>
#include <utility>
#include <vector>

#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/image.hpp"
#include "phyto/image_io.hpp"
#include "phyto/point_cloud.hpp"
#include "phyto/util.hpp"

namespace phyto::segment {

struct SegmentationConfig {
    int octree_level = 12;
    std::size_t min_component_size = 750;
    std::size_t max_components = 99999;

    void validate() const {
        if (octree_level < 1 || octree_level > 21) fail(Errc::InvalidArgument, "octree_level must be in [1, 21]");
        if (min_component_size < 1) fail(Errc::InvalidArgument, "min_component_size must be >= 1");
        if (max_components < 1) fail(Errc::InvalidArgument, "max_components must be >= 1");
    }
};

struct BBox {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // inclusive
    [[nodiscard]] int width() const noexcept { return x_max - x_min + 1; }
    [[nodiscard]] int height() const noexcept { return y_max - y_min + 1; }
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct Segment {
    std::string segment_id;
    PointCloud cloud;
    BBox bbox;
    std::string crop_ref;
};

struct MetricPoint {
    double x, y, z;
};

inline MetricPoint index_to_metric(const Point& p, double microns_per_pixel, double z_step) {
    return {p.x * microns_per_pixel, p.y * microns_per_pixel, p.z * z_step};
}

inline std::array<std::int32_t, 3> metric_to_index(const MetricPoint& m, double microns_per_pixel, double z_step) {
    return {static_cast<std::int32_t>(std::lround(m.x / microns_per_pixel)),
            static_cast<std::int32_t>(std::lround(m.y / microns_per_pixel)),
            static_cast<std::int32_t>(std::lround(m.z / z_step))};
}

inline BBox bbox_of(const PointCloud& cloud) {
    if (cloud.empty()) fail(Errc::EmptyCloud, "bounding box of empty cloud");
    BBox b{cloud.points[0].x, cloud.points[0].y, cloud.points[0].x, cloud.points[0].y};
    for (const auto& p : cloud.points) {
        b.x_min = std::min(b.x_min, p.x);
        b.y_min = std::min(b.y_min, p.y);
        b.x_max = std::max(b.x_max, p.x);
        b.y_max = std::max(b.y_max, p.y);
    }
    return b;
}

/// Grid geometry for a cloud: per-axis origin and one cell edge shared by all axes.
struct Grid {
    std::array<double, 3> origin{};
    double cell = 0.0;  // 0 when all points coincide
    std::uint32_t cells_per_axis = 1;

    [[nodiscard]] std::array<std::uint32_t, 3> cell_of(const MetricPoint& m) const noexcept {
        const double v[3] = {m.x, m.y, m.z};
        std::array<std::uint32_t, 3> c{};
        for (int a = 0; a < 3; ++a) {
            if (cell <= 0.0) continue;
            const double f = std::floor((v[a] - origin[a]) / cell);
            c[a] = f <= 0 ? 0u : std::min(static_cast<std::uint32_t>(f), cells_per_axis - 1);
        }
        return c;
    }
};

inline Grid make_grid(const PointCloud& cloud, int level) {
    Grid g;
    g.cells_per_axis = 1u << level;
    const auto first = index_to_metric(cloud.points[0], cloud.microns_per_pixel, cloud.z_step);
    std::array<double, 3> lo{first.x, first.y, first.z}, hi = lo;
    for (const auto& p : cloud.points) {
        const auto m = index_to_metric(p, cloud.microns_per_pixel, cloud.z_step);
        const double v[3] = {m.x, m.y, m.z};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], v[a]);
            hi[a] = std::max(hi[a], v[a]);
        }
    }
    g.origin = lo;
    const double edge = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    g.cell = edge / static_cast<double>(g.cells_per_axis);
    return g;
}

namespace detail {

// LSD radix sort of point indices by key; `bits` is the number of significant key bits.
inline std::vector<std::uint32_t> radix_order(const std::vector<std::uint64_t>& key, int bits) {
    constexpr int kDigit = 11;
    constexpr std::size_t kBuckets = std::size_t{1} << kDigit;
    const std::size_t n = key.size();
    std::vector<std::uint32_t> order(n), scratch(n);
    std::iota(order.begin(), order.end(), 0u);
    std::vector<std::size_t> count(kBuckets);
    for (int shift = 0; shift < bits; shift += kDigit) {
        std::fill(count.begin(), count.end(), 0);
        for (auto i : order) ++count[(key[i] >> shift) & (kBuckets - 1)];
        std::size_t sum = 0;
        for (auto& c : count) sum += std::exchange(c, sum);
        for (auto i : order) scratch[count[(key[i] >> shift) & (kBuckets - 1)]++] = i;
        order.swap(scratch);
    }
    return order;
}

class UnionFind {
public:
    explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1) { std::iota(parent_.begin(), parent_.end(), 0u); }
    std::uint32_t find(std::uint32_t a) noexcept {
        while (parent_[a] != a) {
            parent_[a] = parent_[parent_[a]];
            a = parent_[a];
        }
        return a;
    }
    void unite(std::uint32_t a, std::uint32_t b) noexcept {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (size_[a] < size_[b]) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
    }

private:
    std::vector<std::uint32_t> parent_;
    std::vector<std::uint32_t> size_;
};

}  // namespace detail

/// Components of the input cloud. Each returned cloud keeps the input's point order and scale.
inline std::vector<PointCloud> octree_connected_components(const PointCloud& cloud, const SegmentationConfig& config) {
    config.validate();
    if (cloud.empty()) fail(Errc::EmptyCloud, "cannot segment an empty cloud");
    const std::size_t n = cloud.size();

    const Grid grid = make_grid(cloud, config.octree_level);

    // Points grouped by cell key (x | y << L | z << 2L); cells numbered in key order.
    const int level = config.octree_level;
    const std::uint64_t axis_mask = (std::uint64_t{1} << level) - 1;
    std::vector<std::uint64_t> point_key(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = grid.cell_of(index_to_metric(cloud.points[i], cloud.microns_per_pixel, cloud.z_step));
        point_key[i] = (std::uint64_t{c[2]} << (2 * level)) | (std::uint64_t{c[1]} << level) | c[0];
    }
    std::vector<std::uint32_t> point_cell(n);
    std::vector<std::uint64_t> keys;
    for (auto i : detail::radix_order(point_key, 3 * level)) {
        if (keys.empty() || keys.back() != point_key[i]) keys.push_back(point_key[i]);
        point_cell[i] = static_cast<std::uint32_t>(keys.size() - 1);
    }

    // Half of the 26-neighbourhood is enough for an undirected union. Every forward offset has a
    // positive key delta, so one merge-style sweep over the sorted keys finds all neighbours.
    const auto limit = static_cast<std::int64_t>(grid.cells_per_axis);
    detail::UnionFind uf(keys.size());
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (std::make_tuple(dz, dy, dx) <= std::make_tuple(0, 0, 0)) continue;
                const auto delta = static_cast<std::uint64_t>((std::int64_t{dz} << (2 * level)) + (std::int64_t{dy} << level) + dx);
                std::size_t j = 0;
                for (std::uint32_t i = 0; i < keys.size(); ++i) {
                    const auto x = static_cast<std::int64_t>(keys[i] & axis_mask) + dx;
                    const auto y = static_cast<std::int64_t>((keys[i] >> level) & axis_mask) + dy;
                    const auto z = static_cast<std::int64_t>(keys[i] >> (2 * level)) + dz;
                    if (x < 0 || y < 0 || x >= limit || y >= limit || z >= limit) continue;
                    const auto target = keys[i] + delta;
                    while (j < keys.size() && keys[j] < target) ++j;
                    if (j == keys.size()) break;
                    if (keys[j] == target) uf.unite(i, static_cast<std::uint32_t>(j));
                }
            }

    // Dense component numbering by root; point_cell is overwritten with the component index.
    std::vector<std::uint32_t> root_to_comp(keys.size(), UINT32_MAX);
    std::vector<std::size_t> comp_size;
    std::vector<std::array<std::int32_t, 3>> comp_first;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = uf.find(point_cell[i]);
        if (root_to_comp[r] == UINT32_MAX) {
            root_to_comp[r] = static_cast<std::uint32_t>(comp_size.size());
            comp_size.push_back(0);
            comp_first.push_back({INT32_MAX, INT32_MAX, INT32_MAX});
        }
        const auto c = point_cell[i] = root_to_comp[r];
        const auto& p = cloud.points[i];
        ++comp_size[c];
        comp_first[c] = std::min(comp_first[c], std::array<std::int32_t, 3>{p.x, p.y, p.z});
    }

    struct Candidate {
        std::size_t comp;
        std::size_t count;
        std::array<std::int32_t, 3> first;
    };
    std::vector<Candidate> kept;
    for (std::size_t c = 0; c < comp_size.size(); ++c)
        if (comp_size[c] >= config.min_component_size) kept.push_back({c, comp_size[c], comp_first[c]});
    std::sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.first < b.first;
    });
    if (kept.size() > config.max_components) kept.resize(config.max_components);

    std::vector<PointCloud> out(kept.size());
    std::vector<std::uint32_t> comp_to_out(comp_size.size(), UINT32_MAX);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        comp_to_out[kept[k].comp] = static_cast<std::uint32_t>(k);
        out[k].microns_per_pixel = cloud.microns_per_pixel;
        out[k].z_step = cloud.z_step;
        out[k].points.reserve(kept[k].count);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (const auto k = comp_to_out[point_cell[i]]; k != UINT32_MAX) out[k].points.push_back(cloud.points[i]);
    return out;
}

inline std::string segment_id(const std::string& sector_id, std::size_t serial) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "-%05zu", serial);
    return sector_id + buf;
}

/// Components wrapped as segments; serials follow output order starting at 1.
inline std::vector<Segment> segment_sector(const PointCloud& cloud, const std::string& sector_id,
                                           const SegmentationConfig& config) {
    std::vector<Segment> out;
    std::size_t serial = 1;
    for (auto& pc : octree_connected_components(cloud, config)) {
        Segment s;
        s.segment_id = segment_id(sector_id, serial++);
        s.bbox = bbox_of(pc);
        s.cloud = std::move(pc);
        out.push_back(std::move(s));
    }
    return out;
}

inline RgbImage crop_for_segment(const Segment& segment, const RgbImage& orthoimage) {
    const auto& b = segment.bbox;
    if (b.x_min < 0 || b.y_min < 0 || b.x_max >= orthoimage.width() || b.y_max >= orthoimage.height() ||
        b.x_max < b.x_min || b.y_max < b.y_min)
        fail(Errc::BBoxOutOfBounds, "bbox of " + segment.segment_id + " exceeds the orthoimage");
    return orthoimage.crop(b.x_min, b.y_min, b.width(), b.height());
}

inline constexpr const char* kIndexHeader = "segment_id,cloud_path,crop_path,x_min,y_min,x_max,y_max,n_points";

/// Writes `<id>.srpc` + `<id>.png` per segment and `segments.csv`; paths in the index are relative to `dir`.
inline std::filesystem::path export_segments(std::vector<Segment>& segments, const RgbImage& orthoimage,
                                             const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(Errc::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
    csv::Table index;
    index.header = split(kIndexHeader, ',');
    for (auto& s : segments) {
        const auto crop = crop_for_segment(s, orthoimage);
        const std::string cloud_rel = "clouds/" + s.segment_id + ".srpc";
        const std::string crop_rel = "crops/" + s.segment_id + ".png";
        srpc::write(dir / cloud_rel, s.cloud);
        io::write_png(dir / crop_rel, crop);
        s.crop_ref = crop_rel;
        index.rows.push_back({s.segment_id, cloud_rel, crop_rel, std::to_string(s.bbox.x_min),
                              std::to_string(s.bbox.y_min), std::to_string(s.bbox.x_max),
                              std::to_string(s.bbox.y_max), std::to_string(s.cloud.size())});
    }
    const auto path = dir / "segments.csv";
    write_file(path, csv::format(index));
    return path;
}

struct IndexRow {
    std::string segment_id, cloud_path, crop_path;
    BBox bbox;
    std::size_t n_points = 0;
};

inline std::vector<IndexRow> read_index(const std::filesystem::path& path) {
    const auto table = csv::read(path);
    if (table.header != split(kIndexHeader, ',')) fail(Errc::ParseError, path.string() + ": unexpected index header");
    std::vector<IndexRow> rows;
    for (const auto& r : table.rows) {
        IndexRow row;
        row.segment_id = r[0];
        row.cloud_path = r[1];
        row.crop_path = r[2];
        row.bbox = {static_cast<int>(parse_int(r[3])), static_cast<int>(parse_int(r[4])),
                    static_cast<int>(parse_int(r[5])), static_cast<int>(parse_int(r[6]))};
        row.n_points = static_cast<std::size_t>(parse_int(r[7]));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace phyto::segment
