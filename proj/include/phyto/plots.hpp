#pragma once

// Deterministic SVG + CSV export for assemblage results.

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phyto/assemblage.hpp"
#include "phyto/csv.hpp"
#include "phyto/util.hpp"

namespace phyto::plots {

inline constexpr std::array<const char*, 24> kPalette{
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5", "#393b79", "#637939", "#8c6d31", "#843c39"};

/// Colour by position of the class in sorted order, cycling through the palette.
inline std::map<std::string, std::string> colour_map(const std::vector<std::string>& sorted_classes) {
    std::map<std::string, std::string> m;
    for (std::size_t i = 0; i < sorted_classes.size(); ++i) m[sorted_classes[i]] = kPalette[i % kPalette.size()];
    return m;
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    std::string s(buf);
    if (s == "-0.000") s = "0.000";
    return s;
}

inline std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

class Svg {
public:
    Svg(double w, double h) : w_(w), h_(h) {}
    void rect(double x, double y, double w, double h, const std::string& fill, const std::string& extra = {}) {
        body_ += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) + "\" height=\"" + num(h) +
                 "\" fill=\"" + fill + "\"" + (extra.empty() ? "" : " " + extra) + "/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke = "#000") {
        body_ += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
                 "\" stroke=\"" + stroke + "\"/>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, const std::string& extra = {}) {
        body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) body_ += (i ? " " : "") + num(pts[i].first) + "," + num(pts[i].second);
        body_ += "\"" + (extra.empty() ? "" : " " + extra) + "/>\n";
    }
    void text(double x, double y, const std::string& s, const std::string& extra = {}) {
        body_ += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"10\"" + (extra.empty() ? "" : " " + extra) +
                 ">" + xml_escape(s) + "</text>\n";
    }
    [[nodiscard]] std::string str() const {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w_) + "\" height=\"" + num(h_) +
               "\" viewBox=\"0 0 " + num(w_) + " " + num(h_) + "\">\n" + body_ + "</svg>\n";
    }

private:
    double w_, h_;
    std::string body_;
};

inline constexpr double kMargin = 40.0;
inline constexpr double kPlotHeight = 200.0;
inline constexpr double kColumnWidth = 20.0;

/// Stacked share columns, one per unit, classes stacked in sorted order from the bottom.
inline std::string barcode_svg(const std::vector<assemblage::Composition>& comps) {
    const auto classes = assemblage::class_union(comps);
    const auto colours = colour_map(classes);
    const double width = 2 * kMargin + kColumnWidth * static_cast<double>(comps.size());
    Svg svg(width, kPlotHeight + 2 * kMargin);
    svg.line(kMargin, kMargin, kMargin, kMargin + kPlotHeight);
    svg.line(kMargin, kMargin + kPlotHeight, width - kMargin, kMargin + kPlotHeight);
    for (std::size_t u = 0; u < comps.size(); ++u) {
        const auto& c = comps[u];
        const double x = kMargin + kColumnWidth * static_cast<double>(u);
        double y = kMargin + kPlotHeight;
        for (const auto& cls : classes) {
            auto it = c.counts.find(cls);
            if (it == c.counts.end() || it->second == 0 || c.total == 0) continue;
            const double h = kPlotHeight * static_cast<double>(it->second) / static_cast<double>(c.total);
            y -= h;
            svg.rect(x, y, kColumnWidth, h, colours.at(cls),
                     "class=\"bar\" data-unit=\"" + xml_escape(c.unit_id) + "\" data-class=\"" + xml_escape(cls) + "\"");
        }
        svg.text(x, kMargin + kPlotHeight + 12, c.unit_id, "transform=\"rotate(45 " + num(x) + " " + num(kMargin + kPlotHeight + 12) + ")\"");
    }
    return svg.str();
}

inline std::string density_svg(const std::map<std::string, assemblage::DensityCurve>& curves) {
    std::vector<std::string> classes;
    for (const auto& [k, _] : curves) classes.push_back(k);
    const auto colours = colour_map(classes);
    const double w = 400;
    Svg svg(w + 2 * kMargin, kPlotHeight + 2 * kMargin);
    svg.line(kMargin, kMargin + kPlotHeight, kMargin + w, kMargin + kPlotHeight);
    double ymax = 0;
    for (const auto& [_, c] : curves)
        for (double v : c.y) ymax = std::max(ymax, v);
    for (const auto& [cls, c] : curves) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < c.x.size(); ++i)
            pts.emplace_back(kMargin + w * c.x[i], kMargin + kPlotHeight - (ymax > 0 ? kPlotHeight * c.y[i] / ymax : 0));
        svg.polyline(pts, colours.at(cls), "data-class=\"" + xml_escape(cls) + "\"");
    }
    return svg.str();
}

/// Loadings heatmap; cells with |loading| >= 1/sqrt(p) are outlined in green.
inline std::string loadings_svg(const assemblage::PcaResult& pca, const std::vector<std::string>& row_names) {
    const auto p = static_cast<std::size_t>(pca.loadings.rows());
    const auto k = static_cast<std::size_t>(pca.loadings.cols());
    const double cell = 24;
    Svg svg(2 * kMargin + 100 + cell * static_cast<double>(k), 2 * kMargin + cell * static_cast<double>(p));
    const double cutoff = p ? 1.0 / std::sqrt(static_cast<double>(p)) : 1.0;
    for (std::size_t i = 0; i < p; ++i) {
        svg.text(kMargin, kMargin + cell * (static_cast<double>(i) + 0.7), i < row_names.size() ? row_names[i] : std::to_string(i));
        for (std::size_t j = 0; j < k; ++j) {
            const double v = pca.loadings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const int shade = static_cast<int>(std::lround(255 * (1 - std::min(1.0, std::abs(v)))));
            char fill[16];
            if (v >= 0)
                std::snprintf(fill, sizeof fill, "#ff%02x%02x", shade, shade);
            else
                std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
            const bool hi = std::abs(v) >= cutoff;
            svg.rect(kMargin + 100 + cell * static_cast<double>(j), kMargin + cell * static_cast<double>(i), cell, cell, fill,
                     hi ? "stroke=\"#00a000\" stroke-width=\"2\" class=\"highlight\"" : "");
        }
    }
    return svg.str();
}

inline std::string dendrogram_svg(const std::vector<assemblage::Merge>& merges, const std::vector<std::string>& labels) {
    const std::size_t n = labels.size();
    const double step = 20;
    Svg svg(2 * kMargin + step * static_cast<double>(n), kPlotHeight + 2 * kMargin + 60);
    if (n < 2 || merges.empty()) return svg.str();
    // Leaf order from the final merge, left subtree first.
    std::vector<std::size_t> order;
    std::vector<std::size_t> stack{n + merges.size() - 1};
    while (!stack.empty()) {
        const auto id = stack.back();
        stack.pop_back();
        if (id < n) {
            order.push_back(id);
        } else {
            stack.push_back(merges[id - n].b);
            stack.push_back(merges[id - n].a);
        }
    }
    const double hmax = merges.back().height > 0 ? merges.back().height : 1.0;
    std::vector<double> xs(n + merges.size()), ys(n + merges.size(), kMargin + kPlotHeight);
    for (std::size_t i = 0; i < order.size(); ++i) {
        xs[order[i]] = kMargin + step * (static_cast<double>(i) + 0.5);
        svg.text(xs[order[i]], kMargin + kPlotHeight + 12, labels[order[i]],
                 "transform=\"rotate(90 " + num(xs[order[i]]) + " " + num(kMargin + kPlotHeight + 12) + ")\"");
    }
    for (std::size_t s = 0; s < merges.size(); ++s) {
        const auto& m = merges[s];
        const double y = kMargin + kPlotHeight - kPlotHeight * m.height / hmax;
        svg.line(xs[m.a], ys[m.a], xs[m.a], y);
        svg.line(xs[m.b], ys[m.b], xs[m.b], y);
        svg.line(xs[m.a], y, xs[m.b], y);
        xs[n + s] = (xs[m.a] + xs[m.b]) / 2;
        ys[n + s] = y;
    }
    return svg.str();
}

inline std::string chi_square_svg(const assemblage::ChiSquareResult& res, const assemblage::ChiSquareReportOptions& opt = {}) {
    const double cell = 24;
    const auto r = res.row_names.size(), c = res.col_names.size();
    Svg svg(2 * kMargin + 80 + cell * static_cast<double>(c), 2 * kMargin + 80 + cell * static_cast<double>(r));
    const bool sig = res.p_value < opt.alpha;
    for (std::size_t i = 0; i < r; ++i) {
        svg.text(kMargin, kMargin + 80 + cell * (static_cast<double>(i) + 0.7), res.row_names[i]);
        for (std::size_t j = 0; j < c; ++j) {
            const double v = res.contribution[i][j] / 100.0;
            const int shade = static_cast<int>(std::lround(255 * (1 - std::min(1.0, std::sqrt(std::abs(v))))));
            char fill[16];
            std::snprintf(fill, sizeof fill, v >= 0 ? "#ff%02x%02x" : "#%02x%02xff", shade, shade);
            const bool flag = sig && std::abs(res.residual[i][j]) > opt.residual_cutoff;
            svg.rect(kMargin + 80 + cell * static_cast<double>(j), kMargin + 80 + cell * static_cast<double>(i), cell, cell,
                     fill, flag ? "stroke=\"#00a000\" stroke-width=\"2\" class=\"significant\"" : "");
        }
    }
    for (std::size_t j = 0; j < c; ++j) {
        const double x = kMargin + 80 + cell * (static_cast<double>(j) + 0.5);
        svg.text(x, kMargin + 75, res.col_names[j], "transform=\"rotate(-60 " + num(x) + " " + num(kMargin + 75) + ")\"");
    }
    return svg.str();
}

struct PlotBundle {
    std::vector<assemblage::Composition> compositions;
    std::map<std::string, assemblage::DensityCurve> densities;
    std::optional<assemblage::PcaResult> pca;
    std::vector<std::string> pca_unit_names;
    std::vector<std::string> pca_coord_names;
    std::vector<assemblage::Merge> dendrogram;
    std::vector<std::pair<std::string, assemblage::ChiSquareResult>> chi_square;  // per slide
};

/// Writes SVG files and the CSV of every plotted value into `dir`; returns the written paths in order.
inline std::vector<std::filesystem::path> export_plots(const PlotBundle& b, const std::filesystem::path& dir,
                                                      const assemblage::ChiSquareReportOptions& opt = {}) {
    std::vector<std::filesystem::path> out;
    auto put = [&](const std::string& name, const std::string& bytes) {
        write_file(dir / name, bytes);
        out.push_back(dir / name);
    };
    put("composition.svg", barcode_svg(b.compositions));
    put("composition.csv", assemblage::compositions_csv(b.compositions));

    csv::Table dens;
    dens.header = {"class", "x", "density", "bandwidth"};
    for (const auto& [cls, c] : b.densities)
        for (std::size_t i = 0; i < c.x.size(); ++i)
            dens.rows.push_back({cls, format_sig(c.x[i], 10), format_sig(c.y[i], 10), format_sig(c.bandwidth, 10)});
    if (!b.densities.empty()) {
        put("confidence_density.svg", density_svg(b.densities));
        put("confidence_density.csv", csv::format(dens));
    }

    if (b.pca) {
        put("pca_loadings.svg", loadings_svg(*b.pca, b.pca_coord_names));
        csv::Table load;
        load.header = {"coordinate", "component", "loading", "explained"};
        for (Eigen::Index i = 0; i < b.pca->loadings.rows(); ++i)
            for (Eigen::Index j = 0; j < b.pca->loadings.cols(); ++j)
                load.rows.push_back({static_cast<std::size_t>(i) < b.pca_coord_names.size() ? b.pca_coord_names[static_cast<std::size_t>(i)] : std::to_string(i),
                                     "PC" + std::to_string(j + 1), format_sig(b.pca->loadings(i, j), 10),
                                     format_sig(b.pca->explained(j), 10)});
        put("pca_loadings.csv", csv::format(load));
        csv::Table scores;
        scores.header = {"unit_id", "component", "score"};
        for (Eigen::Index i = 0; i < b.pca->scores.rows(); ++i)
            for (Eigen::Index j = 0; j < b.pca->scores.cols(); ++j)
                scores.rows.push_back({static_cast<std::size_t>(i) < b.pca_unit_names.size() ? b.pca_unit_names[static_cast<std::size_t>(i)] : std::to_string(i),
                                       "PC" + std::to_string(j + 1), format_sig(b.pca->scores(i, j), 10)});
        put("pca_scores.csv", csv::format(scores));
    }

    if (!b.dendrogram.empty()) {
        put("dendrogram.svg", dendrogram_svg(b.dendrogram, b.pca_unit_names));
        csv::Table t;
        t.header = {"step", "a", "b", "height", "size"};
        for (std::size_t s = 0; s < b.dendrogram.size(); ++s) {
            const auto& m = b.dendrogram[s];
            t.rows.push_back({std::to_string(s), std::to_string(m.a), std::to_string(m.b), format_sig(m.height, 12),
                              std::to_string(m.size)});
        }
        put("dendrogram.csv", csv::format(t));
    }

    if (!b.chi_square.empty()) {
        csv::Table report;
        for (const auto& [slide, res] : b.chi_square) {
            assemblage::append_chi_square_report(report, slide, res, opt);
            put("chi_square_" + slide + ".svg", chi_square_svg(res, opt));
        }
        put("chi_square.csv", csv::format(report));
    }
    return out;
}

}  // namespace phyto::plots
