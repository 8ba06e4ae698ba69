#pragma once

// Classifier probability tables, argmax predictions, the quality gate and a small baseline
// classifier over hand-made shape descriptors.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/image.hpp"
#include "phyto/point_cloud.hpp"
#include "phyto/util.hpp"

namespace phyto::inference {

inline constexpr double kRowSumTolerance = 1e-6;

class ProbabilityTable {
public:
    ProbabilityTable() = default;
    explicit ProbabilityTable(std::vector<std::string> class_names) : class_names_(std::move(class_names)) {
        if (class_names_.size() < 2) fail(Errc::InvalidArgument, "a probability table needs at least 2 classes");
        std::set<std::string> unique(class_names_.begin(), class_names_.end());
        if (unique.size() != class_names_.size()) fail(Errc::InvalidArgument, "duplicate class name in table header");
    }

    /// Validates, renormalises and appends a row.
    void add_row(const std::string& segment_id, std::vector<double> probs) {
        if (probs.size() != class_names_.size())
            fail(Errc::ParseError, segment_id + ": expected " + std::to_string(class_names_.size()) + " probabilities");
        if (index_.count(segment_id)) fail(Errc::DuplicateSegment, "duplicate segment " + segment_id);
        long double sum = 0;
        for (double p : probs) {
            if (!std::isfinite(p)) fail(Errc::RowSumInvalid, segment_id + ": non-finite probability");
            if (p < 0) fail(Errc::NegativeProbability, segment_id + ": negative probability");
            sum += p;
        }
        if (std::abs(static_cast<double>(sum) - 1.0) > kRowSumTolerance)
            fail(Errc::RowSumInvalid, segment_id + ": probabilities sum to " + format_double(static_cast<double>(sum)));
        for (double& p : probs) p = static_cast<double>(p / sum);
        // A normalised row always has max >= 1/n; only rounding can push it below.
        const double floor = 1.0 / static_cast<double>(probs.size());
        auto it = std::max_element(probs.begin(), probs.end());
        if (*it < floor) {
            if (floor - *it > 1e-12) fail(Errc::RowSumInvalid, segment_id + ": maximum below 1/n");
            *it = floor;
        }
        index_.emplace(segment_id, rows_.size());
        segment_ids_.push_back(segment_id);
        rows_.push_back(std::move(probs));
    }

    [[nodiscard]] const std::vector<std::string>& class_names() const noexcept { return class_names_; }
    [[nodiscard]] const std::vector<std::string>& segment_ids() const noexcept { return segment_ids_; }
    [[nodiscard]] const std::vector<double>& row(std::size_t i) const { return rows_.at(i); }
    [[nodiscard]] std::size_t size() const noexcept { return rows_.size(); }
    [[nodiscard]] const std::vector<double>* find(const std::string& segment_id) const {
        auto it = index_.find(segment_id);
        return it == index_.end() ? nullptr : &rows_[it->second];
    }

private:
    std::vector<std::string> class_names_;
    std::vector<std::string> segment_ids_;
    std::vector<std::vector<double>> rows_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline ProbabilityTable parse_probability_table(std::string_view text) {
    const auto t = csv::parse(text);
    if (t.header.empty() || t.header[0] != "segment_id")
        fail(Errc::ParseError, "probability table must start with a segment_id column");
    ProbabilityTable table(std::vector<std::string>(t.header.begin() + 1, t.header.end()));
    for (const auto& r : t.rows) {
        std::vector<double> probs;
        probs.reserve(r.size() - 1);
        for (std::size_t i = 1; i < r.size(); ++i) probs.push_back(parse_double(r[i]));
        table.add_row(r[0], std::move(probs));
    }
    return table;
}

inline ProbabilityTable load_probability_table(const std::filesystem::path& path) {
    return parse_probability_table(read_file(path));
}

inline std::string format_probability_table(const ProbabilityTable& table) {
    csv::Table t;
    t.header.push_back("segment_id");
    t.header.insert(t.header.end(), table.class_names().begin(), table.class_names().end());
    for (std::size_t i = 0; i < table.size(); ++i) {
        csv::Row r{table.segment_ids()[i]};
        for (double p : table.row(i)) r.push_back(format_double(p));
        t.rows.push_back(std::move(r));
    }
    return csv::format(t);
}

struct Prediction {
    std::string segment_id;
    std::string cls;
    double confidence = 0.0;
    std::size_t class_index = 0;
};

/// Argmax with ties broken towards the lexicographically smallest class name.
inline Prediction argmax_class(std::span<const double> probs, const std::vector<std::string>& class_names,
                               std::string segment_id = {}) {
    if (probs.size() != class_names.size() || probs.size() < 2)
        fail(Errc::InvalidArgument, "probability vector does not match class list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best] || (probs[i] == probs[best] && class_names[i] < class_names[best])) best = i;
    const double floor = 1.0 / static_cast<double>(probs.size());
    if (probs[best] < floor)
        fail(Errc::RowSumInvalid, "confidence " + format_double(probs[best]) + " below 1/n for " + segment_id);
    return {std::move(segment_id), class_names[best], probs[best], best};
}

inline std::vector<Prediction> predict_all(const ProbabilityTable& table) {
    std::vector<Prediction> out;
    out.reserve(table.size());
    for (std::size_t i = 0; i < table.size(); ++i)
        out.push_back(argmax_class(table.row(i), table.class_names(), table.segment_ids()[i]));
    return out;
}

// ---------------------------------------------------------------- quality gate

inline const std::array<std::string, 2>& retained_quality_classes() {
    static const std::array<std::string, 2> v{"Singlet", "SpongeSpicule"};
    return v;
}
inline const std::array<std::string, 4>& removed_quality_classes() {
    static const std::array<std::string, 4> v{"PoorlySegmented", "Trash", "Multicell", "Diatom"};
    return v;
}

struct GateResult {
    std::vector<Prediction> retained;
    std::map<std::string, std::size_t> removed_counts;  // every removable class, zeros included
};

inline GateResult quality_gate(const std::vector<Prediction>& predictions) {
    const auto& keep = retained_quality_classes();
    const auto& drop = removed_quality_classes();
    GateResult out;
    for (const auto& c : drop) out.removed_counts[c] = 0;
    for (const auto& p : predictions) {
        if (std::find(keep.begin(), keep.end(), p.cls) != keep.end())
            out.retained.push_back(p);
        else if (std::find(drop.begin(), drop.end(), p.cls) != drop.end())
            ++out.removed_counts[p.cls];
        else
            fail(Errc::UnknownQualityClass, "unknown quality class '" + p.cls + "' for " + p.segment_id);
    }
    return out;
}

inline std::string gate_report_csv(const GateResult& gate) {
    csv::Table t;
    t.header = {"class", "removed_count"};
    for (const auto& c : removed_quality_classes()) t.rows.push_back({c, std::to_string(gate.removed_counts.at(c))});
    return csv::format(t);
}

// ---------------------------------------------------------------- baseline classifier

inline constexpr std::size_t kDescriptorCount = 8;
using Descriptor = std::array<double, kDescriptorCount>;

inline const std::array<std::string, kDescriptorCount>& descriptor_names() {
    static const std::array<std::string, kDescriptorCount> v{
        "log_count", "aspect", "fill_ratio", "z_extent", "mean_luminance", "std_luminance", "convexity", "elongation"};
    return v;
}

namespace detail {

inline double cross(std::array<long long, 2> o, std::array<long long, 2> a, std::array<long long, 2> b) {
    return static_cast<double>((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]));
}

// Area of the convex hull of pixel squares (each point covers a unit cell).
inline double hull_area(std::vector<std::array<long long, 2>> pts) {
    std::vector<std::array<long long, 2>> corners;
    corners.reserve(pts.size() * 4);
    for (const auto& p : pts)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) corners.push_back({p[0] + dx, p[1] + dy});
    std::sort(corners.begin(), corners.end());
    corners.erase(std::unique(corners.begin(), corners.end()), corners.end());
    if (corners.size() < 3) return 0.0;
    std::vector<std::array<long long, 2>> hull(2 * corners.size());
    std::size_t k = 0;
    for (const auto& p : corners) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = corners.size() - 1, t = k + 1; i > 0; --i) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], corners[i - 1]) <= 0) --k;
        hull[k++] = corners[i - 1];
    }
    hull.resize(k - 1);
    double area = 0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        area += static_cast<double>(a[0] * b[1] - b[0] * a[1]);
    }
    return std::abs(area) / 2.0;
}

}  // namespace detail

inline Descriptor describe(const PointCloud& cloud, const RgbImage& crop) {
    if (cloud.empty()) fail(Errc::EmptyCloud, "cannot describe an empty segment");
    int x0 = cloud.points[0].x, x1 = x0, y0 = cloud.points[0].y, y1 = y0, z0 = cloud.points[0].z, z1 = z0;
    std::vector<std::array<long long, 2>> xy;
    xy.reserve(cloud.size());
    double mx = 0, my = 0;
    for (const auto& p : cloud.points) {
        x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
        z0 = std::min(z0, p.z), z1 = std::max(z1, p.z);
        xy.push_back({p.x, p.y});
        mx += p.x;
        my += p.y;
    }
    const double n = static_cast<double>(cloud.size());
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (const auto& p : cloud.points) {
        sxx += (p.x - mx) * (p.x - mx);
        syy += (p.y - my) * (p.y - my);
        sxy += (p.x - mx) * (p.y - my);
    }
    sxx /= n, syy /= n, sxy /= n;
    const double tr = sxx + syy, det = sxx * syy - sxy * sxy;
    const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
    const double l1 = tr / 2 + disc, l2 = std::max(0.0, tr / 2 - disc);

    std::sort(xy.begin(), xy.end());
    xy.erase(std::unique(xy.begin(), xy.end()), xy.end());
    const double w = x1 - x0 + 1.0, h = y1 - y0 + 1.0;
    const double covered = static_cast<double>(xy.size());
    const double hull = detail::hull_area(std::move(xy));

    double lm = 0, lsq = 0;
    const auto npx = static_cast<double>(crop.pixel_count());
    for (int y = 0; y < crop.height(); ++y)
        for (int x = 0; x < crop.width(); ++x) {
            const double v = luminance(crop.at(x, y, 0), crop.at(x, y, 1), crop.at(x, y, 2));
            lm += v;
            lsq += v * v;
        }
    if (npx > 0) {
        lm /= npx;
        lsq = std::sqrt(std::max(0.0, lsq / npx - lm * lm));
    }
    return {std::log(n),
            std::min(w, h) / std::max(w, h),
            covered / (w * h),
            (z1 - z0) * cloud.z_step,
            lm / 255.0,
            lsq / 255.0,
            hull > 0 ? std::min(1.0, covered / hull) : 1.0,
            std::log(std::sqrt((l1 + 0.25) / (l2 + 0.25)))};
}

struct SegmentSample {
    std::string segment_id;
    PointCloud cloud;
    RgbImage crop;
};

struct TrainingOptions {
    int iterations = 800;
    double learning_rate = 0.5;
    double l2 = 1e-4;
};

/// Softmax regression over standardised descriptors, trained by full-batch gradient descent.
class BaselineClassifier {
public:
    void fit(const std::vector<Descriptor>& x, const std::vector<std::string>& labels, const TrainingOptions& opt = {}) {
        if (x.size() != labels.size() || x.empty()) fail(Errc::InvalidArgument, "training data and labels differ in size");
        std::set<std::string> distinct(labels.begin(), labels.end());
        if (distinct.size() < 2) fail(Errc::InvalidArgument, "baseline training needs at least 2 classes");
        classes_.assign(distinct.begin(), distinct.end());
        const std::size_t n = x.size(), c = classes_.size(), d = kDescriptorCount + 1;
        for (std::size_t j = 0; j < kDescriptorCount; ++j) {
            double m = 0, s = 0;
            for (const auto& r : x) m += r[j];
            m /= static_cast<double>(n);
            for (const auto& r : x) s += (r[j] - m) * (r[j] - m);
            s = std::sqrt(s / static_cast<double>(n));
            mean_[j] = m;
            scale_[j] = s > 1e-12 ? s : 1.0;
        }
        std::vector<std::size_t> y(n);
        for (std::size_t i = 0; i < n; ++i)
            y[i] = static_cast<std::size_t>(std::lower_bound(classes_.begin(), classes_.end(), labels[i]) - classes_.begin());
        std::vector<std::array<double, kDescriptorCount + 1>> z(n);
        for (std::size_t i = 0; i < n; ++i) z[i] = standardise(x[i]);

        weights_.assign(c * d, 0.0);
        std::vector<double> grad(c * d), p(c);
        for (int it = 0; it < opt.iterations; ++it) {
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                softmax(z[i], p);
                for (std::size_t k = 0; k < c; ++k) {
                    const double e = p[k] - (k == y[i] ? 1.0 : 0.0);
                    for (std::size_t j = 0; j < d; ++j) grad[k * d + j] += e * z[i][j];
                }
            }
            for (std::size_t q = 0; q < grad.size(); ++q)
                weights_[q] -= opt.learning_rate * (grad[q] / static_cast<double>(n) + opt.l2 * weights_[q]);
        }
    }

    [[nodiscard]] bool trained() const noexcept { return !classes_.empty(); }
    [[nodiscard]] const std::vector<std::string>& classes() const noexcept { return classes_; }

    [[nodiscard]] std::vector<double> predict_proba(const Descriptor& x) const {
        if (!trained()) fail(Errc::UntrainedModel, "baseline classifier has not been trained");
        std::vector<double> p(classes_.size());
        softmax(standardise(x), p);
        return p;
    }

    [[nodiscard]] ProbabilityTable classify(const std::vector<SegmentSample>& segments) const {
        if (!trained()) fail(Errc::UntrainedModel, "baseline classifier has not been trained");
        ProbabilityTable table(classes_);
        for (const auto& s : segments) table.add_row(s.segment_id, predict_proba(describe(s.cloud, s.crop)));
        return table;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        if (!trained()) fail(Errc::UntrainedModel, "baseline classifier has not been trained");
        return {{"kind", "softmax-baseline"}, {"classes", classes_}, {"mean", mean_}, {"scale", scale_},
                {"weights", weights_}};
    }

    static BaselineClassifier from_json(const nlohmann::json& j) {
        BaselineClassifier m;
        try {
            m.classes_ = j.at("classes").get<std::vector<std::string>>();
            m.mean_ = j.at("mean").get<std::array<double, kDescriptorCount>>();
            m.scale_ = j.at("scale").get<std::array<double, kDescriptorCount>>();
            m.weights_ = j.at("weights").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::ParseError, std::string("baseline model: ") + e.what());
        }
        if (m.classes_.size() < 2 || m.weights_.size() != m.classes_.size() * (kDescriptorCount + 1))
            fail(Errc::ParseError, "baseline model: inconsistent shapes");
        return m;
    }

private:
    [[nodiscard]] std::array<double, kDescriptorCount + 1> standardise(const Descriptor& x) const {
        std::array<double, kDescriptorCount + 1> z{};
        for (std::size_t j = 0; j < kDescriptorCount; ++j) z[j] = (x[j] - mean_[j]) / scale_[j];
        z[kDescriptorCount] = 1.0;
        return z;
    }

    void softmax(const std::array<double, kDescriptorCount + 1>& z, std::vector<double>& p) const {
        const std::size_t d = kDescriptorCount + 1;
        double mx = -INFINITY;
        for (std::size_t k = 0; k < p.size(); ++k) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) s += weights_[k * d + j] * z[j];
            p[k] = s;
            mx = std::max(mx, s);
        }
        double total = 0;
        for (double& v : p) total += v = std::exp(v - mx);
        for (double& v : p) v /= total;
    }

    std::vector<std::string> classes_;
    std::array<double, kDescriptorCount> mean_{};
    std::array<double, kDescriptorCount> scale_{};
    std::vector<double> weights_;
};

}  // namespace phyto::inference
