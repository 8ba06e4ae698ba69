#pragma once

// Compositional statistics over per-unit class counts.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/inference_gate.hpp"
#include "phyto/util.hpp"

namespace phyto::assemblage {

// ---------------------------------------------------------------- compositions

struct Composition {
    std::string unit_id;
    std::map<std::string, long long> counts;
    long long total = 0;

    friend bool operator==(const Composition&, const Composition&) = default;
};

inline Composition composition_counts(const std::vector<inference::Prediction>& predictions, std::string unit_id) {
    Composition c;
    c.unit_id = std::move(unit_id);
    for (const auto& p : predictions) {
        ++c.counts[p.cls];
        ++c.total;
    }
    return c;
}

/// Sum of several compositions (e.g. sectors into a slide).
inline Composition merge_compositions(const std::vector<Composition>& parts, std::string unit_id) {
    Composition c;
    c.unit_id = std::move(unit_id);
    for (const auto& p : parts)
        for (const auto& [k, v] : p.counts) {
            c.counts[k] += v;
            c.total += v;
        }
    return c;
}

/// Sorted union of class names over compositions.
inline std::vector<std::string> class_union(const std::vector<Composition>& comps) {
    std::map<std::string, int> seen;
    for (const auto& c : comps)
        for (const auto& [k, _] : c.counts) seen[k];
    std::vector<std::string> out;
    for (const auto& [k, _] : seen) out.push_back(k);
    return out;
}

inline std::vector<double> count_vector(const Composition& c, const std::vector<std::string>& classes) {
    std::vector<double> v;
    v.reserve(classes.size());
    for (const auto& k : classes) {
        auto it = c.counts.find(k);
        v.push_back(it == c.counts.end() ? 0.0 : static_cast<double>(it->second));
    }
    return v;
}

inline std::string compositions_csv(const std::vector<Composition>& comps) {
    csv::Table t;
    t.header = {"unit_id", "class", "count"};
    for (const auto& c : comps)
        for (const auto& [k, v] : c.counts) t.rows.push_back({c.unit_id, k, std::to_string(v)});
    return csv::format(t);
}

// ---------------------------------------------------------------- KDE

/// Rule-of-thumb bandwidth 0.9·min(sd, IQR/1.34)·n^(-1/5) with the usual fallbacks for degenerate samples.
inline double silverman_bandwidth(std::vector<double> x) {
    if (x.empty()) fail(Errc::EmptyInput, "bandwidth of empty sample");
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    double sd = 0;
    if (x.size() > 1) {
        double m = 0;
        for (double v : x) m += v;
        m /= n;
        for (double v : x) sd += (v - m) * (v - m);
        sd = std::sqrt(sd / (n - 1));
    }
    const double iqr = quantile_sorted(x, 0.75) - quantile_sorted(x, 0.25);
    double lo = std::min(sd, iqr / 1.34);
    if (!(lo > 0)) {
        lo = sd;
        if (!(lo > 0)) lo = std::abs(x.front());
        if (!(lo > 0)) lo = 1.0;
    }
    return 0.9 * lo * std::pow(n, -0.2);
}

struct DensityCurve {
    std::vector<double> x;
    std::vector<double> y;
    double bandwidth = 0.0;
};

inline double kde_at(const std::vector<double>& values, double h, double t) {
    const double c = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    double s = 0;
    for (double v : values) {
        const double u = (t - v) / h;
        s += std::exp(-0.5 * u * u);
    }
    return c * s;
}

/// Gaussian KDE sampled at `points` evenly spaced values on [1/n_classes, 1]. bandwidth <= 0 selects the rule of thumb.
inline DensityCurve kde_confidence(const std::vector<double>& values, std::size_t n_classes, double bandwidth = 0.0,
                                   std::size_t points = 256) {
    if (values.empty()) fail(Errc::EmptyInput, "density of empty sample");
    if (n_classes < 2 || points < 2) fail(Errc::InvalidArgument, "need n_classes >= 2 and points >= 2");
    DensityCurve d;
    d.bandwidth = bandwidth > 0 ? bandwidth : silverman_bandwidth(values);
    const double lo = 1.0 / static_cast<double>(n_classes);
    for (std::size_t i = 0; i < points; ++i) {
        const double t = lo + (1.0 - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
        d.x.push_back(t);
        d.y.push_back(kde_at(values, d.bandwidth, t));
    }
    return d;
}

// ---------------------------------------------------------------- zero replacement + ILR

/// Multiplicative replacement: zeros become 0.5/total, non-zero parts shrink to keep the sum at 1.
inline std::vector<double> zero_replace(const std::vector<double>& counts) {
    double total = 0;
    for (double c : counts) {
        if (c < 0 || !std::isfinite(c)) fail(Errc::InvalidArgument, "counts must be finite and non-negative");
        total += c;
    }
    if (total <= 0) fail(Errc::AllZero, "cannot close an all-zero composition");
    const double delta = 0.5 / total;
    std::size_t zeros = 0;
    for (double c : counts) zeros += c == 0;
    const double keep = 1.0 - delta * static_cast<double>(zeros);
    if (keep <= 0) fail(Errc::AllZero, "zero replacement leaves no mass for observed parts");
    std::vector<double> p(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) p[i] = counts[i] == 0 ? delta : keep * counts[i] / total;
    return p;
}

inline constexpr const char* kIlrBasisId = "helmert-sbp-sorted";

struct IlrVector {
    std::vector<double> coords;
    std::string basis_id = kIlrBasisId;
};

/// Pivot (Helmert-type) balances in the given part order:
/// z_i = sqrt(i/(i+1)) * ln(gmean(x_1..x_i) / x_{i+1}),  i = 1..D-1.
inline IlrVector ilr_transform(const std::vector<double>& parts) {
    if (parts.size() < 2) fail(Errc::InvalidArgument, "ILR needs at least 2 parts");
    for (double v : parts)
        if (!(v > 0) || !std::isfinite(v)) fail(Errc::NonPositiveProportion, "ILR needs strictly positive parts");
    IlrVector out;
    double log_sum = 0;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        log_sum += std::log(parts[i - 1]);
        const double k = static_cast<double>(i);
        out.coords.push_back(std::sqrt(k / (k + 1)) * (log_sum / k - std::log(parts[i])));
    }
    return out;
}

/// Inverse through the centred log-ratio: clr = V z, then closure of exp(clr).
inline std::vector<double> ilr_inverse(const IlrVector& z) {
    const std::size_t d = z.coords.size() + 1;
    std::vector<double> clr(d, 0.0);
    for (std::size_t i = 1; i < d; ++i) {
        const double k = static_cast<double>(i);
        const double a = z.coords[i - 1] / std::sqrt(k * (k + 1));
        for (std::size_t j = 0; j < i; ++j) clr[j] += a;
        clr[i] -= k * a;
    }
    const double mx = *std::max_element(clr.begin(), clr.end());
    double s = 0;
    for (double& v : clr) s += v = std::exp(v - mx);
    for (double& v : clr) v /= s;
    return clr;
}

inline double aitchison_distance(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) fail(Errc::InvalidArgument, "compositions differ in size");
    const std::size_t d = x.size();
    double s = 0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double t = std::log(x[i] / x[j]) - std::log(y[i] / y[j]);
            s += t * t;
        }
    return std::sqrt(s / static_cast<double>(d));
}

/// ILR rows for compositions over a shared sorted class list, zero-replaced.
inline Eigen::MatrixXd ilr_matrix(const std::vector<Composition>& comps, const std::vector<std::string>& classes) {
    if (classes.size() < 2) fail(Errc::InvalidArgument, "ILR needs at least 2 classes");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(comps.size()), static_cast<Eigen::Index>(classes.size() - 1));
    for (std::size_t r = 0; r < comps.size(); ++r) {
        const auto z = ilr_transform(zero_replace(count_vector(comps[r], classes)));
        for (std::size_t c = 0; c < z.coords.size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = z.coords[c];
    }
    return m;
}

// ---------------------------------------------------------------- PCA

struct PcaResult {
    Eigen::MatrixXd scores;    // n x k
    Eigen::MatrixXd loadings;  // p x k, unit columns
    Eigen::VectorXd variances; // k eigenvalues of the covariance, descending
    Eigen::VectorXd explained; // k shares of total variance
    Eigen::RowVectorXd mean;
};

inline PcaResult pca(const Eigen::MatrixXd& x, Eigen::Index n_components = -1) {
    if (x.rows() < 2) fail(Errc::TooFewSamples, "PCA needs at least 2 samples");
    const Eigen::Index p = x.cols();
    if (n_components < 0 || n_components > p) n_components = p;
    PcaResult r;
    r.mean = x.colwise().mean();
    const Eigen::MatrixXd centred = x.rowwise() - r.mean;
    const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    // Eigen returns ascending eigenvalues.
    r.loadings.resize(p, n_components);
    r.variances.resize(n_components);
    const double total = std::max(0.0, es.eigenvalues().sum());
    for (Eigen::Index k = 0; k < n_components; ++k) {
        Eigen::VectorXd v = es.eigenvectors().col(p - 1 - k);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        r.loadings.col(k) = v;
        r.variances(k) = std::max(0.0, es.eigenvalues()(p - 1 - k));
    }
    r.explained = total > 0 ? Eigen::VectorXd(r.variances / total) : Eigen::VectorXd::Zero(n_components);
    r.scores = centred * r.loadings;
    return r;
}

// ---------------------------------------------------------------- Ward clustering

struct Merge {
    std::size_t a = 0;  // cluster ids: 0..n-1 leaves, n+k for the k-th merge
    std::size_t b = 0;
    double height = 0.0;
    std::size_t size = 0;
};

/// Lance-Williams Ward on squared Euclidean distances. Height is sqrt of the updated dissimilarity,
/// i.e. sqrt(2 * increase in within-cluster sum of squares). Ties go to the smallest (a, b) id pair.
inline std::vector<Merge> ward_cluster(const Eigen::MatrixXd& x) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n < 2) fail(Errc::TooFewSamples, "clustering needs at least 2 samples");
    const std::size_t total = 2 * n - 1;
    std::vector<double> d(total * total, 0.0);
    auto at = [&](std::size_t i, std::size_t j) -> double& { return d[i * total + j]; };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            at(i, j) = at(j, i) = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).squaredNorm();
    std::vector<std::size_t> active(n), size(total, 1);
    for (std::size_t i = 0; i < n; ++i) active[i] = i;
    std::vector<Merge> merges;
    for (std::size_t step = 0; step + 1 < n; ++step) {
        std::size_t bi = 0, bj = 1;
        double best = INFINITY;
        for (std::size_t u = 0; u < active.size(); ++u)
            for (std::size_t v = u + 1; v < active.size(); ++v) {
                const std::size_t i = std::min(active[u], active[v]), j = std::max(active[u], active[v]);
                const double val = at(i, j);
                if (val < best || (val == best && std::make_pair(i, j) < std::make_pair(bi, bj))) {
                    best = val;
                    bi = i;
                    bj = j;
                }
            }
        const std::size_t k = n + step;
        size[k] = size[bi] + size[bj];
        for (std::size_t m : active) {
            if (m == bi || m == bj) continue;
            const double ni = static_cast<double>(size[bi]), nj = static_cast<double>(size[bj]),
                         nm = static_cast<double>(size[m]);
            const double v = ((ni + nm) * at(m, bi) + (nj + nm) * at(m, bj) - nm * at(bi, bj)) / (ni + nj + nm);
            at(m, k) = at(k, m) = v;
        }
        active.erase(std::remove_if(active.begin(), active.end(), [&](std::size_t m) { return m == bi || m == bj; }),
                     active.end());
        active.push_back(k);
        merges.push_back({bi, bj, std::sqrt(std::max(0.0, best)), size[k]});
    }
    return merges;
}

/// Flat cluster labels (0-based, ordered by smallest member) after undoing the last k-1 merges.
inline std::vector<std::size_t> cut_tree(const std::vector<Merge>& merges, std::size_t n, std::size_t k) {
    if (k < 1 || k > n) fail(Errc::InvalidArgument, "cluster count out of range");
    std::vector<std::size_t> parent(2 * n - 1);
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
    for (std::size_t s = 0; s < n - k; ++s) parent[merges[s].a] = parent[merges[s].b] = n + s;
    auto root = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i];
        return i;
    };
    std::map<std::size_t, std::size_t> label_of;
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = root(i);
        auto it = label_of.emplace(r, label_of.size()).first;
        out[i] = it->second;
    }
    return out;
}

// ---------------------------------------------------------------- chi-square

struct ChiSquareResult {
    std::vector<std::string> row_names;
    std::vector<std::string> col_names;  // after dropping all-zero columns
    std::vector<std::vector<double>> observed, expected, residual, contribution;
    double statistic = 0.0;
    int df = 0;
    double p_value = 1.0;
};

inline double chi_square_upper_tail(double statistic, int df) {
    if (df <= 0) fail(Errc::InvalidArgument, "degrees of freedom must be positive");
    if (statistic <= 0) return 1.0;
    return boost::math::gamma_q(df / 2.0, statistic / 2.0);
}

inline ChiSquareResult chi_square_independence(const std::vector<std::vector<double>>& table,
                                               std::vector<std::string> row_names = {},
                                               std::vector<std::string> col_names = {}) {
    const std::size_t r0 = table.size();
    const std::size_t c0 = r0 ? table[0].size() : 0;
    for (const auto& row : table)
        if (row.size() != c0) fail(Errc::InvalidArgument, "ragged contingency table");
    if (row_names.empty())
        for (std::size_t i = 0; i < r0; ++i) row_names.push_back(std::to_string(i));
    if (col_names.empty())
        for (std::size_t j = 0; j < c0; ++j) col_names.push_back(std::to_string(j));
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < c0; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < r0; ++i) {
            if (table[i][j] < 0 || !std::isfinite(table[i][j])) fail(Errc::InvalidArgument, "counts must be non-negative");
            s += table[i][j];
        }
        if (s > 0) keep.push_back(j);
    }
    if (r0 < 2 || keep.size() < 2) fail(Errc::DegenerateTable, "need at least 2 rows and 2 non-empty columns");

    ChiSquareResult res;
    res.row_names = row_names;
    for (auto j : keep) res.col_names.push_back(col_names[j]);
    const std::size_t r = r0, c = keep.size();
    std::vector<double> rs(r, 0), cs(c, 0);
    double total = 0;
    res.observed.assign(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double o = table[i][keep[j]];
            res.observed[i][j] = o;
            rs[i] += o;
            cs[j] += o;
            total += o;
        }
    for (std::size_t i = 0; i < r; ++i)
        if (rs[i] == 0) fail(Errc::ZeroExpected, "row '" + row_names[i] + "' is all zero");
    res.expected.assign(r, std::vector<double>(c));
    res.residual.assign(r, std::vector<double>(c));
    res.contribution.assign(r, std::vector<double>(c, 0.0));
    CompensatedSum stat;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double e = rs[i] * cs[j] / total;
            res.expected[i][j] = e;
            const double rr = (res.observed[i][j] - e) / std::sqrt(e);
            res.residual[i][j] = rr;
            stat.add(rr * rr);
        }
    res.statistic = stat.value();
    res.df = static_cast<int>((r - 1) * (c - 1));
    res.p_value = chi_square_upper_tail(res.statistic, res.df);
    if (res.statistic > 0)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double rr = res.residual[i][j];
                res.contribution[i][j] = (rr < 0 ? -100.0 : 100.0) * rr * rr / res.statistic;
            }
    return res;
}

struct ChiSquareReportOptions {
    double alpha = 0.05;
    double residual_cutoff = 1.96;
};

/// Report rows `slide,sector,class,observed,expected,residual,contribution,significant`. A cell is flagged
/// when the slide-level test is significant and |residual| exceeds the cutoff.
inline void append_chi_square_report(csv::Table& out, const std::string& slide, const ChiSquareResult& res,
                                     const ChiSquareReportOptions& opt = {}) {
    if (out.header.empty())
        out.header = {"slide", "sector", "class", "observed", "expected", "residual", "contribution", "significant"};
    const bool slide_sig = res.p_value < opt.alpha;
    for (std::size_t i = 0; i < res.row_names.size(); ++i)
        for (std::size_t j = 0; j < res.col_names.size(); ++j) {
            const bool sig = slide_sig && std::abs(res.residual[i][j]) > opt.residual_cutoff;
            out.rows.push_back({slide, res.row_names[i], res.col_names[j], format_sig(res.observed[i][j], 10),
                                format_sig(res.expected[i][j], 10), format_sig(res.residual[i][j], 10),
                                format_sig(res.contribution[i][j], 10), sig ? "1" : "0"});
        }
}

}  // namespace phyto::assemblage
