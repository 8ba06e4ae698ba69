// Acceptance gate: one PASS/FAIL line per headline criterion. Thresholds are fixed here.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "corpus_counts.hpp"
#include "mixture_fixtures.hpp"
#include "phyto/assemblage.hpp"
#include "phyto/catalog.hpp"
#include "phyto/focus_engine.hpp"
#include "phyto/inference_gate.hpp"
#include "phyto/mixture.hpp"
#include "phyto/pipeline.hpp"
#include "phyto/segmenter.hpp"
#include "segment_oracle.hpp"
#include "support.hpp"
#include "ward_oracle.hpp"
#include "workspace_fixture.hpp"

using namespace phyto;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kDepthAgreement = 0.99;
constexpr int kDepthBand = 6;
constexpr double kDepthSeconds = 10.0;
constexpr int kNestingStacks = 100;
constexpr double kNoisyRegistrationShare = 0.95;
constexpr double kGainTolerance = 1e-6;
constexpr int kSegmentationClouds = 200;
constexpr std::size_t kSegmentationMaxPoints = 50'000;
constexpr double kThroughputSeconds = 20.0;
constexpr double kThroughputRatio = 2.5;
constexpr long kSplitTrain = 3531, kSplitTest = 883, kSplitSlack = 24;
constexpr double kIlrRoundTrip = 1e-10;
constexpr double kIlrIsometry = 1e-9;
constexpr double kIlrTwoPart = 0.98026, kIlrTwoPartTol = 1e-5;
constexpr double kChiStatistic = 20.0 / 3.0, kChiStatisticTol = 1e-9;
constexpr double kChiP = 0.009823, kChiPTol = 1e-6;
constexpr double kContributionTol = 1e-9;
constexpr int kWardInstances = 200;
constexpr double kGradientTol = 1e-5;
constexpr int kReplicates = 50;
constexpr double kRecoveryTol = 0.05;
constexpr int kCoverageMin = 40;
constexpr double kSamplerSeconds = 60.0;
constexpr int kRankingMin = 48;

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds(std::chrono::steady_clock::time_point t0) { return fixture::seconds_since(t0); }

// ---------------------------------------------------------------- focus stacking

Outcome focus_depth() {
    const int w = 512, h = 512, n = 16, region = 64;
    const auto gen = fixture::make_region_stack(w, h, n, region, 2024);
    const auto t0 = std::chrono::steady_clock::now();
    const auto ortho = focus::compose_orthoimage(gen.stack, focus::ExtractionConfig{});
    const double secs = seconds(t0);
    long checked = 0, right = 0;
    for (int y = kDepthBand; y < h - kDepthBand; ++y)
        for (int x = kDepthBand; x < w - kDepthBand; ++x) {
            const int bx = x % region, by = y % region;
            if (bx < kDepthBand || bx >= region - kDepthBand || by < kDepthBand || by >= region - kDepthBand) continue;
            ++checked;
            right += ortho.depth.at(x, y) == gen.truth.at(x, y);
        }
    const double share = static_cast<double>(right) / static_cast<double>(checked);
    return {share >= kDepthAgreement && secs < kDepthSeconds,
            fmt("agreement %.4f (need >= %.2f) over %ld px, %.2f s (need < %.0f s)", share, kDepthAgreement, checked, secs,
                kDepthSeconds)};
}

Outcome threshold_nesting() {
    using Voxels = std::set<std::tuple<int, int, int>>;
    auto voxels = [](const PointCloud& c) {
        Voxels s;
        for (const auto& p : c.points) s.emplace(p.x, p.y, p.z);
        return s;
    };
    int violations = 0;
    for (int i = 0; i < kNestingStacks; ++i) {
        const auto gen = fixture::make_region_stack(48, 48, 5, 12, 5000 + static_cast<std::uint64_t>(i));
        focus::ExtractionConfig cfg;
        const auto filtered = focus::filter_stack(gen.stack, cfg);
        std::vector<Voxels> kept;
        for (double k : {3.0, 3.75, 4.0}) {
            cfg.k = k;
            kept.push_back(voxels(focus::extract_points(filtered, cfg).cloud));
        }
        for (std::size_t j = 1; j < kept.size(); ++j)
            if (!std::includes(kept[j - 1].begin(), kept[j - 1].end(), kept[j].begin(), kept[j].end())) ++violations;
    }
    return {violations == 0, fmt("%d violations over %d stacks", violations, kNestingStacks)};
}

GrayImage cyclic_shift(const GrayImage& a, int dx, int dy) {
    GrayImage b(a.width(), a.height());
    const int w = a.width(), h = a.height();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) b.at(x, y) = a.at(((x - dx) % w + w) % w, ((y - dy) % h + h) % h);
    return b;
}

Outcome registration() {
    const auto a = fixture::random_texture(96, 96, 77);
    int exact = 0, noisy_exact = 0, total = 0;
    std::mt19937_64 rng(78);
    std::normal_distribution<double> noise(0.0, 2.0);
    for (int dy = -10; dy <= 10; ++dy)
        for (int dx = -10; dx <= 10; ++dx) {
            ++total;
            exact += focus::estimate_offset(a, cyclic_shift(a, dx, dy)) == focus::Offset{dx, dy};
            GrayImage b(96, 96);
            for (int y = 0; y < 96; ++y)
                for (int x = 0; x < 96; ++x) {
                    const int sx = x - dx, sy = y - dy;
                    const bool inside = sx >= 0 && sy >= 0 && sx < 96 && sy < 96;
                    b.at(x, y) = (inside ? a.at(sx, sy) : 128.0) + noise(rng);
                }
            noisy_exact += focus::estimate_offset(a, b) == focus::Offset{dx, dy};
        }
    const double noisy_share = static_cast<double>(noisy_exact) / total;
    return {exact == total && noisy_share >= kNoisyRegistrationShare,
            fmt("cyclic %d/%d exact, border fill + noise %d/%d exact (need %.0f%%)", exact, total, noisy_exact, total,
                100 * kNoisyRegistrationShare)};
}

Outcome gain_recovery() {
    std::mt19937_64 rng(91);
    std::uniform_real_distribution<double> beta(0.7, 1.3), alpha(-20.0, 20.0), value(0.0, 255.0);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Image<double, 3> a(40, 30), b(40, 30);
        std::array<double, 3> al{}, be{};
        for (int c = 0; c < 3; ++c) al[c] = alpha(rng), be[c] = beta(rng);
        for (int y = 0; y < 30; ++y)
            for (int x = 0; x < 40; ++x)
                for (int c = 0; c < 3; ++c) {
                    a.at(x, y, c) = value(rng);
                    b.at(x, y, c) = al[c] + be[c] * a.at(x, y, c);
                }
        const auto g = focus::estimate_gain(a, b);
        for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(g.channel[c].beta - be[c]));
    }
    return {worst < kGainTolerance, fmt("max |beta error| %.3g over 100 trials (need < %.0e)", worst, kGainTolerance)};
}

// ---------------------------------------------------------------- segmentation

Outcome segmentation_oracle() {
    int equal = 0;
    for (int trial = 0; trial < kSegmentationClouds; ++trial) {
        auto rng = make_rng(4100, static_cast<std::uint64_t>(trial));
        const auto cloud = fixture::random_cloud(rng, kSegmentationMaxPoints);
        segment::SegmentationConfig cfg;
        cfg.octree_level = 3 + trial % 6;
        cfg.min_component_size = 1 + static_cast<std::size_t>(trial % 40);
        const auto got = fixture::canonical_components(segment::octree_connected_components(cloud, cfg));
        equal += got == fixture::flood_fill_components(cloud, cfg.octree_level, cfg.min_component_size);
    }
    // Boundary at the default minimum size: one dense blob of 749 vs 750 points.
    auto blob = [](int n) {
        PointCloud c;
        std::mt19937_64 rng(7);
        std::uniform_int_distribution<int> d(-10, 10);
        for (int i = 0; i < n; ++i) c.points.push_back({50 + d(rng), 50 + d(rng), 5, 0, 0, 0});
        return c;
    };
    segment::SegmentationConfig cfg;
    cfg.octree_level = 4;
    const bool boundary = cfg.min_component_size == 750 && segment::octree_connected_components(blob(749), cfg).empty() &&
                          segment::octree_connected_components(blob(750), cfg).size() == 1;
    return {equal == kSegmentationClouds && boundary,
            fmt("%d/%d clouds equal to flood fill, 749/750 boundary %s", equal, kSegmentationClouds, boundary ? "ok" : "wrong")};
}

PointCloud sector_cloud(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> cx(0, 8000), cz(0, 150);
    std::normal_distribution<double> off(0.0, 12.0);
    PointCloud c;
    c.microns_per_pixel = 0.5;
    c.z_step = 2.0;
    c.points.reserve(n);
    while (c.points.size() < n) {
        const int x = cx(rng), y = cx(rng), z = cz(rng);
        for (int i = 0; i < 2000 && c.points.size() < n; ++i)
            c.points.push_back({x + static_cast<int>(off(rng)), y + static_cast<int>(off(rng)), z + static_cast<int>(off(rng) / 6),
                                200, 200, 200});
    }
    return c;
}

Outcome segmentation_throughput() {
    const auto small = sector_cloud(1'000'000, 1), large = sector_cloud(2'000'000, 2);
    const segment::SegmentationConfig cfg;
    // Median of seven runs per size, interleaved so both sizes see the same machine state.
    std::vector<double> small_t, large_t;
    for (int i = 0; i < 7; ++i)
        for (auto [c, out] : {std::pair{&small, &small_t}, std::pair{&large, &large_t}}) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto segs = segment::segment_sector(*c, "UABPL-000001a", cfg);
            (void)segs;
            out->push_back(seconds(t0));
        }
    auto median = [](std::vector<double> v) {
        std::nth_element(v.begin(), v.begin() + 3, v.end());
        return v[3];
    };
    const double t1 = median(small_t), t2 = median(large_t);
    const double ratio = t2 / t1;
    return {t2 < kThroughputSeconds && ratio < kThroughputRatio,
            fmt("2M points %.2f s (need < %.0f s), 2M/1M time ratio %.2f (need < %.1f)", t2, kThroughputSeconds, ratio,
                kThroughputRatio)};
}

// ---------------------------------------------------------------- catalog and gate

Outcome dataset_split() {
    std::vector<catalog::DatasetItem> items;
    for (const auto& [cls, n] : fixture::morphotype_counts())
        for (int i = 0; i < n; ++i) items.push_back({std::string(cls) + "-" + std::to_string(i), std::string(cls)});
    const auto m = catalog::split_items(items, catalog::LabelType::Classified, 0.8, 1, "20260220");
    const long train = static_cast<long>(m.train.size()), test = static_cast<long>(m.test.size());
    const bool ok = std::abs(train - kSplitTrain) <= kSplitSlack && std::abs(test - kSplitTest) <= kSplitSlack;
    return {ok, fmt("%ld train / %ld test from %zu items (need %ld / %ld +- %ld)", train, test, items.size(), kSplitTrain,
                    kSplitTest, kSplitSlack)};
}

Outcome confidence_floor() {
    auto rng = make_rng(31);
    std::gamma_distribution<double> g(0.2, 1.0);
    std::uniform_real_distribution<double> jitter(-1e-9, 1e-9);
    long violations = 0, rows = 0;
    for (int t = 0; t < 500; ++t) {
        const int n = 2 + static_cast<int>(uniform_below(rng, 60));
        std::vector<std::string> names;
        for (int i = 0; i < n; ++i) names.push_back("c" + std::to_string(i));
        inference::ProbabilityTable table(names);
        for (int r = 0; r < 20; ++r) {
            std::vector<double> v(static_cast<std::size_t>(n));
            double s = 0;
            const bool flat = r % 5 == 0;  // near-uniform rows sit right on the floor
            for (auto& x : v) s += x = flat ? 1.0 + jitter(rng) : g(rng) + 1e-12;
            for (auto& x : v) x /= s;
            table.add_row("s" + std::to_string(r), v);
        }
        for (const auto& p : inference::predict_all(table)) {
            ++rows;
            violations += p.confidence < 1.0 / n;
        }
    }
    bool rejected = false;
    try {
        const std::vector<double> under{0.3, 0.3, 0.3};
        (void)inference::argmax_class(under, {"a", "b", "c"});
    } catch (const Error& e) {
        rejected = e.code() == Errc::RowSumInvalid;
    }
    return {violations == 0 && rejected,
            fmt("%ld violations over %ld predictions; sub-floor vector %s", violations, rows, rejected ? "rejected" : "accepted")};
}

// ---------------------------------------------------------------- assemblage

Outcome ilr() {
    auto rng = make_rng(41);
    std::gamma_distribution<double> g(1.0, 1.0);
    auto simplex = [&](std::size_t d) {
        std::vector<double> v(d);
        double s = 0;
        for (auto& x : v) s += x = g(rng) + 1e-6;
        for (auto& x : v) x /= s;
        return v;
    };
    double round_trip = 0, isometry = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t d = 2 + uniform_below(rng, 20);
        const auto x = simplex(d), y = simplex(d);
        const auto cx = assemblage::ilr_transform(x), cy = assemblage::ilr_transform(y);
        const auto back = assemblage::ilr_inverse(cx);
        for (std::size_t k = 0; k < d; ++k) round_trip = std::max(round_trip, std::abs(back[k] - x[k]));
        double e = 0;
        for (std::size_t k = 0; k < cx.coords.size(); ++k) e += (cx.coords[k] - cy.coords[k]) * (cx.coords[k] - cy.coords[k]);
        isometry = std::max(isometry, std::abs(std::sqrt(e) - assemblage::aitchison_distance(x, y)));
    }
    const double two = assemblage::ilr_transform({0.8, 0.2}).coords[0];
    return {round_trip < kIlrRoundTrip && isometry < kIlrIsometry && std::abs(two - kIlrTwoPart) <= kIlrTwoPartTol,
            fmt("round trip %.2g, isometry %.2g over 1000 pairs, (0.8, 0.2) -> %.6f", round_trip, isometry, two)};
}

// Upper regularised incomplete gamma Q(a, x): series below a + 1, Lentz continued fraction above.
double gamma_q(double a, double x) {
    if (x <= 0) return 1.0;
    const double lead = a * std::log(x) - x - std::lgamma(a);
    if (x < a + 1) {
        double term = 1.0 / a, sum = term;
        for (int n = 1; n < 1000; ++n) {
            term *= x / (a + n);
            sum += term;
            if (std::abs(term) < std::abs(sum) * 1e-17) break;
        }
        return 1.0 - sum * std::exp(lead);
    }
    const double tiny = 1e-300;
    double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
    for (int i = 1; i < 1000; ++i) {
        const double an = -i * (i - a);
        b += 2;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1) < 1e-17) break;
    }
    return std::exp(lead) * h;
}

Outcome chi_square() {
    const auto r = assemblage::chi_square_independence({{10, 20}, {20, 10}});
    const double oracle_p = gamma_q(r.df / 2.0, r.statistic / 2.0);
    double total = 0;
    for (const auto& row : r.contribution)
        for (double c : row) total += std::abs(c);  // signed by residual direction
    const bool ok = std::abs(r.statistic - kChiStatistic) <= kChiStatisticTol && std::abs(r.p_value - oracle_p) <= kChiPTol &&
                    std::abs(r.p_value - kChiP) <= kChiPTol && std::abs(total - 100.0) <= kContributionTol;
    return {ok, fmt("statistic %.10f, p %.7f (incomplete-gamma oracle %.7f), |contributions| sum %.12f", r.statistic, r.p_value,
                    oracle_p, total)};
}

Outcome ward() {
    auto rng = make_rng(51);
    std::normal_distribution<double> n(0, 1);
    int equal = 0;
    for (int trial = 0; trial < kWardInstances; ++trial) {
        const auto rows = static_cast<Eigen::Index>(2 + uniform_below(rng, 9));
        const auto cols = static_cast<Eigen::Index>(1 + uniform_below(rng, 4));
        Eigen::MatrixXd x(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) x(i, j) = n(rng);
        const auto got = assemblage::ward_cluster(x);
        const auto want = fixture::ward_oracle(x);
        bool same = got.size() == want.size();
        for (std::size_t s = 0; same && s < got.size(); ++s)
            same = std::minmax(got[s].a, got[s].b) == std::minmax(want[s].a, want[s].b) &&
                   std::abs(got[s].height - want[s].height) <= 1e-9 * std::max(1.0, want[s].height);
        equal += same;
    }
    return {equal == kWardInstances, fmt("%d/%d merge sequences equal the exhaustive oracle", equal, kWardInstances)};
}

// ---------------------------------------------------------------- mixture

Outcome mixture_gradient() {
    auto rng = make_rng(61);
    std::normal_distribution<double> n(0, 1.5);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const auto ref = fixture::random_reference(rng, 4, 10);
        mixture::ObservedCounts y{std::vector<long long>(10)};
        for (auto& v : y.y) v = static_cast<long long>(uniform_below(rng, 80));
        y.y[0] += 1;
        const mixture::MixturePrior prior{{0.5 + static_cast<double>(uniform_below(rng, 4)) * 0.5}};
        Eigen::VectorXd u(3);
        for (auto& v : u) v = n(rng);
        const auto lp = mixture::log_posterior(u, ref, y, prior);
        for (Eigen::Index k = 0; k < 3; ++k) {
            const double h = 1e-5;
            Eigen::VectorXd up = u, dn = u;
            up(k) += h;
            dn(k) -= h;
            const double fd = (mixture::log_posterior(up, ref, y, prior).value - mixture::log_posterior(dn, ref, y, prior).value) / (2 * h);
            worst = std::max(worst, std::abs(lp.gradient(k) - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    return {worst < kGradientTol, fmt("max relative error %.3g over 100 points (need < %.0e)", worst, kGradientTol)};
}

Outcome mixture_recovery() {
    const auto ref = fixture::block_reference(3, 4);
    const Eigen::Vector3d truth(0.6, 0.3, 0.1);
    int means_ok = 0;
    std::array<int, 3> covered{};
    double slowest = 0, worst_error = 0;
    for (int rep = 0; rep < kReplicates; ++rep) {
        auto rng = make_rng(7100, static_cast<std::uint64_t>(rep));
        const auto y = fixture::draw_counts(rng, ref, truth, 5000);
        mixture::SamplerConfig cfg;  // default: 4 chains, 2000 iterations, 1000 warmup
        cfg.seed = 7200 + static_cast<std::uint64_t>(rep);
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = mixture::sample_posterior(ref, y, {}, cfg);
        slowest = std::max(slowest, seconds(t0));
        bool ok = true;
        for (int i = 0; i < 3; ++i) {
            const double err = std::abs(r.weight_draws.col(i).mean() - truth(i));
            worst_error = std::max(worst_error, err);
            ok = ok && err <= kRecoveryTol;
            const auto [lo, hi] = mixture::credible_interval(r, i, 0.9);
            covered[static_cast<std::size_t>(i)] += lo <= truth(i) && truth(i) <= hi;
        }
        means_ok += ok;
    }
    const int min_cover = *std::min_element(covered.begin(), covered.end());
    return {means_ok == kReplicates && min_cover >= kCoverageMin && slowest < kSamplerSeconds,
            fmt("means within %.2f in %d/%d (worst %.4f); 90%% CI coverage per weight %d/%d/%d of %d (need >= %d); slowest run %.2f s",
                kRecoveryTol, means_ok, kReplicates, worst_error, covered[0], covered[1], covered[2], kReplicates, kCoverageMin,
                slowest)};
}

Outcome mixture_ranking() {
    int correct = 0;
    for (int rep = 0; rep < kReplicates; ++rep) {
        auto rng = make_rng(8100, static_cast<std::uint64_t>(rep));
        const auto ref = fixture::random_reference(rng, 10, 24);
        const auto a = uniform_below(rng, 10);
        auto b = uniform_below(rng, 9);
        if (b >= a) ++b;
        Eigen::VectorXd w = Eigen::VectorXd::Zero(10);
        w(static_cast<Eigen::Index>(a)) = w(static_cast<Eigen::Index>(b)) = 0.5;
        mixture::SamplerConfig cfg;
        cfg.seed = 8200 + static_cast<std::uint64_t>(rep);
        const auto r = mixture::sample_posterior(ref, fixture::draw_counts(rng, ref, w, 1000), {}, cfg);
        const auto order = mixture::rank_processes(r);
        correct += std::set<std::size_t>(order.begin(), order.begin() + 2) == std::set<std::size_t>{a, b};
    }
    return {correct >= kRankingMin, fmt("true pair ranked top two in %d/%d (need >= %d)", correct, kReplicates, kRankingMin)};
}

// ---------------------------------------------------------------- end to end

Outcome end_to_end() {
    const auto root = fixture::fresh_dir("acceptance_e2e");
    const pipeline::Workspace ws{root / "ws"};
    auto manifests = fixture::build_workspace(ws, root / "raw");
    auto run = [&](const std::string& stage, const pipeline::Params& o) {
        manifests.push_back(pipeline::run_stage(ws, stage, pipeline::resolve_params(stage, nullptr, o)));
    };
    run("stats", {});
    run("mixture", {{"reference", "tables/reference.csv"}, {"counts", "tables/counts.csv"}});
    {
        catalog::LabelStore store(ws.journal(), catalog::Codebook::load(ws.codebook()));
        catalog::LabelRecord r;
        r.reviewer = "QA";
        r.timestamp = 1771581600000;
        r.quality = catalog::Quality::Singlet;
        const std::vector<std::pair<std::string, std::string>> labels{{"UABPL-000001a-00001", "CER"}, {"UABPL-000001a-00002", "CER"},
                                                                      {"UABPL-000001a-00003", "PER"}, {"UABPL-000002a-00001", "PER"}};
        for (const auto& [seg, code] : labels) {
            r.segment_id = seg;
            r.morph_code = code;
            (void)store.upsert(r);
        }
    }
    run("dataset", {{"date", "20260220"}});
    int reproduced = 0;
    std::string first_bad;
    for (const auto& m : manifests) {
        const auto recorded = pipeline::load_manifest(ws.manifests() / (m.stage + "-" + m.run_id + ".json"));
        const auto r = pipeline::rerun(ws, recorded);
        if (r.reproduced() && r.manifest.run_id == m.run_id)
            ++reproduced;
        else if (first_bad.empty())
            first_bad = m.stage;
    }
    std::size_t outputs = 0;
    for (const auto& m : manifests) outputs += m.outputs.size();
    return {reproduced == static_cast<int>(manifests.size()),
            fmt("%d/%zu stage runs reproduced byte-identically (%zu output files)%s%s", reproduced, manifests.size(), outputs,
                first_bad.empty() ? "" : ", first mismatch: ", first_bad.c_str())};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"focus-stack depth", focus_depth},
        {"threshold nesting", threshold_nesting},
        {"registration", registration},
        {"gain recovery", gain_recovery},
        {"segmentation oracle", segmentation_oracle},
        {"segmentation throughput", segmentation_throughput},
        {"dataset split", dataset_split},
        {"confidence floor", confidence_floor},
        {"ilr", ilr},
        {"chi-square", chi_square},
        {"ward", ward},
        {"mixture gradient", mixture_gradient},
        {"mixture recovery", mixture_recovery},
        {"mixture ranking", mixture_ranking},
        {"end-to-end determinism", end_to_end},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
