#include <gtest/gtest.h>

#include <chrono>
#include <regex>

#include "mixture_fixtures.hpp"
#include "phyto/mixture.hpp"
#include "support.hpp"

using namespace phyto;
using namespace phyto::mixture;

namespace {

void expect_errc(Errc code, auto&& fn) {
    try {
        fn();
        FAIL() << "expected " << errc_name(code);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

double multinomial_loglik(const std::vector<long long>& y, const Eigen::VectorXd& q) {
    double n = 0, v = 0;
    for (std::size_t c = 0; c < y.size(); ++c) {
        n += static_cast<double>(y[c]);
        v -= std::lgamma(static_cast<double>(y[c]) + 1);
        if (y[c]) v += static_cast<double>(y[c]) * std::log(q(static_cast<Eigen::Index>(c)));
    }
    return v + std::lgamma(n + 1);
}

// log |det d(w_1..w_{P-1})/du| from a central-difference Jacobian.
double numeric_log_jacobian(const Eigen::VectorXd& u) {
    const auto k = u.size();
    Eigen::MatrixXd j(k, k);
    const double h = 1e-6;
    for (Eigen::Index a = 0; a < k; ++a) {
        Eigen::VectorXd up = u, dn = u;
        up(a) += h;
        dn(a) -= h;
        const Eigen::VectorXd d = (stick_breaking(up) - stick_breaking(dn)) / (2 * h);
        j.col(a) = d.head(k);
    }
    return std::log(std::abs(j.determinant()));
}

SamplerConfig quick(std::uint64_t seed, int chains = 4) {
    SamplerConfig c;
    c.chains = chains;
    c.iterations = 1000;
    c.warmup = 500;
    c.seed = seed;
    return c;
}

}  // namespace

// ---------------------------------------------------------------- inputs

TEST(ReferenceMatrix, RenormalisesAndValidates) {
    const auto ref = parse_reference("process,a,b,c\np1,2,2,4\np2,0,1,0\n");
    EXPECT_EQ(ref.process_names, (std::vector<std::string>{"p1", "p2"}));
    EXPECT_DOUBLE_EQ(ref.pi(0, 2), 0.5);
    EXPECT_DOUBLE_EQ(ref.pi(1, 1), 1.0);
    for (Eigen::Index i = 0; i < 2; ++i) EXPECT_NEAR(ref.pi.row(i).sum(), 1.0, 1e-12);
    expect_errc(Errc::NegativeProbability, [] { parse_reference("process,a,b\np,-1,2\n"); });
    expect_errc(Errc::AllZero, [] { parse_reference("process,a,b\np,0,0\n"); });
    expect_errc(Errc::ParseError, [] { parse_reference("proc,a,b\np,1,2\n"); });
    expect_errc(Errc::ParseError, [] { parse_reference("process,a\np,1\n"); });
    expect_errc(Errc::InvalidArgument, [] { make_reference(Eigen::MatrixXd::Ones(1, 1), {"p"}, {"a"}); });
    EXPECT_EQ(parse_reference(format_reference(ref)).pi, ref.pi);
}

TEST(ObservedCounts, AlignedToReferenceClasses) {
    const auto ref = parse_reference("process,a,b,c\np1,1,1,1\n");
    const auto obs = parse_counts("class,count\nc,5\na,2\n", ref);
    EXPECT_EQ(obs.y, (std::vector<long long>{2, 0, 5}));
    EXPECT_EQ(obs.total(), 7);
    expect_errc(Errc::DimensionMismatch, [&] { parse_counts("class,count\nz,1\n", ref); });
    expect_errc(Errc::EmptyInput, [&] { parse_counts("class,count\na,0\n", ref); });
    expect_errc(Errc::InvalidArgument, [&] { parse_counts("class,count\na,-2\nb,4\n", ref); });
}

TEST(MixturePrior, Resolve) {
    EXPECT_EQ(MixturePrior{{2.0}}.resolve(3), Eigen::VectorXd::Constant(3, 2.0));
    expect_errc(Errc::DimensionMismatch, [] { (void)MixturePrior{{1, 2}}.resolve(3); });
    expect_errc(Errc::InvalidArgument, [] { (void)MixturePrior{{0.0}}.resolve(3); });
}

// ---------------------------------------------------------------- model

TEST(StickBreaking, ZeroIsUniformAndRoundTrips) {
    for (int p = 1; p < 8; ++p) {
        const auto w = stick_breaking(Eigen::VectorXd::Zero(p - 1));
        for (int i = 0; i < p; ++i) EXPECT_NEAR(w(i), 1.0 / p, 1e-15);
    }
    auto rng = make_rng(1);
    std::normal_distribution<double> n(0, 2);
    for (int t = 0; t < 200; ++t) {
        Eigen::VectorXd u(5);
        for (auto& v : u) v = n(rng);
        const auto w = stick_breaking(u);
        EXPECT_NEAR(w.sum(), 1.0, 1e-12);
        EXPECT_GE(w.minCoeff(), 0.0);
        EXPECT_LT((stick_breaking_inverse(w) - u).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(LogPosterior, SingleProcessIsLikelihood) {
    const auto ref = parse_reference("process,a,b,c\np,0.2,0.3,0.5\n");
    const ObservedCounts y{{3, 0, 9}};
    const auto lp = log_posterior(Eigen::VectorXd(0), ref, y);
    EXPECT_EQ(lp.gradient.size(), 0);
    EXPECT_NEAR(lp.value, multinomial_loglik(y.y, ref.pi.row(0).transpose()), 1e-12);
}

TEST(LogPosterior, PriorAndJacobianTerms) {
    auto rng = make_rng(2);
    const auto ref = fixture::random_reference(rng, 4, 6);
    const ObservedCounts y{{4, 7, 0, 2, 9, 1}};
    std::normal_distribution<double> n(0, 1);
    for (int t = 0; t < 50; ++t) {
        Eigen::VectorXd u(3);
        for (auto& v : u) v = n(rng);
        const auto w = stick_breaking(u);
        const double ll = multinomial_loglik(y.y, ref.pi.transpose() * w);
        // alpha = 1: only the Jacobian remains beside the likelihood.
        EXPECT_NEAR(log_posterior(u, ref, y).value - ll, numeric_log_jacobian(u), 1e-6);
        const MixturePrior prior{{0.5, 2.0, 1.5, 3.0}};
        double kernel = 0;
        for (int i = 0; i < 4; ++i) kernel += (prior.alpha[i] - 1) * std::log(w(i));
        EXPECT_NEAR(log_posterior(u, ref, y, prior).value - ll - kernel, numeric_log_jacobian(u), 1e-6);
    }
}

TEST(LogPosterior, GradientMatchesFiniteDifferences) {
    auto rng = make_rng(3);
    std::normal_distribution<double> n(0, 1.5);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const auto ref = fixture::random_reference(rng, 4, 10);
        ObservedCounts y{std::vector<long long>(10)};
        for (auto& v : y.y) v = static_cast<long long>(uniform_below(rng, 60));
        y.y[0] += 1;
        const MixturePrior prior{{0.5 + uniform_below(rng, 4) * 0.5}};
        Eigen::VectorXd u(3);
        for (auto& v : u) v = n(rng);
        const auto lp = log_posterior(u, ref, y, prior);
        for (Eigen::Index k = 0; k < 3; ++k) {
            const double h = 1e-5;
            Eigen::VectorXd up = u, dn = u;
            up(k) += h;
            dn(k) -= h;
            const double fd = (log_posterior(up, ref, y, prior).value - log_posterior(dn, ref, y, prior).value) / (2 * h);
            worst = std::max(worst, std::abs(lp.gradient(k) - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(LogPosterior, ZeroMassClassIsMinusInfinity) {
    const auto ref = parse_reference("process,a,b,c\np1,1,0,0\np2,0,1,0\n");
    EXPECT_EQ(log_posterior(Eigen::VectorXd::Zero(1), ref, ObservedCounts{{1, 1, 1}}).value,
              -std::numeric_limits<double>::infinity());
    expect_errc(Errc::NonFiniteValue, [&] { sample_posterior(ref, ObservedCounts{{1, 1, 1}}, {}, quick(1)); });
}

// ---------------------------------------------------------------- sampler

TEST(SamplePosterior, SingleProcessIsPointMass) {
    const auto ref = parse_reference("process,a,b\np,1,3\n");
    const auto r = sample_posterior(ref, ObservedCounts{{2, 5}});
    EXPECT_EQ(r.weight_draws.rows(), 4000);
    EXPECT_TRUE((r.weight_draws.array() == 1.0).all());
    EXPECT_DOUBLE_EQ(r.implied_q_draws(17, 1), 0.75);
}

TEST(SamplePosterior, IdenticalProcessesSplitEvenly) {
    const auto ref = parse_reference("process,a,b,c\np1,1,2,3\np2,1,2,3\n");
    const auto r = sample_posterior(ref, ObservedCounts{{10, 20, 30}}, {}, quick(4));
    EXPECT_NEAR(r.weight_draws.col(0).mean(), 0.5, 0.02);
    EXPECT_NEAR(r.weight_draws.col(1).mean(), 0.5, 0.02);
}

TEST(SamplePosterior, RecoversSeparatedMixture) {
    auto rng = make_rng(5);
    const auto ref = fixture::block_reference(3, 4);
    const Eigen::Vector3d truth(0.6, 0.3, 0.1);
    const auto y = fixture::draw_counts(rng, ref, truth, 5000);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = sample_posterior(ref, y, {}, SamplerConfig{});
    EXPECT_LT(fixture::seconds_since(t0), 60.0);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.weight_draws.col(i).mean(), truth(i), 0.05);
    EXPECT_FALSE(r.failed);
    EXPECT_FALSE(r.not_converged);
    for (double e : r.diagnostics.ess) EXPECT_GT(e, 400);

    // Every draw on the simplex; every q is Pi^T w.
    for (Eigen::Index d = 0; d < r.weight_draws.rows(); ++d) {
        ASSERT_NEAR(r.weight_draws.row(d).sum(), 1.0, 1e-12);
        ASSERT_GE(r.weight_draws.row(d).minCoeff(), 0.0);
        const Eigen::VectorXd q = ref.pi.transpose() * r.weight_draws.row(d).transpose();
        ASSERT_LT((q - r.implied_q_draws.row(d).transpose()).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(SamplePosterior, DeterministicGivenSeed) {
    auto rng = make_rng(6);
    const auto ref = fixture::random_reference(rng, 3, 5);
    const auto y = fixture::draw_counts(rng, ref, Eigen::Vector3d(0.2, 0.5, 0.3), 300);
    const auto a = sample_posterior(ref, y, {}, quick(9));
    const auto b = sample_posterior(ref, y, {}, quick(9));
    EXPECT_EQ(a.weight_draws, b.weight_draws);
    EXPECT_NE(a.weight_draws, sample_posterior(ref, y, {}, quick(10)).weight_draws);
}

TEST(SamplePosterior, PermutingProcessesPermutesSummaries) {
    auto rng = make_rng(7);
    const auto ref = fixture::random_reference(rng, 3, 8);
    const auto y = fixture::draw_counts(rng, ref, Eigen::Vector3d(0.5, 0.35, 0.15), 800);
    Eigen::MatrixXd perm(3, 8);
    perm.row(0) = ref.pi.row(2);
    perm.row(1) = ref.pi.row(0);
    perm.row(2) = ref.pi.row(1);
    const auto ref2 = make_reference(perm, {"c", "a", "b"}, ref.class_names);
    const auto a = sample_posterior(ref, y, {}, quick(11));
    const auto b = sample_posterior(ref2, y, {}, quick(12));
    const int map[3] = {1, 2, 0};  // process i of ref sits at row map[i] of ref2
    for (int i = 0; i < 3; ++i) {
        const double sd = std::sqrt((a.weight_draws.col(i).array() - a.weight_draws.col(i).mean()).square().mean());
        const double mc = sd / std::sqrt(std::min(a.diagnostics.ess[i], b.diagnostics.ess[map[i]]));
        EXPECT_NEAR(a.weight_draws.col(i).mean(), b.weight_draws.col(map[i]).mean(), 4 * std::sqrt(2.0) * mc);
    }
}

TEST(SamplePosterior, BlockDesignConvergesToObservedShares) {
    // Identity-like references: each process owns one class outright.
    Eigen::MatrixXd pi = Eigen::MatrixXd::Identity(3, 3);
    const auto ref = make_reference(pi, {"a", "b", "c"}, {"x", "y", "z"});
    const ObservedCounts y{{50000, 30000, 20000}};
    const auto r = sample_posterior(ref, y, {}, quick(13));
    EXPECT_NEAR(r.weight_draws.col(0).mean(), 0.5, 0.01);
    EXPECT_NEAR(r.weight_draws.col(1).mean(), 0.3, 0.01);
    EXPECT_NEAR(r.weight_draws.col(2).mean(), 0.2, 0.01);
}

TEST(SamplePosterior, ChainCountChangesOnlyMonteCarloError) {
    auto rng = make_rng(14);
    const auto ref = fixture::random_reference(rng, 3, 6);
    const auto y = fixture::draw_counts(rng, ref, Eigen::Vector3d(0.3, 0.3, 0.4), 400);
    const auto four = sample_posterior(ref, y, {}, quick(15, 4));
    const auto seven = sample_posterior(ref, y, {}, quick(16, 7));
    for (int i = 0; i < 3; ++i) {
        auto mcse = [&](const MixtureResult& r) {
            const double m = r.weight_draws.col(i).mean();
            const double sd = std::sqrt((r.weight_draws.col(i).array() - m).square().sum() / (r.weight_draws.rows() - 1));
            return sd / std::sqrt(r.diagnostics.ess[i]);
        };
        EXPECT_NEAR(four.weight_draws.col(i).mean(), seven.weight_draws.col(i).mean(), 3 * std::hypot(mcse(four), mcse(seven)));
    }
}

TEST(SamplePosterior, LoopedPresetAndValidation) {
    EXPECT_EQ(SamplerConfig::looped().chains, 7);
    EXPECT_EQ(SamplerConfig::looped().iterations, 2000);
    SamplerConfig bad;
    bad.warmup = bad.iterations;
    expect_errc(Errc::InvalidArgument, [&] { bad.validate(); });
    bad = {};
    bad.target_accept = 1.0;
    expect_errc(Errc::InvalidArgument, [&] { bad.validate(); });
}

// ---------------------------------------------------------------- diagnostics

TEST(Diagnostics, RhatAndEssOnKnownChains) {
    auto rng = make_rng(17);
    std::normal_distribution<double> n(0, 1);
    std::vector<std::vector<double>> iid(4, std::vector<double>(1000));
    for (auto& c : iid)
        for (auto& v : c) v = n(rng);
    EXPECT_LT(split_rhat(iid), 1.01);
    EXPECT_NEAR(effective_sample_size(iid), 4000, 600);

    auto shifted = iid;
    for (auto& v : shifted[0]) v += 2;
    EXPECT_GT(split_rhat(shifted), 1.1);

    // AR(1) with phi = 0.9: ESS ~ n (1 - phi) / (1 + phi).
    std::vector<std::vector<double>> ar(4, std::vector<double>(5000));
    for (auto& c : ar) {
        double x = n(rng) / std::sqrt(1 - 0.81);
        for (auto& v : c) v = x = 0.9 * x + n(rng);
    }
    EXPECT_NEAR(effective_sample_size(ar), 20000 * 0.1 / 1.9, 0.3 * 20000 * 0.1 / 1.9);
    EXPECT_EQ(split_rhat({{1, 1, 1, 1}, {1, 1, 1, 1}}), 1.0);
    expect_errc(Errc::TooFewDraws, [] { split_rhat({{1, 2}}); });
}

// ---------------------------------------------------------------- summaries

TEST(PosteriorSummary, Examples) {
    const auto c = summarise_draws("p", std::vector<double>(100, 0.3));
    EXPECT_EQ(c.sd, 0.0);
    for (double q : c.quantiles) EXPECT_EQ(q, 0.3);
    std::vector<double> tenths;
    for (int k = 1; k <= 10; ++k) tenths.push_back(k / 10.0);
    EXPECT_NEAR(midpoint_quantile(tenths, 0.5), 0.55, 1e-15);
    EXPECT_NEAR(midpoint_quantile(tenths, 0.025), 0.15, 1e-15);
    EXPECT_EQ(midpoint_quantile(tenths, 1.0), 1.0);
    std::vector<double> reps;
    for (double v : tenths) reps.insert(reps.end(), 10, v);
    EXPECT_NEAR(summarise_draws("p", reps).quantiles[2], 0.55, 1e-15);
    expect_errc(Errc::TooFewDraws, [&] { summarise_draws("p", tenths); });

    auto rng = make_rng(18);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> d(100 + uniform_below(rng, 200));
        for (auto& v : d) v = u(rng) * 1e-3 + 0.7;
        const auto s = summarise_draws("p", d);
        EXPECT_GE(s.mean, *std::min_element(d.begin(), d.end()));
        EXPECT_LE(s.mean, *std::max_element(d.begin(), d.end()));
        for (std::size_t k = 1; k < s.quantiles.size(); ++k) EXPECT_LE(s.quantiles[k - 1], s.quantiles[k]);
    }
}

TEST(PosteriorPredictive, Examples) {
    MixtureResult r;
    r.implied_q_draws = Eigen::MatrixXd::Zero(50, 4);
    r.implied_q_draws.col(0).setOnes();
    const auto pp = posterior_predictive(r, 37, 1);
    EXPECT_TRUE((pp.col(0).array() == 37).all());
    EXPECT_EQ(pp.rightCols(3).sum(), 0);

    auto rng = make_rng(19);
    const auto ref = fixture::random_reference(rng, 3, 5);
    const auto y = fixture::draw_counts(rng, ref, Eigen::Vector3d(0.2, 0.3, 0.5), 200);
    const auto post = sample_posterior(ref, y, {}, quick(20));
    const auto draws = posterior_predictive(post, 500, 21);
    ASSERT_EQ(draws.rows(), 2000);
    for (Eigen::Index d = 0; d < draws.rows(); ++d) ASSERT_EQ(draws.row(d).sum(), 500);
    const Eigen::RowVectorXd mean_q = post.implied_q_draws.colwise().mean();
    for (Eigen::Index c = 0; c < 5; ++c) {
        const Eigen::ArrayXd col = draws.col(c).cast<double>().array();
        const double sd = std::sqrt((col - col.mean()).square().sum() / (col.size() - 1));
        EXPECT_NEAR(col.mean(), 500 * mean_q(c), 3 * sd / std::sqrt(static_cast<double>(col.size())) * 2);
    }
    EXPECT_EQ(posterior_predictive(post, 500, 21), draws);
}

// ---------------------------------------------------------------- export

TEST(ExportMixtureReport, SingleProcessAndFiles) {
    const auto dir = fixture::fresh_dir("mixture_report");
    const auto single = sample_posterior(parse_reference("process,a,b\nonly,1,1\n"), ObservedCounts{{1, 1}});
    const auto svg = report_svg(single);
    EXPECT_NE(svg.find("data-process=\"only\" data-mean=\"1.000\""), std::string::npos);
    EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 0, true);

    auto rng = make_rng(22);
    const auto ref = fixture::block_reference(3, 3);
    const auto r = sample_posterior(ref, fixture::draw_counts(rng, ref, Eigen::Vector3d(0.1, 0.7, 0.2), 600), {}, quick(23));
    const auto files = export_mixture_report(r, dir);
    ASSERT_EQ(files.size(), 3u);
    const auto table = csv::read(dir / "weights.csv");
    EXPECT_EQ(table.header, r.process_names);
    EXPECT_EQ(static_cast<Eigen::Index>(table.rows.size()), r.weight_draws.rows());
    const auto diag = nlohmann::json::parse(read_file(dir / "diagnostics.json"));
    EXPECT_EQ(diag["processes"].size(), 3u);

    // Boxes ordered by descending posterior mean.
    const auto report = read_file(dir / "report.svg");
    const std::regex box(R"re(data-process="([^"]+)")re");
    std::vector<std::string> order;
    for (auto it = std::sregex_iterator(report.begin(), report.end(), box); it != std::sregex_iterator(); ++it) order.push_back((*it)[1]);
    EXPECT_EQ(order, (std::vector<std::string>{"proc1", "proc2", "proc0"}));

    // A failed run writes diagnostics only.
    auto bad = r;
    bad.failed = true;
    EXPECT_EQ(export_mixture_report(bad, dir / "failed").size(), 1u);
    EXPECT_FALSE(std::filesystem::exists(dir / "failed" / "weights.csv"));
    std::filesystem::remove_all(dir);
}

TEST(RankProcesses, TwoSourceBlendRanksTopTwo) {
    auto rng = make_rng(24);
    const auto ref = fixture::random_reference(rng, 10, 24);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(10);
    w(3) = w(7) = 0.5;
    const auto r = sample_posterior(ref, fixture::draw_counts(rng, ref, w, 1000), {}, quick(25));
    const auto order = rank_processes(r);
    EXPECT_EQ(std::set<std::size_t>(order.begin(), order.begin() + 2), (std::set<std::size_t>{3, 7}));
}
