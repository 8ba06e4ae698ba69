#include <gtest/gtest.h>

#include <random>

#include "phyto/inference_gate.hpp"
#include "support.hpp"

using namespace phyto;
using namespace phyto::inference;

namespace {

void expect_errc(Errc code, auto&& fn) {
    try {
        fn();
        FAIL() << "expected " << errc_name(code);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

std::vector<std::string> names(int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("C" + std::to_string(100 + i));
    return v;
}

}  // namespace

TEST(LoadProbabilityTable, Examples) {
    const auto t = parse_probability_table("segment_id,A,B\ns1,0.7,0.3\ns2,0.5000004,0.4999996\n");
    ASSERT_EQ(t.size(), 2u);
    EXPECT_DOUBLE_EQ(t.row(0)[0], 0.7);
    const auto& r = t.row(1);
    EXPECT_NEAR(r[0] + r[1], 1.0, 1e-15);
    expect_errc(Errc::RowSumInvalid, [] { parse_probability_table("segment_id,A,B\ns1,0.5,0.6\n"); });
    expect_errc(Errc::NegativeProbability, [] { parse_probability_table("segment_id,A,B\ns1,-0.1,1.1\n"); });
    expect_errc(Errc::DuplicateSegment, [] { parse_probability_table("segment_id,A,B\ns1,0.5,0.5\ns1,0.4,0.6\n"); });
    expect_errc(Errc::ParseError, [] { parse_probability_table("id,A,B\ns1,0.5,0.5\n"); });
    expect_errc(Errc::InvalidArgument, [] { parse_probability_table("segment_id,A\ns1,1\n"); });
}

TEST(LoadProbabilityTable, FormatRoundTrip) {
    const auto t = parse_probability_table("segment_id,A,B,C\ns1,0.2,0.3,0.5\ns2,0.1,0.1,0.8\n");
    const auto u = parse_probability_table(format_probability_table(t));
    ASSERT_EQ(u.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(u.row(i), t.row(i));
}

TEST(ArgmaxClass, Examples) {
    const std::vector<double> a{0.1, 0.9};
    auto p = argmax_class(a, {"A", "B"});
    EXPECT_EQ(p.cls, "B");
    EXPECT_DOUBLE_EQ(p.confidence, 0.9);
    const std::vector<double> u{0.5, 0.5};
    EXPECT_EQ(argmax_class(u, {"B", "A"}).cls, "A");
    const std::vector<double> flat(24, 1.0 / 24.0);
    const auto q = argmax_class(flat, names(24));
    EXPECT_EQ(q.confidence, 1.0 / 24.0);
    EXPECT_NEAR(q.confidence, 0.04167, 5e-6);
}

TEST(ArgmaxClass, FloorHoldsForRandomValidTables) {
    auto rng = make_rng(11);
    std::gamma_distribution<double> g(0.3, 1.0);
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 2 + static_cast<int>(uniform_below(rng, 40));
        std::string text = "segment_id";
        for (const auto& c : names(n)) text += "," + c;
        text += "\ns,";
        std::vector<double> v(n);
        double s = 0;
        for (auto& x : v) s += x = g(rng) + (trial % 7 == 0 ? 1.0 : 0.0);
        for (int i = 0; i < n; ++i) text += (i ? "," : "") + format_sig(v[i] / s, 12);
        text += "\n";
        const auto t = parse_probability_table(text);
        const auto p = argmax_class(t.row(0), t.class_names());
        ASSERT_GE(p.confidence, 1.0 / n);
    }
}

TEST(ArgmaxClass, InvariantUnderRescaling) {
    auto rng = make_rng(12);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> v(5);
        double s = 0;
        for (auto& x : v) s += x = u(rng);
        for (auto& x : v) x /= s;
        const double k = 0.1 + 10 * u(rng);
        std::vector<double> w(v);
        double t = 0;
        for (auto& x : w) t += x *= k;
        for (auto& x : w) x /= t;
        EXPECT_EQ(argmax_class(v, names(5)).cls, argmax_class(w, names(5)).cls);
    }
}

TEST(QualityGate, RetainsSingletAndSpongeSpicule) {
    std::vector<Prediction> preds{{"a", "Trash", 0.8, 0}, {"b", "Singlet", 0.6, 0}, {"c", "SpongeSpicule", 0.9, 0},
                                  {"d", "Multicell", 0.5, 0}, {"e", "Diatom", 0.7, 0}};
    const auto g = quality_gate(preds);
    ASSERT_EQ(g.retained.size(), 2u);
    EXPECT_EQ(g.retained[0].segment_id, "b");
    EXPECT_EQ(g.retained[1].segment_id, "c");
    EXPECT_EQ(g.removed_counts.at("Trash"), 1u);
    EXPECT_EQ(g.removed_counts.at("PoorlySegmented"), 0u);
    EXPECT_EQ(gate_report_csv(g), "class,removed_count\nPoorlySegmented,0\nTrash,1\nMulticell,1\nDiatom,1\n");
    // Idempotent.
    const auto again = quality_gate(g.retained);
    EXPECT_EQ(again.retained.size(), g.retained.size());
    expect_errc(Errc::UnknownQualityClass, [] { quality_gate({{"x", "Bilobate", 1.0, 0}}); });
}

namespace {

SegmentSample synthetic_segment(Rng& rng, int cls, int i) {
    // Class 0: compact bright discs; class 1: long dim rods.
    SegmentSample s;
    s.segment_id = "S" + std::to_string(cls) + "-" + std::to_string(i);
    std::normal_distribution<double> jitter(0.0, 1.0);
    const int n = cls == 0 ? 900 + static_cast<int>(uniform_below(rng, 200)) : 400 + static_cast<int>(uniform_below(rng, 100));
    for (int k = 0; k < n; ++k) {
        double x, y;
        if (cls == 0) {
            x = 10 * jitter(rng);
            y = 10 * jitter(rng);
        } else {
            x = 30 * jitter(rng);
            y = 2 * jitter(rng);
        }
        s.cloud.points.push_back({static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)),
                                  static_cast<int>(uniform_below(rng, cls == 0 ? 20 : 5)), 0, 0, 0});
    }
    s.crop = RgbImage(16, 16, static_cast<std::uint8_t>(cls == 0 ? 200 : 80));
    return s;
}

}  // namespace

TEST(BaselineClassifier, SeparableClassesAndValidOutput) {
    auto rng = make_rng(3);
    std::vector<SegmentSample> train, test;
    for (int i = 0; i < 60; ++i) train.push_back(synthetic_segment(rng, i % 2, i));
    for (int i = 0; i < 40; ++i) test.push_back(synthetic_segment(rng, i % 2, 100 + i));
    std::vector<Descriptor> x;
    std::vector<std::string> y;
    for (const auto& s : train) {
        x.push_back(describe(s.cloud, s.crop));
        y.push_back(s.segment_id[1] == '0' ? "Disc" : "Rod");
    }
    BaselineClassifier model;
    expect_errc(Errc::UntrainedModel, [&] { (void)model.classify(test); });
    model.fit(x, y);
    const auto table = model.classify(test);
    int correct = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& r = table.row(i);
        double s = 0;
        for (double p : r) s += p;
        EXPECT_NEAR(s, 1.0, 1e-12);
        const auto p = argmax_class(r, table.class_names());
        correct += (p.cls == "Disc") == (test[i].segment_id[1] == '0');
    }
    EXPECT_GE(correct / 40.0, 0.95);

    const auto restored = BaselineClassifier::from_json(model.to_json());
    EXPECT_EQ(restored.predict_proba(x[0]), model.predict_proba(x[0]));
}

TEST(BaselineClassifier, SingleClassRejected) {
    BaselineClassifier model;
    expect_errc(Errc::InvalidArgument, [&] { model.fit({Descriptor{}, Descriptor{}}, {"A", "A"}); });
}

TEST(Describe, KnownShapes) {
    PointCloud square;
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) square.points.push_back({x, y, 0});
    const auto d = describe(square, RgbImage(10, 10, 255));
    EXPECT_NEAR(d[0], std::log(100.0), 1e-12);
    EXPECT_DOUBLE_EQ(d[1], 1.0);
    EXPECT_DOUBLE_EQ(d[2], 1.0);
    EXPECT_DOUBLE_EQ(d[3], 0.0);
    EXPECT_NEAR(d[4], 1.0, 1e-9);
    EXPECT_NEAR(d[5], 0.0, 1e-6);
    EXPECT_DOUBLE_EQ(d[6], 1.0);
    EXPECT_NEAR(d[7], 0.0, 1e-12);
}
