#include "test_util.hpp"

#include <fstream>
#include <sstream>

using namespace xnmoe;
using namespace xt;

namespace {

const std::vector<std::string> kSeven{"angry", "disgust", "fear", "happy", "neutral", "sad", "surprise"};

/// Fixed 7-class matrix; class 1 has small support and is only predicted correctly.
ConfusionMatrix seven_class_fixture()
{
    const std::uint64_t rows[7][7] = {
        {41, 0, 6, 3, 5, 7, 2},  {3, 2, 1, 0, 1, 2, 0},   {7, 0, 30, 2, 6, 9, 8}, {2, 0, 1, 88, 4, 2, 3},
        {4, 0, 5, 6, 50, 10, 1}, {6, 0, 8, 3, 9, 44, 1},  {1, 0, 6, 3, 2, 0, 60},
    };
    ConfusionMatrix cm(7);
    for (std::size_t t = 0; t < 7; ++t)
        for (std::size_t p = 0; p < 7; ++p) cm.at(t, p) = rows[t][p];
    return cm;
}

struct Samples {
    std::vector<std::size_t> truth, predicted;
};

Samples random_samples(std::size_t n, std::size_t K, std::uint64_t seed)
{
    Rng rng(seed);
    Samples s;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = rng.below(K);
        s.truth.push_back(t);
        // Bias toward correct predictions so every rate is non-trivial.
        s.predicted.push_back(rng.uniform(0, 1) < 0.6 ? t : rng.below(K));
    }
    return s;
}

/// Per-class statistics recomputed directly from the sample lists.
ClassificationReport oracle(const Samples& s, std::size_t K)
{
    const double N = static_cast<double>(s.truth.size());
    ClassificationReport r;
    r.total = s.truth.size();
    double correct = 0;
    for (std::size_t i = 0; i < s.truth.size(); ++i) correct += s.truth[i] == s.predicted[i];
    r.accuracy = correct / N;
    for (std::size_t c = 0; c < K; ++c) {
        double tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < s.truth.size(); ++i) {
            const bool t = s.truth[i] == c, p = s.predicted[i] == c;
            tp += t && p;
            fp += !t && p;
            fn += t && !p;
            tn += !t && !p;
        }
        ClassStats st;
        st.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        st.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        st.f1 = st.precision + st.recall > 0 ? 2 * st.precision * st.recall / (st.precision + st.recall) : 0.0;
        st.support = static_cast<std::uint64_t>(tp + fn);
        st.p_acc = (tp + tn) / N;
        r.classes.push_back(st);
        r.macro_precision += st.precision / static_cast<double>(K);
        r.macro_recall += st.recall / static_cast<double>(K);
        r.macro_f1 += st.f1 / static_cast<double>(K);
    }
    return r;
}

void expect_reports_near(const ClassificationReport& a, const ClassificationReport& b, double tol)
{
    ASSERT_EQ(a.classes.size(), b.classes.size());
    EXPECT_EQ(a.total, b.total);
    EXPECT_NEAR(a.accuracy, b.accuracy, tol);
    EXPECT_NEAR(a.macro_precision, b.macro_precision, tol);
    EXPECT_NEAR(a.macro_recall, b.macro_recall, tol);
    EXPECT_NEAR(a.macro_f1, b.macro_f1, tol);
    for (std::size_t c = 0; c < a.classes.size(); ++c) {
        EXPECT_NEAR(a.classes[c].precision, b.classes[c].precision, tol) << c;
        EXPECT_NEAR(a.classes[c].recall, b.classes[c].recall, tol) << c;
        EXPECT_NEAR(a.classes[c].f1, b.classes[c].f1, tol) << c;
        EXPECT_NEAR(a.classes[c].p_acc, b.classes[c].p_acc, tol) << c;
        EXPECT_EQ(a.classes[c].support, b.classes[c].support) << c;
    }
}

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(Confusion, PerfectPredictionsAreDiagonal)
{
    const std::vector<std::size_t> y{0, 1, 2, 2, 1, 0, 3};
    const auto cm = confusion(y, y, 4);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t p = 0; p < 4; ++p)
            EXPECT_EQ(cm.at(t, p), t == p ? static_cast<std::uint64_t>(std::count(y.begin(), y.end(), t)) : 0u);
}

TEST(Confusion, SingleSample)
{
    const auto cm = confusion({1}, {2}, 3);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(cm.at(t, p), t == 1 && p == 2 ? 1u : 0u);
}

TEST(Confusion, MatchesCountingOracleOn500Samples)
{
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto s = random_samples(500, 7, seed);
        const auto cm = confusion(s.truth, s.predicted, 7);
        EXPECT_EQ(cm.total(), 500u);
        for (std::size_t t = 0; t < 7; ++t)
            for (std::size_t p = 0; p < 7; ++p) {
                std::uint64_t n = 0;
                for (std::size_t i = 0; i < 500; ++i) n += s.truth[i] == t && s.predicted[i] == p;
                EXPECT_EQ(cm.at(t, p), n);
            }
    }
}

TEST(Confusion, RejectsBadInput)
{
    EXPECT_THROW(confusion({0, 1}, {0}, 2), ShapeError);
    EXPECT_THROW(confusion({0, 2}, {0, 1}, 2), DataError);
    EXPECT_THROW(report(ConfusionMatrix(3)), Error);
}

TEST(Report, TwoClassArithmetic)
{
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 50, cm.at(0, 1) = 10, cm.at(1, 0) = 5, cm.at(1, 1) = 35;
    const auto r = report(cm);
    EXPECT_EQ(r.classes[0].precision, 50.0 / 55.0);
    EXPECT_EQ(r.classes[0].recall, 50.0 / 60.0);
    EXPECT_EQ(r.accuracy, 85.0 / 100.0);
    EXPECT_EQ(r.classes[1].precision, 35.0 / 45.0);
    EXPECT_EQ(r.classes[1].recall, 35.0 / 40.0);
    EXPECT_EQ(r.classes[0].p_acc, 0.85);
    EXPECT_EQ(r.classes[0].support, 60u);
}

TEST(Report, DiagonalGivesAllOnes)
{
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 4, cm.at(1, 1) = 9, cm.at(2, 2) = 1;
    const auto r = report(cm);
    EXPECT_EQ(r.accuracy, 1.0);
    for (const auto& c : r.classes) {
        EXPECT_EQ(c.precision, 1.0);
        EXPECT_EQ(c.recall, 1.0);
        EXPECT_EQ(c.f1, 1.0);
        EXPECT_EQ(c.p_acc, 1.0);
    }
    const auto text = render_text(r, {"a", "b", "c"});
    EXPECT_NE(text.find("           a       1.00       1.00       1.00          4       1.00"), std::string::npos) << text;
}

TEST(Report, MatchesFormulaOracleOnRandomFixtures)
{
    for (std::uint64_t seed : {10u, 11u, 12u, 13u}) {
        const auto s = random_samples(500, 7, seed);
        const auto got = report(confusion(s.truth, s.predicted, 7));
        const auto want = oracle(s, 7);
        EXPECT_EQ(got.accuracy, want.accuracy);
        expect_reports_near(got, want, 1e-12);
    }
}

TEST(Report, InvariantsHold)
{
    const auto cm = seven_class_fixture();
    const auto r = report(cm);
    EXPECT_EQ(r.accuracy, static_cast<double>(cm.trace()) / static_cast<double>(cm.total()));
    double lo = 1, hi = 0;
    for (std::size_t c = 0; c < 7; ++c) {
        const auto& s = r.classes[c];
        for (double v : {s.precision, s.recall, s.f1, s.p_acc}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        std::uint64_t row = 0;
        for (std::size_t p = 0; p < 7; ++p) row += cm.at(c, p);
        EXPECT_EQ(s.support, row);
        lo = std::min(lo, s.f1);
        hi = std::max(hi, s.f1);
    }
    EXPECT_GE(r.macro_f1, lo);
    EXPECT_LE(r.macro_f1, hi);
}

TEST(Report, ClassPermutationPermutesRows)
{
    const auto cm = seven_class_fixture();
    const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    ConfusionMatrix permuted(7);
    for (std::size_t t = 0; t < 7; ++t)
        for (std::size_t p = 0; p < 7; ++p) permuted.at(perm[t], perm[p]) = cm.at(t, p);
    const auto a = report(cm), b = report(permuted);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_NEAR(a.macro_f1, b.macro_f1, 1e-15);
    EXPECT_NEAR(a.macro_precision, b.macro_precision, 1e-15);
    EXPECT_NEAR(a.macro_recall, b.macro_recall, 1e-15);
    for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_EQ(a.classes[c].f1, b.classes[perm[c]].f1);
        EXPECT_EQ(a.classes[c].support, b.classes[perm[c]].support);
    }
}

TEST(Report, ZeroDenominatorsReportZero)
{
    ConfusionMatrix cm(3);
    cm.at(1, 1) = 12;
    const auto r = report(cm);
    EXPECT_EQ(r.classes[1].precision, 1.0);
    EXPECT_EQ(r.classes[1].recall, 1.0);
    EXPECT_EQ(r.classes[1].f1, 1.0);
    for (std::size_t c : {0u, 2u}) {
        EXPECT_EQ(r.classes[c].precision, 0.0);
        EXPECT_EQ(r.classes[c].recall, 0.0);
        EXPECT_EQ(r.classes[c].f1, 0.0);
        EXPECT_EQ(r.classes[c].support, 0u);
    }
    EXPECT_NE(render_text(r, {"a", "b", "c"}).find(kReportFooter), std::string::npos);
}

TEST(Render, SevenClassGoldenText)
{
    const auto text = render_text(report(seven_class_fixture()), kSeven);
    const std::filesystem::path golden = XNMOE_GOLDEN_DIR "/report_7class.txt";
    if (std::getenv("XNMOE_UPDATE_GOLDEN")) std::ofstream(golden) << text;
    ASSERT_TRUE(std::filesystem::exists(golden));
    EXPECT_EQ(text, read_file(golden));
}

TEST(Render, JsonReparseIsIdempotent)
{
    const auto first = render_json(report(seven_class_fixture()), kSeven);
    const auto [r, names] = parse_report_json(first);
    EXPECT_EQ(names, kSeven);
    EXPECT_EQ(render_json(r, names), first);
    const auto j = nlohmann::json::parse(first);
    EXPECT_EQ(j.at("classes").at(1).at("precision").get<double>(), 1.0);
    EXPECT_EQ(j.at("total").get<std::uint64_t>(), seven_class_fixture().total());
}

TEST(Render, NameCountMismatch)
{
    const auto r = report(seven_class_fixture());
    EXPECT_THROW(render_text(r, {"a"}), Error);
    EXPECT_THROW(render_json(r, {"a"}), Error);
}
