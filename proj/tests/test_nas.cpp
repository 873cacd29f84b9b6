#include <gtest/gtest.h>

#include <random>

#include "dsa/nas.hpp"
#include "fixtures.hpp"

using namespace dsa;
using dsa::test::toy_dataset;

namespace {

/// Closed form for distinct values: ranks by counting smaller elements, then 1 - 6Σd²/(n(n²-1)).
double spearman_closed_form(const std::vector<double>& a, const std::vector<double>& b)
{
    const std::size_t n = a.size();
    auto rank = [](const std::vector<double>& v, std::size_t i) {
        int r = 1;
        for (double x : v) r += x < v[i];
        return r;
    };
    double d2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = rank(a, i) - rank(b, i);
        d2 += d * d;
    }
    const double nn = static_cast<double>(n);
    return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
}

EvalConfig tiny_eval(const Dataset& d)
{
    EvalConfig e;
    e.arch = ArchSpec::convnet(d.shape(), d.classes, 4, 1);
    e.epochs = 3;
    e.decay_epoch = 2;
    e.aug = AugDistribution::none();
    e.seed = 4;
    return e;
}

NasAxes tiny_axes()
{
    return {{1, 2}, {4}, {Activation::relu}, {Norm::instance, Norm::none}, {Pooling::avg}};
}

} // namespace

TEST(Enumerate, FullGridHas720)
{
    NasGrid g = enumerate(NasAxes::full(), ImageShape{1, 28, 28}, 10);
    EXPECT_EQ(g.size(), 720u);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_TRUE(g.valid(i)) << g.specs[i].name() << ": " << g.invalid[i];
}

TEST(Enumerate, DeskGridHas24)
{
    EXPECT_EQ(NasAxes::desk().size(), 24u);
    EXPECT_EQ(enumerate(NasAxes::desk(), ImageShape{1, 28, 28}, 10).size(), 24u);
}

TEST(Enumerate, SingleValuePerAxis)
{
    NasAxes a{{3}, {64}, {Activation::sigmoid}, {Norm::layer}, {Pooling::max}};
    NasGrid g = enumerate(a, ImageShape{1, 28, 28}, 10);
    ASSERT_EQ(g.size(), 1u);
    EXPECT_EQ(g.specs[0].depth, 3);
    EXPECT_EQ(g.specs[0].activation, Activation::sigmoid);
    EXPECT_EQ(g.specs[0].norm, Norm::layer);
    EXPECT_EQ(g.specs[0].pooling, Pooling::max);
}

TEST(Enumerate, LexicographicOrderAndCollapseFlagged)
{
    NasAxes a{{4, 5}, {8}, {Activation::relu}, {Norm::none}, {Pooling::avg, Pooling::none}};
    NasGrid g = enumerate(a, ImageShape{1, 28, 28}, 10);
    ASSERT_EQ(g.size(), 4u);
    EXPECT_EQ(g.specs[0].depth, 4);
    EXPECT_EQ(g.specs[1].pooling, Pooling::none);
    EXPECT_EQ(g.specs[2].depth, 5);
    EXPECT_TRUE(g.valid(0));
    EXPECT_FALSE(g.valid(2)) << "28 -> 14 -> 7 -> 3 -> 1 leaves nothing to pool at depth 5";
    EXPECT_TRUE(g.valid(3));
    EXPECT_THROW(enumerate(NasAxes{{}, {8}, {Activation::relu}, {Norm::none}, {Pooling::avg}}, ImageShape{}, 10), ConfigError);
}

TEST(Spearman, IdenticalAndReversed)
{
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
}

TEST(Spearman, ThreeElementClosedForm)
{
    EXPECT_NEAR(spearman({1, 2, 3}, {1, 3, 2}), 0.5, 1e-15);
}

TEST(Spearman, MatchesClosedFormOnRandomLists)
{
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 3 + trial;
        std::vector<double> a(n), b(n);
        for (auto& v : a) v = u(rng);
        for (auto& v : b) v = u(rng);
        EXPECT_NEAR(spearman(a, b), spearman_closed_form(a, b), 1e-12) << "trial " << trial;
    }
}

TEST(Spearman, TiesUseAverageRanks)
{
    EXPECT_EQ(average_ranks({5, 1, 5, 3}), (std::vector<double>{3.5, 1, 3.5, 2}));
    // Pearson on ranks ra = (1, 2.5, 2.5), rb = (1, 2, 3)
    EXPECT_NEAR(spearman({1, 2, 2}, {1, 2, 3}), 1.5 / std::sqrt(1.5 * 2.0), 1e-15);
    EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
}

TEST(Spearman, InvariantUnderMonotoneTransform)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.1, 3);
    std::vector<double> a(12), b(12), ta(12), tb(12);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    for (std::size_t i = 0; i < 12; ++i) {
        ta[i] = std::exp(3 * a[i]) - 7;
        tb[i] = -1.0 / b[i];
    }
    EXPECT_EQ(spearman(a, b), spearman(ta, tb));
}

TEST(Spearman, Errors)
{
    EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), Error);
    EXPECT_THROW(spearman({1}, {1}), Error);
}

TEST(TopByReference, SelectsByReferenceWithOrderTieBreak)
{
    const std::vector<double> ref{0.5, 0.9, 0.7, 0.9, NAN, 0.1};
    EXPECT_EQ(top_by_reference(ref, 0.05), (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(top_by_reference(ref, 0.5), (std::vector<std::size_t>{1, 2, 3}));
    const std::vector<double> tie{0.9, 0.5, 0.5, 0.5};
    EXPECT_EQ(top_by_reference(tie, 0.5), (std::vector<std::size_t>{0, 1}));
}

TEST(ProxyRank, IdenticalSpecsScoreIdentically)
{
    Dataset d = toy_dataset();
    NasAxes a{{1}, {4}, {Activation::relu}, {Norm::instance, Norm::instance}, {Pooling::avg}};
    NasGrid g = enumerate(a, d.shape(), d.classes);
    ProxyScores s = proxy_rank(g, d.train_x, d.train_y, tiny_eval(d), d);
    ASSERT_EQ(s.scores.size(), 2u);
    EXPECT_EQ(s.scores[0], s.scores[1]);
    EXPECT_TRUE(std::isfinite(s.scores[0]));
}

TEST(ProxyRank, FailuresRecordedAndStudyContinues)
{
    Dataset d = toy_dataset();
    NasAxes a{{1, 4}, {4}, {Activation::relu}, {Norm::none}, {Pooling::avg}};
    NasGrid g = enumerate(a, d.shape(), d.classes);
    ASSERT_FALSE(g.valid(1)); // 8 -> 4 -> 2 -> 1, nothing left for the fourth pool
    ProxyScores s = proxy_rank(g, d.train_x, d.train_y, tiny_eval(d), d);
    EXPECT_TRUE(std::isfinite(s.scores[0]));
    EXPECT_TRUE(std::isnan(s.scores[1]));
    EXPECT_FALSE(s.errors[1].empty());
    EXPECT_TRUE(s.errors[0].empty());
}

TEST(ProxyRank, ProxyEqualToReferenceGivesRhoOne)
{
    Dataset d = toy_dataset(3, 8, 10);
    NasAxes a{{1, 2}, {4, 8}, {Activation::relu, Activation::sigmoid}, {Norm::instance}, {Pooling::avg}};
    NasGrid g = enumerate(a, d.shape(), d.classes);
    EvalConfig e = tiny_eval(d);
    ProxyScores ref = proxy_rank(g, d.train_x, d.train_y, e, d);
    ProxyScores again = proxy_rank(g, d.train_x, d.train_y, e, d, 3);
    EXPECT_EQ(ref.scores, again.scores);
    std::vector<std::size_t> all(g.size());
    std::iota(all.begin(), all.end(), 0);
    const double rho = spearman_on(again.scores, ref.scores, all);
    if (!std::isnan(rho)) EXPECT_DOUBLE_EQ(rho, 1.0);
}

TEST(ProxyRank, StepCapLimitsTraining)
{
    Dataset d = toy_dataset();
    NasGrid g = enumerate(tiny_axes(), d.shape(), d.classes);
    EvalConfig e = tiny_eval(d);
    e.batch = 4;
    ProxyScores capped = proxy_rank(g, d.train_x, d.train_y, e, d, 1, 1);
    for (double s : capped.scores) EXPECT_TRUE(std::isfinite(s));
}

TEST(Study, ProxiesStorageAndScatter)
{
    Dataset d = toy_dataset(3, 10, 6);
    NasGrid g = enumerate(tiny_axes(), d.shape(), d.classes);
    StudyConfig sc;
    sc.reference = tiny_eval(d);
    sc.proxy = tiny_eval(d);
    sc.proxy.batch = 6;
    sc.condense.arch = ArchSpec::convnet(d.shape(), d.classes, 4, 2);
    sc.condense.outer = 1;
    sc.condense.batch_real = 4;
    sc.condense.aug = AugDistribution::combination(true);
    sc.ipc = 2;
    RankStudy st = study(g, d, sc);
    ASSERT_EQ(st.proxies.size(), 3u);
    EXPECT_EQ(st.proxies[0].name, "random");
    EXPECT_EQ(st.proxies[1].name, "dsa");
    EXPECT_EQ(st.proxies[2].name, "early_stop");
    EXPECT_EQ(st.proxies[0].storage, 6);
    EXPECT_EQ(st.proxies[1].storage, 6);
    EXPECT_EQ(st.proxies[2].storage, d.train_size());
    EXPECT_EQ(st.top.size(), 2u);
    const std::string scatter = st.scatter(st.proxies[1]);
    EXPECT_EQ(std::count(scatter.begin(), scatter.end(), '\n'), 1 + static_cast<long>(g.size()));
    const auto j = st.to_json();
    EXPECT_EQ(j["proxies"].size(), 3u);
    EXPECT_EQ(j["archs"].size(), g.size());
    EXPECT_NE(st.to_text().find("early_stop"), std::string::npos);
}
