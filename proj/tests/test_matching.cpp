#include <gtest/gtest.h>

#include <random>

#include "dsa/matching.hpp"
#include "oracle.hpp"

using namespace dsa;
using Vd = Var<double>;

namespace {

GradSet<double> random_set(std::mt19937_64& rng, const std::vector<Shape>& shapes)
{
    GradSet<double> g;
    for (const auto& s : shapes) g.layers.push_back(Vd::constant(test::random_tensor(s, rng)));
    return g;
}

GradSet<double> map_rows(const GradSet<double>& g, const std::function<double(int, double)>& f)
{
    GradSet<double> out;
    for (const auto& l : g.layers) {
        Tensor<double> t = l.value();
        const int cols = t.dim(1);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = f(static_cast<int>(i) / cols, t[i]);
        out.layers.push_back(Vd::constant(t));
    }
    return out;
}

const std::vector<Shape> kLayers{{4, 9}, {3, 5}, {2, 6}};

} // namespace

TEST(Distance, SelfIsZero)
{
    std::mt19937_64 rng(1);
    auto g = random_set(rng, kLayers);
    EXPECT_NEAR(layer_gradient_distance(g, g).item(), 0.0, 1e-12);
}

TEST(Distance, AntipodalIsTwicePerNode)
{
    std::mt19937_64 rng(2);
    auto g = random_set(rng, kLayers);
    auto m = map_rows(g, [](int, double v) { return -v; });
    auto d = layer_gradient_distance(g, m);
    EXPECT_NEAR(d.item(), 2.0 * 9, 1e-12);
    ASSERT_EQ(d.per_layer.size(), 3u);
    EXPECT_NEAR(d.per_layer[0], 8.0, 1e-12);
}

TEST(Distance, OrthogonalIsOnePerNode)
{
    GradSet<double> a, b;
    a.layers.push_back(Vd::constant(Tensor<double>(Shape{1, 2}, {1, 0})));
    b.layers.push_back(Vd::constant(Tensor<double>(Shape{1, 2}, {0, 3})));
    EXPECT_DOUBLE_EQ(layer_gradient_distance(a, b).item(), 1.0);
    a.layers[0] = Vd::constant(Tensor<double>(Shape{2, 2}, {1, 1, 2, 0}));
    b.layers[0] = Vd::constant(Tensor<double>(Shape{2, 2}, {-1, 1, 0, 5}));
    EXPECT_DOUBLE_EQ(layer_gradient_distance(a, b).item(), 2.0);
}

TEST(Distance, ZeroNodeCountsAsOrthogonal)
{
    GradSet<double> a, b;
    a.layers.push_back(Vd::constant(Tensor<double>(Shape{1, 3})));
    b.layers.push_back(Vd::constant(Tensor<double>(Shape{1, 3}, {1, 2, 3})));
    EXPECT_DOUBLE_EQ(layer_gradient_distance(a, b).item(), 1.0);
    Vd leaf = Vd::leaf(Tensor<double>(Shape{1, 3}));
    GradSet<double> c;
    c.layers.push_back(leaf);
    auto g = gradient(layer_gradient_distance(c, b).value, {leaf}).values[0].value();
    for (double v : g.vec()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Distance, PositiveScaleInvariance)
{
    std::mt19937_64 rng(3);
    auto a = random_set(rng, kLayers);
    auto b = random_set(rng, kLayers);
    auto scaled = map_rows(a, [](int row, double v) { return v * (0.01 + 7.5 * row); });
    EXPECT_NEAR(layer_gradient_distance(a, b).item(), layer_gradient_distance(scaled, b).item(), 1e-6);
}

TEST(Distance, Symmetric)
{
    std::mt19937_64 rng(4);
    auto a = random_set(rng, kLayers);
    auto b = random_set(rng, kLayers);
    EXPECT_EQ(layer_gradient_distance(a, b).item(), layer_gradient_distance(b, a).item());
}

TEST(Distance, StructureMismatchFails)
{
    std::mt19937_64 rng(5);
    auto a = random_set(rng, kLayers);
    auto b = random_set(rng, {{4, 9}, {3, 5}});
    EXPECT_THROW(layer_gradient_distance(a, b), ShapeError);
    auto c = random_set(rng, {{4, 9}, {3, 5}, {3, 4}});
    EXPECT_THROW(layer_gradient_distance(a, c), ShapeError);
}

namespace {

struct Fixture {
    std::mt19937_64 rng{6};
    Network<double> net{ArchSpec::convnet({1, 8, 8}, 3, 3, 1)};
    Tensor<double> syn, real;
    std::vector<int> sl{1, 1}, rl{1, 1, 1};

    Fixture()
    {
        net.kaiming_init(rng);
        syn = test::random_tensor(Shape{2, 1, 8, 8}, rng);
        real = test::random_tensor(Shape{3, 1, 8, 8}, rng);
    }
};

} // namespace

TEST(MatchingLoss, IdenticalBatchesIdentityOmegaIsZero)
{
    Fixture f;
    auto d = matching_loss(f.net, Vd::constant(f.real), f.rl, Vd::constant(f.real), f.rl, AugParam{});
    EXPECT_NEAR(d.item(), 0.0, 1e-12);
}

TEST(MatchingLoss, SyntheticGradientMatchesFiniteDifferences)
{
    Fixture f;
    AugParam w;
    w.kind = AugKind::rotate;
    w.angle = 7.0;
    Vd s = Vd::leaf(f.syn);
    const Tensor<double> rev = gradient(matching_loss(f.net, s, f.sl, Vd::constant(f.real), f.rl, w).value, {s}).values[0].value();
    const Tensor<double> fd = test::fd_gradient(
        [&](const Tensor<double>& t) {
            return matching_loss(f.net, Vd::constant(t), f.sl, Vd::constant(f.real), f.rl, w).item();
        },
        f.syn);
    EXPECT_LT(test::rel_error(rev, fd), 1e-3);
}

TEST(MatchingLoss, RealBranchIsConstant)
{
    Fixture f;
    Vd s = Vd::leaf(f.syn), r = Vd::leaf(f.real);
    auto g = gradient(matching_loss(f.net, s, f.sl, r, f.rl, AugParam{}).value, {s, r});
    EXPECT_EQ(g.unreached, (std::vector<std::size_t>{1}));
    for (double v : g.values[1].value().vec()) EXPECT_EQ(v, 0.0);
}

TEST(MatchingLoss, MixedClassFails)
{
    Fixture f;
    EXPECT_THROW(matching_loss(f.net, Vd::constant(f.syn), {0, 1}, Vd::constant(f.real), f.rl, AugParam{}), Error);
    EXPECT_THROW(matching_loss(f.net, Vd::constant(f.syn), {2, 2}, Vd::constant(f.real), f.rl, AugParam{}), Error);
}

TEST(MatchingLoss, MultiOmegaEqualsSum)
{
    Fixture f;
    std::vector<AugParam> ws(3);
    ws[0].kind = AugKind::flip, ws[0].flip = true;
    ws[1].kind = AugKind::crop, ws[1].dy = 1;
    ws[2].kind = AugKind::color, ws[2].contrast = 1.3;
    double sum = 0;
    for (const auto& w : ws) sum += matching_loss(f.net, Vd::constant(f.syn), f.sl, Vd::constant(f.real), f.rl, w).item();
    auto multi = matching_loss_multi(f.net, Vd::constant(f.syn), f.sl, Vd::constant(f.real), f.rl, ws);
    EXPECT_NEAR(multi.item(), sum, 1e-12);
}

TEST(MatchingLoss, AffineSwitchAddsRows)
{
    Fixture f;
    auto plain = weight_gradients(f.net, Vd::constant(f.real), f.rl, false, false);
    auto affine = weight_gradients(f.net, Vd::constant(f.real), f.rl, false, true);
    EXPECT_EQ(plain.layer_count(), 2u);
    EXPECT_EQ(affine.layer_count(), 4u);
    MatchOptions o;
    o.include_affine = true;
    EXPECT_GE(matching_loss(f.net, Vd::constant(f.syn), f.sl, Vd::constant(f.real), f.rl, AugParam{}, o).item(), 0.0);
}
