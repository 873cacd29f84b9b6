#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "dsa/eval.hpp"
#include "fixtures.hpp"

using namespace dsa;
using dsa::test::toy_dataset;

namespace {

EvalConfig quick_eval(const Dataset& d, int epochs = 5)
{
    EvalConfig e;
    e.arch = ArchSpec::convnet(d.shape(), d.classes, 4, 2);
    e.epochs = epochs;
    e.decay_epoch = epochs / 2;
    e.aug = AugDistribution::combination(true);
    e.sets = 1;
    e.nets = 1;
    e.seed = 9;
    return e;
}

CondenseConfig quick_condense(const Dataset& d)
{
    CondenseConfig c;
    c.arch = ArchSpec::convnet(d.shape(), d.classes, 4, 2);
    c.outer = 2;
    c.batch_real = 6;
    c.aug = AugDistribution::combination(true);
    c.seed = 3;
    return c;
}

/// Every weight zero: constant logits, so argmax is always class 0.
Network<float> zero_net(const Dataset& d)
{
    Network<float> net(ArchSpec::convnet(d.shape(), d.classes, 4, 2));
    for (auto& p : net.parameters()) p.mutable_value() = Tensor<float>(p.shape());
    return net;
}

} // namespace

TEST(TestAccuracy, ConstantLogitsOnBalancedTenClasses)
{
    Dataset d = toy_dataset(10, 1, 5);
    Network<float> net = zero_net(d);
    EXPECT_DOUBLE_EQ(test_accuracy(net, d), 0.1);
}

TEST(TestAccuracy, TwoOfThreeCorrect)
{
    Dataset d = toy_dataset(3, 1, 1);
    Network<float> net = zero_net(d);
    const Tensor<float> x = take_rows(d.test_x, {0, 1, 2});
    EXPECT_DOUBLE_EQ(test_accuracy(net, x, {0, 0, 1}), 2.0 / 3.0);
}

TEST(TrainClassifier, MemorizesFourSamples)
{
    Dataset d = toy_dataset(2, 2, 1);
    EvalConfig e = quick_eval(d, 200);
    e.aug = AugDistribution::none();
    std::mt19937_64 rng(1);
    Network<float> net = train_classifier(d.train_x, d.train_y, e, rng);
    EXPECT_DOUBLE_EQ(test_accuracy(net, d.train_x, d.train_y), 1.0);
}

TEST(TrainClassifier, SameSeedSameAccuracy)
{
    Dataset d = toy_dataset();
    EvalConfig e = quick_eval(d);
    std::mt19937_64 r1(5), r2(5);
    Network<float> a = train_classifier(d.train_x, d.train_y, e, r1);
    Network<float> b = train_classifier(d.train_x, d.train_y, e, r2);
    EXPECT_EQ(test_accuracy(a, d), test_accuracy(b, d));
    EXPECT_EQ(predict(a, d.test_x), predict(b, d.test_x));
}

TEST(TrainClassifier, ShapeMismatchFails)
{
    Dataset d = toy_dataset();
    EvalConfig e = quick_eval(d);
    e.arch = ArchSpec::convnet(ImageShape{1, 16, 16}, 3, 4, 2);
    std::mt19937_64 rng(1);
    EXPECT_THROW(train_classifier(d.train_x, d.train_y, e, rng), ShapeError);
    e = quick_eval(d);
    std::vector<int> bad = d.train_y;
    bad[0] = 7;
    EXPECT_THROW(train_classifier(d.train_x, bad, e, rng), ShapeError);
}

TEST(TrainClassifier, UntrainedIsAtChance)
{
    if (!dsa::test::have_mnist5k()) GTEST_SKIP() << "data/mnist5k not present";
    Dataset d = load_dataset("mnist5k", DSA_TEST_DATA_DIR);
    EvalConfig e = quick_eval(d, 0);
    e.arch = ArchSpec::convnet(d.shape(), 10, 32, 3);
    double sum = 0;
    for (int i = 0; i < 5; ++i) {
        std::mt19937_64 rng(100 + i);
        Network<float> net = train_classifier(d.train_x, d.train_y, e, rng);
        sum += test_accuracy(net, d);
    }
    EXPECT_NEAR(sum / 5, 0.10, 0.03);
}

TEST(EvalReport, SingleRunHasZeroStd)
{
    Dataset d = toy_dataset();
    std::mt19937_64 rng(1);
    EvalReport r = evaluate_sets({random_coreset(d, 2, rng)}, quick_eval(d), d);
    ASSERT_EQ(r.accuracies.size(), 1u);
    EXPECT_EQ(r.stdev, 0.0);
    EXPECT_EQ(r.mean, r.accuracies[0]);
}

TEST(EvalReport, AggregatesRecomputeExactly)
{
    EvalReport r;
    r.accuracies = {0.5, 0.75, 1.0, 0.25};
    r.nets = 2;
    r.recompute();
    EXPECT_DOUBLE_EQ(r.mean, 0.625);
    EXPECT_DOUBLE_EQ(r.stdev, std::sqrt(0.078125));
    const auto j = r.to_json();
    EXPECT_EQ(j["accuracies"].size(), 4u);
    EXPECT_EQ(j["mean"].get<double>(), r.mean);
    const std::string text = r.to_text();
    EXPECT_NE(text.find("1\t1\t0.25\n"), std::string::npos);
    EXPECT_NE(text.find("runs\t4\n"), std::string::npos);
}

TEST(EvaluateProtocol, ParallelEqualsSerial)
{
    Dataset d = toy_dataset();
    EvalConfig e = quick_eval(d);
    e.sets = 2;
    e.nets = 2;
    CondenseConfig c = quick_condense(d);
    EvalReport serial = evaluate_protocol(c, e, d, 1);
    EvalReport parallel = evaluate_protocol(c, e, d, 4);
    ASSERT_EQ(serial.accuracies.size(), 4u);
    EXPECT_EQ(serial.accuracies, parallel.accuracies);
    EXPECT_EQ(serial.mean, parallel.mean);
    EXPECT_EQ(serial.stdev, parallel.stdev);
    EvalReport again = serial;
    again.recompute();
    EXPECT_EQ(again.mean, serial.mean);
    EXPECT_EQ(again.stdev, serial.stdev);
}

TEST(EvaluateProtocol, SetsUseDistinctSeeds)
{
    Dataset d = toy_dataset();
    CondenseConfig c = quick_condense(d);
    auto sets = condense_sets(c, 2, d);
    EXPECT_FALSE(sets[0].images == sets[1].images);
    CondenseConfig one = c;
    one.seed = set_seed(c.seed, 1);
    EXPECT_EQ(condense(one, d).set.images, sets[1].images);
}

TEST(EvaluateProtocol, DivergenceNamesTheSet)
{
    Dataset d = toy_dataset();
    CondenseConfig c = quick_condense(d);
    c.lr_syn = 1e38;
    c.outer = 4;
    EvalConfig e = quick_eval(d);
    try {
        evaluate_protocol(c, e, d);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& err) {
        EXPECT_EQ(std::string(err.what()).rfind("set 0: ", 0), 0u) << err.what();
    }
}

TEST(CrossArchitecture, OneByOneIsProtocol)
{
    Dataset d = toy_dataset();
    EvalConfig e = quick_eval(d);
    e.nets = 2;
    CondenseConfig c = quick_condense(d);
    CrossArchResult m = cross_architecture({c.arch}, {e.arch}, c, e, d);
    ASSERT_EQ(m.cells.size(), 1u);
    ASSERT_EQ(m.cells[0].size(), 1u);
    EXPECT_EQ(m.cells[0][0].accuracies, evaluate_protocol(c, e, d).accuracies);
}

TEST(CrossArchitecture, GridShapeAndRowErrors)
{
    Dataset d = toy_dataset();
    EvalConfig e = quick_eval(d, 2);
    CondenseConfig c = quick_condense(d);
    c.outer = 1;
    const ArchSpec conv = c.arch, mlp = ArchSpec::mlp(d.shape(), 3, 8);
    CrossArchResult m = cross_architecture({conv, mlp}, {conv, mlp}, c, e, d);
    ASSERT_EQ(m.cells.size(), 2u);
    for (const auto& row : m.cells) ASSERT_EQ(row.size(), 2u);
    EXPECT_EQ(m.rows[1], mlp.name());
    ArchSpec bn = conv;
    bn.norm = Norm::batch;
    try {
        cross_architecture({conv, bn}, {conv}, c, e, d);
        FAIL() << "expected config error";
    } catch (const ConfigError& err) {
        EXPECT_NE(std::string(err.what()).find("row " + bn.name()), std::string::npos) << err.what();
    }
}

TEST(RandomCoreset, WholeClassWhenIpcEqualsPopulation)
{
    Dataset d = toy_dataset(3, 4);
    std::mt19937_64 rng(2);
    SyntheticSet s = random_coreset(d, 4, rng);
    const auto idx = d.class_index();
    const std::size_t per = 64;
    for (int c = 0; c < 3; ++c) {
        std::set<int> rows;
        for (int i = 0; i < 4; ++i) {
            const float* img = s.images.data() + static_cast<std::size_t>(s.first_of(c) + i) * per;
            for (int r : idx[c])
                if (std::equal(img, img + per, d.train_x.data() + static_cast<std::size_t>(r) * per)) rows.insert(r);
        }
        EXPECT_EQ(rows, std::set<int>(idx[c].begin(), idx[c].end()));
    }
    EXPECT_EQ(s.labels, even_labels(3, 4));
}

TEST(RandomCoreset, ReproducibleAndChecked)
{
    Dataset d = toy_dataset(3, 6);
    std::mt19937_64 a(8), b(8);
    EXPECT_EQ(random_coreset(d, 3, a).images, random_coreset(d, 3, b).images);
    EXPECT_THROW(random_coreset(d, 7, a), DataError);
}

TEST(Ablation, SchemeTable)
{
    const auto o = ablation_scheme("Ours");
    EXPECT_EQ(o.real, AugMode::siamese);
    EXPECT_EQ(o.syn, AugMode::siamese);
    EXPECT_TRUE(o.test);
    const auto a = ablation_scheme("A");
    EXPECT_EQ(a.real, AugMode::off);
    EXPECT_EQ(a.syn, AugMode::off);
    EXPECT_FALSE(a.test);
    EXPECT_TRUE(ablation_scheme("B").test);
    EXPECT_EQ(ablation_scheme("C").real, AugMode::independent);
    EXPECT_EQ(ablation_scheme("C").syn, AugMode::off);
    EXPECT_EQ(ablation_scheme("D").syn, AugMode::independent);
    EXPECT_FALSE(ablation_scheme("E").test);
    EXPECT_EQ(ablation_scheme("F").real, AugMode::independent);
    EXPECT_THROW(ablation_scheme("G"), ConfigError);
}

TEST(Ablation, ApplySchemeSetsBothConfigs)
{
    Dataset d = toy_dataset();
    CondenseConfig c = quick_condense(d);
    EvalConfig e = quick_eval(d);
    const AugDistribution crop = AugDistribution::single(AugKind::crop);
    apply_scheme(ablation_scheme("A"), crop, c, e);
    EXPECT_EQ(c.aug.strategy, Strategy::none);
    EXPECT_FALSE(c.aug_net);
    EXPECT_EQ(e.aug.strategy, Strategy::none);
    c.validate();
    apply_scheme(ablation_scheme("Ours"), crop, c, e);
    EXPECT_EQ(c.aug.kind, AugKind::crop);
    EXPECT_TRUE(c.aug_net);
    EXPECT_EQ(e.aug.kind, AugKind::crop);
    apply_scheme(ablation_scheme("C"), crop, c, e);
    EXPECT_FALSE(c.aug_net);
    EXPECT_EQ(c.aug.kind, AugKind::crop);
}

TEST(ParallelFor, LowestFailingIndexWins)
{
    std::vector<int> hit(10, 0);
    try {
        parallel_for(10, 3, [&](int i) {
            hit[static_cast<std::size_t>(i)] = 1;
            if (i == 7 || i == 4) throw Error("cell " + std::to_string(i));
        });
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "cell 4");
    }
    EXPECT_EQ(std::accumulate(hit.begin(), hit.end(), 0), 10);
}
