#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "dsa/data_io.hpp"

using namespace dsa;

namespace {

class TempDir {
public:
    TempDir()
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("dsa_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    fs::path operator/(const std::string& f) const { return path_ / f; }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void put_be(std::vector<unsigned char>& b, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(const std::vector<std::uint32_t>& dims, const std::vector<unsigned char>& px)
{
    std::vector<unsigned char> b;
    put_be(b, 0x803);
    for (auto d : dims) put_be(b, d);
    b.insert(b.end(), px.begin(), px.end());
    return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& y)
{
    std::vector<unsigned char> b;
    put_be(b, 0x801);
    put_be(b, static_cast<std::uint32_t>(y.size()));
    b.insert(b.end(), y.begin(), y.end());
    return b;
}

SyntheticSet sample_set()
{
    SyntheticSet s;
    s.classes = 3;
    s.ipc = 2;
    s.images = Tensor<float>(Shape{6, 3, 4, 5});
    std::mt19937_64 rng(1);
    std::normal_distribution<float> nd;
    for (auto& v : s.images.vec()) v = nd(rng);
    s.images[7] = -0.0f;
    s.images[8] = 1e-40f;
    s.labels = even_labels(3, 2);
    s.mean = {0.1f, 0.2f, 0.3f};
    s.std = {0.5f, 0.25f, 0.125f};
    s.config = "[condense]\nipc = 2\n";
    s.loss_trace = {3.5, 2.25, 1.0 / 3.0};
    return s;
}

} // namespace

TEST(Idx, HandBuiltFixture)
{
    TempDir t;
    write_bytes(t / "img", idx_images({2, 1, 1}, {0, 255}));
    write_bytes(t / "lbl", idx_labels({7, 3}));
    RawImages r = load_idx(t / "img", t / "lbl");
    EXPECT_EQ(r.pixels.shape(), (Shape{2, 1, 1, 1}));
    EXPECT_EQ(r.pixels.vec(), (std::vector<float>{0.f, 255.f}));
    EXPECT_EQ(r.labels, (std::vector<int>{7, 3}));
}

TEST(Idx, TypedFailures)
{
    TempDir t;
    write_bytes(t / "img", idx_images({2, 1, 1}, {0, 255}));
    write_bytes(t / "short", idx_images({2, 2, 2}, {0, 1, 2}));
    write_bytes(t / "lbl3", idx_labels({1, 2, 3}));
    auto bad = idx_images({2, 1, 1}, {0, 255});
    bad[3] = 0x02;
    write_bytes(t / "bad", bad);
    write_bytes(t / "lbl", idx_labels({1, 2}));
    EXPECT_THROW(load_idx(t / "img", t / "lbl3"), CountMismatchError);
    EXPECT_THROW(load_idx(t / "short", t / "lbl"), TruncatedError);
    try {
        load_idx(t / "bad", t / "lbl");
        FAIL();
    } catch (const BadMagicError& e) {
        EXPECT_EQ(e.path(), (t / "bad").string());
        EXPECT_EQ(e.offset(), 0);
    }
    EXPECT_THROW(load_idx(t / "missing", t / "lbl"), DataError);
}

TEST(Idx, GzipTransparent)
{
    TempDir t;
    const auto raw = idx_images({3, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    gzFile gz = gzopen((t / "img.gz").c_str(), "wb");
    gzwrite(gz, raw.data(), static_cast<unsigned>(raw.size()));
    gzclose(gz);
    write_bytes(t / "lbl", idx_labels({0, 1, 2}));
    RawImages r = load_idx(t / "img.gz", t / "lbl");
    EXPECT_EQ(r.pixels.at(2, 0, 1, 1), 12.f);
}

TEST(Cifar, SingleRecordFixture)
{
    TempDir t;
    std::vector<unsigned char> rec(3073, 0);
    rec[0] = 3;
    write_bytes(t / "one.bin", rec);
    RawImages r = load_records(t / "one.bin", 1, {3, 32, 32});
    EXPECT_EQ(r.pixels.shape(), (Shape{1, 3, 32, 32}));
    EXPECT_EQ(r.labels, (std::vector<int>{3}));
    for (float v : r.pixels.vec()) EXPECT_EQ(v, 0.f);
}

TEST(Cifar, PlaneOrderIsRGB)
{
    TempDir t;
    std::vector<unsigned char> rec(3073, 0);
    rec[1 + 0 * 1024 + 33] = 10;
    rec[1 + 1 * 1024 + 33] = 20;
    rec[1 + 2 * 1024 + 33] = 30;
    write_bytes(t / "r.bin", rec);
    RawImages r = load_records(t / "r.bin", 1, {3, 32, 32});
    EXPECT_EQ(r.pixels.at(0, 0, 1, 1), 10.f);
    EXPECT_EQ(r.pixels.at(0, 1, 1, 1), 20.f);
    EXPECT_EQ(r.pixels.at(0, 2, 1, 1), 30.f);
}

TEST(Cifar, TruncatedIsSizeFailure)
{
    TempDir t;
    write_bytes(t / "cut.bin", std::vector<unsigned char>(3073 * 2 - 5, 1));
    try {
        load_records(t / "cut.bin", 1, {3, 32, 32});
        FAIL();
    } catch (const FileSizeError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("3073"), std::string::npos);
        EXPECT_NE(m.find("6141"), std::string::npos);
    }
}

TEST(Cifar, DirectoryLayout)
{
    TempDir t;
    for (int i = 1; i <= 5; ++i) {
        std::vector<unsigned char> rec(3073, static_cast<unsigned char>(i * 10));
        rec[0] = static_cast<unsigned char>(i);
        write_bytes(t / ("data_batch_" + std::to_string(i) + ".bin"), rec);
    }
    std::vector<unsigned char> rec(3073, 0);
    write_bytes(t / "test_batch.bin", rec);
    Dataset d = load_cifar10(t.path());
    EXPECT_EQ(d.train_size(), 5);
    EXPECT_EQ(d.test_size(), 1);
    EXPECT_EQ(d.train_y, (std::vector<int>{1, 2, 3, 4, 5}));
    EXPECT_NEAR(d.mean[0], 30.0 / 255.0, 1e-6);
    EXPECT_FALSE(d.digits);
}

TEST(Normalization, StatisticsAndInverse)
{
    RawImages tr{Tensor<float>(Shape{2, 1, 1, 2}, {0, 255, 255, 0}), {0, 1}};
    RawImages te{Tensor<float>(Shape{1, 1, 1, 2}, {51, 102}), {1}};
    Dataset d = make_dataset("toy", 2, tr, te, true);
    EXPECT_FLOAT_EQ(d.mean[0], 0.5f);
    EXPECT_FLOAT_EQ(d.std[0], 0.5f);
    EXPECT_FLOAT_EQ(d.train_x[0], -1.f);
    const Tensor<float> back = denormalize(d.test_x, d.mean, d.std);
    EXPECT_NEAR(back[0], 0.2, 1e-6);
    EXPECT_NEAR(back[1], 0.4, 1e-6);
    RawImages bad{Tensor<float>(Shape{1, 1, 1, 1}), {5}};
    EXPECT_THROW(make_dataset("toy", 2, bad, te, true), DataError);
}

TEST(Normalization, InverseWithinTolerance)
{
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> u(0, 255);
    RawImages tr{Tensor<float>(Shape{20, 3, 4, 4}), std::vector<int>(20, 0)};
    for (auto& v : tr.pixels.vec()) v = static_cast<float>(u(rng));
    const Tensor<float> raw = tr.pixels;
    Dataset d = make_dataset("toy", 1, tr, tr, false);
    const Tensor<float> back = denormalize(d.train_x, d.mean, d.std);
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(back[i], raw[i] / 255.0, 1e-6);
}

TEST(Synthetic, RoundTripBitExact)
{
    TempDir t;
    const SyntheticSet s = sample_set();
    save_synthetic(t / "s.dsa", s);
    const SyntheticSet r = load_synthetic(t / "s.dsa");
    EXPECT_EQ(r, s);
    EXPECT_EQ(std::memcmp(r.images.data(), s.images.data(), s.images.size() * sizeof(float)), 0);
    EXPECT_TRUE(std::signbit(r.images[7]));
}

TEST(Synthetic, CorruptedByteIsChecksumFailure)
{
    TempDir t;
    auto bytes = encode_synthetic(sample_set());
    bytes[bytes.size() / 2] ^= 0x10;
    write_bytes(t / "c.dsa", bytes);
    EXPECT_THROW(load_synthetic(t / "c.dsa"), ChecksumError);
}

TEST(Synthetic, OlderVersionIsVersionFailure)
{
    TempDir t;
    write_bytes(t / "v.dsa", encode_synthetic(sample_set(), 0));
    EXPECT_THROW(load_synthetic(t / "v.dsa"), VersionError);
    auto bytes = encode_synthetic(sample_set());
    bytes[0] = 'X';
    write_bytes(t / "m.dsa", bytes);
    EXPECT_THROW(load_synthetic(t / "m.dsa"), BadMagicError);
    bytes = encode_synthetic(sample_set());
    bytes.resize(30);
    write_bytes(t / "t.dsa", bytes);
    EXPECT_THROW(load_synthetic(t / "t.dsa"), DataError);
}

TEST(Synthetic, RefusesNonFinite)
{
    TempDir t;
    SyntheticSet s = sample_set();
    s.images[0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(save_synthetic(t / "n.dsa", s), DataError);
}

TEST(Grid, TenByTenTiles)
{
    SyntheticSet s;
    s.classes = 10;
    s.ipc = 10;
    s.images = Tensor<float>(Shape{100, 1, 28, 28});
    s.labels = even_labels(10, 10);
    s.mean = {0.1307f};
    s.std = {0.3081f};
    TempDir t;
    GridImage g = export_grid(s, t / "g.png");
    EXPECT_EQ(g.width, 280);
    EXPECT_EQ(g.height, 280);
    const unsigned char level = static_cast<unsigned char>(std::lround(0.1307 * 255));
    for (unsigned char v : g.pixels) ASSERT_EQ(v, level);
    GridImage back = read_png(t / "g.png");
    EXPECT_EQ(back.pixels, g.pixels);
}

TEST(Grid, ConfigEmbeddedInImages)
{
    SyntheticSet s;
    s.classes = 2;
    s.ipc = 1;
    s.images = Tensor<float>(Shape{2, 1, 4, 4}, 0.25f);
    s.labels = {0, 1};
    s.mean = {0.f};
    s.std = {1.f};
    s.config = "[run]\nseed = 7\n";
    TempDir t;
    const GridImage g = export_grid(s, t / "c.png");
    EXPECT_EQ(read_png(t / "c.png").pixels, g.pixels);
    const auto png = read_file(t / "c.png");
    const std::string bytes(png.begin(), png.end());
    EXPECT_NE(bytes.find("seed = 7"), std::string::npos);
    export_grid(s, t / "c.pgm");
    const auto pgm = read_file(t / "c.pgm");
    EXPECT_NE(std::string(pgm.begin(), pgm.end()).find("# seed = 7\n"), std::string::npos);
}

TEST(Grid, TilePlacementAndClamp)
{
    SyntheticSet s;
    s.classes = 2;
    s.ipc = 2;
    s.images = Tensor<float>(Shape{4, 3, 2, 2});
    s.labels = even_labels(2, 2);
    s.mean = {0, 0, 0};
    s.std = {1, 1, 1};
    s.images.at(3, 1, 0, 0) = 2.0f;
    s.images.at(2, 0, 1, 1) = -1.0f;
    s.images.at(1, 2, 0, 1) = 0.5f;
    GridImage g = make_grid(s);
    EXPECT_EQ(g.channels, 3);
    auto px = [&](int y, int x, int c) { return g.pixels[(static_cast<std::size_t>(y) * g.width + x) * 3 + c]; };
    EXPECT_EQ(px(2, 2, 1), 255);
    EXPECT_EQ(px(3, 1, 0), 0);
    EXPECT_EQ(px(0, 3, 2), 128);
}

TEST(Grid, SingleTileAndPpm)
{
    SyntheticSet s;
    s.classes = 1;
    s.ipc = 1;
    s.images = Tensor<float>(Shape{1, 1, 3, 4});
    s.labels = {0};
    s.mean = {0.5f};
    s.std = {1.f};
    TempDir t;
    GridImage g = export_grid(s, t / "one.pgm");
    EXPECT_EQ(g.width, 4);
    EXPECT_EQ(g.height, 3);
    std::ifstream in(t / "one.pgm", std::ios::binary);
    std::string magic;
    in >> magic;
    EXPECT_EQ(magic, "P5");
    SyntheticSet empty;
    EXPECT_THROW(make_grid(empty), DataError);
}

TEST(RealData, BundledMnistSubset)
{
    const fs::path dir = fs::path(DSA_TEST_DATA_DIR) / "mnist5k";
    if (!fs::exists(dir)) GTEST_SKIP() << "no " << dir;
    Dataset d = load_dataset("mnist5k", DSA_TEST_DATA_DIR);
    EXPECT_EQ(d.train_x.shape(), (Shape{4000, 1, 28, 28}));
    EXPECT_EQ(d.test_x.shape(), (Shape{1000, 1, 28, 28}));
    for (const auto& c : d.class_index()) EXPECT_EQ(c.size(), 400u);
    EXPECT_TRUE(d.digits);
    EXPECT_NEAR(d.mean[0], 0.13, 0.01);
}

TEST(RealData, FullMnist)
{
    const fs::path root = data_root(std::getenv("DSA_DATA_ROOT") ? "" : DSA_TEST_DATA_DIR);
    if (!fs::exists(root / "mnist")) GTEST_SKIP() << "no MNIST under " << root;
    Dataset d = load_dataset("mnist", root);
    EXPECT_EQ(d.train_x.shape(), (Shape{60000, 1, 28, 28}));
    EXPECT_EQ(d.test_size(), 10000);
}

TEST(RealData, FullCifar10)
{
    const fs::path root = data_root(std::getenv("DSA_DATA_ROOT") ? "" : DSA_TEST_DATA_DIR);
    if (!fs::exists(root / "cifar-10-batches-bin")) GTEST_SKIP() << "no CIFAR-10 under " << root;
    Dataset d = load_dataset("cifar10", root);
    EXPECT_EQ(d.train_size(), 50000);
    EXPECT_EQ(d.test_size(), 10000);
    EXPECT_EQ(d.classes, 10);
}

TEST(RealData, UnknownNameIsConfigError) { EXPECT_THROW(load_dataset("imagenet", "data"), ConfigError); }
