#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>

#include "dsa/data_io.hpp"

namespace dsa::test {

/// `classes` classes of side×side single-channel images, each a noisy copy of a class template.
/// Both splits are balanced.
inline Dataset toy_dataset(int classes = 3, int train_per_class = 12, int test_per_class = 4, int side = 8,
                           std::uint64_t seed = 1)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.f, 255.f);
    std::normal_distribution<float> nd(0.f, 20.f);
    const int per = side * side;
    std::vector<std::vector<float>> proto(static_cast<std::size_t>(classes), std::vector<float>(static_cast<std::size_t>(per)));
    for (auto& p : proto)
        for (auto& v : p) v = u(rng);
    auto split = [&](int n) {
        RawImages r{Tensor<float>(Shape{classes * n, 1, side, side}), {}};
        for (int i = 0; i < classes * n; ++i) {
            const int c = i % classes;
            r.labels.push_back(c);
            for (int j = 0; j < per; ++j)
                r.pixels[static_cast<std::size_t>(i) * per + j] = std::clamp(proto[c][j] + nd(rng), 0.f, 255.f);
        }
        return r;
    };
    return make_dataset("toy", classes, split(train_per_class), split(test_per_class), true);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag = "dsa")
    {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path()
                / (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    std::filesystem::path operator/(const std::string& f) const { return path_ / f; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline bool have_mnist5k() { return std::filesystem::exists(std::filesystem::path(DSA_TEST_DATA_DIR) / "mnist5k"); }

} // namespace dsa::test
