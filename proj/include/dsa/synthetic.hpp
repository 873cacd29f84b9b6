#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsa/core/tensor.hpp"

namespace dsa {

/// The learnable set S: ipc images per class, labels fixed in class-major order.
struct SyntheticSet {
    Tensor<float> images;              // (classes*ipc, C, H, W), normalized
    std::vector<int> labels;
    int classes = 0;
    int ipc = 0;
    std::vector<float> mean, std;      // per-channel normalization the pixels live in
    std::string config;                // resolved config the set was produced with
    std::vector<double> loss_trace;    // one entry per outer iteration

    /// Rows [c*ipc, (c+1)*ipc) belong to class c.
    int first_of(int c) const { return c * ipc; }

    bool operator==(const SyntheticSet&) const = default;
};

inline std::vector<int> even_labels(int classes, int ipc)
{
    std::vector<int> y;
    y.reserve(static_cast<std::size_t>(classes) * ipc);
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < ipc; ++i) y.push_back(c);
    return y;
}

} // namespace dsa
