#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsa/core/error.hpp"

namespace dsa {

using Shape = std::vector<int>;

inline constexpr int kMaxRank = 4;

inline std::size_t numel(const Shape& s)
{
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string to_string(const Shape& s)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Right-aligns a shape into four slots, filling leading dims with 1 (numpy broadcasting convention).
inline std::array<int, kMaxRank> pad4(const Shape& s)
{
    std::array<int, kMaxRank> out{1, 1, 1, 1};
    const std::size_t off = kMaxRank - s.size();
    for (std::size_t i = 0; i < s.size(); ++i) out[off + i] = s[i];
    return out;
}

/// Dense row-major array of rank <= 4. A rank-0 tensor holds one scalar.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape))
    {
        check_rank();
        data_.assign(numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data))
    {
        check_rank();
        if (data_.size() != numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape "
                             + to_string(shape_));
    }

    Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::vector<T>(values))
    { }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, T(0)); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const
    {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return data_[0];
    }

    /// NCHW element access; only valid for rank-4 tensors.
    T& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }

    Tensor reshaped(Shape s) const&
    {
        if (numel(s) != data_.size())
            throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(s));
        return Tensor(std::move(s), data_);
    }

    Tensor reshaped(Shape s) &&
    {
        if (numel(s) != data_.size())
            throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(s));
        return Tensor(std::move(s), std::move(data_));
    }

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    void check_rank() const
    {
        if (shape_.size() > kMaxRank) throw ShapeError("rank > 4 not supported: " + to_string(shape_));
        for (int d : shape_)
            if (d < 0) throw ShapeError("negative dimension in " + to_string(shape_));
    }

    std::size_t offset4(int n, int c, int h, int w) const
    {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    Shape shape_;
    std::vector<T> data_;
};

} // namespace dsa
