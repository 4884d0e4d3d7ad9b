#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sca/errors.hpp"

namespace sca {

#ifdef SCA_SCALAR32
using scalar = float;
inline constexpr int kScalarBits = 32;
#else
using scalar = double;
inline constexpr int kScalarBits = 64;
#endif

// Batch x channel x height x width.
struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    bool operator==(const Shape4&) const = default;
    std::int64_t count() const {
        return std::int64_t(n) * c * h * w;
    }
    std::string str() const;
};

// Dense rank-4 array, contiguous row-major in (n, c, h, w).
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(Shape4 s, scalar fill = scalar(0))
        : shape_(s), data_(static_cast<std::size_t>(s.count()), fill) {}
    Tensor4(int n, int c, int h, int w, scalar fill = scalar(0))
        : Tensor4(Shape4{n, c, h, w}, fill) {}

    static Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.shape_); }

    const Shape4& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    scalar* data() { return data_.data(); }
    const scalar* data() const { return data_.data(); }

    std::int64_t index(int n, int c, int y, int x) const {
        return ((std::int64_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    scalar& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
    scalar at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

    // Pointer to the (h x w) plane of one sample/channel.
    scalar* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
    const scalar* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

    void fill(scalar v) { data_.assign(data_.size(), v); }

    bool same_shape(const Tensor4& o) const { return shape_ == o.shape_; }

private:
    Shape4 shape_{};
    std::vector<scalar> data_;
};

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* where);

// Throws NumericError if any element is NaN/Inf. Kernels call this through
// SCA_CHECK_FINITE, which compiles out in release builds.
void check_finite(const Tensor4& t, const char* where);

#ifndef NDEBUG
#define SCA_CHECK_FINITE(t, where) ::sca::check_finite((t), (where))
#else
#define SCA_CHECK_FINITE(t, where) ((void)0)
#endif

}  // namespace sca
