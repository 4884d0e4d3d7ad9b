#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "sca/tensor.hpp"

namespace sca {

// Bias-free convolution: pruned channels must contribute exact zeros
// downstream, which a bias term would leak past the mask.
struct ConvParams {
    Tensor4 weight;  // (c_out, c_in, k, k), k odd
    int stride = 1;
    int pad = 0;
};

void validate_conv(const Tensor4& weight, int stride, int pad);
// Output spatial size for an input of (h, w); throws on non-integer result.
std::pair<int, int> conv_out_hw(int h, int w, int k, int stride, int pad);

Tensor4 conv2d_forward(const Tensor4& input, const Tensor4& weight, int stride, int pad);
inline Tensor4 conv2d_forward(const Tensor4& input, const ConvParams& p) {
    return conv2d_forward(input, p.weight, p.stride, p.pad);
}

// Accumulates the weight gradient into d_weight_acc (+=); d_input may be
// null when the input gradient is not needed (first layer).
void conv2d_backward(const Tensor4& input, const Tensor4& weight, int stride, int pad,
                     const Tensor4& d_out, Tensor4* d_input, Tensor4& d_weight_acc);

struct ConvGrads {
    Tensor4 d_input, d_weight;
};
ConvGrads conv2d_backward(const Tensor4& input, const ConvParams& p, const Tensor4& d_out);

struct BNParams {
    std::vector<scalar> gamma, beta, running_mean, running_var;
    scalar eps = scalar(1e-5);
    scalar momentum = scalar(0.1);

    explicit BNParams(int channels = 0)
        : gamma(channels, scalar(1)), beta(channels, scalar(0)),
          running_mean(channels, scalar(0)), running_var(channels, scalar(1)) {}
    int channels() const { return int(gamma.size()); }
};

enum class BNMode {
    Train,  // batch statistics, running stats updated
    Eval,   // running statistics
    Score,  // batch statistics, running stats untouched (importance passes)
};

struct BNCache {
    std::vector<double> mean, inv_std;  // per channel
    std::int64_t m = 0;                 // elements per channel in the batch
};

// Statistics are taken over every tensor in xs jointly (batch x time when the
// caller passes all T step tensors), one (gamma, beta) per channel.
BNCache batchnorm_forward(std::span<const Tensor4> xs, BNParams& p, BNMode mode,
                          std::span<Tensor4> ys);

void batchnorm_backward(std::span<const Tensor4> xs, const BNCache& cache, const BNParams& p,
                        std::span<const Tensor4> d_ys, std::span<Tensor4> d_xs,
                        std::vector<scalar>& d_gamma, std::vector<scalar>& d_beta);

// Non-overlapping 2x2 mean pooling; spatial dims must be even.
Tensor4 avgpool2_forward(const Tensor4& input);
Tensor4 avgpool2_backward(const Tensor4& d_out);

// x: (n, f, 1, 1), weight: (out, f, 1, 1), y = x . W^T. Bias-free.
Tensor4 linear_forward(const Tensor4& x, const Tensor4& weight);
void linear_backward(const Tensor4& x, const Tensor4& weight, const Tensor4& d_out,
                     Tensor4* d_x, Tensor4& d_weight_acc);

std::int64_t count_nonzero(const Tensor4& t);

}  // namespace sca
