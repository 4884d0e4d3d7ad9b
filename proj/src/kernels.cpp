#include "sca/kernels.hpp"

#include <cmath>
#include <cstring>

#include "sca/parallel.hpp"

namespace sca {

void validate_conv(const Tensor4& weight, int stride, int pad) {
    if (weight.h() != weight.w()) {
        throw ShapeError("conv kernel must be square, got " + weight.shape().str());
    }
    const int k = weight.h();
    if (k % 2 == 0 || k < 1) {
        throw ShapeError("conv kernel size must be odd, got " + std::to_string(k));
    }
    if (stride < 1) throw ShapeError("conv stride must be positive");
    if (pad < 0) throw ShapeError("conv pad must be non-negative");
}

std::pair<int, int> conv_out_hw(int h, int w, int k, int stride, int pad) {
    auto one = [&](int d) {
        int num = d + 2 * pad - k;
        if (num < 0 || num % stride != 0) {
            throw ShapeError("conv output size not integral for input dim " + std::to_string(d) +
                             " (k=" + std::to_string(k) + " stride=" + std::to_string(stride) +
                             " pad=" + std::to_string(pad) + ")");
        }
        return num / stride + 1;
    };
    return {one(h), one(w)};
}

namespace {

struct NonzeroList {
    // Flat (iy, ix, value) triples for one input plane.
    std::vector<int> pos;       // iy * iw + ix
    std::vector<scalar> val;
    void collect(const scalar* plane, int ih, int iw) {
        pos.clear();
        val.clear();
        const int total = ih * iw;
        for (int i = 0; i < total; ++i) {
            if (plane[i] != scalar(0)) {
                pos.push_back(i);
                val.push_back(plane[i]);
            }
        }
    }
};

}  // namespace

Tensor4 conv2d_forward(const Tensor4& input, const Tensor4& weight, int stride, int pad) {
    validate_conv(weight, stride, pad);
    if (input.c() != weight.c()) {
        throw ShapeError("conv2d_forward: input channels " + input.shape().str() +
                         " vs weight " + weight.shape().str());
    }
    const int k = weight.h();
    auto [oh, ow] = conv_out_hw(input.h(), input.w(), k, stride, pad);
    Tensor4 out(input.n(), weight.n(), oh, ow);

    const int ih = input.h(), iw = input.w();
    const int c_in = weight.c(), c_out = weight.n();
    const scalar* wdata = weight.data();

    // Input-major with zero skipping: every nonzero input element scatters a
    // k x k stencil into each output channel. Skipped zeros contribute exact
    // +0.0 terms, so the result is bit-identical to the unskipped loop; whole
    // pruned channels cost one scan.
    parallel_for(0, input.n(), [&](std::int64_t n0, std::int64_t n1) {
        NonzeroList nz;
        for (int n = int(n0); n < int(n1); ++n) {
            for (int ci = 0; ci < c_in; ++ci) {
                nz.collect(input.plane(n, ci), ih, iw);
                if (nz.pos.empty()) continue;
                for (int co = 0; co < c_out; ++co) {
                    const scalar* wk = wdata + (std::int64_t(co) * c_in + ci) * k * k;
                    scalar* oplane = out.plane(n, co);
                    for (std::size_t i = 0; i < nz.pos.size(); ++i) {
                        const int iy = nz.pos[i] / iw, ix = nz.pos[i] % iw;
                        const scalar v = nz.val[i];
                        for (int ky = 0; ky < k; ++ky) {
                            const int ty = iy + pad - ky;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int oy = ty / stride;
                            if (oy >= oh) continue;
                            scalar* orow = oplane + std::int64_t(oy) * ow;
                            const scalar* wrow = wk + ky * k;
                            for (int kx = 0; kx < k; ++kx) {
                                const int tx = ix + pad - kx;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ox = tx / stride;
                                if (ox >= ow) continue;
                                orow[ox] += wrow[kx] * v;
                            }
                        }
                    }
                }
            }
        }
    });
    SCA_CHECK_FINITE(out, "conv2d_forward");
    return out;
}

void conv2d_backward(const Tensor4& input, const Tensor4& weight, int stride, int pad,
                     const Tensor4& d_out, Tensor4* d_input, Tensor4& d_weight_acc) {
    validate_conv(weight, stride, pad);
    const int k = weight.h();
    auto [oh, ow] = conv_out_hw(input.h(), input.w(), k, stride, pad);
    if (d_out.shape() != Shape4{input.n(), weight.n(), oh, ow}) {
        throw ShapeError("conv2d_backward: d_out shape " + d_out.shape().str() +
                         " does not match forward output (" + std::to_string(input.n()) + "," +
                         std::to_string(weight.n()) + "," + std::to_string(oh) + "," +
                         std::to_string(ow) + ")");
    }
    if (!d_weight_acc.same_shape(weight)) {
        throw ShapeError("conv2d_backward: d_weight accumulator shape " +
                         d_weight_acc.shape().str() + " vs weight " + weight.shape().str());
    }

    const int ih = input.h(), iw = input.w();
    const int c_in = weight.c(), c_out = weight.n();

    // d_weight, input-major: dW[co][ci][ky][kx] += x[ci][iy][ix] * dY[co][oy][ox].
    // Partitioned over ci so each accumulator slice has a single fixed-order
    // writer regardless of thread count.
    parallel_for(0, c_in, [&](std::int64_t ci0, std::int64_t ci1) {
        NonzeroList nz;
        for (int ci = int(ci0); ci < int(ci1); ++ci) {
            for (int n = 0; n < input.n(); ++n) {
                nz.collect(input.plane(n, ci), ih, iw);
                if (nz.pos.empty()) continue;
                for (int co = 0; co < c_out; ++co) {
                    scalar* dwk = d_weight_acc.data() + (std::int64_t(co) * c_in + ci) * k * k;
                    const scalar* dplane = d_out.plane(n, co);
                    for (std::size_t i = 0; i < nz.pos.size(); ++i) {
                        const int iy = nz.pos[i] / iw, ix = nz.pos[i] % iw;
                        const scalar v = nz.val[i];
                        for (int ky = 0; ky < k; ++ky) {
                            const int ty = iy + pad - ky;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int oy = ty / stride;
                            if (oy >= oh) continue;
                            const scalar* drow = dplane + std::int64_t(oy) * ow;
                            scalar* dwrow = dwk + ky * k;
                            for (int kx = 0; kx < k; ++kx) {
                                const int tx = ix + pad - kx;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ox = tx / stride;
                                if (ox >= ow) continue;
                                dwrow[kx] += v * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    if (d_input != nullptr) {
        if (!d_input->same_shape(input)) *d_input = Tensor4::zeros_like(input);
        // Output-major scatter through the transposed stencil.
        parallel_for(0, input.n(), [&](std::int64_t n0, std::int64_t n1) {
            for (int n = int(n0); n < int(n1); ++n) {
                for (int co = 0; co < c_out; ++co) {
                    const scalar* dplane = d_out.plane(n, co);
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox) {
                            const scalar g = dplane[std::int64_t(oy) * ow + ox];
                            if (g == scalar(0)) continue;
                            const int iy0 = oy * stride - pad;
                            const int ix0 = ox * stride - pad;
                            for (int ci = 0; ci < c_in; ++ci) {
                                const scalar* wk =
                                    weight.data() + (std::int64_t(co) * c_in + ci) * k * k;
                                scalar* iplane = d_input->plane(n, ci);
                                for (int ky = 0; ky < k; ++ky) {
                                    const int iy = iy0 + ky;
                                    if (iy < 0 || iy >= ih) continue;
                                    scalar* irow = iplane + std::int64_t(iy) * iw;
                                    const scalar* wrow = wk + ky * k;
                                    for (int kx = 0; kx < k; ++kx) {
                                        const int ix = ix0 + kx;
                                        if (ix < 0 || ix >= iw) continue;
                                        irow[ix] += wrow[kx] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        SCA_CHECK_FINITE(*d_input, "conv2d_backward d_input");
    }
    SCA_CHECK_FINITE(d_weight_acc, "conv2d_backward d_weight");
}

ConvGrads conv2d_backward(const Tensor4& input, const ConvParams& p, const Tensor4& d_out) {
    ConvGrads g;
    g.d_input = Tensor4::zeros_like(input);
    g.d_weight = Tensor4::zeros_like(p.weight);
    conv2d_backward(input, p.weight, p.stride, p.pad, d_out, &g.d_input, g.d_weight);
    return g;
}

BNCache batchnorm_forward(std::span<const Tensor4> xs, BNParams& p, BNMode mode,
                          std::span<Tensor4> ys) {
    if (xs.empty() || xs[0].n() == 0) throw ShapeError("batchnorm_forward: zero batch");
    if (ys.size() != xs.size()) throw ShapeError("batchnorm_forward: output span size mismatch");
    const int C = p.channels();
    const int hw = xs[0].h() * xs[0].w();
    for (const auto& x : xs) {
        if (x.c() != C) {
            throw ShapeError("batchnorm_forward: input channels " + std::to_string(x.c()) +
                             " vs params " + std::to_string(C));
        }
        require_same_shape(x, xs[0], "batchnorm_forward");
    }
    for (std::size_t t = 0; t < xs.size(); ++t) {
        if (!ys[t].same_shape(xs[t])) ys[t] = Tensor4::zeros_like(xs[t]);
    }

    BNCache cache;
    cache.mean.assign(C, 0.0);
    cache.inv_std.assign(C, 0.0);
    cache.m = std::int64_t(xs.size()) * xs[0].n() * hw;

    if (mode == BNMode::Eval) {
        for (int c = 0; c < C; ++c) {
            cache.mean[c] = double(p.running_mean[c]);
            cache.inv_std[c] = 1.0 / std::sqrt(double(p.running_var[c]) + double(p.eps));
        }
    } else {
        // Population statistics over batch x time x spatial, per channel.
        parallel_for(0, C, [&](std::int64_t c0, std::int64_t c1) {
            for (int c = int(c0); c < int(c1); ++c) {
                double sum = 0.0, sumsq = 0.0;
                for (const auto& x : xs) {
                    for (int n = 0; n < x.n(); ++n) {
                        const scalar* plane = x.plane(n, c);
                        for (int i = 0; i < hw; ++i) {
                            const double v = double(plane[i]);
                            sum += v;
                            sumsq += v * v;
                        }
                    }
                }
                const double mean = sum / double(cache.m);
                double var = sumsq / double(cache.m) - mean * mean;
                if (var < 0.0) var = 0.0;  // guard tiny negative from cancellation
                cache.mean[c] = mean;
                cache.inv_std[c] = 1.0 / std::sqrt(var + double(p.eps));
                if (mode == BNMode::Train) {
                    p.running_mean[c] = scalar((1.0 - double(p.momentum)) * double(p.running_mean[c]) +
                                               double(p.momentum) * mean);
                    p.running_var[c] = scalar((1.0 - double(p.momentum)) * double(p.running_var[c]) +
                                              double(p.momentum) * var);
                }
            }
        });
    }

    parallel_for(0, C, [&](std::int64_t c0, std::int64_t c1) {
        for (int c = int(c0); c < int(c1); ++c) {
            const scalar a = scalar(double(p.gamma[c]) * cache.inv_std[c]);
            const scalar b = scalar(double(p.beta[c]) - double(p.gamma[c]) * cache.inv_std[c] * cache.mean[c]);
            for (std::size_t t = 0; t < xs.size(); ++t) {
                for (int n = 0; n < xs[t].n(); ++n) {
                    const scalar* xp = xs[t].plane(n, c);
                    scalar* yp = ys[t].plane(n, c);
                    for (int i = 0; i < hw; ++i) yp[i] = a * xp[i] + b;
                }
            }
        }
    });
    for (auto& y : ys) SCA_CHECK_FINITE(y, "batchnorm_forward");
    return cache;
}

void batchnorm_backward(std::span<const Tensor4> xs, const BNCache& cache, const BNParams& p,
                        std::span<const Tensor4> d_ys, std::span<Tensor4> d_xs,
                        std::vector<scalar>& d_gamma, std::vector<scalar>& d_beta) {
    const int C = p.channels();
    if (int(cache.mean.size()) != C) throw Error("batchnorm_backward: stale cache (channel count)");
    if (xs.size() != d_ys.size() || xs.empty()) {
        throw ShapeError("batchnorm_backward: step count mismatch");
    }
    const int hw = xs[0].h() * xs[0].w();
    if (cache.m != std::int64_t(xs.size()) * xs[0].n() * hw) {
        throw Error("batchnorm_backward: stale cache (element count)");
    }
    if (d_xs.size() != xs.size()) throw ShapeError("batchnorm_backward: d_x span size mismatch");
    for (std::size_t t = 0; t < xs.size(); ++t) {
        require_same_shape(xs[t], d_ys[t], "batchnorm_backward");
        if (!d_xs[t].same_shape(xs[t])) d_xs[t] = Tensor4::zeros_like(xs[t]);
    }
    d_gamma.assign(C, scalar(0));
    d_beta.assign(C, scalar(0));

    const double m = double(cache.m);
    parallel_for(0, C, [&](std::int64_t c0, std::int64_t c1) {
        for (int c = int(c0); c < int(c1); ++c) {
            const double mean = cache.mean[c], istd = cache.inv_std[c];
            double s_dy = 0.0, s_dyx = 0.0;
            for (std::size_t t = 0; t < xs.size(); ++t) {
                for (int n = 0; n < xs[t].n(); ++n) {
                    const scalar* xp = xs[t].plane(n, c);
                    const scalar* gp = d_ys[t].plane(n, c);
                    for (int i = 0; i < hw; ++i) {
                        const double xhat = (double(xp[i]) - mean) * istd;
                        s_dy += double(gp[i]);
                        s_dyx += double(gp[i]) * xhat;
                    }
                }
            }
            d_beta[c] = scalar(s_dy);
            d_gamma[c] = scalar(s_dyx);
            const double a = double(p.gamma[c]) * istd;
            for (std::size_t t = 0; t < xs.size(); ++t) {
                for (int n = 0; n < xs[t].n(); ++n) {
                    const scalar* xp = xs[t].plane(n, c);
                    const scalar* gp = d_ys[t].plane(n, c);
                    scalar* dp = d_xs[t].plane(n, c);
                    for (int i = 0; i < hw; ++i) {
                        const double xhat = (double(xp[i]) - mean) * istd;
                        dp[i] = scalar(a * (double(gp[i]) - s_dy / m - xhat * s_dyx / m));
                    }
                }
            }
        }
    });
    for (auto& d : d_xs) SCA_CHECK_FINITE(d, "batchnorm_backward");
}

Tensor4 avgpool2_forward(const Tensor4& input) {
    if (input.h() % 2 != 0 || input.w() % 2 != 0) {
        throw ShapeError("avgpool2: spatial dims must be even, got " + input.shape().str());
    }
    Tensor4 out(input.n(), input.c(), input.h() / 2, input.w() / 2);
    const int oh = out.h(), ow = out.w(), iw = input.w();
    parallel_for(0, std::int64_t(input.n()) * input.c(), [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t b = b0; b < b1; ++b) {
            const scalar* ip = input.data() + b * input.h() * iw;
            scalar* op = out.data() + b * oh * ow;
            for (int y = 0; y < oh; ++y) {
                const scalar* r0 = ip + std::int64_t(2 * y) * iw;
                const scalar* r1 = r0 + iw;
                for (int x = 0; x < ow; ++x) {
                    op[std::int64_t(y) * ow + x] =
                        (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * scalar(0.25);
                }
            }
        }
    });
    return out;
}

Tensor4 avgpool2_backward(const Tensor4& d_out) {
    Tensor4 d_in(d_out.n(), d_out.c(), d_out.h() * 2, d_out.w() * 2);
    const int oh = d_out.h(), ow = d_out.w(), iw = d_in.w();
    parallel_for(0, std::int64_t(d_out.n()) * d_out.c(), [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t b = b0; b < b1; ++b) {
            const scalar* gp = d_out.data() + b * oh * ow;
            scalar* ip = d_in.data() + b * std::int64_t(iw) * d_in.h();
            for (int y = 0; y < oh; ++y) {
                scalar* r0 = ip + std::int64_t(2 * y) * iw;
                scalar* r1 = r0 + iw;
                for (int x = 0; x < ow; ++x) {
                    const scalar g = gp[std::int64_t(y) * ow + x] * scalar(0.25);
                    r0[2 * x] = g;
                    r0[2 * x + 1] = g;
                    r1[2 * x] = g;
                    r1[2 * x + 1] = g;
                }
            }
        }
    });
    return d_in;
}

Tensor4 linear_forward(const Tensor4& x, const Tensor4& weight) {
    if (x.h() != 1 || x.w() != 1 || weight.h() != 1 || weight.w() != 1) {
        throw ShapeError("linear: expected flattened inputs, got x " + x.shape().str() +
                         " weight " + weight.shape().str());
    }
    if (x.c() != weight.c()) {
        throw ShapeError("linear: feature mismatch x " + x.shape().str() + " vs weight " +
                         weight.shape().str());
    }
    const int f = x.c(), out_n = weight.n();
    Tensor4 y(x.n(), out_n, 1, 1);
    parallel_for(0, x.n(), [&](std::int64_t n0, std::int64_t n1) {
        for (int n = int(n0); n < int(n1); ++n) {
            const scalar* xp = x.data() + std::int64_t(n) * f;
            scalar* yp = y.data() + std::int64_t(n) * out_n;
            for (int o = 0; o < out_n; ++o) {
                const scalar* wp = weight.data() + std::int64_t(o) * f;
                scalar acc = 0;
                for (int i = 0; i < f; ++i) acc += xp[i] * wp[i];
                yp[o] = acc;
            }
        }
    });
    SCA_CHECK_FINITE(y, "linear_forward");
    return y;
}

void linear_backward(const Tensor4& x, const Tensor4& weight, const Tensor4& d_out,
                     Tensor4* d_x, Tensor4& d_weight_acc) {
    if (d_out.n() != x.n() || d_out.c() != weight.n()) {
        throw ShapeError("linear_backward: d_out " + d_out.shape().str() + " vs x " +
                         x.shape().str() + " weight " + weight.shape().str());
    }
    if (!d_weight_acc.same_shape(weight)) {
        throw ShapeError("linear_backward: d_weight accumulator shape mismatch");
    }
    const int f = x.c(), out_n = weight.n();
    if (d_x != nullptr) {
        if (!d_x->same_shape(x)) *d_x = Tensor4::zeros_like(x);
        parallel_for(0, x.n(), [&](std::int64_t n0, std::int64_t n1) {
            for (int n = int(n0); n < int(n1); ++n) {
                const scalar* gp = d_out.data() + std::int64_t(n) * out_n;
                scalar* dp = d_x->data() + std::int64_t(n) * f;
                for (int o = 0; o < out_n; ++o) {
                    const scalar g = gp[o];
                    if (g == scalar(0)) continue;
                    const scalar* wp = weight.data() + std::int64_t(o) * f;
                    for (int i = 0; i < f; ++i) dp[i] += g * wp[i];
                }
            }
        });
    }
    parallel_for(0, out_n, [&](std::int64_t o0, std::int64_t o1) {
        for (int o = int(o0); o < int(o1); ++o) {
            scalar* dwp = d_weight_acc.data() + std::int64_t(o) * f;
            for (int n = 0; n < x.n(); ++n) {
                const scalar g = d_out.data()[std::int64_t(n) * out_n + o];
                if (g == scalar(0)) continue;
                const scalar* xp = x.data() + std::int64_t(n) * f;
                for (int i = 0; i < f; ++i) dwp[i] += g * xp[i];
            }
        }
    });
}

std::int64_t count_nonzero(const Tensor4& t) {
    std::int64_t nnz = 0;
    const scalar* p = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) nnz += (p[i] != scalar(0));
    return nnz;
}

}  // namespace sca
