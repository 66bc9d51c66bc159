#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <vector>

// GEMM-backed convolution kernels (im2col) used by the tape.

namespace evseg::ad::kernels {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

struct ConvGeometry {
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t height;
    std::size_t width;
    std::size_t kernel;  // square, odd; zero padding keeps spatial size

    std::size_t patch() const { return in_channels * kernel * kernel; }
    std::size_t pixels() const { return height * width; }
};

// cols is [C*k*k, H*W]; every entry is written (zero where the window leaves the image).
inline void im2col(const ConvGeometry& g, const double* input, std::vector<double>& cols) {
    const std::size_t pixels = g.pixels();
    cols.resize(g.patch() * pixels);
    const long pad = static_cast<long>(g.kernel / 2);
    const long h = static_cast<long>(g.height);
    const long w = static_cast<long>(g.width);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* plane = input + c * pixels;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                double* dst = cols.data() + row * pixels;
                const long dy = static_cast<long>(ki) - pad;
                const long dx = static_cast<long>(kj) - pad;
                const long x0 = std::max(0L, -dx);
                const long x1 = std::min(w, w - dx);
                for (long y = 0; y < h; ++y) {
                    double* out = dst + y * w;
                    const long sy = y + dy;
                    if (sy < 0 || sy >= h) {
                        std::fill(out, out + w, 0.0);
                        continue;
                    }
                    const double* src = plane + sy * w;
                    for (long x = 0; x < x0; ++x) out[x] = 0.0;
                    for (long x = x0; x < x1; ++x) out[x] = src[x + dx];
                    for (long x = x1; x < w; ++x) out[x] = 0.0;
                }
            }
        }
    }
}

inline void col2im_accumulate(const ConvGeometry& g, const std::vector<double>& cols, double* input_grad) {
    const std::size_t pixels = g.pixels();
    const long pad = static_cast<long>(g.kernel / 2);
    const long h = static_cast<long>(g.height);
    const long w = static_cast<long>(g.width);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        double* plane = input_grad + c * pixels;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                const double* src = cols.data() + row * pixels;
                const long dy = static_cast<long>(ki) - pad;
                const long dx = static_cast<long>(kj) - pad;
                for (long y = 0; y < h; ++y) {
                    const long sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    const long x0 = std::max(0L, -dx);
                    const long x1 = std::min(w, w - dx);
                    double* dst = plane + sy * w;
                    const double* in = src + y * w;
                    for (long x = x0; x < x1; ++x) dst[x + dx] += in[x];
                }
            }
        }
    }
}

inline void conv2d_forward(const ConvGeometry& g, const double* input, const double* weight, const double* bias,
                           double* output) {
    thread_local std::vector<double> cols;
    im2col(g, input, cols);
    ConstMatrixMap w(weight, static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch()));
    ConstMatrixMap x(cols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
    MatrixMap y(output, static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.pixels()));
    y.noalias() = w * x;
    if (bias) {
        for (std::size_t o = 0; o < g.out_channels; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
}

// Any of the gradient outputs may be null when that input does not need a gradient.
inline void conv2d_backward(const ConvGeometry& g, const double* input, const double* weight, const double* grad_out,
                            double* grad_input, double* grad_weight, double* grad_bias) {
    const auto out_c = static_cast<Eigen::Index>(g.out_channels);
    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto pixels = static_cast<Eigen::Index>(g.pixels());
    ConstMatrixMap dy(grad_out, out_c, pixels);
    thread_local std::vector<double> cols;
    if (grad_weight) {
        im2col(g, input, cols);
        ConstMatrixMap x(cols.data(), patch, pixels);
        MatrixMap dw(grad_weight, out_c, patch);
        dw.noalias() += dy * x.transpose();
    }
    if (grad_bias) {
        // plain loop: Eigen's vectorised sum peels by address, which would make results
        // depend on where the allocator put the buffer
        for (Eigen::Index o = 0; o < out_c; ++o) {
            double acc = 0.0;
            for (const double* p = grad_out + o * pixels; p != grad_out + (o + 1) * pixels; ++p) acc += *p;
            grad_bias[o] += acc;
        }
    }
    if (grad_input) {
        ConstMatrixMap w(weight, out_c, patch);
        cols.resize(g.patch() * g.pixels());
        MatrixMap dx(cols.data(), patch, pixels);
        dx.noalias() = w.transpose() * dy;
        col2im_accumulate(g, cols, grad_input);
    }
}

}  // namespace evseg::ad::kernels
