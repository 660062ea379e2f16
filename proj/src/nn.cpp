#include "signadapt/nn.hpp"

#include <cmath>
#include <numeric>
#include <utility>

#include "signadapt/errors.hpp"

namespace signadapt::nn {

namespace {

// Output columns [lo, hi) whose input column ox*stride - pad + kj lies inside [0, width).
std::pair<int, int> valid_range(int out_width, int in_width, int stride, int pad, int kj) {
    int lo = 0;
    while (lo < out_width && lo * stride - pad + kj < 0) ++lo;
    int hi = out_width;
    while (hi > lo && (hi - 1) * stride - pad + kj >= in_width) --hi;
    return {lo, hi};
}

}  // namespace

Matrix im2col(const Matrix& input, const Extent& in, const Extent& out, const ConvShape& shape, int channels) {
    const int k = shape.kernel;
    const int s = shape.stride;
    Matrix cols(static_cast<long>(channels) * k * k, out.positions());
    const long in_plane = static_cast<long>(in.height) * in.width;
    const long out_plane = static_cast<long>(out.height) * out.width;
    for (int c = 0; c < channels; ++c) {
        const double* src_channel = input.data() + static_cast<long>(c) * input.cols();
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                double* row = cols.data() + ((static_cast<long>(c) * k + ki) * k + kj) * cols.cols();
                const auto [lo, hi] = valid_range(out.width, in.width, s, shape.padding, kj);
                const int offset = kj - shape.padding;
                for (int b = 0; b < out.batch; ++b) {
                    const double* src = src_channel + b * in_plane;
                    double* dst = row + b * out_plane;
                    for (int oy = 0; oy < out.height; ++oy) {
                        const int iy = oy * s - shape.padding + ki;
                        double* dst_row = dst + static_cast<long>(oy) * out.width;
                        if (iy < 0 || iy >= in.height) {
                            std::fill(dst_row, dst_row + out.width, 0.0);
                            continue;
                        }
                        const double* src_row = src + static_cast<long>(iy) * in.width + offset;
                        for (int ox = 0; ox < lo; ++ox) dst_row[ox] = 0.0;
                        for (int ox = lo; ox < hi; ++ox) dst_row[ox] = src_row[ox * s];
                        for (int ox = hi; ox < out.width; ++ox) dst_row[ox] = 0.0;
                    }
                }
            }
        }
    }
    return cols;
}

Matrix col2im(const Matrix& cols, const Extent& image, const Extent& windows, const ConvShape& shape,
              int channels) {
    const int k = shape.kernel;
    const int s = shape.stride;
    Matrix result = Matrix::Zero(channels, image.positions());
    const long in_plane = static_cast<long>(image.height) * image.width;
    const long out_plane = static_cast<long>(windows.height) * windows.width;
    for (int c = 0; c < channels; ++c) {
        double* dst_channel = result.data() + static_cast<long>(c) * result.cols();
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const double* row = cols.data() + ((static_cast<long>(c) * k + ki) * k + kj) * cols.cols();
                const auto [lo, hi] = valid_range(windows.width, image.width, s, shape.padding, kj);
                const int offset = kj - shape.padding;
                for (int b = 0; b < windows.batch; ++b) {
                    double* dst = dst_channel + b * in_plane;
                    const double* src = row + b * out_plane;
                    for (int oy = 0; oy < windows.height; ++oy) {
                        const int iy = oy * s - shape.padding + ki;
                        if (iy < 0 || iy >= image.height) continue;
                        double* dst_row = dst + static_cast<long>(iy) * image.width + offset;
                        const double* src_row = src + static_cast<long>(oy) * windows.width;
                        for (int ox = lo; ox < hi; ++ox) dst_row[ox * s] += src_row[ox];
                    }
                }
            }
        }
    }
    return result;
}

Matrix conv_forward(ConstMatrixMap weight, ConstVectorMap bias, const Matrix& input, const Extent& in,
                    const ConvShape& shape, ConvCache& cache) {
    cache.in = in;
    cache.out = {in.batch, shape.conv_out(in.height), shape.conv_out(in.width)};
    cache.cols = im2col(input, cache.in, cache.out, shape, shape.in_channels);
    Matrix output(shape.out_channels, cache.out.positions());
    output.noalias() = weight * cache.cols;
    output.colwise() += bias;
    return output;
}

Matrix conv_backward(ConstMatrixMap weight, const Matrix& grad_output, const ConvCache& cache,
                     const ConvShape& shape, MatrixMap grad_weight, VectorMap grad_bias, bool want_input_grad) {
    grad_weight.noalias() += grad_output * cache.cols.transpose();
    grad_bias += grad_output.rowwise().sum();
    if (!want_input_grad) return {};
    Matrix grad_cols(weight.cols(), grad_output.cols());
    grad_cols.noalias() = weight.transpose() * grad_output;
    return col2im(grad_cols, cache.in, cache.out, shape, shape.in_channels);
}

Matrix deconv_forward(ConstMatrixMap weight, ConstVectorMap bias, const Matrix& input, const Extent& in,
                      const ConvShape& shape, DeconvCache& cache) {
    cache.input = input;
    cache.in = in;
    cache.out = {in.batch, shape.transposed_out(in.height), shape.transposed_out(in.width)};
    Matrix cols(weight.cols(), input.cols());
    cols.noalias() = weight.transpose() * input;
    Matrix output = col2im(cols, cache.out, cache.in, shape, shape.out_channels);
    output.colwise() += bias;
    return output;
}

Matrix deconv_backward(ConstMatrixMap weight, const Matrix& grad_output, const DeconvCache& cache,
                       const ConvShape& shape, MatrixMap grad_weight, VectorMap grad_bias) {
    const Matrix grad_cols = im2col(grad_output, cache.out, cache.in, shape, shape.out_channels);
    grad_weight.noalias() += cache.input * grad_cols.transpose();
    grad_bias += grad_output.rowwise().sum();
    Matrix grad_input(weight.rows(), grad_cols.cols());
    grad_input.noalias() = weight * grad_cols;
    return grad_input;
}

void elu(Matrix& x) {
    auto a = x.array();
    a = a.max(0.0) + (a.min(0.0).exp() - 1.0);
}

void elu_backward(const Matrix& activated, Matrix& grad) {
    const double* y = activated.data();
    double* g = grad.data();
    const long n = grad.size();
    for (long i = 0; i < n; ++i) {
        if (y[i] < 0.0) g[i] *= (y[i] + 1.0);
    }
}

double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (long j = 0; j < logits.cols(); ++j) {
        const double peak = logits.col(j).maxCoeff();
        double total = 0.0;
        for (long i = 0; i < logits.rows(); ++i) {
            out(i, j) = std::exp(logits(i, j) - peak);
            total += out(i, j);
        }
        out.col(j) /= total;
    }
    return out;
}

std::size_t ParameterLayout::add(std::string name, std::vector<std::uint32_t> dims) {
    const std::size_t count =
        std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                        [](std::size_t a, std::uint32_t b) { return a * static_cast<std::size_t>(b); });
    slots_.push_back({std::move(name), std::move(dims), total_, count});
    total_ += count;
    return slots_.size() - 1;
}

std::size_t ParameterLayout::find(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i].name == name) return i;
    }
    throw ConfigError("no parameter tensor named '" + name + "'");
}

MatrixMap ParameterLayout::matrix(std::size_t i, std::span<double> storage) const {
    const auto& s = slots_.at(i);
    return MatrixMap(storage.data() + s.offset, s.rows(), s.cols());
}

ConstMatrixMap ParameterLayout::matrix(std::size_t i, std::span<const double> storage) const {
    const auto& s = slots_.at(i);
    return ConstMatrixMap(storage.data() + s.offset, s.rows(), s.cols());
}

VectorMap ParameterLayout::vector(std::size_t i, std::span<double> storage) const {
    const auto& s = slots_.at(i);
    return VectorMap(storage.data() + s.offset, static_cast<long>(s.count));
}

ConstVectorMap ParameterLayout::vector(std::size_t i, std::span<const double> storage) const {
    const auto& s = slots_.at(i);
    return ConstVectorMap(storage.data() + s.offset, static_cast<long>(s.count));
}

bool operator==(const ParameterSlot& a, const ParameterSlot& b) {
    return a.name == b.name && a.dims == b.dims && a.offset == b.offset && a.count == b.count;
}

bool operator==(const ParameterLayout& a, const ParameterLayout& b) {
    return a.total_ == b.total_ && a.slots_ == b.slots_;
}

void MomentumSgd::step(std::span<double> weights, std::span<const double> grads, double learning_rate) {
    if (weights.size() != velocity_.size() || grads.size() != velocity_.size()) {
        throw ShapeError("optimizer state does not match parameter count");
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        velocity_[i] = momentum_ * velocity_[i] + grads[i];
        weights[i] -= learning_rate * velocity_[i];
    }
}

}  // namespace signadapt::nn
