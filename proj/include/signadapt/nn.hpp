#pragma once

// Minimal dense/convolutional building blocks with hand-written backward passes.
//
// Feature maps are stored channel-major: one row per channel, one column per
// (sample, y, x) position, sample-major then row-major inside a sample. All
// convolutions lower to a single GEMM over the whole batch through im2col.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace signadapt::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using Vector = Eigen::VectorXd;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

struct ConvShape {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 4;
    int stride = 2;
    int padding = 1;

    int conv_out(int in) const { return (in + 2 * padding - kernel) / stride + 1; }
    int transposed_out(int in) const { return (in - 1) * stride - 2 * padding + kernel; }
};

/// Spatial extent of a batch of feature maps.
struct Extent {
    int batch = 0;
    int height = 0;
    int width = 0;

    long positions() const { return static_cast<long>(batch) * height * width; }
};

/// Unfold (C × B·H·W) into (C·k·k × B·Ho·Wo) for the window geometry of `shape`.
Matrix im2col(const Matrix& input, const Extent& in, const Extent& out, const ConvShape& shape, int channels);
/// Adjoint of im2col: scatter-add columns back into a (C × B·H·W) map.
Matrix col2im(const Matrix& cols, const Extent& image, const Extent& windows, const ConvShape& shape,
              int channels);

struct ConvCache {
    Matrix cols;
    Extent in;
    Extent out;
};

/// Strided convolution. weight: out × (in·k·k), bias: out.
Matrix conv_forward(ConstMatrixMap weight, ConstVectorMap bias, const Matrix& input, const Extent& in,
                    const ConvShape& shape, ConvCache& cache);
/// Accumulates into grad_weight/grad_bias; returns d(input) when `want_input_grad`.
Matrix conv_backward(ConstMatrixMap weight, const Matrix& grad_output, const ConvCache& cache,
                     const ConvShape& shape, MatrixMap grad_weight, VectorMap grad_bias, bool want_input_grad);

struct DeconvCache {
    Matrix input;
    Extent in;
    Extent out;
};

/// Transposed convolution (adjoint of conv_forward's linear part). weight: in × (out·k·k).
Matrix deconv_forward(ConstMatrixMap weight, ConstVectorMap bias, const Matrix& input, const Extent& in,
                      const ConvShape& shape, DeconvCache& cache);
Matrix deconv_backward(ConstMatrixMap weight, const Matrix& grad_output, const DeconvCache& cache,
                       const ConvShape& shape, MatrixMap grad_weight, VectorMap grad_bias);

/// ELU with alpha = 1, applied in place.
void elu(Matrix& x);
/// Multiplies `grad` by ELU'(x), expressed through the activated output y.
void elu_backward(const Matrix& activated, Matrix& grad);

/// Numerically stable log(1 + e^x).
double softplus(double x);
double sigmoid(double x);

/// Column-wise softmax of a (K × B) logit matrix.
Matrix softmax_columns(const Matrix& logits);

/// Named view into a flat parameter vector.
struct ParameterSlot {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::size_t offset = 0;
    std::size_t count = 0;

    long rows() const { return dims.empty() ? 1 : static_cast<long>(dims.front()); }
    long cols() const { return count == 0 ? 0 : static_cast<long>(count) / rows(); }
};

/// Layout of a flat parameter vector: slots are contiguous and in insertion order.
class ParameterLayout {
public:
    std::size_t add(std::string name, std::vector<std::uint32_t> dims);

    const std::vector<ParameterSlot>& slots() const noexcept { return slots_; }
    const ParameterSlot& slot(std::size_t i) const { return slots_.at(i); }
    std::size_t total() const noexcept { return total_; }
    /// Index of a slot by name; throws ConfigError when absent.
    std::size_t find(const std::string& name) const;

    MatrixMap matrix(std::size_t i, std::span<double> storage) const;
    ConstMatrixMap matrix(std::size_t i, std::span<const double> storage) const;
    VectorMap vector(std::size_t i, std::span<double> storage) const;
    ConstVectorMap vector(std::size_t i, std::span<const double> storage) const;

    friend bool operator==(const ParameterLayout& a, const ParameterLayout& b);

private:
    std::vector<ParameterSlot> slots_;
    std::size_t total_ = 0;
};

bool operator==(const ParameterSlot& a, const ParameterSlot& b);

/// SGD with classical momentum: v <- m·v + g; w <- w - lr·v.
class MomentumSgd {
public:
    MomentumSgd(std::size_t size, double momentum) : velocity_(size, 0.0), momentum_(momentum) {}

    void step(std::span<double> weights, std::span<const double> grads, double learning_rate);

private:
    std::vector<double> velocity_;
    double momentum_;
};

}  // namespace signadapt::nn
