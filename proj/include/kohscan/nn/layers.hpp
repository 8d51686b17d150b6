#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kohscan/nn/tensor.hpp"
#include "kohscan/util/rng.hpp"

namespace kohscan::nn {

enum class Mode { inference, training };

enum class Padding { valid, same };

/// A named parameter tensor. Non-trainable entries (batch-norm running
/// statistics) are serialized and counted but receive no gradient.
struct Param {
    std::string name;
    Shape shape;
    bool trainable = true;
    Tensor value;
    Tensor grad;
};

/// Per-layer scratch recorded by a training-mode forward pass.
struct LayerTape {
    std::vector<double> aux;
    std::vector<std::uint32_t> index;
};

class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string_view kind() const = 0;

    /// Per-sample output shape for the given per-sample input shapes; throws on mismatch.
    virtual Shape output_shape(std::span<const Shape> inputs) const = 0;

    /// Inputs and output are batched (leading N). `tape` is non-null in training passes.
    virtual void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode,
                         LayerTape* tape) const = 0;

    /// Writes input gradients into din (entries may be null) and accumulates parameter gradients.
    virtual void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                          std::span<Tensor* const> din, const LayerTape& tape) = 0;

    /// Applies training-time state updates recorded in the tape.
    virtual void update_state(const LayerTape& /*tape*/) {}
    /// Sets running state to the mean of the batch statistics seen so far;
    /// `seen` counts earlier batches (0 restarts the average).
    virtual void average_state(const LayerTape& /*tape*/, std::size_t /*seen*/) {}

    /// Allocates and initialises parameter values (and gradients for trainable ones).
    virtual void initialize(Rng& /*rng*/) {}

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    std::size_t parameter_count() const;
    std::size_t trainable_parameter_count() const;

protected:
    std::vector<Param> params_;
};

class Conv2D final : public Layer {
public:
    Conv2D(std::size_t in_channels, std::size_t filters, std::size_t kernel_h, std::size_t kernel_w,
           std::size_t stride_h, std::size_t stride_w, Padding padding, bool use_bias);

    std::string_view kind() const override { return "conv2d"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
    void initialize(Rng& rng) override;

    std::size_t filters() const { return filters_; }

private:
    struct Geometry {
        std::size_t h, w, c, oh, ow, pad_top, pad_left;
    };
    Geometry geometry(const Shape& batch_shape) const;
    void im2col(const double* x, const Geometry& g, std::size_t row0, std::size_t rows, double* col) const;
    void col2im(const double* col, const Geometry& g, std::size_t row0, std::size_t rows, double* dx) const;
    bool pointwise() const;

    std::size_t in_channels_, filters_, kh_, kw_, sh_, sw_;
    Padding padding_;
    bool use_bias_;
};

/// Batch normalisation without a learned scale (offset only), channel-last.
class BatchNorm final : public Layer {
public:
    explicit BatchNorm(std::size_t channels, double epsilon = 1e-3, double momentum = 0.99);

    std::string_view kind() const override { return "batchnorm"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
    void update_state(const LayerTape& tape) override;
    void average_state(const LayerTape& tape, std::size_t seen) override;
    void initialize(Rng& rng) override;

private:
    std::size_t channels_;
    double epsilon_, momentum_;
};

class Relu final : public Layer {
public:
    std::string_view kind() const override { return "relu"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

class MaxPool2D final : public Layer {
public:
    MaxPool2D(std::size_t size, std::size_t stride, Padding padding);

    std::string_view kind() const override { return "maxpool2d"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;

private:
    std::size_t size_, stride_;
    Padding padding_;
};

/// Average pooling; with same padding the divisor counts only in-bounds cells.
class AvgPool2D final : public Layer {
public:
    AvgPool2D(std::size_t size, std::size_t stride, Padding padding);

    std::string_view kind() const override { return "avgpool2d"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;

private:
    std::size_t size_, stride_;
    Padding padding_;
};

class GlobalAvgPool final : public Layer {
public:
    std::string_view kind() const override { return "global_avgpool"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

/// Per-channel maximum over all spatial positions (first maximum wins ties).
class GlobalMaxPool final : public Layer {
public:
    std::string_view kind() const override { return "global_maxpool"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

class Flatten final : public Layer {
public:
    std::string_view kind() const override { return "flatten"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

class Dense final : public Layer {
public:
    Dense(std::size_t in_features, std::size_t units);

    std::string_view kind() const override { return "dense"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
    void initialize(Rng& rng) override;

    std::size_t units() const { return units_; }

private:
    std::size_t in_features_, units_;
};

/// Channel-axis concatenation of inputs with equal spatial shape.
class Concat final : public Layer {
public:
    std::string_view kind() const override { return "concat"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

class Softmax final : public Layer {
public:
    std::string_view kind() const override { return "softmax"; }
    Shape output_shape(std::span<const Shape> inputs) const override;
    void forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const override;
    void backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                  std::span<Tensor* const> din, const LayerTape& tape) override;
};

}  // namespace kohscan::nn
