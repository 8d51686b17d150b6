#include "kohscan/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "kohscan/simd/kernels.hpp"
#include "kohscan/util/error.hpp"

namespace kohscan::nn {
namespace {

using simd::kernels;
using simd::Trans;

// im2col scratch is bounded to roughly 8 MB per thread.
constexpr std::size_t kColumnBudget = std::size_t{1} << 20;

std::vector<double>& column_buffer() {
    thread_local std::vector<double> buf;
    return buf;
}

std::vector<double>& column_grad_buffer() {
    thread_local std::vector<double> buf;
    return buf;
}

struct AxisGeometry {
    std::size_t out;
    std::size_t pad_before;
};

AxisGeometry axis_geometry(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
    if (padding == Padding::same) {
        const std::size_t out = (in + stride - 1) / stride;
        const std::size_t needed = (out - 1) * stride + kernel;
        const std::size_t total = needed > in ? needed - in : 0;
        return {out, total / 2};
    }
    if (in < kernel) {
        throw PreconditionError("input extent " + std::to_string(in) + " smaller than window " + std::to_string(kernel));
    }
    return {(in - kernel) / stride + 1, 0};
}

void require_rank(const Shape& s, std::size_t rank, std::string_view layer) {
    if (s.size() != rank) {
        throw PreconditionError(std::string(layer) + " expects rank-" + std::to_string(rank) + " samples, got " +
                                to_string(s));
    }
}

void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
}

Param make_param(std::string name, Shape shape, bool trainable) {
    Param p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.trainable = trainable;
    return p;
}

void allocate(Param& p) {
    p.value = Tensor(p.shape);
    if (p.trainable) p.grad = Tensor(p.shape);
}

}  // namespace

std::size_t Layer::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += element_count(p.shape);
    return n;
}

std::size_t Layer::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.trainable) n += element_count(p.shape);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Conv2D

Conv2D::Conv2D(std::size_t in_channels, std::size_t filters, std::size_t kernel_h, std::size_t kernel_w,
               std::size_t stride_h, std::size_t stride_w, Padding padding, bool use_bias)
    : in_channels_(in_channels),
      filters_(filters),
      kh_(kernel_h),
      kw_(kernel_w),
      sh_(stride_h),
      sw_(stride_w),
      padding_(padding),
      use_bias_(use_bias) {
    if (in_channels == 0 || filters == 0 || kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0) {
        throw PreconditionError("conv2d dimensions must be positive");
    }
    params_.push_back(make_param("kernel", {kh_, kw_, in_channels_, filters_}, true));
    if (use_bias_) params_.push_back(make_param("bias", {filters_}, true));
}

Shape Conv2D::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 3, "conv2d");
    if (inputs[0][2] != in_channels_) {
        throw PreconditionError("conv2d expects " + std::to_string(in_channels_) + " channels, got " +
                                to_string(inputs[0]));
    }
    const auto gh = axis_geometry(inputs[0][0], kh_, sh_, padding_);
    const auto gw = axis_geometry(inputs[0][1], kw_, sw_, padding_);
    return {gh.out, gw.out, filters_};
}

void Conv2D::initialize(Rng& rng) {
    for (auto& p : params_) allocate(p);
    glorot_uniform(params_[0].value, kh_ * kw_ * in_channels_, kh_ * kw_ * filters_, rng);
}

bool Conv2D::pointwise() const { return kh_ == 1 && kw_ == 1 && sh_ == 1 && sw_ == 1; }

Conv2D::Geometry Conv2D::geometry(const Shape& s) const {
    const auto gh = axis_geometry(s[1], kh_, sh_, padding_);
    const auto gw = axis_geometry(s[2], kw_, sw_, padding_);
    return {s[1], s[2], s[3], gh.out, gw.out, gh.pad_before, gw.pad_before};
}

void Conv2D::im2col(const double* x, const Geometry& g, std::size_t row0, std::size_t rows, double* col) const {
    const std::size_t k = kh_ * kw_ * g.c;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t oy = (row0 + r) / g.ow;
        const std::size_t ox = (row0 + r) % g.ow;
        double* dst = col + r * k;
        for (std::size_t ky = 0; ky < kh_; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * sh_ + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
            for (std::size_t kx = 0; kx < kw_; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * sw_ + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) {
                    std::memset(dst, 0, g.c * sizeof(double));
                } else {
                    std::memcpy(dst, x + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c,
                                g.c * sizeof(double));
                }
                dst += g.c;
            }
        }
    }
}

void Conv2D::col2im(const double* col, const Geometry& g, std::size_t row0, std::size_t rows, double* dx) const {
    const std::size_t k = kh_ * kw_ * g.c;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t oy = (row0 + r) / g.ow;
        const std::size_t ox = (row0 + r) % g.ow;
        const double* src = col + r * k;
        for (std::size_t ky = 0; ky < kh_; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * sh_ + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
            for (std::size_t kx = 0; kx < kw_; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * sw_ + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
                if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) && ix < static_cast<std::ptrdiff_t>(g.w)) {
                    double* d = dx + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
                    for (std::size_t c = 0; c < g.c; ++c) d[c] += src[c];
                }
                src += g.c;
            }
        }
    }
}

void Conv2D::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    const Geometry g = geometry(x.shape());
    const std::size_t n = x.dim(0);
    const std::size_t pixels = g.oh * g.ow;
    const std::size_t k = kh_ * kw_ * g.c;
    out = Tensor({n, g.oh, g.ow, filters_});
    const double* w = params_[0].value.data();
    const auto& kt = kernels();

    for (std::size_t b = 0; b < n; ++b) {
        const double* xin = x.data() + b * g.h * g.w * g.c;
        double* y = out.data() + b * pixels * filters_;
        if (pointwise()) {
            kt.gemm(Trans::no, Trans::no, pixels, filters_, k, 1.0, xin, k, w, filters_, 0.0, y, filters_);
            continue;
        }
        const std::size_t chunk = std::max<std::size_t>(1, std::min(pixels, kColumnBudget / k));
        auto& col = column_buffer();
        if (col.size() < chunk * k) col.resize(chunk * k);
        for (std::size_t r0 = 0; r0 < pixels; r0 += chunk) {
            const std::size_t rows = std::min(chunk, pixels - r0);
            im2col(xin, g, r0, rows, col.data());
            kt.gemm(Trans::no, Trans::no, rows, filters_, k, 1.0, col.data(), k, w, filters_, 0.0,
                    y + r0 * filters_, filters_);
        }
    }
    if (use_bias_) kt.add_bias(n * pixels, filters_, params_[1].value.data(), out.data());
}

void Conv2D::backward(std::span<const Tensor* const> inputs, const Tensor&, const Tensor& dout,
                      std::span<Tensor* const> din, const LayerTape&) {
    const Tensor& x = *inputs[0];
    const Geometry g = geometry(x.shape());
    const std::size_t n = x.dim(0);
    const std::size_t pixels = g.oh * g.ow;
    const std::size_t k = kh_ * kw_ * g.c;
    const double* w = params_[0].value.data();
    double* dw = params_[0].grad.data();
    const auto& kt = kernels();
    Tensor* dx = din[0];

    if (use_bias_) kt.column_sums(n * pixels, filters_, dout.data(), params_[1].grad.data());

    for (std::size_t b = 0; b < n; ++b) {
        const double* xin = x.data() + b * g.h * g.w * g.c;
        const double* dy = dout.data() + b * pixels * filters_;
        double* dxin = dx ? dx->data() + b * g.h * g.w * g.c : nullptr;
        if (pointwise()) {
            kt.gemm(Trans::yes, Trans::no, k, filters_, pixels, 1.0, xin, k, dy, filters_, 1.0, dw, filters_);
            if (dxin) kt.gemm(Trans::no, Trans::yes, pixels, k, filters_, 1.0, dy, filters_, w, filters_, 0.0, dxin, k);
            continue;
        }
        const std::size_t chunk = std::max<std::size_t>(1, std::min(pixels, kColumnBudget / k));
        auto& col = column_buffer();
        auto& dcol = column_grad_buffer();
        if (col.size() < chunk * k) col.resize(chunk * k);
        if (dxin && dcol.size() < chunk * k) dcol.resize(chunk * k);
        for (std::size_t r0 = 0; r0 < pixels; r0 += chunk) {
            const std::size_t rows = std::min(chunk, pixels - r0);
            im2col(xin, g, r0, rows, col.data());
            kt.gemm(Trans::yes, Trans::no, k, filters_, rows, 1.0, col.data(), k, dy + r0 * filters_, filters_, 1.0,
                    dw, filters_);
            if (dxin) {
                kt.gemm(Trans::no, Trans::yes, rows, k, filters_, 1.0, dy + r0 * filters_, filters_, w, filters_, 0.0,
                        dcol.data(), k);
                col2im(dcol.data(), g, r0, rows, dxin);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::size_t channels, double epsilon, double momentum)
    : channels_(channels), epsilon_(epsilon), momentum_(momentum) {
    params_.push_back(make_param("beta", {channels_}, true));
    params_.push_back(make_param("moving_mean", {channels_}, false));
    params_.push_back(make_param("moving_variance", {channels_}, false));
}

Shape BatchNorm::output_shape(std::span<const Shape> inputs) const {
    if (inputs[0].empty() || inputs[0].back() != channels_) {
        throw PreconditionError("batchnorm expects " + std::to_string(channels_) + " channels, got " +
                                to_string(inputs[0]));
    }
    return inputs[0];
}

void BatchNorm::initialize(Rng&) {
    for (auto& p : params_) allocate(p);
    params_[2].value.fill(1.0);
}

void BatchNorm::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode mode, LayerTape* tape) const {
    const Tensor& x = *inputs[0];
    const std::size_t c = channels_;
    const std::size_t rows = x.size() / c;
    out = Tensor(x.shape());
    const double* beta = params_[0].value.data();

    std::vector<double> mean(c), var(c), inv_std(c);
    if (mode == Mode::training) {
        if (rows == 0) throw PreconditionError("batchnorm training pass on an empty batch");
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = x.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) mean[j] += row[j];
        }
        for (auto& m : mean) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = x.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for (auto& v : var) v /= static_cast<double>(rows);
    } else {
        std::copy_n(params_[1].value.data(), c, mean.begin());
        std::copy_n(params_[2].value.data(), c, var.begin());
    }
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + epsilon_);

    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * c;
        double* o = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) o[j] = (row[j] - mean[j]) * inv_std[j] + beta[j];
    }

    if (tape) {
        tape->aux.assign(3 * c, 0.0);
        std::copy(mean.begin(), mean.end(), tape->aux.begin());
        std::copy(var.begin(), var.end(), tape->aux.begin() + static_cast<std::ptrdiff_t>(c));
        std::copy(inv_std.begin(), inv_std.end(), tape->aux.begin() + static_cast<std::ptrdiff_t>(2 * c));
        tape->index.assign(1, mode == Mode::training ? 1u : 0u);
    }
}

void BatchNorm::backward(std::span<const Tensor* const> inputs, const Tensor&, const Tensor& dout,
                         std::span<Tensor* const> din, const LayerTape& tape) {
    const Tensor& x = *inputs[0];
    const std::size_t c = channels_;
    const std::size_t rows = x.size() / c;
    const double* mean = tape.aux.data();
    const double* inv_std = tape.aux.data() + 2 * c;
    const bool batch_stats = !tape.index.empty() && tape.index[0] == 1u;

    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * c;
        const double* dy = dout.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) {
            sum_dy[j] += dy[j];
            sum_dy_xhat[j] += dy[j] * (xr[j] - mean[j]) * inv_std[j];
        }
    }
    double* dbeta = params_[0].grad.data();
    for (std::size_t j = 0; j < c; ++j) dbeta[j] += sum_dy[j];

    Tensor* dx = din[0];
    if (!dx) return;
    const double inv_rows = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * c;
        const double* dy = dout.data() + r * c;
        double* d = dx->data() + r * c;
        for (std::size_t j = 0; j < c; ++j) {
            if (batch_stats) {
                const double xhat = (xr[j] - mean[j]) * inv_std[j];
                d[j] = inv_std[j] * (dy[j] - sum_dy[j] * inv_rows - xhat * sum_dy_xhat[j] * inv_rows);
            } else {
                d[j] = inv_std[j] * dy[j];
            }
        }
    }
}

void BatchNorm::update_state(const LayerTape& tape) {
    if (tape.index.empty() || tape.index[0] != 1u) return;
    const std::size_t c = channels_;
    double* mm = params_[1].value.data();
    double* mv = params_[2].value.data();
    for (std::size_t j = 0; j < c; ++j) {
        mm[j] = momentum_ * mm[j] + (1.0 - momentum_) * tape.aux[j];
        mv[j] = momentum_ * mv[j] + (1.0 - momentum_) * tape.aux[c + j];
    }
}

void BatchNorm::average_state(const LayerTape& tape, std::size_t seen) {
    if (tape.index.empty() || tape.index[0] != 1u) return;
    const std::size_t c = channels_;
    double* mm = params_[1].value.data();
    double* mv = params_[2].value.data();
    const double k = static_cast<double>(seen);
    for (std::size_t j = 0; j < c; ++j) {
        mm[j] = (k * mm[j] + tape.aux[j]) / (k + 1.0);
        mv[j] = (k * mv[j] + tape.aux[c + j]) / (k + 1.0);
    }
}

// ---------------------------------------------------------------------------
// Relu

Shape Relu::output_shape(std::span<const Shape> inputs) const { return inputs[0]; }

void Relu::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    out = Tensor(x.shape());
    kernels().relu(x.size(), x.data(), out.data());
}

void Relu::backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& dout,
                    std::span<Tensor* const> din, const LayerTape&) {
    if (din[0]) kernels().relu_backward(out.size(), out.data(), dout.data(), din[0]->data());
}

// ---------------------------------------------------------------------------
// MaxPool2D

MaxPool2D::MaxPool2D(std::size_t size, std::size_t stride, Padding padding)
    : size_(size), stride_(stride), padding_(padding) {
    if (size == 0 || stride == 0) throw PreconditionError("pool window and stride must be positive");
}

Shape MaxPool2D::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 3, "maxpool2d");
    return {axis_geometry(inputs[0][0], size_, stride_, padding_).out,
            axis_geometry(inputs[0][1], size_, stride_, padding_).out, inputs[0][2]};
}

void MaxPool2D::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape* tape) const {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const auto gh = axis_geometry(h, size_, stride_, padding_);
    const auto gw = axis_geometry(w, size_, stride_, padding_);
    out = Tensor({n, gh.out, gw.out, c});
    if (tape) tape->index.assign(out.size(), 0);
    if (x.size() > std::numeric_limits<std::uint32_t>::max()) throw PreconditionError("maxpool input too large");

    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t oy = 0; oy < gh.out; ++oy) {
            const auto y0 = static_cast<std::ptrdiff_t>(oy * stride_) - static_cast<std::ptrdiff_t>(gh.pad_before);
            for (std::size_t ox = 0; ox < gw.out; ++ox) {
                const auto x0 = static_cast<std::ptrdiff_t>(ox * stride_) - static_cast<std::ptrdiff_t>(gw.pad_before);
                for (std::size_t ch = 0; ch < c; ++ch, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t arg = 0;
                    for (std::size_t ky = 0; ky < size_; ++ky) {
                        const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < size_; ++kx) {
                            const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            const std::size_t idx = ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c + ch;
                            if (x[idx] > best) {
                                best = x[idx];
                                arg = idx;
                            }
                        }
                    }
                    out[o] = best;
                    if (tape) tape->index[o] = static_cast<std::uint32_t>(arg);
                }
            }
        }
    }
}

void MaxPool2D::backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& dout,
                         std::span<Tensor* const> din, const LayerTape& tape) {
    if (!din[0]) return;
    Tensor& dx = *din[0];
    for (std::size_t o = 0; o < out.size(); ++o) dx[tape.index[o]] += dout[o];
}

// ---------------------------------------------------------------------------
// AvgPool2D

AvgPool2D::AvgPool2D(std::size_t size, std::size_t stride, Padding padding)
    : size_(size), stride_(stride), padding_(padding) {
    if (size == 0 || stride == 0) throw PreconditionError("pool window and stride must be positive");
}

Shape AvgPool2D::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 3, "avgpool2d");
    return {axis_geometry(inputs[0][0], size_, stride_, padding_).out,
            axis_geometry(inputs[0][1], size_, stride_, padding_).out, inputs[0][2]};
}

namespace {

template <class Visit>
void for_each_avg_window(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::size_t size,
                         std::size_t stride, const AxisGeometry& gh, const AxisGeometry& gw, Visit&& visit) {
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t oy = 0; oy < gh.out; ++oy) {
            const auto y0 = static_cast<std::ptrdiff_t>(oy * stride) - static_cast<std::ptrdiff_t>(gh.pad_before);
            const std::size_t ylo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(y0, 0));
            const std::size_t yhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(y0 + static_cast<std::ptrdiff_t>(size), static_cast<std::ptrdiff_t>(h)));
            for (std::size_t ox = 0; ox < gw.out; ++ox, o += c) {
                const auto x0 = static_cast<std::ptrdiff_t>(ox * stride) - static_cast<std::ptrdiff_t>(gw.pad_before);
                const std::size_t xlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(x0, 0));
                const std::size_t xhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(x0 + static_cast<std::ptrdiff_t>(size), static_cast<std::ptrdiff_t>(w)));
                const double inv = 1.0 / static_cast<double>((yhi - ylo) * (xhi - xlo));
                for (std::size_t iy = ylo; iy < yhi; ++iy) {
                    for (std::size_t ix = xlo; ix < xhi; ++ix) {
                        visit(o, ((b * h + iy) * w + ix) * c, inv);
                    }
                }
            }
        }
    }
}

}  // namespace

void AvgPool2D::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const auto gh = axis_geometry(h, size_, stride_, padding_);
    const auto gw = axis_geometry(w, size_, stride_, padding_);
    out = Tensor({n, gh.out, gw.out, c});
    for_each_avg_window(n, h, w, c, size_, stride_, gh, gw, [&](std::size_t o, std::size_t i, double inv) {
        for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += x[i + ch] * inv;
    });
}

void AvgPool2D::backward(std::span<const Tensor* const> inputs, const Tensor&, const Tensor& dout,
                         std::span<Tensor* const> din, const LayerTape&) {
    if (!din[0]) return;
    const Tensor& x = *inputs[0];
    Tensor& dx = *din[0];
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const auto gh = axis_geometry(h, size_, stride_, padding_);
    const auto gw = axis_geometry(w, size_, stride_, padding_);
    for_each_avg_window(n, h, w, c, size_, stride_, gh, gw, [&](std::size_t o, std::size_t i, double inv) {
        for (std::size_t ch = 0; ch < c; ++ch) dx[i + ch] += dout[o + ch] * inv;
    });
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Shape GlobalAvgPool::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 3, "global_avgpool");
    return {inputs[0][2]};
}

void GlobalAvgPool::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    out = Tensor({n, c});
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t b = 0; b < n; ++b) {
        kernels().column_sums(hw, c, x.data() + b * hw * c, out.data() + b * c);
        for (std::size_t j = 0; j < c; ++j) out[b * c + j] *= inv;
    }
}

void GlobalAvgPool::backward(std::span<const Tensor* const> inputs, const Tensor&, const Tensor& dout,
                             std::span<Tensor* const> din, const LayerTape&) {
    if (!din[0]) return;
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
            double* d = din[0]->data() + (b * hw + p) * c;
            for (std::size_t j = 0; j < c; ++j) d[j] = dout[b * c + j] * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// GlobalMaxPool

Shape GlobalMaxPool::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 3, "global_maxpool");
    return {inputs[0][2]};
}

void GlobalMaxPool::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape* tape) const {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    out = Tensor({n, c});
    if (tape) tape->index.assign(n * c, 0);
    for (std::size_t b = 0; b < n; ++b) {
        const double* xb = x.data() + b * hw * c;
        double* o = out.data() + b * c;
        std::vector<std::uint32_t> arg(c, 0);
        std::copy(xb, xb + c, o);
        for (std::size_t p = 1; p < hw; ++p) {
            const double* row = xb + p * c;
            for (std::size_t j = 0; j < c; ++j) {
                if (row[j] > o[j]) {
                    o[j] = row[j];
                    arg[j] = static_cast<std::uint32_t>(p);
                }
            }
        }
        if (tape) {
            for (std::size_t j = 0; j < c; ++j) tape->index[b * c + j] = static_cast<std::uint32_t>((b * hw + arg[j]) * c + j);
        }
    }
}

void GlobalMaxPool::backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& dout,
                             std::span<Tensor* const> din, const LayerTape& tape) {
    if (!din[0]) return;
    Tensor& dx = *din[0];
    for (std::size_t o = 0; o < out.size(); ++o) dx[tape.index[o]] += dout[o];
}

// ---------------------------------------------------------------------------
// Flatten

Shape Flatten::output_shape(std::span<const Shape> inputs) const { return {element_count(inputs[0])}; }

void Flatten::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    out = *inputs[0];
    out.reshape({out.dim(0), out.sample_size()});
}

void Flatten::backward(std::span<const Tensor* const>, const Tensor&, const Tensor& dout,
                       std::span<Tensor* const> din, const LayerTape&) {
    if (!din[0]) return;
    std::copy(dout.values().begin(), dout.values().end(), din[0]->values().begin());
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(std::size_t in_features, std::size_t units) : in_features_(in_features), units_(units) {
    if (in_features == 0 || units == 0) throw PreconditionError("dense dimensions must be positive");
    params_.push_back(make_param("kernel", {in_features_, units_}, true));
    params_.push_back(make_param("bias", {units_}, true));
}

Shape Dense::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 1, "dense");
    if (inputs[0][0] != in_features_) {
        throw PreconditionError("dense expects " + std::to_string(in_features_) + " features, got " +
                                to_string(inputs[0]));
    }
    return {units_};
}

void Dense::initialize(Rng& rng) {
    for (auto& p : params_) allocate(p);
    glorot_uniform(params_[0].value, in_features_, units_, rng);
}

void Dense::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0);
    out = Tensor({n, units_});
    const auto& kt = kernels();
    kt.gemm(Trans::no, Trans::no, n, units_, in_features_, 1.0, x.data(), in_features_, params_[0].value.data(),
            units_, 0.0, out.data(), units_);
    kt.add_bias(n, units_, params_[1].value.data(), out.data());
}

void Dense::backward(std::span<const Tensor* const> inputs, const Tensor&, const Tensor& dout,
                     std::span<Tensor* const> din, const LayerTape&) {
    const Tensor& x = *inputs[0];
    const std::size_t n = x.dim(0);
    const auto& kt = kernels();
    kt.gemm(Trans::yes, Trans::no, in_features_, units_, n, 1.0, x.data(), in_features_, dout.data(), units_, 1.0,
            params_[0].grad.data(), units_);
    kt.column_sums(n, units_, dout.data(), params_[1].grad.data());
    if (din[0]) {
        kt.gemm(Trans::no, Trans::yes, n, in_features_, units_, 1.0, dout.data(), units_, params_[0].value.data(),
                units_, 0.0, din[0]->data(), in_features_);
    }
}

// ---------------------------------------------------------------------------
// Concat

Shape Concat::output_shape(std::span<const Shape> inputs) const {
    if (inputs.empty()) throw PreconditionError("concat needs at least one input");
    Shape s = inputs[0];
    require_rank(s, 3, "concat");
    for (std::size_t i = 1; i < inputs.size(); ++i) {
        require_rank(inputs[i], 3, "concat");
        if (inputs[i][0] != s[0] || inputs[i][1] != s[1]) {
            throw PreconditionError("concat spatial mismatch: " + to_string(s) + " vs " + to_string(inputs[i]));
        }
        s[2] += inputs[i][2];
    }
    return s;
}

void Concat::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& first = *inputs[0];
    const std::size_t pixels = first.dim(0) * first.dim(1) * first.dim(2);
    std::size_t total = 0;
    for (const Tensor* t : inputs) total += t->dim(3);
    out = Tensor({first.dim(0), first.dim(1), first.dim(2), total});
    std::size_t offset = 0;
    for (const Tensor* t : inputs) {
        const std::size_t c = t->dim(3);
        for (std::size_t p = 0; p < pixels; ++p) {
            std::memcpy(out.data() + p * total + offset, t->data() + p * c, c * sizeof(double));
        }
        offset += c;
    }
}

void Concat::backward(std::span<const Tensor* const> inputs, const Tensor& out, const Tensor& dout,
                      std::span<Tensor* const> din, const LayerTape&) {
    const std::size_t total = out.dim(3);
    const std::size_t pixels = out.dim(0) * out.dim(1) * out.dim(2);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t c = inputs[i]->dim(3);
        if (din[i]) {
            for (std::size_t p = 0; p < pixels; ++p) {
                std::memcpy(din[i]->data() + p * c, dout.data() + p * total + offset, c * sizeof(double));
            }
        }
        offset += c;
    }
}

// ---------------------------------------------------------------------------
// Softmax

Shape Softmax::output_shape(std::span<const Shape> inputs) const {
    require_rank(inputs[0], 1, "softmax");
    return inputs[0];
}

void Softmax::forward(std::span<const Tensor* const> inputs, Tensor& out, Mode, LayerTape*) const {
    const Tensor& x = *inputs[0];
    out = Tensor(x.shape());
    const std::size_t n = x.dim(0), k = x.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
        const double* row = x.data() + b * k;
        double* o = out.data() + b * k;
        const double mx = *std::max_element(row, row + k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            o[j] = std::exp(row[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < k; ++j) o[j] /= sum;
    }
}

void Softmax::backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& dout,
                       std::span<Tensor* const> din, const LayerTape&) {
    if (!din[0]) return;
    const std::size_t n = out.dim(0), k = out.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
        const double* p = out.data() + b * k;
        const double* dy = dout.data() + b * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += dy[j] * p[j];
        for (std::size_t j = 0; j < k; ++j) (*din[0])[b * k + j] = p[j] * (dy[j] - dot);
    }
}

}  // namespace kohscan::nn
