#include "kohscan/corpus/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::corpus {

namespace {

struct Tap {
    int lo;
    int hi;
    double t;
};

std::vector<Tap> taps(int in, int out) {
    std::vector<Tap> v(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double src = (i + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const int lo = static_cast<int>(std::floor(src));
        const int hi = std::min(lo + 1, in - 1);
        v[static_cast<std::size_t>(i)] = Tap{lo, hi, src - lo};
    }
    return v;
}

}  // namespace

std::vector<float> preprocess_plane(const image::Image& patch_in, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw PreconditionError("preprocess output size must be positive");
    if (patch_in.empty() || patch_in.width <= 0 || patch_in.height <= 0) {
        throw PreconditionError("preprocess: empty patch");
    }
    image::Image converted;
    const image::Image* patch = &patch_in;
    if (patch_in.channels != 1) {
        log::warn("preprocess: " + std::to_string(patch_in.channels) + "-channel patch converted to luminance");
        converted = image::to_gray(patch_in);
        patch = &converted;
    }
    const auto ty = taps(patch->height, out_h);
    const auto tx = taps(patch->width, out_w);
    std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
            const Tap& b = tx[static_cast<std::size_t>(x)];
            const double top = (1.0 - b.t) * patch->at(b.lo, a.lo) + b.t * patch->at(b.hi, a.lo);
            const double bottom = (1.0 - b.t) * patch->at(b.lo, a.hi) + b.t * patch->at(b.hi, a.hi);
            const double v = ((1.0 - a.t) * top + a.t * bottom) / 255.0;
            out[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

void fill_sample(std::span<const float> plane, nn::Tensor& batch, std::size_t index) {
    if (batch.rank() != 4) throw PreconditionError("fill_sample expects an (N,H,W,C) batch");
    const std::size_t hw = batch.dim(1) * batch.dim(2);
    const std::size_t c = batch.dim(3);
    if (plane.size() != hw) throw PreconditionError("fill_sample: plane size does not match batch");
    if (index >= batch.dim(0)) throw PreconditionError("fill_sample: index out of range");
    double* dst = batch.data() + index * hw * c;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t k = 0; k < c; ++k) dst[i * c + k] = plane[i];
    }
}

nn::Tensor preprocess(const image::Image& patch, int out_h, int out_w, int channels) {
    if (channels <= 0) throw PreconditionError("preprocess: channels must be positive");
    const auto plane = preprocess_plane(patch, out_h, out_w);
    nn::Tensor batch({1, static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w),
                      static_cast<std::size_t>(channels)});
    fill_sample(plane, batch, 0);
    batch.reshape({static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w),
                   static_cast<std::size_t>(channels)});
    return batch;
}

}  // namespace kohscan::corpus
