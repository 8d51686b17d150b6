#pragma once

#include <span>
#include <vector>

#include "kohscan/image/image.hpp"
#include "kohscan/nn/tensor.hpp"

namespace kohscan::corpus {

inline constexpr int kModelInputSize = 224;

/// Gray plane of a patch resized to out_h x out_w (bilinear, half-pixel
/// centres, edge clamped) and scaled to [0,1]. Colour input is reduced to
/// luma with a warning.
std::vector<float> preprocess_plane(const image::Image& patch, int out_h = kModelInputSize,
                                    int out_w = kModelInputSize);

/// Writes a plane into sample `index` of an (N, H, W, C) batch, replicating
/// it across the C channels.
void fill_sample(std::span<const float> plane, nn::Tensor& batch, std::size_t index);

/// Model input for one patch: (H, W, channels) with identical channels.
nn::Tensor preprocess(const image::Image& patch, int out_h = kModelInputSize, int out_w = kModelInputSize,
                      int channels = 3);

}  // namespace kohscan::corpus
