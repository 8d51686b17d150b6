#pragma once

#include <span>
#include <string>
#include <vector>

#include "kohscan/corpus/manifest.hpp"
#include "kohscan/nn/tensor.hpp"

namespace kohscan::corpus {

/// Preprocessed gray planes for a list of patches, in the given order.
struct PatchSet {
    int height = 0;
    int width = 0;
    std::vector<std::vector<float>> planes;
    /// 1 = fungus, 0 = keratin, -1 = unlabeled.
    std::vector<int> labels;
    std::vector<std::string> patch_ids;

    std::size_t size() const { return planes.size(); }
};

int label_value(Label label);

/// Crops and preprocesses every listed patch. Each slide is decoded once;
/// slides are processed by up to `workers` threads with results stored in
/// input order. Missing slide files raise FormatError listing every path.
PatchSet load_patches(const Manifest& manifest, std::span<const PatchRecord* const> patches, int out_h, int out_w,
                      int workers = 1);

/// (indices.size(), H, W, channels) batch. Optional flips mirror each plane.
struct Flip {
    bool horizontal = false;
    bool vertical = false;
};
nn::Tensor make_batch(const PatchSet& set, std::span<const std::size_t> indices, std::size_t channels,
                      std::span<const Flip> flips = {});

}  // namespace kohscan::corpus
