#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kohscan/corpus/manifest.hpp"
#include "kohscan/image/image.hpp"

namespace kohscan::corpus {

/// Otsu's threshold over the 256-bin histogram of a gray image. Pixels with
/// value > threshold are foreground.
int otsu_threshold(const image::Image& gray);

/// Illuminated microscope field: pixels brighter than `threshold` (Otsu when
/// absent), reduced to the largest 4-connected bright region with interior
/// holes filled.
image::Mask field_mask(const image::Image& gray, std::optional<int> threshold = std::nullopt);

/// Fraction of patch pixels inside the field. Both arguments are crops of the
/// same region; their shapes must match.
double content_fraction(const image::Image& patch, const image::Mask& field);

/// Constant-time window sums over a mask.
class MaskIntegral {
public:
    explicit MaskIntegral(const image::Mask& mask);
    std::uint64_t count(int x, int y, int w, int h) const;
    double fraction(int x, int y, int w, int h) const;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint64_t> sums_;
};

struct TileParams {
    int size_px = kDefaultPatchSize;
    int stride_px = kDefaultPatchSize;
    double min_content = 0.0;
    /// Intensity threshold for the field mask (Otsu when absent).
    std::optional<int> mask_threshold;
};

/// Number of grid positions along one axis; 0 when the extent is smaller than the patch.
int grid_positions(int extent, int size, int stride);

/// Row-major grid of unlabeled patches over a slide. Patches whose content
/// fraction is below min_content are dropped. A slide smaller than the patch
/// yields an empty list and a warning. Patch ids are "<image_id>_<y>_<x>"
/// with zero-padded coordinates.
std::vector<PatchRecord> tile(const SlideImage& slide, const image::Image& pixels, const TileParams& params);

/// Loads the slide image from `path` and tiles it.
std::vector<PatchRecord> tile(const SlideImage& slide, const std::filesystem::path& path, const TileParams& params);

std::string patch_id_for(const std::string& image_id, int x, int y);

}  // namespace kohscan::corpus
