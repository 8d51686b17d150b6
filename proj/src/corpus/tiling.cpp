#include "kohscan/corpus/tiling.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::corpus {

int otsu_threshold(const image::Image& gray) {
    if (gray.channels != 1) throw PreconditionError("otsu_threshold expects a gray image");
    std::array<std::uint64_t, 256> hist{};
    for (auto v : gray.pixels) ++hist[v];
    const double total = static_cast<double>(gray.pixels.size());
    if (total == 0) return 0;
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * static_cast<double>(hist[static_cast<std::size_t>(i)]);
    double w0 = 0.0;
    double sum0 = 0.0;
    double best = -1.0;
    int best_t = 0;
    for (int t = 0; t < 256; ++t) {
        w0 += static_cast<double>(hist[static_cast<std::size_t>(t)]);
        sum0 += t * static_cast<double>(hist[static_cast<std::size_t>(t)]);
        const double w1 = total - w0;
        if (w0 == 0 || w1 == 0) continue;
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return best_t;
}

namespace {

// Labels 4-connected components of `fg` (value 1) and returns the mask of the largest.
image::Mask largest_component(const image::Mask& fg) {
    const int w = fg.width;
    const int h = fg.height;
    std::vector<std::int32_t> label(fg.bits.size(), -1);
    std::vector<std::size_t> stack;
    std::int32_t best_label = -1;
    std::size_t best_size = 0;
    std::int32_t next = 0;
    for (std::size_t start = 0; start < fg.bits.size(); ++start) {
        if (!fg.bits[start] || label[start] >= 0) continue;
        std::size_t size = 0;
        stack.push_back(start);
        label[start] = next;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(i % static_cast<std::size_t>(w));
            const int y = static_cast<int>(i / static_cast<std::size_t>(w));
            const auto visit = [&](int nx, int ny) {
                if (nx < 0 || ny < 0 || nx >= w || ny >= h) return;
                const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
                if (fg.bits[j] && label[j] < 0) {
                    label[j] = next;
                    stack.push_back(j);
                }
            };
            visit(x - 1, y);
            visit(x + 1, y);
            visit(x, y - 1);
            visit(x, y + 1);
        }
        if (size > best_size) {
            best_size = size;
            best_label = next;
        }
        ++next;
    }
    image::Mask out(w, h);
    if (best_label < 0) return out;
    for (std::size_t i = 0; i < label.size(); ++i) out.bits[i] = label[i] == best_label ? 1 : 0;
    return out;
}

// Sets every background pixel not reachable from the border.
void fill_holes(image::Mask& m) {
    const int w = m.width;
    const int h = m.height;
    std::vector<std::uint8_t> outside(m.bits.size(), 0);
    std::vector<std::size_t> stack;
    const auto seed = [&](int x, int y) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!m.bits[i] && !outside[i]) {
            outside[i] = 1;
            stack.push_back(i);
        }
    };
    for (int x = 0; x < w; ++x) {
        seed(x, 0);
        seed(x, h - 1);
    }
    for (int y = 0; y < h; ++y) {
        seed(0, y);
        seed(w - 1, y);
    }
    while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const int x = static_cast<int>(i % static_cast<std::size_t>(w));
        const int y = static_cast<int>(i / static_cast<std::size_t>(w));
        if (x > 0) seed(x - 1, y);
        if (x + 1 < w) seed(x + 1, y);
        if (y > 0) seed(x, y - 1);
        if (y + 1 < h) seed(x, y + 1);
    }
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
        if (!outside[i]) m.bits[i] = 1;
    }
}

}  // namespace

image::Mask field_mask(const image::Image& gray_in, std::optional<int> threshold) {
    const image::Image gray = gray_in.channels == 1 ? gray_in : image::to_gray(gray_in);
    if (gray.empty()) return image::Mask(gray.width, gray.height);
    const auto [lo, hi] = std::minmax_element(gray.pixels.begin(), gray.pixels.end());
    if (!threshold && *lo == *hi) {
        // No contrast: either fully lit or fully dark.
        return image::Mask(gray.width, gray.height, *lo > 0);
    }
    const int t = threshold ? *threshold : otsu_threshold(gray);
    image::Mask fg(gray.width, gray.height);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) fg.bits[i] = gray.pixels[i] > t ? 1 : 0;
    image::Mask out = largest_component(fg);
    fill_holes(out);
    return out;
}

double content_fraction(const image::Image& patch, const image::Mask& field) {
    if (patch.width != field.width || patch.height != field.height) {
        throw PreconditionError("content_fraction: patch " + std::to_string(patch.width) + "x" +
                                std::to_string(patch.height) + " and mask " + std::to_string(field.width) + "x" +
                                std::to_string(field.height) + " differ in shape");
    }
    if (field.bits.empty()) return 0.0;
    std::size_t inside = 0;
    for (auto b : field.bits) inside += b ? 1 : 0;
    return static_cast<double>(inside) / static_cast<double>(field.bits.size());
}

MaskIntegral::MaskIntegral(const image::Mask& mask)
    : width_(mask.width), height_(mask.height), sums_(static_cast<std::size_t>(mask.width + 1) * (mask.height + 1), 0) {
    const std::size_t stride = static_cast<std::size_t>(width_) + 1;
    for (int y = 0; y < height_; ++y) {
        std::uint64_t row = 0;
        for (int x = 0; x < width_; ++x) {
            row += mask.at(x, y) ? 1 : 0;
            sums_[(y + 1) * stride + x + 1] = sums_[y * stride + x + 1] + row;
        }
    }
}

std::uint64_t MaskIntegral::count(int x, int y, int w, int h) const {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > width_ || y + h > height_) {
        throw PreconditionError("MaskIntegral window out of bounds");
    }
    const std::size_t stride = static_cast<std::size_t>(width_) + 1;
    const auto at = [&](int xx, int yy) { return sums_[static_cast<std::size_t>(yy) * stride + xx]; };
    return at(x + w, y + h) - at(x, y + h) - at(x + w, y) + at(x, y);
}

double MaskIntegral::fraction(int x, int y, int w, int h) const {
    if (w == 0 || h == 0) return 0.0;
    return static_cast<double>(count(x, y, w, h)) / (static_cast<double>(w) * h);
}

int grid_positions(int extent, int size, int stride) {
    if (size <= 0 || stride <= 0) throw PreconditionError("grid size and stride must be positive");
    if (extent < size) return 0;
    return (extent - size) / stride + 1;
}

std::string patch_id_for(const std::string& image_id, int x, int y) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%06d_%06d", y, x);
    return image_id + buf;
}

namespace {

void check_params(const TileParams& p) {
    if (p.size_px <= 0) throw PreconditionError("tile size must be positive");
    if (p.stride_px < 1) throw PreconditionError("tile stride must be >= 1");
    if (!(p.min_content >= 0.0 && p.min_content <= 1.0)) throw PreconditionError("min_content must lie in [0,1]");
}

std::vector<PatchRecord> grid(const SlideImage& slide, int width, int height, const TileParams& params,
                              const MaskIntegral* integral) {
    std::vector<PatchRecord> out;
    const int nx = grid_positions(width, params.size_px, params.stride_px);
    const int ny = grid_positions(height, params.size_px, params.stride_px);
    if (nx == 0 || ny == 0) {
        log::warn("slide " + slide.image_id + " (" + std::to_string(width) + "x" + std::to_string(height) +
                  ") is smaller than the " + std::to_string(params.size_px) + " px patch; no patches");
        return out;
    }
    out.reserve(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            PatchRecord p;
            p.x = i * params.stride_px;
            p.y = j * params.stride_px;
            p.size_px = params.size_px;
            p.image_id = slide.image_id;
            p.patch_id = patch_id_for(slide.image_id, p.x, p.y);
            p.content_fraction = integral ? integral->fraction(p.x, p.y, p.size_px, p.size_px) : 1.0;
            if (p.content_fraction < params.min_content) continue;
            out.push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace

std::vector<PatchRecord> tile(const SlideImage& slide, const image::Image& pixels, const TileParams& params) {
    check_params(params);
    if (pixels.width < params.size_px || pixels.height < params.size_px) {
        return grid(slide, pixels.width, pixels.height, params, nullptr);
    }
    const MaskIntegral integral(field_mask(pixels, params.mask_threshold));
    return grid(slide, pixels.width, pixels.height, params, &integral);
}

std::vector<PatchRecord> tile(const SlideImage& slide, const std::filesystem::path& path, const TileParams& params) {
    return tile(slide, image::read(path), params);
}

}  // namespace kohscan::corpus
