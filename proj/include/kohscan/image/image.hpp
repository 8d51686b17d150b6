#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace kohscan::image {

/// 8-bit interleaved raster (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0);

    std::uint8_t& at(int x, int y, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const { return pixels.empty(); }

    bool operator==(const Image&) const = default;
};

/// Single-channel boolean plane (0 / 1 bytes).
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int w, int h, bool fill = false) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}

    bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
};

/// Decodes PNG or JPEG bytes (format sniffed from the signature). Throws FormatError.
Image decode(std::string_view bytes);
Image read(const std::filesystem::path& path);

/// Width/height without decoding pixel data.
struct Dimensions {
    int width = 0;
    int height = 0;
};
Dimensions read_dimensions(const std::filesystem::path& path);

/// PNG encoding; compression 0 (none) .. 9 (smallest).
std::string encode_png(const Image& img, int compression = 6);
void write_png(const std::filesystem::path& path, const Image& img, int compression = 6);

/// Rec. 601 luma of an RGB image; gray input is returned unchanged.
Image to_gray(const Image& img);

Image crop(const Image& img, int x, int y, int w, int h);
Mask crop(const Mask& mask, int x, int y, int w, int h);

/// Gray -> RGB by replication.
Image to_rgb(const Image& img);

}  // namespace kohscan::image
