#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "kohscan/image/image.hpp"

namespace kohscan::image {

using Rgb = std::array<std::uint8_t, 3>;

/// Solid rectangle, clipped to the image. RGB images only.
void fill_rect(Image& img, int x, int y, int w, int h, Rgb color);

/// out = (1 - alpha) * pixel + alpha * color over the rectangle, clipped.
void blend_rect(Image& img, int x, int y, int w, int h, Rgb color, double alpha);

/// Bresenham line with square pen of the given thickness.
void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb color, int thickness = 1);

/// 5x7 bitmap text (digits, letters, basic punctuation), scaled by an integer factor.
/// Returns the advance width in pixels.
int draw_text(Image& img, int x, int y, std::string_view text, Rgb color, int scale = 1);

int text_width(std::string_view text, int scale = 1);

/// Blue -> red colour ramp for scores in [0, 1].
Rgb heat_color(double t);

}  // namespace kohscan::image
