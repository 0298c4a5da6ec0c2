#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msy/tensor.hpp"

namespace msy {

// Interleaved 8-bit RGB raster. On disk this is binary PPM (P6, maxval 255),
// which keeps the repository codec-free.
struct ImageU8 {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;  // 3 * w * h

  static ImageU8 filled(int w, int h, uint8_t r, uint8_t g, uint8_t b);
  uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<size_t>(y) * w + x); }
  const uint8_t* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<size_t>(y) * w + x);
  }
  bool operator==(const ImageU8&) const = default;
};

ImageU8 read_ppm(const std::string& path);
void write_ppm(const ImageU8& img, const std::string& path);

void draw_rect(ImageU8& img, int x1, int y1, int x2, int y2, std::array<uint8_t, 3> color);
// 3x5 bitmap glyphs: digits, dot, colon, percent and space.
void draw_text_3x5(ImageU8& img, int x, int y, const std::string& text,
                   std::array<uint8_t, 3> color);

ImageU8 resize_nearest(const ImageU8& img, int out_w, int out_h);

// Deterministic, well-separated per-class color.
std::array<uint8_t, 3> class_color(int class_id);

// (1,3,H,W) float tensor scaled to [0,1].
Tensor<float> image_to_tensor(const ImageU8& img);

}  // namespace msy
