#include "msy/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace msy {

ImageU8 ImageU8::filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  ImageU8 img;
  img.w = w;
  img.h = h;
  img.rgb.resize(static_cast<size_t>(3) * w * h);
  for (size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = r;
    img.rgb[i + 1] = g;
    img.rgb[i + 2] = b;
  }
  return img;
}

ImageU8 read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read image " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw DataError(path + ": not a binary PPM (P6) file");
  auto next_int = [&]() {
    // skip whitespace and '#' comment lines
    for (;;) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    int v;
    if (!(f >> v)) throw DataError(path + ": malformed PPM header");
    return v;
  };
  ImageU8 img;
  img.w = next_int();
  img.h = next_int();
  const int maxval = next_int();
  if (img.w <= 0 || img.h <= 0 || maxval != 255)
    throw DataError(path + ": unsupported PPM geometry or maxval");
  f.get();  // single whitespace after header
  img.rgb.resize(static_cast<size_t>(3) * img.w * img.h);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw DataError(path + ": truncated PPM payload");
  return img;
}

void write_ppm(const ImageU8& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write image " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw DataError("short write to " + path);
}

void draw_rect(ImageU8& img, int x1, int y1, int x2, int y2, std::array<uint8_t, 3> color) {
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    uint8_t* p = img.px(x, y);
    p[0] = color[0];
    p[1] = color[1];
    p[2] = color[2];
  };
  for (int x = x1; x <= x2; ++x) {
    put(x, y1);
    put(x, y2);
  }
  for (int y = y1; y <= y2; ++y) {
    put(x1, y);
    put(x2, y);
  }
}

namespace {

// column-major 3x5 glyphs, bit i*3+j = row i, col j
constexpr uint16_t glyph_bits(char c) {
  switch (c) {
    case '0': return 0b111101101101111;
    case '1': return 0b010110010010111;
    case '2': return 0b111001111100111;
    case '3': return 0b111001111001111;
    case '4': return 0b101101111001001;
    case '5': return 0b111100111001111;
    case '6': return 0b111100111101111;
    case '7': return 0b111001001001001;
    case '8': return 0b111101111101111;
    case '9': return 0b111101111001111;
    case '.': return 0b000000000000010;
    case ':': return 0b000010000010000;
    case '%': return 0b101001010100101;
    default: return 0;
  }
}

}  // namespace

void draw_text_3x5(ImageU8& img, int x, int y, const std::string& text,
                   std::array<uint8_t, 3> color) {
  int cx = x;
  for (char c : text) {
    const uint16_t bits = glyph_bits(c);
    for (int row = 0; row < 5; ++row)
      for (int col = 0; col < 3; ++col)
        if (bits & (1u << (14 - (row * 3 + col)))) {
          const int px_x = cx + col, px_y = y + row;
          if (px_x >= 0 && px_y >= 0 && px_x < img.w && px_y < img.h) {
            uint8_t* p = img.px(px_x, px_y);
            p[0] = color[0];
            p[1] = color[1];
            p[2] = color[2];
          }
        }
    cx += 4;
  }
}

ImageU8 resize_nearest(const ImageU8& img, int out_w, int out_h) {
  ImageU8 out;
  out.w = out_w;
  out.h = out_h;
  out.rgb.resize(static_cast<size_t>(3) * out_w * out_h);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(img.h - 1, y * img.h / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(img.w - 1, x * img.w / out_w);
      const uint8_t* s = img.px(sx, sy);
      uint8_t* d = out.px(x, y);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  return out;
}

std::array<uint8_t, 3> class_color(int class_id) {
  // golden-ratio hue stepping, fixed saturation/value
  const double hue = std::fmod(0.61803398875 * class_id, 1.0) * 6.0;
  const int sect = static_cast<int>(hue);
  const double frac = hue - sect;
  const double v = 0.95, s = 0.75;
  const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
  double r, g, b;
  switch (sect % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  return {static_cast<uint8_t>(r * 255), static_cast<uint8_t>(g * 255),
          static_cast<uint8_t>(b * 255)};
}

Tensor<float> image_to_tensor(const ImageU8& img) {
  std::vector<float> data(static_cast<size_t>(3) * img.w * img.h);
  const size_t plane = static_cast<size_t>(img.w) * img.h;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const uint8_t* p = img.px(x, y);
      const size_t i = static_cast<size_t>(y) * img.w + x;
      data[i] = p[0] / 255.0f;
      data[plane + i] = p[1] / 255.0f;
      data[2 * plane + i] = p[2] / 255.0f;
    }
  return Tensor<float>::from({1, 3, img.h, img.w}, std::move(data));
}

}  // namespace msy
