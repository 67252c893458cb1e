#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "umc/tensor.hpp"

namespace umc::plot {

// ---------------------------------------------------------------- PNG writer
// 8-bit RGB PNG with stored (uncompressed) deflate blocks; no zlib dependency.

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  crc ^= 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

inline void be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(x >> 24);
  v.push_back((x >> 16) & 0xFF);
  v.push_back((x >> 8) & 0xFF);
  v.push_back(x & 0xFF);
}

inline void chunk(std::vector<std::uint8_t>& out, const char* type,
                  const std::vector<std::uint8_t>& body) {
  be32(out, static_cast<std::uint32_t>(body.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), body.begin(), body.end());
  be32(out, crc32(out.data() + start, out.size() - start));
}

}  // namespace detail

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 255)
      : width(w), height(h), rgb(w * h * 3, fill) {}

  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x >= width || y >= height) return;
    std::uint8_t* p = &rgb[(y * width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

inline void write_png(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

  std::vector<std::uint8_t> ihdr;
  detail::be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB
  detail::chunk(out, "IHDR", ihdr);

  // raw scanlines with filter byte 0
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (1 + img.width * 3));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.rgb.begin() + y * img.width * 3,
               img.rgb.begin() + (y + 1) * img.width * 3);
  }

  // zlib stream: header + stored deflate blocks + adler32
  std::vector<std::uint8_t> z{0x78, 0x01};
  std::size_t pos = 0;
  while (pos < raw.size()) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - pos);
    const bool last = pos + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(n & 0xFF);
    z.push_back((n >> 8) & 0xFF);
    z.push_back(~n & 0xFF);
    z.push_back((~n >> 8) & 0xFF);
    z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + n);
    pos += n;
  }
  std::uint32_t a = 1, b = 0;
  for (std::uint8_t byte : raw) {
    a = (a + byte) % 65521;
    b = (b + a) % 65521;
  }
  detail::be32(z, (b << 16) | a);
  detail::chunk(out, "IDAT", z);
  detail::chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

// ---------------------------------------------------------------- text

namespace detail {

// 5x7 glyphs, column-packed bits (LSB = top row)
inline const std::uint8_t* glyph(char c) {
  static const std::uint8_t font[][5] = {
      {0x00, 0x00, 0x00, 0x00, 0x00},  // ' '
      {0x3E, 0x51, 0x49, 0x45, 0x3E},  // 0
      {0x00, 0x42, 0x7F, 0x40, 0x00},  // 1
      {0x42, 0x61, 0x51, 0x49, 0x46},  // 2
      {0x21, 0x41, 0x45, 0x4B, 0x31},  // 3
      {0x18, 0x14, 0x12, 0x7F, 0x10},  // 4
      {0x27, 0x45, 0x45, 0x45, 0x39},  // 5
      {0x3C, 0x4A, 0x49, 0x49, 0x30},  // 6
      {0x01, 0x71, 0x09, 0x05, 0x03},  // 7
      {0x36, 0x49, 0x49, 0x49, 0x36},  // 8
      {0x06, 0x49, 0x49, 0x29, 0x1E},  // 9
      {0x08, 0x08, 0x08, 0x08, 0x08},  // -
      {0x00, 0x60, 0x60, 0x00, 0x00},  // .
      {0x08, 0x08, 0x3E, 0x08, 0x08},  // +
      {0x7E, 0x11, 0x11, 0x11, 0x7E},  // A
      {0x7F, 0x49, 0x49, 0x49, 0x36},  // B
      {0x3E, 0x41, 0x41, 0x41, 0x22},  // C
      {0x7F, 0x41, 0x41, 0x22, 0x1C},  // D
      {0x7F, 0x49, 0x49, 0x49, 0x41},  // E
      {0x7F, 0x09, 0x09, 0x09, 0x01},  // F
      {0x3E, 0x41, 0x49, 0x49, 0x7A},  // G
      {0x7F, 0x08, 0x08, 0x08, 0x7F},  // H
      {0x00, 0x41, 0x7F, 0x41, 0x00},  // I
      {0x20, 0x40, 0x41, 0x3F, 0x01},  // J
      {0x7F, 0x08, 0x14, 0x22, 0x41},  // K
      {0x7F, 0x40, 0x40, 0x40, 0x40},  // L
      {0x7F, 0x02, 0x0C, 0x02, 0x7F},  // M
      {0x7F, 0x04, 0x08, 0x10, 0x7F},  // N
      {0x3E, 0x41, 0x41, 0x41, 0x3E},  // O
      {0x7F, 0x09, 0x09, 0x09, 0x06},  // P
      {0x3E, 0x41, 0x51, 0x21, 0x5E},  // Q
      {0x7F, 0x09, 0x19, 0x29, 0x46},  // R
      {0x46, 0x49, 0x49, 0x49, 0x31},  // S
      {0x01, 0x01, 0x7F, 0x01, 0x01},  // T
      {0x3F, 0x40, 0x40, 0x40, 0x3F},  // U
      {0x1F, 0x20, 0x40, 0x20, 0x1F},  // V
      {0x3F, 0x40, 0x38, 0x40, 0x3F},  // W
      {0x63, 0x14, 0x08, 0x14, 0x63},  // X
      {0x07, 0x08, 0x70, 0x08, 0x07},  // Y
      {0x61, 0x51, 0x49, 0x45, 0x43},  // Z
      {0x00, 0x36, 0x36, 0x00, 0x00},  // :
      {0x00, 0x00, 0x5F, 0x00, 0x00},  // !
      {0x02, 0x01, 0x51, 0x09, 0x06},  // ?
      {0x0C, 0x12, 0x12, 0x0C, 0x00},  // degree-ish for unknowns
  };
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  if (c == ' ') return font[0];
  if (c >= '0' && c <= '9') return font[1 + (c - '0')];
  if (c == '-' || c == '_') return font[11];
  if (c == '.') return font[12];
  if (c == '+') return font[13];
  if (c >= 'A' && c <= 'Z') return font[14 + (c - 'A')];
  if (c == ':') return font[40];
  if (c == '!') return font[41];
  if (c == '?') return font[42];
  return font[43];
}

}  // namespace detail

inline void draw_text(Image& img, std::size_t x, std::size_t y, const std::string& text,
                      std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0) {
  std::size_t cx = x;
  for (char c : text) {
    const std::uint8_t* gl = detail::glyph(c);
    for (int col = 0; col < 5; ++col)
      for (int row = 0; row < 7; ++row)
        if (gl[col] & (1 << row)) img.set(cx + col, y + row, r, g, b);
    cx += 6;
  }
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1, std::uint8_t r,
                      std::uint8_t g, std::uint8_t b) {
  const double dx = x1 - x0, dy = y1 - y0;
  const int steps = static_cast<int>(std::max(std::abs(dx), std::abs(dy))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    img.set(static_cast<std::size_t>(std::lround(x0 + t * dx)),
            static_cast<std::size_t>(std::lround(y0 + t * dy)), r, g, b);
  }
}

// ---------------------------------------------------------------- colormap

// compact viridis-like gradient
inline void colormap(double t, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b) {
  t = std::clamp(t, 0.0, 1.0);
  static const double stops[6][3] = {{0.267, 0.005, 0.329}, {0.283, 0.141, 0.458},
                                     {0.254, 0.265, 0.530}, {0.164, 0.471, 0.558},
                                     {0.478, 0.821, 0.318}, {0.993, 0.906, 0.144}};
  const double x = t * 5.0;
  const int i = std::min(4, static_cast<int>(x));
  const double f = x - i;
  r = static_cast<std::uint8_t>(255 * (stops[i][0] * (1 - f) + stops[i + 1][0] * f));
  g = static_cast<std::uint8_t>(255 * (stops[i][1] * (1 - f) + stops[i + 1][1] * f));
  b = static_cast<std::uint8_t>(255 * (stops[i][2] * (1 - f) + stops[i + 1][2] * f));
}

// ---------------------------------------------------------------- charts

// Spectrogram heatmap, low bands at the bottom, shared value range.
inline void draw_heatmap(Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                         const TensorD& spec, double vmin, double vmax) {
  const std::size_t F = spec.dim(0), Tm = spec.dim(1);
  for (std::size_t py = 0; py < h; ++py)
    for (std::size_t px = 0; px < w; ++px) {
      const std::size_t f = F - 1 - std::min<std::size_t>(F - 1, py * F / h);
      const std::size_t t = std::min<std::size_t>(Tm - 1, px * Tm / w);
      std::uint8_t r, g, b;
      colormap((spec(f, t) - vmin) / (vmax - vmin + 1e-12), r, g, b);
      img.set(x0 + px, y0 + py, r, g, b);
    }
}

// Grid of labeled heatmaps (rows x cols); shared color scale.
inline Image heatmap_grid(const std::vector<TensorD>& specs,
                          const std::vector<std::string>& labels, std::size_t cols,
                          std::size_t cell_w = 160, std::size_t cell_h = 120) {
  const std::size_t rows = (specs.size() + cols - 1) / cols;
  const std::size_t margin = 14, pad = 6;
  Image img(cols * (cell_w + pad) + pad, rows * (cell_h + margin + pad) + pad);
  double vmin = 1e300, vmax = -1e300;
  for (const auto& s : specs) {
    vmin = std::min(vmin, static_cast<double>(s.min()));
    vmax = std::max(vmax, static_cast<double>(s.max()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::size_t r = i / cols, c = i % cols;
    const std::size_t x0 = pad + c * (cell_w + pad);
    const std::size_t y0 = pad + r * (cell_h + margin + pad);
    if (i < labels.size()) draw_text(img, x0, y0, labels[i]);
    draw_heatmap(img, x0, y0 + margin - 2, cell_w, cell_h, specs[i], vmin, vmax);
  }
  return img;
}

struct Series {
  std::string label;
  std::vector<double> y;
};

// Line chart with axes and tick labels; x is the series index.
inline void draw_chart(Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                       const std::vector<Series>& series, const std::string& title,
                       const std::vector<std::string>& x_labels = {}) {
  static const std::uint8_t palette[6][3] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                             {214, 39, 40},  {148, 103, 189}, {140, 86, 75}};
  double lo = 1e300, hi = -1e300;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (n == 0) return;
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  const double span = hi - lo;
  lo -= 0.08 * span;
  hi += 0.08 * span;

  const std::size_t axis_l = x0 + 44, axis_b = y0 + h - 26, axis_t = y0 + 18, axis_r = x0 + w - 8;
  draw_text(img, x0 + 4, y0 + 4, title);
  draw_line(img, axis_l, axis_t, axis_l, axis_b, 0, 0, 0);
  draw_line(img, axis_l, axis_b, axis_r, axis_b, 0, 0, 0);

  auto ypix = [&](double v) {
    return axis_b - (v - lo) / (hi - lo) * (axis_b - axis_t);
  };
  auto xpix = [&](std::size_t i) {
    return n > 1 ? axis_l + static_cast<double>(i) * (axis_r - axis_l) / (n - 1) : (axis_l + axis_r) / 2.0;
  };

  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const double yy = ypix(v);
    draw_line(img, axis_l - 3, yy, axis_l, yy, 0, 0, 0);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    draw_text(img, x0 + 2, static_cast<std::size_t>(yy) - 3, buf);
  }
  for (std::size_t i = 0; i < x_labels.size() && i < n; ++i) {
    const double xx = xpix(i);
    draw_line(img, xx, axis_b, xx, axis_b + 3, 0, 0, 0);
    // vertical-ish label: truncate to fit
    std::string lab = x_labels[i].substr(0, 4);
    draw_text(img, static_cast<std::size_t>(xx) - 8, axis_b + 6, lab);
  }

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto* col = palette[si % 6];
    const auto& ys = series[si].y;
    for (std::size_t i = 1; i < ys.size(); ++i)
      draw_line(img, xpix(i - 1), ypix(ys[i - 1]), xpix(i), ypix(ys[i]), col[0], col[1], col[2]);
    draw_text(img, axis_l + 6 + 90 * si, axis_t - 12, series[si].label.substr(0, 12), col[0],
              col[1], col[2]);
  }
}

inline Image line_plot(const std::vector<Series>& series, const std::string& title,
                       const std::vector<std::string>& x_labels = {}, std::size_t w = 560,
                       std::size_t h = 360) {
  Image img(w, h);
  draw_chart(img, 0, 0, w, h, series, title, x_labels);
  return img;
}

// Two charts side by side (the Fig. 2 layout: MI panel + accuracy panel).
inline Image two_panel_plot(const std::vector<Series>& left, const std::string& left_title,
                            const std::vector<Series>& right, const std::string& right_title,
                            const std::vector<std::string>& x_labels = {}) {
  const std::size_t w = 520, h = 360;
  Image img(2 * w + 12, h);
  draw_chart(img, 0, 0, w, h, left, left_title, x_labels);
  draw_chart(img, w + 12, 0, w, h, right, right_title, x_labels);
  return img;
}

}  // namespace umc::plot
