#include "dar/image_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

#include <png.h>

#include "dar/error.hpp"

namespace dar {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const fs::path& path, int width, int height, int color_type, int channels,
               const std::vector<unsigned char>& pixels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_gray(const fs::path& path, const Image2D& image) {
  std::vector<unsigned char> px(image.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(image.values[i], 0.0f, 1.0f) * 255.0f));
  }
  write_png(path, image.cols, image.rows, PNG_COLOR_TYPE_GRAY, 1, px);
}

Image2D read_png_gray(const fs::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("PNG decode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + " is not an 8-bit grayscale PNG");
  }
  Image2D out(h, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (int r = 0; r < h; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < w; ++c) out(r, c) = row[static_cast<std::size_t>(c)] / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_line_plot(const fs::path& path, const std::vector<PlotSeries>& series, int width, int height) {
  constexpr std::array<std::array<unsigned char, 3>, 6> palette{{
      {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};
  std::vector<unsigned char> px(static_cast<std::size_t>(width) * height * 3, 255);
  auto put = [&](int x, int y, const std::array<unsigned char, 3>& c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &px[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };
  auto line = [&](int x0, int y0, int x1, int y1, const std::array<unsigned char, 3>& c) {
    const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      put(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  };

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const int left = 50, right = width - 20, top = 20, bottom = height - 40;
  auto sx = [&](double x) { return static_cast<int>(std::lround(left + (x - xmin) / (xmax - xmin) * (right - left))); };
  auto sy = [&](double y) { return static_cast<int>(std::lround(bottom - (y - ymin) / (ymax - ymin) * (bottom - top))); };

  const std::array<unsigned char, 3> grid{225, 225, 225}, axis{0, 0, 0};
  for (int i = 0; i <= 4; ++i) {
    const int gy = top + i * (bottom - top) / 4, gx = left + i * (right - left) / 4;
    line(left, gy, right, gy, grid);
    line(gx, top, gx, bottom, grid);
  }
  line(left, bottom, right, bottom, axis);
  line(left, top, left, bottom, axis);

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto& col = palette[k % palette.size()];
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      const int x = sx(s.x[i]), y = sy(s.y[i]);
      for (int d = -2; d <= 2; ++d) {
        put(x + d, y, col);
        put(x, y + d, col);
      }
      if (i > 0) line(sx(s.x[i - 1]), sy(s.y[i - 1]), x, y, col);
    }
  }
  write_png(path, width, height, PNG_COLOR_TYPE_RGB, 3, px);
}

}  // namespace dar
