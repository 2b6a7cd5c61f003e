#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dar/volume.hpp"

namespace dar {

/// 8-bit grayscale PNG; values are clamped to [0, 1] and scaled to 0..255.
void write_png_gray(const std::filesystem::path& path, const Image2D& image);
/// Reads an 8-bit grayscale PNG back as values in [0, 1].
Image2D read_png_gray(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal RGB line chart (axes, gridlines, one colour per series). There is
/// no text rendering; the CSV next to it carries the labels and numbers.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, int width = 640,
                     int height = 400);

}  // namespace dar
