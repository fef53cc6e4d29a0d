// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

namespace countadapt {

/// H×W×C intensity grid, interleaved (HWC) row-major, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  double at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Reads 8/16-bit binary PGM (P5), PPM (P6) or PNG. Values scaled to [0, 1].
Image read_image(const std::filesystem::path& path);

/// Writes P5 for one channel, P6 for three. Values are clamped and quantized to 8 bit.
void write_pnm(const Image& image, const std::filesystem::path& path);

/// Bilinear resample; used for the whole-image classification mode.
Image resize_bilinear(const Image& image, int height, int width);

}  // namespace countadapt
