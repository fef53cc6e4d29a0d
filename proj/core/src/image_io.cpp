// SPDX-License-Identifier: Apache-2.0
#include "countadapt/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include <png.h>

#include "countadapt/common.hpp"

namespace countadapt {
namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// Skips whitespace and '#' comments between PNM header tokens.
int read_pnm_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int value = -1;
  if (!(in >> value)) throw Error(ErrorCode::format_error, "malformed PNM header");
  return value;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw Error(ErrorCode::format_error, path.string() + ": only binary P5/P6 supported");
  }
  const int channels = magic[1] == '5' ? 1 : 3;
  const int width = read_pnm_int(in);
  const int height = read_pnm_int(in);
  const int maxval = read_pnm_int(in);
  in.get();  // single whitespace before raster
  if (width < 1 || height < 1 || maxval < 1 || maxval > 65535) {
    throw Error(ErrorCode::format_error, path.string() + ": bad PNM dimensions");
  }
  Image img(height, width, channels);
  const bool wide = maxval > 255;
  const std::size_t n = img.data.size();
  std::vector<unsigned char> raw(n * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw Error(ErrorCode::format_error, path.string() + ": truncated raster");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = wide ? (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
    img.data[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

struct PngReadDeleter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadDeleter() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  PngReadDeleter guard;
  guard.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!guard.png) throw Error(ErrorCode::io_error, "libpng init failed");
  guard.info = png_create_info_struct(guard.png);
  if (!guard.info) throw Error(ErrorCode::io_error, "libpng init failed");

  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int channels = 0;
  if (setjmp(png_jmpbuf(guard.png))) {
    throw Error(ErrorCode::format_error, path.string() + ": invalid PNG");
  }
  png_init_io(guard.png, fp.get());
  png_read_info(guard.png, guard.info);
  png_set_expand(guard.png);
  png_set_strip_16(guard.png);
  png_set_strip_alpha(guard.png);
  png_read_update_info(guard.png, guard.info);
  width = png_get_image_width(guard.png, guard.info);
  height = png_get_image_height(guard.png, guard.info);
  channels = png_get_channels(guard.png, guard.info);
  pixels.resize(static_cast<std::size_t>(width) * height * channels);
  rows.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = pixels.data() + std::size_t{r} * width * channels;
  png_read_image(guard.png, rows.data());

  Image img(static_cast<int>(height), static_cast<int>(width), channels == 1 ? 1 : 3);
  for (std::size_t i = 0, n = std::size_t{width} * height; i < n; ++i) {
    for (int c = 0; c < img.channels; ++c) {
      img.data[i * img.channels + c] = pixels[i * channels + c] / 255.0;
    }
  }
  return img;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
  throw Error(ErrorCode::format_error, path.string() + ": unsupported image extension");
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorCode::invalid_argument, "PNM output needs 1 or 3 channels");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n'
      << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.data.size());
  std::transform(image.data.begin(), image.data.end(), raw.begin(), [](double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  });
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error(ErrorCode::io_error, "short write to " + path.string());
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (height < 1 || width < 1 || image.empty()) {
    throw Error(ErrorCode::invalid_argument, "resize target must be at least 1x1");
  }
  Image out(height, width, image.channels);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int r = 0; r < height; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int c = 0; c < width; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < image.channels; ++ch) {
        const double top = image.at(y0, x0, ch) * (1 - wx) + image.at(y0, x1, ch) * wx;
        const double bottom = image.at(y1, x0, ch) * (1 - wx) + image.at(y1, x1, ch) * wx;
        out.at(r, c, ch) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

}  // namespace countadapt
