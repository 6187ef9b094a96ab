#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include <png.h>

#include "unidiff/errors.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

/// Writes an 8-bit RGB PNG from interleaved rows (h * w * 3 bytes).
inline void write_png_rgb(const std::filesystem::path& path, int w, int h, const std::vector<unsigned char>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(w) * h * 3) throw ShapeError("png buffer size mismatch");
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw IoError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(f) != 0) throw IoError("close failed for '" + path.string() + "'");
}

/// Horizontal strip of (3, h, w) tiles with values mapped by `lo`..`hi` -> 0..255.
inline void write_png_strip(const std::filesystem::path& path, const std::vector<Tensor<float>>& tiles, float lo = 0,
                            float hi = 1) {
  if (tiles.empty()) throw ParameterError("no tiles to write");
  const int h = tiles[0].dim(1), w = tiles[0].dim(2), cols = static_cast<int>(tiles.size());
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * cols * 3);
  for (int k = 0; k < cols; ++k) {
    const Tensor<float>& t = tiles[static_cast<std::size_t>(k)];
    if (t.rank() != 3 || t.dim(1) != h || t.dim(2) != w) throw ShapeError("tile shapes differ");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          const float v = t.dim(0) == 3 ? t[(static_cast<std::size_t>(c) * h + y) * w + x] : t[static_cast<std::size_t>(y) * w + x];
          const float u = std::clamp((v - lo) / (hi - lo), 0.0f, 1.0f);
          rgb[((static_cast<std::size_t>(y) * w * cols) + k * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(u * 255));
        }
  }
  write_png_rgb(path, w * cols, h, rgb);
}

}  // namespace unidiff
