/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "covidcaps/tensor.hpp"

namespace covidcaps {

/// Decoded raster: interleaved samples, 1 (gray) or 3 (RGB) channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::uint32_t max_value = 255;  // 255 for 8-bit, 65535 for 16-bit sources
  std::vector<std::uint16_t> samples;
};

namespace detail {

inline Image decode_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot decode PNG " + path + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool wide = (png.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  // 8-bit sources stay 8-bit sRGB and 16-bit sources stay linear, so no
  // transfer-curve conversion is applied in either case.
  png.format = color ? (wide ? PNG_FORMAT_LINEAR_RGB : PNG_FORMAT_RGB)
                     : (wide ? PNG_FORMAT_LINEAR_Y : PNG_FORMAT_GRAY);
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.channels = color ? 3 : 1;
  img.max_value = wide ? 65535 : 255;
  const std::size_t n = img.width * img.height * img.channels;
  img.samples.resize(n);
  bool ok;
  if (wide) {
    ok = png_image_finish_read(&png, nullptr, img.samples.data(), 0, nullptr) != 0;
  } else {
    std::vector<std::uint8_t> buf(n);
    ok = png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr) != 0;
    std::copy(buf.begin(), buf.end(), img.samples.begin());
  }
  if (!ok) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path + ": " + msg);
  }
  return img;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

extern "C" inline void covidcaps_jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// No objects with non-trivial destructors are created between setjmp and the
// libjpeg calls that may longjmp back.
inline bool decode_jpeg_raw(std::FILE* file, Image& img, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  JSAMPLE* volatile row = nullptr;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = covidcaps_jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    std::free(row);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = static_cast<std::size_t>(cinfo.output_components);
  img.max_value = 255;
  img.samples.resize(img.width * img.height * img.channels);
  const std::size_t stride = img.width * img.channels;
  row = static_cast<JSAMPLE*>(std::malloc(stride));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW ptr = row;
    const std::size_t y = cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &ptr, 1);
    for (std::size_t i = 0; i < stride; ++i) img.samples[y * stride + i] = row[i];
  }
  std::free(row);
  row = nullptr;
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

inline Image decode_jpeg(const std::string& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw IoError("cannot open image " + path);
  Image img;
  char message[JMSG_LENGTH_MAX] = {0};
  const bool ok = decode_jpeg_raw(file, img, message);
  std::fclose(file);
  if (!ok) throw IoError("cannot decode JPEG " + path + ": " + message);
  return img;
}

}  // namespace detail

/// Reads a PNG (8/16-bit, gray/RGB/palette, alpha dropped) or baseline JPEG,
/// sniffing the format from the file signature.
inline Image read_image(const std::string& path) {
  unsigned char sig[8] = {0};
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path);
    in.read(reinterpret_cast<char*>(sig), sizeof sig);
    if (in.gcount() < 3) throw IoError("not an image (too short): " + path);
  }
  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (std::memcmp(sig, png_sig, 8) == 0) return detail::decode_png(path);
  if (sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return detail::decode_jpeg(path);
  throw IoError("unsupported image format (expected PNG or JPEG): " + path);
}

/// Single-channel [1,H,W] in [0,1]. RGB uses Rec. 601 luma weights.
template <std::floating_point T = float>
Tensor<T> to_luminance(const Image& img) {
  Tensor<T> out(Shape{1, img.height, img.width});
  const double scale = 1.0 / static_cast<double>(img.max_value);
  for (std::size_t p = 0; p < img.width * img.height; ++p) {
    double v;
    if (img.channels == 1) {
      v = img.samples[p];
    } else {
      const auto* s = &img.samples[p * img.channels];
      v = 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2];
    }
    out[p] = static_cast<T>(std::clamp(v * scale, 0.0, 1.0));
  }
  return out;
}

/// Bilinear resize of [C,H,W] with half-pixel centres and edge clamping.
/// Resizing to the same extent is an exact copy.
template <std::floating_point T>
Tensor<T> resize_bilinear(const Tensor<T>& src, std::size_t out_h, std::size_t out_w) {
  if (src.rank() != 3) {
    throw DimensionError("resize_bilinear expects [C,H,W], got " +
                         shape_string(src.shape()));
  }
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (h == out_h && w == out_w) return src;
  Tensor<T> out(Shape{c, out_h, out_w});
  auto axis = [](std::size_t o, std::size_t in_n, std::size_t out_n) {
    double pos = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) /
                     static_cast<double>(out_n) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(pos));
    const std::size_t i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, pos - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = axis(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = axis(x, w, out_w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = src.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        out[(ch * out_h + y) * out_w + x] = static_cast<T>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

/// Loads an image file as a [1,H,W] luminance tensor in [0,1].
template <std::floating_point T = float>
Tensor<T> preprocess_image(const std::string& path, std::size_t height = 128,
                           std::size_t width = 128) {
  return resize_bilinear(to_luminance<T>(read_image(path)), height, width);
}

/// Writes an 8-bit grayscale PNG from values in [0,1] ([1,H,W] or [H,W]).
template <std::floating_point T>
void write_png_gray(const std::string& path, const Tensor<T>& pixels) {
  const std::size_t h = pixels.dim(pixels.rank() - 2), w = pixels.dim(pixels.rank() - 1);
  std::vector<std::uint8_t> buf(h * w);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(static_cast<double>(pixels[i]), 0.0, 1.0) * 255.0));
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path + ": " + png.message);
  }
}

}  // namespace covidcaps
