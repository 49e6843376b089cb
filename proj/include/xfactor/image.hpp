#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "xfactor/tensor.hpp"

namespace xfactor {

// HxWx3 float image, values in [0,1], row-major.
struct Image {
  int height = 0, width = 0;
  std::vector<float> data;  // h * w * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0f) {}

  float* pixel(int r, int c) { return data.data() + (static_cast<size_t>(r) * width + c) * 3; }
  const float* pixel(int r, int c) const {
    return data.data() + (static_cast<size_t>(r) * width + c) * 3;
  }

  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> d(data.size());
    for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<T>(data[i]);
    NoGradGuard ng;
    return Tensor<T>(Shape{height, width, 3}, std::move(d));
  }

  template <typename T>
  static Image from_tensor(const Tensor<T>& t) {
    if (t.rank() != 3 || t.dim(2) != 3) throw std::invalid_argument("expected [H,W,3] tensor");
    Image img(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)));
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(t.data()[i]);
    return img;
  }
};

inline double image_mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("image size mismatch");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return s / a.data.size();
}

// 2x box downsample; requires even height and width.
inline Image downsample2x(const Image& img) {
  if (img.height % 2 != 0 || img.width % 2 != 0)
    throw std::invalid_argument("downsample2x: dimensions must be even");
  Image out(img.height / 2, img.width / 2);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      float* o = out.pixel(r, c);
      for (int dr = 0; dr < 2; ++dr)
        for (int dc = 0; dc < 2; ++dc) {
          const float* p = img.pixel(2 * r + dr, 2 * c + dc);
          for (int ch = 0; ch < 3; ++ch) o[ch] += 0.25f * p[ch];
        }
    }
  return out;
}

inline double image_l1(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("image size mismatch");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    s += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
  return s / a.data.size();
}

namespace detail {

inline void png_append_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

inline void png_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> buf;
  png_append_be32(buf, static_cast<uint32_t>(payload.size()));
  buf.insert(buf.end(), type, type + 4);
  buf.insert(buf.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(crc32(0L, reinterpret_cast<const Bytef*>(type), 4),
            payload.empty() ? nullptr : payload.data(), static_cast<uInt>(payload.size())));
  png_append_be32(buf, crc);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

// Minimal 8-bit RGB PNG writer backed by zlib.
inline void write_png(const std::string& path, const Image& img) {
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(img.height) * (img.width * 3 + 1));
  for (int r = 0; r < img.height; ++r) {
    raw.push_back(0);  // filter: none
    for (int c = 0; c < img.width; ++c) {
      const float* p = img.pixel(r, c);
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::min(std::max(p[ch], 0.0f), 1.0f);
        raw.push_back(static_cast<uint8_t>(std::lround(v * 255.0f)));
      }
    }
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: zlib compression failed");
  comp.resize(comp_len);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("png: cannot open " + path);
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  os.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<uint8_t> ihdr;
  detail::png_append_be32(ihdr, static_cast<uint32_t>(img.width));
  detail::png_append_be32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::png_chunk(os, "IHDR", ihdr);
  detail::png_chunk(os, "IDAT", comp);
  detail::png_chunk(os, "IEND", {});
  if (!os) throw std::runtime_error("png: write failed for " + path);
}

}  // namespace xfactor
