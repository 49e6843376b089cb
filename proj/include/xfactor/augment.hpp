#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "xfactor/image.hpp"
#include "xfactor/rng.hpp"

namespace xfactor {

// Patch-grid visibility mask. Masks act as attention masks, never as pixel
// zeroing, so masked patch content is provably invisible to the model.
struct PartitionMask {
  int rows = 0, cols = 0;
  std::vector<uint8_t> grid;  // true = visible
  int partition_id = -1;      // 0 top/bottom, 1 left/right, 2 diagonal, -1 unmasked

  bool visible(int r, int c) const { return grid[static_cast<size_t>(r) * cols + c] != 0; }
  int popcount() const {
    int n = 0;
    for (uint8_t v : grid) n += v != 0;
    return n;
  }
  static PartitionMask all_true(int rows, int cols) {
    PartitionMask m;
    m.rows = rows;
    m.cols = cols;
    m.grid.assign(static_cast<size_t>(rows) * cols, 1);
    return m;
  }
};

// Splits the four patch-grid quadrants into two equal-area groups. Exactly
// three pairings exist; with probability p_nomask both masks are all-true.
inline std::pair<PartitionMask, PartitionMask> quadrant_partition(uint64_t seed, int rows,
                                                                  int cols,
                                                                  double p_nomask = 0.1) {
  if (rows % 2 != 0 || cols % 2 != 0)
    throw std::invalid_argument("quadrant_partition requires even grid dimensions");
  Rng rng(Rng::mix(seed, 0x71756164));
  if (rng.uniform() < p_nomask)
    return {PartitionMask::all_true(rows, cols), PartitionMask::all_true(rows, cols)};

  const int pairing = static_cast<int>(rng.uniform_int(3));
  const bool swap = rng.uniform() < 0.5;
  PartitionMask a, b;
  a.rows = b.rows = rows;
  a.cols = b.cols = cols;
  a.partition_id = b.partition_id = pairing;
  a.grid.assign(static_cast<size_t>(rows) * cols, 0);
  b.grid.assign(static_cast<size_t>(rows) * cols, 0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int qr = r < rows / 2 ? 0 : 1;  // 0 = top
      const int qc = c < cols / 2 ? 0 : 1;  // 0 = left
      bool in_a = false;
      switch (pairing) {
        case 0: in_a = qr == 0; break;             // {TL,TR} vs {BL,BR}
        case 1: in_a = qc == 0; break;             // {TL,BL} vs {TR,BR}
        case 2: in_a = qr == qc; break;            // {TL,BR} vs {TR,BL}
      }
      if (swap) in_a = !in_a;
      (in_a ? a : b).grid[static_cast<size_t>(r) * cols + c] = 1;
    }
  return {a, b};
}

struct JitterRanges {
  double brightness_lo = 0.7, brightness_hi = 1.3;
  double contrast_lo = 0.7, contrast_hi = 1.3;
  double saturation_lo = 0.7, saturation_hi = 1.3;
  double hue_shift = 0.1;    // +- turns
  double blur_sigma_max = 1.5;
};

struct JitterParams {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;       // turns
  double blur_sigma = 0.0;

  static JitterParams identity() { return {}; }
};

inline JitterParams sample_jitter(Rng& rng, const JitterRanges& ranges) {
  JitterParams p;
  p.brightness = rng.uniform(ranges.brightness_lo, ranges.brightness_hi);
  p.contrast = rng.uniform(ranges.contrast_lo, ranges.contrast_hi);
  p.saturation = rng.uniform(ranges.saturation_lo, ranges.saturation_hi);
  p.hue = rng.uniform(-ranges.hue_shift, ranges.hue_shift);
  p.blur_sigma = rng.uniform(0.0, ranges.blur_sigma_max);
  return p;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    s += k[i + radius];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Order: brightness, contrast (0.5-anchored), saturation, hue rotation,
// Gaussian blur (truncated at 3 sigma, border-renormalized), clamp to [0,1].
// Identity parameters leave the image bit-exact.
inline Image apply_photometric(const Image& image, const JitterParams& p) {
  Image out = image;
  const bool color_identity =
      p.brightness == 1.0 && p.contrast == 1.0 && p.saturation == 1.0 && p.hue == 0.0;
  if (!color_identity) {
    const double ang = p.hue * 6.283185307179586;
    const double ch = std::cos(ang), sh = std::sin(ang);
    for (size_t i = 0; i < out.data.size(); i += 3) {
      double r = out.data[i], g = out.data[i + 1], b = out.data[i + 2];
      r *= p.brightness;
      g *= p.brightness;
      b *= p.brightness;
      r = (r - 0.5) * p.contrast + 0.5;
      g = (g - 0.5) * p.contrast + 0.5;
      b = (b - 0.5) * p.contrast + 0.5;
      const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
      r = gray + (r - gray) * p.saturation;
      g = gray + (g - gray) * p.saturation;
      b = gray + (b - gray) * p.saturation;
      if (p.hue != 0.0) {
        // hue rotation in YIQ space
        const double y = 0.299 * r + 0.587 * g + 0.114 * b;
        const double ii = 0.596 * r - 0.274 * g - 0.322 * b;
        const double q = 0.211 * r - 0.523 * g + 0.312 * b;
        const double ir = ii * ch - q * sh;
        const double qr = ii * sh + q * ch;
        r = y + 0.956 * ir + 0.621 * qr;
        g = y - 0.272 * ir - 0.647 * qr;
        b = y - 1.106 * ir + 1.703 * qr;
      }
      out.data[i] = static_cast<float>(r);
      out.data[i + 1] = static_cast<float>(g);
      out.data[i + 2] = static_cast<float>(b);
    }
  }
  if (p.blur_sigma > 0.0) {
    const auto kernel = gaussian_kernel(p.blur_sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const int h = out.height, w = out.width;
    std::vector<float> tmp(out.data.size(), 0.0f);
    // vertical pass
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc[3] = {0, 0, 0};
        double wsum = 0;
        for (int j = -radius; j <= radius; ++j) {
          const int rr = r + j;
          if (rr < 0 || rr >= h) continue;
          const double kv = kernel[j + radius];
          wsum += kv;
          const float* s = out.pixel(rr, c);
          for (int ch2 = 0; ch2 < 3; ++ch2) acc[ch2] += kv * s[ch2];
        }
        float* d = tmp.data() + (static_cast<size_t>(r) * w + c) * 3;
        for (int ch2 = 0; ch2 < 3; ++ch2) d[ch2] = static_cast<float>(acc[ch2] / wsum);
      }
    // horizontal pass
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc[3] = {0, 0, 0};
        double wsum = 0;
        for (int j = -radius; j <= radius; ++j) {
          const int cc = c + j;
          if (cc < 0 || cc >= w) continue;
          const double kv = kernel[j + radius];
          wsum += kv;
          const float* s = tmp.data() + (static_cast<size_t>(r) * w + cc) * 3;
          for (int ch2 = 0; ch2 < 3; ++ch2) acc[ch2] += kv * s[ch2];
        }
        float* d = out.pixel(r, c);
        for (int ch2 = 0; ch2 < 3; ++ch2) d[ch2] = static_cast<float>(acc[ch2] / wsum);
      }
  }
  if (!color_identity || p.blur_sigma > 0.0)
    for (auto& v : out.data) v = std::min(std::max(v, 0.0f), 1.0f);
  return out;
}

struct AugmentConfig {
  double p_nomask = 0.1;
  JitterRanges jitter;
  bool per_frame_partition = false;  // multi-view: one partition per view by default
};

// One pose-preserving augmented rendition of a frame set: jittered frames
// plus the patch-visibility mask. Poses are never part of the output.
struct AugmentedView {
  std::vector<Image> frames;
  PartitionMask mask;
  JitterParams jitter;
};

inline std::pair<AugmentedView, AugmentedView> make_augmented_views(
    const std::vector<Image>& frames, uint64_t seed, int grid_rows, int grid_cols,
    const AugmentConfig& cfg = {}) {
  auto [mask_a, mask_b] = quadrant_partition(seed, grid_rows, grid_cols, cfg.p_nomask);
  Rng rng(Rng::mix(seed, 0x6a697474));
  const bool nomask = mask_a.partition_id < 0;
  const JitterParams ja = sample_jitter(rng, cfg.jitter);
  const JitterParams jb = nomask ? ja : sample_jitter(rng, cfg.jitter);
  AugmentedView a{{}, mask_a, ja}, b{{}, mask_b, jb};
  for (const Image& f : frames) {
    a.frames.push_back(apply_photometric(f, ja));
    b.frames.push_back(nomask ? a.frames.back() : apply_photometric(f, jb));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace xfactor
