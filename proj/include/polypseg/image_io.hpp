// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

/// 8-bit interleaved row-major image, 1 (gray) or 3 (RGB) channels.
struct ImageBuffer {
  int w = 0;
  int h = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
};

/// Binary PGM (P5) or PPM (P6), maxval 255 only. Parse errors carry byte
/// offsets. Comments and general whitespace are accepted in the header.
ImageBuffer read_pnm(const std::string& path);

/// Writes `P5 w h 255\n` / `P6 w h 255\n` (single spaces) followed by the
/// raw payload; byte-deterministic.
void write_pnm(const ImageBuffer& img, const std::string& path);

/// Pixel-center aligned (src = (dst+0.5)*scale - 0.5) with edge clamping.
ImageBuffer resize_bilinear(const ImageBuffer& img, int out_w, int out_h);

/// Nearest source center, ties toward the lower index. The output value set
/// is a subset of the input's, so binary masks stay binary.
ImageBuffer resize_nearest(const ImageBuffer& img, int out_w, int out_h);

/// byte/255 into (1,3,h,w); grayscale inputs are replicated across channels.
Tensor normalize_image(const ImageBuffer& img);

/// (1,1,h,w), 1.0f iff byte >= cutoff. 3-channel inputs use channel 0.
Tensor binarize_mask(const ImageBuffer& img, int cutoff = 128);

/// Ordered (image, mask) path pairs. Paths are stored fully resolved.
struct SampleManifest {
  std::vector<std::pair<std::string, std::string>> samples;
};

/// CSV with exact header `image,mask`; relative paths resolve against the
/// manifest's directory. Every referenced file must exist.
SampleManifest load_manifest(const std::string& path);

/// Deterministic synthetic dataset: noisy background plus 1-3 filled
/// ellipses with distinct intensities; masks are the exact ellipse
/// rasterization. Writes img_###.ppm / mask_###.pgm and manifest.csv under
/// out_dir and returns the loaded manifest.
SampleManifest gen_synthetic(int n, int size, std::uint64_t seed,
                             const std::string& out_dir);

/// Ellipse parameters (pixel units) behind one synthetic sample; exposed so
/// the rasterization can be verified against the defining inequality
/// (x-cx)^2/a^2 + (y-cy)^2/b^2 <= 1.
struct SynthEllipse {
  double cx, cy, a, b;
  std::uint8_t color[3];
};
std::vector<SynthEllipse> synth_sample_ellipses(std::uint64_t seed, int index,
                                                int size);

}  // namespace polypseg
