// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dataset generator: seeded value-noise background with 1-3 filled
// ellipses as the foreground class; the mask is the exact rasterization of
// the ellipse inequality.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "polypseg/image_io.hpp"
#include "polypseg/rng.hpp"

namespace polypseg {

namespace fs = std::filesystem;

namespace {

std::uint64_t sample_seed(std::uint64_t seed, int index) {
  return seed ^ (static_cast<std::uint64_t>(index + 1) * 0x9e3779b97f4a7c15ULL);
}

}  // namespace

std::vector<SynthEllipse> synth_sample_ellipses(std::uint64_t seed, int index,
                                                int size) {
  Rng rng(sample_seed(seed, index));
  const int count = 1 + static_cast<int>(rng.next_below(3));
  std::vector<SynthEllipse> out;
  out.reserve(count);
  for (int e = 0; e < count; ++e) {
    SynthEllipse el;
    el.cx = rng.next_uniform(0.25, 0.75) * size;
    el.cy = rng.next_uniform(0.25, 0.75) * size;
    el.a = rng.next_uniform(0.10, 0.28) * size;
    el.b = rng.next_uniform(0.10, 0.28) * size;
    // Bright, saturated foreground; distinct per ellipse.
    for (int c = 0; c < 3; ++c) {
      el.color[c] = static_cast<std::uint8_t>(150 + rng.next_below(100));
    }
    out.push_back(el);
  }
  return out;
}

SampleManifest gen_synthetic(int n, int size, std::uint64_t seed,
                             const std::string& out_dir) {
  if (n < 1) throw ContractError("gen_synthetic: n must be >= 1");
  if (size < 1) throw ContractError("gen_synthetic: size must be >= 1");
  fs::create_directories(out_dir);

  std::string manifest_csv = "image,mask\n";
  for (int i = 0; i < n; ++i) {
    // The background stream is separate from the ellipse stream so the
    // ellipse parameters stay reproducible through synth_sample_ellipses.
    Rng bg(sample_seed(seed, i) ^ 0xb5297a4d3f84d5a3ULL);
    const auto ellipses = synth_sample_ellipses(seed, i, size);

    ImageBuffer img;
    img.w = img.h = size;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(size) * size * 3);
    ImageBuffer mask;
    mask.w = mask.h = size;
    mask.channels = 1;
    mask.pixels.resize(static_cast<std::size_t>(size) * size);

    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const SynthEllipse* hit = nullptr;
        for (const auto& el : ellipses) {
          const double dx = (x - el.cx) / el.a;
          const double dy = (y - el.cy) / el.b;
          if (dx * dx + dy * dy <= 1.0) hit = &el;  // later ellipses paint over
        }
        if (hit != nullptr) {
          const int jitter = static_cast<int>(bg.next_below(20));
          for (int c = 0; c < 3; ++c) {
            int v = hit->color[c] - jitter;
            img.at(y, x, c) = static_cast<std::uint8_t>(v < 0 ? 0 : v);
          }
          mask.at(y, x) = 255;
        } else {
          for (int c = 0; c < 3; ++c) {
            img.at(y, x, c) = static_cast<std::uint8_t>(20 + bg.next_below(80));
          }
          mask.at(y, x) = 0;
        }
      }
    }

    char img_name[32], mask_name[32];
    std::snprintf(img_name, sizeof(img_name), "img_%03d.ppm", i);
    std::snprintf(mask_name, sizeof(mask_name), "mask_%03d.pgm", i);
    write_pnm(img, (fs::path(out_dir) / img_name).string());
    write_pnm(mask, (fs::path(out_dir) / mask_name).string());
    manifest_csv += std::string(img_name) + "," + mask_name + "\n";
  }

  const std::string manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  std::ofstream f(manifest_path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest '" + manifest_path + "'");
  f << manifest_csv;
  f.close();
  return load_manifest(manifest_path);
}

}  // namespace polypseg
