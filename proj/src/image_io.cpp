// SPDX-License-Identifier: Apache-2.0
#include "polypseg/image_io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace polypseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNM
// ---------------------------------------------------------------------------

namespace {

class PnmParser {
public:
  PnmParser(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  // Skips whitespace and '#' comments (to end of line).
  void skip_space() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int parse_int(const char* what) {
    skip_space();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      value = value * 10 + (bytes_[pos_] - '0');
      ++pos_;
      if (value > 1 << 30) {
        throw FormatError(path_ + ": " + std::string(what) + " out of range", start);
      }
    }
    if (pos_ == start) {
      throw FormatError(path_ + ": expected " + std::string(what), pos_);
    }
    return static_cast<int>(value);
  }

  std::size_t pos() const { return pos_; }
  const std::string& bytes() const { return bytes_; }
  const std::string& path() const { return path_; }

  void advance(std::size_t n) { pos_ += n; }

private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

ImageBuffer read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  PnmParser p(std::move(bytes), path);

  if (p.bytes().size() < 2 || p.bytes()[0] != 'P' ||
      (p.bytes()[1] != '5' && p.bytes()[1] != '6')) {
    throw FormatError(path + ": not a binary PGM/PPM (expected P5 or P6 magic)", 0);
  }
  const int channels = p.bytes()[1] == '5' ? 1 : 3;
  p.advance(2);

  ImageBuffer img;
  img.channels = channels;
  img.w = p.parse_int("width");
  img.h = p.parse_int("height");
  if (img.w <= 0 || img.h <= 0) {
    throw FormatError(path + ": image dimensions must be positive", p.pos());
  }
  const int maxval = p.parse_int("maxval");
  if (maxval != 255) {
    throw FormatError(path + ": unsupported maxval " + std::to_string(maxval) +
                          " (only 255)",
                      p.pos());
  }
  // Exactly one whitespace byte separates the header from the payload.
  if (p.pos() >= p.bytes().size()) {
    throw FormatError(path + ": truncated header", p.pos());
  }
  const char sep = p.bytes()[p.pos()];
  if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') {
    throw FormatError(path + ": missing whitespace before payload", p.pos());
  }
  p.advance(1);

  const std::size_t need =
      static_cast<std::size_t>(img.w) * img.h * channels;
  const std::size_t have = p.bytes().size() - p.pos();
  if (have < need) {
    throw FormatError(path + ": short payload, need " + std::to_string(need) +
                          " bytes but only " + std::to_string(have) + " remain",
                      p.pos());
  }
  if (have > need) {
    throw FormatError(path + ": trailing bytes after payload", p.pos() + need);
  }
  img.pixels.assign(p.bytes().begin() + static_cast<std::ptrdiff_t>(p.pos()),
                    p.bytes().end());
  return img;
}

void write_pnm(const ImageBuffer& img, const std::string& path) {
  if (img.w <= 0 || img.h <= 0) {
    throw ContractError("write_pnm: image dimensions must be positive");
  }
  if (img.channels != 1 && img.channels != 3) {
    throw ContractError("write_pnm: channels must be 1 or 3");
  }
  const std::size_t need =
      static_cast<std::size_t>(img.w) * img.h * img.channels;
  if (img.pixels.size() != need) {
    throw ContractError("write_pnm: pixel buffer has " +
                        std::to_string(img.pixels.size()) + " bytes, expected " +
                        std::to_string(need));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << (img.channels == 1 ? "P5" : "P6") << ' ' << img.w << ' ' << img.h
    << ' ' << 255 << '\n';
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

namespace {

void check_resize_target(int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) {
    throw ContractError("resize: target dimensions must be positive");
  }
}

}  // namespace

ImageBuffer resize_bilinear(const ImageBuffer& img, int out_w, int out_h) {
  check_resize_target(out_w, out_h);
  if (out_w == img.w && out_h == img.h) return img;
  ImageBuffer out;
  out.w = out_w;
  out.h = out_h;
  out.channels = img.channels;
  out.pixels.resize(static_cast<std::size_t>(out_w) * out_h * img.channels);

  const double sx = static_cast<double>(img.w) / out_w;
  const double sy = static_cast<double>(img.h) / out_h;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    if (fy < 0) fy = 0;
    if (fy > img.h - 1) fy = img.h - 1;
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      if (fx < 0) fx = 0;
      if (fx > img.w - 1) fx = img.w - 1;
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double v00 = img.at(y0, x0, c), v01 = img.at(y0, x1, c);
        const double v10 = img.at(y1, x0, c), v11 = img.at(y1, x1, c);
        const double top = v00 + (v01 - v00) * wx;
        const double bot = v10 + (v11 - v10) * wx;
        double v = top + (bot - top) * wy;
        if (v < 0) v = 0;
        if (v > 255) v = 255;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

ImageBuffer resize_nearest(const ImageBuffer& img, int out_w, int out_h) {
  check_resize_target(out_w, out_h);
  if (out_w == img.w && out_h == img.h) return img;
  ImageBuffer out;
  out.w = out_w;
  out.h = out_h;
  out.channels = img.channels;
  out.pixels.resize(static_cast<std::size_t>(out_w) * out_h * img.channels);

  auto nearest = [](int dst, double scale, int limit) {
    // Ties go to the lower index: ceil(src - 0.5).
    const double src = (dst + 0.5) * scale - 0.5;
    int idx = static_cast<int>(std::ceil(src - 0.5));
    if (idx < 0) idx = 0;
    if (idx > limit - 1) idx = limit - 1;
    return idx;
  };

  const double sx = static_cast<double>(img.w) / out_w;
  const double sy = static_cast<double>(img.h) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const int iy = nearest(y, sy, img.h);
    for (int x = 0; x < out_w; ++x) {
      const int ix = nearest(x, sx, img.w);
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(iy, ix, c);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion
// ---------------------------------------------------------------------------

Tensor normalize_image(const ImageBuffer& img) {
  Tensor t({1, 3, img.h, img.w});
  for (int c = 0; c < 3; ++c) {
    const int src_c = img.channels == 3 ? c : 0;
    float* dst = t.plane(0, c);
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        dst[static_cast<std::int64_t>(y) * img.w + x] =
            static_cast<float>(img.at(y, x, src_c)) / 255.0f;
      }
    }
  }
  return t;
}

Tensor binarize_mask(const ImageBuffer& img, int cutoff) {
  Tensor t({1, 1, img.h, img.w});
  float* dst = t.plane(0, 0);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      dst[static_cast<std::int64_t>(y) * img.w + x] =
          img.at(y, x, 0) >= cutoff ? 1.0f : 0.0f;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

SampleManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();

  std::string line;
  if (!std::getline(f, line)) {
    throw FormatError(path + ": empty manifest", 0);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image,mask") {
    throw FormatError(path + ": manifest header must be exactly 'image,mask', got '" +
                          line + "'",
                      0);
  }

  SampleManifest m;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw FormatError(path + ": line " + std::to_string(lineno) +
                            " must have exactly two columns",
                        0);
    }
    std::string image = line.substr(0, comma);
    std::string mask = line.substr(comma + 1);
    if (image.empty() || mask.empty()) {
      throw FormatError(path + ": line " + std::to_string(lineno) +
                            " has an empty path",
                        0);
    }
    if (image == mask) {
      throw ContractError(path + ": line " + std::to_string(lineno) +
                          ": image and mask paths must differ");
    }
    auto resolve = [&base](const std::string& p) {
      fs::path fp(p);
      return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
    };
    m.samples.emplace_back(resolve(image), resolve(mask));
  }
  if (m.samples.empty()) {
    throw ContractError(path + ": manifest lists no samples");
  }

  std::string missing;
  for (const auto& [image, mask] : m.samples) {
    if (!fs::exists(image)) missing += "\n  " + image;
    if (!fs::exists(mask)) missing += "\n  " + mask;
  }
  if (!missing.empty()) {
    throw IoError(path + ": manifest references missing files:" + missing);
  }
  return m;
}

}  // namespace polypseg
