// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "polypseg/image_io.hpp"
#include "polypseg/rng.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("read_pnm: minimal single-pixel P5") {
  const std::string path = temp_path("one_px.pgm");
  write_file(path, std::string("P5 1 1 255\n") + '\xff');
  ImageBuffer img = read_pnm(path);
  CHECK(img.w == 1);
  CHECK(img.h == 1);
  CHECK(img.channels == 1);
  CHECK(img.pixels[0] == 255);
  fs::remove(path);
}

TEST_CASE("read_pnm: header comments and whitespace are accepted") {
  const std::string path = temp_path("commented.pgm");
  write_file(path, std::string("P5\n# a comment\n 2\t1 \n255\n") + "\x01\x02");
  ImageBuffer img = read_pnm(path);
  CHECK(img.w == 2);
  CHECK(img.h == 1);
  CHECK(img.pixels[0] == 1);
  CHECK(img.pixels[1] == 2);
  fs::remove(path);
}

TEST_CASE("pnm round-trip is bit-exact") {
  Rng rng(100);
  for (int channels : {1, 3}) {
    ImageBuffer img;
    img.w = 7;
    img.h = 5;
    img.channels = channels;
    img.pixels.resize(static_cast<std::size_t>(7) * 5 * channels);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.next_below(256));
    const std::string path = temp_path("roundtrip.pnm");
    write_pnm(img, path);
    ImageBuffer back = read_pnm(path);
    CHECK(back.w == img.w);
    CHECK(back.h == img.h);
    CHECK(back.channels == img.channels);
    CHECK(back.pixels == img.pixels);

    // write -> read -> write produces identical bytes
    const std::string path2 = temp_path("roundtrip2.pnm");
    write_pnm(back, path2);
    CHECK(read_file(path) == read_file(path2));
    fs::remove(path);
    fs::remove(path2);
  }
}

TEST_CASE("pnm parse errors are distinct and carry offsets") {
  const std::string path = temp_path("bad.pnm");

  write_file(path, "P4 1 1 255\nx");
  CHECK_THROWS_WITH_AS(read_pnm(path), doctest::Contains("P5 or P6"), FormatError);

  write_file(path, std::string("P6 1 1 65535\n") + "abcdef");
  CHECK_THROWS_WITH_AS(read_pnm(path), doctest::Contains("maxval"), FormatError);

  write_file(path, "P5 2 2 255\nab");  // needs 4 payload bytes
  CHECK_THROWS_WITH_AS(read_pnm(path), doctest::Contains("short payload"),
                       FormatError);
  try {
    read_pnm(path);
  } catch (const FormatError& e) {
    CHECK(e.byte_offset() == 11);  // payload starts after the header newline
  }

  write_file(path, std::string("P5 1 1 255\n") + "ab");  // one byte too many
  CHECK_THROWS_WITH_AS(read_pnm(path), doctest::Contains("trailing"), FormatError);
  fs::remove(path);
}

TEST_CASE("golden 2x2 PPM bytes are stable") {
  ImageBuffer img;
  img.w = 2;
  img.h = 2;
  img.channels = 3;
  img.pixels = {255, 0, 0, 0, 255, 0, 0, 0, 255, 17, 34, 51};
  const std::string path = temp_path("golden2x2.ppm");
  write_pnm(img, path);
  const std::string golden = std::string(POLYPSEG_GOLDEN_DIR) + "/rgb_2x2.ppm";
  CHECK(read_file(path) == read_file(golden));
  fs::remove(path);
}

TEST_CASE("write_pnm rejects invalid buffers") {
  ImageBuffer empty;
  CHECK_THROWS_AS(write_pnm(empty, temp_path("zero.pgm")), ContractError);
  ImageBuffer two_ch;
  two_ch.w = two_ch.h = 1;
  two_ch.channels = 2;
  two_ch.pixels = {1, 2};
  CHECK_THROWS_AS(write_pnm(two_ch, temp_path("two.pgm")), ContractError);
}

TEST_CASE("resize: identity returns the input exactly") {
  Rng rng(101);
  ImageBuffer img;
  img.w = 9;
  img.h = 4;
  img.channels = 3;
  img.pixels.resize(9 * 4 * 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.next_below(256));
  CHECK(resize_bilinear(img, 9, 4).pixels == img.pixels);
  CHECK(resize_nearest(img, 9, 4).pixels == img.pixels);
}

TEST_CASE("resize: constant image stays constant") {
  ImageBuffer img;
  img.w = img.h = 6;
  img.channels = 1;
  img.pixels.assign(36, 77);
  for (auto px : resize_bilinear(img, 17, 3).pixels) CHECK(px == 77);
  for (auto px : resize_nearest(img, 17, 3).pixels) CHECK(px == 77);
}

TEST_CASE("resize_nearest: 2x upscale duplicates pixels in 2x2 blocks") {
  // checkerboard
  ImageBuffer img;
  img.w = img.h = 2;
  img.channels = 1;
  img.pixels = {0, 255, 255, 0};
  ImageBuffer up = resize_nearest(img, 4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      CHECK(up.at(y, x) == img.at(y / 2, x / 2));
    }
  }
}

TEST_CASE("resize_nearest: output value set is a subset of the input's") {
  Rng rng(102);
  ImageBuffer img;
  img.w = 13;
  img.h = 7;
  img.channels = 1;
  img.pixels.resize(13 * 7);
  for (auto& p : img.pixels) p = rng.next_below(2) ? 255 : 0;  // binary mask
  std::set<int> in_values(img.pixels.begin(), img.pixels.end());
  for (auto [w, h] : {std::pair{5, 3}, {26, 14}, {13, 20}, {1, 1}}) {
    ImageBuffer out = resize_nearest(img, w, h);
    for (auto px : out.pixels) CHECK(in_values.count(px) == 1);
  }
}

TEST_CASE("resize_bilinear: interior value matches hand interpolation") {
  ImageBuffer img;
  img.w = 2;
  img.h = 1;
  img.channels = 1;
  img.pixels = {0, 100};
  // out width 4: src x = (x+0.5)*0.5 - 0.5 = {-0.25, 0.25, 0.75, 1.25}
  ImageBuffer out = resize_bilinear(img, 4, 1);
  CHECK(out.pixels[0] == 0);    // clamped left edge
  CHECK(out.pixels[1] == 25);   // 0.25 between 0 and 100
  CHECK(out.pixels[2] == 75);
  CHECK(out.pixels[3] == 100);  // clamped right edge
}

TEST_CASE("normalize_image and binarize_mask") {
  ImageBuffer img;
  img.w = 3;
  img.h = 1;
  img.channels = 1;
  img.pixels = {0, 128, 255};
  Tensor t = normalize_image(img);
  CHECK(t.dims == Dims{1, 3, 1, 3});
  CHECK(t.data[0] == 0.0f);
  CHECK(t.data[1] == doctest::Approx(128.0 / 255.0));
  CHECK(t.data[2] == 1.0f);
  // grayscale replicated across the three channels
  CHECK(t.plane(0, 0)[1] == t.plane(0, 1)[1]);
  CHECK(t.plane(0, 0)[1] == t.plane(0, 2)[1]);

  // de-normalize recovers the original bytes
  for (int i = 0; i < 3; ++i) {
    CHECK(static_cast<int>(std::lround(t.data[i] * 255.0f)) == img.pixels[i]);
  }

  ImageBuffer edge;
  edge.w = 2;
  edge.h = 1;
  edge.channels = 1;
  edge.pixels = {127, 128};
  Tensor m = binarize_mask(edge);
  CHECK(m.dims == Dims{1, 1, 1, 2});
  CHECK(m.data[0] == 0.0f);  // 127 < cutoff
  CHECK(m.data[1] == 1.0f);  // 128 >= cutoff

  ImageBuffer all255;
  all255.w = all255.h = 2;
  all255.channels = 1;
  all255.pixels.assign(4, 255);
  for (float v : binarize_mask(all255).data) CHECK(v == 1.0f);
  ImageBuffer all0;
  all0.w = all0.h = 2;
  all0.channels = 1;
  all0.pixels.assign(4, 0);
  for (float v : binarize_mask(all0).data) CHECK(v == 0.0f);
}

TEST_CASE("load_manifest: ordering, resolution and errors") {
  const fs::path dir = fs::temp_directory_path() / "polypseg_manifest_test";
  fs::create_directories(dir);
  // touch the referenced files
  for (const char* name : {"a.ppm", "am.pgm", "b.ppm", "bm.pgm"}) {
    std::ofstream((dir / name)).put('x');
  }
  const std::string mpath = (dir / "manifest.csv").string();

  write_file(mpath, "image,mask\na.ppm,am.pgm\nb.ppm,bm.pgm\n");
  SampleManifest m = load_manifest(mpath);
  REQUIRE(m.samples.size() == 2);
  CHECK(m.samples[0].first == (dir / "a.ppm").string());
  CHECK(m.samples[0].second == (dir / "am.pgm").string());
  CHECK(m.samples[1].first == (dir / "b.ppm").string());

  write_file(mpath, "image,mask\n");
  CHECK_THROWS_AS(load_manifest(mpath), ContractError);  // empty body

  write_file(mpath, "image,mask,extra\na.ppm,am.pgm\n");
  CHECK_THROWS_AS(load_manifest(mpath), FormatError);  // wrong header

  write_file(mpath, "image,mask\na.ppm,am.pgm,oops\n");
  CHECK_THROWS_AS(load_manifest(mpath), FormatError);  // extra column

  write_file(mpath, "image,mask\na.ppm,a.ppm\n");
  CHECK_THROWS_AS(load_manifest(mpath), ContractError);  // identical paths

  write_file(mpath, "image,mask\nmissing.ppm,am.pgm\n");
  CHECK_THROWS_WITH_AS(load_manifest(mpath), doctest::Contains("missing"),
                       IoError);

  fs::remove_all(dir);
}

TEST_CASE("gen_synthetic: deterministic files, exact rasterization") {
  const fs::path dir1 = fs::temp_directory_path() / "polypseg_synth1";
  const fs::path dir2 = fs::temp_directory_path() / "polypseg_synth2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  SampleManifest m1 = gen_synthetic(3, 32, 9, dir1.string());
  SampleManifest m2 = gen_synthetic(3, 32, 9, dir2.string());
  REQUIRE(m1.samples.size() == 3);
  for (std::size_t i = 0; i < m1.samples.size(); ++i) {
    CHECK(read_file(m1.samples[i].first) == read_file(m2.samples[i].first));
    CHECK(read_file(m1.samples[i].second) == read_file(m2.samples[i].second));
  }

  // mask pixels exactly satisfy the ellipse inequality
  for (int idx = 0; idx < 3; ++idx) {
    const auto ellipses = synth_sample_ellipses(9, idx, 32);
    ImageBuffer mask = read_pnm(m1.samples[idx].second);
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        bool inside = false;
        for (const auto& el : ellipses) {
          const double dx = (x - el.cx) / el.a;
          const double dy = (y - el.cy) / el.b;
          inside = inside || (dx * dx + dy * dy <= 1.0);
        }
        CHECK(mask.at(y, x) == (inside ? 255 : 0));
      }
    }
  }

  CHECK_THROWS_AS(gen_synthetic(0, 32, 1, dir1.string()), ContractError);
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}
