// SPDX-License-Identifier: Apache-2.0
//
// PFW1 weight container. Everything is little-endian and written through
// explicit byte shifts, so files are identical across hosts.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>

#include "polypseg/model.hpp"

namespace polypseg {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'W', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::size_t offset() const { return pos_; }

  const std::uint8_t* take(std::size_t count, const char* what) {
    if (pos_ + count > bytes_.size()) {
      throw FormatError(path_ + ": truncated file while reading " +
                            std::string(what) + " (need " + std::to_string(count) +
                            " bytes, have " + std::to_string(bytes_.size() - pos_) +
                            ")",
                        pos_);
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes_.data()) + pos_;
    pos_ += count;
    return p;
  }

  std::uint16_t u16(const char* what) {
    const auto* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const char* what) {
    const auto* p = take(4, what);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }

  std::uint8_t u8(const char* what) { return take(1, what)[0]; }

  bool at_end() const { return pos_ == bytes_.size(); }

  const std::string& path() const { return path_; }

private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_pfw(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string out;
  out.append(kMagic, 4);
  {
    std::string tmp;
    put_u32(tmp, kVersion);
    put_u32(tmp, static_cast<std::uint32_t>(tensors.size()));
    out += tmp;
  }
  std::set<std::string> seen;
  for (const NamedTensor& nt : tensors) {
    if (!seen.insert(nt.name).second) {
      throw ContractError("write_pfw: duplicate tensor name '" + nt.name + "'");
    }
    if (nt.name.size() > 0xffff) {
      throw ContractError("write_pfw: tensor name too long");
    }
    std::string rec;
    put_u16(rec, static_cast<std::uint16_t>(nt.name.size()));
    rec += nt.name;
    rec.push_back(0);  // dtype f32
    rec.push_back(4);  // rank
    put_u32(rec, static_cast<std::uint32_t>(nt.tensor.dims.n));
    put_u32(rec, static_cast<std::uint32_t>(nt.tensor.dims.c));
    put_u32(rec, static_cast<std::uint32_t>(nt.tensor.dims.h));
    put_u32(rec, static_cast<std::uint32_t>(nt.tensor.dims.w));
    for (float v : nt.tensor.data) {
      if (!std::isfinite(v)) {
        throw ContractError("write_pfw: non-finite value in tensor '" + nt.name + "'");
      }
      put_f32(rec, v);
    }
    out += rec;
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

std::vector<NamedTensor> read_pfw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);

  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic, not a PFW1 file", 0);
  }
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version), 4);
  }
  const std::uint32_t count = r.u32("tensor count");

  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  std::set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16("name length");
    const std::size_t name_off = r.offset();
    const auto* name_bytes = r.take(name_len, "name");
    std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    if (!seen.insert(name).second) {
      throw FormatError(path + ": duplicate tensor name '" + name + "'", name_off);
    }
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != 0) {
      throw FormatError(path + ": unsupported dtype " + std::to_string(dtype) +
                            " for tensor '" + name + "'",
                        r.offset() - 1);
    }
    const std::uint8_t rank = r.u8("rank");
    if (rank != 4) {
      throw FormatError(path + ": unsupported rank " + std::to_string(rank) +
                            " for tensor '" + name + "'",
                        r.offset() - 1);
    }
    std::uint32_t dims[4];
    for (auto& d : dims) d = r.u32("dims");
    const std::uint64_t total = static_cast<std::uint64_t>(dims[0]) * dims[1] *
                                static_cast<std::uint64_t>(dims[2]) * dims[3];
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || dims[3] == 0 ||
        total > (std::uint64_t(1) << 31)) {
      throw FormatError(path + ": implausible dims for tensor '" + name + "'",
                        r.offset() - 16);
    }
    const std::size_t payload_off = r.offset();
    const auto* payload = r.take(total * 4, "tensor payload");
    Tensor tensor({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                   static_cast<int>(dims[2]), static_cast<int>(dims[3])});
    for (std::uint64_t i = 0; i < total; ++i) {
      std::uint32_t bits = static_cast<std::uint32_t>(payload[i * 4]) |
                           (static_cast<std::uint32_t>(payload[i * 4 + 1]) << 8) |
                           (static_cast<std::uint32_t>(payload[i * 4 + 2]) << 16) |
                           (static_cast<std::uint32_t>(payload[i * 4 + 3]) << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      if (!std::isfinite(v)) {
        throw FormatError(path + ": non-finite value in tensor '" + name + "'",
                          payload_off + i * 4);
      }
      tensor.data[i] = v;
    }
    tensors.push_back({std::move(name), std::move(tensor)});
  }
  if (!r.at_end()) {
    throw FormatError(path + ": trailing bytes after last tensor", r.offset());
  }
  return tensors;
}

void save_weights(const ModelParams& params, const std::string& path) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(params.tensor_count());
  for (const std::string& name : params.names()) {
    tensors.push_back({name, params.at(name)});
  }
  write_pfw(path, tensors);
}

ModelParams load_weights(const std::string& path) {
  std::vector<NamedTensor> tensors = read_pfw(path);

  ArchConfig arch;
  bool have_size = false, have_conv = false;
  for (const NamedTensor& nt : tensors) {
    if (nt.name == "meta.input_size") {
      arch.input_size = static_cast<int>(nt.tensor.data.at(0));
      have_size = true;
    } else if (nt.name == "enc1.res1.conv1.weight") {
      arch.in_ch = nt.tensor.dims.c;
      have_conv = true;
    }
  }
  if (!have_size || !have_conv) {
    throw FormatError(path + ": not a model weight file (missing meta.input_size "
                          "or enc1.res1.conv1.weight)",
                      0);
  }

  ModelParams params = build_model(arch);
  if (tensors.size() != params.tensor_count()) {
    throw FormatError(path + ": tensor count " + std::to_string(tensors.size()) +
                          " does not match the architecture (" +
                          std::to_string(params.tensor_count()) + ")",
                      0);
  }
  for (NamedTensor& nt : tensors) {
    if (!params.contains(nt.name)) {
      throw FormatError(path + ": unexpected tensor '" + nt.name + "'", 0);
    }
    Tensor& dst = params.at(nt.name);
    if (!(dst.dims == nt.tensor.dims)) {
      throw FormatError(path + ": tensor '" + nt.name + "' has dims " +
                            nt.tensor.dims.str() + ", architecture expects " +
                            dst.dims.str(),
                        0);
    }
    dst = std::move(nt.tensor);
  }
  return params;
}

}  // namespace polypseg
