#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "filigrain/error.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Self-describing binary tensor file, used for checkpoints and for image
// banks: 8-byte magic, u32 version, a config text block, then per-tensor
// records (name, shape, 64-bit little-endian values).
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline void put_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  check(in.good(), Error::Kind::io, "tensor file: truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  check(in.good(), Error::Kind::io, "tensor file: truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

constexpr char kTensorFileMagic[8] = {'F', 'I', 'L', 'I', 'G', 'R', 'N', '1'};
constexpr std::uint32_t kTensorFileVersion = 1;

struct TensorFile {
  std::string config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw Error(Error::Kind::not_found, "tensor file: no record named " + name);
  }

  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

inline void write_tensor_file(
    const std::string& path, const std::string& config,
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Error::Kind::io, "tensor file: cannot open " + path);
  out.write(kTensorFileMagic, 8);
  detail::put_u32(out, kTensorFileVersion);
  detail::put_u64(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  detail::put_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      detail::put_u64(out, static_cast<std::uint64_t>(t.dim(i)));
    for (double v : t.values()) detail::put_f64(out, v);
  }
  check(out.good(), Error::Kind::io, "tensor file: write failed for " + path);
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Error::Kind::io, "tensor file: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  check(in.good() && std::memcmp(magic, kTensorFileMagic, 8) == 0,
        Error::Kind::io, "tensor file: bad magic in " + path);
  const std::uint32_t version = detail::get_u32(in);
  check(version == kTensorFileVersion, Error::Kind::io,
        "tensor file: unsupported version");
  TensorFile file;
  const std::uint64_t config_len = detail::get_u64(in);
  file.config.resize(config_len);
  if (config_len > 0)
    in.read(file.config.data(), static_cast<std::streamsize>(config_len));
  const std::uint64_t count = detail::get_u64(in);
  for (std::uint64_t r = 0; r < count; ++r) {
    const std::uint64_t name_len = detail::get_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint32_t rank = detail::get_u32(in);
    std::vector<int> shape;
    std::int64_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<int>(detail::get_u64(in)));
      total *= shape.back();
    }
    std::vector<double> values(static_cast<std::size_t>(total));
    for (double& v : values) v = detail::get_f64(in);
    file.tensors.emplace_back(std::move(name),
                              Tensor::from_values(std::move(shape), std::move(values)));
  }
  check(in.good(), Error::Kind::io, "tensor file: truncated " + path);
  return file;
}

}  // namespace filigrain
