#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include "filigrain/error.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// Binary PPM (P6, 8-bit) export/import for H x W x 3 images in [0, 1].

inline void write_ppm(const std::string& path, const Tensor& image) {
  check(image.rank() == 3 && image.dim(2) == 3, Error::Kind::dimension,
        "write_ppm: H x W x 3 image required");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Error::Kind::io, "write_ppm: cannot open " + path);
  out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (double v : image.values()) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    out.put(static_cast<char>(static_cast<int>(std::lround(clamped * 255.0))));
  }
  check(out.good(), Error::Kind::io, "write_ppm: write failed for " + path);
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Error::Kind::io, "read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  check(magic == "P6", Error::Kind::io, "read_ppm: not a P6 file");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  check(w > 0 && h > 0 && maxval == 255, Error::Kind::io,
        "read_ppm: unsupported header");
  in.get();  // single whitespace after maxval
  Tensor image({h, w, 3});
  auto iv = image.mutable_values();
  for (int i = 0; i < image.size(); ++i) {
    const int byte = in.get();
    check(byte != EOF, Error::Kind::io, "read_ppm: truncated pixel data");
    iv[i] = static_cast<double>(byte) / 255.0;
  }
  return image;
}

}  // namespace filigrain
