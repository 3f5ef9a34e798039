#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "epidepth/tensor.hpp"

namespace epidepth {

// Netpbm writers/readers. Depth maps travel as 16-bit PGM with a scale
// comment line "# scale <meters-per-unit>"; confidence maps as 8-bit PGM;
// images as 16-bit PPM (P6) so render -> write -> read is lossless on the
// 1/65535 grid.

namespace detail {

inline void pnm_header(std::ostream& os, const char* magic, Index W, Index H, int maxval,
                       const std::string& comment = {}) {
  os << magic << "\n";
  if (!comment.empty()) os << "# " << comment << "\n";
  os << W << " " << H << "\n" << maxval << "\n";
}

struct PnmHeader {
  std::string magic;
  Index W = 0, H = 0;
  int maxval = 0;
  double scale = 0.0;
  bool has_scale = false;
};

inline PnmHeader read_pnm_header(std::istream& is, const std::string& path) {
  PnmHeader h;
  if (!(is >> h.magic)) throw ContractViolation(path + ": empty PNM file");
  // Tokens may be separated by comments; "# scale <v>" carries depth units.
  std::vector<long long> fields;
  while (fields.size() < 3) {
    is >> std::ws;
    if (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      std::istringstream cs(line.substr(1));
      std::string key;
      if (cs >> key && key == "scale" && (cs >> h.scale)) h.has_scale = true;
      continue;
    }
    long long v;
    if (!(is >> v)) throw ContractViolation(path + ": malformed PNM header");
    fields.push_back(v);
  }
  h.W = fields[0];
  h.H = fields[1];
  h.maxval = static_cast<int>(fields[2]);
  is.get();  // single whitespace before raster
  if (h.W < 1 || h.H < 1) throw ContractViolation(path + ": bad PNM dimensions");
  return h;
}

}  // namespace detail

// 16-bit PGM depth map; values reconstruct as sample * scale meters.
inline void write_depth_pgm(const std::string& path, const std::vector<double>& depth, Index W, Index H,
                            double scale) {
  if (static_cast<Index>(depth.size()) != W * H) throw ContractViolation("write_depth_pgm: size mismatch");
  if (!(scale > 0)) throw ContractViolation("write_depth_pgm: scale must be positive");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  std::ostringstream sc;
  sc.precision(17);
  sc << "scale " << scale;
  detail::pnm_header(os, "P5", W, H, 65535, sc.str());
  std::string raster;
  raster.reserve(depth.size() * 2);
  for (double d : depth) {
    long long q = std::llround(d / scale);
    if (q < 0) q = 0;
    if (q > 65535) q = 65535;
    raster.push_back(static_cast<char>((q >> 8) & 0xff));
    raster.push_back(static_cast<char>(q & 0xff));
  }
  os.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

struct DepthPgm {
  Index W = 0, H = 0;
  double scale = 0.0;
  std::vector<double> depth;
};

inline DepthPgm read_depth_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot open: " + path);
  auto h = detail::read_pnm_header(is, path);
  if (h.magic != "P5" || h.maxval != 65535)
    throw ContractViolation(path + ": expected 16-bit P5 depth map");
  if (!h.has_scale) throw ContractViolation(path + ": missing '# scale' comment");
  DepthPgm out;
  out.W = h.W;
  out.H = h.H;
  out.scale = h.scale;
  std::vector<char> raster(static_cast<std::size_t>(h.W * h.H * 2));
  is.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (is.gcount() != static_cast<std::streamsize>(raster.size()))
    throw ContractViolation(path + ": truncated raster");
  out.depth.resize(static_cast<std::size_t>(h.W * h.H));
  for (std::size_t i = 0; i < out.depth.size(); ++i) {
    unsigned hi = static_cast<unsigned char>(raster[i * 2]);
    unsigned lo = static_cast<unsigned char>(raster[i * 2 + 1]);
    out.depth[i] = static_cast<double>((hi << 8) | lo) * h.scale;
  }
  return out;
}

// 8-bit PGM for confidence/in [0,1] maps.
inline void write_gray_pgm8(const std::string& path, const std::vector<double>& v01, Index W, Index H) {
  if (static_cast<Index>(v01.size()) != W * H) throw ContractViolation("write_gray_pgm8: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  detail::pnm_header(os, "P5", W, H, 255);
  std::string raster;
  raster.reserve(v01.size());
  for (double v : v01) {
    long long q = std::llround(v * 255.0);
    raster.push_back(static_cast<char>(q < 0 ? 0 : (q > 255 ? 255 : q)));
  }
  os.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

// 16-bit P6 image; input (H,W,3) in [0,1].
inline void write_image_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.shape()[2] != 3) throw ContractViolation("write_image_ppm: expected (H,W,3)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  detail::pnm_header(os, "P6", img.shape()[1], img.shape()[0], 65535);
  std::string raster;
  raster.reserve(static_cast<std::size_t>(img.size()) * 2);
  for (Index i = 0; i < img.size(); ++i) {
    long long q = std::llround(img.data()[i] * 65535.0);
    if (q < 0) q = 0;
    if (q > 65535) q = 65535;
    raster.push_back(static_cast<char>((q >> 8) & 0xff));
    raster.push_back(static_cast<char>(q & 0xff));
  }
  os.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

inline Tensor read_image_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot open: " + path);
  auto h = detail::read_pnm_header(is, path);
  if (h.magic != "P6" || h.maxval != 65535)
    throw ContractViolation(path + ": expected 16-bit P6 image");
  std::vector<char> raster(static_cast<std::size_t>(h.W * h.H * 6));
  is.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (is.gcount() != static_cast<std::streamsize>(raster.size()))
    throw ContractViolation(path + ": truncated raster");
  Tensor img({h.H, h.W, 3});
  for (Index i = 0; i < img.size(); ++i) {
    unsigned hi = static_cast<unsigned char>(raster[static_cast<std::size_t>(i) * 2]);
    unsigned lo = static_cast<unsigned char>(raster[static_cast<std::size_t>(i) * 2 + 1]);
    img.data()[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
  }
  return img;
}

// Quantize to the 16-bit grid the PPM writer uses; applied at render time so
// in-memory samples equal their file round trip bit for bit.
inline void quantize_image16(Tensor& img) {
  for (Index i = 0; i < img.size(); ++i) {
    double v = img.data()[i];
    long long q = std::llround((v < 0 ? 0 : (v > 1 ? 1 : v)) * 65535.0);
    img.data()[i] = static_cast<double>(q) / 65535.0;
  }
}

}  // namespace epidepth
