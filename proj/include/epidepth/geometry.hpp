#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "epidepth/ops.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

struct Mat3 {
  // Row-major.
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }

  Mat3 transpose() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// Rodrigues rotation about a (not necessarily unit) axis by |axis| radians.
inline Mat3 axis_angle(const Vec3& axis) {
  double a = axis.norm();
  if (a == 0.0) return Mat3::identity();
  Vec3 n = axis * (1.0 / a);
  double c = std::cos(a), s = std::sin(a), t = 1 - c;
  Mat3 r;
  r(0, 0) = t * n.x * n.x + c;
  r(0, 1) = t * n.x * n.y - s * n.z;
  r(0, 2) = t * n.x * n.z + s * n.y;
  r(1, 0) = t * n.x * n.y + s * n.z;
  r(1, 1) = t * n.y * n.y + c;
  r(1, 2) = t * n.y * n.z - s * n.x;
  r(2, 0) = t * n.x * n.z - s * n.y;
  r(2, 1) = t * n.y * n.z + s * n.x;
  r(2, 2) = t * n.z * n.z + c;
  return r;
}

// Pinhole calibration; pixel centers sit at integer coordinates, origin top-left.
struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ContractViolation("Intrinsics: focal lengths must be positive");
  }

  // Rescale to a different working resolution (fx, fy, cx, cy each scaled).
  Intrinsics scaled(double s) const { return {fx * s, fy * s, cx * s, cy * s}; }

  Vec3 unproject(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
};

// Relative rigid motion. Maps target-frame points as X_c = R * (X_t + t),
// the composition used by the epipolar projection.
struct RigidTransform {
  Mat3 R;
  Vec3 t;

  static RigidTransform identity() { return {}; }

  bool is_identity() const {
    static const Mat3 I;
    for (int i = 0; i < 9; ++i)
      if (R.m[i] != I.m[i]) return false;
    return t.x == 0 && t.y == 0 && t.z == 0;
  }

  void validate() const {
    Mat3 rtr = R.transpose() * R;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double want = i == j ? 1.0 : 0.0;
        if (std::fabs(rtr(i, j) - want) > 1e-9)
          throw ContractViolation("RigidTransform: R is not orthonormal");
      }
    if (std::fabs(R.det() - 1.0) > 1e-9) throw ContractViolation("RigidTransform: det(R) != 1");
  }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.R = R.transpose();
    inv.t = (R * t) * -1.0;
    return inv;
  }

  Vec3 apply(const Vec3& x) const { return R * (x + t); }
};

// ---------------------------------------------------------------------------
// SID depth binning
// ---------------------------------------------------------------------------

struct DepthBins {
  double d_min = 0, d_max = 0;
  Index count = 0;
  std::vector<double> values;

  // Nearest bin index to a metric depth, by log distance.
  Index nearest(double d) const {
    double step = std::log(d_max / d_min) / static_cast<double>(count - 1);
    double k = (std::log(d) - std::log(d_min)) / step;
    Index i = static_cast<Index>(std::llround(k));
    return std::min(std::max(i, Index(0)), count - 1);
  }
};

// D bins uniformly spaced in log depth, endpoints included exactly.
inline DepthBins sid_bins(double d_min, double d_max, Index D) {
  if (D < 2) throw ContractViolation("sid_bins: need at least 2 bins, got " + std::to_string(D));
  if (!(d_min > 0) || !(d_min < d_max))
    throw ContractViolation("sid_bins: require 0 < d_min < d_max, got [" + std::to_string(d_min) + ", " +
                            std::to_string(d_max) + "]");
  DepthBins b;
  b.d_min = d_min;
  b.d_max = d_max;
  b.count = D;
  b.values.resize(static_cast<std::size_t>(D));
  const double l0 = std::log(d_min);
  const double span = std::log(d_max / d_min);
  for (Index i = 0; i < D; ++i)
    b.values[static_cast<std::size_t>(i)] =
        std::exp(l0 + span * static_cast<double>(i) / static_cast<double>(D - 1));
  b.values.front() = d_min;
  b.values.back() = d_max;
  return b;
}

// ---------------------------------------------------------------------------
// Epipolar projection
// ---------------------------------------------------------------------------

inline constexpr double kEpsZ = 1e-6;  // meters

struct EpipolarSample {
  double u = 0, v = 0;  // continuous pixel coordinates in the context image
  double z = 0;         // candidate depth in the context frame
  bool valid = false;
};

// z' [u',v',1]^T = K R (K^-1 [u,v,1]^T d + t). Validity is data, not an error:
// a sample is valid when z' > eps and the unclamped coordinate stays inside
// [0, W-1] x [0, H-1].
inline EpipolarSample project_epipolar(double u, double v, double d, const Intrinsics& K,
                                       const RigidTransform& T, Index W, Index H) {
  if (!(d > 0)) throw ContractViolation("project_epipolar: depth must be positive");
  EpipolarSample s;
  if (T.is_identity()) {
    // K R K^-1 collapses to the identity algebraically; short-circuit so the
    // identity warp reproduces coordinates bit-exactly.
    s.u = u;
    s.v = v;
    s.z = d;
  } else {
    Vec3 ray = K.unproject(u, v);
    Vec3 X = T.apply(ray * d);
    if (std::fabs(X.z) < kEpsZ) {
      s.valid = false;
      s.z = X.z;
      return s;
    }
    s.u = K.fx * X.x / X.z + K.cx;
    s.v = K.fy * X.y / X.z + K.cy;
    s.z = X.z;
  }
  s.valid = s.z > kEpsZ && s.u >= 0.0 && s.u <= static_cast<double>(W - 1) && s.v >= 0.0 &&
            s.v <= static_cast<double>(H - 1);
  return s;
}

// Projections of one pixel grid across all depth bins, pixel-major then bin.
struct EpipolarGrid {
  Index W = 0, H = 0, D = 0;
  std::vector<double> u, v, z;
  std::vector<std::uint8_t> valid;

  std::size_t at(Index y, Index x, Index i) const {
    return static_cast<std::size_t>((y * W + x) * D + i);
  }
};

inline EpipolarGrid build_epipolar_grid(const Intrinsics& K, const RigidTransform& T, const DepthBins& bins,
                                        Index W, Index H) {
  EpipolarGrid g;
  g.W = W;
  g.H = H;
  g.D = bins.count;
  std::size_t n = static_cast<std::size_t>(W * H * bins.count);
  g.u.resize(n);
  g.v.resize(n);
  g.z.resize(n);
  g.valid.resize(n);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index i = 0; i < bins.count; ++i) {
        EpipolarSample s = project_epipolar(static_cast<double>(x), static_cast<double>(y),
                                            bins.values[static_cast<std::size_t>(i)], K, T, W, H);
        std::size_t k = g.at(y, x, i);
        g.u[k] = s.valid ? s.u : 0.0;
        g.v[k] = s.valid ? s.v : 0.0;
        g.z[k] = s.z;
        g.valid[k] = s.valid ? 1 : 0;
      }
  return g;
}

// Samples D candidate features for one pixel: feature i is F_c read bilinearly
// at the bin-i projection; invalid samples are zero-filled with the mask bit
// cleared. F_c and K must live at the same (feature) resolution.
inline std::pair<Tensor, std::vector<std::uint8_t>> sample_candidates(const Tensor& F_c, double u, double v,
                                                                      const DepthBins& bins,
                                                                      const Intrinsics& K,
                                                                      const RigidTransform& T) {
  if (F_c.rank() != 3) throw ContractViolation("sample_candidates: F_c must be (H,W,C)");
  const Index H = F_c.shape()[0], W = F_c.shape()[1], C = F_c.shape()[2];
  const Index D = bins.count;
  Tensor coords({D, 2});
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(D), 0);
  for (Index i = 0; i < D; ++i) {
    EpipolarSample s = project_epipolar(u, v, bins.values[static_cast<std::size_t>(i)], K, T, W, H);
    coords.data()[i * 2] = s.valid ? s.u : 0.0;
    coords.data()[i * 2 + 1] = s.valid ? s.v : 0.0;
    mask[static_cast<std::size_t>(i)] = s.valid ? 1 : 0;
  }
  Tensor feats = grid_sample(F_c, coords);
  Tensor gate({D, 1});
  for (Index i = 0; i < D; ++i) gate.data()[i] = mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return {mul(feats, gate), mask};
}

// ---------------------------------------------------------------------------
// Differentiable view synthesis
// ---------------------------------------------------------------------------

struct WarpCoords {
  Tensor coords;                    // (H, W, 2); tracked iff depth is tracked
  std::vector<double> z;            // projected depth per pixel
  std::vector<std::uint8_t> valid;  // in-view and in front of the camera
};

// Projects every pixel of a depth map into the context view. Differentiable
// with respect to the depth map; coordinate derivatives are saved at forward
// time. Invalid pixels get placeholder coordinates (0,0) with zero derivative.
inline WarpCoords project_depth_map(const Tensor& depth, const Intrinsics& K, const RigidTransform& T) {
  if (depth.rank() != 2) throw ContractViolation("project_depth_map: depth must be (H,W)");
  const Index H = depth.shape()[0], W = depth.shape()[1];
  for (Index i = 0; i < depth.size(); ++i)
    if (!(depth.data()[i] > 0.0))
      throw ContractViolation("project_depth_map: non-positive depth " + std::to_string(depth.data()[i]));

  WarpCoords out;
  out.coords = Tensor({H, W, 2});
  out.z.resize(static_cast<std::size_t>(H * W));
  out.valid.assign(static_cast<std::size_t>(H * W), 0);
  std::vector<double> dud(static_cast<std::size_t>(H * W), 0.0);
  std::vector<double> dvd(static_cast<std::size_t>(H * W), 0.0);

  const bool ident = T.is_identity();
  double* pc = out.coords.data();
  const double* pd = depth.data();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const std::size_t k = static_cast<std::size_t>(y * W + x);
      const double d = pd[k];
      if (ident) {
        pc[k * 2] = static_cast<double>(x);
        pc[k * 2 + 1] = static_cast<double>(y);
        out.z[k] = d;
        out.valid[k] = 1;
        continue;
      }
      Vec3 ray = K.unproject(static_cast<double>(x), static_cast<double>(y));
      Vec3 X = T.apply(ray * d);
      Vec3 dX = T.R * ray;  // dX/dd
      out.z[k] = X.z;
      if (X.z <= kEpsZ) continue;  // placeholder coords stay (0,0), derivative 0
      double u = K.fx * X.x / X.z + K.cx;
      double v = K.fy * X.y / X.z + K.cy;
      bool inb = u >= 0.0 && u <= static_cast<double>(W - 1) && v >= 0.0 && v <= static_cast<double>(H - 1);
      pc[k * 2] = u;
      pc[k * 2 + 1] = v;
      out.valid[k] = inb ? 1 : 0;
      dud[k] = K.fx * (dX.x * X.z - X.x * dX.z) / (X.z * X.z);
      dvd[k] = K.fy * (dX.y * X.z - X.y * dX.z) / (X.z * X.z);
    }

  if (depth.tracked()) {
    auto dd = depth.impl();
    auto cd = out.coords.impl();
    depth.tape()->record({depth}, out.coords, [dd, cd, dud, dvd] {
      if (dd->grad.empty()) return;
      for (std::size_t k = 0; k < dd->grad.size(); ++k)
        dd->grad[k] += cd->grad[k * 2] * dud[k] + cd->grad[k * 2 + 1] * dvd[k];
    });
  }
  return out;
}

struct WarpResult {
  Tensor image;                     // synthesized target (H,W,C)
  std::vector<std::uint8_t> valid;  // out-of-view pixels masked
};

// View synthesis: samples the context image at depth-and-pose-projected
// coordinates via bilinear grid sampling.
inline WarpResult warp_image(const Tensor& I_c, const Tensor& depth, const Intrinsics& K,
                             const RigidTransform& T) {
  if (I_c.rank() != 3) throw ContractViolation("warp_image: image must be (H,W,C)");
  if (depth.rank() != 2 || depth.shape()[0] != I_c.shape()[0] || depth.shape()[1] != I_c.shape()[1])
    throw ContractViolation("warp_image: depth " + shape_str(depth.shape()) + " does not match image " +
                            shape_str(I_c.shape()));
  WarpCoords wc = project_depth_map(depth, K, T);
  WarpResult r;
  r.image = grid_sample(I_c, wc.coords);
  r.valid = std::move(wc.valid);
  return r;
}

// ---------------------------------------------------------------------------
// Camera text file: "fx fy cx cy" then one line per frame, R row-major + t
// ---------------------------------------------------------------------------

struct CameraFile {
  Intrinsics K;
  std::vector<RigidTransform> frames;
};

inline void write_camera_file(const std::string& path, const CameraFile& cam) {
  std::ofstream os(path);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  put(cam.K.fx); os << " "; put(cam.K.fy); os << " "; put(cam.K.cx); os << " "; put(cam.K.cy); os << "\n";
  for (const RigidTransform& T : cam.frames) {
    for (int i = 0; i < 9; ++i) {
      put(T.R.m[i]);
      os << " ";
    }
    put(T.t.x); os << " "; put(T.t.y); os << " "; put(T.t.z); os << "\n";
  }
}

inline CameraFile read_camera_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractViolation("cannot open: " + path);
  CameraFile cam;
  std::string line;
  if (!std::getline(is, line)) throw ContractViolation("camera file: missing intrinsics line");
  {
    std::istringstream ls(line);
    if (!(ls >> cam.K.fx >> cam.K.fy >> cam.K.cx >> cam.K.cy))
      throw ContractViolation("camera file: malformed intrinsics line");
  }
  cam.K.validate();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    RigidTransform T;
    for (int i = 0; i < 9; ++i)
      if (!(ls >> T.R.m[i])) throw ContractViolation("camera file: malformed pose line");
    if (!(ls >> T.t.x >> T.t.y >> T.t.z)) throw ContractViolation("camera file: malformed pose line");
    cam.frames.push_back(T);
  }
  return cam;
}

}  // namespace epidepth
