#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "epidepth/geometry.hpp"
#include "epidepth/pnm_io.hpp"
#include "epidepth/rng.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

// ---------------------------------------------------------------------------
// Procedural value-noise textures
// ---------------------------------------------------------------------------

namespace detail {

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

inline double value_noise(double x, double y, std::uint64_t seed) {
  double fx = std::floor(x), fy = std::floor(y);
  std::int64_t ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = fade(x - fx), ty = fade(y - fy);
  double v00 = hash01(ix, iy, seed), v01 = hash01(ix + 1, iy, seed);
  double v10 = hash01(ix, iy + 1, seed), v11 = hash01(ix + 1, iy + 1, seed);
  double a = v00 + (v01 - v00) * tx;
  double b = v10 + (v11 - v10) * tx;
  return a + (b - a) * ty;
}

}  // namespace detail

struct TextureSpec {
  int octaves = 4;              // >= 3 keeps surfaces matchable
  double base_wavelength = 1.2; // meters of the coarsest octave
  double contrast = 0.35;       // total amplitude around the bias
  double bias = 0.5;
};

// Smooth multi-octave value noise in [0,1].
inline double fbm(double x, double y, std::uint64_t seed, const TextureSpec& tex) {
  double f = 1.0 / tex.base_wavelength;
  double amp = 1.0, total = 0.0, norm = 0.0;
  for (int o = 0; o < tex.octaves; ++o) {
    total += amp * detail::value_noise(x * f, y * f, seed + static_cast<std::uint64_t>(o) * 0x9e37ULL);
    norm += amp;
    amp *= 0.5;
    f *= 2.0;
  }
  return total / norm;
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

enum class SceneLayout { FrontoParallel, Slanted, HeightField };

struct SceneSpec {
  std::uint64_t seed = 0;
  SceneLayout layout = SceneLayout::Slanted;
  int plane_count = 3;
  double depth_min = 2.5;  // meters; scene geometry stays inside this range
  double depth_max = 10.0;
  TextureSpec texture;
  Index width = 64, height = 64;
  Intrinsics K{64.0, 64.0, 31.5, 31.5};

  void validate() const {
    if (!(depth_min > 0) || !(depth_min < depth_max))
      throw ContractViolation("SceneSpec: depth range must satisfy 0 < min < max");
    if (width % 8 != 0 || height % 8 != 0)
      throw ContractViolation("SceneSpec: image size must be divisible by 8");
    if (plane_count < 1) throw ContractViolation("SceneSpec: plane_count must be >= 1");
    K.validate();
  }
};

struct ScenePlane {
  Vec3 n{0, 0, 1};  // n . X = c, n.z > 0
  double c = 5.0;
  double x_lo = -1e18, x_hi = 1e18;  // world-x slab occupied by the plane
  std::uint64_t tex_seed = 0;
  double tint[3] = {1.0, 1.0, 1.0};
};

struct Scene {
  SceneSpec spec;
  std::vector<ScenePlane> planes;  // last entry is the unbounded background
  // height-field layout: z(x,y) = hf_base + hf_amp * (2*fbm - 1)
  double hf_base = 0, hf_amp = 0;
  std::uint64_t hf_seed = 0;

  double pgm_scale() const { return spec.depth_max / 65000.0; }
};

// Deterministic function of the spec's seed.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Scene sc;
  sc.spec = spec;
  Rng rng(spec.seed * 0x9e3779b97f4a7c15ULL + 0x51ULL);

  const double margin = 0.08 * (spec.depth_max - spec.depth_min);
  const double lo = spec.depth_min + margin, hi = spec.depth_max - margin;

  if (spec.layout == SceneLayout::HeightField) {
    sc.hf_base = rng.uniform(lo + 0.3 * (hi - lo), hi - 0.3 * (hi - lo));
    sc.hf_amp = std::min(0.25 * (hi - lo), 0.12 * sc.hf_base);
    sc.hf_seed = rng.next_u64();
    return sc;
  }

  // Planes sorted far to near; the farthest is unbounded so every ray hits.
  std::vector<double> depths;
  for (int i = 0; i < spec.plane_count; ++i) depths.push_back(rng.uniform(lo, hi));
  std::sort(depths.rbegin(), depths.rend());

  for (int i = 0; i < spec.plane_count; ++i) {
    ScenePlane p;
    p.tex_seed = rng.next_u64();
    for (double& t : p.tint) t = rng.uniform(0.7, 1.0);
    double z = depths[static_cast<std::size_t>(i)];
    if (spec.layout == SceneLayout::Slanted && i != 0) {
      // Tilt around an anchor on the optical axis; corner depths are checked
      // below and the draw repeated until the plane stays inside the range.
      for (int attempt = 0; attempt < 64; ++attempt) {
        double ax = rng.uniform(-0.22, 0.22), ay = rng.uniform(-0.22, 0.22);
        Vec3 n{std::sin(ax), std::sin(ay), std::sqrt(std::max(0.0, 1 - std::sin(ax) * std::sin(ax) -
                                                                        std::sin(ay) * std::sin(ay)))};
        double c = n.z * z;  // passes through (0,0,z)
        bool ok = true;
        for (double u : {0.0, static_cast<double>(spec.width - 1)})
          for (double v : {0.0, static_cast<double>(spec.height - 1)}) {
            Vec3 dir = spec.K.unproject(u, v);
            double denom = n.dot(dir);
            double s = denom > 1e-9 ? c / denom : -1.0;
            if (!(s >= lo && s <= hi)) ok = false;
          }
        if (ok) {
          p.n = n;
          p.c = c;
          break;
        }
      }
      if (p.n.z == 1.0) p.c = z;  // all draws rejected: keep it fronto-parallel
    } else {
      p.c = z;
    }
    if (i != 0) {
      // Bounded slab for foreground planes, in world meters around the axis.
      double visible_half = 0.45 * z * static_cast<double>(spec.width) / (2.0 * spec.K.fx);
      double w = rng.uniform(0.6, 1.6) * visible_half;
      double a = rng.uniform(-visible_half, visible_half - 0.2 * w);
      p.x_lo = a;
      p.x_hi = a + w;
    }
    sc.planes.push_back(p);
  }
  return sc;
}

namespace detail {

inline double height_at(const Scene& sc, double x, double y) {
  return sc.hf_base + sc.hf_amp * (2.0 * fbm(x, y, sc.hf_seed, sc.spec.texture) - 1.0);
}

// Hit of a world-space ray o + s*d (d.z == 1 for camera rays after rotation is
// handled by the caller passing rotated rays; here d is arbitrary).
struct Hit {
  bool ok = false;
  double s = 0;    // ray parameter
  Vec3 point;      // world coordinates
  int plane = -1;  // -1 for height field
};

inline Hit intersect(const Scene& sc, const Vec3& o, const Vec3& d) {
  Hit best;
  if (sc.spec.layout == SceneLayout::HeightField) {
    // z is gentle, so s -> (height - o.z)/d.z contracts; refine by bisection.
    if (std::fabs(d.z) < 1e-12) return best;
    double s = (sc.hf_base - o.z) / d.z;
    for (int it = 0; it < 12; ++it) {
      Vec3 p = o + d * s;
      s = (height_at(sc, p.x, p.y) - o.z) / d.z;
    }
    auto F = [&](double sv) {
      Vec3 p = o + d * sv;
      return o.z + sv * d.z - height_at(sc, p.x, p.y);
    };
    double lo = s - 2.0 * std::fabs(sc.hf_amp / d.z) - 1e-3;
    double hi = s + 2.0 * std::fabs(sc.hf_amp / d.z) + 1e-3;
    if (F(lo) > 0 || F(hi) < 0) {
      if (s <= 0) return best;
    } else {
      for (int it = 0; it < 64; ++it) {
        double mid = 0.5 * (lo + hi);
        (F(mid) <= 0 ? lo : hi) = mid;
      }
      s = 0.5 * (lo + hi);
    }
    if (s <= 0) return best;
    best.ok = true;
    best.s = s;
    best.point = o + d * s;
    return best;
  }
  for (std::size_t i = 0; i < sc.planes.size(); ++i) {
    const ScenePlane& p = sc.planes[i];
    double denom = p.n.dot(d);
    if (std::fabs(denom) < 1e-12) continue;
    double s = (p.c - p.n.dot(o)) / denom;
    if (s <= 1e-9) continue;
    Vec3 pt = o + d * s;
    if (pt.x < p.x_lo || pt.x >= p.x_hi) continue;
    if (!best.ok || s < best.s) {
      best.ok = true;
      best.s = s;
      best.point = pt;
      best.plane = static_cast<int>(i);
    }
  }
  return best;
}

inline void shade(const Scene& sc, const Hit& h, double* rgb) {
  const TextureSpec& tex = sc.spec.texture;
  if (h.plane < 0) {
    for (int c = 0; c < 3; ++c) {
      double v = fbm(h.point.x, h.point.y, sc.hf_seed + 77ULL * static_cast<std::uint64_t>(c + 1), tex);
      rgb[c] = tex.bias + tex.contrast * (2.0 * v - 1.0);
    }
    return;
  }
  const ScenePlane& p = sc.planes[static_cast<std::size_t>(h.plane)];
  for (int c = 0; c < 3; ++c) {
    double v = fbm(h.point.x, h.point.y, p.tex_seed + 77ULL * static_cast<std::uint64_t>(c + 1), tex);
    rgb[c] = (tex.bias + tex.contrast * (2.0 * v - 1.0)) * p.tint[c];
  }
}

}  // namespace detail

struct RenderResult {
  Tensor image;               // (H,W,3), quantized to the 16-bit PPM grid
  std::vector<double> depth;  // camera-frame z per pixel, on the PGM grid
};

// Pinhole render with nearest-surface visibility and analytic per-pixel depth.
// `pose` maps scene (target-frame) points into the rendering camera.
inline RenderResult render(const Scene& scene, const RigidTransform& pose, const Intrinsics& K) {
  const Index W = scene.spec.width, H = scene.spec.height;
  RigidTransform inv = pose.inverse();
  // Camera origin and rotated rays in the scene frame.
  Vec3 origin = inv.apply(Vec3{0, 0, 0});
  RenderResult out;
  out.image = Tensor({H, W, 3});
  out.depth.resize(static_cast<std::size_t>(W * H));
  const double scale = scene.pgm_scale();
  bool any_hit = false;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      Vec3 dir_cam = K.unproject(static_cast<double>(x), static_cast<double>(y));
      Vec3 dir = pose.R.transpose() * dir_cam;
      detail::Hit h = detail::intersect(scene, origin, dir);
      std::size_t k = static_cast<std::size_t>(y * W + x);
      if (!h.ok) {
        out.depth[k] = 0.0;
        continue;
      }
      any_hit = true;
      // Depth is the camera-frame z of the hit; rays carry dir_cam.z == 1.
      double z = pose.apply(h.point).z;
      out.depth[k] = std::llround(z / scale) * scale;
      double rgb[3];
      detail::shade(scene, h, rgb);
      for (int c = 0; c < 3; ++c) out.image.data()[(y * W + x) * 3 + c] = rgb[c];
    }
  if (!any_hit) throw ContractViolation("render: scene is fully behind the camera");
  quantize_image16(out.image);
  return out;
}

// Exact (un-quantized) analytic depth along one camera ray; used for
// occlusion reasoning.
inline bool surface_depth(const Scene& scene, const RigidTransform& pose, const Intrinsics& K, double u,
                          double v, double& z_out) {
  RigidTransform inv = pose.inverse();
  Vec3 origin = inv.apply(Vec3{0, 0, 0});
  Vec3 dir = pose.R.transpose() * K.unproject(u, v);
  detail::Hit h = detail::intersect(scene, origin, dir);
  if (!h.ok) return false;
  z_out = pose.apply(h.point).z;
  return true;
}

// ---------------------------------------------------------------------------
// Frame samples and datasets
// ---------------------------------------------------------------------------

struct FrameSample {
  Index W = 0, H = 0;
  Tensor target, prev, next;        // images in [0,1]
  std::vector<double> gt_depth;     // target ground truth, meters
  double depth_scale = 0;           // meters per PGM unit
  RigidTransform T_prev, T_next;    // target -> context
  Intrinsics K;
  std::vector<std::uint8_t> vis_prev, vis_next;  // in-view and unoccluded

  bool operator==(const FrameSample& o) const {
    auto teq = [](const Tensor& a, const Tensor& b) {
      if (a.shape() != b.shape()) return false;
      for (Index i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
      return true;
    };
    auto peq = [](const RigidTransform& a, const RigidTransform& b) {
      for (int i = 0; i < 9; ++i)
        if (a.R.m[i] != b.R.m[i]) return false;
      return a.t.x == b.t.x && a.t.y == b.t.y && a.t.z == b.t.z;
    };
    return W == o.W && H == o.H && teq(target, o.target) && teq(prev, o.prev) && teq(next, o.next) &&
           gt_depth == o.gt_depth && depth_scale == o.depth_scale && peq(T_prev, o.T_prev) &&
           peq(T_next, o.T_next) && K.fx == o.K.fx && K.fy == o.K.fy && K.cx == o.K.cx && K.cy == o.K.cy &&
           vis_prev == o.vis_prev && vis_next == o.vis_next;
  }
};

// Occlusion test against the analytic surface: a target pixel is visible in
// the context view when its transferred point projects in view and the
// context's nearest surface is not in front of it.
inline std::vector<std::uint8_t> visibility_mask(const Scene& scene, const RigidTransform& T,
                                                 const Intrinsics& K, Index W, Index H) {
  std::vector<std::uint8_t> vis(static_cast<std::size_t>(W * H), 0);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double z_t;
      if (!surface_depth(scene, RigidTransform::identity(), K, static_cast<double>(x),
                         static_cast<double>(y), z_t))
        continue;
      Vec3 ray = K.unproject(static_cast<double>(x), static_cast<double>(y));
      Vec3 X_c = T.apply(ray * z_t);
      if (X_c.z <= kEpsZ) continue;
      double u = K.fx * X_c.x / X_c.z + K.cx;
      double v = K.fy * X_c.y / X_c.z + K.cy;
      if (u < 0 || u > static_cast<double>(W - 1) || v < 0 || v > static_cast<double>(H - 1)) continue;
      double z_surf;
      if (!surface_depth(scene, T, K, u, v, z_surf)) continue;
      if (z_surf < X_c.z * (1.0 - 1e-4) - 1e-6) continue;  // something nearer occludes
      vis[static_cast<std::size_t>(y * W + x)] = 1;
    }
  return vis;
}

struct MotionSpec {
  // Context motion drawn so the epipolar disparity span at 1/4 feature
  // resolution lands in [span_lo, span_hi] pixels over the scene depth range.
  double span_lo = 2.0, span_hi = 4.5;
  double rot_sigma = 0.004;  // radians
  double tz_frac = 0.08;     // |t_z| relative to lateral magnitude
};

inline RigidTransform draw_motion(const SceneSpec& spec, const MotionSpec& motion, Rng& rng) {
  double fx_feat = spec.K.fx / 4.0;
  double inv_span = 1.0 / spec.depth_min - 1.0 / spec.depth_max;
  double span_px = rng.uniform(motion.span_lo, motion.span_hi);
  double t_mag = span_px / (fx_feat * inv_span);
  double ang = rng.uniform(0.0, 6.283185307179586);
  RigidTransform T;
  T.t = Vec3{t_mag * std::cos(ang), t_mag * std::sin(ang), t_mag * motion.tz_frac * rng.uniform(-1, 1)};
  T.R = axis_angle(Vec3{rng.normal(0, motion.rot_sigma), rng.normal(0, motion.rot_sigma),
                        rng.normal(0, motion.rot_sigma)});
  return T;
}

inline FrameSample make_sample(const Scene& scene, const RigidTransform& T_prev,
                               const RigidTransform& T_next) {
  const SceneSpec& spec = scene.spec;
  FrameSample s;
  s.W = spec.width;
  s.H = spec.height;
  s.K = spec.K;
  s.T_prev = T_prev;
  s.T_next = T_next;
  RenderResult rt = render(scene, RigidTransform::identity(), spec.K);
  RenderResult rp = render(scene, T_prev, spec.K);
  RenderResult rn = render(scene, T_next, spec.K);
  s.target = rt.image;
  s.prev = rp.image;
  s.next = rn.image;
  s.gt_depth = rt.depth;
  s.depth_scale = scene.pgm_scale();
  s.vis_prev = visibility_mask(scene, T_prev, spec.K, spec.width, spec.height);
  s.vis_next = visibility_mask(scene, T_next, spec.K, spec.width, spec.height);
  return s;
}

struct DatasetSpec {
  std::uint64_t seed = 7;
  Index samples = 20;
  Index width = 64, height = 64;
  double depth_min = 2.5, depth_max = 10.0;
  MotionSpec motion;
  TextureSpec texture;
};

inline SceneSpec scene_spec_for(const DatasetSpec& ds, Index index) {
  SceneSpec sp;
  sp.seed = ds.seed * 1000003ULL + static_cast<std::uint64_t>(index);
  SceneLayout layouts[3] = {SceneLayout::FrontoParallel, SceneLayout::Slanted, SceneLayout::HeightField};
  sp.layout = layouts[index % 3];
  sp.plane_count = 2 + static_cast<int>(index % 3);
  sp.depth_min = ds.depth_min;
  sp.depth_max = ds.depth_max;
  sp.texture = ds.texture;
  sp.width = ds.width;
  sp.height = ds.height;
  double f = static_cast<double>(ds.width);
  sp.K = Intrinsics{f, f, (static_cast<double>(ds.width) - 1) / 2.0,
                    (static_cast<double>(ds.height) - 1) / 2.0};
  return sp;
}

inline FrameSample generate_sample(const DatasetSpec& ds, Index index) {
  SceneSpec sp = scene_spec_for(ds, index);
  Scene scene = generate_scene(sp);
  Rng rng(sp.seed ^ 0xabcdef12345ULL);
  RigidTransform T_next = draw_motion(sp, ds.motion, rng);
  RigidTransform T_prev = T_next.inverse();
  // Independent small perturbation keeps the two contexts from mirroring.
  RigidTransform jitter;
  jitter.R = axis_angle(Vec3{rng.normal(0, 0.002), rng.normal(0, 0.002), rng.normal(0, 0.002)});
  jitter.t = Vec3{rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, 0.01)};
  T_prev.R = jitter.R * T_prev.R;
  T_prev.t = T_prev.t + jitter.t;
  return make_sample(scene, T_prev, T_next);
}

inline std::vector<FrameSample> generate_dataset(const DatasetSpec& ds) {
  std::vector<FrameSample> out;
  for (Index i = 0; i < ds.samples; ++i) out.push_back(generate_sample(ds, i));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestMagic = "epidepth-dataset v1";

inline void write_dataset(const std::vector<FrameSample>& samples, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) throw ContractViolation("cannot open for writing: " + dir + "/manifest.txt");
  mf << kManifestMagic << "\n" << samples.size() << "\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu", i);
    mf << name << "\n";
    fs::path sub = fs::path(dir) / name;
    fs::create_directories(sub);
    const FrameSample& s = samples[i];
    write_image_ppm((sub / "target.ppm").string(), s.target);
    write_image_ppm((sub / "prev.ppm").string(), s.prev);
    write_image_ppm((sub / "next.ppm").string(), s.next);
    write_depth_pgm((sub / "depth.pgm").string(), s.gt_depth, s.W, s.H, s.depth_scale);
    std::vector<double> vp(s.vis_prev.begin(), s.vis_prev.end());
    std::vector<double> vn(s.vis_next.begin(), s.vis_next.end());
    write_gray_pgm8((sub / "vis_prev.pgm").string(), vp, s.W, s.H);
    write_gray_pgm8((sub / "vis_next.pgm").string(), vn, s.W, s.H);
    CameraFile cam;
    cam.K = s.K;
    cam.frames = {s.T_prev, s.T_next};
    write_camera_file((sub / "cameras.txt").string(), cam);
  }
}

inline std::vector<FrameSample> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) throw ContractViolation("dataset: missing manifest.txt in " + dir);
  std::string magic;
  std::getline(mf, magic);
  if (magic != kManifestMagic)
    throw ContractViolation("dataset: unsupported manifest version '" + magic + "'");
  std::size_t count = 0;
  if (!(mf >> count)) throw ContractViolation("dataset: manifest missing sample count");
  std::string name;
  std::getline(mf, name);
  std::vector<FrameSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(mf, name) || name.empty())
      throw ContractViolation("dataset: manifest truncated at entry " + std::to_string(i));
    fs::path sub = fs::path(dir) / name;
    FrameSample s;
    s.target = read_image_ppm((sub / "target.ppm").string());
    s.prev = read_image_ppm((sub / "prev.ppm").string());
    s.next = read_image_ppm((sub / "next.ppm").string());
    s.H = s.target.shape()[0];
    s.W = s.target.shape()[1];
    DepthPgm d = read_depth_pgm((sub / "depth.pgm").string());
    if (d.W != s.W || d.H != s.H) throw ContractViolation("dataset: depth size mismatch in " + name);
    s.gt_depth = std::move(d.depth);
    s.depth_scale = d.scale;
    CameraFile cam = read_camera_file((sub / "cameras.txt").string());
    if (cam.frames.size() != 2) throw ContractViolation("dataset: expected 2 pose lines in " + name);
    s.K = cam.K;
    s.T_prev = cam.frames[0];
    s.T_next = cam.frames[1];
    auto read_mask = [&](const char* file) {
      std::ifstream is(sub / file, std::ios::binary);
      if (!is) throw ContractViolation("dataset: missing " + std::string(file) + " in " + name);
      auto h = detail::read_pnm_header(is, (sub / file).string());
      std::vector<char> raster(static_cast<std::size_t>(h.W * h.H));
      is.read(raster.data(), static_cast<std::streamsize>(raster.size()));
      if (is.gcount() != static_cast<std::streamsize>(raster.size()))
        throw ContractViolation("dataset: truncated mask in " + name);
      std::vector<std::uint8_t> m(raster.size());
      for (std::size_t k = 0; k < raster.size(); ++k) m[k] = raster[k] ? 1 : 0;
      return m;
    };
    s.vis_prev = read_mask("vis_prev.pgm");
    s.vis_next = read_mask("vis_next.pgm");
    out.push_back(std::move(s));
  }
  return out;
}

// Calibrated SE(3) perturbation for robustness experiments.
inline RigidTransform perturb_pose(const RigidTransform& T, double sigma_rot, double sigma_trans, Rng& rng) {
  RigidTransform out = T;
  out.R = axis_angle(Vec3{rng.normal(0, sigma_rot), rng.normal(0, sigma_rot), rng.normal(0, sigma_rot)}) * T.R;
  out.t = T.t + Vec3{rng.normal(0, sigma_trans), rng.normal(0, sigma_trans), rng.normal(0, sigma_trans)};
  return out;
}

}  // namespace epidepth
