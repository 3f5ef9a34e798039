#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epidepth/geometry.hpp"
#include "epidepth/ops.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

struct LossWeights {
  double alpha_photo = 0.85;  // SSIM/L1 mix
  double lambda_s = 1e-4;     // smoothness
  double lambda_H = 0.5;      // high-response term
  double lambda_C = 0.5;      // context-adjusted term
  Index S = 4;                // multi-scale map count

  void validate() const {
    if (alpha_photo < 0 || alpha_photo > 1)
      throw ContractViolation("LossWeights: alpha_photo must lie in [0,1]");
    if (lambda_s < 0 || lambda_H < 0 || lambda_C < 0)
      throw ContractViolation("LossWeights: weights must be non-negative");
    if (S < 1) throw ContractViolation("LossWeights: S must be >= 1");
  }
};

inline Tensor mask_tensor(const std::vector<std::uint8_t>& m, ShapeVec shape) {
  Tensor t(std::move(shape));
  if (static_cast<std::size_t>(t.size()) != m.size())
    throw ContractViolation("mask_tensor: size mismatch");
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = m[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Windowed SSIM with 3x3 means, averaged over channels. Inputs (H,W,C) in
// [0,1]; output (H,W) in [-1,1].
inline Tensor ssim_map(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractViolation("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 3) throw ContractViolation("ssim: expected (H,W,C)");
  Tensor mu1 = box_filter3(a);
  Tensor mu2 = box_filter3(b);
  Tensor s11 = sub(box_filter3(mul(a, a)), mul(mu1, mu1));
  Tensor s22 = sub(box_filter3(mul(b, b)), mul(mu2, mu2));
  Tensor s12 = sub(box_filter3(mul(a, b)), mul(mu1, mu2));
  Tensor num = mul(offset(scale(mul(mu1, mu2), 2.0), kSsimC1), offset(scale(s12, 2.0), kSsimC2));
  Tensor den = mul(offset(add(mul(mu1, mu1), mul(mu2, mu2)), kSsimC1), offset(add(s11, s22), kSsimC2));
  return mean_axis(divide(num, den), 2, false);
}

// ---------------------------------------------------------------------------
// Photometric loss
// ---------------------------------------------------------------------------

// Per-pixel photometric error: alpha*(1-SSIM)/2 + (1-alpha)*|I - Ihat|,
// with the absolute term averaged over channels.
inline Tensor photometric_map(const Tensor& I, const Tensor& Ihat, double alpha_photo) {
  Tensor l1 = mean_axis(abs(sub(I, Ihat)), 2, false);
  if (alpha_photo == 0.0) return l1;
  Tensor ssim_term = scale(offset(scale(ssim_map(I, Ihat), -1.0), 1.0), 0.5 * alpha_photo);
  return add(ssim_term, scale(l1, 1.0 - alpha_photo));
}

struct PhotometricLoss {
  Tensor map;   // (H,W)
  Tensor mean;  // scalar over masked-in pixels
  Index count = 0;
};

inline PhotometricLoss photometric_loss(const Tensor& I, const Tensor& Ihat,
                                        const std::vector<std::uint8_t>& mask, double alpha_photo) {
  PhotometricLoss out;
  out.map = photometric_map(I, Ihat, alpha_photo);
  Index count = 0;
  for (auto m : mask)
    if (m) ++count;
  if (count == 0) throw ContractViolation("photometric_loss: empty mask");
  Tensor mt = mask_tensor(mask, out.map.shape());
  out.mean = scale(sum_all(mul(out.map, mt)), 1.0 / static_cast<double>(count));
  out.count = count;
  return out;
}

// ---------------------------------------------------------------------------
// Edge-aware smoothness
// ---------------------------------------------------------------------------

// (1/HW) * sum |du d| e^{-|du I|} + |dv d| e^{-|dv I|} with the depth map
// mean-normalized first and forward differences throughout. The image weights
// use the channel-mean absolute gradient.
inline Tensor smoothness_loss(const Tensor& depth, const Tensor& image) {
  if (depth.rank() != 2) throw ContractViolation("smoothness_loss: depth must be (H,W)");
  const Index H = depth.shape()[0], W = depth.shape()[1];
  if (image.rank() != 3 || image.shape()[0] != H || image.shape()[1] != W)
    throw ContractViolation("smoothness_loss: image/depth shape mismatch");
  for (Index i = 0; i < depth.size(); ++i)
    if (!(depth.data()[i] > 0)) throw ContractViolation("smoothness_loss: depth must be positive");
  const Index C = image.shape()[2];

  // Image gradients are constants of the loss.
  Tensor wu({H, W - 1});
  Tensor wv({H - 1, W});
  const double* pi = image.data();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x + 1 < W; ++x) {
      double g = 0;
      for (Index c = 0; c < C; ++c)
        g += std::fabs(pi[(y * W + x + 1) * C + c] - pi[(y * W + x) * C + c]);
      wu.data()[y * (W - 1) + x] = std::exp(-g / static_cast<double>(C));
    }
  for (Index y = 0; y + 1 < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double g = 0;
      for (Index c = 0; c < C; ++c)
        g += std::fabs(pi[((y + 1) * W + x) * C + c] - pi[(y * W + x) * C + c]);
      wv.data()[y * W + x] = std::exp(-g / static_cast<double>(C));
    }

  Tensor dn = divide(depth, mean_all(depth));
  Tensor du = abs(sub(slice(dn, {0, 1}, {H, W}), slice(dn, {0, 0}, {H, W - 1})));
  Tensor dv = abs(sub(slice(dn, {1, 0}, {H, W}), slice(dn, {0, 0}, {H - 1, W})));
  Tensor total = add(sum_all(mul(du, wu)), sum_all(mul(dv, wv)));
  return scale(total, 1.0 / static_cast<double>(H * W));
}

// ---------------------------------------------------------------------------
// Aggregated training loss
// ---------------------------------------------------------------------------

struct DepthPredictions {
  Tensor high_response;                 // (h4, w4), meters
  std::vector<std::uint8_t> conf_mask;  // confidence >= lambda_min and valid
  std::vector<std::uint8_t> any_valid;  // >= 1 valid epipolar candidate
  Tensor context_adjusted;              // (h4, w4)
  std::vector<Tensor> multi_scale;      // ascending resolution, finest last
};

struct LossReport {
  Tensor total;  // tracked scalar
  // Components; L_M is indexed by the scale weight i (i=1 finest first).
  double total_value = 0;
  double L_H = 0, L_C = 0;
  std::vector<double> L_M;
  double Lp_H = 0, Ls_H = 0, Lp_C = 0, Ls_C = 0;
  std::vector<double> Lp_M, Ls_M;
  Index count_H = 0, count_C = 0;
  std::vector<Index> count_M;

  std::string csv_header(Index S) const {
    std::string h = "step,total,L_H,L_C";
    for (Index i = 1; i <= S; ++i) h += ",L_M" + std::to_string(i);
    return h;
  }
};

namespace detail {

inline std::vector<std::uint8_t> upsample_mask_nearest(const std::vector<std::uint8_t>& m, Index h, Index w,
                                                       Index H, Index W) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(H * W));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) out[static_cast<std::size_t>(y * W + x)] =
        m[static_cast<std::size_t>(std::min(y * h / H, h - 1) * w + std::min(x * w / W, w - 1))];
  return out;
}

struct MapLoss {
  Tensor value;  // L_p + lambda_s * L_s (tracked scalar); undefined when skipped
  double lp = 0, ls = 0;
  Index count = 0;
  bool skipped = false;
};

// Photometric (min over contexts) + smoothness for one depth map at full
// resolution. `extra_mask` restricts the photometric average (empty = none).
inline MapLoss per_map_loss(const Tensor& depth_full, const Tensor& I_t, const Tensor& I_prev,
                            const Tensor& I_next, const Intrinsics& K, const RigidTransform& T_prev,
                            const RigidTransform& T_next, const LossWeights& w,
                            const std::vector<std::uint8_t>& extra_mask) {
  const Index H = depth_full.shape()[0], W = depth_full.shape()[1];
  auto warp_prev = warp_image(I_prev, depth_full, K, T_prev);
  auto warp_next = warp_image(I_next, depth_full, K, T_next);
  Tensor lp_prev = photometric_map(I_t, warp_prev.image, w.alpha_photo);
  Tensor lp_next = photometric_map(I_t, warp_next.image, w.alpha_photo);

  // Per-pixel minimum over contexts; invalid warps are pushed to +BIG so the
  // other context wins, and pixels valid in neither are masked out entirely.
  const double BIG = 1e9;
  Tensor big_prev({H, W}), big_next({H, W});
  std::vector<std::uint8_t> union_mask(static_cast<std::size_t>(H * W));
  for (Index i = 0; i < H * W; ++i) {
    bool vp = warp_prev.valid[static_cast<std::size_t>(i)] != 0;
    bool vn = warp_next.valid[static_cast<std::size_t>(i)] != 0;
    bool extra = extra_mask.empty() || extra_mask[static_cast<std::size_t>(i)] != 0;
    big_prev.data()[i] = vp ? 0.0 : BIG;
    big_next.data()[i] = vn ? 0.0 : BIG;
    union_mask[static_cast<std::size_t>(i)] = ((vp || vn) && extra) ? 1 : 0;
  }
  Tensor combined = min_elem(add(mul(lp_prev, mask_tensor(warp_prev.valid, {H, W})), big_prev),
                             add(mul(lp_next, mask_tensor(warp_next.valid, {H, W})), big_next));
  MapLoss out;
  Index count = 0;
  for (auto m : union_mask)
    if (m) ++count;
  if (count == 0) {
    out.skipped = true;
    return out;
  }
  Tensor um = mask_tensor(union_mask, {H, W});
  Tensor lp = scale(sum_all(mul(combined, um)), 1.0 / static_cast<double>(count));
  Tensor ls = smoothness_loss(depth_full, I_t);
  out.value = add(lp, scale(ls, w.lambda_s));
  out.lp = lp.scalar_value();
  out.ls = ls.scalar_value();
  out.count = count;
  return out;
}

inline Tensor to_full_res(const Tensor& depth, Index H, Index W) {
  Tensor d3 = reshape(depth, {depth.shape()[0], depth.shape()[1], 1});
  if (depth.shape()[0] == H && depth.shape()[1] == W) return depth;
  return reshape(upsample_bilinear(d3, H, W), {H, W});
}

}  // namespace detail

// Aggregate loss over the high-response, context-adjusted, and multi-scale
// maps: total = lambda_H*L_H + lambda_C*L_C + sum_i 2^-i L_Mi with i=1 at the
// finest scale. Every map is bilinearly upsampled to full resolution before
// warping; the high-response term is restricted to the confidence mask and is
// skipped (reported zero) when that mask is empty.
inline LossReport total_loss(const DepthPredictions& pred, const Tensor& I_t, const Tensor& I_prev,
                             const Tensor& I_next, const Intrinsics& K, const RigidTransform& T_prev,
                             const RigidTransform& T_next, const LossWeights& w) {
  w.validate();
  if (!I_prev.defined() || !I_next.defined())
    throw ContractViolation("total_loss: both context frames are required");
  const Index H = I_t.shape()[0], W = I_t.shape()[1];
  if (static_cast<Index>(pred.multi_scale.size()) != w.S)
    throw ContractViolation("total_loss: expected " + std::to_string(w.S) + " multi-scale maps");

  LossReport rep;
  Tensor total = Tensor::scalar(0.0);

  const Index h4 = pred.high_response.shape()[0], w4 = pred.high_response.shape()[1];
  {
    std::vector<std::uint8_t> conf_full =
        detail::upsample_mask_nearest(pred.conf_mask, h4, w4, H, W);
    Tensor d_full = detail::to_full_res(pred.high_response, H, W);
    auto ml = detail::per_map_loss(d_full, I_t, I_prev, I_next, K, T_prev, T_next, w, conf_full);
    if (!ml.skipped) {
      rep.Lp_H = ml.lp;
      rep.Ls_H = ml.ls;
      rep.count_H = ml.count;
      rep.L_H = ml.value.scalar_value();
      total = add(total, scale(ml.value, w.lambda_H));
    }
  }
  {
    Tensor d_full = detail::to_full_res(pred.context_adjusted, H, W);
    auto ml = detail::per_map_loss(d_full, I_t, I_prev, I_next, K, T_prev, T_next, w, {});
    if (ml.skipped) throw ContractViolation("total_loss: no valid pixels for the context-adjusted map");
    rep.Lp_C = ml.lp;
    rep.Ls_C = ml.ls;
    rep.count_C = ml.count;
    rep.L_C = ml.value.scalar_value();
    total = add(total, scale(ml.value, w.lambda_C));
  }
  rep.L_M.assign(static_cast<std::size_t>(w.S), 0.0);
  rep.Lp_M.assign(static_cast<std::size_t>(w.S), 0.0);
  rep.Ls_M.assign(static_cast<std::size_t>(w.S), 0.0);
  rep.count_M.assign(static_cast<std::size_t>(w.S), 0);
  for (Index j = 0; j < w.S; ++j) {
    // multi_scale is ordered coarse->fine; scale index i = S - j puts i=1 at
    // the finest map (weight 1/2).
    const Index i = w.S - j;
    Tensor d_full = detail::to_full_res(pred.multi_scale[static_cast<std::size_t>(j)], H, W);
    auto ml = detail::per_map_loss(d_full, I_t, I_prev, I_next, K, T_prev, T_next, w, {});
    if (ml.skipped) throw ContractViolation("total_loss: no valid pixels for a multi-scale map");
    std::size_t slot = static_cast<std::size_t>(i - 1);
    rep.Lp_M[slot] = ml.lp;
    rep.Ls_M[slot] = ml.ls;
    rep.count_M[slot] = ml.count;
    rep.L_M[slot] = ml.value.scalar_value();
    total = add(total, scale(ml.value, std::pow(0.5, static_cast<double>(i))));
  }
  rep.total = total;
  rep.total_value = total.scalar_value();
  return rep;
}

}  // namespace epidepth
