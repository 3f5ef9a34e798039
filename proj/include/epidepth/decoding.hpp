#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "epidepth/matching.hpp"
#include "epidepth/ops.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

// ---------------------------------------------------------------------------
// High-response window decoding
// ---------------------------------------------------------------------------

struct HighResponseDepth {
  Tensor depth;                         // (H,W) meters; tracked iff A tracked
  Tensor confidence;                    // (H,W) column maxima, untracked
  std::vector<std::uint8_t> mask;       // confidence >= lambda_min and valid
  std::vector<std::uint8_t> any_valid;  // >= 1 valid candidate
};

// mask(u,v) = (max_i A(u,v,i) >= lambda_min) and validity.
inline std::vector<std::uint8_t> confidence_mask(const CostVolume& A, double lambda_min) {
  if (lambda_min < 0 || lambda_min > 1)
    throw ContractViolation("confidence_mask: lambda_min must lie in [0,1]");
  const Index P = A.H * A.W, D = A.D;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(P), 0);
  for (Index p = 0; p < P; ++p) {
    bool any = false;
    double mx = 0;
    for (Index i = 0; i < D; ++i) {
      if (A.valid[static_cast<std::size_t>(p * D + i)]) any = true;
      mx = std::max(mx, A.values.data()[p * D + i]);
    }
    mask[static_cast<std::size_t>(p)] = (any && mx >= lambda_min) ? 1 : 0;
  }
  return mask;
}

// Continuous depth from the 2s+1 window around the argmax bin (ties take the
// lowest index), re-normalized within the window and clamped at the bin-range
// edges. The argmax is a gradient barrier: derivatives flow only through the
// re-normalized weights. Fully-invalid pixels keep a placeholder value with
// their mask bit cleared.
inline HighResponseDepth high_response_decode(const CostVolume& A, const DepthBins& bins, Index s,
                                              double lambda_min) {
  if (s < 0) throw ContractViolation("high_response_decode: window half-width must be >= 0");
  if (2 * s + 1 > bins.count)
    throw ContractViolation("high_response_decode: window 2s+1 exceeds bin count");
  if (bins.count != A.D) throw ContractViolation("high_response_decode: bins do not match the volume");
  const Index H = A.H, W = A.W, D = A.D;
  const Index P = H * W;

  HighResponseDepth out;
  out.depth = Tensor({H, W});
  out.confidence = Tensor({H, W});
  out.any_valid.assign(static_cast<std::size_t>(P), 0);
  std::vector<Index> win_lo(static_cast<std::size_t>(P)), win_hi(static_cast<std::size_t>(P));
  const double* pa = A.values.data();
  for (Index p = 0; p < P; ++p) {
    Index h = 0;
    double mx = pa[p * D];
    bool any = A.valid[static_cast<std::size_t>(p * D)] != 0;
    for (Index i = 1; i < D; ++i) {
      if (A.valid[static_cast<std::size_t>(p * D + i)]) any = true;
      if (pa[p * D + i] > mx) {
        mx = pa[p * D + i];
        h = i;
      }
    }
    Index lo = std::max<Index>(0, h - s), hi = std::min(D - 1, h + s);
    win_lo[static_cast<std::size_t>(p)] = lo;
    win_hi[static_cast<std::size_t>(p)] = hi;
    double sum = 0, acc = 0;
    for (Index i = lo; i <= hi; ++i) {
      sum += pa[p * D + i];
      acc += pa[p * D + i] * bins.values[static_cast<std::size_t>(i)];
    }
    out.depth.data()[p] = acc / sum;
    out.confidence.data()[p] = mx;
    out.any_valid[static_cast<std::size_t>(p)] = any ? 1 : 0;
  }

  if (A.values.tracked()) {
    auto ad = A.values.impl();
    auto dd = out.depth.impl();
    std::vector<double> bin_values = bins.values;
    std::vector<std::uint8_t> any = out.any_valid;
    A.values.tape()->record({A.values}, out.depth, [ad, dd, win_lo, win_hi, bin_values, any, P, D] {
      if (ad->grad.empty()) return;
      for (Index p = 0; p < P; ++p) {
        if (!any[static_cast<std::size_t>(p)]) continue;
        double g = dd->grad[static_cast<std::size_t>(p)];
        if (g == 0.0) continue;
        double sum = 0;
        for (Index i = win_lo[static_cast<std::size_t>(p)]; i <= win_hi[static_cast<std::size_t>(p)]; ++i)
          sum += ad->value[static_cast<std::size_t>(p * D + i)];
        double depth = dd->value[static_cast<std::size_t>(p)];
        for (Index i = win_lo[static_cast<std::size_t>(p)]; i <= win_hi[static_cast<std::size_t>(p)]; ++i)
          ad->grad[static_cast<std::size_t>(p * D + i)] +=
              g * (bin_values[static_cast<std::size_t>(i)] - depth) / sum;
      }
    });
  }

  out.mask = confidence_mask(A, lambda_min);
  return out;
}

// ---------------------------------------------------------------------------
// Context-adjusted decoding
// ---------------------------------------------------------------------------

struct ContextAdjustParams {
  Tensor w_in, b_in;  // (3+1) -> width
  struct Block {
    Tensor w1, b1;  // (width+1) -> 3*width
    Tensor w2, b2;  // 3*width -> width
  };
  std::vector<Block> blocks;
  Tensor w_out, b_out;  // width -> 1, zero-initialized for a residual identity
  Index width = 16;
  double eps_std = 1e-6;

  static ContextAdjustParams init(Index width, std::uint64_t seed) {
    if (width < 2) throw ContractViolation("ContextAdjustParams: width must be >= 2");
    ContextAdjustParams p;
    p.width = width;
    Rng rng(seed);
    auto make = [&](ShapeVec shape, Index fan_in) {
      Tensor t(std::move(shape));
      double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
      return t;
    };
    p.w_in = make({width, 3, 3, 4}, 36);
    p.b_in = Tensor({width});
    for (int b = 0; b < 2; ++b) {
      Block blk;
      blk.w1 = make({3 * width, 3, 3, width + 1}, 9 * (width + 1));
      blk.b1 = Tensor({3 * width});
      blk.w2 = make({width, 3, 3, 3 * width}, 27 * width);
      blk.b2 = Tensor({width});
      p.blocks.push_back(std::move(blk));
    }
    p.w_out = Tensor({1, 3, 3, width});
    p.b_out = Tensor({1});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() {
    std::vector<std::pair<std::string, Tensor>> out = {{"in.w", w_in}, {"in.b", b_in}};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      std::string base = "block" + std::to_string(b) + ".";
      out.emplace_back(base + "w1", blocks[b].w1);
      out.emplace_back(base + "b1", blocks[b].b1);
      out.emplace_back(base + "w2", blocks[b].w2);
      out.emplace_back(base + "b2", blocks[b].b2);
    }
    out.emplace_back("out.w", w_out);
    out.emplace_back("out.b", b_out);
    return out;
  }
};

struct ContextAdjusted {
  Tensor depth;       // (H,W), clamped into [d_min, d_max]
  Tensor normalized;  // the zero-mean input map fed to the network
};

// Residual image-conditioned correction of the normalized high-response map:
// D_C = (D~ + theta(I, D~)) * std + mean, statistics taken over masked-in
// pixels only and guarded by eps_std. Fully-invalid pixels enter the network
// as zeros.
inline ContextAdjusted context_adjust(const HighResponseDepth& hr, const Tensor& I_t,
                                      const ContextAdjustParams& p, const DepthBins& bins) {
  const Index H = hr.depth.shape()[0], W = hr.depth.shape()[1];
  Index n_mask = 0;
  for (auto m : hr.mask)
    if (m) ++n_mask;
  if (n_mask == 0) throw ContractViolation("context_adjust: no masked-in pixels");
  if (I_t.rank() != 3 || I_t.shape()[0] % 4 != 0 || I_t.shape()[1] % 4 != 0 ||
      I_t.shape()[0] / 4 != H || I_t.shape()[1] / 4 != W)
    throw ContractViolation("context_adjust: image does not downsample to the depth resolution");

  Tensor m = mask_tensor(hr.mask, {H, W});
  Tensor gate = mask_tensor(hr.any_valid, {H, W});
  const double inv_n = 1.0 / static_cast<double>(n_mask);
  Tensor mean = scale(sum_all(mul(hr.depth, m)), inv_n);
  Tensor centered = sub(hr.depth, mean);
  Tensor var = scale(sum_all(mul(mul(centered, centered), m)), inv_n);
  // max(std, eps) realized as sqrt(max(var, eps^2)); identical values, and the
  // clamp keeps sqrt's gradient finite at var = 0.
  Tensor stddev = sqrt(clamp(var, p.eps_std * p.eps_std, 1e300));
  Tensor normalized = mul(divide(centered, stddev), gate);

  Tensor img_q = avg_pool2d(I_t, 4);
  Tensor norm3 = reshape(normalized, {H, W, 1});
  Tensor h = relu(conv2d(concat({img_q, norm3}, 2), p.w_in, p.b_in, 1));
  for (const auto& blk : p.blocks) {
    Tensor a = relu(conv2d(concat({h, norm3}, 2), blk.w1, blk.b1, 1));
    Tensor b = conv2d(a, blk.w2, blk.b2, 1);
    h = relu(add(h, b));
  }
  Tensor theta = reshape(conv2d(h, p.w_out, p.b_out, 1), {H, W});

  ContextAdjusted out;
  out.normalized = normalized;
  out.depth = clamp(add(mul(add(normalized, theta), stddev), mean), bins.d_min, bins.d_max);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-scale joint decoding
// ---------------------------------------------------------------------------

struct MultiScaleDepth {
  std::vector<Tensor> maps;  // resolutions 1/8, 1/4, 1/2, 1 (finest last)
  double d_min = 0, d_max = 0;
};

struct DecoderParams {
  // Single-frame encoder at full, 1/2, and 1/4 resolution.
  Tensor e1w, e1b, e2w, e2b, e3w, e3b;
  // Bottleneck fusing encoder features with the masked cost volume.
  Tensor bw, bb;
  // Decoder: down to 1/8 then up with skips; widths {2C, C, C, C/2}.
  Tensor d8w, d8b;
  Tensor s8w, s8b, s4w, s4b, s2w, s2b, s1w, s1b;
  Tensor h8w, h8b, h4w, h4b, h2w, h2b, h1w, h1b;
  Index C = 32, D = 64;

  static DecoderParams init(Index C, Index D, std::uint64_t seed) {
    if (C < 8 || C % 4 != 0) throw ContractViolation("DecoderParams: C must be >= 8 and divisible by 4");
    DecoderParams p;
    p.C = C;
    p.D = D;
    Rng rng(seed);
    auto make = [&](ShapeVec shape) {
      Tensor t(shape);
      Index fan_in = shape[1] * shape[2] * shape[3];
      double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
      return t;
    };
    const Index e1c = C / 2, e2c = 3 * C / 4, e3c = C;
    p.e1w = make({e1c, 3, 3, 3});
    p.e1b = Tensor({e1c});
    p.e2w = make({e2c, 3, 3, e1c});
    p.e2b = Tensor({e2c});
    p.e3w = make({e3c, 3, 3, e2c});
    p.e3b = Tensor({e3c});
    p.bw = make({C, 3, 3, e3c + D});
    p.bb = Tensor({C});
    p.d8w = make({2 * C, 3, 3, C});
    p.d8b = Tensor({2 * C});
    p.s8w = make({2 * C, 3, 3, 2 * C});
    p.s8b = Tensor({2 * C});
    p.s4w = make({C, 3, 3, 2 * C + C});
    p.s4b = Tensor({C});
    p.s2w = make({C, 3, 3, C + e2c});
    p.s2b = Tensor({C});
    p.s1w = make({C / 2, 3, 3, C + e1c});
    p.s1b = Tensor({C / 2});
    p.h8w = make({1, 3, 3, 2 * C});
    p.h8b = Tensor({1});
    p.h4w = make({1, 3, 3, C});
    p.h4b = Tensor({1});
    p.h2w = make({1, 3, 3, C});
    p.h2b = Tensor({1});
    p.h1w = make({1, 3, 3, C / 2});
    p.h1b = Tensor({1});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() {
    return {{"enc1.w", e1w}, {"enc1.b", e1b}, {"enc2.w", e2w}, {"enc2.b", e2b},
            {"enc3.w", e3w}, {"enc3.b", e3b}, {"bottleneck.w", bw}, {"bottleneck.b", bb},
            {"down8.w", d8w}, {"down8.b", d8b}, {"stage8.w", s8w}, {"stage8.b", s8b},
            {"stage4.w", s4w}, {"stage4.b", s4b}, {"stage2.w", s2w}, {"stage2.b", s2b},
            {"stage1.w", s1w}, {"stage1.b", s1b}, {"head8.w", h8w}, {"head8.b", h8b},
            {"head4.w", h4w}, {"head4.b", h4b}, {"head2.w", h2w}, {"head2.b", h2b},
            {"head1.w", h1w}, {"head1.b", h1b}};
  }
};

// Sigmoid output -> depth through linear inverse-depth interpolation.
inline Tensor sigmoid_to_depth(const Tensor& logits_hw1, double d_min, double d_max) {
  Tensor sig = sigmoid(logits_hw1);
  Tensor inv = offset(scale(sig, 1.0 / d_min - 1.0 / d_max), 1.0 / d_max);
  Tensor ones = Tensor::full(inv.shape(), 1.0);
  return clamp(divide(ones, inv), d_min, d_max);
}

// Zeroes cost-volume columns whose pixels fall below the confidence mask.
inline Tensor apply_confidence_mask(const CostVolume& A, const std::vector<std::uint8_t>& mask) {
  Tensor gate({A.H, A.W, 1});
  for (Index p = 0; p < A.H * A.W; ++p)
    gate.data()[p] = mask[static_cast<std::size_t>(p)] ? 1.0 : 0.0;
  return mul(A.values, gate);
}

// Single-frame features fused with the masked cost volume by a bottleneck
// convolution, decoded to S=4 sigmoid depth maps at 1/8..full resolution.
inline MultiScaleDepth multi_scale_decode(const Tensor& I_t, const Tensor& masked_volume,
                                          const DecoderParams& p, const DepthBins& bins) {
  if (I_t.rank() != 3 || I_t.shape()[0] % 8 != 0 || I_t.shape()[1] % 8 != 0)
    throw ContractViolation("multi_scale_decode: image extents " + shape_str(I_t.shape()) +
                            " must be divisible by 8");
  const Index H = I_t.shape()[0], W = I_t.shape()[1];
  if (masked_volume.rank() != 3 || masked_volume.shape()[0] != H / 4 || masked_volume.shape()[1] != W / 4)
    throw ContractViolation("multi_scale_decode: cost volume is not at 1/4 resolution");

  Tensor e1 = relu(conv2d(I_t, p.e1w, p.e1b, 1));   // full
  Tensor e2 = relu(conv2d(e1, p.e2w, p.e2b, 2));    // 1/2
  Tensor e3 = relu(conv2d(e2, p.e3w, p.e3b, 2));    // 1/4
  Tensor fused = relu(conv2d(concat({e3, masked_volume}, 2), p.bw, p.bb, 1));
  Tensor d8 = relu(conv2d(fused, p.d8w, p.d8b, 2));  // 1/8
  Tensor s8 = relu(conv2d(d8, p.s8w, p.s8b, 1));

  MultiScaleDepth out;
  out.d_min = bins.d_min;
  out.d_max = bins.d_max;
  out.maps.push_back(reshape(sigmoid_to_depth(conv2d(s8, p.h8w, p.h8b, 1), bins.d_min, bins.d_max),
                             {H / 8, W / 8}));
  Tensor u4 = upsample_bilinear(s8, H / 4, W / 4);
  Tensor s4 = relu(conv2d(concat({u4, fused}, 2), p.s4w, p.s4b, 1));
  out.maps.push_back(reshape(sigmoid_to_depth(conv2d(s4, p.h4w, p.h4b, 1), bins.d_min, bins.d_max),
                             {H / 4, W / 4}));
  Tensor u2 = upsample_bilinear(s4, H / 2, W / 2);
  Tensor s2 = relu(conv2d(concat({u2, e2}, 2), p.s2w, p.s2b, 1));
  out.maps.push_back(reshape(sigmoid_to_depth(conv2d(s2, p.h2w, p.h2b, 1), bins.d_min, bins.d_max),
                             {H / 2, W / 2}));
  Tensor u1 = upsample_bilinear(s2, H, W);
  Tensor s1 = relu(conv2d(concat({u1, e1}, 2), p.s1w, p.s1b, 1));
  out.maps.push_back(reshape(sigmoid_to_depth(conv2d(s1, p.h1w, p.h1b, 1), bins.d_min, bins.d_max),
                             {H, W}));
  return out;
}

}  // namespace epidepth
