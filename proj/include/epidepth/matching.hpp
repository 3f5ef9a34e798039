#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "epidepth/geometry.hpp"
#include "epidepth/loss.hpp"
#include "epidepth/ops.hpp"
#include "epidepth/rng.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

inline constexpr double kMaskLogit = -1e9;

// ---------------------------------------------------------------------------
// Toy feature encoder: three convolutions (stride 1, 2, 2) to 1/4 resolution
// ---------------------------------------------------------------------------

struct EncoderParams {
  Tensor w1, b1, w2, b2, w3, b3;
  Index C = 32;

  static EncoderParams init(Index C, std::uint64_t seed) {
    if (C < 2) throw ContractViolation("EncoderParams: C must be >= 2");
    EncoderParams p;
    p.C = C;
    Rng rng(seed);
    Index c1 = C / 2;
    auto make = [&](ShapeVec shape, Index fan_in) {
      Tensor t(shape);
      double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
      return t;
    };
    p.w1 = make({c1, 3, 3, 3}, 27);
    p.b1 = Tensor({c1});
    p.w2 = make({C, 3, 3, c1}, 9 * c1);
    p.b2 = Tensor({C});
    p.w3 = make({C, 3, 3, C}, 9 * C);
    p.b3 = Tensor({C});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() {
    return {{"conv1.w", w1}, {"conv1.b", b1}, {"conv2.w", w2},
            {"conv2.b", b2}, {"conv3.w", w3}, {"conv3.b", b3}};
  }
};

inline Tensor encode(const Tensor& image, const EncoderParams& p) {
  if (image.rank() != 3) throw ContractViolation("encode: expected (H,W,3)");
  if (image.shape()[0] % 4 != 0 || image.shape()[1] % 4 != 0)
    throw ContractViolation("encode: image extents " + shape_str(image.shape()) +
                            " must be divisible by 4");
  Tensor h1 = relu(conv2d(image, p.w1, p.b1, 1));
  Tensor h2 = relu(conv2d(h1, p.w2, p.b2, 2));
  return conv2d(h2, p.w3, p.b3, 2);
}

// ---------------------------------------------------------------------------
// Feature volume
// ---------------------------------------------------------------------------

struct FeatureVolume {
  Tensor values;                    // (H, W, D, C); invalid cells are zero
  std::vector<std::uint8_t> valid;  // H*W*D
  Index H = 0, W = 0, D = 0, C = 0;
};

// Each (u,v,i) cell receives the bilinear sample of F_c at the bin-i epipolar
// projection. K must already be rescaled to feature resolution.
inline FeatureVolume build_feature_volume(const Tensor& F_c, const DepthBins& bins, const Intrinsics& K,
                                          const RigidTransform& T) {
  if (F_c.rank() != 3) throw ContractViolation("build_feature_volume: F_c must be (H,W,C)");
  FeatureVolume vol;
  vol.H = F_c.shape()[0];
  vol.W = F_c.shape()[1];
  vol.C = F_c.shape()[2];
  vol.D = bins.count;
  EpipolarGrid grid = build_epipolar_grid(K, T, bins, vol.W, vol.H);
  const Index N = vol.H * vol.W * vol.D;
  Tensor coords({N, 2});
  Tensor gate({N, 1});
  vol.valid = grid.valid;
  for (Index n = 0; n < N; ++n) {
    coords.data()[n * 2] = grid.u[static_cast<std::size_t>(n)];
    coords.data()[n * 2 + 1] = grid.v[static_cast<std::size_t>(n)];
    gate.data()[n] = grid.valid[static_cast<std::size_t>(n)] ? 1.0 : 0.0;
  }
  Tensor feats = mul(grid_sample(F_c, coords), gate);
  vol.values = reshape(feats, {vol.H, vol.W, vol.D, vol.C});
  return vol;
}

// ---------------------------------------------------------------------------
// Attention parameters
// ---------------------------------------------------------------------------

// One cross/self pair. Keys, values, and the output projection are shared by
// the cross step and the self step of the layer; the self step has its own
// query projections (absent on the last layer, where no self step runs).
struct AttentionLayerParams {
  std::vector<Tensor> Wq, bq, Wk, bk, Wv, bv;  // per head, (C_h,C_h)/(C_h)
  Tensor Wo, bo;                               // (C,C), (C)
  std::vector<Tensor> Wq_self, bq_self;        // per head; empty on the last layer
};

struct AttentionParams {
  Index C = 32, N_h = 4, L = 2;
  std::vector<AttentionLayerParams> layers;

  Index head_dim() const { return C / N_h; }

  static AttentionParams init(Index C, Index N_h, Index L, std::uint64_t seed) {
    if (L < 1) throw ContractViolation("AttentionParams: need L >= 1 layers");
    if (N_h < 1 || C % N_h != 0)
      throw ContractViolation("AttentionParams: C (" + std::to_string(C) +
                              ") must divide into N_h (" + std::to_string(N_h) + ") heads");
    AttentionParams p;
    p.C = C;
    p.N_h = N_h;
    p.L = L;
    Rng rng(seed);
    const Index Ch = C / N_h;
    const double bound_h = std::sqrt(1.0 / static_cast<double>(Ch));
    const double bound_o = std::sqrt(1.0 / static_cast<double>(C));
    auto rand_tensor = [&](ShapeVec shape, double bound) {
      Tensor t(std::move(shape));
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
      return t;
    };
    for (Index l = 0; l < L; ++l) {
      AttentionLayerParams lp;
      for (Index h = 0; h < N_h; ++h) {
        lp.Wq.push_back(rand_tensor({Ch, Ch}, bound_h));
        lp.bq.push_back(Tensor({Ch}));
        lp.Wk.push_back(rand_tensor({Ch, Ch}, bound_h));
        lp.bk.push_back(Tensor({Ch}));
        lp.Wv.push_back(rand_tensor({Ch, Ch}, bound_h));
        lp.bv.push_back(Tensor({Ch}));
      }
      lp.Wo = rand_tensor({C, C}, bound_o);
      lp.bo = Tensor({C});
      if (l + 1 < L) {
        for (Index h = 0; h < N_h; ++h) {
          lp.Wq_self.push_back(rand_tensor({Ch, Ch}, bound_h));
          lp.bq_self.push_back(Tensor({Ch}));
        }
      }
      p.layers.push_back(std::move(lp));
    }
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& lp = layers[l];
      std::string base = "layer" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < lp.Wq.size(); ++h) {
        std::string hb = base + "head" + std::to_string(h) + ".";
        out.emplace_back(hb + "wq", lp.Wq[h]);
        out.emplace_back(hb + "bq", lp.bq[h]);
        out.emplace_back(hb + "wk", lp.Wk[h]);
        out.emplace_back(hb + "bk", lp.bk[h]);
        out.emplace_back(hb + "wv", lp.Wv[h]);
        out.emplace_back(hb + "bv", lp.bv[h]);
      }
      for (std::size_t h = 0; h < lp.Wq_self.size(); ++h) {
        std::string hb = base + "head" + std::to_string(h) + ".";
        out.emplace_back(hb + "wq_self", lp.Wq_self[h]);
        out.emplace_back(hb + "bq_self", lp.bq_self[h]);
      }
      out.emplace_back(base + "wo", lp.Wo);
      out.emplace_back(base + "bo", lp.bo);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Cross- and self-attention layers
// ---------------------------------------------------------------------------

namespace detail {

// Additive logit offsets excluding invalid candidates from the softmax.
inline Tensor key_mask_offsets(const std::vector<std::uint8_t>& valid, Index P, Index D) {
  Tensor m({P, D});
  for (Index i = 0; i < P * D; ++i)
    m.data()[i] = valid[static_cast<std::size_t>(i)] ? 0.0 : kMaskLogit;
  return m;
}

inline Tensor valid_gate(const std::vector<std::uint8_t>& valid, Index P, Index D) {
  Tensor g({P, D, 1});
  for (Index i = 0; i < P * D; ++i)
    g.data()[i] = valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return g;
}

}  // namespace detail

struct CrossAttentionOut {
  Tensor values;  // (H,W,D,C): updated feature volume V
  Tensor alpha;   // (H,W,D): attention averaged over heads
};

// Queries from the target features, keys and values from the volume. The
// per-bin values are scaled by their attention weight, concatenated over
// heads, and projected, so the volume keeps its (D,C) extent per pixel.
// Invalid candidates receive a -1e9 logit; a fully-invalid pixel therefore
// degrades to a uniform distribution (its validity stays cleared).
inline CrossAttentionOut cross_attention_layer(const Tensor& F_t, const FeatureVolume& vol,
                                               const AttentionLayerParams& p, Index N_h) {
  const Index H = vol.H, W = vol.W, D = vol.D, C = vol.C;
  const Index Ch = C / N_h;
  if (F_t.shape() != ShapeVec{H, W, C})
    throw ContractViolation("cross_attention_layer: F_t shape " + shape_str(F_t.shape()) +
                            " does not match volume");
  if (static_cast<Index>(p.Wq.size()) != N_h || p.Wq[0].shape() != ShapeVec{Ch, Ch})
    throw ContractViolation("cross_attention_layer: head parameters do not match C/N_h");
  const Index P = H * W;
  Tensor ft = reshape(F_t, {P, C});
  Tensor cv = reshape(vol.values, {P, D, C});
  Tensor mask = detail::key_mask_offsets(vol.valid, P, D);
  Tensor gate = detail::valid_gate(vol.valid, P, D);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(Ch));

  std::vector<Tensor> head_out, head_alpha;
  for (Index h = 0; h < N_h; ++h) {
    const std::size_t hh = static_cast<std::size_t>(h);
    Tensor ft_h = slice(ft, {0, h * Ch}, {P, (h + 1) * Ch});
    Tensor cv_h = slice(cv, {0, 0, h * Ch}, {P, D, (h + 1) * Ch});
    Tensor q = add(matmul(ft_h, p.Wq[hh]), p.bq[hh]);       // (P, Ch)
    Tensor k = add(matmul(cv_h, p.Wk[hh]), p.bk[hh]);       // (P, D, Ch)
    Tensor v = add(matmul(cv_h, p.Wv[hh]), p.bv[hh]);       // (P, D, Ch)
    Tensor logits = reshape(matmul_nt(k, reshape(q, {P, 1, Ch})), {P, D});
    Tensor alpha = softmax_last(add(scale(logits, inv_sqrt), mask));  // (P, D)
    head_out.push_back(mul(v, reshape(alpha, {P, D, 1})));
    head_alpha.push_back(reshape(alpha, {P, D, 1}));
  }
  Tensor merged = reshape(concat(head_out, 2), {P * D, C});
  Tensor projected = add(matmul(merged, p.Wo), p.bo);
  CrossAttentionOut out;
  // Invalid cells are re-zeroed so the volume invariant holds after biases.
  out.values = reshape(mul(reshape(projected, {P, D, C}), gate), {H, W, D, C});
  out.alpha = reshape(mean_axis(concat(head_alpha, 2), 2, false), {H, W, D});
  return out;
}

// Attention among the D candidates of each pixel; queries also come from the
// volume through the layer's dedicated query projections.
inline Tensor self_attention_layer(const FeatureVolume& vol, const AttentionLayerParams& p, Index N_h) {
  const Index H = vol.H, W = vol.W, D = vol.D, C = vol.C;
  const Index Ch = C / N_h;
  if (static_cast<Index>(p.Wq_self.size()) != N_h)
    throw ContractViolation("self_attention_layer: layer has no self-attention parameters");
  const Index P = H * W;
  Tensor cv = reshape(vol.values, {P, D, C});
  Tensor mask = reshape(detail::key_mask_offsets(vol.valid, P, D), {P, 1, D});
  Tensor gate = detail::valid_gate(vol.valid, P, D);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(Ch));

  std::vector<Tensor> head_out;
  for (Index h = 0; h < N_h; ++h) {
    const std::size_t hh = static_cast<std::size_t>(h);
    Tensor cv_h = slice(cv, {0, 0, h * Ch}, {P, D, (h + 1) * Ch});
    Tensor q = add(matmul(cv_h, p.Wq_self[hh]), p.bq_self[hh]);
    Tensor k = add(matmul(cv_h, p.Wk[hh]), p.bk[hh]);
    Tensor v = add(matmul(cv_h, p.Wv[hh]), p.bv[hh]);
    Tensor logits = add(scale(matmul_nt(q, k), inv_sqrt), mask);  // (P, D, D)
    Tensor alpha = softmax_last(logits);
    head_out.push_back(matmul(alpha, v));  // (P, D, Ch)
  }
  Tensor merged = reshape(concat(head_out, 2), {P * D, C});
  Tensor projected = add(matmul(merged, p.Wo), p.bo);
  return reshape(mul(reshape(projected, {P, D, C}), gate), {H, W, D, C});
}

// ---------------------------------------------------------------------------
// Attention stack -> cost volume
// ---------------------------------------------------------------------------

struct CostVolume {
  Tensor values;                    // (H, W, D) matching probabilities
  std::vector<std::uint8_t> valid;  // per candidate
  Index H = 0, W = 0, D = 0;

  // A pixel participates when at least one candidate is valid.
  bool pixel_valid(Index y, Index x) const {
    for (Index i = 0; i < D; ++i)
      if (valid[static_cast<std::size_t>((y * W + x) * D + i)]) return true;
    return false;
  }
};

// L cross-attention layers with a self-attention refinement after each except
// the last; the last cross layer's averaged attention fills the cost volume.
inline CostVolume attention_stack(const Tensor& F_t, const FeatureVolume& volume,
                                  const AttentionParams& params) {
  if (params.L < 1) throw ContractViolation("attention_stack: L must be >= 1");
  if (static_cast<Index>(params.layers.size()) != params.L)
    throw ContractViolation("attention_stack: params carry the wrong layer count");
  FeatureVolume vol = volume;
  Tensor alpha;
  for (Index l = 0; l < params.L; ++l) {
    auto out = cross_attention_layer(F_t, vol, params.layers[static_cast<std::size_t>(l)], params.N_h);
    vol.values = out.values;
    alpha = out.alpha;
    if (l + 1 < params.L)
      vol.values = self_attention_layer(vol, params.layers[static_cast<std::size_t>(l)], params.N_h);
  }
  CostVolume cv;
  cv.values = alpha;
  cv.valid = volume.valid;
  cv.H = volume.H;
  cv.W = volume.W;
  cv.D = volume.D;
  return cv;
}

// ---------------------------------------------------------------------------
// SAD / SSIM baseline cost volumes
// ---------------------------------------------------------------------------

enum class BaselineMetric { SAD, SSIM };

struct BaselineCostVolume {
  Tensor values;         // (H,W,D): softmax over negated dissimilarity
  Tensor dissimilarity;  // (H,W,D)
  std::vector<Index> argmin;  // per pixel; -1 when no valid candidate
  std::vector<std::uint8_t> valid;
  Index H = 0, W = 0, D = 0;
};

// Per-candidate dissimilarity between the target features and each depth
// slice of the volume: SAD uses the channel-mean absolute difference, SSIM
// the windowed score of the loss module mapped to (1 - SSIM)/2. The softmax
// normalization (temperature 1) makes distributions comparable with the
// attention volume; argmin decoding ignores it.
inline BaselineCostVolume baseline_cost_volume(const Tensor& F_t, const FeatureVolume& vol,
                                               BaselineMetric metric) {
  const Index H = vol.H, W = vol.W, D = vol.D, C = vol.C;
  if (F_t.shape() != ShapeVec{H, W, C})
    throw ContractViolation("baseline_cost_volume: feature shape mismatch");
  BaselineCostVolume out;
  out.H = H;
  out.W = W;
  out.D = D;
  out.valid = vol.valid;
  out.dissimilarity = Tensor({H, W, D});
  const double* pf = F_t.data();
  const double* pv = vol.values.data();

  if (metric == BaselineMetric::SAD) {
    for (Index p = 0; p < H * W; ++p)
      for (Index i = 0; i < D; ++i) {
        double acc = 0;
        const double* f = pf + p * C;
        const double* c = pv + (p * D + i) * C;
        for (Index ch = 0; ch < C; ++ch) acc += std::fabs(f[ch] - c[ch]);
        out.dissimilarity.data()[p * D + i] = acc / static_cast<double>(C);
      }
  } else {
    for (Index i = 0; i < D; ++i) {
      // Depth slice as an image, compared against F_t with windowed SSIM.
      Tensor slice_i({H, W, C});
      for (Index p = 0; p < H * W; ++p)
        for (Index ch = 0; ch < C; ++ch)
          slice_i.data()[p * C + ch] = pv[(p * D + i) * C + ch];
      Tensor s = ssim_map(F_t, slice_i);
      for (Index p = 0; p < H * W; ++p)
        out.dissimilarity.data()[p * D + i] = 0.5 * (1.0 - s.data()[p]);
    }
  }

  out.values = Tensor({H, W, D});
  out.argmin.assign(static_cast<std::size_t>(H * W), -1);
  for (Index p = 0; p < H * W; ++p) {
    double best = 0;
    Index best_i = -1;
    double mx = -1e300;
    for (Index i = 0; i < D; ++i) {
      bool ok = vol.valid[static_cast<std::size_t>(p * D + i)] != 0;
      double dis = out.dissimilarity.data()[p * D + i];
      if (ok && (best_i < 0 || dis < best)) {
        best = dis;
        best_i = i;
      }
      double logit = ok ? -dis : kMaskLogit;
      if (logit > mx) mx = logit;
    }
    out.argmin[static_cast<std::size_t>(p)] = best_i;
    double sum = 0;
    for (Index i = 0; i < D; ++i) {
      bool ok = vol.valid[static_cast<std::size_t>(p * D + i)] != 0;
      double logit = ok ? -out.dissimilarity.data()[p * D + i] : kMaskLogit;
      double e = std::exp(logit - mx);
      out.values.data()[p * D + i] = e;
      sum += e;
    }
    for (Index i = 0; i < D; ++i) out.values.data()[p * D + i] /= sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distribution diagnostics
// ---------------------------------------------------------------------------

// Mean Shannon entropy of the per-pixel matching distributions, over pixels
// with at least one valid candidate.
inline double mean_entropy(const Tensor& values, const std::vector<std::uint8_t>& valid) {
  const Index D = values.shape().back();
  const Index P = values.size() / D;
  double total = 0;
  Index count = 0;
  for (Index p = 0; p < P; ++p) {
    bool any = false;
    for (Index i = 0; i < D; ++i) any = any || valid[static_cast<std::size_t>(p * D + i)] != 0;
    if (!any) continue;
    double e = 0;
    for (Index i = 0; i < D; ++i) {
      double v = values.data()[p * D + i];
      if (v > 0) e -= v * std::log(v);
    }
    total += e;
    ++count;
  }
  if (count == 0) throw ContractViolation("mean_entropy: no valid pixels");
  return total / static_cast<double>(count);
}

// Single-pixel distribution rows "u,v,bin,depth,probability".
inline void write_distribution_csv(std::ostream& os, const Tensor& values, const DepthBins& bins, Index u,
                                   Index v) {
  const Index D = values.shape()[2];
  const Index W = values.shape()[1];
  os << "u,v,bin,depth,probability\n";
  for (Index i = 0; i < D; ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", values.data()[(v * W + u) * D + i]);
    os << u << "," << v << "," << i << "," << bins.values[static_cast<std::size_t>(i)] << "," << buf
       << "\n";
  }
}

}  // namespace epidepth
