#pragma once

#include <string>
#include <vector>

#include "epidepth/metrics.hpp"
#include "epidepth/pipeline.hpp"

namespace epidepth {

struct EvalOptions {
  bool median_scale = true;  // per-sample median scaling at test time
  double d_cap = 80.0;
};

struct KindMetrics {
  std::string kind;
  DepthMetrics metrics;
};

namespace detail {

// Ground truth subsampled to a 1/f grid; exact samples, the intrinsics
// rescaling convention maps feature pixel u to full-resolution pixel f*u.
inline std::vector<double> strided_gt(const FrameSample& s, Index f) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>((s.H / f) * (s.W / f)));
  for (Index y = 0; y < s.H / f; ++y)
    for (Index x = 0; x < s.W / f; ++x)
      out.push_back(s.gt_depth[static_cast<std::size_t>(f * y * s.W + f * x)]);
  return out;
}

struct PooledKind {
  std::vector<double> pred, gt;
  std::vector<std::uint8_t> valid;

  void add_sample(const std::vector<double>& p, const std::vector<double>& g,
                  const std::vector<std::uint8_t>& v, bool median_scale, double d_cap) {
    double scale = 1.0;
    if (median_scale) {
      std::vector<double> ps, gs;
      for (std::size_t i = 0; i < p.size(); ++i)
        if (v[i] && g[i] <= d_cap) {
          ps.push_back(p[i]);
          gs.push_back(g[i]);
        }
      if (ps.empty()) return;
      scale = median_of(gs) / median_of(ps);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      pred.push_back(p[i] * scale);
      gt.push_back(g[i]);
      valid.push_back(v[i]);
    }
  }
};

}  // namespace detail

// Raw-patch feature map: the image itself pooled to 1/4 resolution. Used for
// the SAD/SSIM baseline rows so they stay independent of learned weights.
inline Tensor raw_patch_features(const Tensor& image) { return avg_pool2d(image, 4); }

// Per-kind metric rows mirroring the intermediate-output comparison: SAD and
// SSIM argmin baselines, high-response, context-adjusted, and the decoded
// maps at each scale.
inline std::vector<KindMetrics> evaluate_model(ModelParams& model, const PipelineConfig& cfg,
                                               const std::vector<FrameSample>& samples,
                                               const EvalOptions& opts) {
  if (samples.empty()) throw ContractViolation("evaluate_model: no samples");
  DepthBins bins = sid_bins(cfg.d_min, cfg.d_max, cfg.D);
  const char* kinds[] = {"sad-argmin", "ssim-argmin", "high-response", "context-adjusted",
                         "decoded-1/8", "decoded-1/4", "decoded-1/2", "decoded-full"};
  std::vector<detail::PooledKind> pools(8);

  for (const FrameSample& s : samples) {
    PipelineOutput out = run_pipeline(s, model, cfg);
    std::vector<double> gt4 = detail::strided_gt(s, 4);
    const Index P4 = (s.H / 4) * (s.W / 4);

    // Baselines from raw image patches.
    Tensor f_t = raw_patch_features(s.target);
    Tensor f_c = raw_patch_features(s.prev);
    FeatureVolume raw_vol = build_feature_volume(f_c, bins, s.K.scaled(0.25), s.T_prev);
    for (int b = 0; b < 2; ++b) {
      auto base = baseline_cost_volume(f_t, raw_vol, b == 0 ? BaselineMetric::SAD : BaselineMetric::SSIM);
      std::vector<double> pred(static_cast<std::size_t>(P4), 1.0);
      std::vector<std::uint8_t> valid(static_cast<std::size_t>(P4), 0);
      for (Index p = 0; p < P4; ++p) {
        Index am = base.argmin[static_cast<std::size_t>(p)];
        if (am < 0) continue;
        pred[static_cast<std::size_t>(p)] = bins.values[static_cast<std::size_t>(am)];
        valid[static_cast<std::size_t>(p)] = 1;
      }
      pools[static_cast<std::size_t>(b)].add_sample(pred, gt4, valid, opts.median_scale, opts.d_cap);
    }

    // High-response over masked-in pixels only.
    {
      std::vector<double> pred(out.high_response.depth.data(),
                               out.high_response.depth.data() + P4);
      pools[2].add_sample(pred, gt4, out.high_response.mask, opts.median_scale, opts.d_cap);
    }
    // Context-adjusted over all pixels with valid candidates.
    {
      std::vector<double> pred(out.context_adjusted.data(), out.context_adjusted.data() + P4);
      pools[3].add_sample(pred, gt4, out.high_response.any_valid, opts.median_scale, opts.d_cap);
    }
    // Decoded maps, coarse to fine.
    for (std::size_t j = 0; j < out.multi_scale.maps.size() && j < 4; ++j) {
      Index f = 8 >> j;
      const Tensor& m = out.multi_scale.maps[j];
      std::vector<double> pred(m.data(), m.data() + m.size());
      std::vector<double> gts = detail::strided_gt(s, f);
      pools[4 + j].add_sample(pred, gts, std::vector<std::uint8_t>(pred.size(), 1), opts.median_scale,
                              opts.d_cap);
    }
  }

  std::vector<KindMetrics> rows;
  for (std::size_t k = 0; k < 8; ++k) {
    KindMetrics km;
    km.kind = kinds[k];
    km.metrics = compute_metrics(pools[k].pred, pools[k].gt, pools[k].valid, false, opts.d_cap);
    rows.push_back(std::move(km));
  }
  return rows;
}

struct SharpnessReport {
  double attention_entropy = 0;
  double ssim_entropy = 0;
};

// Mean per-pixel entropy of the learned cross-attention distributions against
// the softmax-SSIM distributions on the same pairs.
inline SharpnessReport sharpness_comparison(ModelParams& model, const PipelineConfig& cfg,
                                            const std::vector<FrameSample>& samples) {
  if (samples.empty()) throw ContractViolation("sharpness_comparison: no samples");
  DepthBins bins = sid_bins(cfg.d_min, cfg.d_max, cfg.D);
  SharpnessReport rep;
  double n = 0;
  for (const FrameSample& s : samples) {
    PipelineOutput out = run_pipeline(s, model, cfg);
    Tensor f_t = raw_patch_features(s.target);
    Tensor f_c = raw_patch_features(s.prev);
    FeatureVolume raw_vol = build_feature_volume(f_c, bins, s.K.scaled(0.25), s.T_prev);
    auto ssim_base = baseline_cost_volume(f_t, raw_vol, BaselineMetric::SSIM);
    rep.attention_entropy += mean_entropy(out.cost_volume.values, out.cost_volume.valid);
    rep.ssim_entropy += mean_entropy(ssim_base.values, ssim_base.valid);
    n += 1;
  }
  rep.attention_entropy /= n;
  rep.ssim_entropy /= n;
  return rep;
}

}  // namespace epidepth
