#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "epidepth/decoding.hpp"
#include "epidepth/loss.hpp"
#include "epidepth/matching.hpp"
#include "epidepth/synth.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

struct PipelineConfig {
  Index D = 64, C = 32, N_h = 4, L = 2, S = 4;
  Index s_window = 1;
  double lambda_min = 0.05;
  double d_min = 2.0, d_max = 12.0;
  Index context_width = 16;

  void validate() const {
    if (D < 2 || L < 1 || N_h < 1 || C % N_h != 0 || S < 1 || S > 4)
      throw ContractViolation("PipelineConfig: invalid attention/scale configuration");
    if (!(d_min > 0) || !(d_min < d_max)) throw ContractViolation("PipelineConfig: bad depth range");
    if (lambda_min < 0 || lambda_min > 1) throw ContractViolation("PipelineConfig: bad lambda_min");
  }
};

// Named parameter groups; group separability is what makes the attention
// hot-swap possible at checkpoint level.
struct ModelParams {
  EncoderParams encoder;
  AttentionParams attention;
  DecoderParams decoder;
  ContextAdjustParams context;

  static ModelParams init(const PipelineConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams m;
    m.encoder = EncoderParams::init(cfg.C, seed * 4ULL + 1);
    m.attention = AttentionParams::init(cfg.C, cfg.N_h, cfg.L, seed * 4ULL + 2);
    m.decoder = DecoderParams::init(cfg.C, cfg.D, seed * 4ULL + 3);
    m.context = ContextAdjustParams::init(cfg.context_width, seed * 4ULL + 4);
    return m;
  }

  std::vector<std::pair<std::string, std::vector<std::pair<std::string, Tensor>>>> groups() {
    return {{"encoder", encoder.named()},
            {"attention", attention.named()},
            {"decoder", decoder.named()},
            {"context", context.named()}};
  }

  std::vector<Tensor> all_tensors() {
    std::vector<Tensor> out;
    for (auto& [gname, group] : groups()) {
      (void)gname;
      for (auto& [tname, t] : group) {
        (void)tname;
        out.push_back(t);
      }
    }
    return out;
  }

  void attach_all(Tape& tape) {
    for (Tensor& t : all_tensors()) tape.attach_leaf(t);
  }
};

struct PipelineOutput {
  Tensor F_t;
  CostVolume cost_volume;
  HighResponseDepth high_response;
  Tensor context_adjusted;
  MultiScaleDepth multi_scale;
  bool context_fallback = false;  // confidence mask was empty

  DepthPredictions predictions() const {
    DepthPredictions p;
    p.high_response = high_response.depth;
    p.conf_mask = high_response.mask;
    p.any_valid = high_response.any_valid;
    p.context_adjusted = context_adjusted;
    p.multi_scale = multi_scale.maps;
    return p;
  }
};

// Full forward pass for one frame sample. The cost volume context is the
// previous frame; both contexts enter only through the loss. Parameters must
// already be attached to a tape when training.
inline PipelineOutput run_pipeline(const FrameSample& sample, ModelParams& params,
                                   const PipelineConfig& cfg) {
  cfg.validate();
  DepthBins bins = sid_bins(cfg.d_min, cfg.d_max, cfg.D);
  PipelineOutput out;
  out.F_t = encode(sample.target, params.encoder);
  Tensor F_c = encode(sample.prev, params.encoder);
  Intrinsics K_feat = sample.K.scaled(0.25);
  FeatureVolume vol = build_feature_volume(F_c, bins, K_feat, sample.T_prev);
  out.cost_volume = attention_stack(out.F_t, vol, params.attention);
  out.high_response = high_response_decode(out.cost_volume, bins, cfg.s_window, cfg.lambda_min);

  bool any_masked = false;
  for (auto m : out.high_response.mask) any_masked = any_masked || m;
  if (any_masked) {
    out.context_adjusted = context_adjust(out.high_response, sample.target, params.context, bins).depth;
  } else {
    // Nothing clears the confidence threshold (early training): fall back to
    // the raw high-response map so the step can still proceed.
    out.context_fallback = true;
    out.context_adjusted = clamp(out.high_response.depth, bins.d_min, bins.d_max);
  }

  Tensor masked = apply_confidence_mask(out.cost_volume, out.high_response.mask);
  out.multi_scale = multi_scale_decode(sample.target, masked, params.decoder, bins);
  if (static_cast<Index>(out.multi_scale.maps.size()) != cfg.S)
    out.multi_scale.maps.resize(static_cast<std::size_t>(cfg.S));
  return out;
}

// Flattened view of every parameter, used by gradient checks: carves a flat
// tensor into a model whose tensors are tracked slices of it.
inline Index parameter_count(ModelParams& m) {
  Index n = 0;
  for (Tensor& t : m.all_tensors()) n += t.size();
  return n;
}

inline Tensor flatten_parameters(ModelParams& m) {
  Tensor flat({parameter_count(m)});
  Index cur = 0;
  for (Tensor& t : m.all_tensors())
    for (Index i = 0; i < t.size(); ++i) flat.data()[cur++] = t.data()[i];
  return flat;
}

inline ModelParams carve_parameters(const Tensor& flat, const PipelineConfig& cfg) {
  ModelParams proto = ModelParams::init(cfg, 0);
  Index cur = 0;
  auto carve = [&](Tensor& dst) {
    Index n = dst.size();
    dst = reshape(slice(flat, {cur}, {cur + n}), dst.shape());
    cur += n;
  };
  carve(proto.encoder.w1);
  carve(proto.encoder.b1);
  carve(proto.encoder.w2);
  carve(proto.encoder.b2);
  carve(proto.encoder.w3);
  carve(proto.encoder.b3);
  for (auto& lp : proto.attention.layers) {
    for (std::size_t h = 0; h < lp.Wq.size(); ++h) {
      carve(lp.Wq[h]);
      carve(lp.bq[h]);
      carve(lp.Wk[h]);
      carve(lp.bk[h]);
      carve(lp.Wv[h]);
      carve(lp.bv[h]);
    }
    for (std::size_t h = 0; h < lp.Wq_self.size(); ++h) {
      carve(lp.Wq_self[h]);
      carve(lp.bq_self[h]);
    }
    carve(lp.Wo);
    carve(lp.bo);
  }
  carve(proto.decoder.e1w);
  carve(proto.decoder.e1b);
  carve(proto.decoder.e2w);
  carve(proto.decoder.e2b);
  carve(proto.decoder.e3w);
  carve(proto.decoder.e3b);
  carve(proto.decoder.bw);
  carve(proto.decoder.bb);
  carve(proto.decoder.d8w);
  carve(proto.decoder.d8b);
  carve(proto.decoder.s8w);
  carve(proto.decoder.s8b);
  carve(proto.decoder.s4w);
  carve(proto.decoder.s4b);
  carve(proto.decoder.s2w);
  carve(proto.decoder.s2b);
  carve(proto.decoder.s1w);
  carve(proto.decoder.s1b);
  carve(proto.decoder.h8w);
  carve(proto.decoder.h8b);
  carve(proto.decoder.h4w);
  carve(proto.decoder.h4b);
  carve(proto.decoder.h2w);
  carve(proto.decoder.h2b);
  carve(proto.decoder.h1w);
  carve(proto.decoder.h1b);
  carve(proto.context.w_in);
  carve(proto.context.b_in);
  for (auto& blk : proto.context.blocks) {
    carve(blk.w1);
    carve(blk.b1);
    carve(blk.w2);
    carve(blk.b2);
  }
  carve(proto.context.w_out);
  carve(proto.context.b_out);
  if (cur != flat.size())
    throw ContractViolation("carve_parameters: flat tensor does not match the configuration");
  return proto;
}

}  // namespace epidepth
