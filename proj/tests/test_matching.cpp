#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>

#include "epidepth/grad_check.hpp"
#include "epidepth/matching.hpp"
#include "epidepth/rng.hpp"

using namespace epidepth;

namespace {

Tensor random_map(Index H, Index W, Index C, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Tensor t({H, W, C});
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

FeatureVolume volume_from_values(Index H, Index W, Index D, Index C, const std::vector<double>& vals,
                                 const std::vector<std::uint8_t>& valid) {
  FeatureVolume v;
  v.H = H;
  v.W = W;
  v.D = D;
  v.C = C;
  v.values = Tensor({H, W, D, C}, std::vector<double>(vals));
  v.valid = valid;
  return v;
}

// Carves a flat parameter vector into AttentionParams via tracked slices so
// gradients flow back to the flat tensor during checks.
AttentionParams params_from_flat(const Tensor& x, Index C, Index N_h, Index L) {
  AttentionParams p;
  p.C = C;
  p.N_h = N_h;
  p.L = L;
  const Index Ch = C / N_h;
  Index cur = 0;
  auto carve = [&](ShapeVec shape) {
    Index n = numel(shape);
    Tensor t = reshape(slice(x, {cur}, {cur + n}), std::move(shape));
    cur += n;
    return t;
  };
  // Carving order mirrors AttentionParams::named().
  for (Index l = 0; l < L; ++l) {
    AttentionLayerParams lp;
    for (Index h = 0; h < N_h; ++h) {
      lp.Wq.push_back(carve({Ch, Ch}));
      lp.bq.push_back(carve({Ch}));
      lp.Wk.push_back(carve({Ch, Ch}));
      lp.bk.push_back(carve({Ch}));
      lp.Wv.push_back(carve({Ch, Ch}));
      lp.bv.push_back(carve({Ch}));
    }
    if (l + 1 < L)
      for (Index h = 0; h < N_h; ++h) {
        lp.Wq_self.push_back(carve({Ch, Ch}));
        lp.bq_self.push_back(carve({Ch}));
      }
    lp.Wo = carve({C, C});
    lp.bo = carve({C});
    p.layers.push_back(std::move(lp));
  }
  REQUIRE(cur == x.size());
  return p;
}

Index flat_param_count(Index C, Index N_h, Index L) {
  const Index Ch = C / N_h;
  Index per_head = 3 * (Ch * Ch + Ch);
  return L * (N_h * per_head + C * C + C) + (L - 1) * N_h * (Ch * Ch + Ch);
}

}  // namespace

TEST_CASE("encoder shape contract and determinism") {
  EncoderParams p = EncoderParams::init(32, 5);
  Tensor img = random_map(64, 64, 3, 2, 0, 1);
  Tensor f1 = encode(img, p);
  REQUIRE(f1.shape() == ShapeVec{16, 16, 32});
  Tensor f2 = encode(img, p);
  for (Index i = 0; i < f1.size(); ++i)
    REQUIRE(std::memcmp(&f1.data()[i], &f2.data()[i], sizeof(double)) == 0);
}

TEST_CASE("encoder rejects indivisible extents") {
  EncoderParams p = EncoderParams::init(8, 5);
  CHECK_THROWS_AS(encode(Tensor({30, 32, 3}), p), ContractViolation);
  CHECK_THROWS_AS(encode(Tensor({32, 30, 3}), p), ContractViolation);
}

TEST_CASE("encoder output on an all-zero image is finite") {
  EncoderParams p = EncoderParams::init(16, 7);
  for (Tensor* b : {&p.b1, &p.b2, &p.b3})
    for (Index i = 0; i < b->size(); ++i) b->data()[i] = 0.25;
  Tensor f = encode(Tensor({16, 16, 3}), p);
  for (Index i = 0; i < f.size(); ++i) CHECK(std::isfinite(f.data()[i]));
}

TEST_CASE("feature volume under identity pose repeats the context features") {
  Tensor F_c = random_map(6, 6, 4, 3);
  auto bins = sid_bins(2, 10, 5);
  Intrinsics K{12, 12, 2.5, 2.5};
  FeatureVolume vol = build_feature_volume(F_c, bins, K, RigidTransform::identity());
  for (Index p = 0; p < 36; ++p)
    for (Index i = 0; i < 5; ++i) {
      CHECK(vol.valid[static_cast<std::size_t>(p * 5 + i)] == 1);
      for (Index c = 0; c < 4; ++c)
        CHECK(vol.values.data()[(p * 5 + i) * 4 + c] == F_c.data()[p * 4 + c]);
    }
}

TEST_CASE("strong sideways motion invalidates a border column") {
  Tensor F_c = random_map(8, 8, 2, 4);
  auto bins = sid_bins(2, 6, 4);
  Intrinsics K{8, 8, 3.5, 3.5};
  RigidTransform T;
  T.t = Vec3{40.0, 0, 0};  // projects far outside the 8-px-wide feature map
  FeatureVolume vol = build_feature_volume(F_c, bins, K, T);
  Index x = 7, y = 4;
  for (Index i = 0; i < 4; ++i) {
    std::size_t k = static_cast<std::size_t>(((y * 8 + x) * 4 + i));
    CHECK(vol.valid[k] == 0);
    for (Index c = 0; c < 2; ++c)
      CHECK(vol.values.data()[static_cast<Index>(k) * 2 + c] == 0.0);
  }
}

TEST_CASE("forward motion traces candidates along the line through the principal point") {
  auto bins = sid_bins(2, 12, 6);
  Intrinsics K{16, 16, 7.5, 7.5};
  RigidTransform T;
  T.t = Vec3{0, 0, 1.0};
  // For pure forward motion the epipole is the principal point, so every
  // candidate lies on the line joining (cx, cy) and the pixel.
  for (double u : {2.0, 5.0, 11.0})
    for (double v : {3.0, 9.0, 13.0}) {
      double dir_u = u - K.cx, dir_v = v - K.cy;
      for (double d : bins.values) {
        auto s = project_epipolar(u, v, d, K, T, 16, 16);
        double cross = (s.u - K.cx) * dir_v - (s.v - K.cy) * dir_u;
        CHECK(std::fabs(cross) < 1e-9);
      }
    }
}

TEST_CASE("identical keys across bins give uniform attention") {
  const Index H = 1, W = 2, D = 4, C = 4, N_h = 2;
  std::vector<double> vals(static_cast<std::size_t>(H * W * D * C));
  for (Index p = 0; p < H * W; ++p)
    for (Index i = 0; i < D; ++i)
      for (Index c = 0; c < C; ++c)
        vals[static_cast<std::size_t>((p * D + i) * C + c)] = 0.3 * static_cast<double>(c + 1);
  FeatureVolume vol = volume_from_values(H, W, D, C, vals,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(H * W * D), 1));
  AttentionParams params = AttentionParams::init(C, N_h, 1, 3);
  Tensor F_t = random_map(H, W, C, 4);
  auto out = cross_attention_layer(F_t, vol, params.layers[0], N_h);
  for (Index p = 0; p < H * W; ++p) {
    double sum = 0;
    for (Index i = 0; i < D; ++i) {
      CHECK(out.alpha.data()[p * D + i] == out.alpha.data()[p * D]);
      sum += out.alpha.data()[p * D + i];
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("a single valid candidate takes all the attention") {
  const Index D = 5, C = 4, N_h = 2;
  std::vector<double> vals(static_cast<std::size_t>(D * C));
  Rng rng(8);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(D), 0);
  valid[3] = 1;
  for (Index c = 0; c < C; ++c) vals[static_cast<std::size_t>(3 * C + c)] = rng.uniform(-1, 1);
  FeatureVolume vol = volume_from_values(1, 1, D, C, vals, valid);
  AttentionParams params = AttentionParams::init(C, N_h, 1, 9);
  auto out = cross_attention_layer(random_map(1, 1, C, 10), vol, params.layers[0], N_h);
  for (Index i = 0; i < D; ++i) CHECK(out.alpha.data()[i] == (i == 3 ? 1.0 : 0.0));
}

TEST_CASE("cross attention with unit weights matches a hand-computed table") {
  // N_h=2, C=4, D=3; W_Q=W_K=W_V=I per head, W_O=I, all biases zero.
  const Index D = 3, C = 4, N_h = 2, Ch = 2;
  std::vector<double> ft = {0.5, -0.25, 1.0, 0.75};
  std::vector<double> cand = {
      0.2,  0.4,  -0.3, 0.6,   // bin 0
      -0.5, 0.1,  0.8,  -0.2,  // bin 1
      0.9,  -0.7, 0.05, 0.3,   // bin 2
  };
  FeatureVolume vol = volume_from_values(1, 1, D, C, cand,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1));
  AttentionParams params = AttentionParams::init(C, N_h, 1, 1);
  auto& lp = params.layers[0];
  for (Index h = 0; h < N_h; ++h) {
    for (Tensor* w : {&lp.Wq[static_cast<std::size_t>(h)], &lp.Wk[static_cast<std::size_t>(h)],
                      &lp.Wv[static_cast<std::size_t>(h)]}) {
      std::fill(w->data(), w->data() + w->size(), 0.0);
      w->data()[0] = 1.0;
      w->data()[3] = 1.0;
    }
    for (Tensor* b : {&lp.bq[static_cast<std::size_t>(h)], &lp.bk[static_cast<std::size_t>(h)],
                      &lp.bv[static_cast<std::size_t>(h)]})
      std::fill(b->data(), b->data() + b->size(), 0.0);
  }
  std::fill(lp.Wo.data(), lp.Wo.data() + 16, 0.0);
  for (Index i = 0; i < 4; ++i) lp.Wo.data()[i * 4 + i] = 1.0;
  std::fill(lp.bo.data(), lp.bo.data() + 4, 0.0);

  Tensor F_t({1, 1, C}, std::vector<double>(ft));
  auto out = cross_attention_layer(F_t, vol, lp, N_h);

  // Independent scalar evaluation.
  double alpha_ref[2][3];
  for (int h = 0; h < 2; ++h) {
    double logits[3];
    for (int i = 0; i < 3; ++i) {
      double dot = 0;
      for (int c = 0; c < Ch; ++c)
        dot += ft[static_cast<std::size_t>(h * Ch + c)] * cand[static_cast<std::size_t>(i * C + h * Ch + c)];
      logits[i] = dot / std::sqrt(2.0);
    }
    double mx = std::max({logits[0], logits[1], logits[2]});
    double sum = 0;
    for (int i = 0; i < 3; ++i) {
      alpha_ref[h][i] = std::exp(logits[i] - mx);
      sum += alpha_ref[h][i];
    }
    for (int i = 0; i < 3; ++i) alpha_ref[h][i] /= sum;
  }
  for (int i = 0; i < 3; ++i) {
    double want_alpha = 0.5 * (alpha_ref[0][i] + alpha_ref[1][i]);
    CHECK(out.alpha.data()[i] == Catch::Approx(want_alpha).margin(1e-12));
    for (int h = 0; h < 2; ++h)
      for (int c = 0; c < Ch; ++c) {
        double want_v = alpha_ref[h][i] * cand[static_cast<std::size_t>(i * C + h * Ch + c)];
        CHECK(out.values.data()[i * C + h * Ch + c] == Catch::Approx(want_v).margin(1e-12));
      }
  }
}

TEST_CASE("self attention with one candidate reduces to its value projection") {
  const Index D = 1, C = 4, N_h = 2, Ch = 2;
  std::vector<double> cand = {0.3, -0.6, 0.9, 0.2};
  FeatureVolume vol = volume_from_values(1, 1, D, C, cand, {1});
  AttentionParams params = AttentionParams::init(C, N_h, 2, 5);
  Tensor out = self_attention_layer(vol, params.layers[0], N_h);

  // alpha = 1 for the lone candidate: output = concat_h(v_h) * Wo + bo.
  std::vector<double> v(4);
  auto& lp = params.layers[0];
  for (Index h = 0; h < N_h; ++h)
    for (Index r = 0; r < Ch; ++r) {
      double acc = lp.bv[static_cast<std::size_t>(h)].data()[r];
      for (Index c = 0; c < Ch; ++c)
        acc += cand[static_cast<std::size_t>(h * Ch + c)] * lp.Wv[static_cast<std::size_t>(h)].data()[c * Ch + r];
      v[static_cast<std::size_t>(h * Ch + r)] = acc;
    }
  for (Index j = 0; j < C; ++j) {
    double want = lp.bo.data()[j];
    for (Index c = 0; c < C; ++c) want += v[static_cast<std::size_t>(c)] * lp.Wo.data()[c * C + j];
    CHECK(out.data()[j] == Catch::Approx(want).margin(1e-12));
  }
}

TEST_CASE("self attention is permutation-equivariant over bins") {
  const Index D = 5, C = 6, N_h = 3;
  Rng rng(12);
  std::vector<double> vals(static_cast<std::size_t>(D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1};
  for (Index i = 0; i < D; ++i)
    if (!valid[static_cast<std::size_t>(i)])
      for (Index c = 0; c < C; ++c) vals[static_cast<std::size_t>(i * C + c)] = 0;
  FeatureVolume vol = volume_from_values(1, 1, D, C, vals, valid);
  AttentionParams params = AttentionParams::init(C, N_h, 2, 21);
  Tensor out = self_attention_layer(vol, params.layers[0], N_h);

  std::vector<Index> perm = {3, 0, 4, 2, 1};
  std::vector<double> pvals(vals.size());
  std::vector<std::uint8_t> pvalid(valid.size());
  for (Index i = 0; i < D; ++i) {
    pvalid[static_cast<std::size_t>(i)] = valid[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    for (Index c = 0; c < C; ++c)
      pvals[static_cast<std::size_t>(i * C + c)] =
          vals[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * C + c)];
  }
  FeatureVolume pvol = volume_from_values(1, 1, D, C, pvals, pvalid);
  Tensor pout = self_attention_layer(pvol, params.layers[0], N_h);
  for (Index i = 0; i < D; ++i)
    for (Index c = 0; c < C; ++c)
      CHECK(pout.data()[i * C + c] ==
            Catch::Approx(out.data()[perm[static_cast<std::size_t>(i)] * C + c]).margin(1e-12));
}

TEST_CASE("zero output projection produces a zero volume") {
  const Index D = 4, C = 4, N_h = 2;
  Rng rng(3);
  std::vector<double> vals(static_cast<std::size_t>(D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  FeatureVolume vol = volume_from_values(1, 1, D, C, vals,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1));
  AttentionParams params = AttentionParams::init(C, N_h, 2, 4);
  std::fill(params.layers[0].Wo.data(), params.layers[0].Wo.data() + params.layers[0].Wo.size(), 0.0);
  std::fill(params.layers[0].bo.data(), params.layers[0].bo.data() + params.layers[0].bo.size(), 0.0);
  Tensor out = self_attention_layer(vol, params.layers[0], N_h);
  for (Index i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("attention stack schedule") {
  const Index H = 2, W = 2, D = 4, C = 8, N_h = 2;
  Tensor F_t = random_map(H, W, C, 31);
  Rng rng(17);
  std::vector<double> vals(static_cast<std::size_t>(H * W * D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  FeatureVolume vol = volume_from_values(H, W, D, C, vals,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(H * W * D), 1));

  SECTION("L=1 equals a single cross layer") {
    AttentionParams params = AttentionParams::init(C, N_h, 1, 9);
    CostVolume cv = attention_stack(F_t, vol, params);
    auto direct = cross_attention_layer(F_t, vol, params.layers[0], N_h);
    for (Index i = 0; i < cv.values.size(); ++i) CHECK(cv.values.data()[i] == direct.alpha.data()[i]);
  }
  SECTION("L=2 equals manual cross-self-cross composition") {
    AttentionParams params = AttentionParams::init(C, N_h, 2, 10);
    CostVolume cv = attention_stack(F_t, vol, params);
    auto c1 = cross_attention_layer(F_t, vol, params.layers[0], N_h);
    FeatureVolume v1 = vol;
    v1.values = c1.values;
    v1.values = self_attention_layer(v1, params.layers[0], N_h);
    auto c2 = cross_attention_layer(F_t, v1, params.layers[1], N_h);
    for (Index i = 0; i < cv.values.size(); ++i) CHECK(cv.values.data()[i] == c2.alpha.data()[i]);
  }
  SECTION("cost volume columns are normalized") {
    AttentionParams params = AttentionParams::init(C, N_h, 2, 11);
    CostVolume cv = attention_stack(F_t, vol, params);
    for (Index p = 0; p < H * W; ++p) {
      double sum = 0;
      for (Index i = 0; i < D; ++i) {
        double v = cv.values.data()[p * D + i];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        sum += v;
      }
      CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
  }
  SECTION("L=0 is rejected") {
    AttentionParams params = AttentionParams::init(C, N_h, 1, 12);
    params.L = 0;
    params.layers.clear();
    CHECK_THROWS_AS(attention_stack(F_t, vol, params), ContractViolation);
  }
}

TEST_CASE("invalid candidates get vanishing probability") {
  const Index H = 2, W = 2, D = 6, C = 8, N_h = 2;
  Tensor F_t = random_map(H, W, C, 5);
  Rng rng(6);
  std::vector<double> vals(static_cast<std::size_t>(H * W * D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(H * W * D), 1);
  valid[2] = 0;
  valid[9] = 0;
  for (Index p = 0; p < H * W; ++p)
    for (Index i = 0; i < D; ++i)
      if (!valid[static_cast<std::size_t>(p * D + i)])
        for (Index c = 0; c < C; ++c) vals[static_cast<std::size_t>((p * D + i) * C + c)] = 0;
  FeatureVolume vol = volume_from_values(H, W, D, C, vals, valid);
  AttentionParams params = AttentionParams::init(C, N_h, 2, 7);
  CostVolume cv = attention_stack(F_t, vol, params);
  CHECK(cv.values.data()[2] < 1e-30);
  CHECK(cv.values.data()[9] < 1e-30);
}

TEST_CASE("single-head attention matches a direct implementation") {
  const Index D = 5, C = 6, N_h = 1;
  Rng rng(23);
  std::vector<double> vals(static_cast<std::size_t>(D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  FeatureVolume vol = volume_from_values(1, 1, D, C, vals,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1));
  Tensor F_t = random_map(1, 1, C, 24);
  AttentionParams params = AttentionParams::init(C, N_h, 1, 25);
  auto out = cross_attention_layer(F_t, vol, params.layers[0], N_h);

  // Direct single-head evaluation with plain loops.
  auto& lp = params.layers[0];
  std::vector<double> q(static_cast<std::size_t>(C), 0.0), logits(static_cast<std::size_t>(D), 0.0);
  for (Index r = 0; r < C; ++r) {
    q[static_cast<std::size_t>(r)] = lp.bq[0].data()[r];
    for (Index c = 0; c < C; ++c)
      q[static_cast<std::size_t>(r)] += F_t.data()[c] * lp.Wq[0].data()[c * C + r];
  }
  std::vector<double> k(static_cast<std::size_t>(D * C));
  for (Index i = 0; i < D; ++i)
    for (Index r = 0; r < C; ++r) {
      double ka = lp.bk[0].data()[r];
      for (Index c = 0; c < C; ++c)
        ka += vals[static_cast<std::size_t>(i * C + c)] * lp.Wk[0].data()[c * C + r];
      k[static_cast<std::size_t>(i * C + r)] = ka;
    }
  double mx = -1e300;
  for (Index i = 0; i < D; ++i) {
    double dot = 0;
    for (Index c = 0; c < C; ++c)
      dot += q[static_cast<std::size_t>(c)] * k[static_cast<std::size_t>(i * C + c)];
    logits[static_cast<std::size_t>(i)] = dot / std::sqrt(static_cast<double>(C));
    mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
  }
  double sum = 0;
  std::vector<double> alpha(static_cast<std::size_t>(D));
  for (Index i = 0; i < D; ++i) {
    alpha[static_cast<std::size_t>(i)] = std::exp(logits[static_cast<std::size_t>(i)] - mx);
    sum += alpha[static_cast<std::size_t>(i)];
  }
  for (Index i = 0; i < D; ++i)
    CHECK(out.alpha.data()[i] == Catch::Approx(alpha[static_cast<std::size_t>(i)] / sum).margin(1e-12));
}

TEST_CASE("baseline cost volume finds a planted match") {
  const Index H = 2, W = 2, D = 6, C = 3;
  Tensor F_t = random_map(H, W, C, 41, 0, 1);
  Rng rng(42);
  std::vector<double> vals(static_cast<std::size_t>(H * W * D * C));
  for (double& v : vals) v = rng.uniform(0, 1);
  const Index planted = 4;
  for (Index p = 0; p < H * W; ++p)
    for (Index c = 0; c < C; ++c)
      vals[static_cast<std::size_t>((p * D + planted) * C + c)] = F_t.data()[p * C + c];
  FeatureVolume vol = volume_from_values(H, W, D, C, vals,
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(H * W * D), 1));
  for (auto metric : {BaselineMetric::SAD, BaselineMetric::SSIM}) {
    auto cv = baseline_cost_volume(F_t, vol, metric);
    for (Index p = 0; p < H * W; ++p) CHECK(cv.argmin[static_cast<std::size_t>(p)] == planted);
  }
}

TEST_CASE("SAD of zero vectors is zero") {
  const Index D = 3, C = 4;
  FeatureVolume vol = volume_from_values(1, 1, D, C, std::vector<double>(static_cast<std::size_t>(D * C), 0.0),
                                         std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1));
  Tensor F_t({1, 1, C});
  auto cv = baseline_cost_volume(F_t, vol, BaselineMetric::SAD);
  for (Index i = 0; i < D; ++i) CHECK(cv.dissimilarity.data()[i] == 0.0);
}

TEST_CASE("baseline distributions are normalized and masked") {
  const Index H = 2, W = 1, D = 8, C = 3;
  Tensor F_t = random_map(H, W, C, 51, 0, 1);
  Rng rng(52);
  std::vector<double> vals(static_cast<std::size_t>(H * W * D * C));
  for (double& v : vals) v = rng.uniform(0, 1);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(H * W * D), 1);
  valid[3] = 0;
  FeatureVolume vol = volume_from_values(H, W, D, C, vals, valid);
  auto cv = baseline_cost_volume(F_t, vol, BaselineMetric::SSIM);
  for (Index p = 0; p < H * W; ++p) {
    double sum = 0;
    for (Index i = 0; i < D; ++i) sum += cv.values.data()[p * D + i];
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
  }
  CHECK(cv.values.data()[3] < 1e-30);
}

TEST_CASE("cost volume gradients w.r.t. attention parameters pass the oracle") {
  const Index C = 8, N_h = 2, L = 2, D = 8;
  const Index n = flat_param_count(C, N_h, L);

  // Fixed random inputs at 8x8 image scale (2x2 feature grid).
  Tensor F_t = random_map(2, 2, C, 61);
  Rng rng(62);
  std::vector<double> vals(static_cast<std::size_t>(2 * 2 * D * C));
  for (double& v : vals) v = rng.uniform(-1, 1);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(2 * 2 * D), 1);
  valid[5] = 0;
  for (Index c = 0; c < C; ++c) vals[static_cast<std::size_t>(5 * C + c)] = 0;
  FeatureVolume vol = volume_from_values(2, 2, D, C, vals, valid);

  Tensor w({2, 2, D});
  Rng wrng(63);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = wrng.uniform(0.2, 1.0);

  AttentionParams proto = AttentionParams::init(C, N_h, L, 64);
  Tensor flat({n});
  Index cur = 0;
  for (auto& [name, t] : proto.named()) {
    (void)name;
    for (Index i = 0; i < t.size(); ++i) flat.data()[cur++] = t.data()[i];
  }
  REQUIRE(cur == n);

  auto f = [&](const Tensor& x) {
    AttentionParams params = params_from_flat(x, C, N_h, L);
    CostVolume cv = attention_stack(F_t, vol, params);
    return sum_all(mul(cv.values, w));
  };
  Rng coord_rng(65);
  std::vector<Index> coords;
  for (int i = 0; i < 60; ++i)
    coords.push_back(static_cast<Index>(coord_rng.below(static_cast<std::uint64_t>(n))));
  auto rep = finite_diff_check(f, flat, 1e-4, 1e-3, &coords);
  CHECK(static_cast<double>(rep.passed) >= 0.99 * static_cast<double>(rep.checked));
}
