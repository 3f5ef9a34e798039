#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "epidepth/decoding.hpp"
#include "epidepth/grad_check.hpp"
#include "epidepth/rng.hpp"

using namespace epidepth;

namespace {

CostVolume make_volume(Index H, Index W, const std::vector<double>& probs,
                       const std::vector<std::uint8_t>& valid, Index D) {
  CostVolume cv;
  cv.H = H;
  cv.W = W;
  cv.D = D;
  cv.values = Tensor({H, W, D}, std::vector<double>(probs));
  cv.valid = valid;
  return cv;
}

CostVolume random_normalized_volume(Index H, Index W, Index D, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> probs(static_cast<std::size_t>(H * W * D));
  for (Index p = 0; p < H * W; ++p) {
    double sum = 0;
    for (Index i = 0; i < D; ++i) {
      double e = std::exp(rng.uniform(-2, 2));
      probs[static_cast<std::size_t>(p * D + i)] = e;
      sum += e;
    }
    for (Index i = 0; i < D; ++i) probs[static_cast<std::size_t>(p * D + i)] /= sum;
  }
  return make_volume(H, W, probs, std::vector<std::uint8_t>(static_cast<std::size_t>(H * W * D), 1), D);
}

}  // namespace

TEST_CASE("one-hot column decodes to the exact bin depth with confidence 1") {
  auto bins = sid_bins(2, 16, 6);
  std::vector<double> probs(6, 0.0);
  probs[4] = 1.0;
  CostVolume cv = make_volume(1, 1, probs, std::vector<std::uint8_t>(6, 1), 6);
  auto hr = high_response_decode(cv, bins, 1, 0.1);
  CHECK(hr.depth.data()[0] == Catch::Approx(bins.values[4]).margin(1e-15));
  CHECK(hr.confidence.data()[0] == 1.0);
  CHECK(hr.mask[0] == 1);
}

TEST_CASE("windowed expectation matches the hand-computed example") {
  // alpha = [0.2, 0.6, 0.2] over bins [2, 4, 8] m with s=1 -> 4.4 m.
  DepthBins bins;
  bins.d_min = 2;
  bins.d_max = 8;
  bins.count = 3;
  bins.values = {2, 4, 8};
  CostVolume cv = make_volume(1, 1, {0.2, 0.6, 0.2}, {1, 1, 1}, 3);
  auto hr = high_response_decode(cv, bins, 1, 0.0);
  CHECK(hr.depth.data()[0] == Catch::Approx(4.4).margin(1e-12));
  CHECK(hr.confidence.data()[0] == Catch::Approx(0.6).margin(1e-15));
}

TEST_CASE("peak at the first bin clamps the window and renormalizes") {
  DepthBins bins;
  bins.d_min = 2;
  bins.d_max = 8;
  bins.count = 3;
  bins.values = {2, 4, 8};
  CostVolume cv = make_volume(1, 1, {0.5, 0.3, 0.2}, {1, 1, 1}, 3);
  auto hr = high_response_decode(cv, bins, 1, 0.0);
  double want = (0.5 * 2 + 0.3 * 4) / 0.8;
  CHECK(hr.depth.data()[0] == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("argmax ties resolve to the lowest bin") {
  DepthBins bins;
  bins.d_min = 1;
  bins.d_max = 4;
  bins.count = 4;
  bins.values = {1, 2, 3, 4};
  CostVolume cv = make_volume(1, 1, {0.1, 0.4, 0.4, 0.1}, {1, 1, 1, 1}, 4);
  auto hr = high_response_decode(cv, bins, 0, 0.0);
  CHECK(hr.depth.data()[0] == 2.0);  // window {1} only
}

TEST_CASE("window constraints are enforced") {
  auto bins = sid_bins(1, 8, 4);
  CostVolume cv = random_normalized_volume(1, 1, 4, 3);
  CHECK_THROWS_AS(high_response_decode(cv, bins, -1, 0.1), ContractViolation);
  CHECK_THROWS_AS(high_response_decode(cv, bins, 2, 0.1), ContractViolation);
}

TEST_CASE("confidence mask thresholds") {
  const Index D = 128;
  std::vector<double> uniform(static_cast<std::size_t>(D), 1.0 / static_cast<double>(D));
  CostVolume cv = make_volume(1, 1, uniform, std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1), D);
  CHECK(confidence_mask(cv, 0.1)[0] == 0);  // 1/128 < 0.1

  std::vector<double> onehot(static_cast<std::size_t>(D), 0.0);
  onehot[40] = 1.0;
  CostVolume cv2 = make_volume(1, 1, onehot, std::vector<std::uint8_t>(static_cast<std::size_t>(D), 1), D);
  CHECK(confidence_mask(cv2, 1.0)[0] == 1);

  // lambda = 0 reduces to the validity mask.
  CostVolume cv3 = make_volume(1, 1, uniform, std::vector<std::uint8_t>(static_cast<std::size_t>(D), 0), D);
  CHECK(confidence_mask(cv3, 0.0)[0] == 0);
  CHECK(confidence_mask(cv, 0.0)[0] == 1);
}

TEST_CASE("shrinking the threshold never shrinks the mask") {
  auto cv = random_normalized_volume(4, 4, 8, 9);
  auto strict = confidence_mask(cv, 0.4);
  auto loose = confidence_mask(cv, 0.15);
  for (std::size_t i = 0; i < strict.size(); ++i)
    if (strict[i]) CHECK(loose[i] == 1);
}

TEST_CASE("decoded depth stays inside the clamped window span") {
  auto bins = sid_bins(2, 32, 12);
  auto cv = random_normalized_volume(5, 5, 12, 11);
  auto hr = high_response_decode(cv, bins, 2, 0.0);
  const Index D = 12;
  for (Index p = 0; p < 25; ++p) {
    Index h = 0;
    double mx = cv.values.data()[p * D];
    for (Index i = 1; i < D; ++i)
      if (cv.values.data()[p * D + i] > mx) {
        mx = cv.values.data()[p * D + i];
        h = i;
      }
    Index lo = std::max<Index>(0, h - 2), hi = std::min<Index>(D - 1, h + 2);
    CHECK(hr.depth.data()[p] >= bins.values[static_cast<std::size_t>(lo)] - 1e-12);
    CHECK(hr.depth.data()[p] <= bins.values[static_cast<std::size_t>(hi)] + 1e-12);
  }
}

TEST_CASE("high-response gradient flows through the window renormalization") {
  auto bins = sid_bins(2, 16, 8);
  auto cv = random_normalized_volume(3, 3, 8, 13);
  auto f = [&](const Tensor& values) {
    CostVolume v = cv;
    v.values = values;
    auto hr = high_response_decode(v, bins, 1, 0.0);
    return sum_all(mul(hr.depth, hr.depth));
  };
  auto rep = finite_diff_check(f, cv.values, 1e-6, 1e-3);
  // Coordinates that flip the argmax between probes are excluded kinks.
  CHECK(rep.pass_fraction() >= 0.99);
}

TEST_CASE("zero-initialized adjustment returns the high-response map") {
  auto bins = sid_bins(2, 10, 16);
  Rng rng(5);
  const Index H = 4, W = 4;
  HighResponseDepth hr;
  hr.depth = Tensor({H, W});
  for (Index i = 0; i < H * W; ++i) hr.depth.data()[i] = rng.uniform(2.5, 9.0);
  hr.confidence = Tensor::full({H, W}, 0.9);
  hr.mask.assign(static_cast<std::size_t>(H * W), 1);
  hr.any_valid.assign(static_cast<std::size_t>(H * W), 1);
  Tensor img({H * 4, W * 4, 3});
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);

  auto params = ContextAdjustParams::init(8, 7);  // w_out starts at zero
  auto out = context_adjust(hr, img, params, bins);
  for (Index i = 0; i < H * W; ++i)
    CHECK(out.depth.data()[i] == Catch::Approx(hr.depth.data()[i]).epsilon(1e-12));
}

TEST_CASE("constant high-response map is guarded against zero variance") {
  auto bins = sid_bins(2, 10, 16);
  const Index H = 4, W = 4;
  HighResponseDepth hr;
  hr.depth = Tensor::full({H, W}, 5.0);
  hr.confidence = Tensor::full({H, W}, 0.8);
  hr.mask.assign(static_cast<std::size_t>(H * W), 1);
  hr.any_valid.assign(static_cast<std::size_t>(H * W), 1);
  Tensor img({16, 16, 3});
  Rng rng(6);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);
  auto params = ContextAdjustParams::init(8, 3);
  // Give the output layer nonzero weights so theta != 0 exercises the guard.
  Rng wr(4);
  for (Index i = 0; i < params.w_out.size(); ++i) params.w_out.data()[i] = wr.uniform(-0.1, 0.1);
  auto out = context_adjust(hr, img, params, bins);
  for (Index i = 0; i < H * W; ++i) {
    CHECK(std::isfinite(out.depth.data()[i]));
    CHECK(out.depth.data()[i] >= bins.d_min);
    CHECK(out.depth.data()[i] <= bins.d_max);
  }
}

TEST_CASE("normalize then unnormalize is the identity without a residual") {
  Rng rng(8);
  const Index n = 24;
  std::vector<double> depths(n);
  for (double& d : depths) d = rng.uniform(3, 9);
  double mean = 0;
  for (double d : depths) mean += d;
  mean /= n;
  double var = 0;
  for (double d : depths) var += (d - mean) * (d - mean);
  var /= n;
  double sd = std::max(std::sqrt(var), 1e-6);
  for (double d : depths) {
    double round_trip = ((d - mean) / sd) * sd + mean;
    CHECK(round_trip == Catch::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("context adjustment requires at least one masked-in pixel") {
  auto bins = sid_bins(2, 10, 8);
  HighResponseDepth hr;
  hr.depth = Tensor::full({2, 2}, 4.0);
  hr.confidence = Tensor({2, 2});
  hr.mask.assign(4, 0);
  hr.any_valid.assign(4, 1);
  auto params = ContextAdjustParams::init(8, 2);
  CHECK_THROWS_AS(context_adjust(hr, Tensor({8, 8, 3}), params, bins), ContractViolation);
}

TEST_CASE("multi-scale decoder output shapes") {
  auto bins = sid_bins(2, 12, 16);
  auto params = DecoderParams::init(16, 16, 3);
  Tensor img({64, 64, 3});
  Rng rng(4);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);
  Tensor vol({16, 16, 16});
  for (Index i = 0; i < vol.size(); ++i) vol.data()[i] = rng.uniform(0, 1);
  auto out = multi_scale_decode(img, vol, params, bins);
  REQUIRE(out.maps.size() == 4);
  CHECK(out.maps[0].shape() == ShapeVec{8, 8});
  CHECK(out.maps[1].shape() == ShapeVec{16, 16});
  CHECK(out.maps[2].shape() == ShapeVec{32, 32});
  CHECK(out.maps[3].shape() == ShapeVec{64, 64});
  for (const Tensor& m : out.maps)
    for (Index i = 0; i < m.size(); ++i) {
      CHECK(m.data()[i] >= bins.d_min);
      CHECK(m.data()[i] <= bins.d_max);
    }
  CHECK_THROWS_AS(multi_scale_decode(Tensor({36, 64, 3}), vol, params, bins), ContractViolation);
}

TEST_CASE("sigmoid endpoints map to the depth range bounds") {
  Tensor lo = Tensor::full({2, 2, 1}, -1e9);  // sigmoid -> 0 -> d_max
  Tensor hi = Tensor::full({2, 2, 1}, 1e9);   // sigmoid -> 1 -> d_min
  Tensor d_lo = sigmoid_to_depth(lo, 2.0, 12.0);
  Tensor d_hi = sigmoid_to_depth(hi, 2.0, 12.0);
  for (Index i = 0; i < 4; ++i) {
    CHECK(d_lo.data()[i] == Catch::Approx(12.0).epsilon(1e-12));
    CHECK(d_hi.data()[i] == Catch::Approx(2.0).epsilon(1e-12));
  }
}

TEST_CASE("masked-out cost volume cells contribute nothing to the decoder") {
  auto bins = sid_bins(2, 12, 8);
  auto params = DecoderParams::init(16, 8, 9);
  Rng rng(10);
  Tensor img({32, 32, 3});
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);

  CostVolume cv = random_normalized_volume(8, 8, 8, 11);
  std::vector<std::uint8_t> mask(64, 1);
  for (std::size_t i = 0; i < 64; i += 3) mask[i] = 0;

  Tensor masked1 = apply_confidence_mask(cv, mask);
  // Scribble over the masked-out columns; after masking they must not matter.
  CostVolume scribbled = cv;
  scribbled.values = cv.values.detached();
  for (Index p = 0; p < 64; ++p)
    if (!mask[static_cast<std::size_t>(p)])
      for (Index i = 0; i < 8; ++i) scribbled.values.data()[p * 8 + i] = rng.uniform(-50, 50);
  Tensor masked2 = apply_confidence_mask(scribbled, mask);

  auto out1 = multi_scale_decode(img, masked1, params, bins);
  auto out2 = multi_scale_decode(img, masked2, params, bins);
  for (std::size_t s = 0; s < 4; ++s)
    for (Index i = 0; i < out1.maps[s].size(); ++i)
      CHECK(out1.maps[s].data()[i] == out2.maps[s].data()[i]);
}

TEST_CASE("context-adjusted depth gradients pass the finite-difference oracle") {
  auto bins = sid_bins(2, 10, 16);
  Rng rng(21);
  const Index H = 4, W = 4;
  HighResponseDepth hr;
  hr.depth = Tensor({H, W});
  for (Index i = 0; i < H * W; ++i) hr.depth.data()[i] = rng.uniform(3, 9);
  hr.confidence = Tensor::full({H, W}, 0.9);
  hr.mask.assign(static_cast<std::size_t>(H * W), 1);
  hr.any_valid.assign(static_cast<std::size_t>(H * W), 1);
  Tensor img({16, 16, 3});
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);
  auto params = ContextAdjustParams::init(8, 22);
  Rng wr(23);
  for (Index i = 0; i < params.w_out.size(); ++i) params.w_out.data()[i] = wr.uniform(-0.05, 0.05);

  SECTION("w.r.t. a network weight tensor") {
    auto f = [&](const Tensor& w) {
      ContextAdjustParams q = params;
      q.w_in = w;
      auto out = context_adjust(hr, img, q, bins);
      return sum_all(mul(out.depth, out.depth));
    };
    auto rep = finite_diff_check(f, params.w_in, 1e-5, 1e-3);
    CHECK(rep.pass_fraction() >= 0.99);
  }
  SECTION("w.r.t. the high-response depth input") {
    auto f = [&](const Tensor& d) {
      HighResponseDepth h2 = hr;
      h2.depth = d;
      auto out = context_adjust(h2, img, params, bins);
      return sum_all(mul(out.depth, out.depth));
    };
    auto rep = finite_diff_check(f, hr.depth, 1e-5, 1e-3);
    CHECK(rep.pass_fraction() >= 0.99);
  }
}

TEST_CASE("multi-scale map gradients pass the finite-difference oracle") {
  auto bins = sid_bins(2, 12, 8);
  auto params = DecoderParams::init(8, 8, 31);
  Rng rng(32);
  Tensor img({16, 16, 3});
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 1);
  Tensor vol({4, 4, 8});
  for (Index i = 0; i < vol.size(); ++i) vol.data()[i] = rng.uniform(0, 0.5);

  auto f = [&](const Tensor& w) {
    DecoderParams q = params;
    q.bw = w;
    auto out = multi_scale_decode(img, vol, q, bins);
    Tensor acc = Tensor::scalar(0.0);
    for (const Tensor& m : out.maps) acc = add(acc, mean_all(mul(m, m)));
    return acc;
  };
  std::vector<Index> coords;
  Rng cr(33);
  for (int i = 0; i < 30; ++i)
    coords.push_back(static_cast<Index>(cr.below(static_cast<std::uint64_t>(params.bw.size()))));
  auto rep = finite_diff_check(f, params.bw, 1e-5, 1e-3, &coords);
  CHECK(rep.pass_fraction() >= 0.99);
}
