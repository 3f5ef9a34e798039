#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "epidepth/tensor.hpp"

namespace epidepth {

struct DepthMetrics {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double d1 = 0, d2 = 0, d3 = 0;  // delta < 1.25, 1.25^2, 1.25^3
  Index count = 0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Standard depth metrics over valid pixels with gt <= d_cap. When
// median_scale is set, predictions are rescaled by median(gt)/median(pred)
// first (test-time median scaling for scale-ambiguous predictions).
inline DepthMetrics compute_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                                    const std::vector<std::uint8_t>& valid, bool median_scale,
                                    double d_cap = 80.0) {
  if (pred.size() != gt.size() || pred.size() != valid.size())
    throw ContractViolation("compute_metrics: size mismatch");
  std::vector<double> p, g;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i] || gt[i] > d_cap) continue;
    if (!(gt[i] > 0)) throw ContractViolation("compute_metrics: non-positive ground truth on a valid pixel");
    if (!(pred[i] > 0)) throw ContractViolation("compute_metrics: non-positive prediction on a valid pixel");
    p.push_back(pred[i]);
    g.push_back(gt[i]);
  }
  if (p.empty()) throw ContractViolation("compute_metrics: empty effective mask");

  if (median_scale) {
    double s = detail::median_of(g) / detail::median_of(p);
    for (double& v : p) v *= s;
  }

  DepthMetrics m;
  m.count = static_cast<Index>(p.size());
  double n = static_cast<double>(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double diff = p[i] - g[i];
    m.abs_rel += std::fabs(diff) / g[i];
    m.sq_rel += diff * diff / g[i];
    m.rmse += diff * diff;
    double dl = std::log(p[i]) - std::log(g[i]);
    m.rmse_log += dl * dl;
    double ratio = std::max(p[i] / g[i], g[i] / p[i]);
    if (ratio < 1.25) m.d1 += 1;
    if (ratio < 1.25 * 1.25) m.d2 += 1;
    if (ratio < 1.25 * 1.25 * 1.25) m.d3 += 1;
  }
  m.abs_rel /= n;
  m.sq_rel /= n;
  m.rmse = std::sqrt(m.rmse / n);
  m.rmse_log = std::sqrt(m.rmse_log / n);
  m.d1 /= n;
  m.d2 /= n;
  m.d3 /= n;
  return m;
}

inline std::string metrics_csv_header() {
  return "checkpoint,kind,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixels";
}

inline std::string metrics_csv_row(const std::string& checkpoint, const std::string& kind,
                                   const DepthMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%lld", checkpoint.c_str(),
                kind.c_str(), m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1, m.d2, m.d3,
                static_cast<long long>(m.count));
  return buf;
}

}  // namespace epidepth
