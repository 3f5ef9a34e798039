#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "epidepth/ops.hpp"
#include "epidepth/tensor.hpp"

namespace epidepth {

// Scalar-valued function of one tensor. The callable must work both tracked
// (for the reverse-mode gradient) and untracked (for probe evaluations).
using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t passed = 0;
  std::vector<Index> failed;    // coordinates whose relative error exceeded tol
  std::vector<Index> excluded;  // coordinates flagged as sitting on a kink
  bool pass = false;

  double pass_fraction() const {
    return checked == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(checked);
  }
};

namespace detail {

inline double rel_error(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

}  // namespace detail

// Compares the reverse-mode gradient of f at x against central finite
// differences, coordinate by coordinate. Coordinates where the left and right
// one-sided slopes disagree (a kink, e.g. a hard argmax switching branches)
// are excluded from pass/fail and reported separately. Non-deterministic f is
// rejected by evaluating f(x) twice.
inline GradCheckReport finite_diff_check(const ScalarFn& f, const Tensor& x, double step, double tol,
                                         const std::vector<Index>* coords = nullptr) {
  if (!(step > 0.0)) throw ContractViolation("finite_diff_check: step must be positive");

  const double f0 = f(x.detached()).scalar_value();
  const double f0_again = f(x.detached()).scalar_value();
  if (std::memcmp(&f0, &f0_again, sizeof(double)) != 0)
    throw ContractViolation("finite_diff_check: f is not deterministic");

  // Reverse-mode gradient.
  std::vector<double> g_ad;
  {
    Tape tape;
    Tensor xt = x.detached();
    tape.attach_leaf(xt);
    Tensor loss = f(xt);
    if (loss.size() != 1) throw ContractViolation("finite_diff_check: f must return a scalar");
    tape.backward(loss);
    g_ad = xt.grad();
  }

  std::vector<Index> all;
  if (!coords) {
    all.resize(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) all[static_cast<std::size_t>(i)] = i;
  }
  const std::vector<Index>& idx = coords ? *coords : all;

  GradCheckReport rep;
  for (Index i : idx) {
    Tensor xp = x.detached();
    xp.data()[i] += step;
    double fp = f(xp).scalar_value();
    Tensor xm = x.detached();
    xm.data()[i] -= step;
    double fm = f(xm).scalar_value();

    double central = (fp - fm) / (2.0 * step);
    double right = (fp - f0) / step;
    double left = (f0 - fm) / step;

    // One-sided slopes that disagree badly indicate a kink between the probes.
    double slope_scale = std::max({std::fabs(left), std::fabs(right), 1.0});
    if (std::fabs(left - right) > 0.3 * slope_scale && detail::rel_error(central, g_ad[i]) > tol) {
      rep.excluded.push_back(i);
      continue;
    }

    double err = detail::rel_error(central, g_ad[i]);
    rep.max_rel_error = std::max(rep.max_rel_error, err);
    ++rep.checked;
    if (err <= tol)
      ++rep.passed;
    else
      rep.failed.push_back(i);
  }
  rep.pass = rep.failed.empty();
  return rep;
}

}  // namespace epidepth
