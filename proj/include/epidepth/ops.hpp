#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "epidepth/tensor.hpp"

namespace epidepth {

namespace detail {

// Right-aligned broadcast of two shapes (NumPy rule).
inline ShapeVec broadcast_shape(const ShapeVec& a, const ShapeVec& b, const char* op) {
  std::size_t r = std::max(a.size(), b.size());
  ShapeVec out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    Index ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    Index eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ContractViolation(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                              " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Element strides of `shape` aligned to `out`, zero on broadcast dims.
inline std::vector<Index> aligned_strides(const ShapeVec& shape, const ShapeVec& out) {
  std::vector<Index> strides(out.size(), 0);
  Index s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    std::size_t oi = i + (out.size() - shape.size());
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// Calls f(out_flat, a_flat, b_flat) over every element of `out`.
template <class F>
void broadcast_for_each(const ShapeVec& out, const std::vector<Index>& sa, const std::vector<Index>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  std::vector<Index> idx(r, 0);
  Index fa = 0, fb = 0;
  const Index total = numel(out);
  for (Index o = 0; o < total; ++o) {
    f(o, fa, fb);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      fa += sa[d];
      fb += sb[d];
      if (idx[d] < out[d]) break;
      fa -= sa[d] * out[d];
      fb -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline bool same_shape(const ShapeVec& a, const ShapeVec& b) { return a == b; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul, Div, Min };

inline const char* bin_name(BinKind k) {
  switch (k) {
    case BinKind::Add: return "add";
    case BinKind::Sub: return "sub";
    case BinKind::Mul: return "mul";
    case BinKind::Div: return "divide";
    case BinKind::Min: return "min_elem";
  }
  return "?";
}

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  const char* name = bin_name(kind);
  ShapeVec os = broadcast_shape(a.shape(), b.shape(), name);
  Tensor out(os);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();

  if (same_shape(a.shape(), b.shape())) {
    const Index n = out.size();
    switch (kind) {
      case BinKind::Add: for (Index i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinKind::Sub: for (Index i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinKind::Mul: for (Index i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinKind::Div: for (Index i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
      case BinKind::Min: for (Index i = 0; i < n; ++i) po[i] = pa[i] <= pb[i] ? pa[i] : pb[i]; break;
    }
  } else {
    auto sa = aligned_strides(a.shape(), os);
    auto sb = aligned_strides(b.shape(), os);
    switch (kind) {
      case BinKind::Add:
        broadcast_for_each(os, sa, sb, [&](Index o, Index fa, Index fb) { po[o] = pa[fa] + pb[fb]; });
        break;
      case BinKind::Sub:
        broadcast_for_each(os, sa, sb, [&](Index o, Index fa, Index fb) { po[o] = pa[fa] - pb[fb]; });
        break;
      case BinKind::Mul:
        broadcast_for_each(os, sa, sb, [&](Index o, Index fa, Index fb) { po[o] = pa[fa] * pb[fb]; });
        break;
      case BinKind::Div:
        broadcast_for_each(os, sa, sb, [&](Index o, Index fa, Index fb) { po[o] = pa[fa] / pb[fb]; });
        break;
      case BinKind::Min:
        broadcast_for_each(os, sa, sb,
                           [&](Index o, Index fa, Index fb) { po[o] = pa[fa] <= pb[fb] ? pa[fa] : pb[fb]; });
        break;
    }
  }

  Tape* tp = common_tape({&a, &b});
  if (tp) {
    auto ad = a.impl();
    auto bd = b.impl();
    auto od = out.impl();
    ShapeVec osc = os;
    tp->record({a, b}, out, [ad, bd, od, osc, kind] {
      auto sa = aligned_strides(ad->shape, osc);
      auto sb = aligned_strides(bd->shape, osc);
      const double* g = od->grad.data();
      const double* pa = ad->value.data();
      const double* pb = bd->value.data();
      double* ga = ad->grad.empty() ? nullptr : ad->grad.data();
      double* gb = bd->grad.empty() ? nullptr : bd->grad.data();
      broadcast_for_each(osc, sa, sb, [&](Index o, Index fa, Index fb) {
        switch (kind) {
          case BinKind::Add:
            if (ga) ga[fa] += g[o];
            if (gb) gb[fb] += g[o];
            break;
          case BinKind::Sub:
            if (ga) ga[fa] += g[o];
            if (gb) gb[fb] -= g[o];
            break;
          case BinKind::Mul:
            if (ga) ga[fa] += g[o] * pb[fb];
            if (gb) gb[fb] += g[o] * pa[fa];
            break;
          case BinKind::Div:
            if (ga) ga[fa] += g[o] / pb[fb];
            if (gb) gb[fb] -= g[o] * pa[fa] / (pb[fb] * pb[fb]);
            break;
          case BinKind::Min:
            if (pa[fa] <= pb[fb]) {
              if (ga) ga[fa] += g[o];
            } else if (gb) {
              gb[fb] += g[o];
            }
            break;
        }
      });
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Mul); }
inline Tensor divide(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Div); }
// Elementwise minimum; gradient follows the selected operand (ties pick the first).
inline Tensor min_elem(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Min); }

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd_factory) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, bwd_factory(xd, od));
  }
  return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i)
            if (xd->value[i] > 0.0) xd->grad[i] += od->grad[i];
        };
      });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) {
            double s = od->value[i];
            xd->grad[i] += od->grad[i] * s * (1.0 - s);
          }
        };
      });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) xd->grad[i] += od->grad[i] * od->value[i];
        };
      });
}

inline Tensor log(const Tensor& x) {
  for (Index i = 0; i < x.size(); ++i)
    if (x.data()[i] <= 0.0)
      throw ContractViolation("log: non-positive input " + std::to_string(x.data()[i]));
  return detail::unary_op(
      x, [](double v) { return std::log(v); },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) xd->grad[i] += od->grad[i] / xd->value[i];
        };
      });
}

// Subgradient 0 at the origin.
inline Tensor abs(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::fabs(v); },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) {
            double v = xd->value[i];
            if (v > 0.0)
              xd->grad[i] += od->grad[i];
            else if (v < 0.0)
              xd->grad[i] -= od->grad[i];
          }
        };
      });
}

// Gradient requires strictly positive input.
inline Tensor sqrt(const Tensor& x) {
  for (Index i = 0; i < x.size(); ++i)
    if (x.data()[i] < 0.0) throw ContractViolation("sqrt: negative input");
  return detail::unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i)
            xd->grad[i] += od->grad[i] * 0.5 / od->value[i];
        };
      });
}

// x^p with constant exponent.
inline Tensor pow_const(const Tensor& x, double p) {
  double ip;
  if (std::modf(p, &ip) != 0.0)
    for (Index i = 0; i < x.size(); ++i)
      if (x.data()[i] < 0.0) throw ContractViolation("pow_const: negative base with fractional exponent");
  return detail::unary_op(
      x, [p](double v) { return std::pow(v, p); },
      [p](auto xd, auto od) {
        return [xd, od, p] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i)
            xd->grad[i] += od->grad[i] * p * std::pow(xd->value[i], p - 1.0);
        };
      });
}

// x * k for a plain constant.
inline Tensor scale(const Tensor& x, double k) {
  return detail::unary_op(
      x, [k](double v) { return v * k; },
      [k](auto xd, auto od) {
        return [xd, od, k] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) xd->grad[i] += od->grad[i] * k;
        };
      });
}

// x + k for a plain constant.
inline Tensor offset(const Tensor& x, double k) {
  return detail::unary_op(
      x, [k](double v) { return v + k; },
      [](auto xd, auto od) {
        return [xd, od] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) xd->grad[i] += od->grad[i];
        };
      });
}

// Pass-through gradient strictly inside (lo, hi), zero on the clamped region.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractViolation("clamp: lo > hi");
  return detail::unary_op(
      x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](auto xd, auto od) {
        return [xd, od, lo, hi] {
          if (xd->grad.empty()) return;
          for (std::size_t i = 0; i < xd->value.size(); ++i) {
            double v = xd->value[i];
            if (v > lo && v < hi) xd->grad[i] += od->grad[i];
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// (m,k)x(k,n), (B,m,k)x(k,n) or (B,m,k)x(B,k,n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const ShapeVec& sa = a.shape();
  const ShapeVec& sb = b.shape();
  if ((sa.size() != 2 && sa.size() != 3) || (sb.size() != 2 && sb.size() != 3) || sb.size() > sa.size())
    throw ContractViolation("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched_a = sa.size() == 3;
  const bool batched_b = sb.size() == 3;
  const Index B = batched_a ? sa[0] : 1;
  const Index m = sa[batched_a ? 1 : 0], k = sa[batched_a ? 2 : 1];
  const Index kb = sb[batched_b ? 1 : 0], n = sb[batched_b ? 2 : 1];
  if (k != kb || (batched_b && sb[0] != B))
    throw ContractViolation("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));

  ShapeVec os = batched_a ? ShapeVec{B, m, n} : ShapeVec{m, n};
  Tensor out(os);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (Index bb = 0; bb < B; ++bb) {
    const double* A = pa + bb * m * k;
    const double* Bm = pb + (batched_b ? bb * k * n : 0);
    double* O = po + bb * m * n;
    for (Index i = 0; i < m; ++i) {
      double* orow = O + i * n;
      for (Index kk = 0; kk < k; ++kk) {
        double av = A[i * k + kk];
        if (av == 0.0) continue;
        const double* brow = Bm + kk * n;
        for (Index j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }

  Tape* tp = detail::common_tape({&a, &b});
  if (tp) {
    auto ad = a.impl();
    auto bd = b.impl();
    auto od = out.impl();
    tp->record({a, b}, out, [ad, bd, od, B, m, k, n, batched_b] {
      const double* g = od->grad.data();
      const double* pa = ad->value.data();
      const double* pb = bd->value.data();
      double* ga = ad->grad.empty() ? nullptr : ad->grad.data();
      double* gb = bd->grad.empty() ? nullptr : bd->grad.data();
      for (Index bb = 0; bb < B; ++bb) {
        const double* G = g + bb * m * n;
        const double* A = pa + bb * m * k;
        const double* Bm = pb + (batched_b ? bb * k * n : 0);
        double* GA = ga ? ga + bb * m * k : nullptr;
        double* GB = gb ? gb + (batched_b ? bb * k * n : 0) : nullptr;
        if (GA) {
          // dA = G * B^T
          for (Index i = 0; i < m; ++i)
            for (Index kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = G + i * n;
              const double* brow = Bm + kk * n;
              for (Index j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + kk] += acc;
            }
        }
        if (GB) {
          // dB = A^T * G (accumulated over the batch when B is shared)
          for (Index kk = 0; kk < k; ++kk)
            for (Index i = 0; i < m; ++i) {
              double av = A[i * k + kk];
              if (av == 0.0) continue;
              const double* grow = G + i * n;
              double* gbrow = GB + kk * n;
              for (Index j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

// a x b^T: (B,m,k)x(B,n,k) -> (B,m,n); also (m,k)x(n,k) -> (m,n).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const ShapeVec& sa = a.shape();
  const ShapeVec& sb = b.shape();
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3))
    throw ContractViolation("matmul_nt: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched = sa.size() == 3;
  const Index B = batched ? sa[0] : 1;
  const Index m = sa[batched ? 1 : 0], k = sa[batched ? 2 : 1];
  const Index n = sb[batched ? 1 : 0], kb = sb[batched ? 2 : 1];
  if (k != kb || (batched && sb[0] != B))
    throw ContractViolation("matmul_nt: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));

  ShapeVec os = batched ? ShapeVec{B, m, n} : ShapeVec{m, n};
  Tensor out(os);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (Index bb = 0; bb < B; ++bb) {
    const double* A = pa + bb * m * k;
    const double* Bm = pb + bb * n * k;
    double* O = po + bb * m * n;
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) {
        double acc = 0.0;
        const double* arow = A + i * k;
        const double* brow = Bm + j * k;
        for (Index kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        O[i * n + j] = acc;
      }
  }

  Tape* tp = detail::common_tape({&a, &b});
  if (tp) {
    auto ad = a.impl();
    auto bd = b.impl();
    auto od = out.impl();
    tp->record({a, b}, out, [ad, bd, od, B, m, k, n] {
      const double* g = od->grad.data();
      const double* pa = ad->value.data();
      const double* pb = bd->value.data();
      double* ga = ad->grad.empty() ? nullptr : ad->grad.data();
      double* gb = bd->grad.empty() ? nullptr : bd->grad.data();
      for (Index bb = 0; bb < B; ++bb) {
        const double* G = g + bb * m * n;
        const double* A = pa + bb * m * k;
        const double* Bm = pb + bb * n * k;
        if (ga) {
          double* GA = ga + bb * m * k;
          // dA = G * B
          for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < n; ++j) {
              double gv = G[i * n + j];
              if (gv == 0.0) continue;
              const double* brow = Bm + j * k;
              double* garow = GA + i * k;
              for (Index kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
            }
        }
        if (gb) {
          double* GB = gb + bb * n * k;
          // dB = G^T * A
          for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < n; ++j) {
              double gv = G[i * n + j];
              if (gv == 0.0) continue;
              const double* arow = A + i * k;
              double* gbrow = GB + j * k;
              for (Index kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling / resampling on (H, W, C) maps
// ---------------------------------------------------------------------------

// 2-d convolution with zero "same" padding. x: (H,W,Cin), w: (Cout,kh,kw,Cin),
// bias: (Cout) or undefined. Odd kernel extents only.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Index stride = 1) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ContractViolation("conv2d: expected x (H,W,Cin) and w (Cout,kh,kw,Cin), got " +
                            shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const Index H = x.shape()[0], W = x.shape()[1], Cin = x.shape()[2];
  const Index Cout = w.shape()[0], kh = w.shape()[1], kw = w.shape()[2];
  if (w.shape()[3] != Cin)
    throw ContractViolation("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw ContractViolation("conv2d: kernel extents must be odd");
  if (stride < 1) throw ContractViolation("conv2d: stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != Cout))
    throw ContractViolation("conv2d: bias shape mismatch");
  const Index ph = kh / 2, pw = kw / 2;
  const Index OH = (H + 2 * ph - kh) / stride + 1;
  const Index OW = (W + 2 * pw - kw) / stride + 1;

  Tensor out({OH, OW, Cout});
  const double* px = x.data();
  const double* pw_ = w.data();
  double* po = out.data();
  for (Index oy = 0; oy < OH; ++oy)
    for (Index ox = 0; ox < OW; ++ox) {
      double* ocell = po + (oy * OW + ox) * Cout;
      if (bias.defined())
        for (Index co = 0; co < Cout; ++co) ocell[co] = bias.data()[co];
      for (Index ky = 0; ky < kh; ++ky) {
        Index iy = oy * stride + ky - ph;
        if (iy < 0 || iy >= H) continue;
        for (Index kx = 0; kx < kw; ++kx) {
          Index ix = ox * stride + kx - pw;
          if (ix < 0 || ix >= W) continue;
          const double* xcell = px + (iy * W + ix) * Cin;
          for (Index co = 0; co < Cout; ++co) {
            const double* wrow = pw_ + ((co * kh + ky) * kw + kx) * Cin;
            double acc = 0.0;
            for (Index ci = 0; ci < Cin; ++ci) acc += xcell[ci] * wrow[ci];
            ocell[co] += acc;
          }
        }
      }
    }

  Tape* tp = bias.defined() ? detail::common_tape({&x, &w, &bias}) : detail::common_tape({&x, &w});
  if (tp) {
    auto xd = x.impl();
    auto wd = w.impl();
    auto bd = bias.defined() ? bias.impl() : nullptr;
    auto od = out.impl();
    std::vector<Tensor> ins = bias.defined() ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};
    tp->record(ins, out, [xd, wd, bd, od, H, W, Cin, Cout, kh, kw, ph, pw, OH, OW, stride] {
      const double* g = od->grad.data();
      const double* px = xd->value.data();
      const double* pw_ = wd->value.data();
      double* gx = xd->grad.empty() ? nullptr : xd->grad.data();
      double* gw = wd->grad.empty() ? nullptr : wd->grad.data();
      double* gb = (bd && !bd->grad.empty()) ? bd->grad.data() : nullptr;
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          const double* gcell = g + (oy * OW + ox) * Cout;
          if (gb)
            for (Index co = 0; co < Cout; ++co) gb[co] += gcell[co];
          for (Index ky = 0; ky < kh; ++ky) {
            Index iy = oy * stride + ky - ph;
            if (iy < 0 || iy >= H) continue;
            for (Index kx = 0; kx < kw; ++kx) {
              Index ix = ox * stride + kx - pw;
              if (ix < 0 || ix >= W) continue;
              const double* xcell = px + (iy * W + ix) * Cin;
              double* gxcell = gx ? gx + (iy * W + ix) * Cin : nullptr;
              for (Index co = 0; co < Cout; ++co) {
                double gv = gcell[co];
                if (gv == 0.0) continue;
                const double* wrow = pw_ + ((co * kh + ky) * kw + kx) * Cin;
                if (gxcell)
                  for (Index ci = 0; ci < Cin; ++ci) gxcell[ci] += gv * wrow[ci];
                if (gw) {
                  double* gwrow = gw + ((co * kh + ky) * kw + kx) * Cin;
                  for (Index ci = 0; ci < Cin; ++ci) gwrow[ci] += gv * xcell[ci];
                }
              }
            }
          }
        }
    });
  }
  return out;
}

// Non-overlapping k x k average pooling; H and W must divide by k.
inline Tensor avg_pool2d(const Tensor& x, Index k) {
  if (x.rank() != 3) throw ContractViolation("avg_pool2d: expected (H,W,C)");
  const Index H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  if (k < 1 || H % k != 0 || W % k != 0)
    throw ContractViolation("avg_pool2d: extents " + shape_str(x.shape()) + " not divisible by " +
                            std::to_string(k));
  const Index OH = H / k, OW = W / k;
  Tensor out({OH, OW, C});
  const double* px = x.data();
  double* po = out.data();
  const double inv = 1.0 / static_cast<double>(k * k);
  for (Index oy = 0; oy < OH; ++oy)
    for (Index ox = 0; ox < OW; ++ox)
      for (Index dy = 0; dy < k; ++dy)
        for (Index dx = 0; dx < k; ++dx) {
          const double* xc = px + ((oy * k + dy) * W + (ox * k + dx)) * C;
          double* oc = po + (oy * OW + ox) * C;
          for (Index c = 0; c < C; ++c) oc[c] += xc[c] * inv;
        }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, OH, OW, W, C, k, inv] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          const double* gc = g + (oy * OW + ox) * C;
          for (Index dy = 0; dy < k; ++dy)
            for (Index dx = 0; dx < k; ++dx) {
              double* gxc = gx + ((oy * k + dy) * W + (ox * k + dx)) * C;
              for (Index c = 0; c < C; ++c) gxc[c] += gc[c] * inv;
            }
        }
    });
  }
  return out;
}

namespace detail {

// Half-pixel source coordinate with clamped cell, as used by bilinear resize.
struct LerpCell {
  Index i0;
  double frac;
};

inline LerpCell lerp_cell(Index o, Index in_extent, Index out_extent) {
  double c = (static_cast<double>(o) + 0.5) * static_cast<double>(in_extent) /
                 static_cast<double>(out_extent) -
             0.5;
  if (c < 0.0) c = 0.0;
  double hi = static_cast<double>(in_extent - 1);
  if (c > hi) c = hi;
  Index i0 = static_cast<Index>(std::floor(c));
  if (i0 > in_extent - 2) i0 = in_extent - 2;
  if (i0 < 0) i0 = 0;
  return {i0, in_extent == 1 ? 0.0 : c - static_cast<double>(i0)};
}

}  // namespace detail

inline Tensor upsample_bilinear(const Tensor& x, Index OH, Index OW) {
  if (x.rank() != 3) throw ContractViolation("upsample_bilinear: expected (H,W,C)");
  const Index H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  if (OH < 1 || OW < 1) throw ContractViolation("upsample_bilinear: bad target size");
  Tensor out({OH, OW, C});
  const double* px = x.data();
  double* po = out.data();
  for (Index oy = 0; oy < OH; ++oy) {
    auto ry = detail::lerp_cell(oy, H, OH);
    for (Index ox = 0; ox < OW; ++ox) {
      auto rx = detail::lerp_cell(ox, W, OW);
      const double w00 = (1 - ry.frac) * (1 - rx.frac), w01 = (1 - ry.frac) * rx.frac;
      const double w10 = ry.frac * (1 - rx.frac), w11 = ry.frac * rx.frac;
      const double* s00 = px + (ry.i0 * W + rx.i0) * C;
      const double* s01 = px + (ry.i0 * W + std::min(rx.i0 + 1, W - 1)) * C;
      const double* s10 = px + (std::min(ry.i0 + 1, H - 1) * W + rx.i0) * C;
      const double* s11 = px + (std::min(ry.i0 + 1, H - 1) * W + std::min(rx.i0 + 1, W - 1)) * C;
      double* oc = po + (oy * OW + ox) * C;
      for (Index c = 0; c < C; ++c) oc[c] = w00 * s00[c] + w01 * s01[c] + w10 * s10[c] + w11 * s11[c];
    }
  }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, H, W, C, OH, OW] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      for (Index oy = 0; oy < OH; ++oy) {
        auto ry = detail::lerp_cell(oy, H, OH);
        for (Index ox = 0; ox < OW; ++ox) {
          auto rx = detail::lerp_cell(ox, W, OW);
          const double w00 = (1 - ry.frac) * (1 - rx.frac), w01 = (1 - ry.frac) * rx.frac;
          const double w10 = ry.frac * (1 - rx.frac), w11 = ry.frac * rx.frac;
          const double* gc = g + (oy * OW + ox) * C;
          double* g00 = gx + (ry.i0 * W + rx.i0) * C;
          double* g01 = gx + (ry.i0 * W + std::min(rx.i0 + 1, W - 1)) * C;
          double* g10 = gx + (std::min(ry.i0 + 1, H - 1) * W + rx.i0) * C;
          double* g11 = gx + (std::min(ry.i0 + 1, H - 1) * W + std::min(rx.i0 + 1, W - 1)) * C;
          for (Index c = 0; c < C; ++c) {
            g00[c] += w00 * gc[c];
            g01[c] += w01 * gc[c];
            g10[c] += w10 * gc[c];
            g11[c] += w11 * gc[c];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor upsample_nearest(const Tensor& x, Index OH, Index OW) {
  if (x.rank() != 3) throw ContractViolation("upsample_nearest: expected (H,W,C)");
  const Index H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  if (OH < 1 || OW < 1) throw ContractViolation("upsample_nearest: bad target size");
  Tensor out({OH, OW, C});
  const double* px = x.data();
  double* po = out.data();
  auto src = [](Index o, Index in, Index outn) { return std::min(o * in / outn, in - 1); };
  for (Index oy = 0; oy < OH; ++oy) {
    Index iy = src(oy, H, OH);
    for (Index ox = 0; ox < OW; ++ox) {
      Index ix = src(ox, W, OW);
      const double* xc = px + (iy * W + ix) * C;
      double* oc = po + (oy * OW + ox) * C;
      for (Index c = 0; c < C; ++c) oc[c] = xc[c];
    }
  }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, H, W, C, OH, OW, src] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      for (Index oy = 0; oy < OH; ++oy) {
        Index iy = src(oy, H, OH);
        for (Index ox = 0; ox < OW; ++ox) {
          Index ix = src(ox, W, OW);
          const double* gc = g + (oy * OW + ox) * C;
          double* gxc = gx + (iy * W + ix) * C;
          for (Index c = 0; c < C; ++c) gxc[c] += gc[c];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (Index i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od] {
      if (xd->grad.empty()) return;
      double g = od->grad[0];
      for (double& gv : xd->grad) gv += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (Index i = 0; i < x.size(); ++i) acc += x.data()[i];
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::scalar(acc * inv);
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, inv] {
      if (xd->grad.empty()) return;
      double g = od->grad[0] * inv;
      for (double& gv : xd->grad) gv += g;
    });
  }
  return out;
}

namespace detail {

inline Tensor reduce_axis(const Tensor& x, Index axis, bool keepdim, bool mean) {
  if (axis < 0 || axis >= x.rank()) throw ContractViolation("reduce_axis: axis out of range");
  const ShapeVec& s = x.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[i];
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const Index ax = s[axis];
  ShapeVec os;
  for (Index i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(s[i]);
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const double* px = x.data();
  double* po = out.data();
  const double w = mean ? 1.0 / static_cast<double>(ax) : 1.0;
  for (Index o = 0; o < outer; ++o)
    for (Index a = 0; a < ax; ++a) {
      const double* row = px + (o * ax + a) * inner;
      double* orow = po + o * inner;
      for (Index i = 0; i < inner; ++i) orow[i] += row[i] * w;
    }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, outer, ax, inner, w] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      for (Index o = 0; o < outer; ++o)
        for (Index a = 0; a < ax; ++a) {
          double* row = gx + (o * ax + a) * inner;
          const double* grow = g + o * inner;
          for (Index i = 0; i < inner; ++i) row[i] += grow[i] * w;
        }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& x, Index axis, bool keepdim = true) {
  return detail::reduce_axis(x, axis, keepdim, false);
}
inline Tensor mean_axis(const Tensor& x, Index axis, bool keepdim = true) {
  return detail::reduce_axis(x, axis, keepdim, true);
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, ShapeVec shape) {
  if (numel(shape) != x.size())
    throw ContractViolation("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.values()));
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od] {
      if (xd->grad.empty()) return;
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, Index axis) {
  if (parts.empty()) throw ContractViolation("concat: empty input list");
  const ShapeVec& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<Index>(s0.size())) throw ContractViolation("concat: axis out of range");
  ShapeVec os = s0;
  os[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<Index>(s0.size()))
      throw ContractViolation("concat: rank mismatch");
    for (Index d = 0; d < p.rank(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        throw ContractViolation("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    os[axis] += p.shape()[axis];
  }
  Tensor out(os);
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= os[i];
  for (Index i = axis + 1; i < static_cast<Index>(os.size()); ++i) inner *= os[i];
  const Index oax = os[axis];
  Index at = 0;
  for (const Tensor& p : parts) {
    const Index pax = p.shape()[axis];
    const double* pp = p.data();
    double* po = out.data();
    for (Index o = 0; o < outer; ++o)
      for (Index a = 0; a < pax; ++a) {
        const double* src = pp + (o * pax + a) * inner;
        double* dst = po + (o * oax + (at + a)) * inner;
        for (Index i = 0; i < inner; ++i) dst[i] = src[i];
      }
    at += pax;
  }

  Tape* tp = nullptr;
  for (const Tensor& p : parts)
    if (p.tracked()) {
      if (tp && tp != p.tape()) throw ContractViolation("concat: operands on different tapes");
      tp = p.tape();
    }
  if (tp) {
    auto od = out.impl();
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    std::vector<Index> paxs;
    for (const Tensor& p : parts) {
      pds.push_back(p.impl());
      paxs.push_back(p.shape()[axis]);
    }
    tp->record(parts, out, [od, pds, paxs, outer, inner, oax] {
      const double* g = od->grad.data();
      Index at = 0;
      for (std::size_t pi = 0; pi < pds.size(); ++pi) {
        const Index pax = paxs[pi];
        if (!pds[pi]->grad.empty()) {
          double* gp = pds[pi]->grad.data();
          for (Index o = 0; o < outer; ++o)
            for (Index a = 0; a < pax; ++a) {
              double* dst = gp + (o * pax + a) * inner;
              const double* src = g + (o * oax + (at + a)) * inner;
              for (Index i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
        at += pax;
      }
    });
  }
  return out;
}

// Contiguous [start, stop) range per dimension.
inline Tensor slice(const Tensor& x, const std::vector<Index>& starts, const std::vector<Index>& stops) {
  const ShapeVec& s = x.shape();
  if (starts.size() != s.size() || stops.size() != s.size())
    throw ContractViolation("slice: range rank mismatch for " + shape_str(s));
  ShapeVec os(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (starts[d] < 0 || stops[d] > s[d] || starts[d] >= stops[d])
      throw ContractViolation("slice: bad range [" + std::to_string(starts[d]) + "," +
                              std::to_string(stops[d]) + ") for dim of extent " + std::to_string(s[d]));
    os[d] = stops[d] - starts[d];
  }
  Tensor out(os);
  std::vector<Index> in_strides(s.size());
  Index st = 1;
  for (std::size_t d = s.size(); d-- > 0;) {
    in_strides[d] = st;
    st *= s[d];
  }
  const double* px = x.data();
  double* po = out.data();
  std::vector<Index> idx(s.size(), 0);
  const Index total = out.size();
  for (Index o = 0; o < total; ++o) {
    Index f = 0;
    for (std::size_t d = 0; d < s.size(); ++d) f += (starts[d] + idx[d]) * in_strides[d];
    po[o] = px[f];
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
    }
  }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    ShapeVec osc = os;
    std::vector<Index> starts_c = starts, strides_c = in_strides;
    x.tape()->record({x}, out, [xd, od, osc, starts_c, strides_c] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      std::vector<Index> idx(osc.size(), 0);
      const Index total = static_cast<Index>(od->value.size());
      for (Index o = 0; o < total; ++o) {
        Index f = 0;
        for (std::size_t d = 0; d < osc.size(); ++d) f += (starts_c[d] + idx[d]) * strides_c[d];
        gx[f] += g[o];
        for (std::size_t d = osc.size(); d-- > 0;) {
          if (++idx[d] < osc[d]) break;
          idx[d] = 0;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

inline Tensor softmax_last(const Tensor& x) {
  const Index ax = x.shape().back();
  const Index rows = x.size() / ax;
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const double* row = px + r * ax;
    double* orow = po + r * ax;
    double mx = row[0];
    for (Index i = 1; i < ax; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (Index i = 0; i < ax; ++i) {
      orow[i] = std::exp(row[i] - mx);
      sum += orow[i];
    }
    const double inv = 1.0 / sum;
    for (Index i = 0; i < ax; ++i) orow[i] *= inv;
  }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, rows, ax] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      const double* a = od->value.data();
      double* gx = xd->grad.data();
      for (Index r = 0; r < rows; ++r) {
        const double* grow = g + r * ax;
        const double* arow = a + r * ax;
        double dot = 0.0;
        for (Index i = 0; i < ax; ++i) dot += grow[i] * arow[i];
        double* gxrow = gx + r * ax;
        for (Index i = 0; i < ax; ++i) gxrow[i] += arow[i] * (grow[i] - dot);
      }
    });
  }
  return out;
}

// Local 3x3 mean on (H,W,C), normalized by the in-image tap count at borders.
inline Tensor box_filter3(const Tensor& x) {
  if (x.rank() != 3) throw ContractViolation("box_filter3: expected (H,W,C)");
  const Index H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (Index y = 0; y < H; ++y)
    for (Index x0 = 0; x0 < W; ++x0) {
      Index y_lo = std::max<Index>(0, y - 1), y_hi = std::min(H - 1, y + 1);
      Index x_lo = std::max<Index>(0, x0 - 1), x_hi = std::min(W - 1, x0 + 1);
      double inv = 1.0 / static_cast<double>((y_hi - y_lo + 1) * (x_hi - x_lo + 1));
      double* oc = po + (y * W + x0) * C;
      for (Index yy = y_lo; yy <= y_hi; ++yy)
        for (Index xx = x_lo; xx <= x_hi; ++xx) {
          const double* xc = px + (yy * W + xx) * C;
          for (Index c = 0; c < C; ++c) oc[c] += xc[c] * inv;
        }
    }
  if (x.tracked()) {
    auto xd = x.impl();
    auto od = out.impl();
    x.tape()->record({x}, out, [xd, od, H, W, C] {
      if (xd->grad.empty()) return;
      const double* g = od->grad.data();
      double* gx = xd->grad.data();
      for (Index y = 0; y < H; ++y)
        for (Index x0 = 0; x0 < W; ++x0) {
          Index y_lo = std::max<Index>(0, y - 1), y_hi = std::min(H - 1, y + 1);
          Index x_lo = std::max<Index>(0, x0 - 1), x_hi = std::min(W - 1, x0 + 1);
          double inv = 1.0 / static_cast<double>((y_hi - y_lo + 1) * (x_hi - x_lo + 1));
          const double* gc = g + (y * W + x0) * C;
          for (Index yy = y_lo; yy <= y_hi; ++yy)
            for (Index xx = x_lo; xx <= x_hi; ++xx) {
              double* gxc = gx + (yy * W + xx) * C;
              for (Index c = 0; c < C; ++c) gxc[c] += gc[c] * inv;
            }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling
// ---------------------------------------------------------------------------

// Samples src (H,W,C) at continuous pixel coordinates. coords (...,2) holds
// (u,v) pairs, u along width and v along height, pixel centers at integers.
// Reads clamp to the image border; output shape is coords' leading dims + C.
// Differentiable in both the source map and the coordinates; coordinate
// gradients vanish where the unclamped coordinate lies outside the image.
inline Tensor grid_sample(const Tensor& src, const Tensor& coords) {
  if (src.rank() != 3) throw ContractViolation("grid_sample: src must be (H,W,C)");
  if (coords.shape().back() != 2) throw ContractViolation("grid_sample: coords must end in extent 2");
  const Index H = src.shape()[0], W = src.shape()[1], C = src.shape()[2];
  const Index N = coords.size() / 2;
  ShapeVec os(coords.shape().begin(), coords.shape().end() - 1);
  os.push_back(C);
  Tensor out(os);
  const double* ps = src.data();
  const double* pc = coords.data();
  double* po = out.data();

  auto cell = [](double c, Index extent, Index& i0, double& frac, bool& interior) {
    interior = c >= 0.0 && c <= static_cast<double>(extent - 1);
    double cc = std::min(std::max(c, 0.0), static_cast<double>(extent - 1));
    i0 = static_cast<Index>(std::floor(cc));
    if (i0 > extent - 2) i0 = extent - 2;
    if (i0 < 0) i0 = 0;
    frac = extent == 1 ? 0.0 : cc - static_cast<double>(i0);
  };

  for (Index n = 0; n < N; ++n) {
    double u = pc[n * 2], v = pc[n * 2 + 1];
    Index x0, y0;
    double fx, fy;
    bool inx, iny;
    cell(u, W, x0, fx, inx);
    cell(v, H, y0, fy, iny);
    const Index x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double* s00 = ps + (y0 * W + x0) * C;
    const double* s01 = ps + (y0 * W + x1) * C;
    const double* s10 = ps + (y1 * W + x0) * C;
    const double* s11 = ps + (y1 * W + x1) * C;
    double* oc = po + n * C;
    const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
    for (Index c = 0; c < C; ++c) oc[c] = w00 * s00[c] + w01 * s01[c] + w10 * s10[c] + w11 * s11[c];
  }

  Tape* tp = detail::common_tape({&src, &coords});
  if (tp) {
    auto sd = src.impl();
    auto cd = coords.impl();
    auto od = out.impl();
    tp->record({src, coords}, out, [sd, cd, od, H, W, C, N, cell] {
      const double* g = od->grad.data();
      const double* ps = sd->value.data();
      const double* pc = cd->value.data();
      double* gs = sd->grad.empty() ? nullptr : sd->grad.data();
      double* gc = cd->grad.empty() ? nullptr : cd->grad.data();
      for (Index n = 0; n < N; ++n) {
        double u = pc[n * 2], v = pc[n * 2 + 1];
        Index x0, y0;
        double fx, fy;
        bool inx, iny;
        cell(u, W, x0, fx, inx);
        cell(v, H, y0, fy, iny);
        const Index x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
        const double* gcell = g + n * C;
        if (gs) {
          double* g00 = gs + (y0 * W + x0) * C;
          double* g01 = gs + (y0 * W + x1) * C;
          double* g10 = gs + (y1 * W + x0) * C;
          double* g11 = gs + (y1 * W + x1) * C;
          for (Index c = 0; c < C; ++c) {
            g00[c] += w00 * gcell[c];
            g01[c] += w01 * gcell[c];
            g10[c] += w10 * gcell[c];
            g11[c] += w11 * gcell[c];
          }
        }
        if (gc) {
          const double* s00 = ps + (y0 * W + x0) * C;
          const double* s01 = ps + (y0 * W + x1) * C;
          const double* s10 = ps + (y1 * W + x0) * C;
          const double* s11 = ps + (y1 * W + x1) * C;
          double du = 0.0, dv = 0.0;
          for (Index c = 0; c < C; ++c) {
            du += gcell[c] * ((1 - fy) * (s01[c] - s00[c]) + fy * (s11[c] - s10[c]));
            dv += gcell[c] * ((1 - fx) * (s10[c] - s00[c]) + fx * (s11[c] - s01[c]));
          }
          if (inx) gc[n * 2] += du;
          if (iny) gc[n * 2 + 1] += dv;
        }
      }
    });
  }
  return out;
}

}  // namespace epidepth
