#include "splitnn/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "splitnn/error.hpp"

namespace splitnn {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct ConvDims {
  int N, C, H, W, OC, KH, KW, s, p, OH, OW;
  int64_t K() const { return int64_t(C) * KH * KW; }
  int64_t M() const { return int64_t(N) * OH * OW; }
  int64_t P() const { return int64_t(OH) * OW; }
};

// col: (C*KH*KW) x (N*OH*OW), row-major; out-of-bounds taps are zero.
void im2col(const std::vector<double>& x, const ConvDims& d,
            std::vector<double>& col) {
  const int64_t M = d.M(), P = d.P();
  col.assign(size_t(d.K() * M), 0.0);
  for (int c = 0; c < d.C; ++c) {
    for (int ky = 0; ky < d.KH; ++ky) {
      for (int kx = 0; kx < d.KW; ++kx) {
        const int64_t r = (int64_t(c) * d.KH + ky) * d.KW + kx;
        double* crow = col.data() + size_t(r * M);
        for (int n = 0; n < d.N; ++n) {
          const double* xp = x.data() + size_t((int64_t(n) * d.C + c) * d.H * d.W);
          double* cp = crow + size_t(int64_t(n) * P);
          for (int oy = 0; oy < d.OH; ++oy) {
            const int iy = oy * d.s - d.p + ky;
            if (iy < 0 || iy >= d.H) continue;
            const double* xrow = xp + size_t(iy) * d.W;
            double* crow2 = cp + size_t(oy) * d.OW;
            for (int ox = 0; ox < d.OW; ++ox) {
              const int ix = ox * d.s - d.p + kx;
              if (ix >= 0 && ix < d.W) crow2[ox] = xrow[ix];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of dcol (same layout as im2col's output) back into dx.
void col2im(const std::vector<double>& dcol, const ConvDims& d,
            std::vector<double>& dx) {
  const int64_t M = d.M(), P = d.P();
  for (int c = 0; c < d.C; ++c) {
    for (int ky = 0; ky < d.KH; ++ky) {
      for (int kx = 0; kx < d.KW; ++kx) {
        const int64_t r = (int64_t(c) * d.KH + ky) * d.KW + kx;
        const double* crow = dcol.data() + size_t(r * M);
        for (int n = 0; n < d.N; ++n) {
          double* xp = dx.data() + size_t((int64_t(n) * d.C + c) * d.H * d.W);
          const double* cp = crow + size_t(int64_t(n) * P);
          for (int oy = 0; oy < d.OH; ++oy) {
            const int iy = oy * d.s - d.p + ky;
            if (iy < 0 || iy >= d.H) continue;
            double* xrow = xp + size_t(iy) * d.W;
            const double* crow2 = cp + size_t(oy) * d.OW;
            for (int ox = 0; ox < d.OW; ++ox) {
              const int ix = ox * d.s - d.p + kx;
              if (ix >= 0 && ix < d.W) xrow[ix] += crow2[ox];
            }
          }
        }
      }
    }
  }
}

// (OC x M) with columns ordered (n, oy, ox) -> NCHW (N,OC,OH,OW).
void ocm_to_nchw(const std::vector<double>& src, const ConvDims& d,
                 std::vector<double>& dst) {
  const int64_t M = d.M(), P = d.P();
  for (int n = 0; n < d.N; ++n) {
    for (int oc = 0; oc < d.OC; ++oc) {
      const double* sp = src.data() + size_t(int64_t(oc) * M + int64_t(n) * P);
      double* dp = dst.data() + size_t((int64_t(n) * d.OC + oc) * P);
      std::copy(sp, sp + P, dp);
    }
  }
}

void nchw_to_ocm(const std::vector<double>& src, const ConvDims& d,
                 std::vector<double>& dst) {
  const int64_t M = d.M(), P = d.P();
  dst.resize(size_t(int64_t(d.OC) * M));
  for (int n = 0; n < d.N; ++n) {
    for (int oc = 0; oc < d.OC; ++oc) {
      const double* sp = src.data() + size_t((int64_t(n) * d.OC + oc) * P);
      double* dp = dst.data() + size_t(int64_t(oc) * M + int64_t(n) * P);
      std::copy(sp, sp + P, dp);
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  require(x.ndim() == 4, "conv2d: input must be NCHW, got " + shape_str(x.shape()));
  require(w.ndim() == 4, "conv2d: weight must be (OC,IC,KH,KW), got " +
                             shape_str(w.shape()));
  require(b.ndim() == 1 && b.dim(0) == w.dim(0),
          "conv2d: bias shape " + shape_str(b.shape()) +
              " does not match weight " + shape_str(w.shape()));
  require(x.dim(1) == w.dim(1),
          "conv2d: input channels " + shape_str(x.shape()) +
              " do not match weight " + shape_str(w.shape()));

  ConvDims d;
  d.N = x.dim(0); d.C = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
  d.OC = w.dim(0); d.KH = w.dim(2); d.KW = w.dim(3);
  d.s = stride; d.p = pad;
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  require(d.OH >= 1 && d.OW >= 1, "conv2d: kernel larger than padded input");

  std::vector<double> col;
  im2col(x.values(), d, col);

  const int64_t K = d.K(), M = d.M();
  std::vector<double> ocm(size_t(int64_t(d.OC) * M));
  {
    MapRowC Wm(w.values().data(), d.OC, K);
    MapRowC Cm(col.data(), K, M);
    MapRow Om(ocm.data(), d.OC, M);
    Om.noalias() = Wm * Cm;
    for (int oc = 0; oc < d.OC; ++oc) Om.row(oc).array() += b.values()[size_t(oc)];
  }
  std::vector<double> out(size_t(int64_t(d.N) * d.OC * d.P()));
  ocm_to_nchw(ocm, d, out);

  auto xn = x.node(); auto wn = w.node(); auto bn = b.node();
  return make_op({d.N, d.OC, d.OH, d.OW}, std::move(out), {x, w, b},
                 [xn, wn, bn, d](detail::Node& o) {
                   const int64_t K = d.K(), M = d.M();
                   std::vector<double> gocm;
                   nchw_to_ocm(o.grad, d, gocm);
                   MapRowC R(gocm.data(), d.OC, M);
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     // Plain sequential sums: Eigen's vectorized redux splits
                     // at an address-dependent boundary, which breaks bitwise
                     // run-to-run reproducibility.
                     for (int oc = 0; oc < d.OC; ++oc) {
                       const double* gr = gocm.data() + size_t(oc) * size_t(M);
                       double s = 0.0;
                       for (int64_t m = 0; m < M; ++m) s += gr[m];
                       bn->grad[size_t(oc)] += s;
                     }
                   }
                   if (wn->requires_grad) {
                     wn->ensure_grad();
                     std::vector<double> col;
                     im2col(xn->val, d, col);
                     MapRowC Cm(col.data(), K, M);
                     MapRow Gw(wn->grad.data(), d.OC, K);
                     Gw.noalias() += R * Cm.transpose();
                   }
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     std::vector<double> dcol(size_t(K * M));
                     MapRow Dc(dcol.data(), K, M);
                     MapRowC Wm(wn->val.data(), d.OC, K);
                     Dc.noalias() = Wm.transpose() * R;
                     col2im(dcol, d, xn->grad);
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 2, "linear: input must be (N,din), got " + shape_str(x.shape()));
  require(w.ndim() == 2 && x.dim(1) == w.dim(1),
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
              shape_str(w.shape()));
  require(b.ndim() == 1 && b.dim(0) == w.dim(0),
          "linear: bias shape " + shape_str(b.shape()) +
              " does not match weight " + shape_str(w.shape()));
  const int N = x.dim(0), din = x.dim(1), dout = w.dim(0);

  std::vector<double> out(size_t(int64_t(N) * dout));
  {
    MapRowC Xm(x.values().data(), N, din);
    MapRowC Wm(w.values().data(), dout, din);
    MapRow Ym(out.data(), N, dout);
    Ym.noalias() = Xm * Wm.transpose();
    for (int n = 0; n < N; ++n) {
      for (int j = 0; j < dout; ++j) out[size_t(n) * dout + j] += b.values()[size_t(j)];
    }
  }
  auto xn = x.node(); auto wn = w.node(); auto bn = b.node();
  return make_op({N, dout}, std::move(out), {x, w, b},
                 [xn, wn, bn, N, din, dout](detail::Node& o) {
                   MapRowC R(o.grad.data(), N, dout);
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (int j = 0; j < dout; ++j) {
                       double s = 0.0;
                       for (int n = 0; n < N; ++n) s += o.grad[size_t(n) * dout + j];
                       bn->grad[size_t(j)] += s;
                     }
                   }
                   if (wn->requires_grad) {
                     wn->ensure_grad();
                     MapRowC Xm(xn->val.data(), N, din);
                     MapRow Gw(wn->grad.data(), dout, din);
                     Gw.noalias() += R.transpose() * Xm;
                   }
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     MapRowC Wm(wn->val.data(), dout, din);
                     MapRow Gx(xn->grad.data(), N, din);
                     Gx.noalias() += R * Wm;
                   }
                 });
}

Tensor relu(const Tensor& x) { return clamp_min(x, 0.0); }

Tensor prelu(const Tensor& x, const Tensor& slope) {
  require(x.ndim() >= 2, "prelu: input needs a channel dim, got " + shape_str(x.shape()));
  const int C = x.dim(1);
  require(slope.ndim() == 1 && slope.dim(0) == C,
          "prelu: slope shape " + shape_str(slope.shape()) +
              " does not match channels of " + shape_str(x.shape()));
  int64_t inner = 1;
  for (int i = 2; i < x.ndim(); ++i) inner *= x.dim(i);

  const auto& xv = x.values();
  const auto& sv = slope.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    const int c = int((int64_t(i) / inner) % C);
    out[i] = xv[i] >= 0 ? xv[i] : sv[size_t(c)] * xv[i];
  }
  auto xn = x.node(); auto sn = slope.node();
  return make_op(x.shape(), std::move(out), {x, slope},
                 [xn, sn, inner, C](detail::Node& o) {
                   const bool gx = xn->requires_grad, gs = sn->requires_grad;
                   if (gx) xn->ensure_grad();
                   if (gs) sn->ensure_grad();
                   for (size_t i = 0; i < o.grad.size(); ++i) {
                     const int c = int((int64_t(i) / inner) % C);
                     const double xval = xn->val[i];
                     if (xval >= 0) {
                       if (gx) xn->grad[i] += o.grad[i];
                     } else {
                       if (gx) xn->grad[i] += o.grad[i] * sn->val[size_t(c)];
                       if (gs) sn->grad[size_t(c)] += o.grad[i] * xval;
                     }
                   }
                 });
}

Tensor maxpool2x2(const Tensor& x) {
  require(x.ndim() == 4, "maxpool2x2: input must be NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0,
          "maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const int OH = H / 2, OW = W / 2;

  const auto& xv = x.values();
  std::vector<double> out(size_t(int64_t(N) * C * OH * OW));
  std::vector<int64_t> arg(out.size());
  int64_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const int64_t base = (int64_t(n) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox, ++oi) {
          // Window scanned in row-major order; strict > keeps the first max.
          int64_t best = base + int64_t(2 * oy) * W + 2 * ox;
          double bv = xv[size_t(best)];
          const int64_t cand[3] = {best + 1, best + W, best + W + 1};
          for (int64_t ci : cand) {
            if (xv[size_t(ci)] > bv) { bv = xv[size_t(ci)]; best = ci; }
          }
          out[size_t(oi)] = bv;
          arg[size_t(oi)] = best;
        }
      }
    }
  }
  auto xn = x.node();
  return make_op({N, C, OH, OW}, std::move(out), {x},
                 [xn, arg = std::move(arg)](detail::Node& o) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (size_t i = 0; i < o.grad.size(); ++i) {
                     xn->grad[size_t(arg[i])] += o.grad[i];
                   }
                 });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require(x.ndim() == 4, "upsample_nearest2x: input must be NCHW, got " +
                             shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = 2 * H, OW = 2 * W;
  const auto& xv = x.values();
  std::vector<double> out(size_t(int64_t(N) * C * OH * OW));
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    const double* src = xv.data() + size_t(nc * H * W);
    double* dst = out.data() + size_t(nc * OH * OW);
    for (int y = 0; y < H; ++y) {
      for (int x2 = 0; x2 < W; ++x2) {
        const double v = src[size_t(y) * W + x2];
        double* d0 = dst + size_t(2 * y) * OW + 2 * x2;
        d0[0] = v; d0[1] = v; d0[OW] = v; d0[OW + 1] = v;
      }
    }
  }
  auto xn = x.node();
  return make_op({N, C, OH, OW}, std::move(out), {x},
                 [xn, N, C, H, W, OH, OW](detail::Node& o) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                     double* gsrc = xn->grad.data() + size_t(nc * H * W);
                     const double* gdst = o.grad.data() + size_t(nc * OH * OW);
                     for (int y = 0; y < H; ++y) {
                       for (int x2 = 0; x2 < W; ++x2) {
                         const double* g0 = gdst + size_t(2 * y) * OW + 2 * x2;
                         gsrc[size_t(y) * W + x2] += g0[0] + g0[1] + g0[OW] + g0[OW + 1];
                       }
                     }
                   }
                 });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BnRunningStats& stats, Mode mode, bool update_stats,
                  double momentum, double eps) {
  require(x.ndim() == 4, "batch_norm: input must be NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 &&
              beta.dim(0) == C,
          "batch_norm: parameter shapes " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " do not match channels of " +
              shape_str(x.shape()));

  const int64_t P = int64_t(H) * W;
  const int64_t per_ch = int64_t(N) * P;
  const auto& xv = x.values();

  std::vector<double> mu(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  if (mode == Mode::Train) {
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const double* p = xv.data() + size_t(((int64_t(n) * C + c) * P));
        for (int64_t i = 0; i < P; ++i) s += p[i];
      }
      const double m = s / double(per_ch);
      double v = 0;
      for (int n = 0; n < N; ++n) {
        const double* p = xv.data() + size_t(((int64_t(n) * C + c) * P));
        for (int64_t i = 0; i < P; ++i) v += (p[i] - m) * (p[i] - m);
      }
      mu[size_t(c)] = m;
      var[size_t(c)] = v / double(per_ch);  // population variance
    }
    if (update_stats) {
      if (!stats.initialized) {
        stats.mean = mu;
        stats.var = var;
        stats.initialized = true;
      } else {
        for (int c = 0; c < C; ++c) {
          stats.mean[size_t(c)] =
              (1 - momentum) * stats.mean[size_t(c)] + momentum * mu[size_t(c)];
          stats.var[size_t(c)] =
              (1 - momentum) * stats.var[size_t(c)] + momentum * var[size_t(c)];
        }
      }
    }
  } else {
    if (!stats.initialized) {
      throw StateError("batch_norm: eval before any training update of running stats");
    }
    mu = stats.mean;
    var = stats.var;
  }

  std::vector<double> inv_s(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) inv_s[size_t(c)] = 1.0 / std::sqrt(var[size_t(c)] + eps);

  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* p = xv.data() + size_t((int64_t(n) * C + c) * P);
      double* q = out.data() + size_t((int64_t(n) * C + c) * P);
      const double m = mu[size_t(c)], is = inv_s[size_t(c)], g = gv[size_t(c)],
                   b = bv[size_t(c)];
      for (int64_t i = 0; i < P; ++i) q[i] = g * (p[i] - m) * is + b;
    }
  }

  auto xn = x.node(); auto gn = gamma.node(); auto btn = beta.node();
  const bool train = mode == Mode::Train;
  return make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, btn, mu = std::move(mu), inv_s = std::move(inv_s), N, C, P, per_ch,
       train](detail::Node& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (btn->requires_grad) btn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
          const double m = mu[size_t(c)], is = inv_s[size_t(c)];
          const double g = gn->val[size_t(c)];
          double sum_g = 0, sum_gx = 0;
          for (int n = 0; n < N; ++n) {
            const int64_t base = (int64_t(n) * C + c) * P;
            const double* gr = o.grad.data() + size_t(base);
            const double* xp = xn->val.data() + size_t(base);
            for (int64_t i = 0; i < P; ++i) {
              const double xh = (xp[i] - m) * is;
              sum_g += gr[i];
              sum_gx += gr[i] * xh;
            }
          }
          if (gn->requires_grad) gn->grad[size_t(c)] += sum_gx;
          if (btn->requires_grad) btn->grad[size_t(c)] += sum_g;
          if (!xn->requires_grad) continue;
          if (train) {
            // Batch statistics are functions of x; the mean/variance terms
            // feed back into every element of the channel.
            const double mean_g = sum_g / double(per_ch);
            const double mean_gx = sum_gx / double(per_ch);
            for (int n = 0; n < N; ++n) {
              const int64_t base = (int64_t(n) * C + c) * P;
              const double* gr = o.grad.data() + size_t(base);
              const double* xp = xn->val.data() + size_t(base);
              double* gx = xn->grad.data() + size_t(base);
              for (int64_t i = 0; i < P; ++i) {
                const double xh = (xp[i] - m) * is;
                gx[i] += g * is * (gr[i] - mean_g - xh * mean_gx);
              }
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const int64_t base = (int64_t(n) * C + c) * P;
              const double* gr = o.grad.data() + size_t(base);
              double* gx = xn->grad.data() + size_t(base);
              for (int64_t i = 0; i < P; ++i) gx[i] += gr[i] * g * is;
            }
          }
        }
      });
}

namespace {

// Shared core of GDN/IGDN on effective (already positive) parameters.
// inverse=false: u_i = w_i * d_i^(-1/2); inverse=true: u_i = w_i * d_i^(1/2),
// with d_i = beta_i + sum_j gamma_ij w_j^2 per spatial position.
Tensor gdn_core(const Tensor& x, const Tensor& beta, const Tensor& gamma,
                bool inverse) {
  require(x.ndim() == 4, "gdn: input must be NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(beta.ndim() == 1 && beta.dim(0) == C,
          "gdn: beta shape " + shape_str(beta.shape()) +
              " does not match channels of " + shape_str(x.shape()));
  require(gamma.ndim() == 2 && gamma.dim(0) == C && gamma.dim(1) == C,
          "gdn: gamma shape " + shape_str(gamma.shape()) +
              " does not match channels of " + shape_str(x.shape()));

  const int64_t P = int64_t(H) * W;
  const auto& xv = x.values();
  const auto& bv = beta.values();
  const auto& gv = gamma.values();

  std::vector<double> out(xv.size());
  std::vector<double> w(static_cast<size_t>(C)), dpow(static_cast<size_t>(C));
  for (int n = 0; n < N; ++n) {
    const int64_t nbase = int64_t(n) * C * P;
    for (int64_t q = 0; q < P; ++q) {
      for (int c = 0; c < C; ++c) w[size_t(c)] = xv[size_t(nbase + int64_t(c) * P + q)];
      for (int i = 0; i < C; ++i) {
        double d = bv[size_t(i)];
        const double* grow = gv.data() + size_t(int64_t(i) * C);
        for (int j = 0; j < C; ++j) d += grow[j] * w[size_t(j)] * w[size_t(j)];
        dpow[size_t(i)] = inverse ? std::sqrt(d) : 1.0 / std::sqrt(d);
      }
      for (int i = 0; i < C; ++i) {
        out[size_t(nbase + int64_t(i) * P + q)] = w[size_t(i)] * dpow[size_t(i)];
      }
    }
  }

  auto xn = x.node(); auto bn = beta.node(); auto gn = gamma.node();
  return make_op(
      x.shape(), std::move(out), {x, beta, gamma},
      [xn, bn, gn, N, C, P, inverse](detail::Node& o) {
        const bool gx = xn->requires_grad, gb = bn->requires_grad,
                   gg = gn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gb) bn->ensure_grad();
        if (gg) gn->ensure_grad();
        std::vector<double> w(static_cast<size_t>(C)), d(static_cast<size_t>(C)), t(static_cast<size_t>(C)), gr(static_cast<size_t>(C));
        for (int n = 0; n < N; ++n) {
          const int64_t nbase = int64_t(n) * C * P;
          for (int64_t q = 0; q < P; ++q) {
            for (int c = 0; c < C; ++c) {
              w[size_t(c)] = xn->val[size_t(nbase + int64_t(c) * P + q)];
              gr[size_t(c)] = o.grad[size_t(nbase + int64_t(c) * P + q)];
            }
            for (int i = 0; i < C; ++i) {
              double di = bn->val[size_t(i)];
              const double* grow = gn->val.data() + size_t(int64_t(i) * C);
              for (int j = 0; j < C; ++j) di += grow[j] * w[size_t(j)] * w[size_t(j)];
              d[size_t(i)] = di;
            }
            if (!inverse) {
              // u_i = w_i d_i^(-1/2); t_i = g_i w_i d_i^(-3/2)
              for (int i = 0; i < C; ++i) {
                t[size_t(i)] = gr[size_t(i)] * w[size_t(i)] /
                               (d[size_t(i)] * std::sqrt(d[size_t(i)]));
              }
              if (gx) {
                for (int l = 0; l < C; ++l) {
                  double acc = gr[size_t(l)] / std::sqrt(d[size_t(l)]);
                  double coup = 0;
                  for (int i = 0; i < C; ++i) {
                    coup += t[size_t(i)] * gn->val[size_t(int64_t(i) * C + l)];
                  }
                  xn->grad[size_t(nbase + int64_t(l) * P + q)] +=
                      acc - w[size_t(l)] * coup;
                }
              }
              if (gb) {
                for (int i = 0; i < C; ++i) bn->grad[size_t(i)] += -0.5 * t[size_t(i)];
              }
              if (gg) {
                for (int i = 0; i < C; ++i) {
                  const double f = -0.5 * t[size_t(i)];
                  double* grow = gn->grad.data() + size_t(int64_t(i) * C);
                  for (int j = 0; j < C; ++j) grow[j] += f * w[size_t(j)] * w[size_t(j)];
                }
              }
            } else {
              // u_i = w_i d_i^(1/2); s_i = g_i w_i d_i^(-1/2)
              for (int i = 0; i < C; ++i) {
                t[size_t(i)] = gr[size_t(i)] * w[size_t(i)] / std::sqrt(d[size_t(i)]);
              }
              if (gx) {
                for (int l = 0; l < C; ++l) {
                  double acc = gr[size_t(l)] * std::sqrt(d[size_t(l)]);
                  double coup = 0;
                  for (int i = 0; i < C; ++i) {
                    coup += t[size_t(i)] * gn->val[size_t(int64_t(i) * C + l)];
                  }
                  xn->grad[size_t(nbase + int64_t(l) * P + q)] +=
                      acc + w[size_t(l)] * coup;
                }
              }
              if (gb) {
                for (int i = 0; i < C; ++i) bn->grad[size_t(i)] += 0.5 * t[size_t(i)];
              }
              if (gg) {
                for (int i = 0; i < C; ++i) {
                  const double f = 0.5 * t[size_t(i)];
                  double* grow = gn->grad.data() + size_t(int64_t(i) * C);
                  for (int j = 0; j < C; ++j) grow[j] += f * w[size_t(j)] * w[size_t(j)];
                }
              }
            }
          }
        }
      });
}

}  // namespace

Tensor gdn(const Tensor& x, const Tensor& beta_raw, const Tensor& gamma_raw) {
  return gdn_core(x, square(clamp_min(beta_raw, 1e-6)), square(gamma_raw), false);
}

Tensor igdn(const Tensor& x, const Tensor& beta_raw, const Tensor& gamma_raw) {
  return gdn_core(x, square(clamp_min(beta_raw, 1e-6)), square(gamma_raw), true);
}

Tensor softmax(const Tensor& logits) {
  require(logits.ndim() == 2, "softmax: logits must be (N,K), got " +
                                  shape_str(logits.shape()));
  const int N = logits.dim(0), K = logits.dim(1);
  const auto& lv = logits.values();
  std::vector<double> out(lv.size());
  for (int n = 0; n < N; ++n) {
    const double* row = lv.data() + size_t(int64_t(n) * K);
    double* orow = out.data() + size_t(int64_t(n) * K);
    const double m = *std::max_element(row, row + K);
    double z = 0;
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      z += orow[k];
    }
    for (int k = 0; k < K; ++k) orow[k] /= z;
  }
  return Tensor::from(logits.shape(), std::move(out));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, "cross_entropy: logits must be (N,K), got " +
                                  shape_str(logits.shape()));
  const int N = logits.dim(0), K = logits.dim(1);
  require(int(labels.size()) == N,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(N) + " rows");
  for (int n = 0; n < N; ++n) {
    if (labels[size_t(n)] < 0 || labels[size_t(n)] >= K) {
      throw ConfigError("cross_entropy: label " +
                        std::to_string(labels[size_t(n)]) + " outside [0," +
                        std::to_string(K) + ") at row " + std::to_string(n));
    }
  }

  const auto& lv = logits.values();
  std::vector<double> probs(lv.size());
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    const double* row = lv.data() + size_t(int64_t(n) * K);
    double* prow = probs.data() + size_t(int64_t(n) * K);
    const double m = *std::max_element(row, row + K);
    double z = 0;
    for (int k = 0; k < K; ++k) {
      prow[k] = std::exp(row[k] - m);
      z += prow[k];
    }
    loss += std::log(z) - (row[labels[size_t(n)]] - m);
    for (int k = 0; k < K; ++k) prow[k] /= z;
  }
  loss /= double(N);

  auto ln = logits.node();
  return make_op({1}, {loss}, {logits},
                 [ln, probs = std::move(probs), labels, N, K](detail::Node& o) {
                   if (!ln->requires_grad) return;
                   ln->ensure_grad();
                   const double g = o.grad[0] / double(N);
                   for (int n = 0; n < N; ++n) {
                     double* gx = ln->grad.data() + size_t(int64_t(n) * K);
                     const double* p = probs.data() + size_t(int64_t(n) * K);
                     for (int k = 0; k < K; ++k) gx[k] += g * p[k];
                     gx[labels[size_t(n)]] -= g;
                   }
                 });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  check_same_shape("l1_loss", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  double s = 0;
  for (size_t i = 0; i < av.size(); ++i) s += std::fabs(av[i] - bv[i]);
  const double n = double(av.size());
  auto an = a.node(); auto bn = b.node();
  return make_op({1}, {s / n}, {a, b}, [an, bn, n](detail::Node& o) {
    const double g = o.grad[0] / n;
    const bool ga = an->requires_grad, gb = bn->requires_grad;
    if (ga) an->ensure_grad();
    if (gb) bn->ensure_grad();
    for (size_t i = 0; i < an->val.size(); ++i) {
      const double diff = an->val[i] - bn->val[i];
      const double sg = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
      if (ga) an->grad[i] += g * sg;
      if (gb) bn->grad[i] -= g * sg;
    }
  });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require(logits.ndim() == 2, "argmax_rows: input must be (N,K), got " +
                                  shape_str(logits.shape()));
  const int N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(N));
  for (int n = 0; n < N; ++n) {
    const double* row = logits.values().data() + size_t(int64_t(n) * K);
    out[size_t(n)] = int(std::max_element(row, row + K) - row);
  }
  return out;
}

// ---- layer objects ---------------------------------------------------------

ConvLayer::ConvLayer(std::string name, int in_ch, int out_ch, int stride,
                     int pad, Rng& rng)
    : Layer(std::move(name)), stride_(stride), pad_(pad) {
  weight = init({out_ch, in_ch, 3, 3}, InitScheme::kaiming(), rng);
  bias = Tensor::zeros({out_ch}, true);
}

ConvLayer::ConvLayer(std::string name, Tensor w, Tensor b, int stride, int pad)
    : Layer(std::move(name)), weight(std::move(w)), bias(std::move(b)),
      stride_(stride), pad_(pad) {}

Tensor ConvLayer::forward(const Tensor& x, Mode) {
  return conv2d(x, weight, bias, stride_, pad_);
}

Shape ConvLayer::out_shape(const Shape& in) const {
  const int oh = (in[2] + 2 * pad_ - weight.dim(2)) / stride_ + 1;
  const int ow = (in[3] + 2 * pad_ - weight.dim(3)) / stride_ + 1;
  return {in[0], out_ch(), oh, ow};
}

int64_t ConvLayer::macs(const Shape& in) const {
  const Shape o = out_shape(in);
  return int64_t(in_ch()) * out_ch() * weight.dim(2) * weight.dim(3) * o[2] * o[3];
}

void ConvLayer::collect_params(ParamList& out) {
  out.push_back({name_ + ".weight", weight});
  out.push_back({name_ + ".bias", bias});
}

BatchNormLayer::BatchNormLayer(std::string name, int channels)
    : Layer(std::move(name)) {
  gamma = Tensor::ones({channels}, true);
  beta = Tensor::zeros({channels}, true);
}

BatchNormLayer::BatchNormLayer(std::string name, Tensor g, Tensor b,
                               BnRunningStats s)
    : Layer(std::move(name)), gamma(std::move(g)), beta(std::move(b)),
      stats(std::move(s)) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  return batch_norm(x, gamma, beta, stats, mode, update_stats);
}

int64_t BatchNormLayer::macs(const Shape& in) const { return 2 * numel_of(in); }

void BatchNormLayer::collect_params(ParamList& out) {
  out.push_back({name_ + ".gamma", gamma});
  out.push_back({name_ + ".beta", beta});
}

PreluLayer::PreluLayer(std::string name, int channels) : Layer(std::move(name)) {
  slope = Tensor::full({channels}, 0.25, true);
}

PreluLayer::PreluLayer(std::string name, Tensor s)
    : Layer(std::move(name)), slope(std::move(s)) {}

void PreluLayer::collect_params(ParamList& out) {
  out.push_back({name_ + ".slope", slope});
}

GdnLayer::GdnLayer(std::string name, int channels, bool inverse)
    : Layer(std::move(name)), inverse_(inverse) {
  // Effective beta starts at 1, effective gamma at 0.1 on the diagonal.
  beta_raw = Tensor::ones({channels}, true);
  gamma_raw = Tensor::zeros({channels, channels}, true);
  const double diag = std::sqrt(0.1);
  for (int c = 0; c < channels; ++c) {
    gamma_raw.values()[size_t(int64_t(c) * channels + c)] = diag;
  }
}

GdnLayer::GdnLayer(std::string name, Tensor b, Tensor g, bool inverse)
    : Layer(std::move(name)), beta_raw(std::move(b)), gamma_raw(std::move(g)),
      inverse_(inverse) {}

Tensor GdnLayer::forward(const Tensor& x, Mode) {
  return inverse_ ? igdn(x, beta_raw, gamma_raw) : gdn(x, beta_raw, gamma_raw);
}

void GdnLayer::collect_params(ParamList& out) {
  out.push_back({name_ + ".beta", beta_raw});
  out.push_back({name_ + ".gamma", gamma_raw});
}

Shape MaxPoolLayer::out_shape(const Shape& in) const {
  return {in[0], in[1], in[2] / 2, in[3] / 2};
}

Shape UpsampleLayer::out_shape(const Shape& in) const {
  return {in[0], in[1], in[2] * 2, in[3] * 2};
}

Shape FlattenLayer::out_shape(const Shape& in) const {
  int64_t rest = 1;
  for (size_t i = 1; i < in.size(); ++i) rest *= in[i];
  return {in[0], int(rest)};
}

LinearLayer::LinearLayer(std::string name, int din, int dout, Rng& rng,
                         const InitScheme& scheme)
    : Layer(std::move(name)) {
  weight = init({dout, din}, scheme, rng);
  bias = Tensor::zeros({dout}, true);
}

LinearLayer::LinearLayer(std::string name, Tensor w, Tensor b)
    : Layer(std::move(name)), weight(std::move(w)), bias(std::move(b)) {}

Shape LinearLayer::out_shape(const Shape& in) const {
  return {in[0], weight.dim(0)};
}

int64_t LinearLayer::macs(const Shape&) const {
  return int64_t(weight.dim(0)) * weight.dim(1);
}

void LinearLayer::collect_params(ParamList& out) {
  out.push_back({name_ + ".weight", weight});
  out.push_back({name_ + ".bias", bias});
}

Tensor Sequential::forward(const Tensor& x, Mode mode) const {
  Tensor h = x;
  for (const auto& l : layers_) h = l->forward(h, mode);
  return h;
}

Shape Sequential::out_shape(Shape in) const {
  for (const auto& l : layers_) in = l->out_shape(in);
  return in;
}

int64_t Sequential::macs(Shape in) const {
  int64_t total = 0;
  for (const auto& l : layers_) {
    total += l->macs(in);
    in = l->out_shape(in);
  }
  return total;
}

ParamList Sequential::params() const {
  ParamList out;
  for (const auto& l : layers_) l->collect_params(out);
  return out;
}

void Sequential::set_bn_stats_update(bool on) const {
  for (const auto& l : layers_) {
    if (auto* bn = dynamic_cast<BatchNormLayer*>(l.get())) bn->update_stats = on;
  }
}

}  // namespace splitnn
