#include "splitnn/channel.hpp"

#include <cmath>

#include "splitnn/error.hpp"

namespace splitnn {

double snr_to_sigma2(double snr_db, double P) {
  return P / std::pow(10.0, snr_db / 10.0);
}

double capacity(double snr_db) {
  return 0.5 * std::log2(1.0 + 1.0 / snr_to_sigma2(snr_db, 1.0));
}

Tensor power_normalize(const Tensor& x, double P, bool* zero_row) {
  if (x.ndim() != 2) {
    throw ShapeError("power_normalize: input must be (N,B), got " +
                     shape_str(x.shape()));
  }
  const int N = x.dim(0), B = x.dim(1);
  const auto& xv = x.values();

  std::vector<double> scale(static_cast<size_t>(N));
  if (zero_row) *zero_row = false;
  for (int n = 0; n < N; ++n) {
    double ss = 0;
    const double* row = xv.data() + size_t(int64_t(n) * B);
    for (int i = 0; i < B; ++i) ss += row[i] * row[i];
    if (ss == 0.0) {
      scale[size_t(n)] = 1.0;
      if (zero_row) *zero_row = true;
    } else {
      scale[size_t(n)] = std::sqrt(P * double(B) / ss);
    }
  }

  std::vector<double> out(xv.size());
  for (int n = 0; n < N; ++n) {
    const double s = scale[size_t(n)];
    const double* row = xv.data() + size_t(int64_t(n) * B);
    double* orow = out.data() + size_t(int64_t(n) * B);
    for (int i = 0; i < B; ++i) orow[i] = row[i] * s;
  }

  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x},
                 [xn, scale = std::move(scale), N, B, P](detail::Node& o) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int n = 0; n < N; ++n) {
                     const int64_t base = int64_t(n) * B;
                     const double* row = xn->val.data() + size_t(base);
                     const double* gr = o.grad.data() + size_t(base);
                     double* gx = xn->grad.data() + size_t(base);
                     const double s = scale[size_t(n)];
                     double ss = 0, dot = 0;
                     for (int i = 0; i < B; ++i) {
                       ss += row[i] * row[i];
                       dot += gr[i] * row[i];
                     }
                     if (ss == 0.0) {
                       // Identity on the degenerate row.
                       for (int i = 0; i < B; ++i) gx[i] += gr[i];
                       continue;
                     }
                     // y_i = x_i * sqrt(PB) * ss^(-1/2)
                     const double c = std::sqrt(P * double(B)) / (ss * std::sqrt(ss));
                     for (int i = 0; i < B; ++i) {
                       gx[i] += s * gr[i] - c * row[i] * dot;
                     }
                   }
                 });
}

AwgnChannel::AwgnChannel(double snr_db, uint64_t seed)
    : snr_db_(snr_db), sigma2_(snr_to_sigma2(snr_db, 1.0)), rng_(seed) {}

Tensor AwgnChannel::transmit(const Tensor& x) {
  if (sigma2_ == 0.0) return add(x, 0.0);

  const double stddev = std::sqrt(sigma2_);
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + rng_.normal(0.0, stddev);

  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](detail::Node& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
}

}  // namespace splitnn
