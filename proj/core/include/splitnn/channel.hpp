#pragma once

#include <cstdint>

#include "splitnn/rng.hpp"
#include "splitnn/tensor.hpp"

namespace splitnn {

// sigma^2 = P / 10^(snr_db/10)
double snr_to_sigma2(double snr_db, double P = 1.0);

// Shannon capacity in bits per real symbol at P = 1:
// C = 0.5 * log2(1 + P/sigma^2)
double capacity(double snr_db);

// Scales each row of (N,B) to satisfy (1/B) * sum(x^2) = P with equality,
// differentiably through the scale factor. An all-zero row is passed through
// unchanged; when any row is zero and zero_row is non-null, *zero_row is set.
Tensor power_normalize(const Tensor& x, double P = 1.0,
                       bool* zero_row = nullptr);

// y = x + z with z ~ iid N(0, sigma2) drawn from an owned generator; the
// noise is a constant for the backward pass. sigma2 == 0 (snr_db = +inf)
// short-circuits to y = x without consuming generator state.
class AwgnChannel {
 public:
  AwgnChannel(double snr_db, uint64_t seed);

  Tensor transmit(const Tensor& x);

  double snr_db() const { return snr_db_; }
  double sigma2() const { return sigma2_; }
  void reseed(uint64_t seed) { rng_ = Rng(seed); }
  Rng& rng() { return rng_; }

 private:
  double snr_db_;
  double sigma2_;
  Rng rng_;
};

}  // namespace splitnn
