#pragma once

// Independent reference implementations used by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mflow/denoiser.hpp"
#include "mflow/schedule.hpp"

namespace mflow::oracle {

// Exact noise predictor for data z0 ~ N(mu, sd^2), applied elementwise.
class GaussianEps final : public EpsModel {
 public:
  GaussianEps(const NoiseSchedule& s, double mu, double sd) : s_(s), mu_(mu), var_(sd * sd) {}

  Tensor predict_eps(const Tensor& z_t, std::span<const std::size_t> t,
                     const Tensor*) const override {
    const std::size_t per = z_t.numel() / t.size();
    std::vector<double> out(z_t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double ab = s_.alpha_bar(t[i / per]);
      const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
      out[i] = sn * (z_t[i] - sa * mu_) / (ab * var_ + 1.0 - ab);
    }
    return Tensor::from(z_t.shape(), std::move(out));
  }

 private:
  const NoiseSchedule& s_;
  double mu_;
  double var_;
};

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

// Critical value at level alpha = 0.01 (asymptotic).
inline double ks_critical_1pct(std::size_t n, std::size_t m) {
  const double c = std::sqrt(-0.5 * std::log(0.01 / 2.0));
  return c * std::sqrt(static_cast<double>(n + m) / (static_cast<double>(n) * m));
}

// Straightforward PSNR in long double.
inline double psnr(std::span<const double> a, std::span<const double> b, double peak = 1.0) {
  long double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    se += d * d;
  }
  const long double mse = se / a.size();
  if (mse == 0) return 99.0;
  return std::min(99.0, static_cast<double>(10.0L * std::log10(peak * peak / mse)));
}

// SSIM over all 8x8 windows at stride 1 with uniform weights, evaluated
// window by window in long double (no running sums).
inline double ssim(std::span<const double> a, std::span<const double> b, std::size_t h,
                   std::size_t w, double peak = 1.0) {
  const long double c1 = (0.01L * peak) * (0.01L * peak);
  const long double c2 = (0.03L * peak) * (0.03L * peak);
  const std::size_t k = 8;
  long double total = 0;
  std::size_t windows = 0;
  for (std::size_t y = 0; y + k <= h; ++y) {
    for (std::size_t x = 0; x + k <= w; ++x) {
      long double ma = 0, mb = 0;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          ma += a[(y + dy) * w + x + dx];
          mb += b[(y + dy) * w + x + dx];
        }
      }
      ma /= k * k;
      mb /= k * k;
      long double va = 0, vb = 0, cov = 0;
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long double da = a[(y + dy) * w + x + dx] - ma;
          const long double db = b[(y + dy) * w + x + dx] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      }
      va /= k * k;
      vb /= k * k;
      cov /= k * k;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return static_cast<double>(total / windows);
}

}  // namespace mflow::oracle
