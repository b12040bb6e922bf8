#pragma once

#include <cstddef>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow {

enum class BetaSpacing {
  kLinear,        // beta interpolated linearly
  kScaledLinear,  // sqrt(beta) interpolated linearly, then squared
};

// Variance schedule for T diffusion steps. Steps are 1-based; alpha_bar(0)
// is defined as 1 (the clean signal).
class NoiseSchedule {
 public:
  NoiseSchedule(std::size_t steps, double beta_start, double beta_end,
                BetaSpacing spacing = BetaSpacing::kLinear);
  // Arbitrary betas, validated to lie in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas);

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const;
  double alpha(std::size_t t) const;
  double alpha_bar(std::size_t t) const;  // t in [0, T]

  const std::vector<double>& betas() const { return beta_; }

 private:
  void build();

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule linear_betas(std::size_t steps, double beta_start, double beta_end);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& s);
// Per-sample steps: z0/eps are [N, ...] and t has N entries.
Tensor forward_diffuse(const Tensor& z0, const std::vector<std::size_t>& t, const Tensor& eps,
                       const NoiseSchedule& s);

// Mean of p(z_{t-1} | z_t): (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
// The matching reverse-step variance is beta_t.
Tensor posterior_mean(const Tensor& z_t, const Tensor& eps_hat, std::size_t t,
                      const NoiseSchedule& s);

// abar_t / (1 - abar_t)
double snr(std::size_t t, const NoiseSchedule& s);

}  // namespace mflow
