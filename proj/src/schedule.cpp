#include "mflow/schedule.hpp"

#include <cmath>
#include <string>

#include "mflow/errors.hpp"

namespace mflow {

namespace {

void check_step(std::size_t t, const NoiseSchedule& s, bool allow_zero = false) {
  if ((t == 0 && !allow_zero) || t > s.steps()) {
    throw ParameterError("diffusion step " + std::to_string(t) + " outside [" +
                         (allow_zero ? "0" : "1") + ", " + std::to_string(s.steps()) + "]");
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

NoiseSchedule::NoiseSchedule(std::size_t steps, double beta_start, double beta_end,
                             BetaSpacing spacing) {
  if (steps < 1) throw ParameterError("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ParameterError("schedule endpoints must satisfy 0 < beta0 <= betaT < 1, got " +
                         std::to_string(beta_start) + ", " + std::to_string(beta_end));
  }
  beta_.resize(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    if (spacing == BetaSpacing::kLinear) {
      beta_[i] = beta_start + frac * (beta_end - beta_start);
    } else {
      const double r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
      beta_[i] = r * r;
    }
  }
  build();
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.empty()) throw ParameterError("schedule needs at least one step");
  for (double b : beta_) {
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("beta outside (0, 1): " + std::to_string(b));
  }
  build();
}

void NoiseSchedule::build() {
  alpha_.resize(beta_.size());
  alpha_bar_.resize(beta_.size() + 1);
  alpha_bar_[0] = 1.0;
  for (std::size_t i = 0; i < beta_.size(); ++i) {
    alpha_[i] = 1.0 - beta_[i];
    alpha_bar_[i + 1] = alpha_bar_[i] * alpha_[i];
  }
}

double NoiseSchedule::beta(std::size_t t) const {
  check_step(t, *this);
  return beta_[t - 1];
}

double NoiseSchedule::alpha(std::size_t t) const {
  check_step(t, *this);
  return alpha_[t - 1];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
  check_step(t, *this, true);
  return alpha_bar_[t];
}

NoiseSchedule linear_betas(std::size_t steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end, BetaSpacing::kLinear);
}

Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& s) {
  check_same_shape(z0, eps, "forward_diffuse");
  check_step(t, s);
  const double ab = s.alpha_bar(t);
  return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor forward_diffuse(const Tensor& z0, const std::vector<std::size_t>& t, const Tensor& eps,
                       const NoiseSchedule& s) {
  check_same_shape(z0, eps, "forward_diffuse");
  if (z0.dim() == 0 || z0.extent(0) != t.size()) {
    throw ShapeError("forward_diffuse: " + std::to_string(t.size()) +
                     " steps for batch shape " + shape_str(z0.shape()));
  }
  const std::size_t n = t.size();
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    check_step(t[i], s);
    a[i] = std::sqrt(s.alpha_bar(t[i]));
    b[i] = std::sqrt(1.0 - s.alpha_bar(t[i]));
  }
  const std::size_t per = z0.numel() / n;
  Tensor flat_z = z0.reshape({n, per});
  Tensor flat_e = eps.reshape({n, per});
  Tensor out = add(mul(flat_z, Tensor::from({n, 1}, a)), mul(flat_e, Tensor::from({n, 1}, b)));
  return out.reshape(z0.shape());
}

Tensor posterior_mean(const Tensor& z_t, const Tensor& eps_hat, std::size_t t,
                      const NoiseSchedule& s) {
  check_same_shape(z_t, eps_hat, "posterior_mean");
  check_step(t, s);
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  return scale(sub(z_t, scale(eps_hat, coef)), 1.0 / std::sqrt(s.alpha(t)));
}

double snr(std::size_t t, const NoiseSchedule& s) {
  check_step(t, s);
  const double ab = s.alpha_bar(t);
  return ab / (1.0 - ab);
}

}  // namespace mflow
