#pragma once

// Training losses: epsilon regression, symmetric InfoNCE against a hub,
// Barlow-style visual-invariant loss and the cross-guided variant of the
// epsilon loss.

#include <cstddef>
#include <vector>

#include "mflow/denoiser.hpp"
#include "mflow/modality.hpp"
#include "mflow/schedule.hpp"
#include "mflow/tensor.hpp"

namespace mflow {

// mean((eps - eps_theta(forward_diffuse(z0, t, eps), t, context))^2)
Tensor diffusion_loss(const EpsModel& model, const Tensor& z0, const std::vector<std::size_t>& t,
                      const Tensor& eps, const NoiseSchedule& schedule, const Tensor* context);

// Learnable temperature stored as log(tau) and clamped on use.
struct Temperature {
  static constexpr double kDefault = 0.07;
  static constexpr double kMin = 0.01;
  static constexpr double kMax = 0.5;
  Tensor log_tau;  // scalar parameter
  Tensor value() const;
};

// Rows of zA and zB are unit-norm embeddings paired by index.
struct ContrastiveBatch {
  Tensor zA;   // [N, d]
  Tensor zB;   // [N, d]
  Tensor tau;  // scalar tensor > 0
};

// Sum of the A->B and B->A cross-entropies, each averaged over anchors.
Tensor infonce_central(const ContrastiveBatch& batch);
Tensor infonce_central(const Tensor& zA, const Tensor& zB, double tau);

struct ViDiagnostics {
  std::size_t degenerate_columns = 0;
};

// Zero-mean, unit-L2-norm columns over the batch axis; columns with variance
// below 1e-8 are floored and counted in `diag`.
Tensor vi_normalize(const Tensor& z, ViDiagnostics* diag = nullptr);

struct ViewPair {
  static constexpr double kDefaultLambda = 5e-3;
  Tensor z1;  // [K, d]
  Tensor z2;  // [K, d]
  double lambda1 = kDefaultLambda;
};

// C = norm(z1)^T norm(z2); mean_i (1 - C_ii)^2 + lambda1 * mean_{i != j} C_ij^2.
Tensor vi_barlow(const ViewPair& pair, ViDiagnostics* diag = nullptr);
// Same loss evaluated directly on a cross-correlation matrix.
Tensor barlow_from_correlation(const Tensor& c, double lambda1);

// diffusion_loss with context V_B([z_t^B, f_B]).
Tensor cross_guided_loss(const EpsModel& model_a, const Tensor& z0_a,
                         const std::vector<std::size_t>& t, const Tensor& eps,
                         const NoiseSchedule& schedule, const Tensor& z_t_b,
                         const GuidedAdaptation& f_b, const ContextEncoder& v_b);

// Label-preserving augmentations for the two views of the VI loss.
// Images: random horizontal flip, +-1 pixel translation (edge clamped),
// Gaussian noise sigma 0.05, clipped to [0, 1]. Text: token dropout p = 0.1.
Sample augment(const Sample& x, Rng& rng);

}  // namespace mflow
