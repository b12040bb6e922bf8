#pragma once

// DDPM / DDIM sampling with classifier-free guidance, plus joint sampling
// of several flows that condition each other at every step.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mflow/denoiser.hpp"
#include "mflow/schedule.hpp"
#include "mflow/system.hpp"

namespace mflow {

struct SamplerConfig {
  std::size_t steps = 50;
  double eta = 1.0;
  double guidance_scale = 2.0;
  std::uint64_t seed = 0;
  // ParameterError unless steps >= 1, eta in [0, 1] and scale >= 0.
  void validate(std::size_t schedule_steps) const;
};

// eps_uncond + s (eps_cond - eps_uncond)
Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double s);

// Implicit step t -> t_prev (t_prev may be 0). `noise` is required when
// eta > 0 and ignored otherwise.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, std::size_t t_prev,
                 double eta, const NoiseSchedule& s, const Tensor* noise);

// Ancestral step t -> t-1 with variance beta_t; no noise is added at t = 1.
Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& s,
                 const Tensor* noise);

// Descending uniform-stride subsequence of [1, T] that contains T and 1
// (just T when steps == 1).
std::vector<std::size_t> step_grid(std::size_t schedule_steps, std::size_t steps);

// Deterministic per-(seed, flow, step) standard normals; step 0 is the
// initial latent.
Tensor step_noise(const Shape& shape, std::uint64_t seed, std::uint64_t flow, std::uint64_t step);

// Context for the current noisy latent and step; an undefined tensor means
// unconditional.
using ContextFn = std::function<Tensor(const Tensor& z_t, std::size_t t)>;

// DDIM over step_grid(T, cfg.steps) from pure noise of `shape`. With a
// context, every step evaluates conditional and unconditional predictions and
// combines them with cfg_eps.
Tensor sample(const EpsModel& model, const Shape& shape, const ContextFn& context,
              const SamplerConfig& cfg, const NoiseSchedule& s, std::uint64_t flow = 0);
Tensor sample(const EpsModel& model, const Shape& shape, const Tensor* context,
              const SamplerConfig& cfg, const NoiseSchedule& s, std::uint64_t flow = 0);

// Full-length ancestral sampling (T model evaluations).
Tensor sample_ddpm(const EpsModel& model, const Shape& shape, const ContextFn& context,
                   double guidance_scale, std::uint64_t seed, const NoiseSchedule& s,
                   std::uint64_t flow = 0);

// Generates `target` latents conditioned on clean samples of `source`: at
// step t the context is V_source([z_t^source, f_source]) with z_t^source the
// forward-diffused source latent (fixed noise) and f_source built from the
// source's prompt-encoder features.
Tensor guided_sample(const System& system, const std::string& target, const std::string& source,
                     std::span<const Sample> source_samples, const SamplerConfig& cfg,
                     std::uint64_t flow = 0);

// Joint generation of `batch` samples for each listed modality. All flows
// share one step grid. At each step every flow's unconditional prediction
// yields a clean estimate; partners' estimates are decoded and re-encoded into
// adaptation tokens, and each flow is conditioned on the concatenation of
// V_p([z_t^p, f_p]) over its partners p. Flow i uses noise stream i.
std::map<std::string, Tensor> joint_sample(const System& system,
                                           const std::vector<std::string>& modalities,
                                           std::size_t batch, const SamplerConfig& cfg);

// Decodes [N, C, H, W] latents through the modality's autoencoder.

}  // namespace mflow
