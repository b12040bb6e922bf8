#include "mflow/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "mflow/errors.hpp"
#include "mflow/trainer.hpp"

namespace mflow {

namespace {

constexpr std::uint64_t kSourceNoiseStream = 0xc0de;

void require_step(std::size_t t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps()) {
    throw ParameterError("step " + std::to_string(t) + " outside [1, " +
                         std::to_string(s.steps()) + "]");
  }
}

}  // namespace

void SamplerConfig::validate(std::size_t schedule_steps) const {
  if (steps < 1 || steps > schedule_steps) {
    throw ParameterError("sampler steps must lie in [1, " + std::to_string(schedule_steps) + "]");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw ParameterError("eta must lie in [0, 1]");
  if (!(guidance_scale >= 0.0)) throw ParameterError("guidance scale must be non-negative");
}

Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double s) {
  if (eps_cond.shape() != eps_uncond.shape()) {
    throw ShapeError("guidance inputs differ in shape: " + shape_str(eps_cond.shape()) + " vs " +
                     shape_str(eps_uncond.shape()));
  }
  if (s == 1.0) return eps_cond;
  if (s == 0.0) return eps_uncond;
  return add(eps_uncond, scale(sub(eps_cond, eps_uncond), s));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, std::size_t t_prev,
                 double eta, const NoiseSchedule& s, const Tensor* noise) {
  require_step(t, s);
  if (t_prev >= t) {
    throw ParameterError("DDIM steps must descend: " + std::to_string(t) + " -> " +
                         std::to_string(t_prev));
  }
  if (z_t.shape() != eps_hat.shape()) {
    throw ShapeError("eps_hat " + shape_str(eps_hat.shape()) + " does not match z_t " +
                     shape_str(z_t.shape()));
  }
  const double ab = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t_prev);
  const double sigma =
      eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  Tensor x0 = scale(sub(z_t, scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  Tensor out = add(scale(x0, std::sqrt(ab_prev)), scale(eps_hat, dir));
  if (sigma > 0.0) {
    if (!noise) throw ParameterError("DDIM with eta > 0 needs a noise tensor");
    if (noise->shape() != z_t.shape()) throw ShapeError("noise shape differs from z_t");
    out = add(out, scale(*noise, sigma));
  }
  return out;
}

Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& s,
                 const Tensor* noise) {
  require_step(t, s);
  Tensor mu = posterior_mean(z_t, eps_hat, t, s);
  if (t == 1) return mu;
  if (!noise) throw ParameterError("DDPM step above t = 1 needs a noise tensor");
  if (noise->shape() != z_t.shape()) throw ShapeError("noise shape differs from z_t");
  return add(mu, scale(*noise, std::sqrt(s.beta(t))));
}

std::vector<std::size_t> step_grid(std::size_t schedule_steps, std::size_t steps) {
  if (steps < 1 || steps > schedule_steps) {
    throw ParameterError("cannot pick " + std::to_string(steps) + " steps from " +
                         std::to_string(schedule_steps));
  }
  if (steps == 1) return {schedule_steps};
  std::vector<std::size_t> grid(steps);
  const double span = static_cast<double>(schedule_steps - 1);
  for (std::size_t i = 0; i < steps; ++i) {
    const double pos = 1.0 + span * static_cast<double>(i) / static_cast<double>(steps - 1);
    grid[steps - 1 - i] = static_cast<std::size_t>(std::llround(pos));
  }
  return grid;
}

Tensor step_noise(const Shape& shape, std::uint64_t seed, std::uint64_t flow, std::uint64_t step) {
  return Tensor::from(shape, CounterNoise(derive_key(seed, flow, step)).normals(shape_numel(shape)));
}

Tensor sample(const EpsModel& model, const Shape& shape, const ContextFn& context,
              const SamplerConfig& cfg, const NoiseSchedule& s, std::uint64_t flow) {
  cfg.validate(s.steps());
  NoGradGuard guard;
  const auto grid = step_grid(s.steps(), cfg.steps);
  Tensor z = step_noise(shape, cfg.seed, flow, 0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::size_t t = grid[i];
    const std::size_t t_prev = i + 1 < grid.size() ? grid[i + 1] : 0;
    const std::vector<std::size_t> tv(shape[0], t);
    Tensor eps = model.predict_eps(z, tv, nullptr);
    if (context) {
      Tensor ctx = context(z, t);
      if (ctx) eps = cfg_eps(model.predict_eps(z, tv, &ctx), eps, cfg.guidance_scale);
    }
    if (cfg.eta > 0.0) {
      Tensor noise = step_noise(shape, cfg.seed, flow, i + 1);
      z = ddim_step(z, eps, t, t_prev, cfg.eta, s, &noise);
    } else {
      z = ddim_step(z, eps, t, t_prev, 0.0, s, nullptr);
    }
  }
  return z;
}

Tensor sample(const EpsModel& model, const Shape& shape, const Tensor* context,
              const SamplerConfig& cfg, const NoiseSchedule& s, std::uint64_t flow) {
  ContextFn fn;
  if (context) {
    Tensor ctx = *context;
    fn = [ctx](const Tensor&, std::size_t) { return ctx; };
  }
  return sample(model, shape, fn, cfg, s, flow);
}

Tensor sample_ddpm(const EpsModel& model, const Shape& shape, const ContextFn& context,
                   double guidance_scale, std::uint64_t seed, const NoiseSchedule& s,
                   std::uint64_t flow) {
  NoGradGuard guard;
  Tensor z = step_noise(shape, seed, flow, 0);
  for (std::size_t t = s.steps(); t >= 1; --t) {
    const std::vector<std::size_t> tv(shape[0], t);
    Tensor eps = model.predict_eps(z, tv, nullptr);
    if (context) {
      Tensor ctx = context(z, t);
      if (ctx) eps = cfg_eps(model.predict_eps(z, tv, &ctx), eps, guidance_scale);
    }
    if (t > 1) {
      Tensor noise = step_noise(shape, seed, flow, s.steps() - t + 1);
      z = ddpm_step(z, eps, t, s, &noise);
    } else {
      z = ddpm_step(z, eps, t, s, nullptr);
    }
  }
  return z;
}

Tensor guided_sample(const System& system, const std::string& target, const std::string& source,
                     std::span<const Sample> source_samples, const SamplerConfig& cfg,
                     std::uint64_t flow) {
  const ModalitySpec& spec = system.registry().get(target);
  const std::size_t n = source_samples.size();
  if (n == 0) throw ParameterError("guided_sample needs at least one source sample");
  NoGradGuard guard;
  Tensor z0s = encode_latents(system.codecs(source), source_samples);
  Tensor tokens = frozen_tokens(system, source, source_samples);
  Tensor eps_s = Tensor::from(
      z0s.shape(),
      CounterNoise(derive_key(cfg.seed, kSourceNoiseStream, flow)).normals(z0s.numel()));
  const NoiseSchedule& sched = system.schedule();
  ContextFn fn = [&](const Tensor&, std::size_t t) {
    const std::vector<std::size_t> tv(n, t);
    return guided_context(system, target, source, forward_diffuse(z0s, tv, eps_s, sched), tokens);
  };
  return sample(system.diffuser(target),
                {n, spec.latent.channels, spec.latent.height, spec.latent.width}, fn, cfg, sched,
                flow);
}

std::map<std::string, Tensor> joint_sample(const System& system,
                                           const std::vector<std::string>& modalities,
                                           std::size_t batch, const SamplerConfig& cfg) {
  const NoiseSchedule& s = system.schedule();
  cfg.validate(s.steps());
  if (modalities.empty()) throw ParameterError("joint_sample needs at least one modality");
  if (batch == 0) throw ParameterError("joint_sample needs a positive batch");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    if (!system.registry().contains(modalities[i])) {
      throw ParameterError("joint_sample: unknown modality '" + modalities[i] + "'");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (modalities[i] == modalities[j]) {
        throw ParameterError("joint_sample: modality '" + modalities[i] + "' listed twice");
      }
    }
  }
  NoGradGuard guard;
  const std::size_t k = modalities.size();
  std::vector<Shape> shapes(k);
  std::vector<Tensor> z(k);
  for (std::size_t i = 0; i < k; ++i) {
    const LatentShape& ls = system.registry().get(modalities[i]).latent;
    shapes[i] = {batch, ls.channels, ls.height, ls.width};
    z[i] = step_noise(shapes[i], cfg.seed, i, 0);
  }
  const auto grid = step_grid(s.steps(), cfg.steps);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const std::size_t t = grid[g];
    const std::size_t t_prev = g + 1 < grid.size() ? grid[g + 1] : 0;
    const std::vector<std::size_t> tv(batch, t);
    const double ab = s.alpha_bar(t);
    std::vector<Tensor> eps_u(k), tokens(k), eps_g(k);
    for (std::size_t i = 0; i < k; ++i) {
      eps_u[i] = system.diffuser(modalities[i]).predict_eps(z[i], tv, nullptr);
    }
    if (k > 1) {
      for (std::size_t i = 0; i < k; ++i) {
        Tensor x0 = scale(sub(z[i], scale(eps_u[i], std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
        const auto decoded = decode_latents(system.codecs(modalities[i]), x0);
        tokens[i] = frozen_tokens(system, modalities[i], decoded);
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      Tensor eps = eps_u[i];
      if (k > 1) {
        std::vector<Tensor> parts;
        for (std::size_t p = 0; p < k; ++p) {
          if (p == i) continue;
          parts.push_back(guided_context(system, modalities[i], modalities[p], z[p], tokens[p]));
        }
        Tensor ctx = parts.size() == 1 ? parts.front() : concat(parts, 1);
        eps = cfg_eps(system.diffuser(modalities[i]).predict_eps(z[i], tv, &ctx), eps_u[i],
                      cfg.guidance_scale);
      }
      eps_g[i] = eps;
    }
    // Step barrier: every flow advances only after all contexts were built.
    for (std::size_t i = 0; i < k; ++i) {
      const Tensor& eps = eps_g[i];
      if (cfg.eta > 0.0) {
        Tensor noise = step_noise(shapes[i], cfg.seed, i, g + 1);
        z[i] = ddim_step(z[i], eps, t, t_prev, cfg.eta, s, &noise);
      } else {
        z[i] = ddim_step(z[i], eps, t, t_prev, 0.0, s, nullptr);
      }
    }
  }
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace(modalities[i], z[i]);
  return out;
}

}  // namespace mflow
