#include "mflow/evaluate.hpp"

#include <algorithm>

#include "mflow/errors.hpp"
#include "mflow/metrics.hpp"
#include "mflow/objectives.hpp"
#include "mflow/trainer.hpp"

namespace mflow {

namespace {

constexpr std::uint64_t kEvalStream = 0xe7a1;

}  // namespace

std::vector<std::pair<std::string, std::string>> configured_pairs(const Settings& s) {
  std::vector<std::pair<std::string, std::string>> out;
  auto add = [&](const std::pair<std::string, std::string>& p) {
    for (const auto& q : out) {
      if ((q.first == p.first && q.second == p.second) ||
          (q.first == p.second && q.second == p.first)) {
        return;
      }
    }
    out.push_back(p);
  };
  for (const auto& p : s.align_pairs) add(p);
  for (const auto& p : s.flow_pairs) add(p);
  return out;
}

std::vector<PairedDataset> generate_training_sets(const Settings& s) {
  std::vector<PairedDataset> out;
  const auto pairs = configured_pairs(s);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    out.push_back(make_pairs(pairs[k].first, pairs[k].second, s.seed,
                             train_scene_ids(k, s.train_pairs)));
  }
  return out;
}

PairedDataset validation_pairs(const Settings& s, const std::string& a, const std::string& b,
                               std::size_t count) {
  return make_pairs(a, b, s.seed, val_scene_ids(count));
}

double retrieval_accuracy(const System& system, const std::string& a, const std::string& b,
                          std::size_t count) {
  const PairedDataset ds = validation_pairs(system.settings(), a, b, count);
  NoGradGuard guard;
  Tensor za = system.codecs(a).encoder->encode(ds.xa);
  Tensor zb = system.codecs(b).encoder->encode(ds.xb);
  return retrieval_topk(za, zb, 1);
}

GuidanceGap guidance_gap(const System& system, const std::string& a, const std::string& b,
                         std::size_t count) {
  const Settings& st = system.settings();
  const PairedDataset ds = validation_pairs(st, a, b, count);
  const NoiseSchedule& sched = system.schedule();
  NoGradGuard guard;
  Rng rng(derive_key(st.seed, kEvalStream, system.registry().index_of(a),
                     system.registry().index_of(b)));
  Tensor z0a = encode_latents(system.codecs(a), ds.xa);
  Tensor z0b = encode_latents(system.codecs(b), ds.xb);
  std::vector<std::size_t> t(count);
  for (auto& v : t) v = 1 + static_cast<std::size_t>(rng.below(sched.steps()));
  Tensor eps_a = Tensor::from(z0a.shape(), rng.normals(z0a.numel()));
  Tensor eps_b = Tensor::from(z0b.shape(), rng.normals(z0b.numel()));
  Tensor zta = forward_diffuse(z0a, t, eps_a, sched);
  Tensor ztb = forward_diffuse(z0b, t, eps_b, sched);
  Tensor ctx_a = guided_context(system, a, b, ztb, frozen_tokens(system, b, ds.xb));
  Tensor ctx_b = guided_context(system, b, a, zta, frozen_tokens(system, a, ds.xa));
  const DiffuserModel& ma = system.diffuser(a);
  const DiffuserModel& mb = system.diffuser(b);
  GuidanceGap gap;
  gap.matched_a = diffusion_loss(ma, z0a, t, eps_a, sched, &ctx_a).item();
  gap.matched_b = diffusion_loss(mb, z0b, t, eps_b, sched, &ctx_b).item();
  gap.null_a = diffusion_loss(ma, z0a, t, eps_a, sched, nullptr).item();
  gap.null_b = diffusion_loss(mb, z0b, t, eps_b, sched, nullptr).item();
  return gap;
}

Fidelity generation_fidelity(const System& system, const std::string& target,
                             const std::string& source, std::size_t count,
                             const SamplerConfig& cfg) {
  if (count < 2) throw ParameterError("fidelity needs at least two scenes");
  const PairedDataset ds = validation_pairs(system.settings(), target, source, count);
  std::vector<Sample> shifted(count);
  for (std::size_t i = 0; i < count; ++i) shifted[i] = ds.xb[(i + 1) % count];
  const ModalityCodecs& codecs = system.codecs(target);
  const auto matched = decode_latents(codecs, guided_sample(system, target, source, ds.xb, cfg));
  const auto mismatched =
      decode_latents(codecs, guided_sample(system, target, source, shifted, cfg));
  Fidelity f;
  for (std::size_t i = 0; i < count; ++i) {
    Image truth = std::get<Image>(ds.xa[i]);
    Image m = std::get<Image>(matched[i]);
    Image w = std::get<Image>(mismatched[i]);
    for (double& p : m.pixels) p = std::clamp(p, 0.0, 1.0);
    for (double& p : w.pixels) p = std::clamp(p, 0.0, 1.0);
    f.psnr_matched += psnr(m, truth);
    f.psnr_mismatched += psnr(w, truth);
    f.ssim_matched += ssim(m, truth);
    f.ssim_mismatched += ssim(w, truth);
  }
  const double inv = 1.0 / static_cast<double>(count);
  f.psnr_matched *= inv;
  f.psnr_mismatched *= inv;
  f.ssim_matched *= inv;
  f.ssim_mismatched *= inv;
  return f;
}

SamplerConfig sampler_config(const Settings& s) {
  SamplerConfig c;
  c.steps = s.sampler_steps;
  c.eta = s.eta;
  c.guidance_scale = s.guidance;
  c.seed = s.seed;
  return c;
}

}  // namespace mflow
