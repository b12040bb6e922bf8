#pragma once

// All learnable state of one multi-flow model: per-modality codecs and
// diffusers plus the shared contrastive temperature.

#include <memory>
#include <string>
#include <vector>

#include "mflow/config.hpp"
#include "mflow/denoiser.hpp"
#include "mflow/modality.hpp"
#include "mflow/nn.hpp"
#include "mflow/objectives.hpp"
#include "mflow/schedule.hpp"

namespace mflow {

struct ParamRef {
  std::string name;  // fully qualified, e.g. "diffuser.xray.ca.ca0.attn.q.w"
  ParamGroup group;
  Tensor tensor;
};

class System {
 public:
  explicit System(const Settings& settings);
  System(const System&) = delete;
  System& operator=(const System&) = delete;

  const Settings& settings() const { return settings_; }
  const ModalityRegistry& registry() const { return registry_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  ModalityCodecs& codecs(const std::string& modality);
  const ModalityCodecs& codecs(const std::string& modality) const;
  DiffuserModel& diffuser(const std::string& modality);
  const DiffuserModel& diffuser(const std::string& modality) const;
  Temperature& temperature() { return temperature_; }
  const Temperature& temperature() const { return temperature_; }
  // Optional VI projector for a modality; nullptr when disabled.
  const Linear* vi_projector(const std::string& modality) const;

  // Every parameter in canonical order: per modality (registry order) the
  // prompt encoder, VI projector, context encoder, embedding layer and
  // diffuser, followed by the alignment temperature.
  std::vector<ParamRef> parameters() const;

 private:
  Settings settings_;
  ModalityRegistry registry_;
  NoiseSchedule schedule_;
  std::vector<ModalityCodecs> codecs_;
  std::vector<std::unique_ptr<DiffuserModel>> diffusers_;
  std::vector<std::unique_ptr<ParamStore>> projector_stores_;
  std::vector<Linear> projectors_;
  ParamStore align_store_;
  Temperature temperature_;
};

}  // namespace mflow
