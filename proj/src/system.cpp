#include "mflow/system.hpp"

#include <cmath>

#include "mflow/errors.hpp"

namespace mflow {

System::System(const Settings& settings)
    : settings_(settings),
      registry_(default_registry(settings.model)),
      schedule_(settings.schedule()),
      align_store_("align") {
  for (const ModalitySpec& spec : registry_.specs()) {
    codecs_.push_back(make_codecs(spec, settings_.model, settings_.seed));
    diffusers_.push_back(std::make_unique<DiffuserModel>(spec, settings_.model, settings_.seed));
    auto store = std::make_unique<ParamStore>("vi." + spec.name);
    if (settings_.vi_projector) {
      Rng rng(derive_key(settings_.seed, 0x7669, registry_.index_of(spec.name)));
      projectors_.emplace_back(*store, "proj", ParamGroup::kEncoder, spec.embed_dim,
                               spec.embed_dim, rng);
    } else {
      projectors_.emplace_back();
    }
    projector_stores_.push_back(std::move(store));
  }
  temperature_.log_tau =
      align_store_.add("log_tau", ParamGroup::kAlignment, {}, {std::log(Temperature::kDefault)});
}

ModalityCodecs& System::codecs(const std::string& modality) {
  return codecs_.at(registry_.index_of(modality));
}

const ModalityCodecs& System::codecs(const std::string& modality) const {
  return codecs_.at(registry_.index_of(modality));
}

DiffuserModel& System::diffuser(const std::string& modality) {
  return *diffusers_.at(registry_.index_of(modality));
}

const DiffuserModel& System::diffuser(const std::string& modality) const {
  return *diffusers_.at(registry_.index_of(modality));
}

const Linear* System::vi_projector(const std::string& modality) const {
  const Linear& p = projectors_.at(registry_.index_of(modality));
  return p.weight ? &p : nullptr;
}

std::vector<ParamRef> System::parameters() const {
  std::vector<ParamRef> out;
  auto append = [&](const ParamStore& store) {
    for (const ParamEntry& e : store.entries()) {
      out.push_back({e.name, e.group, e.tensor});
    }
  };
  for (std::size_t i = 0; i < codecs_.size(); ++i) {
    append(codecs_[i].encoder->params());
    append(*projector_stores_[i]);
    append(codecs_[i].context->params());
    append(*codecs_[i].embedding_params);
    append(diffusers_[i]->params());
  }
  append(align_store_);
  return out;
}

}  // namespace mflow
