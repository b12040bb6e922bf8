#include "mflow/optim.hpp"

#include <cmath>

#include "mflow/errors.hpp"

namespace mflow {

void AdamState::add(std::string name, Tensor param, AdamHyper hyper) {
  if (!param.is_leaf()) throw ParameterError("optimizer slot " + name + " is not a leaf");
  const std::size_t n = param.numel();
  slots.push_back({std::move(name), std::move(param), hyper, std::vector<double>(n, 0.0),
                   std::vector<double>(n, 0.0)});
}

void AdamState::zero_grad() {
  for (auto& s : slots) s.param.zero_grad();
}

namespace {

void update_slot(AdamState& st, AdamState::Slot& s, std::span<const double> g, double c1,
                 double c2) {
  auto w = s.param.mutable_data();
  const double lr = s.hyper.lr;
  const double decay = 1.0 - lr * s.hyper.weight_decay;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g.empty() ? 0.0 : g[i];
    s.m[i] = st.beta1 * s.m[i] + (1.0 - st.beta1) * gi;
    s.v[i] = st.beta2 * s.v[i] + (1.0 - st.beta2) * gi * gi;
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    w[i] = w[i] * decay - lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

}  // namespace

void adam_step(AdamState& state, std::span<const std::vector<double>> grads) {
  if (grads.size() != state.slots.size()) {
    throw ShapeError("expected " + std::to_string(state.slots.size()) + " gradients, got " +
                     std::to_string(grads.size()));
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (grads[k].size() != state.slots[k].param.numel()) {
      throw ShapeError("gradient for " + state.slots[k].name + " has " +
                       std::to_string(grads[k].size()) + " entries, parameter has " +
                       std::to_string(state.slots[k].param.numel()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    update_slot(state, state.slots[k], grads[k], c1, c2);
  }
}

void adam_step(AdamState& state) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& s : state.slots) {
    std::span<const double> g;
    if (s.param.has_grad()) g = s.param.grad();
    update_slot(state, s, g, c1, c2);
  }
}

}  // namespace mflow
