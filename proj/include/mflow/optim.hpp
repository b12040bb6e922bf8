#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow {

struct AdamHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adam with bias correction and decoupled weight decay. Only registered
// parameters carry moment buffers; anything not registered is never touched.
struct AdamState {
  struct Slot {
    std::string name;
    Tensor param;
    AdamHyper hyper;
    std::vector<double> m;
    std::vector<double> v;
  };

  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Slot> slots;

  void add(std::string name, Tensor param, AdamHyper hyper);
  std::size_t size() const { return slots.size(); }
  void zero_grad();
};

// One update using explicit gradients, one buffer per slot in slot order.
// Throws ShapeError when a gradient length differs from its parameter.
void adam_step(AdamState& state, std::span<const std::vector<double>> grads);
// One update using the gradients accumulated on the parameters (missing
// gradients count as zero).
void adam_step(AdamState& state);

}  // namespace mflow
