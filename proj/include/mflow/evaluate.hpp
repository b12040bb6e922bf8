#pragma once

// Dataset assembly and held-out evaluations used by the CLI and the
// acceptance suite.

#include <string>
#include <utility>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/sampler.hpp"
#include "mflow/system.hpp"

namespace mflow {

// Every distinct pair named by the alignment and flow configuration, in
// first-mention order.
std::vector<std::pair<std::string, std::string>> configured_pairs(const Settings& s);

// Training pairs for each configured pair; dataset k uses scene range k.
std::vector<PairedDataset> generate_training_sets(const Settings& s);

// Held-out pairs rendered from the shared validation scene range.
PairedDataset validation_pairs(const Settings& s, const std::string& a, const std::string& b,
                               std::size_t count);

// Top-1 retrieval a -> b over `count` validation scenes.
double retrieval_accuracy(const System& system, const std::string& a, const std::string& b,
                          std::size_t count);

struct GuidanceGap {
  double matched_a = 0.0;  // L^A with partner context
  double matched_b = 0.0;
  double null_a = 0.0;  // same noise and steps, null context
  double null_b = 0.0;
  double matched() const { return matched_a + matched_b; }
  double null() const { return null_a + null_b; }
  double reduction() const { return 1.0 - matched() / null(); }
};

// Conditional denoising loss of the flow pair (a, b) on `count` held-out
// pairs, with matched context versus the null context.
GuidanceGap guidance_gap(const System& system, const std::string& a, const std::string& b,
                         std::size_t count);

struct Fidelity {
  double psnr_matched = 0.0;
  double psnr_mismatched = 0.0;
  double ssim_matched = 0.0;
  double ssim_mismatched = 0.0;
};

// Samples `target` images conditioned on held-out `source` samples of the
// same scenes (matched) and of a cyclically shifted scene (mismatched), and
// scores both against the true target renders.
Fidelity generation_fidelity(const System& system, const std::string& target,
                             const std::string& source, std::size_t count,
                             const SamplerConfig& cfg);

SamplerConfig sampler_config(const Settings& s);

}  // namespace mflow
