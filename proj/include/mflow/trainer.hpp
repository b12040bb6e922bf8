#pragma once

// Encoder alignment against a hub modality, single-modality diffuser
// pretraining and the freeze-scheduled multi-flow rounds.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mflow/data.hpp"
#include "mflow/optim.hpp"
#include "mflow/system.hpp"

namespace mflow {

// Loss rows "step,loss_name,value"; names carry their phase, e.g.
// "flow1.text-xray.total".
class LossLog {
 public:
  struct Row {
    std::size_t step;
    std::string name;
    double value;
  };
  void add(std::size_t step, std::string name, double value);
  const std::vector<Row>& rows() const { return rows_; }
  void write_csv(const std::string& path) const;

 private:
  std::vector<Row> rows_;
};

// Finds the dataset for a pair in either order; nullptr when absent.
const PairedDataset* find_pairs(const std::vector<PairedDataset>& sets, const std::string& a,
                                const std::string& b);

// ---------------------------------------------------------------------------
// Alignment

struct AlignRound {
  std::string a;
  std::string b;
  std::vector<std::string> train;  // encoders updated this round
};

struct AlignmentPlan {
  std::string hub;
  std::vector<AlignRound> rounds;
};

// Orders the available pairs outward from the hub so that every round pairs
// one already-aligned encoder with a new one (both are new in the first
// round). CoverageError names any modality with no path to the hub.
AlignmentPlan make_alignment_plan(const ModalityRegistry& registry, const std::string& hub,
                                  const std::vector<std::pair<std::string, std::string>>& pairs);

// Runs settings().align_steps contrastive steps per round. Only the round's
// new encoders (and the temperature) receive optimizer updates.
void align_encoders(System& system, const AlignmentPlan& plan,
                    const std::vector<PairedDataset>& datasets, LossLog* log = nullptr);

// ---------------------------------------------------------------------------
// Unconditional pretraining of every diffuser backbone (null context).

void pretrain(System& system, const std::vector<PairedDataset>& datasets, LossLog* log = nullptr);

// ---------------------------------------------------------------------------
// Multi-flow rounds

struct FlowRound {
  std::string a;
  std::string b;
  std::set<std::string> trainable;
  std::set<std::string> frozen;
  std::size_t steps = 0;
};

struct FlowPlan {
  std::vector<FlowRound> rounds;
  // PlanError when a round's sets overlap or miss a parameter, or when a
  // participating diffuser is frozen before any round has trained it.
  void validate(const System& system) const;
};

// Each round trains, for every participant whose cross-attention has not
// been trained in an earlier round, its context encoder V, its embedding
// layer F_emb and its diffuser cross-attention weights. Everything else is
// frozen.
FlowPlan make_flow_plan(const System& system,
                        const std::vector<std::pair<std::string, std::string>>& pairs,
                        std::size_t steps);
// (text, xray), (text, ct), (ct, mri).
FlowPlan default_plan(const System& system);

struct RoundStats {
  double first_loss = 0.0;
  double last_loss = 0.0;
  std::size_t steps = 0;
};

// Executes round.steps optimizer steps on L^A + L^B (+ VI on the trainable
// context encoders when enabled). NumericError on a non-finite loss after
// writing a snapshot checkpoint to `snapshot_path` (if non-empty).
RoundStats run_round(System& system, const FlowRound& round, const PairedDataset& data,
                     std::size_t round_index, LossLog* log = nullptr,
                     const std::string& snapshot_path = {});

// Validates the plan, checks dataset coverage, runs every round and writes
// "<checkpoint_prefix>.round<k>.mm2g" after each one when a prefix is given.
std::vector<RoundStats> train_flows(System& system, const FlowPlan& plan,
                                    const std::vector<PairedDataset>& datasets,
                                    LossLog* log = nullptr,
                                    const std::string& checkpoint_prefix = {});

// ---------------------------------------------------------------------------
// Shared building blocks

// Prompt-encoder token features of raw samples, without gradient tracking.
Tensor frozen_tokens(const System& system, const std::string& modality,
                     std::span<const Sample> batch);

// Context for `receiver`'s denoiser from `partner`:
// V_partner([z_t_partner, F_emb_partner(phi_s(partner_tokens))]).
Tensor guided_context(const System& system, const std::string& receiver,
                      const std::string& partner, const Tensor& z_t_partner,
                      const Tensor& partner_tokens);

// Parameters whose names start with any of the prefixes.
std::set<std::string> params_with_prefix(const System& system,
                                         const std::vector<std::string>& prefixes);

}  // namespace mflow
