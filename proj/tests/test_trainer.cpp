#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "mflow/errors.hpp"
#include "mflow/evaluate.hpp"
#include "mflow/optim.hpp"
#include "mflow/trainer.hpp"
#include "test_util.hpp"

namespace mflow {
namespace {

Settings settings_with(std::initializer_list<std::pair<const char*, const char*>> overrides) {
  Config c;
  for (const auto& [k, v] : overrides) c.set(k, v);
  return Settings::from(c);
}

using Values = std::vector<std::vector<double>>;

Values values_of(const System& sys) {
  Values out;
  for (const ParamRef& p : sys.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

TEST(FlowPlan, DefaultPlanHasThreeRoundsInOrder) {
  System sys(settings_with({}));
  const FlowPlan plan = default_plan(sys);
  ASSERT_EQ(plan.rounds.size(), 3u);
  EXPECT_EQ(std::make_pair(plan.rounds[0].a, plan.rounds[0].b), std::make_pair(std::string("text"), std::string("xray")));
  EXPECT_EQ(std::make_pair(plan.rounds[1].a, plan.rounds[1].b), std::make_pair(std::string("text"), std::string("ct")));
  EXPECT_EQ(std::make_pair(plan.rounds[2].a, plan.rounds[2].b), std::make_pair(std::string("ct"), std::string("mri")));
  EXPECT_NO_THROW(plan.validate(sys));
}

TEST(FlowPlan, RoundTwoFreezesTheTextDiffuser) {
  System sys(settings_with({}));
  const FlowPlan plan = default_plan(sys);
  std::size_t text_params = 0;
  for (const ParamRef& p : sys.parameters()) {
    if (!starts_with(p.name, "diffuser.text.")) continue;
    ++text_params;
    EXPECT_TRUE(plan.rounds[1].frozen.count(p.name)) << p.name;
  }
  EXPECT_GT(text_params, 0u);
  for (const std::string& n : plan.rounds[1].trainable) {
    EXPECT_TRUE(starts_with(n, "diffuser.ct.ca.") || starts_with(n, "context.ct.") ||
                starts_with(n, "adapt.ct."))
        << n;
  }
  for (const std::string& n : plan.rounds[2].trainable) EXPECT_FALSE(starts_with(n, "diffuser.ct.")) << n;
}

TEST(FlowPlan, EveryRoundPartitionsTheParameters) {
  System sys(settings_with({}));
  const auto all = sys.parameters();
  for (const FlowRound& r : default_plan(sys).rounds) {
    EXPECT_EQ(r.trainable.size() + r.frozen.size(), all.size());
    for (const ParamRef& p : all) EXPECT_NE(r.trainable.count(p.name), r.frozen.count(p.name)) << p.name;
    for (const std::string& n : r.trainable) {
      EXPECT_FALSE(starts_with(n, "encoder.")) << n;
      EXPECT_EQ(n.find(".backbone."), std::string::npos) << n;
    }
  }
}

TEST(FlowPlan, ValidationRejectsBrokenPlans) {
  System sys(settings_with({}));
  FlowPlan overlap = default_plan(sys);
  overlap.rounds[0].frozen.insert(*overlap.rounds[0].trainable.begin());
  EXPECT_THROW(overlap.validate(sys), PlanError);

  FlowPlan missing = default_plan(sys);
  missing.rounds[0].frozen.erase(missing.rounds[0].frozen.begin());
  EXPECT_THROW(missing.validate(sys), PlanError);

  FlowPlan unknown = default_plan(sys);
  unknown.rounds[0].frozen.insert("diffuser.nope.w");
  EXPECT_THROW(unknown.validate(sys), PlanError);

  // ct -> mri first: ct's cross-attention would be frozen untrained.
  FlowPlan order = default_plan(sys);
  std::swap(order.rounds[0], order.rounds[2]);
  EXPECT_THROW(order.validate(sys), PlanError);

  FlowPlan bad_modality = default_plan(sys);
  bad_modality.rounds[0].b = "ecg";
  EXPECT_THROW(bad_modality.validate(sys), PlanError);
}

TEST(FlowPlan, MissingDatasetIsACoverageError) {
  System sys(settings_with({{"flows.steps", "1"}}));
  auto sets = generate_training_sets(sys.settings());
  sets.erase(std::remove_if(sets.begin(), sets.end(),
                            [](const PairedDataset& d) { return d.a == "ct" && d.b == "mri"; }),
             sets.end());
  try {
    train_flows(sys, default_plan(sys), sets);
    FAIL() << "expected CoverageError";
  } catch (const CoverageError& e) {
    EXPECT_NE(std::string(e.what()).find("ct-mri"), std::string::npos) << e.what();
  }
}

TEST(AlignmentPlan, HubNeedsThreePairRounds) {
  const ModalityRegistry reg = default_registry();
  const AlignmentPlan plan =
      make_alignment_plan(reg, "text", {{"text", "xray"}, {"text", "ct"}, {"ct", "mri"}});
  ASSERT_EQ(plan.rounds.size(), 3u);
  EXPECT_EQ(plan.hub, "text");
  EXPECT_EQ(plan.rounds[2].train, std::vector<std::string>{"mri"});
  EXPECT_THROW(make_alignment_plan(reg, "text", {{"text", "xray"}, {"ct", "mri"}}), CoverageError);
}

TEST(AlignEncoders, RoundLeavesOtherEncodersBitEqual) {
  System sys(settings_with({{"align.steps", "20"}}));
  const auto sets = generate_training_sets(sys.settings());
  AlignmentPlan plan{"text", {AlignRound{"text", "xray", {"text", "xray"}}}};
  const Values before = values_of(sys);
  LossLog log;
  align_encoders(sys, plan, sets, &log);
  const Values after = values_of(sys);
  const auto params = sys.parameters();
  std::size_t changed = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& n = params[i].name;
    const bool may_change = starts_with(n, "encoder.text.") || starts_with(n, "encoder.xray.") ||
                            starts_with(n, "align.");
    if (!may_change) {
      EXPECT_EQ(before[i], after[i]) << n;
    } else if (before[i] != after[i]) {
      ++changed;
    }
  }
  EXPECT_GT(changed, 0u);
  EXPECT_FALSE(log.rows().empty());
}

TEST(AlignEncoders, HubPairRetrievalFarAboveChance) {
  System sys(settings_with({}));
  const auto sets = generate_training_sets(sys.settings());
  AlignmentPlan plan{"text", {AlignRound{"text", "xray", {"text", "xray"}}}};
  align_encoders(sys, plan, sets);
  EXPECT_GT(retrieval_accuracy(sys, "text", "xray", 32), 10.0 / 32.0);
}

TEST(RunRound, ZeroStepsChangesNothing) {
  System sys(settings_with({}));
  const auto sets = generate_training_sets(sys.settings());
  FlowRound r = default_plan(sys).rounds[0];
  r.steps = 0;
  const Values before = values_of(sys);
  LossLog log;
  run_round(sys, r, *find_pairs(sets, "text", "xray"), 0, &log);
  EXPECT_EQ(values_of(sys), before);
  EXPECT_TRUE(log.rows().empty());
}

TEST(RunRound, FrozenParametersBitIdenticalEveryRound) {
  System sys(settings_with({{"flows.steps", "3"}}));
  const auto sets = generate_training_sets(sys.settings());
  Rng rng(5);
  for (const ParamRef& p : sys.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += 0.01 * rng.normal();
  }
  const FlowPlan plan = default_plan(sys);
  for (std::size_t k = 0; k < plan.rounds.size(); ++k) {
    const FlowRound& r = plan.rounds[k];
    const Values before = values_of(sys);
    run_round(sys, r, *find_pairs(sets, r.a, r.b), k);
    const Values after = values_of(sys);
    const auto params = sys.parameters();
    std::size_t trained = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (r.frozen.count(params[i].name)) {
        EXPECT_EQ(0, std::memcmp(before[i].data(), after[i].data(), before[i].size() * sizeof(double)))
            << "round " << k + 1 << " " << params[i].name;
      } else if (before[i] != after[i]) {
        ++trained;
      }
    }
    EXPECT_GT(trained, 0u) << "round " << k + 1;
  }
}

TEST(RunRound, TwoHundredStepsCutCrossGuidedLoss) {
  System sys(settings_with({{"pretrain.steps", "150"}, {"pretrain.lr", "1e-3"}, {"flows.steps", "200"}}));
  const auto sets = generate_training_sets(sys.settings());
  pretrain(sys, sets);
  const double before = guidance_gap(sys, "text", "xray", 64).matched();
  LossLog log;
  const RoundStats stats =
      run_round(sys, default_plan(sys).rounds[0], *find_pairs(sets, "text", "xray"), 0, &log);
  const double after = guidance_gap(sys, "text", "xray", 64).matched();
  EXPECT_EQ(stats.steps, 200u);
  EXPECT_LE(after, 0.7 * before) << "before " << before << " after " << after;
}

TEST(TrainFlows, CheckpointsEveryRoundAndLogsCsv) {
  const auto dir = std::filesystem::temp_directory_path() / "mflow_trainer_test";
  std::filesystem::create_directories(dir);
  System sys(settings_with({{"flows.steps", "2"}}));
  const auto sets = generate_training_sets(sys.settings());
  LossLog log;
  const auto stats = train_flows(sys, default_plan(sys), sets, &log, (dir / "f").string());
  EXPECT_EQ(stats.size(), 3u);
  for (int k = 1; k <= 3; ++k) {
    EXPECT_TRUE(std::filesystem::exists(dir / ("f.round" + std::to_string(k) + ".mm2g")));
  }
  log.write_csv((dir / "loss.csv").string());
  std::ifstream in(dir / "loss.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,loss_name,value");
  EXPECT_TRUE(starts_with(row, "0,flow1.text-xray.")) << row;
  std::filesystem::remove_all(dir);
}

TEST(Training, SameSeedSameWeights) {
  auto run = [] {
    auto sys = std::make_unique<System>(
        settings_with({{"align.steps", "5"}, {"pretrain.steps", "3"}, {"flows.steps", "2"}}));
    const auto sets = generate_training_sets(sys->settings());
    align_encoders(*sys, make_alignment_plan(sys->registry(), "text", sys->settings().align_pairs),
                   sets);
    pretrain(*sys, sets);
    train_flows(*sys, default_plan(*sys), sets);
    return sys;
  };
  const auto a = run();
  const auto b = run();
  const auto pa = a->parameters();
  const auto pb = b->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i].tensor.data();
    const auto& y = pb[i].tensor.data();
    EXPECT_EQ(0, std::memcmp(x.data(), y.data(), x.size() * sizeof(double))) << pa[i].name;
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w = Tensor::scalar(1.0);
  w.set_requires_grad(true);
  AdamState opt;
  opt.add("w", w, {1e-5, 0.0});
  backward(scale(square(w), 0.5));
  adam_step(opt);
  EXPECT_NEAR(w.item(), 1.0 - 1e-5, 1e-12);
  EXPECT_EQ(opt.step, 1u);
}

TEST(Adam, ZeroGradientWithoutDecayIsNoOp) {
  Tensor w = Tensor::from({3}, {0.5, -2.0, 7.0});
  AdamState opt;
  opt.add("w", w, {1e-3, 0.0});
  const std::vector<std::vector<double>> zero{{0, 0, 0}};
  for (int i = 0; i < 4; ++i) adam_step(opt, zero);
  EXPECT_EQ(w[0], 0.5);
  EXPECT_EQ(w[1], -2.0);
  EXPECT_EQ(w[2], 7.0);
}

TEST(Adam, DecoupledDecayShrinksGeometrically) {
  Tensor w = Tensor::from({2}, {1.0, -3.0});
  AdamState opt;
  opt.add("w", w, {1e-3, 1e-4});
  const std::vector<std::vector<double>> zero{{0, 0}};
  for (int i = 0; i < 5; ++i) adam_step(opt, zero);
  const double factor = std::pow(1.0 - 1e-3 * 1e-4, 5);
  EXPECT_NEAR(w[0], factor, 1e-15);
  EXPECT_NEAR(w[1], -3.0 * factor, 1e-15);
}

TEST(Adam, GradientShapeMismatchThrows) {
  AdamState opt;
  opt.add("w", Tensor::zeros({3}), {1e-3, 0.0});
  const std::vector<std::vector<double>> bad{{0, 0}};
  EXPECT_THROW(adam_step(opt, bad), ShapeError);
}

}  // namespace
}  // namespace mflow
