#include "mflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mflow/checkpoint.hpp"
#include "mflow/errors.hpp"
#include "mflow/objectives.hpp"

namespace mflow {

namespace {

constexpr std::uint64_t kAlignStream = 0xa119;
constexpr std::uint64_t kPretrainStream = 0x9e7e;
constexpr std::uint64_t kFlowStream = 0xf10e;

// Marks exactly the named parameters as trainable; restores every parameter
// to requires_grad on exit.
class TrainScope {
 public:
  TrainScope(const System& system, const std::set<std::string>& trainable)
      : params_(system.parameters()) {
    for (ParamRef& p : params_) p.tensor.set_requires_grad(trainable.count(p.name) != 0);
  }
  ~TrainScope() {
    for (ParamRef& p : params_) p.tensor.set_requires_grad(true);
  }
  TrainScope(const TrainScope&) = delete;
  TrainScope& operator=(const TrainScope&) = delete;

 private:
  std::vector<ParamRef> params_;
};

std::vector<std::size_t> draw_batch(std::size_t total, std::size_t batch, Rng& rng) {
  if (total == 0) throw ParameterError("cannot draw a batch from an empty dataset");
  batch = std::min(batch, total);
  std::vector<std::size_t> pool(total);
  for (std::size_t i = 0; i < total; ++i) pool[i] = i;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(batch);
  return pool;
}

std::vector<Sample> pick(const std::vector<Sample>& xs, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(xs[i]);
  return out;
}

// Samples of a dataset oriented as (a, b).
std::pair<const std::vector<Sample>*, const std::vector<Sample>*> oriented(
    const PairedDataset& ds, const std::string& a) {
  if (ds.a == a) return {&ds.xa, &ds.xb};
  return {&ds.xb, &ds.xa};
}

std::vector<std::size_t> draw_steps(std::size_t n, std::size_t steps, Rng& rng) {
  std::vector<std::size_t> t(n);
  for (auto& v : t) v = 1 + static_cast<std::size_t>(rng.below(steps));
  return t;
}

Tensor noise_like(const Shape& shape, Rng& rng) {
  return Tensor::from(shape, rng.normals(shape_numel(shape)));
}

AdamState optimizer_for(const System& system, const std::set<std::string>& trainable,
                        double lr, double weight_decay) {
  AdamState st;
  for (const ParamRef& p : system.parameters()) {
    if (trainable.count(p.name)) st.add(p.name, p.tensor, {lr, weight_decay});
  }
  return st;
}

void check_finite(const System& system, double value, const std::string& where,
                  const std::string& snapshot_path) {
  if (std::isfinite(value)) return;
  std::string msg = "non-finite loss at " + where;
  if (!snapshot_path.empty()) {
    save_checkpoint(system, snapshot_path);
    msg += "; parameters saved to " + snapshot_path;
  }
  throw NumericError(msg);
}

Tensor vi_features(const System& system, const std::string& modality,
                   std::span<const Sample> views) {
  Tensor z = system.codecs(modality).encoder->project(views);
  if (const Linear* proj = system.vi_projector(modality)) z = (*proj)(z);
  return z;
}

std::vector<Sample> augmented(std::span<const Sample> xs, Rng& rng) {
  std::vector<Sample> out;
  out.reserve(xs.size());
  for (const Sample& x : xs) out.push_back(augment(x, rng));
  return out;
}

std::string pair_name(const std::string& a, const std::string& b) { return a + "-" + b; }

}  // namespace

// ---------------------------------------------------------------------------

void LossLog::add(std::size_t step, std::string name, double value) {
  rows_.push_back({step, std::move(name), value});
}

void LossLog::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,loss_name,value\n";
  os << std::setprecision(17);
  for (const Row& r : rows_) os << r.step << ',' << r.name << ',' << r.value << '\n';
  if (!os) throw IoError("write failed: " + path);
}

const PairedDataset* find_pairs(const std::vector<PairedDataset>& sets, const std::string& a,
                                const std::string& b) {
  for (const PairedDataset& ds : sets) {
    if ((ds.a == a && ds.b == b) || (ds.a == b && ds.b == a)) return &ds;
  }
  return nullptr;
}

std::set<std::string> params_with_prefix(const System& system,
                                         const std::vector<std::string>& prefixes) {
  std::set<std::string> out;
  for (const ParamRef& p : system.parameters()) {
    for (const std::string& pre : prefixes) {
      if (p.name.rfind(pre, 0) == 0) {
        out.insert(p.name);
        break;
      }
    }
  }
  return out;
}

Tensor frozen_tokens(const System& system, const std::string& modality,
                     std::span<const Sample> batch) {
  NoGradGuard guard;
  return system.codecs(modality).encoder->token_features(batch).detach();
}

Tensor guided_context(const System& system, const std::string& receiver,
                      const std::string& partner, const Tensor& z_t_partner,
                      const Tensor& partner_tokens) {
  const ModalityCodecs& p = system.codecs(partner);
  GuidedAdaptation f =
      build_adaptation(partner_tokens, system.registry().get(receiver), p.embedding);
  return encode_context(*p.context, z_t_partner, f);
}

// ---------------------------------------------------------------------------
// Alignment

AlignmentPlan make_alignment_plan(const ModalityRegistry& registry, const std::string& hub,
                                  const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (!registry.contains(hub)) throw PlanError("hub modality '" + hub + "' is not registered");
  for (const auto& [a, b] : pairs) {
    if (!registry.contains(a) || !registry.contains(b)) {
      throw PlanError("alignment pair " + pair_name(a, b) + " names an unregistered modality");
    }
  }
  AlignmentPlan plan{hub, {}};
  std::set<std::string> reached{hub};
  std::set<std::string> trained;
  bool progress = true;
  while (progress) {
    progress = false;
    for (const auto& [a, b] : pairs) {
      const bool ra = reached.count(a) != 0, rb = reached.count(b) != 0;
      if (ra == rb) continue;
      AlignRound r{a, b, {}};
      for (const std::string& m : {a, b}) {
        if (!trained.count(m)) {
          r.train.push_back(m);
          trained.insert(m);
        }
      }
      reached.insert(a);
      reached.insert(b);
      plan.rounds.push_back(std::move(r));
      progress = true;
    }
  }
  for (const ModalitySpec& s : registry.specs()) {
    if (!reached.count(s.name)) {
      throw CoverageError("modality '" + s.name + "' has no paired-data path to hub '" + hub +
                          "'");
    }
  }
  return plan;
}

void align_encoders(System& system, const AlignmentPlan& plan,
                    const std::vector<PairedDataset>& datasets, LossLog* log) {
  const Settings& st = system.settings();
  for (std::size_t r = 0; r < plan.rounds.size(); ++r) {
    const AlignRound& round = plan.rounds[r];
    const PairedDataset* ds = find_pairs(datasets, round.a, round.b);
    if (!ds) {
      throw CoverageError("no paired dataset for " + pair_name(round.a, round.b));
    }
    std::vector<std::string> prefixes{"align."};
    for (const std::string& m : round.train) {
      prefixes.push_back("encoder." + m + ".");
      prefixes.push_back("vi." + m + ".");
    }
    const auto trainable = params_with_prefix(system, prefixes);
    TrainScope scope(system, trainable);
    AdamState opt = optimizer_for(system, trainable, st.align_lr, 0.0);
    auto [xa_all, xb_all] = oriented(*ds, round.a);
    const PromptEncoder& ea = *system.codecs(round.a).encoder;
    const PromptEncoder& eb = *system.codecs(round.b).encoder;
    const std::string tag = "align" + std::to_string(r + 1) + "." + pair_name(round.a, round.b);
    for (std::size_t step = 0; step < st.align_steps; ++step) {
      Rng rng(derive_key(st.seed, kAlignStream, r, step));
      const auto idx = draw_batch(ds->size(), st.align_batch, rng);
      const auto xa = pick(*xa_all, idx);
      const auto xb = pick(*xb_all, idx);
      Tensor nce = infonce_central(
          ContrastiveBatch{ea.encode(xa), eb.encode(xb), system.temperature().value()});
      Tensor loss = nce;
      Tensor vi_total;
      if (st.vi_weight > 0.0) {
        for (const std::string& m : round.train) {
          const auto& xs = m == round.a ? xa : xb;
          const auto v1 = augmented(xs, rng);
          const auto v2 = augmented(xs, rng);
          Tensor vi = vi_barlow(ViewPair{vi_features(system, m, v1), vi_features(system, m, v2)});
          vi_total = vi_total ? add(vi_total, vi) : vi;
        }
        if (vi_total) loss = add(loss, scale(vi_total, st.vi_weight));
      }
      check_finite(system, loss.item(), tag + " step " + std::to_string(step), {});
      backward(loss);
      adam_step(opt);
      opt.zero_grad();
      auto lt = system.temperature().log_tau.mutable_data();
      lt[0] = std::clamp(lt[0], std::log(Temperature::kMin), std::log(Temperature::kMax));
      if (log) {
        log->add(step, tag + ".infonce", nce.item());
        if (vi_total) log->add(step, tag + ".vi", vi_total.item());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pretraining

void pretrain(System& system, const std::vector<PairedDataset>& datasets, LossLog* log) {
  const Settings& st = system.settings();
  const auto& specs = system.registry().specs();
  for (std::size_t mi = 0; mi < specs.size(); ++mi) {
    const std::string& m = specs[mi].name;
    std::vector<Sample> pool;
    for (const PairedDataset& ds : datasets) {
      if (ds.a == m) pool.insert(pool.end(), ds.xa.begin(), ds.xa.end());
      if (ds.b == m) pool.insert(pool.end(), ds.xb.begin(), ds.xb.end());
    }
    if (pool.empty()) throw CoverageError("no training samples for modality '" + m + "'");
    DiffuserModel& model = system.diffuser(m);
    const ModalityCodecs& codecs = system.codecs(m);
    std::set<std::string> trainable;
    for (const ParamEntry& e : model.params().entries()) {
      if (e.group == ParamGroup::kBackbone) trainable.insert(e.name);
    }
    TrainScope scope(system, trainable);
    AdamState opt = optimizer_for(system, trainable, st.backbone_lr, 0.0);
    const std::string tag = "pretrain." + m;
    for (std::size_t step = 0; step < st.pretrain_steps; ++step) {
      Rng rng(derive_key(st.seed, kPretrainStream, mi, step));
      const auto idx = draw_batch(pool.size(), st.pretrain_batch, rng);
      Tensor z0 = encode_latents(codecs, pick(pool, idx));
      const auto t = draw_steps(z0.extent(0), system.schedule().steps(), rng);
      Tensor eps = noise_like(z0.shape(), rng);
      Tensor loss = diffusion_loss(model, z0, t, eps, system.schedule(), nullptr);
      check_finite(system, loss.item(), tag + " step " + std::to_string(step), {});
      backward(loss);
      adam_step(opt);
      opt.zero_grad();
      if (log) log->add(step, tag + ".eps", loss.item());
    }
  }
}

// ---------------------------------------------------------------------------
// Flow plans

FlowPlan make_flow_plan(const System& system,
                        const std::vector<std::pair<std::string, std::string>>& pairs,
                        std::size_t steps) {
  FlowPlan plan;
  std::set<std::string> trained;
  std::set<std::string> all;
  for (const ParamRef& p : system.parameters()) all.insert(p.name);
  for (const auto& [a, b] : pairs) {
    for (const std::string& m : {a, b}) {
      if (!system.registry().contains(m)) {
        throw PlanError("flow pair " + pair_name(a, b) + ": modality '" + m +
                        "' is not registered");
      }
    }
    if (a == b) throw PlanError("flow pair " + pair_name(a, b) + " pairs a modality with itself");
    std::vector<std::string> prefixes;
    for (const std::string& m : {a, b}) {
      if (trained.insert(m).second) {
        prefixes.push_back("context." + m + ".");
        prefixes.push_back("adapt." + m + ".");
        prefixes.push_back("diffuser." + m + ".ca.");
      }
    }
    if (prefixes.empty()) {
      throw PlanError("flow pair " + pair_name(a, b) + " has no untrained participant");
    }
    FlowRound r;
    r.a = a;
    r.b = b;
    r.steps = steps;
    r.trainable = params_with_prefix(system, prefixes);
    for (const std::string& n : all) {
      if (!r.trainable.count(n)) r.frozen.insert(n);
    }
    plan.rounds.push_back(std::move(r));
  }
  return plan;
}

FlowPlan default_plan(const System& system) {
  for (const char* m : {"text", "xray", "ct", "mri"}) {
    if (!system.registry().contains(m)) {
      throw PlanError(std::string("default plan needs modality '") + m + "'");
    }
  }
  return make_flow_plan(system, {{"text", "xray"}, {"text", "ct"}, {"ct", "mri"}},
                        system.settings().flow_steps);
}

void FlowPlan::validate(const System& system) const {
  std::set<std::string> all;
  for (const ParamRef& p : system.parameters()) all.insert(p.name);
  std::set<std::string> trained_before;
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    const FlowRound& r = rounds[i];
    const std::string where = "round " + std::to_string(i + 1) + " (" + pair_name(r.a, r.b) + ")";
    for (const std::string& m : {r.a, r.b}) {
      if (!system.registry().contains(m)) {
        throw PlanError(where + ": modality '" + m + "' is not registered");
      }
    }
    for (const std::string& n : r.trainable) {
      if (r.frozen.count(n)) throw PlanError(where + ": " + n + " is both trainable and frozen");
      if (!all.count(n)) throw PlanError(where + ": unknown parameter " + n);
    }
    for (const std::string& n : r.frozen) {
      if (!all.count(n)) throw PlanError(where + ": unknown parameter " + n);
    }
    for (const std::string& n : all) {
      if (!r.trainable.count(n) && !r.frozen.count(n)) {
        throw PlanError(where + ": parameter " + n + " is neither trainable nor frozen");
      }
    }
    for (const std::string& m : {r.a, r.b}) {
      const std::string ca = "diffuser." + m + ".ca.";
      bool frozen_now = false, trainable_now = false;
      for (const std::string& n : r.frozen) frozen_now = frozen_now || n.rfind(ca, 0) == 0;
      for (const std::string& n : r.trainable) trainable_now = trainable_now || n.rfind(ca, 0) == 0;
      if (frozen_now && !trainable_now && !trained_before.count(m)) {
        throw PlanError(where + ": diffuser '" + m + "' is frozen before it was ever trained");
      }
      if (trainable_now) trained_before.insert(m);
    }
  }
}

// ---------------------------------------------------------------------------
// Rounds

RoundStats run_round(System& system, const FlowRound& round, const PairedDataset& data,
                     std::size_t round_index, LossLog* log, const std::string& snapshot_path) {
  const Settings& st = system.settings();
  RoundStats stats;
  if (round.steps == 0) return stats;
  if (!((data.a == round.a && data.b == round.b) || (data.a == round.b && data.b == round.a))) {
    throw CoverageError("dataset " + pair_name(data.a, data.b) + " does not serve round " +
                        pair_name(round.a, round.b));
  }
  TrainScope scope(system, round.trainable);
  AdamState opt = optimizer_for(system, round.trainable, st.flow_lr, st.flow_weight_decay);
  auto [xa_all, xb_all] = oriented(data, round.a);
  const std::string& a = round.a;
  const std::string& b = round.b;
  const NoiseSchedule& sched = system.schedule();
  const std::string tag = "flow" + std::to_string(round_index + 1) + "." + pair_name(a, b);
  for (std::size_t step = 0; step < round.steps; ++step) {
    Rng rng(derive_key(st.seed, kFlowStream, round_index, step));
    const auto idx = draw_batch(data.size(), st.flow_batch, rng);
    const auto xa = pick(*xa_all, idx);
    const auto xb = pick(*xb_all, idx);
    const std::size_t n = idx.size();
    Tensor z0a = encode_latents(system.codecs(a), xa);
    Tensor z0b = encode_latents(system.codecs(b), xb);
    const auto t = draw_steps(n, sched.steps(), rng);
    Tensor eps_a = noise_like(z0a.shape(), rng);
    Tensor eps_b = noise_like(z0b.shape(), rng);
    std::vector<bool> keep_a(n), keep_b(n);
    for (std::size_t i = 0; i < n; ++i) {
      keep_a[i] = rng.uniform() >= st.cfg_dropout;
      keep_b[i] = rng.uniform() >= st.cfg_dropout;
    }
    Tensor tok_a = frozen_tokens(system, a, xa);
    Tensor tok_b = frozen_tokens(system, b, xb);
    Tensor zta = forward_diffuse(z0a, t, eps_a, sched);
    Tensor ztb = forward_diffuse(z0b, t, eps_b, sched);

    const DiffuserModel& ma = system.diffuser(a);
    const DiffuserModel& mb = system.diffuser(b);
    Tensor ctx_a = ma.mask_context(guided_context(system, a, b, ztb, tok_b), keep_a);
    Tensor ctx_b = mb.mask_context(guided_context(system, b, a, zta, tok_a), keep_b);
    Tensor loss_a = diffusion_loss(ma, z0a, t, eps_a, sched, &ctx_a);
    Tensor loss_b = diffusion_loss(mb, z0b, t, eps_b, sched, &ctx_b);
    Tensor loss = add(loss_a, loss_b);

    Tensor vi_total;
    if (st.flow_vi && st.flow_vi_weight > 0.0) {
      for (const std::string& m : {a, b}) {
        if (!round.trainable.count(system.codecs(m).context->params().entries().front().name)) {
          continue;
        }
        const std::string& other = m == a ? b : a;
        const auto& xs = m == a ? xa : xb;
        const Tensor& eps = m == a ? eps_a : eps_b;
        Tensor pooled[2];
        for (Tensor& out : pooled) {
          const auto view = augmented(xs, rng);
          Tensor zt = forward_diffuse(encode_latents(system.codecs(m), view), t, eps,
                                      sched);
          out = mean(guided_context(system, other, m, zt, frozen_tokens(system, m, view)), 1);
        }
        Tensor vi = vi_barlow(ViewPair{pooled[0], pooled[1]});
        vi_total = vi_total ? add(vi_total, vi) : vi;
      }
      if (vi_total) loss = add(loss, scale(vi_total, st.flow_vi_weight));
    }

    const double value = loss.item();
    check_finite(system, value, tag + " step " + std::to_string(step), snapshot_path);
    backward(loss);
    adam_step(opt);
    opt.zero_grad();
    if (step == 0) stats.first_loss = loss_a.item() + loss_b.item();
    stats.last_loss = loss_a.item() + loss_b.item();
    ++stats.steps;
    if (log) {
      log->add(step, tag + ".cross_" + a, loss_a.item());
      log->add(step, tag + ".cross_" + b, loss_b.item());
      if (vi_total) log->add(step, tag + ".vi", vi_total.item());
      log->add(step, tag + ".total", value);
    }
  }
  return stats;
}

std::vector<RoundStats> train_flows(System& system, const FlowPlan& plan,
                                    const std::vector<PairedDataset>& datasets, LossLog* log,
                                    const std::string& checkpoint_prefix) {
  plan.validate(system);
  for (const FlowRound& r : plan.rounds) {
    if (!find_pairs(datasets, r.a, r.b)) {
      throw CoverageError("no paired dataset for " + pair_name(r.a, r.b));
    }
  }
  std::vector<RoundStats> out;
  for (std::size_t i = 0; i < plan.rounds.size(); ++i) {
    const FlowRound& r = plan.rounds[i];
    const std::string snap =
        checkpoint_prefix.empty() ? std::string{} : checkpoint_prefix + ".nan.mm2g";
    out.push_back(run_round(system, r, *find_pairs(datasets, r.a, r.b), i, log, snap));
    if (!checkpoint_prefix.empty()) {
      save_checkpoint(system, checkpoint_prefix + ".round" + std::to_string(i + 1) + ".mm2g");
    }
  }
  return out;
}

}  // namespace mflow
