// toybench: command-line front end over the C API.
//
//   toybench <command> [--config FILE] [--seed N] [options] [key=value ...]
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mflow/c_api.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int code;
};

void check(mflow_status st) {
  if (st == MFLOW_OK) return;
  std::cerr << "toybench: " << mflow_status_name(st) << " error: " << mflow_last_error() << '\n';
  throw Failure{mflow_status_is_usage(st) ? kExitUsage : kExitRuntime};
}

class ConfigHandle {
 public:
  ConfigHandle(const std::string& path, const std::vector<std::string>& overrides,
               std::optional<unsigned long long> seed) {
    check(path.empty() ? mflow_config_create(&cfg_) : mflow_config_load(path.c_str(), &cfg_));
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) {
        std::cerr << "toybench: expected key=value, got '" << kv << "'\n";
        throw Failure{kExitUsage};
      }
      check(mflow_config_set(cfg_, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
    if (seed) check(mflow_config_set(cfg_, "seed", std::to_string(*seed).c_str()));
  }
  ~ConfigHandle() { mflow_config_destroy(cfg_); }
  ConfigHandle(const ConfigHandle&) = delete;
  ConfigHandle& operator=(const ConfigHandle&) = delete;

  const mflow_config* get() const { return cfg_; }
  std::string value(const char* key) const {
    std::size_t needed = 0;
    check(mflow_config_get(cfg_, key, nullptr, 0, &needed));
    std::string out(needed, '\0');
    check(mflow_config_get(cfg_, key, out.data(), out.size(), &needed));
    out.resize(needed - 1);
    return out;
  }

 private:
  mflow_config* cfg_ = nullptr;
};

class SystemHandle {
 public:
  explicit SystemHandle(const ConfigHandle& cfg) { check(mflow_system_create(cfg.get(), &sys_)); }
  ~SystemHandle() { mflow_system_destroy(sys_); }
  SystemHandle(const SystemHandle&) = delete;
  SystemHandle& operator=(const SystemHandle&) = delete;

  mflow_system* get() { return sys_; }
  void load(const std::string& path) { check(mflow_system_load(sys_, path.c_str())); }
  void save(const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    check(mflow_system_save(sys_, path.c_str()));
    std::cout << "wrote " << path << '\n';
  }

 private:
  mflow_system* sys_ = nullptr;
};

struct Common {
  std::string config;
  std::optional<unsigned long long> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("overrides", c.overrides, "extra key=value settings");
}

std::string in_dir(const ConfigHandle& cfg, const std::string& file) {
  return (std::filesystem::path(cfg.value("out.dir")) / file).string();
}

std::string or_default(const std::string& v, const std::string& fallback) {
  return v.empty() ? fallback : v;
}

void ensure_parent(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-flow toy diffusion bench"};
  app.require_subcommand(1);
  Common common;
  std::string out, init, save, log, checkpoint, modality, cond, modalities = "text,xray,ct,mri";
  std::size_t count = 4;

  auto* gen = app.add_subcommand("gen-data", "render paired training datasets");
  add_common(gen, common);
  gen->add_option("--out", out, "output directory (default: out.dir)");

  auto* align = app.add_subcommand("align", "contrastive encoder alignment against the hub");
  add_common(align, common);
  align->add_option("--save", save, "checkpoint to write (default: <out.dir>/align.mm2g)");
  align->add_option("--log", log, "loss CSV (default: <out.dir>/align_loss.csv)");

  auto* pre = app.add_subcommand("pretrain", "unconditional diffuser pretraining");
  add_common(pre, common);
  pre->add_option("--init", init, "starting checkpoint (default: <out.dir>/align.mm2g)");
  pre->add_option("--save", save, "checkpoint to write (default: <out.dir>/pretrain.mm2g)");
  pre->add_option("--log", log, "loss CSV (default: <out.dir>/pretrain_loss.csv)");

  auto* flows = app.add_subcommand("train-flows", "freeze-scheduled cross-guided rounds");
  add_common(flows, common);
  flows->add_option("--init", init, "starting checkpoint (default: <out.dir>/pretrain.mm2g)");
  flows->add_option("--save", save, "checkpoint to write (default: <out.dir>/flows.mm2g)");
  flows->add_option("--log", log, "loss CSV (default: <out.dir>/flows_loss.csv)");

  auto* smp = app.add_subcommand("sample", "generate one modality");
  add_common(smp, common);
  smp->add_option("--checkpoint", checkpoint, "model (default: <out.dir>/flows.mm2g)");
  smp->add_option("--modality", modality, "modality to generate")->required();
  smp->add_option("--cond", cond, "condition on held-out samples of this modality");
  smp->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);
  smp->add_option("--out", out, "output directory (default: <out.dir>/samples)");

  auto* joint = app.add_subcommand("jointsample", "generate several modalities together");
  add_common(joint, common);
  joint->add_option("--checkpoint", checkpoint, "model (default: <out.dir>/flows.mm2g)");
  joint->add_option("--modalities", modalities, "comma-separated modalities");
  joint->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);
  joint->add_option("--out", out, "output directory (default: <out.dir>/joint)");

  auto* ev = app.add_subcommand("eval", "held-out metrics");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "model (default: <out.dir>/flows.mm2g)");
  ev->add_option("--out", out, "metrics CSV (default: <out.dir>/metrics.csv)");

  auto* sched = app.add_subcommand("inspect-schedule", "dump the noise schedule as CSV");
  add_common(sched, common);
  sched->add_option("--out", out, "CSV path (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const ConfigHandle cfg(common.config, common.overrides, common.seed);
    if (*gen) {
      const std::string dir = or_default(out, cfg.value("out.dir"));
      check(mflow_generate_data(cfg.get(), dir.c_str()));
      std::cout << "wrote datasets to " << dir << '\n';
    } else if (*align) {
      SystemHandle sys(cfg);
      const std::string log_path = or_default(log, in_dir(cfg, "align_loss.csv"));
      ensure_parent(log_path);
      check(mflow_align(sys.get(), cfg.get(), log_path.c_str()));
      sys.save(or_default(save, in_dir(cfg, "align.mm2g")));
    } else if (*pre) {
      SystemHandle sys(cfg);
      sys.load(or_default(init, in_dir(cfg, "align.mm2g")));
      const std::string log_path = or_default(log, in_dir(cfg, "pretrain_loss.csv"));
      ensure_parent(log_path);
      check(mflow_pretrain(sys.get(), cfg.get(), log_path.c_str()));
      sys.save(or_default(save, in_dir(cfg, "pretrain.mm2g")));
    } else if (*flows) {
      SystemHandle sys(cfg);
      const std::string target = or_default(save, in_dir(cfg, "flows.mm2g"));
      const std::string log_path = or_default(log, in_dir(cfg, "flows_loss.csv"));
      ensure_parent(log_path);
      ensure_parent(target);
      const std::string prefix = target.size() > 5 && target.ends_with(".mm2g")
                                     ? target.substr(0, target.size() - 5)
                                     : target;
      sys.load(or_default(init, in_dir(cfg, "pretrain.mm2g")));
      check(mflow_train_flows(sys.get(), cfg.get(), log_path.c_str(), prefix.c_str()));
      sys.save(target);
    } else if (*smp) {
      SystemHandle sys(cfg);
      sys.load(or_default(checkpoint, in_dir(cfg, "flows.mm2g")));
      const std::string dir = or_default(out, in_dir(cfg, "samples"));
      check(mflow_sample(sys.get(), modality.c_str(), cond.empty() ? nullptr : cond.c_str(), count,
                         dir.c_str()));
      std::cout << "wrote " << count << " " << modality << " samples to " << dir << '\n';
    } else if (*joint) {
      SystemHandle sys(cfg);
      sys.load(or_default(checkpoint, in_dir(cfg, "flows.mm2g")));
      const std::string dir = or_default(out, in_dir(cfg, "joint"));
      check(mflow_joint_sample(sys.get(), modalities.c_str(), count, dir.c_str()));
      std::cout << "wrote " << count << " joint samples to " << dir << '\n';
    } else if (*ev) {
      SystemHandle sys(cfg);
      sys.load(or_default(checkpoint, in_dir(cfg, "flows.mm2g")));
      const std::string path = or_default(out, in_dir(cfg, "metrics.csv"));
      ensure_parent(path);
      check(mflow_evaluate(sys.get(), path.c_str()));
      std::cout << "wrote " << path << '\n';
    } else if (*sched) {
      if (!out.empty()) ensure_parent(out);
      check(mflow_write_schedule(cfg.get(), out.empty() ? nullptr : out.c_str()));
    }
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "toybench: io error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
