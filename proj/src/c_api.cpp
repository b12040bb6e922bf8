#include "mflow/c_api.h"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "mflow/checkpoint.hpp"
#include "mflow/config.hpp"
#include "mflow/errors.hpp"
#include "mflow/evaluate.hpp"
#include "mflow/metrics.hpp"
#include "mflow/trainer.hpp"

struct mflow_config {
  mflow::Config config;
};

struct mflow_system {
  explicit mflow_system(const mflow::Settings& s) : system(s) {}
  mflow::System system;
};

namespace {

using namespace mflow;

thread_local std::string g_last_error;

template <class F>
mflow_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return MFLOW_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<mflow_status>(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return MFLOW_ERR_INTERNAL;
}

mflow_status null_argument() {
  g_last_error = "null argument";
  return MFLOW_ERR_NULL_ARGUMENT;
}

std::string pair_key(const std::string& a, const std::string& b) { return a + "-" + b; }

// Datasets named in the config for each pair; the first missing one is a
// coverage error that names it.
std::vector<PairedDataset> load_datasets(
    const Config& cfg, const std::vector<std::pair<std::string, std::string>>& pairs) {
  for (const auto& [a, b] : pairs) {
    if (cfg.dataset_path(a, b).empty()) {
      throw CoverageError("no paired dataset for " + pair_key(a, b) + " (set data." +
                          pair_key(a, b) + "=<path>)");
    }
  }
  std::vector<PairedDataset> out;
  for (const auto& [a, b] : pairs) {
    const std::string path = cfg.dataset_path(a, b);
    out.push_back(read_pairs(path));
    if (!((out.back().a == a && out.back().b == b) || (out.back().a == b && out.back().b == a))) {
      throw FormatError(path + " holds " + pair_key(out.back().a, out.back().b) + " pairs, not " +
                        pair_key(a, b));
    }
  }
  return out;
}

void maybe_write_log(const LossLog& log, const char* path) {
  if (path) log.write_csv(path);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

void write_outputs(const std::string& modality, const std::vector<Sample>& samples,
                   const std::string& dir) {
  bool text = false;
  std::ofstream captions;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (const auto* img = std::get_if<Image>(&samples[i])) {
      write_pgm(*img, join_path(dir, modality + "_" + std::to_string(i) + ".pgm"));
    } else {
      if (!text) {
        captions.open(join_path(dir, modality + ".txt"));
        if (!captions) throw IoError("cannot write " + join_path(dir, modality + ".txt"));
        text = true;
      }
      captions << vocab::to_string(std::get<TokenSeq>(samples[i])) << '\n';
    }
  }
}

Image clipped(Image img) {
  for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
  return img;
}

Image view(const double* px, std::size_t h, std::size_t w) {
  return Image{h, w, std::vector<double>(px, px + h * w)};
}

}  // namespace

extern "C" {

const char* mflow_version(void) { return "1.0.0"; }

const char* mflow_last_error(void) { return g_last_error.c_str(); }

const char* mflow_status_name(mflow_status status) {
  switch (status) {
    case MFLOW_OK: return "ok";
    case MFLOW_ERR_SHAPE: return "shape";
    case MFLOW_ERR_DOMAIN: return "domain";
    case MFLOW_ERR_PARAMETER: return "parameter";
    case MFLOW_ERR_FORMAT: return "format";
    case MFLOW_ERR_INTEGRITY: return "integrity";
    case MFLOW_ERR_COVERAGE: return "coverage";
    case MFLOW_ERR_USAGE: return "usage";
    case MFLOW_ERR_IO: return "io";
    case MFLOW_ERR_NUMERIC: return "numeric";
    case MFLOW_ERR_PLAN: return "plan";
    case MFLOW_ERR_NULL_ARGUMENT: return "null_argument";
    case MFLOW_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

int mflow_status_is_usage(mflow_status status) {
  return status == MFLOW_ERR_USAGE || status == MFLOW_ERR_COVERAGE || status == MFLOW_ERR_PLAN ||
         status == MFLOW_ERR_NULL_ARGUMENT;
}

mflow_status mflow_config_create(mflow_config** out) {
  if (!out) return null_argument();
  return guarded([&] { *out = new mflow_config{}; });
}

mflow_status mflow_config_load(const char* path, mflow_config** out) {
  if (!path || !out) return null_argument();
  return guarded([&] { *out = new mflow_config{Config::load(path)}; });
}

mflow_status mflow_config_set(mflow_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_argument();
  return guarded([&] { cfg->config.set(key, value); });
}

mflow_status mflow_config_get(const mflow_config* cfg, const char* key, char* buf, size_t size,
                              size_t* needed) {
  if (!cfg || !key) return null_argument();
  return guarded([&] {
    const std::string& v = cfg->config.get(key);
    if (needed) *needed = v.size() + 1;
    if (buf && size > 0) {
      const std::size_t n = std::min(size - 1, v.size());
      std::memcpy(buf, v.data(), n);
      buf[n] = '\0';
    }
  });
}

void mflow_config_destroy(mflow_config* cfg) { delete cfg; }

mflow_status mflow_system_create(const mflow_config* cfg, mflow_system** out) {
  if (!cfg || !out) return null_argument();
  return guarded([&] { *out = new mflow_system(Settings::from(cfg->config)); });
}

void mflow_system_destroy(mflow_system* sys) { delete sys; }

mflow_status mflow_system_save(const mflow_system* sys, const char* path) {
  if (!sys || !path) return null_argument();
  return guarded([&] { save_checkpoint(sys->system, path); });
}

mflow_status mflow_system_load(mflow_system* sys, const char* path) {
  if (!sys || !path) return null_argument();
  return guarded([&] { load_checkpoint(sys->system, path); });
}

mflow_status mflow_system_param_count(const mflow_system* sys, size_t* count) {
  if (!sys || !count) return null_argument();
  return guarded([&] {
    std::size_t n = 0;
    for (const ParamRef& p : sys->system.parameters()) n += p.tensor.numel();
    *count = n;
  });
}

mflow_status mflow_generate_data(const mflow_config* cfg, const char* dir) {
  if (!cfg || !dir) return null_argument();
  return guarded([&] {
    const Settings s = Settings::from(cfg->config);
    ensure_dir(dir);
    for (const PairedDataset& ds : generate_training_sets(s)) {
      write_pairs(ds, join_path(dir, pair_key(ds.a, ds.b) + ".tsv"));
    }
  });
}

mflow_status mflow_align(mflow_system* sys, const mflow_config* cfg, const char* log_csv) {
  if (!sys || !cfg) return null_argument();
  return guarded([&] {
    System& system = sys->system;
    const Settings& s = system.settings();
    const AlignmentPlan plan = make_alignment_plan(system.registry(), s.hub, s.align_pairs);
    const auto sets = load_datasets(cfg->config, s.align_pairs);
    LossLog log;
    align_encoders(system, plan, sets, &log);
    maybe_write_log(log, log_csv);
  });
}

mflow_status mflow_pretrain(mflow_system* sys, const mflow_config* cfg, const char* log_csv) {
  if (!sys || !cfg) return null_argument();
  return guarded([&] {
    System& system = sys->system;
    const auto sets = load_datasets(cfg->config, configured_pairs(system.settings()));
    LossLog log;
    pretrain(system, sets, &log);
    maybe_write_log(log, log_csv);
  });
}

mflow_status mflow_train_flows(mflow_system* sys, const mflow_config* cfg, const char* log_csv,
                               const char* checkpoint_prefix) {
  if (!sys || !cfg) return null_argument();
  return guarded([&] {
    System& system = sys->system;
    const Settings& s = system.settings();
    const FlowPlan plan = make_flow_plan(system, s.flow_pairs, s.flow_steps);
    plan.validate(system);
    const auto sets = load_datasets(cfg->config, s.flow_pairs);
    LossLog log;
    train_flows(system, plan, sets, &log, checkpoint_prefix ? checkpoint_prefix : "");
    maybe_write_log(log, log_csv);
  });
}

mflow_status mflow_sample(const mflow_system* sys, const char* target, const char* source,
                          size_t count, const char* dir) {
  if (!sys || !target || !dir) return null_argument();
  return guarded([&] {
    const System& system = sys->system;
    if (count == 0) throw UsageError("sample count must be positive");
    const ModalitySpec& spec = system.registry().get(target);
    const SamplerConfig cfg = sampler_config(system.settings());
    Tensor z;
    if (source) {
      const PairedDataset ds = validation_pairs(system.settings(), target, source, count);
      z = guided_sample(system, target, source, ds.xb, cfg);
    } else {
      const Shape shape{count, spec.latent.channels, spec.latent.height, spec.latent.width};
      z = sample(system.diffuser(target), shape, static_cast<const Tensor*>(nullptr), cfg,
                 system.schedule());
    }
    ensure_dir(dir);
    write_outputs(target, decode_latents(system.codecs(target), z), dir);
  });
}

mflow_status mflow_joint_sample(const mflow_system* sys, const char* modalities, size_t count,
                                const char* dir) {
  if (!sys || !modalities || !dir) return null_argument();
  return guarded([&] {
    const System& system = sys->system;
    const auto names = split_list(modalities);
    const auto latents =
        joint_sample(system, names, count, sampler_config(system.settings()));
    ensure_dir(dir);
    std::vector<std::vector<Sample>> images;
    for (const std::string& m : names) {
      auto decoded = decode_latents(system.codecs(m), latents.at(m));
      write_outputs(m, decoded, dir);
      if (system.registry().get(m).kind == ModalityKind::kImage && images.size() < 3) {
        images.push_back(std::move(decoded));
      }
    }
    if (images.empty()) return;
    for (std::size_t i = 0; i < count; ++i) {
      const Image& first = std::get<Image>(images[0][i]);
      const Image blank{first.height, first.width,
                        std::vector<double>(first.pixels.size(), 0.0)};
      auto plane = [&](std::size_t k) {
        return k < images.size() ? clipped(std::get<Image>(images[k][i])) : blank;
      };
      write_ppm(plane(0), plane(1), plane(2), join_path(dir, "joint_" + std::to_string(i) + ".ppm"));
    }
  });
}

mflow_status mflow_evaluate(const mflow_system* sys, const char* metrics_csv) {
  if (!sys || !metrics_csv) return null_argument();
  return guarded([&] {
    const System& system = sys->system;
    const Settings& s = system.settings();
    std::ostringstream os;
    os << std::setprecision(17) << "metric,value\n";
    const auto& specs = system.registry().specs();
    for (std::size_t i = 0; i < specs.size(); ++i) {
      for (std::size_t j = i + 1; j < specs.size(); ++j) {
        os << "retrieval_top1." << pair_key(specs[i].name, specs[j].name) << ','
           << retrieval_accuracy(system, specs[i].name, specs[j].name, 32) << '\n';
      }
    }
    double matched = 0.0, null = 0.0;
    for (const auto& [a, b] : s.flow_pairs) {
      const GuidanceGap g = guidance_gap(system, a, b, s.val_pairs);
      const std::string key = pair_key(a, b);
      os << "cross_loss_matched." << key << ',' << g.matched() << '\n';
      os << "cross_loss_null." << key << ',' << g.null() << '\n';
      os << "cross_loss_reduction." << key << ',' << g.reduction() << '\n';
      matched += g.matched();
      null += g.null();
    }
    if (null > 0.0) os << "cross_loss_reduction.total," << 1.0 - matched / null << '\n';
    if (system.registry().contains("xray") && system.registry().contains("text")) {
      const Fidelity f =
          generation_fidelity(system, "xray", "text", s.val_pairs, sampler_config(s));
      os << "psnr_matched.xray|text," << f.psnr_matched << '\n';
      os << "psnr_mismatched.xray|text," << f.psnr_mismatched << '\n';
      os << "ssim_matched.xray|text," << f.ssim_matched << '\n';
      os << "ssim_mismatched.xray|text," << f.ssim_mismatched << '\n';
    }
    std::ofstream out(metrics_csv);
    if (!out) throw IoError(std::string("cannot write ") + metrics_csv);
    out << os.str();
    if (!out) throw IoError(std::string("write failed: ") + metrics_csv);
  });
}

mflow_status mflow_write_schedule(const mflow_config* cfg, const char* csv_path) {
  if (!cfg) return null_argument();
  return guarded([&] {
    const NoiseSchedule sched = Settings::from(cfg->config).schedule();
    std::ostringstream os;
    os << std::setprecision(17) << "t,beta,alpha_bar,snr\n";
    for (std::size_t t = 1; t <= sched.steps(); ++t) {
      os << t << ',' << sched.beta(t) << ',' << sched.alpha_bar(t) << ',' << snr(t, sched) << '\n';
    }
    if (!csv_path || std::string(csv_path) == "-") {
      std::fwrite(os.str().data(), 1, os.str().size(), stdout);
      std::fflush(stdout);
      return;
    }
    std::ofstream out(csv_path);
    if (!out) throw IoError(std::string("cannot write ") + csv_path);
    out << os.str();
    if (!out) throw IoError(std::string("write failed: ") + csv_path);
  });
}

mflow_status mflow_psnr(const double* a, const double* b, size_t height, size_t width, double peak,
                        double* out) {
  if (!a || !b || !out) return null_argument();
  return guarded([&] { *out = psnr(view(a, height, width), view(b, height, width), peak); });
}

mflow_status mflow_ssim(const double* a, const double* b, size_t height, size_t width, double peak,
                        double* out) {
  if (!a || !b || !out) return null_argument();
  return guarded([&] { *out = ssim(view(a, height, width), view(b, height, width), peak); });
}

}  // extern "C"
