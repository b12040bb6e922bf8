#pragma once

// Plain-text key=value configuration, one entry per line, '#' comments.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mflow/modality.hpp"
#include "mflow/schedule.hpp"

namespace mflow {

class Config {
 public:
  // Starts from the built-in defaults.
  Config();
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  // UsageError for keys outside the known set, except "data.<a>-<b>" dataset
  // entries which are free-form.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  // Comma-separated "a-b" pairs.
  std::vector<std::pair<std::string, std::string>> pairs(const std::string& key) const;
  // Dataset path for a modality pair, in either order; empty when absent.
  std::string dataset_path(const std::string& a, const std::string& b) const;

  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct Settings {
  std::uint64_t seed = 7;
  ModelConfig model;
  std::size_t schedule_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  BetaSpacing spacing = BetaSpacing::kLinear;

  std::size_t train_pairs = 512;
  std::size_t val_pairs = 64;

  std::string hub = "text";
  std::vector<std::pair<std::string, std::string>> align_pairs;
  std::size_t align_steps = 300;
  std::size_t align_batch = 32;
  double align_lr = 1e-3;
  double vi_weight = 0.1;
  bool vi_projector = false;

  std::size_t pretrain_steps = 300;
  std::size_t pretrain_batch = 16;
  double backbone_lr = 1e-3;

  std::vector<std::pair<std::string, std::string>> flow_pairs;
  std::size_t flow_steps = 200;
  std::size_t flow_batch = 16;
  double flow_lr = 1e-3;
  double flow_weight_decay = 1e-4;
  double cfg_dropout = 0.1;
  bool flow_vi = true;
  double flow_vi_weight = 0.01;

  std::size_t sampler_steps = 50;
  double eta = 1.0;
  double guidance = 2.0;

  std::string out_dir = "run";

  NoiseSchedule schedule() const;
  static Settings from(const Config& cfg);
};

}  // namespace mflow
