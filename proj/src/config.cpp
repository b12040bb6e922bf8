#include "mflow/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mflow/errors.hpp"

namespace mflow {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "7"},
      {"model.embed_dim", "64"},
      {"model.channels", "32"},
      {"model.heads", "4"},
      {"model.encoder_width", "16"},
      {"model.image_context_len", "4"},
      {"schedule.steps", "1000"},
      {"schedule.beta_start", "0.00085"},
      {"schedule.beta_end", "0.012"},
      {"schedule.spacing", "linear"},
      {"data.train_pairs", "512"},
      {"data.val_pairs", "64"},
      {"align.hub", "text"},
      {"align.pairs", "text-xray,text-ct,ct-mri"},
      {"align.steps", "300"},
      {"align.batch", "32"},
      {"align.lr", "1e-3"},
      {"align.vi_weight", "0.1"},
      {"align.vi_projector", "0"},
      {"pretrain.steps", "300"},
      {"pretrain.batch", "16"},
      {"pretrain.lr", "1e-3"},
      {"flows.rounds", "text-xray,text-ct,ct-mri"},
      {"flows.steps", "200"},
      {"flows.batch", "16"},
      {"flows.lr", "1e-3"},
      {"flows.weight_decay", "1e-4"},
      {"flows.cfg_dropout", "0.1"},
      {"flows.vi", "1"},
      {"flows.vi_weight", "0.01"},
      {"sampler.steps", "50"},
      {"sampler.eta", "1.0"},
      {"sampler.guidance", "2.0"},
      {"out.dir", "run"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_dataset_key(const std::string& key) {
  return key.rfind("data.", 0) == 0 && key.find('-', 5) != std::string::npos;
}

}  // namespace

Config::Config() : values_(defaults()) {}

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void Config::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key) && !is_dataset_key(key)) {
    throw UsageError("unknown config key '" + key + "'");
  }
  values_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("missing config key '" + key + "'");
  return it->second;
}

double Config::number(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
    throw UsageError("config key '" + key + "' is not a number: '" + v + "'");
  }
  return x;
}

std::uint64_t Config::u64(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || end != v.c_str() + v.size() || errno == ERANGE) {
    throw UsageError("config key '" + key + "' is not a non-negative integer: '" + v + "'");
  }
  return x;
}

std::size_t Config::count(const std::string& key) const {
  return static_cast<std::size_t>(u64(key));
}

bool Config::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw UsageError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::pair<std::string, std::string>> Config::pairs(const std::string& key) const {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(get(key));
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto dash = item.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 == item.size()) {
      throw UsageError("config key '" + key + "': '" + item + "' is not a pair a-b");
    }
    out.emplace_back(item.substr(0, dash), item.substr(dash + 1));
  }
  return out;
}

std::string Config::dataset_path(const std::string& a, const std::string& b) const {
  for (const auto& key : {"data." + a + "-" + b, "data." + b + "-" + a}) {
    auto it = values_.find(key);
    if (it != values_.end() && !it->second.empty()) return it->second;
  }
  return {};
}

std::string Config::dump() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  return os.str();
}

NoiseSchedule Settings::schedule() const {
  return NoiseSchedule(schedule_steps, beta_start, beta_end, spacing);
}

Settings Settings::from(const Config& c) {
  Settings s;
  s.seed = c.u64("seed");
  s.model.embed_dim = c.count("model.embed_dim");
  s.model.channels = c.count("model.channels");
  s.model.heads = c.count("model.heads");
  s.model.encoder_width = c.count("model.encoder_width");
  s.model.image_context_len = c.count("model.image_context_len");
  s.schedule_steps = c.count("schedule.steps");
  s.beta_start = c.number("schedule.beta_start");
  s.beta_end = c.number("schedule.beta_end");
  const std::string& spacing = c.get("schedule.spacing");
  if (spacing == "linear") {
    s.spacing = BetaSpacing::kLinear;
  } else if (spacing == "scaled_linear") {
    s.spacing = BetaSpacing::kScaledLinear;
  } else {
    throw UsageError("schedule.spacing must be linear or scaled_linear, got '" + spacing + "'");
  }
  s.train_pairs = c.count("data.train_pairs");
  s.val_pairs = c.count("data.val_pairs");
  s.hub = c.get("align.hub");
  s.align_pairs = c.pairs("align.pairs");
  s.align_steps = c.count("align.steps");
  s.align_batch = c.count("align.batch");
  s.align_lr = c.number("align.lr");
  s.vi_weight = c.number("align.vi_weight");
  s.vi_projector = c.flag("align.vi_projector");
  s.pretrain_steps = c.count("pretrain.steps");
  s.pretrain_batch = c.count("pretrain.batch");
  s.backbone_lr = c.number("pretrain.lr");
  s.flow_pairs = c.pairs("flows.rounds");
  s.flow_steps = c.count("flows.steps");
  s.flow_batch = c.count("flows.batch");
  s.flow_lr = c.number("flows.lr");
  s.flow_weight_decay = c.number("flows.weight_decay");
  s.cfg_dropout = c.number("flows.cfg_dropout");
  s.flow_vi = c.flag("flows.vi");
  s.flow_vi_weight = c.number("flows.vi_weight");
  s.sampler_steps = c.count("sampler.steps");
  s.eta = c.number("sampler.eta");
  s.guidance = c.number("sampler.guidance");
  s.out_dir = c.get("out.dir");
  if (s.cfg_dropout < 0.0 || s.cfg_dropout > 1.0) {
    throw UsageError("flows.cfg_dropout must lie in [0, 1]");
  }
  if (s.align_batch < 2 || s.flow_batch < 2 || s.pretrain_batch < 1) {
    throw UsageError("batch sizes must be at least 2");
  }
  return s;
}

}  // namespace mflow
