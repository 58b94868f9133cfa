#include "permalign/config.hpp"

#include <fstream>
#include <sstream>

namespace permalign {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return from_string(buf.str());
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text) {
  KeyValueConfig config;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) +
                            ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ValidationError("config line " + std::to_string(lineno) +
                            ": empty key");
    }
    if (!config.values_.emplace(key, value).second) {
      throw ValidationError("config: duplicate key '" + key + "'");
    }
  }
  return config;
}

const std::string* KeyValueConfig::lookup(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  consumed_.insert(key);
  return &it->second;
}

std::string KeyValueConfig::get_string(const std::string& key) {
  const std::string* v = lookup(key);
  if (!v) throw ValidationError("config: missing required key '" + key + "'");
  return *v;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) {
  const std::string* v = lookup(key);
  return v ? *v : fallback;
}

int KeyValueConfig::get_int(const std::string& key) {
  return std::stoi(get_string(key));
}

int KeyValueConfig::get_int(const std::string& key, int fallback) {
  const std::string* v = lookup(key);
  return v ? std::stoi(*v) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) {
  return std::stod(get_string(key));
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
  const std::string* v = lookup(key);
  return v ? std::stod(*v) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw ValidationError("config: key '" + key + "' must be true/false");
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key,
                                      std::uint64_t fallback) {
  const std::string* v = lookup(key);
  return v ? std::stoull(*v) : fallback;
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key) {
  std::vector<int> out;
  for (const auto& tok : split_commas(get_string(key))) out.push_back(std::stoi(tok));
  return out;
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key,
                                              const std::vector<int>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& tok : split_commas(*v)) out.push_back(std::stoi(tok));
  return out;
}

std::vector<double> KeyValueConfig::get_double_list(
    const std::string& key, const std::vector<double>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& tok : split_commas(*v)) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::string> KeyValueConfig::get_string_list(
    const std::string& key, const std::vector<std::string>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  return split_commas(*v);
}

std::vector<std::uint64_t> KeyValueConfig::get_u64_list(
    const std::string& key, const std::vector<std::uint64_t>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_commas(*v)) out.push_back(std::stoull(tok));
  return out;
}

void KeyValueConfig::finish() const {
  std::vector<std::string> unknown;
  for (const auto& [key, value] : values_) {
    if (!consumed_.count(key)) unknown.push_back(key);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ValidationError(msg);
  }
}

std::string KeyValueConfig::resolved_text() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) os << key << '=' << value << '\n';
  return os.str();
}

TrainConfig parse_train_config(KeyValueConfig& config) {
  TrainConfig tc;
  if (config.has("regime")) {
    apply_regime(tc, regime_from_name(config.get_string("regime")));
  }
  tc.arch.input_dim = config.get_int("input_dim", 784);
  tc.arch.hidden_dims = config.get_int_list("hidden_dims", {512, 512});
  tc.arch.output_dim = config.get_int("output_dim", 10);
  tc.arch.use_layer_norm = config.get_bool("use_layer_norm", true);
  const std::string act = config.get_string("activation", "relu");
  if (act != "relu") throw ValidationError("config: unsupported activation " + act);
  tc.epochs = config.get_int("epochs", tc.epochs);
  tc.batch_size = config.get_int("batch_size", tc.batch_size);
  tc.peak_lr = config.get_double("peak_lr", tc.peak_lr);
  tc.warmup_epochs = config.get_int("warmup_epochs", tc.warmup_epochs);
  const std::string sched = config.get_string(
      "schedule", tc.schedule == LrSchedule::cosine ? "cosine" : "constant");
  if (sched == "cosine") {
    tc.schedule = LrSchedule::cosine;
  } else if (sched == "constant") {
    tc.schedule = LrSchedule::constant;
  } else {
    throw ValidationError("config: unknown schedule " + sched);
  }
  tc.momentum = config.get_double("momentum", tc.momentum);
  tc.weight_decay = config.get_double("weight_decay", tc.weight_decay);
  tc.init_seed = config.get_u64("init_seed", tc.init_seed);
  tc.data_order_seed = config.get_u64("data_order_seed", tc.data_order_seed);
  const auto ckpt_epochs = config.get_int_list("checkpoint_epochs", {});
  tc.checkpoint_epochs.clear();
  tc.checkpoint_epochs.insert(ckpt_epochs.begin(), ckpt_epochs.end());
  tc.save_momentum = config.get_bool("save_momentum", tc.save_momentum);
  tc.validate();
  return tc;
}

}  // namespace permalign
