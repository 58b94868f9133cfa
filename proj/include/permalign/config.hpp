#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "permalign/train.hpp"

namespace permalign {

// Flat key=value config file. '#' starts a comment; blank lines are
// ignored. Every key must be consumed by a reader; `finish()` throws a
// ValidationError naming all unknown keys.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key);
  std::string get_string(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key);
  int get_int(const std::string& key, int fallback);
  double get_double(const std::string& key);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  std::vector<int> get_int_list(const std::string& key);
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& fallback);
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback);
  std::vector<std::string> get_string_list(const std::string& key,
                                           const std::vector<std::string>& fallback);
  std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                          const std::vector<std::uint64_t>& fallback);

  // Throws unless every key was read.
  void finish() const;

  // Stable "key=value" lines of everything parsed (for provenance records).
  std::string resolved_text() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;

  const std::string* lookup(const std::string& key);
};

// Consumes the training keys (arch, schedule, seeds, regime...). A
// `regime=` key applies its preset first; explicit keys then override it.
TrainConfig parse_train_config(KeyValueConfig& config);

}  // namespace permalign
