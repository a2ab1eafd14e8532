#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "blindpaint/datasets.hpp"
#include "blindpaint/trainer.hpp"

namespace blindpaint {

struct RunConfigKey {
  std::string name;
  std::string default_value;  // empty means "unset"
  std::string help;
};

// Flat `key = value` configuration. Lines starting with '#' are comments. Every key has a
// matching --key-with-dashes command line flag.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<RunConfigKey>& keys();

  // Throws ConfigError on unknown keys or malformed lines, naming file and line.
  void load_file(const std::filesystem::path& path);
  // Throws ConfigError for an unknown key.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  // True when the key was given in a file or by set(), not merely defaulted.
  bool is_explicit(const std::string& key) const { return explicit_.count(key) > 0; }
  bool is_set(const std::string& key) const { return !get(key).empty(); }

  // Every problem with the current values (bad numbers, enums, constraints), one message each.
  std::vector<std::string> validation_errors() const;

  // Each parser throws ConfigError naming the key.
  TrainConfig train_config() const;
  MarkerPolicy marker_policy() const;
  CanvasSize image_size() const;
  Layout layout() const;
  Split split() const;
  Split eval_split() const;
  std::filesystem::path data_root() const;
  std::filesystem::path run_dir() const;
  double conf_threshold() const;
  double nms_iou() const;

  // Effective configuration in load_file() syntax, keys in declaration order.
  std::string echo() const;

 private:
  int int_value(const std::string& key) const;
  double double_value(const std::string& key) const;
  bool bool_value(const std::string& key) const;

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace blindpaint
