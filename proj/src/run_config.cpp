#include "blindpaint/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<RunConfigKey>& RunConfig::keys() {
  static const std::vector<RunConfigKey> k = {
      {"name", "run", "run name; outputs go to <runs_dir>/<name>"},
      {"runs_dir", "runs", "parent directory for run outputs"},
      {"data_root", "", "dataset root holding <split>/clean/"},
      {"layout", "clean_only", "dataset layout: clean_only or paired"},
      {"split", "train", "split used for synth and train"},
      {"eval_split", "test", "split used by eval"},
      {"image_size", "64", "square training/eval resolution (multiple of 16)"},
      {"batch_size", "4", "images per batch"},
      {"learning_rate", "1e-4", "Adam learning rate"},
      {"max_steps", "1000", "total training steps"},
      {"seed", "0", "seed for initialization and shuffling"},
      {"lambda_rec", "10", "weight of the L1 reconstruction loss"},
      {"lambda_per", "1", "weight of the perceptual loss"},
      {"lambda_adv", "0.1", "weight of the adversarial loss"},
      {"disc", "detector", "discriminator: detector or patch"},
      {"branches", "2", "generator branches: 2 (inpaint + mask) or 1"},
      {"encoder_width", "32", "generator encoder channels"},
      {"bottleneck_width", "64", "generator bottleneck channels"},
      {"perceptual", "compact", "perceptual extractor: vgg16, compact or identity"},
      {"perceptual_weights", "", "tensor archive with pretrained VGG-16 weights"},
      {"perceptual_seed", "1234", "seed for random perceptual weights"},
      {"augment", "true", "stamp fresh pseudo markers every epoch"},
      {"shuffle", "true", "shuffle batches every epoch"},
      {"snapshot_every", "10", "epochs between snapshot grids (0 = off)"},
      {"checkpoint_every", "0", "steps between checkpoints (0 = final only)"},
      {"markers_min", "1", "minimum markers per image"},
      {"markers_max", "4", "maximum markers per image"},
      {"arm_min", "", "minimum marker arm length in pixels (default scales with image_size)"},
      {"arm_max", "", "maximum marker arm length in pixels (default scales with image_size)"},
      {"thickness_min", "", "minimum marker thickness (default scales with image_size)"},
      {"thickness_max", "", "maximum marker thickness (default scales with image_size)"},
      {"marker_intensity", "fixed_white", "fixed_white, fixed_black or sampled"},
      {"marker_seed", "0", "seed for synthetic markers"},
      {"conf_threshold", "0.5", "detection confidence threshold"},
      {"nms_iou", "0.5", "detection NMS IoU threshold"},
  };
  return k;
}

RunConfig::RunConfig() {
  for (const auto& k : keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  explicit_.insert(key);
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(t.substr(0, eq));
    if (values_.find(key) == values_.end()) throw ConfigError(where + ": unknown config key '" + key + "'");
    values_[key] = trim(t.substr(eq + 1));
    explicit_.insert(key);
  }
}

int RunConfig::int_value(const std::string& key) const {
  const auto& v = get(key);
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return static_cast<int>(out);
}

double RunConfig::double_value(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool RunConfig::bool_value(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

CanvasSize RunConfig::image_size() const {
  const int side = int_value("image_size");
  return {side, side};
}

Layout RunConfig::layout() const {
  try {
    return layout_from_string(get("layout"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("layout: ") + e.what());
  }
}

Split RunConfig::split() const { return split_from_string(get("split")); }
Split RunConfig::eval_split() const { return split_from_string(get("eval_split")); }

std::filesystem::path RunConfig::data_root() const {
  if (!is_set("data_root")) throw ConfigError("data_root: dataset path is not set");
  return get("data_root");
}

std::filesystem::path RunConfig::run_dir() const {
  return std::filesystem::path(get("runs_dir")) / get("name");
}

double RunConfig::conf_threshold() const { return double_value("conf_threshold"); }
double RunConfig::nms_iou() const { return double_value("nms_iou"); }

MarkerPolicy RunConfig::marker_policy() const {
  auto policy = MarkerPolicy::for_image_size(image_size().height);
  policy.count = {int_value("markers_min"), int_value("markers_max")};
  if (is_set("arm_min")) policy.arm_length.min = int_value("arm_min");
  if (is_set("arm_max")) policy.arm_length.max = int_value("arm_max");
  if (is_set("thickness_min")) policy.thickness.min = int_value("thickness_min");
  if (is_set("thickness_max")) policy.thickness.max = int_value("thickness_max");
  policy.intensity = intensity_mode_from_string(get("marker_intensity"));
  policy.rng_seed = static_cast<std::uint64_t>(int_value("marker_seed"));
  return policy;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig c;
  c.weights = {double_value("lambda_rec"), double_value("lambda_per"), double_value("lambda_adv")};
  c.batch_size = int_value("batch_size");
  c.learning_rate = double_value("learning_rate");
  c.max_steps = int_value("max_steps");
  c.seed = static_cast<std::uint64_t>(int_value("seed"));
  c.image_size = image_size();
  c.markers = marker_policy();
  c.disc = discriminator_kind_from_string(get("disc"));
  const int branches = int_value("branches");
  if (branches != 1 && branches != 2) throw ConfigError("branches: expected 1 or 2");
  c.branches = branches == 2 ? BranchMode::two_branch : BranchMode::single_branch;
  c.encoder_width = int_value("encoder_width");
  c.bottleneck_width = int_value("bottleneck_width");
  c.perceptual.layout = perceptual_layout_from_string(get("perceptual"));
  c.perceptual.weights = get("perceptual_weights");
  c.perceptual.seed = static_cast<std::uint64_t>(int_value("perceptual_seed"));
  c.augment = bool_value("augment");
  c.shuffle = bool_value("shuffle");
  c.snapshot_every = int_value("snapshot_every");
  c.checkpoint_every = int_value("checkpoint_every");
  return c;
}

std::vector<std::string> RunConfig::validation_errors() const {
  std::vector<std::string> errors;
  auto attempt = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      errors.emplace_back(e.what());
    }
  };
  // Parse every key on its own so one bad value does not hide the others.
  for (const auto* key : {"image_size", "batch_size", "max_steps", "seed", "branches", "encoder_width",
                          "bottleneck_width", "perceptual_seed", "snapshot_every", "checkpoint_every",
                          "markers_min", "markers_max", "marker_seed"}) {
    attempt([&] { int_value(key); });
  }
  for (const auto* key : {"arm_min", "arm_max", "thickness_min", "thickness_max"}) {
    if (is_set(key)) attempt([&] { int_value(key); });
  }
  for (const auto* key : {"learning_rate", "lambda_rec", "lambda_per", "lambda_adv", "conf_threshold", "nms_iou"}) {
    attempt([&] { double_value(key); });
  }
  attempt([&] { bool_value("augment"); });
  attempt([&] { bool_value("shuffle"); });
  attempt([&] { layout(); });
  attempt([&] { split(); });
  attempt([&] { eval_split(); });
  attempt([&] { discriminator_kind_from_string(get("disc")); });
  attempt([&] { perceptual_layout_from_string(get("perceptual")); });
  attempt([&] { intensity_mode_from_string(get("marker_intensity")); });
  if (errors.empty()) {
    attempt([&] {
      for (auto& e : train_config().validation_errors()) errors.push_back(std::move(e));
    });
    const double conf = conf_threshold();
    const double nms = nms_iou();
    if (!(conf > 0 && conf < 1)) errors.emplace_back("conf_threshold must lie in (0, 1)");
    if (!(nms > 0 && nms < 1)) errors.emplace_back("nms_iou must lie in (0, 1)");
  }
  return errors;
}

std::string RunConfig::echo() const {
  std::ostringstream out;
  for (const auto& k : keys()) out << k.name << " = " << get(k.name) << '\n';
  return out.str();
}

}  // namespace blindpaint
