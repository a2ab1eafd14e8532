#include "blindpaint/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "blindpaint/error.hpp"
#include "blindpaint/image_io.hpp"
#include "blindpaint/tensor_archive.hpp"

namespace blindpaint {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(DiscriminatorKind kind) {
  return kind == DiscriminatorKind::detector ? "detector" : "patch";
}

DiscriminatorKind discriminator_kind_from_string(const std::string& name) {
  if (name == "detector") return DiscriminatorKind::detector;
  if (name == "patch") return DiscriminatorKind::patch;
  throw ConfigError("unknown discriminator '" + name + "' (expected detector or patch)");
}

GeneratorConfig TrainConfig::generator_config() const {
  GeneratorConfig g;
  g.encoder_width = encoder_width;
  g.bottleneck_width = bottleneck_width;
  g.branches = branches;
  return g;
}

DetectorConfig TrainConfig::detector_config() const {
  DetectorConfig d;
  d.anchors = AnchorConfig::defaults(std::min(image_size.height, image_size.width));
  return d;
}

std::vector<std::string> TrainConfig::validation_errors() const {
  std::vector<std::string> errors;
  if (batch_size < 1) errors.push_back("batch_size must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) errors.push_back("learning_rate must be > 0");
  if (max_steps < 0) errors.push_back("max_steps must be >= 0");
  if (weights.rec < 0 || weights.per < 0 || weights.adv < 0) {
    errors.push_back("loss weights lambda_rec, lambda_per, lambda_adv must be >= 0");
  }
  if (image_size.height <= 0 || image_size.width <= 0 || image_size.height % 16 != 0 ||
      image_size.width % 16 != 0) {
    errors.push_back("image_size must be a positive multiple of 16");
  }
  if (encoder_width < 2 || bottleneck_width < 1) errors.push_back("network widths must be positive");
  if (snapshot_every < 0) errors.push_back("snapshot_every must be >= 0");
  if (checkpoint_every < 0) errors.push_back("checkpoint_every must be >= 0");
  try {
    markers.validate();
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  }
  return errors;
}

void TrainConfig::validate() const {
  const auto errors = validation_errors();
  if (errors.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

json TrainConfig::to_json() const {
  json j;
  j["weights"] = {{"rec", weights.rec}, {"per", weights.per}, {"adv", weights.adv}};
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["max_steps"] = max_steps;
  j["seed"] = seed;
  j["image_size"] = {image_size.height, image_size.width};
  j["markers"] = {{"count", {markers.count.min, markers.count.max}},
                  {"arm_length", {markers.arm_length.min, markers.arm_length.max}},
                  {"thickness", {markers.thickness.min, markers.thickness.max}},
                  {"intensity", blindpaint::to_string(markers.intensity)},
                  {"rng_seed", markers.rng_seed}};
  j["disc"] = blindpaint::to_string(disc);
  j["branches"] = branches == BranchMode::two_branch ? 2 : 1;
  j["encoder_width"] = encoder_width;
  j["bottleneck_width"] = bottleneck_width;
  j["perceptual"] = {{"layout", blindpaint::to_string(perceptual.layout)},
                     {"seed", perceptual.seed},
                     {"weights", perceptual.weights.string()}};
  j["augment"] = augment;
  j["shuffle"] = shuffle;
  j["snapshot_every"] = snapshot_every;
  j["checkpoint_every"] = checkpoint_every;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.weights = {j.at("weights").at("rec").get<double>(), j.at("weights").at("per").get<double>(),
                 j.at("weights").at("adv").get<double>()};
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.max_steps = j.at("max_steps").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.image_size = {j.at("image_size").at(0).get<int>(), j.at("image_size").at(1).get<int>()};
    const auto& m = j.at("markers");
    auto range = [&](const char* key) {
      return IntRange{m.at(key).at(0).get<int>(), m.at(key).at(1).get<int>()};
    };
    c.markers.count = range("count");
    c.markers.arm_length = range("arm_length");
    c.markers.thickness = range("thickness");
    c.markers.intensity = intensity_mode_from_string(m.at("intensity").get<std::string>());
    c.markers.rng_seed = m.at("rng_seed").get<std::uint64_t>();
    c.disc = discriminator_kind_from_string(j.at("disc").get<std::string>());
    c.branches = j.at("branches").get<int>() == 1 ? BranchMode::single_branch : BranchMode::two_branch;
    c.encoder_width = j.at("encoder_width").get<int>();
    c.bottleneck_width = j.at("bottleneck_width").get<int>();
    c.perceptual.layout = perceptual_layout_from_string(j.at("perceptual").at("layout").get<std::string>());
    c.perceptual.seed = j.at("perceptual").at("seed").get<std::uint64_t>();
    c.perceptual.weights = j.at("perceptual").at("weights").get<std::string>();
    c.augment = j.at("augment").get<bool>();
    c.shuffle = j.at("shuffle").get<bool>();
    c.snapshot_every = j.at("snapshot_every").get<int>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed training config: ") + e.what());
  }
  return c;
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

TrainState::TrainState(TrainConfig cfg) : config(std::move(cfg)) {
  // Saturated sigmoids leave subnormal floats behind, which are extremely slow on x86.
  at::globalContext().setFlushDenormal(true);
  torch::manual_seed(config.seed);
  generator = Generator(config.generator_config());
  if (config.disc == DiscriminatorKind::detector) {
    detector = Detector(config.detector_config());
  } else {
    patch = PatchDiscriminator();
  }
  perceptual = PerceptualExtractor(config.perceptual);
  auto options = torch::optim::AdamOptions(config.learning_rate).betas({0.9, 0.999}).eps(1e-8).weight_decay(0);
  gen_optimizer = std::make_unique<torch::optim::Adam>(generator_parameters(), options);
  disc_optimizer = std::make_unique<torch::optim::Adam>(discriminator_parameters(), options);
}

std::vector<torch::Tensor> TrainState::generator_parameters() const { return generator->parameters(); }

std::vector<torch::Tensor> TrainState::discriminator_parameters() const {
  return detector ? detector->parameters() : patch->parameters();
}

json to_json(const LossReport& r, std::int64_t step) {
  return {{"step", step},           {"rec", r.rec},           {"per", r.per},
          {"adv", r.adv},           {"det_cls", r.det_cls},   {"det_loc", r.det_loc},
          {"total_gen", r.total_gen}, {"total_disc", r.total_disc}};
}

namespace {

void check_finite(const LossReport& report, std::int64_t step) {
  try {
    total_losses(report, {});
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + " at step " + std::to_string(step) + ": " +
                to_json(report, step).dump());
  }
}

}  // namespace

LossReport train_step(const Batch& batch, TrainState& state) {
  const auto& cfg = state.config;
  const auto& input = batch.corrupted;
  const auto& clean = batch.clean;
  LossReport report;

  // Generator update. The patch critic is held in eval mode so its spectral-norm state is not
  // advanced by the generator pass.
  state.generator->train();
  if (state.patch) state.patch->eval();
  auto out = state.generator->forward(input);
  const auto rec = rec_loss(clean, out.inpainted, out.composed);
  const auto per = perceptual_loss(state.perceptual, clean, out.inpainted, out.composed);
  torch::Tensor adv;
  if (state.detector) {
    adv = adv_loss(state.detector->forward(out.inpainted), state.detector->forward(out.composed));
  } else {
    adv = hinge_generator_loss(
        state.patch->forward(torch::cat({out.inpainted, out.composed})));
  }
  report.rec = rec.item<double>();
  report.per = per.item<double>();
  report.adv = adv.item<double>();
  check_finite(report, state.step);
  const auto gen_total = cfg.weights.rec * rec + cfg.weights.per * per + cfg.weights.adv * adv;
  state.gen_optimizer->zero_grad();
  gen_total.backward();
  state.gen_optimizer->step();

  // Discriminator update on detached reconstructions.
  const auto inpainted = out.inpainted.detach();
  const auto composed = out.composed.detach();
  torch::Tensor disc_total;
  if (state.detector) {
    const CanvasSize size = image_size(input);
    const auto& anchors = state.detector->config().anchors;
    std::vector<std::vector<MarkerAnnotation>> none(batch.boxes.size());
    std::map<ImageRole, DetectorOutput> outputs;
    std::map<ImageRole, TargetMap> targets;
    outputs.emplace(ImageRole::corrupted, state.detector->forward(input));
    targets.emplace(ImageRole::corrupted, assign_targets(batch.boxes, anchors, size, MarkerClass::marker));
    outputs.emplace(ImageRole::clean, state.detector->forward(clean));
    targets.emplace(ImageRole::clean, assign_targets(none, anchors, size));
    outputs.emplace(ImageRole::inpainted, state.detector->forward(inpainted));
    targets.emplace(ImageRole::inpainted,
                    assign_targets(batch.boxes, anchors, size, MarkerClass::fake_marker));
    if (cfg.branches == BranchMode::two_branch) {
      outputs.emplace(ImageRole::composed, state.detector->forward(composed));
      targets.emplace(ImageRole::composed,
                      assign_targets(batch.boxes, anchors, size, MarkerClass::fake_marker));
    }
    const auto det = det_loss(outputs, targets);
    report.det_cls = det.cls.item<double>();
    report.det_loc = det.loc.item<double>();
    disc_total = det.cls + det.loc;
  } else {
    state.patch->train();
    const auto loss = hinge_discriminator_loss(state.patch->forward(clean),
                                               state.patch->forward(torch::cat({inpainted, composed})));
    report.det_cls = loss.item<double>();
    report.det_loc = 0.0;
    disc_total = loss;
  }
  check_finite(report, state.step);
  state.disc_optimizer->zero_grad();
  disc_total.backward();
  state.disc_optimizer->step();

  const auto totals = total_losses(report, cfg.weights);
  report.total_gen = totals.total_gen;
  report.total_disc = totals.total_disc;
  ++state.step;
  return report;
}

Batch batch_for_step(const TrainConfig& config, const DatasetIndex& dataset, std::int64_t step) {
  const auto n = dataset.size();
  if (n == 0) throw Error("cannot train on an empty dataset");
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const auto epoch = static_cast<std::uint64_t>(step / per_epoch);
  const auto k = static_cast<std::size_t>(step % per_epoch);
  std::optional<std::uint64_t> shuffle;
  if (config.shuffle) shuffle = mix_seed(config.seed, epoch);
  const auto epoch_seed = config.augment ? epoch : 0;
  auto markers = config.markers;
  BatchSequence seq(dataset, bs, shuffle, markers, epoch_seed, config.augment);
  return seq.at(k);
}

torch::Tensor snapshot_grid(TrainState& state, const Batch& batch) {
  torch::NoGradGuard guard;
  state.generator->eval();
  const auto out = state.generator->forward(batch.corrupted);
  state.generator->train();
  std::vector<torch::Tensor> rows;
  for (std::int64_t b = 0; b < batch.size(); ++b) {
    std::vector<torch::Tensor> panels{batch.corrupted[b]};
    if (state.config.branches == BranchMode::two_branch) panels.push_back(out.mask[b]);
    panels.push_back(out.inpainted[b]);
    panels.push_back(out.composed[b]);
    panels.push_back(batch.clean[b]);
    rows.push_back(hconcat(panels));
  }
  return torch::cat(rows, 1);
}

void train(TrainState& state, const DatasetIndex& dataset, const TrainOptions& options) {
  const auto& cfg = state.config;
  if (dataset.size() == 0) throw Error("cannot train on an empty dataset");
  if (!(dataset.image_size == cfg.image_size)) {
    throw ConfigError("dataset image size differs from the training config image_size");
  }
  std::ofstream log;
  if (options.run_dir) {
    fs::create_directories(*options.run_dir / "checkpoints");
    log.open(*options.run_dir / "train_log.jsonl", std::ios::app);
    if (!log) throw Error("cannot open training log in " + options.run_dir->string());
  }
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((dataset.size() + bs - 1) / bs);

  Batch snapshot_batch;
  if (options.run_dir && cfg.snapshot_every > 0) {
    std::vector<CorruptedSample> samples;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < std::min<std::size_t>(4, dataset.size()); ++i) {
      samples.push_back(load_sample(dataset, i, cfg.markers, 0));
      ids.push_back(i);
    }
    snapshot_batch = collate(samples, ids);
  }

  while (state.step < cfg.max_steps) {
    const auto batch = batch_for_step(cfg, dataset, state.step);
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = train_step(batch, state);
    const auto wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (options.on_step) options.on_step(state.step, report);
    if (!options.run_dir) continue;

    auto line = to_json(report, state.step);
    line["wall_ms"] = wall_ms;
    log << line.dump() << '\n' << std::flush;
    if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "step_%08lld.ckpt", static_cast<long long>(state.step));
      save_checkpoint(state, *options.run_dir / "checkpoints" / name);
    }
    if (cfg.snapshot_every > 0 && state.step % per_epoch == 0) {
      const auto epoch = state.step / per_epoch;
      if (epoch % cfg.snapshot_every == 0) {
        char name[48];
        std::snprintf(name, sizeof(name), "epoch_%06lld.png", static_cast<long long>(epoch));
        write_png(*options.run_dir / "snapshots" / name, snapshot_grid(state, snapshot_batch));
      }
    }
  }
  if (options.run_dir) save_checkpoint(state, *options.run_dir / "checkpoints" / "final.ckpt");
}

TrainState train(const TrainConfig& config, const DatasetIndex& dataset, const TrainOptions& options) {
  config.validate();
  TrainState state(config);
  train(state, dataset, options);
  return state;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void add_module(TensorArchive& archive, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters()) archive.tensors.emplace_back(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers()) archive.tensors.emplace_back(prefix + b.key(), b.value());
}

void add_optimizer(TensorArchive& archive, const std::string& prefix, torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto it = opt.state().find(params[i].unsafeGetTensorImpl());
    if (it == opt.state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const auto key = prefix + std::to_string(i) + "/";
    archive.tensors.emplace_back(key + "step", torch::tensor({s.step()}, torch::kInt64));
    archive.tensors.emplace_back(key + "exp_avg", s.exp_avg());
    archive.tensors.emplace_back(key + "exp_avg_sq", s.exp_avg_sq());
  }
}

void restore_module(const TensorArchive& archive, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& name, torch::Tensor target) {
    const auto& src = archive.at(prefix + name);
    if (!src.sizes().equals(target.sizes()) || src.scalar_type() != target.scalar_type()) {
      throw Error("checkpoint field '" + prefix + name + "' has the wrong shape or dtype");
    }
    target.copy_(src);
  };
  for (auto& p : module.named_parameters()) copy(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

void restore_optimizer(const TensorArchive& archive, const std::string& prefix, torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto key = prefix + std::to_string(i) + "/";
    if (!archive.contains(key + "step")) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(archive.at(key + "step").item<std::int64_t>());
    const auto& avg = archive.at(key + "exp_avg");
    const auto& avg_sq = archive.at(key + "exp_avg_sq");
    if (!avg.sizes().equals(params[i].sizes()) || !avg_sq.sizes().equals(params[i].sizes())) {
      throw Error("checkpoint field '" + key + "exp_avg' has the wrong shape");
    }
    s->exp_avg(avg.clone());
    s->exp_avg_sq(avg_sq.clone());
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& path) {
  TensorArchive archive;
  json meta;
  meta["format"] = "blindpaint-checkpoint";
  meta["format_version"] = kCheckpointFormatVersion;
  meta["config"] = state.config.to_json();
  meta["config_hash"] = hex(state.config.hash());
  meta["step"] = state.step;
  archive.meta = meta.dump();
  add_module(archive, "generator/", *state.generator);
  if (state.detector) add_module(archive, "detector/", *state.detector);
  if (state.patch) add_module(archive, "patch/", *state.patch);
  add_optimizer(archive, "gen_optimizer/", *state.gen_optimizer);
  add_optimizer(archive, "disc_optimizer/", *state.disc_optimizer);
  write_archive(path, archive);
}

TrainState load_checkpoint(const fs::path& path) {
  const auto archive = read_archive(path);
  json meta;
  try {
    meta = json::parse(archive.meta);
  } catch (const json::exception&) {
    throw Error("checkpoint field 'meta' is not valid JSON: " + path.string());
  }
  if (meta.value("format", "") != "blindpaint-checkpoint") {
    throw Error("checkpoint field 'format' is not blindpaint-checkpoint: " + path.string());
  }
  if (meta.value("format_version", -1) != kCheckpointFormatVersion) {
    throw Error("checkpoint field 'format_version' is " + meta.value("format_version", json()).dump() +
                ", expected " + std::to_string(kCheckpointFormatVersion));
  }
  if (!meta.contains("config")) throw Error("checkpoint field 'config' is missing");
  const auto config = TrainConfig::from_json(meta.at("config"));
  if (meta.value("config_hash", "") != hex(config.hash())) {
    throw Error("checkpoint field 'config_hash' does not match the embedded config");
  }
  TrainState state(config);
  restore_module(archive, "generator/", *state.generator);
  if (state.detector) restore_module(archive, "detector/", *state.detector);
  if (state.patch) restore_module(archive, "patch/", *state.patch);
  restore_optimizer(archive, "gen_optimizer/", *state.gen_optimizer);
  restore_optimizer(archive, "disc_optimizer/", *state.disc_optimizer);
  if (!meta.contains("step")) throw Error("checkpoint field 'step' is missing");
  state.step = meta.at("step").get<std::int64_t>();
  return state;
}

}  // namespace blindpaint
