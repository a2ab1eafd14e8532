#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "blindpaint/datasets.hpp"
#include "blindpaint/discriminator.hpp"
#include "blindpaint/generator.hpp"
#include "blindpaint/losses.hpp"
#include "json.hpp"

namespace blindpaint {

enum class DiscriminatorKind { detector, patch };

std::string to_string(DiscriminatorKind kind);
DiscriminatorKind discriminator_kind_from_string(const std::string& name);

struct TrainConfig {
  LossWeights weights;
  int batch_size = 4;
  double learning_rate = 1e-4;
  std::int64_t max_steps = 1000;
  std::uint64_t seed = 0;
  CanvasSize image_size{64, 64};
  MarkerPolicy markers = MarkerPolicy::for_image_size(64);
  DiscriminatorKind disc = DiscriminatorKind::detector;
  BranchMode branches = BranchMode::two_branch;
  int encoder_width = 32;
  int bottleneck_width = 64;
  PerceptualConfig perceptual;
  bool augment = true;  // fresh pseudo markers every epoch
  bool shuffle = true;
  int snapshot_every = 10;    // epochs; 0 disables
  int checkpoint_every = 0;   // steps; 0 keeps only the final checkpoint

  GeneratorConfig generator_config() const;
  DetectorConfig detector_config() const;

  // Every violated constraint, one message each; empty when valid.
  std::vector<std::string> validation_errors() const;
  void validate() const;  // throws ConfigError listing all violations

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // FNV-1a over the canonical JSON dump.
  std::uint64_t hash() const;
};

// Parameters, optimizers and step counter for one training run. The discriminator present is
// the one selected by config.disc.
class TrainState {
 public:
  // Seeds libtorch from config.seed and initializes every module deterministically. Does not
  // validate the config, so tests may build a state with learning_rate 0.
  explicit TrainState(TrainConfig config);

  TrainConfig config;
  Generator generator{nullptr};
  Detector detector{nullptr};
  PatchDiscriminator patch{nullptr};
  PerceptualExtractor perceptual{nullptr};
  std::unique_ptr<torch::optim::Adam> gen_optimizer;
  std::unique_ptr<torch::optim::Adam> disc_optimizer;
  std::int64_t step = 0;

  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
};

// One generator update on lambda-weighted rec + per + adv, then one discriminator update on
// {I, I*, detached Ig, detached I^}. Throws Error (before touching parameters) if a loss term is
// not finite.
LossReport train_step(const Batch& batch, TrainState& state);

nlohmann::json to_json(const LossReport& report, std::int64_t step);

struct TrainOptions {
  // When set: train_log.jsonl, checkpoints/ and snapshots/ are written here.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(std::int64_t step, const LossReport&)> on_step;
};

// Fresh run from config.
TrainState train(const TrainConfig& config, const DatasetIndex& dataset,
                 const TrainOptions& options = {});
// Continues `state` until state.config.max_steps. The batch schedule depends only on the step
// number, so a resumed run replays the uninterrupted one exactly.
void train(TrainState& state, const DatasetIndex& dataset, const TrainOptions& options = {});

// The batch seen at a given global step.
Batch batch_for_step(const TrainConfig& config, const DatasetIndex& dataset, std::int64_t step);

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
// Throws Error naming the offending field on version mismatch, hash mismatch, truncation or
// missing tensors; nothing is returned unless the whole file is valid.
TrainState load_checkpoint(const std::filesystem::path& path);

// Grid with one row per sample: I, M (two-branch only), Ig, I^, I*.
torch::Tensor snapshot_grid(TrainState& state, const Batch& batch);

}  // namespace blindpaint
