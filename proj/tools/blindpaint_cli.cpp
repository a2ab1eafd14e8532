// blindpaint: synthesize marker corpora, train, evaluate and run blind marker removal.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "blindpaint/datasets.hpp"
#include "blindpaint/error.hpp"
#include "blindpaint/image_io.hpp"
#include "blindpaint/metrics.hpp"
#include "blindpaint/run_config.hpp"
#include "blindpaint/trainer.hpp"

namespace fs = std::filesystem;
using namespace blindpaint;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;

  RunConfig resolve() const {
    RunConfig config;
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& [k, v] : overrides) config.set(k, v);
    return config;
  }
};

void add_config_options(CLI::App* sub, ConfigArgs& args) {
  sub->add_option("-c,--config", args.config_path, "key = value configuration file");
  for (const auto& key : RunConfig::keys()) {
    std::string flag = "--" + key.name;
    std::replace(flag.begin() + 2, flag.end(), '_', '-');
    std::string help = key.help;
    if (!key.default_value.empty()) help += " [" + key.default_value + "]";
    sub->add_option_function<std::string>(
        flag, [&args, name = key.name](const std::string& v) { args.overrides.emplace_back(name, v); },
        help);
  }
}

void fail_on_errors(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::string msg = "configuration errors:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

std::vector<std::string> dataset_errors(const RunConfig& config, Split split) {
  if (!config.is_set("data_root")) return {"data_root: dataset path is not set"};
  const fs::path clean = config.data_root() / to_string(split) / "clean";
  if (!fs::is_directory(clean)) return {"data_root: no ground-truth directory " + clean.string()};
  return {};
}

// synth ----------------------------------------------------------------------

int cmd_synth(const RunConfig& config) {
  auto errors = config.validation_errors();
  if (!config.is_set("data_root")) errors.emplace_back("data_root: dataset path is not set");
  fail_on_errors(errors);
  const auto root = config.data_root();
  const auto policy = config.marker_policy();
  int splits = 0;
  for (auto split : {Split::train, Split::val, Split::test}) {
    const auto dir = root / to_string(split);
    if (!fs::is_directory(dir / "clean")) continue;
    const auto index = scan_dataset(root, Layout::clean_only, split, config.image_size());
    fs::create_directories(dir / "corrupted");
    fs::create_directories(dir / "mask");
    std::vector<BoxesRecord> records;
    for (std::size_t i = 0; i < index.size(); ++i) {
      const auto& clean_path = index.entries[i].clean;
      const auto name = clean_path.filename();
      const auto clean = read_image(clean_path);
      const auto specs =
          sample_marker_specs(policy, image_size(clean), mix_seed(mix_seed(policy.rng_seed, 0), i));
      const auto stamped = stamp_markers(clean, specs);
      if (specs.empty()) {
        fs::copy_file(clean_path, dir / "corrupted" / name, fs::copy_options::overwrite_existing);
      } else {
        write_png(dir / "corrupted" / name, stamped.corrupted);
      }
      write_png(dir / "mask" / name, stamped.mask);
      records.push_back({name.string(), stamped.boxes});
    }
    write_boxes_jsonl(dir / "boxes.jsonl", records);
    std::cout << to_string(split) << ": " << index.size() << " images\n";
    ++splits;
  }
  if (splits == 0) throw ConfigError("data_root: no <split>/clean directory under " + root.string());
  return kExitOk;
}

// train ----------------------------------------------------------------------

int cmd_train(const RunConfig& config, const std::string& resume) {
  auto errors = config.validation_errors();
  if (errors.empty()) {
    auto more = dataset_errors(config, config.split());
    errors.insert(errors.end(), more.begin(), more.end());
  }
  fail_on_errors(errors);

  const auto run_dir = config.run_dir();
  fs::create_directories(run_dir);
  {
    std::ofstream echo(run_dir / "config.txt", std::ios::trunc);
    echo << config.echo();
  }
  const auto dataset = scan_dataset(config.data_root(), config.layout(), config.split(), config.image_size());
  std::optional<TrainState> state;
  if (resume.empty()) {
    fs::remove(run_dir / "train_log.jsonl");
    const auto train_config = config.train_config();
    train_config.validate();
    state.emplace(train_config);
  } else {
    state.emplace(load_checkpoint(resume));
    state->config.max_steps = config.train_config().max_steps;
  }
  TrainOptions options;
  options.run_dir = run_dir;
  options.on_step = [](std::int64_t step, const LossReport& r) {
    if (step % 50 == 0) {
      std::printf("step %lld  rec %.4f  per %.4f  adv %.4f  det %.4f\n", static_cast<long long>(step),
                  r.rec, r.per, r.adv, r.total_disc);
      std::fflush(stdout);
    }
  };
  train(*state, dataset, options);
  std::cout << "finished at step " << state->step << "; checkpoint "
            << (run_dir / "checkpoints" / "final.ckpt").string() << '\n';
  return kExitOk;
}

// eval -----------------------------------------------------------------------

int cmd_eval(RunConfig config, const std::string& checkpoint, const std::string& stub,
             const std::string& out_dir) {
  if (checkpoint.empty() == stub.empty()) {
    throw ConfigError("eval needs exactly one of --checkpoint or --stub");
  }
  auto errors = config.validation_errors();
  if (errors.empty()) {
    auto more = dataset_errors(config, config.eval_split());
    errors.insert(errors.end(), more.begin(), more.end());
  }
  fail_on_errors(errors);

  Restorer restore;
  std::optional<TrainState> state;
  if (!checkpoint.empty()) {
    state.emplace(load_checkpoint(checkpoint));
    if (!config.is_explicit("image_size")) {
      config.set("image_size", std::to_string(state->config.image_size.height));
    }
    restore = generator_restorer(state->generator);
  } else if (stub == "identity") {
    restore = [](const CorruptedSample& s) { return s.corrupted; };
  } else if (stub == "oracle") {
    restore = [](const CorruptedSample& s) { return s.clean; };
  } else {
    throw ConfigError("--stub must be identity or oracle");
  }
  const auto dataset =
      scan_dataset(config.data_root(), config.layout(), config.eval_split(), config.image_size());
  const auto evaluation = evaluate(restore, dataset, config.marker_policy());
  const fs::path dir = out_dir.empty() ? config.run_dir() / ("eval_" + to_string(config.eval_split())) : fs::path(out_dir);
  write_reports(evaluation, dir);
  std::printf("%-9s %-10s %s\n", "restored", "full", format_row(evaluation.full).c_str());
  std::printf("%-9s %-10s %s\n", "restored", "mask_only", format_row(evaluation.mask_only).c_str());
  std::printf("%-9s %-10s %s\n", "baseline", "full", format_row(evaluation.baseline_full).c_str());
  std::printf("%-9s %-10s %s\n", "baseline", "mask_only", format_row(evaluation.baseline_mask_only).c_str());
  std::printf("reports written to %s\n", dir.string().c_str());
  return kExitOk;
}

// infer ----------------------------------------------------------------------

torch::Tensor pad_to_multiple(const torch::Tensor& image, int multiple) {
  const auto h = image.size(1);
  const auto w = image.size(2);
  const auto ph = (multiple - h % multiple) % multiple;
  const auto pw = (multiple - w % multiple) % multiple;
  if (ph == 0 && pw == 0) return image;
  namespace F = torch::nn::functional;
  return F::pad(image.unsqueeze(0), F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate)).squeeze(0);
}

int cmd_infer(const RunConfig& config, const std::string& checkpoint, const fs::path& input,
              const fs::path& output, bool emit_mask, bool emit_detections) {
  fail_on_errors(config.validation_errors());
  if (!fs::is_directory(input)) throw ConfigError("--input is not a directory: " + input.string());
  auto state = load_checkpoint(checkpoint);
  if (emit_detections && !state.detector) {
    throw ConfigError("--emit-detections needs a checkpoint trained with the detector discriminator");
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(output);

  torch::NoGradGuard guard;
  state.generator->eval();
  if (state.detector) state.detector->eval();
  std::vector<BoxesRecord> records;
  int failures = 0;
  for (const auto& file : files) {
    try {
      const auto image = read_image(file);
      const auto size = image_size(image);
      const auto padded = pad_to_multiple(image, 16);
      const auto out = state.generator->forward(padded);
      using torch::indexing::Slice;
      auto crop = [&](const torch::Tensor& t) {
        return t.index({Slice(), Slice(0, size.height), Slice(0, size.width)});
      };
      write_png(output / file.filename(), crop(out.composed));
      if (emit_mask) write_png(output / "masks" / file.filename(), crop(out.mask));
      if (emit_detections) {
        const auto dets = decode_detections(state.detector->forward(padded), state.detector->config().anchors,
                                            config.conf_threshold(), config.nms_iou());
        BoxesRecord rec{file.filename().string(), {}};
        for (const auto& d : dets) {
          const int x0 = static_cast<int>(std::floor(d.box.x));
          const int y0 = static_cast<int>(std::floor(d.box.y));
          const int x1 = std::min(size.width, static_cast<int>(std::ceil(d.box.x + d.box.width)));
          const int y1 = std::min(size.height, static_cast<int>(std::ceil(d.box.y + d.box.height)));
          if (x1 > x0 && y1 > y0) rec.boxes.push_back({x0, y0, x1 - x0, y1 - y0, d.label});
        }
        records.push_back(std::move(rec));
      }
    } catch (const std::exception& e) {
      std::cerr << "error: " << file.string() << ": " << e.what() << '\n';
      ++failures;
    }
  }
  if (emit_detections) write_boxes_jsonl(output / "boxes.jsonl", records);
  std::cout << files.size() - failures << " of " << files.size() << " images restored into "
            << output.string() << '\n';
  return failures > 0 ? kExitRuntime : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blindpaint - mask-free removal of artificial markers from medical images"};
  app.require_subcommand(1);

  ConfigArgs synth_args, train_args, eval_args, infer_args;
  auto* synth = app.add_subcommand("synth", "stamp synthetic markers onto <data_root>/<split>/clean");
  add_config_options(synth, synth_args);

  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train the generator and discriminator");
  add_config_options(train_cmd, train_args);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");

  std::string eval_checkpoint, eval_stub, eval_out;
  auto* eval = app.add_subcommand("eval", "score a checkpoint with PSNR/SSIM/MSE");
  add_config_options(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate");
  eval->add_option("--stub", eval_stub, "evaluate a reference restorer instead: identity or oracle");
  eval->add_option("--out", eval_out, "report directory [<runs_dir>/<name>/eval_<split>]");

  std::string infer_checkpoint, infer_input, infer_output;
  bool emit_mask = false;
  bool emit_detections = false;
  auto* infer = app.add_subcommand("infer", "remove markers from every image in a directory");
  add_config_options(infer, infer_args);
  infer->add_option("--checkpoint", infer_checkpoint, "trained checkpoint")->required();
  infer->add_option("--input", infer_input, "directory of input images")->required();
  infer->add_option("--output", infer_output, "directory for restored images")->required();
  infer->add_flag("--emit-mask", emit_mask, "also write the predicted mask under <output>/masks/");
  infer->add_flag("--emit-detections", emit_detections, "also write detector boxes to <output>/boxes.jsonl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_args.resolve());
    if (*train_cmd) return cmd_train(train_args.resolve(), resume);
    if (*eval) return cmd_eval(eval_args.resolve(), eval_checkpoint, eval_stub, eval_out);
    if (*infer) {
      return cmd_infer(infer_args.resolve(), infer_checkpoint, infer_input, infer_output, emit_mask,
                       emit_detections);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
