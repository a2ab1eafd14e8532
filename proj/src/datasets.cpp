#include "blindpaint/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"
#include <opencv2/imgproc.hpp>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(Layout layout) { return layout == Layout::paired ? "paired" : "clean_only"; }

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

Layout layout_from_string(const std::string& name) {
  if (name == "paired") return Layout::paired;
  if (name == "clean_only") return Layout::clean_only;
  throw ConfigError("unknown layout '" + name + "' (expected paired or clean_only)");
}

fs::path DatasetIndex::split_dir() const { return root / to_string(split); }

namespace {

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

// Mask pixels where any channel differs by more than half a quantization step.
torch::Tensor difference_mask(const torch::Tensor& corrupted, const torch::Tensor& clean) {
  return ((corrupted - clean).abs().amax(0) > 0.5F / 255.0F).to(torch::kFloat32);
}

std::vector<MarkerAnnotation> component_boxes(const torch::Tensor& mask) {
  auto m = (mask > 0).to(torch::kUInt8).contiguous();
  cv::Mat bin(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8U, m.data_ptr());
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(bin, labels, stats, centroids, 8, CV_32S);
  std::vector<MarkerAnnotation> boxes;
  for (int k = 1; k < n; ++k) {
    boxes.push_back({stats.at<int>(k, cv::CC_STAT_LEFT), stats.at<int>(k, cv::CC_STAT_TOP),
                     stats.at<int>(k, cv::CC_STAT_WIDTH), stats.at<int>(k, cv::CC_STAT_HEIGHT),
                     MarkerClass::marker});
  }
  return boxes;
}

MarkerAnnotation scale_box(const MarkerAnnotation& b, CanvasSize from, CanvasSize to) {
  if (from == to) return b;
  const double sx = static_cast<double>(to.width) / from.width;
  const double sy = static_cast<double>(to.height) / from.height;
  const int x0 = std::clamp(static_cast<int>(std::floor(b.x_min * sx)), 0, to.width - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(b.y_min * sy)), 0, to.height - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil((b.x_min + b.width) * sx)), x0 + 1, to.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil((b.y_min + b.height) * sy)), y0 + 1, to.height);
  return {x0, y0, x1 - x0, y1 - y0, b.label};
}

}  // namespace

DatasetIndex scan_dataset(const fs::path& root, Layout layout, Split split, CanvasSize image_size) {
  if (!fs::is_directory(root)) throw Error("dataset root does not exist: " + root.string());
  if (image_size.height <= 0 || image_size.width <= 0) {
    throw ConfigError("dataset image size must be positive");
  }
  DatasetIndex index;
  index.root = root;
  index.split = split;
  index.layout = layout;
  index.image_size = image_size;

  const fs::path dir = index.split_dir();
  const auto clean_files = list_images(dir / "clean");
  if (clean_files.empty()) throw Error("no images found in " + (dir / "clean").string());

  std::map<std::string, std::vector<MarkerAnnotation>> boxes_by_file;
  if (fs::exists(dir / "boxes.jsonl")) {
    for (auto& rec : read_boxes_jsonl(dir / "boxes.jsonl")) boxes_by_file[rec.file] = std::move(rec.boxes);
  }

  for (const auto& clean : clean_files) {
    DatasetEntry entry;
    entry.clean = clean;
    const auto name = clean.filename();
    const auto clean_image = read_image(clean);
    if (layout == Layout::paired) {
      const auto twin = dir / "corrupted" / name;
      if (!fs::exists(twin)) {
        throw Error("paired layout: clean image " + clean.string() + " has no corrupted twin " +
                    twin.string());
      }
      const auto corrupted = read_image(twin);
      if (!(blindpaint::image_size(corrupted) == blindpaint::image_size(clean_image))) {
        throw Error("paired layout: " + twin.string() + " size differs from its clean image");
      }
      entry.corrupted = twin;
      if (fs::exists(dir / "mask" / name)) entry.mask = dir / "mask" / name;
      if (auto it = boxes_by_file.find(name.string()); it != boxes_by_file.end()) {
        entry.boxes = it->second;
      }
    }
    index.entries.push_back(std::move(entry));
  }
  return index;
}

CorruptedSample load_sample(const DatasetIndex& index, std::size_t i, const MarkerPolicy& policy,
                            std::uint64_t epoch_seed, bool augment_paired) {
  if (i >= index.size()) {
    throw Error("sample index " + std::to_string(i) + " out of range (" +
                std::to_string(index.size()) + " entries)");
  }
  const auto& entry = index.entries[i];
  const CanvasSize target = index.image_size;
  const std::uint64_t seed = mix_seed(mix_seed(policy.rng_seed, epoch_seed), i);

  CorruptedSample sample;
  const auto native_clean = read_image(entry.clean);
  sample.clean = resize_bilinear(native_clean, target);

  if (index.layout == Layout::clean_only) {
    const auto specs = sample_marker_specs(policy, target, seed);
    auto stamped = stamp_markers(sample.clean, specs);
    sample.corrupted = std::move(stamped.corrupted);
    sample.mask = std::move(stamped.mask);
    sample.boxes = std::move(stamped.boxes);
    return sample;
  }

  if (!entry.corrupted) throw Error("paired entry without corrupted image: " + entry.clean.string());
  const auto native_corrupted = read_image(*entry.corrupted);
  const CanvasSize native = image_size(native_corrupted);
  const auto native_mask =
      entry.mask ? read_mask(*entry.mask) : difference_mask(native_corrupted, native_clean);
  std::vector<MarkerAnnotation> native_boxes =
      entry.boxes ? *entry.boxes : component_boxes(native_mask);

  sample.corrupted = resize_bilinear(native_corrupted, target);
  sample.mask = resize_nearest(native_mask, target);
  for (const auto& b : native_boxes) sample.boxes.push_back(scale_box(b, native, target));

  if (augment_paired) {
    const auto specs = sample_marker_specs(policy, target, seed);
    auto stamped = stamp_markers(sample.corrupted, specs);
    sample.corrupted = std::move(stamped.corrupted);
    sample.mask = torch::maximum(sample.mask, stamped.mask);
    sample.boxes.insert(sample.boxes.end(), stamped.boxes.begin(), stamped.boxes.end());
  }
  return sample;
}

Batch collate(const std::vector<CorruptedSample>& samples, std::vector<std::size_t> indices) {
  if (samples.empty()) throw Error("cannot collate an empty batch");
  std::vector<torch::Tensor> clean, corrupted, mask;
  Batch batch;
  for (const auto& s : samples) {
    if (!(image_size(s.clean) == image_size(samples.front().clean))) {
      throw Error("batch items must share spatial size");
    }
    clean.push_back(s.clean);
    corrupted.push_back(s.corrupted);
    mask.push_back(s.mask.unsqueeze(0));
    batch.boxes.push_back(s.boxes);
  }
  batch.clean = torch::stack(clean);
  batch.corrupted = torch::stack(corrupted);
  batch.mask = torch::stack(mask);
  batch.indices = std::move(indices);
  return batch;
}

std::vector<std::vector<std::size_t>> batch_plan(std::size_t count, std::size_t batch_size,
                                                 std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const auto end = std::min(count, start + batch_size);
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

BatchSequence::BatchSequence(const DatasetIndex& index, std::size_t batch_size,
                             std::optional<std::uint64_t> shuffle_seed, MarkerPolicy policy,
                             std::uint64_t epoch_seed, bool augment_paired)
    : index_(&index),
      plan_(batch_plan(index.size(), batch_size, shuffle_seed)),
      policy_(policy),
      epoch_seed_(epoch_seed),
      augment_paired_(augment_paired) {}

Batch BatchSequence::at(std::size_t k) const {
  const auto& ids = plan_.at(k);
  std::vector<CorruptedSample> samples;
  samples.reserve(ids.size());
  for (auto i : ids) samples.push_back(load_sample(*index_, i, policy_, epoch_seed_, augment_paired_));
  return collate(samples, ids);
}

BatchSequence make_batches(const DatasetIndex& index, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed, const MarkerPolicy& policy,
                           std::uint64_t epoch_seed, bool augment_paired) {
  return BatchSequence(index, batch_size, shuffle_seed, policy, epoch_seed, augment_paired);
}

torch::Tensor synthetic_phantom(CanvasSize size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int h = size.height;
  const int w = size.width;
  const double side = std::min(h, w);

  const double base = 0.3 + 0.15 * u(rng);
  const double gx = (u(rng) - 0.5) * 0.2;
  const double gy = (u(rng) - 0.5) * 0.2;
  struct Blob { double r, c, sigma, amp; };
  std::vector<Blob> blobs(6);
  for (auto& b : blobs) {
    b = {u(rng) * h, u(rng) * w, side * (0.08 + 0.17 * u(rng)), (u(rng) - 0.4) * 0.45};
  }
  struct Wave { double fr, fc, phase, amp; };
  std::vector<Wave> waves(3);
  for (auto& wv : waves) {
    wv = {(u(rng) - 0.5) * 1.2, (u(rng) - 0.5) * 1.2, u(rng) * 6.283185307179586, 0.02 + 0.02 * u(rng)};
  }
  std::array<double, 3> tint{};
  for (auto& t : tint) t = (u(rng) - 0.5) * 0.04;

  auto image = torch::empty({3, h, w}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double v = base + gx * (c / side - 0.5) + gy * (r / side - 0.5);
      for (const auto& b : blobs) {
        const double d2 = (r - b.r) * (r - b.r) + (c - b.c) * (c - b.c);
        v += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
      }
      for (const auto& wv : waves) v += wv.amp * std::sin(wv.fr * r + wv.fc * c + wv.phase);
      for (int ch = 0; ch < 3; ++ch) {
        acc[ch][r][c] = static_cast<float>(std::clamp(v + tint[ch], 0.1, 0.75));
      }
    }
  }
  return image;
}

void write_phantom_corpus(const fs::path& root, Split split, int count, CanvasSize size,
                          std::uint64_t seed) {
  const auto dir = root / to_string(split) / "clean";
  fs::create_directories(dir);
  for (int k = 0; k < count; ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04d.png", k);
    write_png(dir / name, synthetic_phantom(size, mix_seed(seed, static_cast<std::uint64_t>(k))));
  }
}

std::vector<BoxesRecord> read_boxes_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<BoxesRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      BoxesRecord rec;
      rec.file = j.at("file").get<std::string>();
      const auto& boxes = j.at("boxes");
      const auto& classes = j.at("classes");
      if (boxes.size() != classes.size()) throw Error("boxes/classes length mismatch");
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const auto& b = boxes[k];
        if (b.size() != 4) throw Error("box must have 4 numbers");
        rec.boxes.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>(),
                             marker_class_from_string(classes[k].get<std::string>())});
      }
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::string boxes_json_line(const BoxesRecord& record) {
  json boxes = json::array();
  json classes = json::array();
  for (const auto& b : record.boxes) {
    boxes.push_back({b.x_min, b.y_min, b.width, b.height});
    classes.push_back(to_string(b.label));
  }
  json j;
  j["file"] = record.file;
  j["boxes"] = std::move(boxes);
  j["classes"] = std::move(classes);
  return j.dump();
}

void write_boxes_jsonl(const fs::path& path, const std::vector<BoxesRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& rec : records) out << boxes_json_line(rec) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace blindpaint
