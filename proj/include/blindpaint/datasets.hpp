#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "blindpaint/image_io.hpp"
#include "blindpaint/marker_synth.hpp"

namespace blindpaint {

enum class Split { train, val, test };
enum class Layout { paired, clean_only };

std::string to_string(Split split);
std::string to_string(Layout layout);
Split split_from_string(const std::string& name);
Layout layout_from_string(const std::string& name);

// On disk: <root>/<split>/clean/*.png with optional siblings corrupted/, mask/ and boxes.jsonl.
struct DatasetEntry {
  std::filesystem::path clean;
  std::optional<std::filesystem::path> corrupted;
  std::optional<std::filesystem::path> mask;
  std::optional<std::vector<MarkerAnnotation>> boxes;  // in native image coordinates
};

struct DatasetIndex {
  std::filesystem::path root;
  Split split = Split::train;
  Layout layout = Layout::clean_only;
  CanvasSize image_size{64, 64};
  std::vector<DatasetEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::filesystem::path split_dir() const;
};

struct CorruptedSample {
  torch::Tensor corrupted;  // I,  [3, H, W]
  torch::Tensor clean;      // I*, [3, H, W]
  torch::Tensor mask;       // M,  [H, W] in {0, 1}
  std::vector<MarkerAnnotation> boxes;
};

// Lexicographically ordered. Every clean image is decoded once to validate it (and, for the
// paired layout, to check the corrupted twin's size). Throws Error when the split holds no
// images or a paired clean image has no corrupted twin.
DatasetIndex scan_dataset(const std::filesystem::path& root, Layout layout, Split split,
                          CanvasSize image_size);

// Loads entry i resized to index.image_size.
//
// clean_only: markers are synthesized from policy with a seed derived from
//   (policy.rng_seed, epoch_seed, i).
// paired: the stored corruption is used; its mask comes from mask/ when present (otherwise from
//   the pixel difference with the clean image) and boxes from boxes.jsonl (otherwise from the
//   mask's connected components). With augment_paired, pseudo markers are additionally stamped
//   on the corrupted input only.
CorruptedSample load_sample(const DatasetIndex& index, std::size_t i, const MarkerPolicy& policy,
                            std::uint64_t epoch_seed, bool augment_paired = false);

struct Batch {
  torch::Tensor clean;      // [B, 3, H, W]
  torch::Tensor corrupted;  // [B, 3, H, W]
  torch::Tensor mask;       // [B, 1, H, W]
  std::vector<std::vector<MarkerAnnotation>> boxes;
  std::vector<std::size_t> indices;

  std::int64_t size() const { return clean.size(0); }
};

Batch collate(const std::vector<CorruptedSample>& samples, std::vector<std::size_t> indices = {});

// Index groups for one epoch; the last group may be short. Without a seed the groups follow
// index order, otherwise a seeded permutation.
std::vector<std::vector<std::size_t>> batch_plan(std::size_t count, std::size_t batch_size,
                                                 std::optional<std::uint64_t> shuffle_seed);

// Lazily materialized epoch of batches.
class BatchSequence {
 public:
  BatchSequence(const DatasetIndex& index, std::size_t batch_size,
                std::optional<std::uint64_t> shuffle_seed, MarkerPolicy policy,
                std::uint64_t epoch_seed, bool augment_paired = false);

  std::size_t size() const { return plan_.size(); }
  Batch at(std::size_t k) const;
  const std::vector<std::vector<std::size_t>>& plan() const { return plan_; }

 private:
  const DatasetIndex* index_;
  std::vector<std::vector<std::size_t>> plan_;
  MarkerPolicy policy_;
  std::uint64_t epoch_seed_;
  bool augment_paired_;
};

BatchSequence make_batches(const DatasetIndex& index, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed, const MarkerPolicy& policy,
                           std::uint64_t epoch_seed = 0, bool augment_paired = false);

// Smooth tissue-like test image: low-frequency blobs over a gradient plus fine texture, values
// in roughly [0.1, 0.75]. Deterministic in (size, seed).
torch::Tensor synthetic_phantom(CanvasSize size, std::uint64_t seed);

// Writes `count` phantoms as <root>/<split>/clean/img_XXXX.png.
void write_phantom_corpus(const std::filesystem::path& root, Split split, int count,
                          CanvasSize size, std::uint64_t seed);

// boxes.jsonl I/O: one {"file", "boxes": [[x,y,w,h],...], "classes": [...]} object per line.
struct BoxesRecord {
  std::string file;
  std::vector<MarkerAnnotation> boxes;
};
std::vector<BoxesRecord> read_boxes_jsonl(const std::filesystem::path& path);
void write_boxes_jsonl(const std::filesystem::path& path, const std::vector<BoxesRecord>& records);
std::string boxes_json_line(const BoxesRecord& record);

}  // namespace blindpaint
