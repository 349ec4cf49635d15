#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nnm/image.hpp"

namespace nnm {

struct Record {
  std::string filename;  // relative to the manifest root
  int label = 0;
  std::optional<int> fold;  // pinned split, when the CSV has a fold column
};

struct Manifest {
  std::string root;
  std::vector<Record> records;
  std::size_t classes = 0;

  std::string path_of(std::size_t i) const;
  std::vector<std::size_t> class_counts() const;
  Manifest subset(const std::vector<std::size_t>& indices) const;
};

// CSV with header `filename,label[,fold]`. Every file must exist under `root`
// (all missing paths are reported in one error). Duplicates and bad labels
// are errors naming the line. `classes` is max label + 1 unless given.
Manifest load_manifest(const std::string& csv_path, const std::string& root,
                       std::optional<std::size_t> classes = std::nullopt);
void write_manifest(const std::string& csv_path, const Manifest& manifest);

// Grades >= threshold become 1, the rest 0.
Manifest relabel_binary(const Manifest& manifest, int threshold = 2);

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<int> fold;  // per record
  std::vector<std::string> warnings;

  std::vector<std::size_t> members(int f) const;
  std::vector<std::size_t> complement(int f) const;
};

// Per class: seeded shuffle, then round-robin over folds. The starting fold
// carries over from one class to the next so fold totals stay balanced too.
FoldPlan stratified_kfold(const Manifest& manifest, std::size_t k, std::uint64_t seed);

// One pass over the decoded (resized) images.
NormStats compute_norm_stats(const Manifest& manifest, std::size_t size);

struct SynthOptions {
  std::size_t per_class = 8;
  std::size_t classes = 5;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

// How a synthetic image was drawn.
struct SynthInfo {
  std::size_t blobs = 0;
};

Image synth_image(std::size_t label, std::size_t size, std::uint64_t seed, std::uint64_t index,
                  SynthInfo* info = nullptr);

// Writes <out_dir>/img_<label>_<i>.png plus <out_dir>/manifest.csv.
Manifest synth_generate(const std::string& out_dir, const SynthOptions& options);

}  // namespace nnm
