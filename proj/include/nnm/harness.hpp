#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nnm/augment.hpp"
#include "nnm/data.hpp"
#include "nnm/metrics.hpp"
#include "nnm/model.hpp"
#include "nnm/optim.hpp"

namespace nnm {

/// Everything a run needs. Validated as a whole before any work starts and
/// embedded verbatim in every checkpoint and report.
struct RunConfig {
  ModelConfig model;
  AugPolicy aug;
  OptimizerKind optimizer = OptimizerKind::adamp;
  OptimizerHyper hyper;
  Schedule schedule;  // total_epochs always mirrors `epochs`
  std::size_t batch_size = 32;
  int epochs = 1000;
  int eval_every = 10;
  std::uint64_t seed = 0;
  std::size_t image_size = 224;
  Task task = Task::multiclass;
  int binary_threshold = 2;  // grade >= threshold is positive for binary tasks
  bool deterministic = true;

  std::string train_manifest;
  std::string train_root;  // defaults to the manifest's directory
  std::string eval_manifest;  // empty: evaluate on the training set
  std::string eval_root;
  std::string out_dir = "runs/default";
  std::optional<NormStats> norm;  // computed from the training set when absent

  void validate() const;
  nlohmann::json to_json() const;
  // Strict: unknown keys anywhere are ConfigErrors. Relative data paths are
  // resolved against `base_dir` when given.
  static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);
};

/// Decoded images held in memory, already resized for the pipeline.
struct Dataset {
  Manifest manifest;
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }
  int label(std::size_t i) const { return manifest.records[i].label; }
};

// Decodes every record and resizes it to side x side.
Dataset load_dataset(const Manifest& manifest, std::size_t side);
NormStats dataset_norm_stats(const Dataset& data);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<MetricsReport> eval;

  nlohmann::json to_json() const;
  static EpochLog from_json(const nlohmann::json& j);
};

struct TrainLog {
  nlohmann::json config;  // RunConfig as run
  std::vector<EpochLog> epochs;  // strictly increasing
  int best_epoch = -1;
  std::optional<double> best_score;
  std::optional<MetricsReport> final_report;  // of the retained best checkpoint
  double initial_loss = 0.0;  // first batch of a fresh run
  std::size_t parameters = 0;

  void append(EpochLog entry);
  nlohmann::json to_json() const;
  static TrainLog from_json(const nlohmann::json& j);
};

struct TrainOptions {
  std::string resume;  // path of a last-state checkpoint
  int stop_after = -1;  // stop after this epoch (for interruption tests); -1 runs all
  bool write_files = true;
  std::function<void(const EpochLog&)> on_epoch;  // progress hook
};

struct TrainResult {
  TrainLog log;
  Checkpoint best;  // model state of the retained checkpoint
  Checkpoint last;  // full state after the last finished epoch
};

// In-memory variant: the caller supplies the datasets (eval may be the train set).
TrainResult train_on(const RunConfig& config, const Dataset& train, const Dataset& eval, const NormStats& norm,
                     const TrainOptions& options = {});
// Loads data from the config paths and writes best.ckpt, last.ckpt and
// train_log.json under out_dir.
TrainResult cmd_train(const RunConfig& config, const TrainOptions& options = {});

// Eval-mode pass over a dataset.
MetricsReport evaluate_model(Model<float>& model, const Dataset& data, const NormStats& norm, Task task,
                             std::size_t batch_size = 32);
// Mean soft-label cross-entropy of one batch in train mode, for init checks.
double batch_loss(Model<float>& model, const std::vector<Image>& images, const std::vector<int>& labels,
                  const NormStats& norm, std::uint64_t seed);

// Rebuilds the model from a checkpoint's embedded config and evaluates it.
MetricsReport cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& root = "");
MetricsReport eval_checkpoint(const Checkpoint& checkpoint, const Manifest& manifest);

struct FoldOutcome {
  int fold = 0;
  std::optional<MetricsReport> report;
  std::string error;  // set when the fold failed
};

struct CrossvalReport {
  std::size_t k = 0;
  std::vector<FoldOutcome> folds;
  // metric -> {mean, std over successful folds}
  std::vector<std::pair<std::string, std::pair<double, double>>> aggregate;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

CrossvalReport crossval_on(const RunConfig& config, const Manifest& manifest, const FoldPlan& plan,
                           const TrainOptions& options = {});
CrossvalReport cmd_crossval(const RunConfig& config, std::size_t k, const TrainOptions& options = {});

struct AblationRow {
  std::string name;
  bool ilrb = false, da = false, dropout = false, adamp = false, relu6 = false;
  std::optional<double> auc, kappa;
  std::string error;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

// "table1": the cumulative six-row ladder. "single": the base config alone.
std::vector<AblationRow> ablation_grid(const std::string& grid);
RunConfig apply_ablation_row(RunConfig base, const AblationRow& row);
AblationTable cmd_ablate(const RunConfig& base, const std::string& grid, const TrainOptions& options = {});

// Writes a row of `count` augmented views next to the original, as PNG.
void augment_preview(const RunConfig& config, const std::string& image, const std::string& out, std::size_t count);

}  // namespace nnm
