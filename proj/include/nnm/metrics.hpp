#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace nnm {

/// Scores collected during evaluation: one row of K scores per sample.
class EvalBuffer {
 public:
  explicit EvalBuffer(std::size_t classes);

  void append(int label, std::vector<double> scores);
  std::size_t size() const { return labels_.size(); }
  std::size_t classes() const { return classes_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<double>& scores() const { return scores_; }  // row-major [n, K]
  std::vector<int> predictions() const;                           // argmax, first max wins

 private:
  std::size_t classes_;
  std::vector<int> labels_;
  std::vector<double> scores_;
};

using Confusion = std::vector<std::vector<long>>;  // [true][pred]

// Mann-Whitney: (wins + ties/2) / (P * N). Throws UndefinedMetric when a class is missing.
double auc_binary(const std::vector<double>& scores, const std::vector<int>& labels);
// Unweighted mean of one-vs-rest AUCs over the classes present in the labels.
// Absent class indices are written to `skipped` when given.
double auc_multiclass(const EvalBuffer& buffer, std::vector<int>* skipped = nullptr);
double kappa_quadratic(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t classes);

Confusion confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t classes);
double accuracy(const Confusion& confusion);

struct F1Scores {
  double macro = 0.0;
  double weighted = 0.0;
  std::vector<double> per_class;
};
F1Scores f1_scores(const Confusion& confusion);

// A metric value or the reason it is undefined. Never a silent 0.
struct MetricValue {
  std::optional<double> value;
  std::string reason;
};

enum class Task { multiclass, binary };

const char* to_string(Task task);
Task parse_task(const std::string& name);

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;

  Task task = Task::multiclass;
  std::size_t classes = 0;
  std::size_t samples = 0;
  double acc = 0.0;
  MetricValue auc;
  MetricValue kappa;  // multiclass only
  double f1_macro = 0.0;
  double f1_weighted = 0.0;
  Confusion confusion;
  std::string auc_aggregation;

  // The model-selection score: kappa for grading, AUC for binary tasks.
  std::optional<double> selection_score() const;

  std::string to_text() const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport evaluate(const EvalBuffer& buffer, Task task);

}  // namespace nnm
