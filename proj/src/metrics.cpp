#include "nnm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "nnm/errors.hpp"

namespace nnm {

EvalBuffer::EvalBuffer(std::size_t classes) : classes_(classes) {
  if (classes < 2) throw ContractError("EvalBuffer needs at least 2 classes");
}

void EvalBuffer::append(int label, std::vector<double> scores) {
  if (label < 0 || std::size_t(label) >= classes_) {
    throw ValidationError("label " + std::to_string(label) + " outside [0," + std::to_string(classes_) + ")");
  }
  if (scores.size() != classes_) throw DimensionError("score row has wrong width");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericalError("non-finite score");
  labels_.push_back(label);
  scores_.insert(scores_.end(), scores.begin(), scores.end());
}

std::vector<int> EvalBuffer::predictions() const {
  std::vector<int> out(size());
  for (std::size_t i = 0; i < size(); ++i) {
    auto row = scores_.begin() + i * classes_;
    out[i] = int(std::max_element(row, row + classes_) - row);
  }
  return out;
}

double auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  // Sort once and count wins via ranks; tied groups share credit 1/2.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, wins = 0;
  double neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double p = 0, n = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      const int l = labels[idx[j]];
      if (l != 0 && l != 1) throw ValidationError("auc_binary labels must be 0 or 1");
      (l == 1 ? p : n) += 1;
      ++j;
    }
    wins += p * neg_below + 0.5 * p * n;
    neg_below += n;
    pos += p;
    neg += n;
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetric("auc needs both positive and negative samples");
  return wins / (pos * neg);
}

double auc_multiclass(const EvalBuffer& buffer, std::vector<int>* skipped) {
  const std::size_t k = buffer.classes(), n = buffer.size();
  std::vector<bool> present(k, false);
  for (int l : buffer.labels()) present[l] = true;
  if (std::count(present.begin(), present.end(), true) < 2)
    throw UndefinedMetric("auc needs at least two classes present");
  std::vector<double> s(n);
  std::vector<int> y(n);
  auto one_vs_rest = [&](std::size_t c) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = buffer.scores()[i * k + c];
      y[i] = buffer.labels()[i] == int(c);
    }
    return auc_binary(s, y);
  };
  // Two classes reduce to the plain binary AUC of the class-1 score.
  if (k == 2) return one_vs_rest(1);
  double total = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (!present[c]) {
      if (skipped) skipped->push_back(int(c));
      continue;
    }
    total += one_vs_rest(c);
    ++used;
  }
  return total / double(used);
}

double kappa_quadratic(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t classes) {
  if (y_true.size() != y_pred.size() || y_true.empty()) throw DimensionError("kappa: bad input lengths");
  if (classes < 2) throw ContractError("kappa needs K >= 2");
  const auto o = confusion_matrix(y_true, y_pred, classes);
  const double n = double(y_true.size());
  std::vector<double> ht(classes, 0), hp(classes, 0);
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = 0; j < classes; ++j) {
      ht[i] += o[i][j];
      hp[j] += o[i][j];
    }
  const double scale = double((classes - 1) * (classes - 1));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = 0; j < classes; ++j) {
      const double d = double(i) - double(j);
      const double w = d * d / scale;
      num += w * o[i][j];
      den += w * ht[i] * hp[j] / n;
    }
  if (den == 0.0) {
    if (num == 0.0) return 1.0;
    throw UndefinedMetric("kappa: expected disagreement is zero");
  }
  return 1.0 - num / den;
}

Confusion confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t classes) {
  if (y_true.size() != y_pred.size()) throw DimensionError("confusion: length mismatch");
  Confusion m(classes, std::vector<long>(classes, 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || p < 0 || std::size_t(t) >= classes || std::size_t(p) >= classes)
      throw ValidationError("confusion: label out of range");
    ++m[t][p];
  }
  return m;
}

double accuracy(const Confusion& c) {
  long trace = 0, total = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j) {
      total += c[i][j];
      if (i == j) trace += c[i][j];
    }
  if (total == 0) throw ContractError("accuracy of an empty confusion matrix");
  return double(trace) / double(total);
}

F1Scores f1_scores(const Confusion& c) {
  const std::size_t k = c.size();
  if (k == 0) throw ContractError("empty confusion matrix");
  F1Scores out;
  out.per_class.resize(k);
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double tp = c[i][i], row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += c[i][j];
      col += c[j][i];
    }
    const double p = col > 0 ? tp / col : 0.0;
    const double r = row > 0 ? tp / row : 0.0;
    out.per_class[i] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    out.macro += out.per_class[i];
    out.weighted += out.per_class[i] * row;
    total += row;
  }
  out.macro /= double(k);
  out.weighted = total > 0 ? out.weighted / total : 0.0;
  return out;
}

const char* to_string(Task task) { return task == Task::binary ? "binary" : "multiclass"; }

Task parse_task(const std::string& name) {
  if (name == "multiclass") return Task::multiclass;
  if (name == "binary") return Task::binary;
  throw ConfigError("unknown task '" + name + "' (multiclass|binary)");
}

std::optional<double> MetricsReport::selection_score() const {
  return task == Task::binary ? auc.value : kappa.value;
}

namespace {

MetricValue guarded(auto&& fn) {
  try {
    return {fn(), ""};
  } catch (const UndefinedMetric& e) {
    return {std::nullopt, e.what()};
  }
}

nlohmann::json metric_json(const MetricValue& m) {
  if (m.value) return *m.value;
  return {{"absent", m.reason}};
}

MetricValue metric_from_json(const nlohmann::json& j) {
  if (j.is_number()) return {j.get<double>(), ""};
  return {std::nullopt, j.at("absent").get<std::string>()};
}

}  // namespace

MetricsReport evaluate(const EvalBuffer& buffer, Task task) {
  if (buffer.size() == 0) throw ContractError("evaluate on an empty buffer");
  if (task == Task::binary && buffer.classes() != 2) throw CompatibilityError("binary task needs 2 classes");
  MetricsReport r;
  r.task = task;
  r.classes = buffer.classes();
  r.samples = buffer.size();
  const auto pred = buffer.predictions();
  r.confusion = confusion_matrix(buffer.labels(), pred, buffer.classes());
  r.acc = accuracy(r.confusion);
  const auto f1 = f1_scores(r.confusion);
  r.f1_macro = f1.macro;
  r.f1_weighted = f1.weighted;
  if (task == Task::binary) {
    r.auc_aggregation = "binary (class-1 score)";
    r.auc = guarded([&] {
      std::vector<double> s(buffer.size());
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = buffer.scores()[i * 2 + 1];
      return auc_binary(s, buffer.labels());
    });
  } else {
    r.auc_aggregation = "macro one-vs-rest";
    std::vector<int> skipped;
    r.auc = guarded([&] { return auc_multiclass(buffer, &skipped); });
    if (!skipped.empty() && r.auc.value) {
      std::string list;
      for (int c : skipped) list += (list.empty() ? "" : ",") + std::to_string(c);
      r.auc_aggregation += " (absent classes skipped: " + list + ")";
    }
    r.kappa = guarded([&] { return kappa_quadratic(buffer.labels(), pred, buffer.classes()); });
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  auto line = [&](const char* key, const MetricValue& m) {
    out << key << ": ";
    if (m.value) out << *m.value << "\n";
    else out << "absent (" << m.reason << ")\n";
  };
  out << "task: " << to_string(task) << "\n";
  out << "samples: " << samples << "\n";
  out << "acc: " << acc << "\n";
  line("auc", auc);
  out << "auc_aggregation: " << auc_aggregation << "\n";
  if (task == Task::multiclass) line("kappa_quadratic", kappa);
  out << "f1_macro: " << f1_macro << "\n";
  out << "f1_weighted: " << f1_weighted << "\n";
  out << "confusion (rows = truth):\n";
  for (const auto& row : confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? " " : "  ") << std::setw(5) << row[j];
    out << "\n";
  }
  return out.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["task"] = to_string(task);
  j["classes"] = classes;
  j["samples"] = samples;
  j["acc"] = acc;
  j["auc"] = metric_json(auc);
  j["auc_aggregation"] = auc_aggregation;
  if (task == Task::multiclass) j["kappa_quadratic"] = metric_json(kappa);
  j["f1_macro"] = f1_macro;
  j["f1_weighted"] = f1_weighted;
  j["confusion"] = confusion;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("unsupported report schema");
  MetricsReport r;
  r.task = parse_task(j.at("task").get<std::string>());
  r.classes = j.at("classes").get<std::size_t>();
  r.samples = j.at("samples").get<std::size_t>();
  r.acc = j.at("acc").get<double>();
  r.auc = metric_from_json(j.at("auc"));
  r.auc_aggregation = j.at("auc_aggregation").get<std::string>();
  if (j.contains("kappa_quadratic")) r.kappa = metric_from_json(j.at("kappa_quadratic"));
  r.f1_macro = j.at("f1_macro").get<double>();
  r.f1_weighted = j.at("f1_weighted").get<double>();
  r.confusion = j.at("confusion").get<Confusion>();
  return r;
}

}  // namespace nnm
