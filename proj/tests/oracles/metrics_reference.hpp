#pragma once

// Brute-force metric definitions, written straight from the formulas with no
// sorting or shared helpers.

#include <cstddef>
#include <vector>

namespace oracle {

// Pairwise count over every (positive, negative) pair.
inline double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) num += 1;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  return num / pairs;
}

// scores row-major [n, k]
inline double auc_ovr(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t k) {
  double total = 0;
  int used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    bool any = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(scores[i * k + c]);
      y.push_back(labels[i] == int(c) ? 1 : 0);
      any = any || labels[i] == int(c);
    }
    if (!any) continue;
    total += auc_pairs(s, y);
    ++used;
  }
  return total / used;
}

// Direct formula with per-sample loops for O and E.
inline double kappa(const std::vector<int>& a, const std::vector<int>& b, std::size_t k) {
  const double n = double(a.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double o = 0, ti = 0, pj = 0;
      for (std::size_t s = 0; s < a.size(); ++s) {
        if (a[s] == int(i) && b[s] == int(j)) o += 1;
        if (a[s] == int(i)) ti += 1;
        if (b[s] == int(j)) pj += 1;
      }
      const double w = (double(i) - double(j)) * (double(i) - double(j)) / ((k - 1.0) * (k - 1.0));
      num += w * o;
      den += w * ti * pj / n;
    }
  return 1.0 - num / den;
}

struct F1 {
  double macro, weighted;
};

// Per-class precision and recall from raw label vectors.
inline F1 f1(const std::vector<int>& a, const std::vector<int>& b, std::size_t k) {
  F1 out{0, 0};
  for (std::size_t c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t s = 0; s < a.size(); ++s) {
      if (a[s] == int(c) && b[s] == int(c)) tp += 1;
      if (a[s] != int(c) && b[s] == int(c)) fp += 1;
      if (a[s] == int(c) && b[s] != int(c)) fn += 1;
    }
    const double f = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    out.macro += f / double(k);
    out.weighted += f * (tp + fn) / double(a.size());
  }
  return out;
}

}  // namespace oracle
