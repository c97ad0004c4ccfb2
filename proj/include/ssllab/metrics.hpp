#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ssllab/common.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

/// Fraction of positions where prediction == label.
inline double accuracy(const std::vector<int64_t>& predictions,
                       const std::vector<int64_t>& labels) {
  if (predictions.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(predictions.size()) +
                     " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  if (predictions.empty())
    throw ValueError("accuracy: undefined for empty input");
  int64_t hits = 0;
  for (size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

/// Row-wise argmax of a [N, k] score matrix (first maximum wins on ties).
template <typename T>
std::vector<int64_t> argmax_rows(const Tensor<T>& scores) {
  const Shape& s = scores.shape();
  if (s.size() != 2)
    throw ShapeError("argmax_rows: expected [N, k], got " + shape_str(s));
  const int64_t n = s[0], k = s[1];
  if (k < 1) throw ValueError("argmax_rows: zero classes");
  std::vector<int64_t> out(static_cast<size_t>(n));
  const auto& v = scores.data();
  for (int64_t i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i * k);
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (v[base + static_cast<size_t>(j)] > v[base + static_cast<size_t>(best)])
        best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

/// Area under the ROC curve as the Mann-Whitney rank statistic: the
/// probability that a random positive scores above a random negative, with
/// ties counted 1/2. Computed from average ranks, so tied groups are exact.
inline double auc_rank(const std::vector<double>& scores,
                       const std::vector<int64_t>& targets) {
  if (scores.size() != targets.size())
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(targets.size()) + " targets");
  const size_t n = scores.size();
  int64_t positives = 0;
  for (size_t i = 0; i < n; ++i) {
    if (targets[i] != 0 && targets[i] != 1)
      throw ValueError("auc: targets must be 0 or 1");
    positives += targets[i];
  }
  const int64_t negatives = static_cast<int64_t>(n) - positives;
  if (positives == 0 || negatives == 0)
    throw ValueError("auc: needs at least one positive and one negative");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Average rank over each tied block keeps the statistic exact under ties.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) +
                                   static_cast<double>(j));  // 1-based
    for (size_t t = i; t < j; ++t)
      if (targets[order[t]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(positives);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) /
         (p * static_cast<double>(negatives));
}

/// Mean of per-class accuracies, each class weighted equally regardless of
/// how many examples it has. Entries are (correct, total) per class.
inline double macro_accuracy(
    const std::vector<std::pair<int64_t, int64_t>>& correct_total) {
  if (correct_total.empty())
    throw ValueError("macro_accuracy: undefined for zero classes");
  double acc = 0.0;
  for (const auto& [c, t] : correct_total) {
    if (t < 1) throw ValueError("macro_accuracy: class with zero examples");
    acc += static_cast<double>(c) / static_cast<double>(t);
  }
  return acc / static_cast<double>(correct_total.size());
}

/// Pooled accuracy: total correct over total examples across classes.
inline double micro_accuracy(
    const std::vector<std::pair<int64_t, int64_t>>& correct_total) {
  int64_t c = 0, t = 0;
  for (const auto& [ci, ti] : correct_total) {
    c += ci;
    t += ti;
  }
  if (t < 1) throw ValueError("micro_accuracy: undefined for zero examples");
  return static_cast<double>(c) / static_cast<double>(t);
}

struct MultiLabelMetrics {
  double macro_accuracy = 0.0;
  double micro_accuracy = 0.0;
  double macro_auc = 0.0;
  double micro_auc = 0.0;
  /// Classes lacking both a positive and a negative, skipped from macro AUC.
  std::vector<int64_t> skipped_classes;
};

/// Multi-label evaluation of [N, m] scores against {0,1} targets.
/// Accuracy thresholds each score; AUC is the rank statistic per class
/// (macro: average over classes where it is defined) and over the flattened
/// matrix (micro).
template <typename T>
MultiLabelMetrics macro_micro_metrics(const Tensor<T>& scores,
                                      const Tensor<T>& targets,
                                      double threshold = 0.5) {
  const Shape& s = scores.shape();
  if (s.size() != 2)
    throw ShapeError("macro_micro_metrics: scores must be [N, m], got " +
                     shape_str(s));
  if (targets.shape() != s)
    throw ShapeError("macro_micro_metrics: targets " +
                     shape_str(targets.shape()) + " do not match scores " +
                     shape_str(s));
  const int64_t n = s[0], m = s[1];
  if (n < 1 || m < 1)
    throw ValueError("macro_micro_metrics: undefined for empty input");
  const auto& sv = scores.data();
  const auto& tv = targets.data();
  for (int64_t i = 0; i < n * m; ++i) {
    const T y = tv[static_cast<size_t>(i)];
    if (y != T(0) && y != T(1))
      throw ValueError("macro_micro_metrics: targets must be 0 or 1");
  }

  MultiLabelMetrics out;
  std::vector<std::pair<int64_t, int64_t>> per_class;
  per_class.reserve(static_cast<size_t>(m));
  double macro_auc_sum = 0.0;
  int64_t auc_classes = 0;
  std::vector<double> flat_scores(static_cast<size_t>(n * m));
  std::vector<int64_t> flat_targets(static_cast<size_t>(n * m));
  std::vector<double> col_scores(static_cast<size_t>(n));
  std::vector<int64_t> col_targets(static_cast<size_t>(n));
  for (int64_t j = 0; j < m; ++j) {
    int64_t correct = 0, pos = 0;
    for (int64_t i = 0; i < n; ++i) {
      const size_t at = static_cast<size_t>(i * m + j);
      const double sc = static_cast<double>(sv[at]);
      const int64_t y = tv[at] == T(1) ? 1 : 0;
      const int64_t pred = sc >= threshold ? 1 : 0;
      if (pred == y) ++correct;
      pos += y;
      col_scores[static_cast<size_t>(i)] = sc;
      col_targets[static_cast<size_t>(i)] = y;
      flat_scores[at] = sc;
      flat_targets[at] = y;
    }
    per_class.emplace_back(correct, n);
    if (pos == 0 || pos == n) {
      out.skipped_classes.push_back(j);
    } else {
      macro_auc_sum += auc_rank(col_scores, col_targets);
      ++auc_classes;
    }
  }
  out.macro_accuracy = macro_accuracy(per_class);
  out.micro_accuracy = micro_accuracy(per_class);
  if (auc_classes == 0)
    throw ValueError(
        "macro_micro_metrics: no class has both positives and negatives; "
        "AUC is not computable");
  out.macro_auc = macro_auc_sum / static_cast<double>(auc_classes);
  out.micro_auc = auc_rank(flat_scores, flat_targets);
  return out;
}

}  // namespace ssllab
