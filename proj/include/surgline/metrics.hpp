#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "surgline/zeroshot.hpp"

namespace surgline {

struct ClassMetrics {
  std::size_t support = 0;
  std::size_t predicted = 0;                 // frames whose top-1 is this class
  std::map<int, std::optional<double>> topk;  // null when support is 0
  double precision = 0.0;                    // 0 when the class is never predicted
  double recall = 0.0;                       // 0 when support is 0
  double f1 = 0.0;
};

struct MetricsReport {
  std::vector<ClassId> classes;
  std::size_t n_frames = 0;
  std::map<int, double> overall_topk;
  std::map<ClassId, ClassMetrics> per_class;
  // Support-weighted averages over per-class top-1 precision/recall/F1.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Unweighted means over classes that occur in the truth or the predictions.
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;

  double top(int k) const;
  nlohmann::ordered_json to_json() const;
  /// One row per class plus an "overall" row.
  std::string to_csv() const;
};

/// `classes` fixes the label set and its order. Throws on an empty list, a
/// missing or unknown true label, or k beyond the class count or the ranking
/// length.
MetricsReport evaluate(const std::vector<Prediction>& preds, const std::vector<ClassId>& classes,
                       const std::vector<int>& k_set = {1, 5});

struct ConfusionMatrix {
  std::vector<ClassId> classes;
  Eigen::MatrixXd counts;  // true class by row, top-1 prediction by column

  std::size_t total() const;
  /// Rows divided by their support; rows with no support stay zero.
  Eigen::MatrixXd normalized() const;
  std::vector<bool> empty_rows() const;
  std::string to_csv(bool normalize) const;
};

ConfusionMatrix confusion(const std::vector<Prediction>& preds, const std::vector<ClassId>& classes);

}  // namespace surgline
