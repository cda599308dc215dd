// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "tialab/types.hpp"

namespace tialab::evaluation {

struct EvalConfig {
  std::vector<double> tiou_thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};
  int64_t num_classes = 3;

  void validate() const;
};

// All-point interpolated AP for one class. Predictions of class `label` are
// ranked by descending score (ties broken by video id, then start, then
// end); each takes the unmatched ground truth of the same video and class
// with the highest tIoU >= threshold. Returns nullopt when the class has no
// ground truth.
std::optional<double> average_precision(const PredictionSet& predictions, const GroundTruthSet& ground_truth,
                                        int64_t label, double threshold);

struct MapResult {
  std::vector<double> thresholds;
  // per_class[i][c]: AP of class c at thresholds[i]; nullopt when excluded.
  std::vector<std::vector<std::optional<double>>> per_class;
  std::vector<double> map;  // per threshold, mean over classes with ground truth
  double average = 0;       // mean over thresholds
};

// Throws EvaluationError when the ground truth is empty overall.
MapResult mean_ap(const PredictionSet& predictions, const GroundTruthSet& ground_truth, const EvalConfig& cfg);

// Rows: one per threshold plus "avg"; columns: threshold, class_<c> ..., mAP.
// Excluded classes are written as "nan".
void write_results_csv(std::ostream& os, const MapResult& r);
MapResult read_results_csv(std::istream& is);

}  // namespace tialab::evaluation
