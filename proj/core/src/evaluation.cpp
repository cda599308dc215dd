// SPDX-License-Identifier: Apache-2.0
#include "tialab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>

#include "tialab/errors.hpp"

namespace tialab {

double tiou(double a_start, double a_end, double b_start, double b_end) {
  if (!(a_start < a_end) || !(b_start < b_end)) {
    throw ContractViolation("degenerate interval in tIoU");
  }
  const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
  const double uni = std::max(a_end, b_end) - std::min(a_start, b_start);
  return inter / uni;
}

namespace evaluation {

void EvalConfig::validate() const {
  if (tiou_thresholds.empty()) throw ConfigError("eval.tiou_thresholds must not be empty");
  double prev = 0;
  for (double t : tiou_thresholds) {
    if (!(t > prev) || t > 1) throw ConfigError("eval.tiou_thresholds must be in (0,1] and strictly increasing");
    prev = t;
  }
  if (num_classes < 1) throw ConfigError("eval.num_classes must be >= 1");
}

std::optional<double> average_precision(const PredictionSet& predictions, const GroundTruthSet& ground_truth,
                                        int64_t label, double threshold) {
  struct Ranked {
    const std::string* video;
    const Proposal* p;
  };
  std::map<std::string, std::vector<const ActionAnnotation*>> gts;
  int64_t num_gt = 0;
  for (const auto& [id, anns] : ground_truth)
    for (const auto& a : anns)
      if (a.label == label) {
        gts[id].push_back(&a);
        ++num_gt;
      }
  if (num_gt == 0) return std::nullopt;

  std::vector<Ranked> ranked;
  for (const auto& [id, props] : predictions)
    for (const auto& p : props)
      if (p.label == label) ranked.push_back({&id, &p});
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    return std::tie(b.p->score, *a.video, a.p->t_start, a.p->t_end) <
           std::tie(a.p->score, *b.video, b.p->t_start, b.p->t_end);
  });

  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, v] : gts) used[id].assign(v.size(), false);
  std::vector<double> precision, recall;
  int64_t tp = 0;
  for (size_t i = 0; i < ranked.size(); ++i) {
    auto it = gts.find(*ranked[i].video);
    if (it != gts.end()) {
      auto& flags = used[it->first];
      double best = -1;
      int64_t best_j = -1;
      for (size_t j = 0; j < it->second.size(); ++j) {
        if (flags[j]) continue;
        const auto* g = it->second[j];
        const double o = tiou(ranked[i].p->t_start, ranked[i].p->t_end, g->t_start, g->t_end);
        if (o >= threshold && o > best) {
          best = o;
          best_j = static_cast<int64_t>(j);
        }
      }
      if (best_j >= 0) {
        flags[best_j] = true;
        ++tp;
      }
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope, then area under the step curve.
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapResult mean_ap(const PredictionSet& predictions, const GroundTruthSet& ground_truth, const EvalConfig& cfg) {
  cfg.validate();
  bool any = false;
  for (const auto& [id, anns] : ground_truth) any = any || !anns.empty();
  if (!any) throw EvaluationError("ground truth is empty");
  MapResult r;
  r.thresholds = cfg.tiou_thresholds;
  for (double th : cfg.tiou_thresholds) {
    std::vector<std::optional<double>> row;
    double total = 0;
    int64_t n = 0;
    for (int64_t c = 0; c < cfg.num_classes; ++c) {
      auto ap = average_precision(predictions, ground_truth, c, th);
      if (ap) {
        total += *ap;
        ++n;
      }
      row.push_back(ap);
    }
    r.per_class.push_back(std::move(row));
    r.map.push_back(n > 0 ? total / static_cast<double>(n) : 0.0);
  }
  double s = 0;
  for (double m : r.map) s += m;
  r.average = s / static_cast<double>(r.map.size());
  return r;
}

void write_results_csv(std::ostream& os, const MapResult& r) {
  const size_t K = r.per_class.empty() ? 0 : r.per_class.front().size();
  os << "threshold";
  for (size_t c = 0; c < K; ++c) os << ",class_" << c;
  os << ",mAP\n" << std::fixed << std::setprecision(6);
  for (size_t i = 0; i < r.thresholds.size(); ++i) {
    os << r.thresholds[i];
    for (const auto& ap : r.per_class[i]) {
      if (ap) os << ',' << *ap;
      else os << ",nan";
    }
    os << ',' << r.map[i] << '\n';
  }
  os << "avg";
  for (size_t c = 0; c < K; ++c) {
    double s = 0;
    size_t n = 0;
    for (const auto& row : r.per_class)
      if (row[c]) {
        s += *row[c];
        ++n;
      }
    if (n > 0) os << ',' << s / static_cast<double>(n);
    else os << ",nan";
  }
  os << ',' << r.average << '\n';
}

MapResult read_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("threshold", 0) != 0) throw LoadError("results csv: missing header");
  const auto columns = static_cast<size_t>(std::count(line.begin(), line.end(), ','));
  if (columns < 1) throw LoadError("results csv: bad header");
  MapResult r;
  bool saw_avg = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() != columns + 1) throw LoadError("results csv: row width mismatch");
    try {
      if (cells[0] == "avg") {
        r.average = std::stod(cells.back());
        saw_avg = true;
        continue;
      }
      r.thresholds.push_back(std::stod(cells[0]));
      std::vector<std::optional<double>> row;
      for (size_t c = 1; c + 1 < cells.size(); ++c) {
        if (cells[c] == "nan") row.push_back(std::nullopt);
        else row.push_back(std::stod(cells[c]));
      }
      r.per_class.push_back(std::move(row));
      r.map.push_back(std::stod(cells.back()));
    } catch (const std::invalid_argument&) {
      throw LoadError("results csv: bad number in '" + line + "'");
    }
  }
  if (!saw_avg) throw LoadError("results csv: missing avg row");
  return r;
}

}  // namespace evaluation
}  // namespace tialab
