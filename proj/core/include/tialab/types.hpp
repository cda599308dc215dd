// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tialab {

// Times are in seconds throughout.
struct ActionAnnotation {
  double t_start = 0;
  double t_end = 0;
  int64_t label = 0;

  bool operator==(const ActionAnnotation&) const = default;
};

struct Proposal {
  double t_start = 0;
  double t_end = 0;
  int64_t label = 0;
  double score = 0;

  bool operator==(const Proposal&) const = default;
};

// video id -> entries. Ordered so iteration is deterministic.
using GroundTruthSet = std::map<std::string, std::vector<ActionAnnotation>>;
using PredictionSet = std::map<std::string, std::vector<Proposal>>;

// |a ∩ b| / |a ∪ b|. Throws ContractViolation when either interval has
// start >= end.
double tiou(double a_start, double a_end, double b_start, double b_end);

}  // namespace tialab
