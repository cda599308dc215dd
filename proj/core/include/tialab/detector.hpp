// SPDX-License-Identifier: Apache-2.0
//
// Anchor-free one-stage temporal detection head over a FeatureMap.
//
// Level 0 is a projection of the input features; each further level halves
// the length with a stride-2 depth-wise temporal convolution (initialised to
// the binomial filter [1/4, 1/2, 1/4]) followed by layer norm. Each level has
// its own stack of residual context blocks x + W2·gelu(W1·LN(dwconv_c(x)))
// with a wider kernel c, run before it is downsampled into the next level. A tower shared across levels feeds a
// K-way classifier and a two-sided boundary regressor (softplus, in units of
// the level stride).
//
// All positions and distances below are in feature steps unless noted.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tialab/tensor.hpp"
#include "tialab/types.hpp"

namespace tialab::detector {

struct PyramidConfig {
  int64_t levels = 4;
  int64_t num_classes = 3;
  int64_t dim = 64;
  // Residual context blocks per level, and their odd kernel.
  int64_t context_blocks = 2;
  int64_t context_kernel = 9;
  // Upper bounds of the regression ranges in level-0 feature steps; level l
  // covers [bounds[l-1], bounds[l]) with bounds[-1] = 0 and the last level
  // open-ended. Size must be levels - 1.
  std::vector<double> range_bounds = {4, 8, 16};
  double score_threshold = 0.05;
  double nms_threshold = 0.6;
  int64_t max_proposals = 200;
  double prior_prob = 0.01;
  uint64_t seed = 3;

  void validate() const;
  int64_t level_stride(int64_t level) const { return int64_t{1} << level; }
  // [lo, hi) for `level`; hi is +inf on the last level.
  std::pair<double, double> range(int64_t level) const;
};

template <typename T>
struct LevelOutput {
  Tensor<T> logits;    // [T_l, K]
  Tensor<T> distances; // [T_l, 2], non-negative, in units of `stride`
  int64_t stride = 1;
};

template <typename T>
using HeadOutputs = std::vector<LevelOutput<T>>;

// Narrow interface so other heads can be swapped in.
template <typename T>
class Head {
 public:
  virtual ~Head() = default;
  virtual HeadOutputs<T> forward(const Tensor<T>& features) const = 0;
  virtual std::vector<Parameter<T>*> parameters() = 0;
  virtual const PyramidConfig& config() const = 0;
};

template <typename T>
class PyramidHead final : public Head<T> {
 public:
  PyramidHead(PyramidConfig cfg, int64_t in_channels);

  // features[T, C] -> one output per level. Throws ConfigError when
  // T < 2^levels.
  HeadOutputs<T> forward(const Tensor<T>& features) const override;
  std::vector<Parameter<T>*> parameters() override;
  const PyramidConfig& config() const override { return cfg_; }
  int64_t param_count();
  // Zeroes every weight and bias.
  void zero_all();

 private:
  PyramidConfig cfg_;
  int64_t in_channels_;
  Parameter<T> proj_w_, proj_b_, proj_g_, proj_beta_;
  std::vector<Parameter<T>> down_k_, down_b_, down_g_, down_beta_;
  struct ContextBlock {
    Parameter<T> k, b, g, beta, w1, b1, w2, b2;
  };
  std::vector<std::vector<ContextBlock>> ctx_;  // [level][block]
  Parameter<T> tower_w_, tower_b_;
  Parameter<T> cls_w_, cls_b_;
  Parameter<T> reg_w_, reg_b_;
};

// Annotation in feature-step coordinates of the current window.
struct Segment {
  double start = 0;
  double end = 0;
  int64_t label = 0;
};

struct LevelTargets {
  std::vector<float> cls;        // [T_l * K] one-hot rows, zero rows for negatives
  std::vector<float> distances;  // [T_l * 2] in level-stride units; valid on positives
  std::vector<int64_t> positive; // positive location indices, ascending
  int64_t length = 0;
  int64_t stride = 1;
};

// Location i on level l sits at t = i * 2^l. It is positive for a segment
// when start <= t <= end and max(t - start, end - t) lies in the level's
// range; among several candidates the shortest segment wins.
std::vector<LevelTargets> assign_targets(const std::vector<Segment>& segments, const PyramidConfig& cfg,
                                         int64_t length);

struct LossTerms {
  double classification = 0;
  double regression = 0;
  int64_t positives = 0;
};

// Focal loss summed over classes and averaged over all locations, plus
// 1 - tIoU averaged over positives (zero without positives), weighted 1:1.
template <typename T>
Tensor<T> compute_loss(const HeadOutputs<T>& out, const std::vector<LevelTargets>& targets,
                       LossTerms* terms = nullptr);

// Every location whose best class probability exceeds the score threshold
// becomes a proposal (start, end in feature steps); nms is applied.
template <typename T>
std::vector<Proposal> decode_proposals(const HeadOutputs<T>& out, const PyramidConfig& cfg);

// Same without nms, for merging across windows.
template <typename T>
std::vector<Proposal> decode_raw(const HeadOutputs<T>& out, const PyramidConfig& cfg);

// Greedy class-wise hard suppression at tIoU > threshold, best-first, at most
// `max_keep` results sorted by descending score. Ties keep input order.
std::vector<Proposal> nms(std::vector<Proposal> proposals, double tiou_threshold, int64_t max_keep);

// "video_id,t_start,t_end,class,score" with six decimals.
void write_proposals_csv(std::ostream& os, const PredictionSet& predictions);
PredictionSet read_proposals_csv(std::istream& is);

}  // namespace tialab::detector
