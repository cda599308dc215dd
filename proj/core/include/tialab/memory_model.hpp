// SPDX-License-Identifier: Apache-2.0
//
// Analytic training-memory model. Only tensors the fine-tuning strategy must
// keep for the backward pass are counted; framework overheads, workspace
// buffers and attention-kernel variants are excluded.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tialab/backbone.hpp"

namespace tialab::memory {

// Retained activations per transformer block.
inline constexpr int64_t kActivationsPerBlock = 4;

struct ShapeDescriptor {
  int64_t num_layers = 4;
  int64_t dim = 64;
  int64_t frames = 256;
  int64_t chunk_len = 16;
  int64_t tokens_per_frame = 1;
  int64_t snippet_len = 16;
  int64_t gamma = 4;
  int64_t kernel = 3;
  int64_t backbone_params = 0;
  int64_t head_params = 0;
};

struct Strategy {
  backbone::EncodeMode mode;
  backbone::Representation representation = backbone::Representation::kFrame;
  bool checkpointing = false;
  bool mixed_precision = false;

  std::string label() const;
};

struct MemoryEstimate {
  std::string strategy;
  std::string representation;
  ShapeDescriptor shape;
  int64_t activation_bytes = 0;
  int64_t parameter_bytes = 0;
  int64_t gradient_bytes = 0;
  int64_t optimizer_bytes = 0;
  int64_t total_bytes = 0;
  int64_t trainable_params = 0;
};

// Backbone layers whose activations are kept for backward: N for strategies
// that differentiate through the backbone, ceil(N / ceil(sqrt N)) segment
// boundaries under checkpointing, 0 otherwise.
int64_t backprop_layers(const Strategy& s, const ShapeDescriptor& shape);
int64_t adapted_layers(const Strategy& s, const ShapeDescriptor& shape);
int64_t effective_frames(const Strategy& s, const ShapeDescriptor& shape);
int64_t trainable_params(const Strategy& s, const ShapeDescriptor& shape);

// activations = a * d * T_eff * S * N_backprop * bpe, plus for outside
// placement (d + 3d/gamma) * T_eff * S * bpe per adapted layer (tap and
// adapter internals). bpe = 2 with mixed precision, else 4. Parameters are
// held at 4 bytes; gradients take 4 and optimizer moments 8 bytes per
// trainable parameter.
MemoryEstimate estimate(const Strategy& s, const ShapeDescriptor& shape);

struct StrategyComparison {
  std::vector<MemoryEstimate> rows;
  // Human-readable ordering checks with their outcome.
  std::vector<std::pair<std::string, bool>> checks;
  bool all_hold() const;
};

// Estimates for every (shape, strategy) pair plus the ordering assertions
// FullFT > AdapterInside > AdapterOutside on total bytes, equal activations
// for FullFT and AdapterInside, and a snippet/frame activation ratio equal
// to snippet_len, each evaluated per shape.
StrategyComparison compare_strategies(const std::vector<ShapeDescriptor>& shapes,
                                      const std::vector<Strategy>& strategies);

// strategy,representation,N,d,T,activation_bytes,parameter_bytes,
// gradient_bytes,optimizer_bytes,total_bytes
void write_membench_csv(std::ostream& os, const std::vector<MemoryEstimate>& rows);
std::vector<MemoryEstimate> read_membench_csv(std::istream& is);

// Shape descriptor for an in-process toy backbone and head.
ShapeDescriptor describe(const backbone::BackboneConfig& cfg, int64_t frames, int64_t gamma, int64_t kernel,
                         int64_t head_params);

}  // namespace tialab::memory
