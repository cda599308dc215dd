// SPDX-License-Identifier: Apache-2.0
#include "tialab/memory_model.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "tialab/adapters.hpp"
#include "tialab/checkpoint.hpp"

namespace tialab::memory {

using backbone::EncodeModeKind;
using backbone::Representation;

std::string Strategy::label() const {
  std::string s = backbone::to_string(mode.kind);
  if (mode.kind == EncodeModeKind::kAdapterOutside && mode.adapt_last_half) s += "_last_half";
  if (checkpointing) s += "+ckpt";
  if (mixed_precision) s += "+amp";
  return s;
}

int64_t backprop_layers(const Strategy& s, const ShapeDescriptor& shape) {
  if (!s.mode.backprop_through_backbone()) return 0;
  if (!s.checkpointing) return shape.num_layers;
  const int64_t seg = default_segment_size(shape.num_layers);
  return (shape.num_layers + seg - 1) / seg;
}

int64_t adapted_layers(const Strategy& s, const ShapeDescriptor& shape) {
  if (!s.mode.uses_adapters()) return 0;
  if (s.mode.kind == EncodeModeKind::kAdapterOutside && s.mode.adapt_last_half) {
    return shape.num_layers - shape.num_layers / 2;
  }
  return shape.num_layers;
}

int64_t effective_frames(const Strategy& s, const ShapeDescriptor& shape) {
  return s.representation == Representation::kSnippet ? shape.snippet_len * shape.frames : shape.frames;
}

int64_t trainable_params(const Strategy& s, const ShapeDescriptor& shape) {
  int64_t n = shape.head_params;
  if (s.mode.backbone_trainable()) n += shape.backbone_params;
  n += adapted_layers(s, shape) * adapters::tia_param_count(shape.dim, shape.gamma, shape.kernel);
  return n;
}

MemoryEstimate estimate(const Strategy& s, const ShapeDescriptor& shape) {
  const int64_t bpe = s.mixed_precision ? 2 : 4;
  const int64_t cells = effective_frames(s, shape) * shape.tokens_per_frame;
  MemoryEstimate e;
  e.strategy = s.label();
  e.representation = backbone::to_string(s.representation);
  e.shape = shape;
  e.activation_bytes = kActivationsPerBlock * shape.dim * cells * backprop_layers(s, shape) * bpe;
  if (s.mode.kind == EncodeModeKind::kAdapterOutside) {
    e.activation_bytes += adapted_layers(s, shape) * (shape.dim + 3 * shape.dim / shape.gamma) * cells * bpe;
  }
  const int64_t adapter_total = adapted_layers(s, shape) * adapters::tia_param_count(shape.dim, shape.gamma, shape.kernel);
  e.trainable_params = trainable_params(s, shape);
  e.parameter_bytes = 4 * (shape.backbone_params + shape.head_params + adapter_total);
  e.gradient_bytes = 4 * e.trainable_params;
  e.optimizer_bytes = 2 * 4 * e.trainable_params;
  e.total_bytes = e.activation_bytes + e.parameter_bytes + e.gradient_bytes + e.optimizer_bytes;
  return e;
}

bool StrategyComparison::all_hold() const {
  for (const auto& [name, ok] : checks)
    if (!ok) return false;
  return true;
}

StrategyComparison compare_strategies(const std::vector<ShapeDescriptor>& shapes,
                                      const std::vector<Strategy>& strategies) {
  StrategyComparison out;
  for (const auto& shape : shapes) {
    for (const auto& s : strategies) out.rows.push_back(estimate(s, shape));
    const Strategy full{backbone::EncodeMode::full_ft()};
    const Strategy inside{backbone::EncodeMode::adapter_inside()};
    const Strategy outside{backbone::EncodeMode::adapter_outside(false)};
    const auto ef = estimate(full, shape), ei = estimate(inside, shape), eo = estimate(outside, shape);
    const std::string tag = " [N=" + std::to_string(shape.num_layers) + " d=" + std::to_string(shape.dim) +
                            " T=" + std::to_string(shape.frames) + "]";
    out.checks.push_back({"total full_ft > adapter_inside" + tag, ef.total_bytes > ei.total_bytes});
    out.checks.push_back({"total adapter_inside > adapter_outside" + tag, ei.total_bytes > eo.total_bytes});
    out.checks.push_back({"activations full_ft == adapter_inside" + tag, ef.activation_bytes == ei.activation_bytes});
    out.checks.push_back({"activations adapter_outside < adapter_inside" + tag,
                          eo.activation_bytes < ei.activation_bytes});
    Strategy snip = inside;
    snip.representation = Representation::kSnippet;
    const auto es = estimate(snip, shape);
    out.checks.push_back({"snippet/frame activations == snippet_len" + tag,
                          es.activation_bytes == shape.snippet_len * ei.activation_bytes});
  }
  return out;
}

void write_membench_csv(std::ostream& os, const std::vector<MemoryEstimate>& rows) {
  os << "# analytic model; excludes framework overheads and workspace buffers\n";
  os << "strategy,representation,N,d,T,activation_bytes,parameter_bytes,gradient_bytes,optimizer_bytes,total_bytes\n";
  for (const auto& r : rows) {
    os << r.strategy << ',' << r.representation << ',' << r.shape.num_layers << ',' << r.shape.dim << ','
       << r.shape.frames << ',' << r.activation_bytes << ',' << r.parameter_bytes << ',' << r.gradient_bytes << ','
       << r.optimizer_bytes << ',' << r.total_bytes << '\n';
  }
}

std::vector<MemoryEstimate> read_membench_csv(std::istream& is) {
  std::vector<MemoryEstimate> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("strategy,", 0) != 0) throw LoadError("membench csv: missing header");
      header = true;
      continue;
    }
    std::vector<std::string> c;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) c.push_back(cell);
    if (c.size() != 10) throw LoadError("membench csv: bad row '" + line + "'");
    MemoryEstimate e;
    try {
      e.strategy = c[0];
      e.representation = c[1];
      e.shape.num_layers = std::stoll(c[2]);
      e.shape.dim = std::stoll(c[3]);
      e.shape.frames = std::stoll(c[4]);
      e.activation_bytes = std::stoll(c[5]);
      e.parameter_bytes = std::stoll(c[6]);
      e.gradient_bytes = std::stoll(c[7]);
      e.optimizer_bytes = std::stoll(c[8]);
      e.total_bytes = std::stoll(c[9]);
    } catch (const std::exception&) {
      throw LoadError("membench csv: bad number in '" + line + "'");
    }
    out.push_back(e);
  }
  if (!header) throw LoadError("membench csv: missing header");
  return out;
}

ShapeDescriptor describe(const backbone::BackboneConfig& cfg, int64_t frames, int64_t gamma, int64_t kernel,
                         int64_t head_params) {
  ShapeDescriptor s;
  s.num_layers = cfg.num_layers;
  s.dim = cfg.dim;
  s.frames = frames;
  s.chunk_len = cfg.chunk_len;
  s.tokens_per_frame = cfg.tokens_per_frame();
  s.gamma = gamma;
  s.kernel = kernel;
  s.backbone_params = backbone::backbone_param_count(cfg);
  s.head_params = head_params;
  return s;
}

}  // namespace tialab::memory
