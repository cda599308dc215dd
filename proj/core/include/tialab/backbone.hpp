// SPDX-License-Identifier: Apache-2.0
//
// A small ViT-style video encoder. Frames are split into square patches,
// self-attention runs inside fixed-length clips of `chunk_len` frames, and
// adapters (when attached) see the full reassembled time axis after every
// block, so their temporal convolution crosses clip boundaries.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tialab/adapters.hpp"
#include "tialab/checkpoint.hpp"
#include "tialab/tensor.hpp"

namespace tialab::backbone {

struct BackboneConfig {
  int64_t num_layers = 4;
  int64_t dim = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t chunk_len = 16;
  int64_t patch = 4;
  int64_t in_channels = 3;
  int64_t frame_h = 8;
  int64_t frame_w = 8;
  bool frozen = true;
  // Learned temporal (per clip position) and spatial (per patch) embeddings.
  bool pos_embed = true;
  double pos_init_std = 0.02;
  // Multiplies the initial attention and MLP output projections, so each
  // random block starts close to the identity.
  double residual_init_scale = 0.05;
  bool checkpointing = false;
  int64_t checkpoint_segment = 0;  // 0 = ceil(sqrt(num_layers))
  uint64_t seed = 1;

  void validate() const;
  int64_t tokens_per_frame() const { return (frame_h / patch) * (frame_w / patch); }
};

enum class EncodeModeKind { kFrozen, kFullFT, kAdapterInside, kAdapterOutside, kFullFTPlusTIA };

struct EncodeMode {
  EncodeModeKind kind = EncodeModeKind::kFrozen;
  bool adapt_last_half = false;

  static EncodeMode frozen() { return {EncodeModeKind::kFrozen, false}; }
  static EncodeMode full_ft() { return {EncodeModeKind::kFullFT, false}; }
  static EncodeMode adapter_inside() { return {EncodeModeKind::kAdapterInside, false}; }
  static EncodeMode adapter_outside(bool last_half) { return {EncodeModeKind::kAdapterOutside, last_half}; }
  static EncodeMode full_ft_plus_tia() { return {EncodeModeKind::kFullFTPlusTIA, false}; }

  bool uses_adapters() const;
  bool backbone_trainable() const;
  // Frozen and AdapterOutside never differentiate through the backbone.
  bool backprop_through_backbone() const;
};

std::string to_string(EncodeModeKind kind);
EncodeModeKind parse_encode_mode(const std::string& s);

enum class Representation { kFrame, kSnippet };
std::string to_string(Representation r);
Representation parse_representation(const std::string& s);

template <typename T>
struct BlockWeights {
  Parameter<T> ln1_g, ln1_b;
  Parameter<T> qkv_w, qkv_b;
  Parameter<T> proj_w, proj_b;
  Parameter<T> ln2_g, ln2_b;
  Parameter<T> fc1_w, fc1_b;
  Parameter<T> fc2_w, fc2_b;

  std::vector<Parameter<T>*> parameters();
};

template <typename T>
struct FeatureMap {
  Tensor<T> values;     // [T, C]
  double stride = 1.0;  // input frames per feature step
  int64_t length() const { return values.dim(0); }
  int64_t channels() const { return values.dim(1); }
};

template <typename T>
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  int64_t param_count() const;
  void set_trainable(bool value);

  // video[C, T, H, W] -> patches[T, P, C*patch*patch]. Pure data layout.
  Tensor<T> patchify(const Tensor<T>& video) const;
  // patches[B, T, P, F] -> tokens[B, T, P, d] with positional embeddings.
  Tensor<T> embed_patches(const Tensor<T>& patches) const;
  // video[C, T, H, W] -> tokens[1, T, P, d].
  Tensor<T> embed(const Tensor<T>& video) const;
  // tokens[B, T, P, d] -> tokens[B, T, P, d]. Attention stays within clips of
  // min(chunk_len, T) frames; T must be a multiple of that length.
  Tensor<T> block(int64_t layer, const Tensor<T>& x) const;

 private:
  BackboneConfig cfg_;
  Parameter<T> patch_w_, patch_b_;
  Parameter<T> time_pos_, space_pos_;
  std::vector<BlockWeights<T>> blocks_;
};

// Total parameters of a backbone built from `cfg`, in closed form.
int64_t backbone_param_count(const BackboneConfig& cfg);

// Layer-indexed adapter slots. Inside placement uses every slot; outside
// placement uses all layers or only layers N/2 .. N-1 (0-based).
template <typename T>
struct AdapterSet {
  std::vector<std::optional<adapters::Adapter<T>>> slots;

  static AdapterSet make(adapters::AdapterKind kind, const BackboneConfig& cfg, int64_t gamma, int64_t k,
                         bool last_half_only, uint64_t seed);
  int64_t count() const;
  int64_t param_count() const;
  std::vector<Parameter<T>*> parameters();
  void set_trainable(bool value);
};

// Sets every backbone parameter non-trainable.
template <typename T>
void freeze_backbone(Backbone<T>& bb);

// Spatial pooling only; one feature per frame. Frames are zero-padded up to a
// multiple of chunk_len and the padding is cropped from the output.
template <typename T>
FeatureMap<T> encode_frame_repr(const Backbone<T>& bb, const Tensor<T>& video, const AdapterSet<T>* adapters,
                                EncodeMode mode);

// One snippet of `snippet_len` frames centred on every `stride`-th frame
// (edge frames replicated), encoded independently and pooled over space and
// time. Total frames processed = snippet_len * number of snippets.
template <typename T>
FeatureMap<T> encode_snippet_repr(const Backbone<T>& bb, const Tensor<T>& video, int64_t snippet_len,
                                  const AdapterSet<T>* adapters, EncodeMode mode, int64_t stride = 1);

// y = x_N + sum_i side(x_i). The backbone runs without a differentiation
// record; gradients reach only adapter weights.
template <typename T>
FeatureMap<T> encode_with_side_adapters(const Backbone<T>& bb, const Tensor<T>& video, const AdapterSet<T>& adapters,
                                        bool adapt_last_half);

// Number of clips each layer attends over for a video of `frames` frames.
int64_t clips_per_layer(const BackboneConfig& cfg, int64_t frames);

// Parameter manifest (see save_parameters) plus a single
// blob file holding the tensors in manifest order.
void save_backbone(const Backbone<float>& bb, const std::filesystem::path& manifest,
                   const std::filesystem::path& blobs);
void load_backbone(Backbone<float>& bb, const std::filesystem::path& manifest, const std::filesystem::path& blobs);

}  // namespace tialab::backbone
