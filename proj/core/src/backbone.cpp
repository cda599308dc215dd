// SPDX-License-Identifier: Apache-2.0
#include "tialab/backbone.hpp"

#include <cmath>
#include <random>

#include "tialab/ops.hpp"
#include "tialab/serialize.hpp"

namespace tialab::backbone {

void BackboneConfig::validate() const {
  if (num_layers < 1) throw ConfigError("backbone.layers must be >= 1");
  if (dim < 1 || heads < 1 || dim % heads != 0) {
    throw ConfigError("backbone.dim " + std::to_string(dim) + " must be divisible by backbone.heads " +
                      std::to_string(heads));
  }
  if (mlp_ratio < 1) throw ConfigError("backbone.mlp_ratio must be >= 1");
  if (chunk_len < 1) throw ConfigError("backbone.chunk_len must be >= 1");
  if (patch < 1 || frame_h % patch != 0 || frame_w % patch != 0) {
    throw ConfigError("frame size " + std::to_string(frame_h) + "x" + std::to_string(frame_w) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  if (in_channels < 1) throw ConfigError("backbone.in_channels must be >= 1");
  if (pos_init_std < 0 || residual_init_scale < 0) throw ConfigError("backbone init scales must be >= 0");
}

bool EncodeMode::uses_adapters() const {
  return kind == EncodeModeKind::kAdapterInside || kind == EncodeModeKind::kAdapterOutside ||
         kind == EncodeModeKind::kFullFTPlusTIA;
}

bool EncodeMode::backbone_trainable() const {
  return kind == EncodeModeKind::kFullFT || kind == EncodeModeKind::kFullFTPlusTIA;
}

bool EncodeMode::backprop_through_backbone() const {
  return kind == EncodeModeKind::kFullFT || kind == EncodeModeKind::kFullFTPlusTIA ||
         kind == EncodeModeKind::kAdapterInside;
}

std::string to_string(EncodeModeKind kind) {
  switch (kind) {
    case EncodeModeKind::kFrozen: return "frozen";
    case EncodeModeKind::kFullFT: return "full_ft";
    case EncodeModeKind::kAdapterInside: return "adapter_inside";
    case EncodeModeKind::kAdapterOutside: return "adapter_outside";
    case EncodeModeKind::kFullFTPlusTIA: return "full_ft_plus_tia";
  }
  return "?";
}

EncodeModeKind parse_encode_mode(const std::string& s) {
  for (auto k : {EncodeModeKind::kFrozen, EncodeModeKind::kFullFT, EncodeModeKind::kAdapterInside,
                 EncodeModeKind::kAdapterOutside, EncodeModeKind::kFullFTPlusTIA}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown encode mode '" + s + "'");
}

std::string to_string(Representation r) { return r == Representation::kFrame ? "frame" : "snippet"; }

Representation parse_representation(const std::string& s) {
  if (s == "frame") return Representation::kFrame;
  if (s == "snippet") return Representation::kSnippet;
  throw ConfigError("unknown representation '" + s + "'");
}

template <typename T>
std::vector<Parameter<T>*> BlockWeights<T>::parameters() {
  return {&ln1_g, &ln1_b, &qkv_w, &qkv_b, &proj_w, &proj_b, &ln2_g, &ln2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
}

namespace {

template <typename T>
Parameter<T> dense(const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng, bool trainable) {
  const T bound = T(1) / std::sqrt(static_cast<T>(in));
  return {name, Tensor<T>::uniform({in, out}, -bound, bound, rng), trainable};
}

template <typename T>
Parameter<T> vec(const std::string& name, int64_t n, T value, bool trainable) {
  return {name, Tensor<T>::full({n}, value), trainable};
}

}  // namespace

int64_t backbone_param_count(const BackboneConfig& cfg) {
  const int64_t d = cfg.dim;
  const int64_t m = cfg.mlp_ratio * d;
  const int64_t f = cfg.in_channels * cfg.patch * cfg.patch;
  const int64_t per_block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
  return (f * d + d) + cfg.chunk_len * d + cfg.tokens_per_frame() * d + cfg.num_layers * per_block;
}

template <typename T>
Backbone<T>::Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const bool train = !cfg_.frozen;
  const int64_t d = cfg_.dim;
  const int64_t f = cfg_.in_channels * cfg_.patch * cfg_.patch;
  patch_w_ = dense<T>("backbone.patch_w", f, d, rng, train);
  patch_b_ = vec<T>("backbone.patch_b", d, T(0), train);
  const T pos_scale = cfg_.pos_embed ? T(cfg_.pos_init_std) : T(0);
  time_pos_ = {"backbone.time_pos", Tensor<T>::normal({cfg_.chunk_len, d}, T(0), pos_scale, rng), train};
  space_pos_ = {"backbone.space_pos", Tensor<T>::normal({cfg_.tokens_per_frame(), d}, T(0), pos_scale, rng), train};
  const int64_t m = cfg_.mlp_ratio * d;
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "backbone.block" + std::to_string(l) + ".";
    BlockWeights<T> b;
    b.ln1_g = vec<T>(p + "ln1_g", d, T(1), train);
    b.ln1_b = vec<T>(p + "ln1_b", d, T(0), train);
    b.qkv_w = dense<T>(p + "qkv_w", d, 3 * d, rng, train);
    b.qkv_b = vec<T>(p + "qkv_b", 3 * d, T(0), train);
    b.proj_w = dense<T>(p + "proj_w", d, d, rng, train);
    b.proj_b = vec<T>(p + "proj_b", d, T(0), train);
    b.ln2_g = vec<T>(p + "ln2_g", d, T(1), train);
    b.ln2_b = vec<T>(p + "ln2_b", d, T(0), train);
    b.fc1_w = dense<T>(p + "fc1_w", d, m, rng, train);
    b.fc1_b = vec<T>(p + "fc1_b", m, T(0), train);
    b.fc2_w = dense<T>(p + "fc2_w", m, d, rng, train);
    b.fc2_b = vec<T>(p + "fc2_b", d, T(0), train);
    b.proj_w.tensor = scale(b.proj_w.tensor, T(cfg_.residual_init_scale));
    b.fc2_w.tensor = scale(b.fc2_w.tensor, T(cfg_.residual_init_scale));
    blocks_.push_back(std::move(b));
  }
}

template <typename T>
std::vector<Parameter<T>*> Backbone<T>::parameters() {
  std::vector<Parameter<T>*> out{&patch_w_, &patch_b_, &time_pos_, &space_pos_};
  for (auto& b : blocks_)
    for (auto* p : b.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Backbone<T>::parameters() const {
  auto* self = const_cast<Backbone<T>*>(this);
  std::vector<const Parameter<T>*> out;
  for (auto* p : self->parameters()) out.push_back(p);
  return out;
}

template <typename T>
int64_t Backbone<T>::param_count() const {
  int64_t n = 0;
  for (const auto* p : parameters()) n += p->tensor.numel();
  return n;
}

template <typename T>
void Backbone<T>::set_trainable(bool value) {
  cfg_.frozen = !value;
  for (auto* p : parameters()) p->set_trainable(value);
}

template <typename T>
Tensor<T> Backbone<T>::patchify(const Tensor<T>& video) const {
  if (video.rank() != 4 || video.dim(0) != cfg_.in_channels || video.dim(2) != cfg_.frame_h ||
      video.dim(3) != cfg_.frame_w) {
    throw ContractViolation("backbone expects video[" + std::to_string(cfg_.in_channels) + ",T," +
                            std::to_string(cfg_.frame_h) + "," + std::to_string(cfg_.frame_w) + "], got " +
                            shape_str(video.shape()));
  }
  const int64_t C = cfg_.in_channels, Tn = video.dim(1), H = cfg_.frame_h, W = cfg_.frame_w, p = cfg_.patch;
  const int64_t gw = W / p;
  const int64_t P = cfg_.tokens_per_frame();
  const int64_t F = C * p * p;
  auto src = video.data();
  std::vector<T> out(static_cast<size_t>(Tn * P * F));
  for (int64_t t = 0; t < Tn; ++t)
    for (int64_t pi = 0; pi < P; ++pi) {
      const int64_t py = pi / gw, px = pi % gw;
      T* dst = out.data() + (t * P + pi) * F;
      int64_t f = 0;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < p; ++dy)
          for (int64_t dx = 0; dx < p; ++dx)
            dst[f++] = src[((c * Tn + t) * H + py * p + dy) * W + px * p + dx];
    }
  return Tensor<T>({Tn, P, F}, std::move(out));
}

template <typename T>
Tensor<T> Backbone<T>::embed_patches(const Tensor<T>& patches) const {
  if (patches.rank() != 4) throw ContractViolation("embed_patches expects [B,T,P,F], got " + shape_str(patches.shape()));
  RegionScope region("backbone");
  const int64_t Tn = patches.dim(1);
  const int64_t P = patches.dim(2);
  auto tokens = linear(patches, patch_w_.tensor, patch_b_.tensor);
  std::vector<int64_t> t_idx(Tn * P), s_idx(Tn * P);
  for (int64_t t = 0; t < Tn; ++t)
    for (int64_t p = 0; p < P; ++p) {
      t_idx[t * P + p] = t % cfg_.chunk_len;
      s_idx[t * P + p] = p;
    }
  auto pos = add(index_select(time_pos_.tensor, 0, t_idx), index_select(space_pos_.tensor, 0, s_idx));
  return add(tokens, reshape(pos, Shape{Tn, P, cfg_.dim}));
}

template <typename T>
Tensor<T> Backbone<T>::embed(const Tensor<T>& video) const {
  auto patches = patchify(video);
  const auto& s = patches.shape();
  return embed_patches(reshape(patches, Shape{1, s[0], s[1], s[2]}));
}

template <typename T>
Tensor<T> Backbone<T>::block(int64_t layer, const Tensor<T>& x) const {
  if (layer < 0 || layer >= cfg_.num_layers) throw ContractViolation("backbone layer index out of range");
  if (x.rank() != 4 || x.dim(3) != cfg_.dim) {
    throw ContractViolation("backbone block expects tokens[B,T,P," + std::to_string(cfg_.dim) + "], got " +
                            shape_str(x.shape()));
  }
  const auto& w = blocks_[layer];
  RegionScope region("backbone");
  const int64_t B = x.dim(0), Tn = x.dim(1), P = x.dim(2), d = cfg_.dim;
  const int64_t c = std::min(cfg_.chunk_len, Tn);
  if (Tn % c != 0) {
    throw ContractViolation("frame count " + std::to_string(Tn) + " is not a multiple of chunk length " +
                            std::to_string(c));
  }
  const int64_t G = B * (Tn / c);
  const int64_t n = c * P;
  const int64_t H = cfg_.heads;
  const int64_t dh = d / H;

  auto h = layer_norm(x, w.ln1_g.tensor, w.ln1_b.tensor);
  auto qkv = linear(h, w.qkv_w.tensor, w.qkv_b.tensor);
  qkv = permute(reshape(qkv, Shape{G, n, 3, H, dh}), {2, 0, 3, 1, 4});  // [3, G, H, n, dh]
  auto q = reshape(slice(qkv, 0, 0, 1), Shape{G * H, n, dh});
  auto k = reshape(slice(qkv, 0, 1, 1), Shape{G * H, n, dh});
  auto v = reshape(slice(qkv, 0, 2, 1), Shape{G * H, n, dh});
  auto att = softmax(scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(dh))));
  auto ctx = permute(reshape(matmul(att, v), Shape{G, H, n, dh}), {0, 2, 1, 3});  // [G, n, H, dh]
  auto attn_out = linear(reshape(ctx, Shape{B, Tn, P, d}), w.proj_w.tensor, w.proj_b.tensor);
  auto x1 = add(x, attn_out);
  auto mlp = linear(gelu(linear(layer_norm(x1, w.ln2_g.tensor, w.ln2_b.tensor), w.fc1_w.tensor, w.fc1_b.tensor)),
                    w.fc2_w.tensor, w.fc2_b.tensor);
  return add(x1, mlp);
}

int64_t clips_per_layer(const BackboneConfig& cfg, int64_t frames) {
  const int64_t padded = (frames + cfg.chunk_len - 1) / cfg.chunk_len * cfg.chunk_len;
  return padded / cfg.chunk_len;
}

// ---------------------------------------------------------------------------

template <typename T>
AdapterSet<T> AdapterSet<T>::make(adapters::AdapterKind kind, const BackboneConfig& cfg, int64_t gamma, int64_t k,
                                  bool last_half_only, uint64_t seed) {
  AdapterSet<T> set;
  set.slots.resize(cfg.num_layers);
  const int64_t first = last_half_only ? cfg.num_layers / 2 : 0;
  for (int64_t l = first; l < cfg.num_layers; ++l) {
    set.slots[l] = adapters::Adapter<T>::make(kind, cfg.dim, gamma, k, seed + static_cast<uint64_t>(l) * 7919u);
    for (auto* p : set.slots[l]->parameters()) p->name = "adapter" + std::to_string(l) + "." + p->name;
  }
  return set;
}

template <typename T>
int64_t AdapterSet<T>::count() const {
  int64_t n = 0;
  for (const auto& s : slots) n += s.has_value() ? 1 : 0;
  return n;
}

template <typename T>
int64_t AdapterSet<T>::param_count() const {
  int64_t n = 0;
  for (const auto& s : slots)
    if (s) n += s->param_count();
  return n;
}

template <typename T>
std::vector<Parameter<T>*> AdapterSet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& s : slots)
    if (s)
      for (auto* p : s->parameters()) out.push_back(p);
  return out;
}

template <typename T>
void AdapterSet<T>::set_trainable(bool value) {
  for (auto* p : parameters()) p->set_trainable(value);
}

template <typename T>
void freeze_backbone(Backbone<T>& bb) {
  bb.set_trainable(false);
}

namespace {

template <typename T>
Tensor<T> pad_frames(const Tensor<T>& video, int64_t target) {
  const int64_t Tn = video.dim(1);
  if (Tn == target) return video;
  const int64_t C = video.dim(0), H = video.dim(2), W = video.dim(3);
  std::vector<T> out(static_cast<size_t>(C * target * H * W), T(0));
  auto src = video.data();
  for (int64_t c = 0; c < C; ++c)
    std::copy(src.begin() + c * Tn * H * W, src.begin() + (c + 1) * Tn * H * W, out.begin() + c * target * H * W);
  return Tensor<T>({C, target, H, W}, std::move(out));
}

template <typename T>
void check_adapter_dims(const Backbone<T>& bb, const AdapterSet<T>& adapters) {
  if (static_cast<int64_t>(adapters.slots.size()) != bb.config().num_layers) {
    throw ContractViolation("adapter set has " + std::to_string(adapters.slots.size()) + " slots for a " +
                            std::to_string(bb.config().num_layers) + "-layer backbone");
  }
  for (const auto& s : adapters.slots) {
    if (s && s->dim() != bb.config().dim) {
      throw ContractViolation("adapter channel dim " + std::to_string(s->dim()) + " does not match backbone dim " +
                              std::to_string(bb.config().dim));
    }
  }
}

// tokens[B, T, P, d] through every block, with inside adapters when given.
template <typename T>
Tensor<T> run_blocks(const Backbone<T>& bb, const Tensor<T>& tokens, const AdapterSet<T>* adapters) {
  const auto& cfg = bb.config();
  std::vector<Block<T>> blocks;
  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    const adapters::Adapter<T>* a = nullptr;
    if (adapters && adapters->slots[l]) a = &*adapters->slots[l];
    blocks.push_back([&bb, l, a](const Tensor<T>& x) {
      auto y = bb.block(l, x);
      return a ? a->forward_tokens(y, true) : y;
    });
  }
  if (cfg.checkpointing) return checkpointed_sequence(blocks, tokens, CheckpointPolicy{cfg.checkpoint_segment});
  return plain_sequence(blocks, tokens);
}

template <typename T>
Tensor<T> encode_tokens(const Backbone<T>& bb, const Tensor<T>& tokens, const AdapterSet<T>* adapters,
                        EncodeMode mode) {
  switch (mode.kind) {
    case EncodeModeKind::kFrozen: {
      NoGradGuard no_grad;
      return run_blocks<T>(bb, tokens, nullptr);
    }
    case EncodeModeKind::kFullFT:
      return run_blocks<T>(bb, tokens, nullptr);
    case EncodeModeKind::kAdapterInside:
    case EncodeModeKind::kFullFTPlusTIA:
      if (!adapters) throw ContractViolation("encode mode " + to_string(mode.kind) + " requires adapters");
      check_adapter_dims(bb, *adapters);
      return run_blocks<T>(bb, tokens, adapters);
    case EncodeModeKind::kAdapterOutside:
      break;
  }
  if (!adapters) throw ContractViolation("adapter_outside requires adapters");
  check_adapter_dims(bb, *adapters);
  const auto& cfg = bb.config();
  const int64_t first = mode.adapt_last_half ? cfg.num_layers / 2 : 0;
  std::vector<Tensor<T>> taps;
  Tensor<T> x = tokens;
  {
    NoGradGuard no_grad;
    for (int64_t l = 0; l < cfg.num_layers; ++l) {
      x = bb.block(l, x);
      taps.push_back(x);
    }
  }
  Tensor<T> y = x;
  for (int64_t l = first; l < cfg.num_layers; ++l) {
    if (!adapters->slots[l]) {
      throw ContractViolation("side adapter missing for layer " + std::to_string(l));
    }
    y = add(y, adapters->slots[l]->forward_tokens(taps[l], false));
  }
  return y;
}

}  // namespace

template <typename T>
FeatureMap<T> encode_frame_repr(const Backbone<T>& bb, const Tensor<T>& video, const AdapterSet<T>* adapters,
                                EncodeMode mode) {
  if (video.rank() != 4) throw ContractViolation("encode expects video[C,T,H,W], got " + shape_str(video.shape()));
  const auto& cfg = bb.config();
  const int64_t Tn = video.dim(1);
  const int64_t padded = (Tn + cfg.chunk_len - 1) / cfg.chunk_len * cfg.chunk_len;
  Tensor<T> tokens;
  {
    std::optional<NoGradGuard> no_grad;
    if (!mode.backbone_trainable()) no_grad.emplace();
    tokens = bb.embed(pad_frames(video, padded));
  }
  auto out = encode_tokens(bb, tokens, adapters, mode);
  RegionScope region("pool");
  auto pooled = reshape(mean_axis(out, 2), Shape{padded, cfg.dim});  // [T, d]
  if (padded != Tn) pooled = slice(pooled, 0, 0, Tn);
  return {pooled, 1.0};
}

template <typename T>
FeatureMap<T> encode_snippet_repr(const Backbone<T>& bb, const Tensor<T>& video, int64_t snippet_len,
                                  const AdapterSet<T>* adapters, EncodeMode mode, int64_t stride) {
  if (video.rank() != 4) throw ContractViolation("encode expects video[C,T,H,W], got " + shape_str(video.shape()));
  const int64_t Tn = video.dim(1);
  if (snippet_len < 1 || snippet_len > Tn) {
    throw ConfigError("snippet length " + std::to_string(snippet_len) + " must be in [1, " + std::to_string(Tn) + "]");
  }
  if (stride < 1) throw ConfigError("snippet stride must be positive");
  const auto& cfg = bb.config();
  const int64_t c = std::min(cfg.chunk_len, snippet_len);
  if (snippet_len % c != 0) {
    throw ConfigError("snippet length " + std::to_string(snippet_len) + " must be a multiple of chunk length " +
                      std::to_string(cfg.chunk_len));
  }
  const int64_t count = (Tn + stride - 1) / stride;
  std::vector<int64_t> frames;
  frames.reserve(count * snippet_len);
  for (int64_t s = 0; s < count; ++s) {
    const int64_t center = s * stride;
    for (int64_t j = 0; j < snippet_len; ++j) {
      frames.push_back(std::clamp<int64_t>(center - snippet_len / 2 + j, 0, Tn - 1));
    }
  }
  Tensor<T> tokens;
  {
    std::optional<NoGradGuard> no_grad;
    if (!mode.backbone_trainable()) no_grad.emplace();
    auto patches = bb.patchify(video);  // [T, P, F]
    auto picked = index_select(patches, 0, frames);
    tokens = bb.embed_patches(reshape(picked, Shape{count, snippet_len, patches.dim(1), patches.dim(2)}));
  }
  auto out = encode_tokens(bb, tokens, adapters, mode);  // [count, L, P, d]
  RegionScope region("pool");
  auto pooled = mean_axis(mean_axis(out, 2), 1);  // [count, d]
  return {pooled, static_cast<double>(stride)};
}

template <typename T>
FeatureMap<T> encode_with_side_adapters(const Backbone<T>& bb, const Tensor<T>& video, const AdapterSet<T>& adapters,
                                        bool adapt_last_half) {
  return encode_frame_repr(bb, video, &adapters, EncodeMode::adapter_outside(adapt_last_half));
}

// ---------------------------------------------------------------------------

void save_backbone(const Backbone<float>& bb, const std::filesystem::path& manifest,
                   const std::filesystem::path& blobs) {
  std::vector<const Parameter<float>*> params = bb.parameters();
  save_parameters(params, manifest, blobs);
}

void load_backbone(Backbone<float>& bb, const std::filesystem::path& manifest, const std::filesystem::path& blobs) {
  auto params = bb.parameters();
  load_parameters(params, manifest, blobs);
}

#define TIALAB_INSTANTIATE_BACKBONE(T)                                                                    \
  template struct BlockWeights<T>;                                                                        \
  template class Backbone<T>;                                                                             \
  template struct AdapterSet<T>;                                                                          \
  template void freeze_backbone<T>(Backbone<T>&);                                                         \
  template FeatureMap<T> encode_frame_repr<T>(const Backbone<T>&, const Tensor<T>&, const AdapterSet<T>*, \
                                              EncodeMode);                                                \
  template FeatureMap<T> encode_snippet_repr<T>(const Backbone<T>&, const Tensor<T>&, int64_t,            \
                                                const AdapterSet<T>*, EncodeMode, int64_t);               \
  template FeatureMap<T> encode_with_side_adapters<T>(const Backbone<T>&, const Tensor<T>&,               \
                                                      const AdapterSet<T>&, bool);

TIALAB_INSTANTIATE_BACKBONE(float)
TIALAB_INSTANTIATE_BACKBONE(double)

}  // namespace tialab::backbone
