// SPDX-License-Identifier: Apache-2.0
//
// Bottleneck adapters for a frozen video encoder.
//
// Standard adapter:   x' = W_up^T gelu(W_down^T x) + x
// Temporal-informative adapter (TIA):
//   xb = gelu(W_down^T x)
//   xh = W_mid^T dwconv_k(xb) + xb
//   x' = alpha * W_up^T xh + x
// The side variant drops the final "+ x" and is summed into the encoder
// output instead. W_up (weight and bias) starts at zero and alpha at one, so a
// fresh adapter is an exact identity (or exact zero for the side variant).

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "tialab/tensor.hpp"

namespace tialab::adapters {

enum class AdapterKind {
  kStandard,
  kTia,
  // TIA without the inner "+ xb" around the depth-wise convolution.
  kTiaNoResidual,
};

std::string to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& s);

struct PlacementMode {
  enum class Kind { kInside, kOutside };
  Kind kind = Kind::kInside;
  bool adapt_last_half = false;

  static PlacementMode inside() { return {Kind::kInside, false}; }
  static PlacementMode outside(bool last_half) { return {Kind::kOutside, last_half}; }
};

template <typename T>
struct TIAWeights {
  int64_t d = 0;
  int64_t gamma = 4;
  int64_t k = 3;
  bool inner_residual = true;

  Parameter<T> down_w;     // [d, d/gamma]
  Parameter<T> down_b;     // [d/gamma]
  Parameter<T> mid_w;      // [d/gamma, d/gamma]
  Parameter<T> mid_b;      // [d/gamma]
  Parameter<T> dw_kernel;  // [d/gamma, k]
  Parameter<T> dw_bias;    // [d/gamma]
  Parameter<T> up_w;       // [d/gamma, d]
  Parameter<T> up_b;       // [d]
  Parameter<T> alpha;      // [1]

  int64_t hidden() const { return d / gamma; }
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
};

template <typename T>
struct StandardAdapterWeights {
  int64_t d = 0;
  int64_t gamma = 4;

  Parameter<T> down_w;  // [d, d/gamma]
  Parameter<T> down_b;  // [d/gamma]
  Parameter<T> up_w;    // [d/gamma, d]
  Parameter<T> up_b;    // [d]

  int64_t hidden() const { return d / gamma; }
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
};

// Down/mid projections are uniform in +-1/sqrt(fan_in) (weights and biases),
// the depth-wise kernel is the identity tap, W_up and its bias are zero and
// alpha is one. Throws ConfigError when d % gamma != 0, gamma < 2 or k is even.
template <typename T>
TIAWeights<T> init_tia(int64_t d, int64_t gamma, int64_t k, uint64_t seed);

template <typename T>
StandardAdapterWeights<T> init_standard_adapter(int64_t d, int64_t gamma, uint64_t seed);

// x[d, t, h, w] -> [d, t, h, w].
template <typename T>
Tensor<T> tia_forward(const TIAWeights<T>& w, const Tensor<T>& x);
// Same body without the final residual; zero at init.
template <typename T>
Tensor<T> tia_side_forward(const TIAWeights<T>& w, const Tensor<T>& x);
template <typename T>
Tensor<T> standard_adapter_forward(const StandardAdapterWeights<T>& w, const Tensor<T>& x);

// Channels-last variants over token grids x[..., t, s, d]; the temporal
// convolution runs along t independently for every leading index.
template <typename T>
Tensor<T> tia_tokens(const TIAWeights<T>& w, const Tensor<T>& x, bool outer_residual);
template <typename T>
Tensor<T> standard_adapter_tokens(const StandardAdapterWeights<T>& w, const Tensor<T>& x,
                                  bool outer_residual);

// Closed-form TIA parameter count with biases and alpha.
int64_t tia_param_count(int64_t d, int64_t gamma, int64_t k);
// Same count without any bias vectors (alpha kept).
int64_t tia_param_count_no_bias(int64_t d, int64_t gamma, int64_t k);
int64_t standard_adapter_param_count(int64_t d, int64_t gamma);

// Counts stored elements.
template <typename T>
int64_t count_params(const TIAWeights<T>& w);
template <typename T>
int64_t count_params(const StandardAdapterWeights<T>& w);

// One adapter of either family, used by the encoder.
template <typename T>
class Adapter {
 public:
  Adapter() = default;
  static Adapter make(AdapterKind kind, int64_t d, int64_t gamma, int64_t k, uint64_t seed);
  explicit Adapter(TIAWeights<T> w) : weights_(std::move(w)) {}
  explicit Adapter(StandardAdapterWeights<T> w) : weights_(std::move(w)) {}

  AdapterKind kind() const;
  int64_t dim() const;
  Tensor<T> forward_tokens(const Tensor<T>& x, bool outer_residual) const;
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  int64_t param_count() const;
  void set_trainable(bool value);

  TIAWeights<T>* tia() { return std::get_if<TIAWeights<T>>(&weights_); }
  const TIAWeights<T>* tia() const { return std::get_if<TIAWeights<T>>(&weights_); }
  StandardAdapterWeights<T>* standard() { return std::get_if<StandardAdapterWeights<T>>(&weights_); }

 private:
  std::variant<StandardAdapterWeights<T>, TIAWeights<T>> weights_;
};

// Adapter file: one text line "tia d=<d> gamma=<g> k=<k>" (or
// "adapter d=<d> gamma=<g>" for the standard family), a newline, then one
// tensor blob per parameter in declaration order.
void save_adapter(std::ostream& os, const Adapter<float>& a);
Adapter<float> load_adapter(std::istream& is);

}  // namespace tialab::adapters
