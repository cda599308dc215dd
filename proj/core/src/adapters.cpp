// SPDX-License-Identifier: Apache-2.0
#include "tialab/adapters.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "tialab/ops.hpp"
#include "tialab/serialize.hpp"

namespace tialab::adapters {

std::string to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kStandard: return "standard";
    case AdapterKind::kTia: return "tia";
    case AdapterKind::kTiaNoResidual: return "tia_no_residual";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& s) {
  if (s == "standard") return AdapterKind::kStandard;
  if (s == "tia") return AdapterKind::kTia;
  if (s == "tia_no_residual") return AdapterKind::kTiaNoResidual;
  throw ConfigError("unknown adapter kind '" + s + "'");
}

namespace {

void check_dims(int64_t d, int64_t gamma) {
  if (d <= 0) throw ConfigError("adapter channel dim must be positive");
  if (gamma < 2) throw ConfigError("adapter gamma must be >= 2, got " + std::to_string(gamma));
  if (d % gamma != 0) {
    throw ConfigError("adapter channel dim " + std::to_string(d) + " is not divisible by gamma " +
                      std::to_string(gamma));
  }
}

void check_kernel(int64_t k) {
  if (k < 1 || k % 2 == 0) throw ConfigError("temporal kernel size must be odd and positive, got " + std::to_string(k));
}

template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, int64_t fan_in, std::mt19937_64& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
  return Tensor<T>::uniform(shape, -bound, bound, rng);
}

void check_channels(const Shape& s, int64_t axis_extent, int64_t d, const char* what) {
  if (axis_extent != d) {
    throw ContractViolation(std::string(what) + ": input " + shape_str(s) + " does not have " +
                            std::to_string(d) + " channels");
  }
}

// [d, t, h, w] <-> [t, h*w, d]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw ContractViolation("adapter expects x[d,t,h,w], got " + shape_str(x.shape()));
  const auto& s = x.shape();
  return reshape(permute(x, {1, 2, 3, 0}), Shape{s[1], s[2] * s[3], s[0]});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, const Shape& s) {
  return permute(reshape(tokens, Shape{s[1], s[2], s[3], s[0]}), {3, 0, 1, 2});
}

}  // namespace

template <typename T>
std::vector<Parameter<T>*> TIAWeights<T>::parameters() {
  return {&down_w, &down_b, &mid_w, &mid_b, &dw_kernel, &dw_bias, &up_w, &up_b, &alpha};
}

template <typename T>
std::vector<const Parameter<T>*> TIAWeights<T>::parameters() const {
  return {&down_w, &down_b, &mid_w, &mid_b, &dw_kernel, &dw_bias, &up_w, &up_b, &alpha};
}

template <typename T>
std::vector<Parameter<T>*> StandardAdapterWeights<T>::parameters() {
  return {&down_w, &down_b, &up_w, &up_b};
}

template <typename T>
std::vector<const Parameter<T>*> StandardAdapterWeights<T>::parameters() const {
  return {&down_w, &down_b, &up_w, &up_b};
}

template <typename T>
TIAWeights<T> init_tia(int64_t d, int64_t gamma, int64_t k, uint64_t seed) {
  check_dims(d, gamma);
  check_kernel(k);
  const int64_t h = d / gamma;
  std::mt19937_64 rng(seed);
  TIAWeights<T> w;
  w.d = d;
  w.gamma = gamma;
  w.k = k;
  w.down_w = {"down_w", fan_in_uniform<T>({d, h}, d, rng)};
  w.down_b = {"down_b", fan_in_uniform<T>({h}, d, rng)};
  w.mid_w = {"mid_w", fan_in_uniform<T>({h, h}, h, rng)};
  w.mid_b = {"mid_b", fan_in_uniform<T>({h}, h, rng)};
  std::vector<T> kern(h * k, T(0));
  for (int64_t c = 0; c < h; ++c) kern[c * k + (k - 1) / 2] = T(1);
  w.dw_kernel = {"dw_kernel", Tensor<T>({h, k}, std::move(kern))};
  w.dw_bias = {"dw_bias", Tensor<T>::zeros({h})};
  w.up_w = {"up_w", Tensor<T>::zeros({h, d})};
  w.up_b = {"up_b", Tensor<T>::zeros({d})};
  w.alpha = {"alpha", Tensor<T>::scalar(T(1))};
  return w;
}

template <typename T>
StandardAdapterWeights<T> init_standard_adapter(int64_t d, int64_t gamma, uint64_t seed) {
  check_dims(d, gamma);
  const int64_t h = d / gamma;
  std::mt19937_64 rng(seed);
  StandardAdapterWeights<T> w;
  w.d = d;
  w.gamma = gamma;
  w.down_w = {"down_w", fan_in_uniform<T>({d, h}, d, rng)};
  w.down_b = {"down_b", fan_in_uniform<T>({h}, d, rng)};
  w.up_w = {"up_w", Tensor<T>::zeros({h, d})};
  w.up_b = {"up_b", Tensor<T>::zeros({d})};
  return w;
}

template <typename T>
Tensor<T> tia_tokens(const TIAWeights<T>& w, const Tensor<T>& x, bool outer_residual) {
  if (x.rank() < 2) throw ContractViolation("tia expects channels-last tokens, got " + shape_str(x.shape()));
  check_channels(x.shape(), x.dim(-1), w.d, "tia");
  RegionScope region("adapter");
  auto xb = gelu(linear(x, w.down_w.tensor, w.down_b.tensor));
  auto conv = depthwise_temporal_conv(xb, w.dw_kernel.tensor, w.dw_bias.tensor, ConvLayout::kChannelsLast);
  auto xh = linear(conv, w.mid_w.tensor, w.mid_b.tensor);
  if (w.inner_residual) xh = add(xh, xb);
  auto branch = mul(linear(xh, w.up_w.tensor, w.up_b.tensor), w.alpha.tensor);
  return outer_residual ? add(x, branch) : branch;
}

template <typename T>
Tensor<T> standard_adapter_tokens(const StandardAdapterWeights<T>& w, const Tensor<T>& x, bool outer_residual) {
  if (x.rank() < 1) throw ContractViolation("adapter expects channels-last tokens");
  check_channels(x.shape(), x.dim(-1), w.d, "adapter");
  RegionScope region("adapter");
  auto branch = linear(gelu(linear(x, w.down_w.tensor, w.down_b.tensor)), w.up_w.tensor, w.up_b.tensor);
  return outer_residual ? add(x, branch) : branch;
}

template <typename T>
Tensor<T> tia_forward(const TIAWeights<T>& w, const Tensor<T>& x) {
  if (x.rank() == 4) check_channels(x.shape(), x.dim(0), w.d, "tia_forward");
  return from_tokens(tia_tokens(w, to_tokens(x), true), x.shape());
}

template <typename T>
Tensor<T> tia_side_forward(const TIAWeights<T>& w, const Tensor<T>& x) {
  if (x.rank() == 4) check_channels(x.shape(), x.dim(0), w.d, "tia_side_forward");
  return from_tokens(tia_tokens(w, to_tokens(x), false), x.shape());
}

template <typename T>
Tensor<T> standard_adapter_forward(const StandardAdapterWeights<T>& w, const Tensor<T>& x) {
  if (x.rank() == 4) check_channels(x.shape(), x.dim(0), w.d, "standard_adapter_forward");
  return from_tokens(standard_adapter_tokens(w, to_tokens(x), true), x.shape());
}

int64_t tia_param_count(int64_t d, int64_t gamma, int64_t k) {
  check_dims(d, gamma);
  check_kernel(k);
  const int64_t h = d / gamma;
  return (d * h + h) + (h * h + h) + (h * k + h) + (h * d + d) + 1;
}

int64_t tia_param_count_no_bias(int64_t d, int64_t gamma, int64_t k) {
  const int64_t h = d / gamma;
  return tia_param_count(d, gamma, k) - (3 * h + d);
}

int64_t standard_adapter_param_count(int64_t d, int64_t gamma) {
  check_dims(d, gamma);
  const int64_t h = d / gamma;
  return (d * h + h) + (h * d + d);
}

template <typename T>
int64_t count_params(const TIAWeights<T>& w) {
  int64_t n = 0;
  for (const auto* p : w.parameters()) n += p->tensor.numel();
  return n;
}

template <typename T>
int64_t count_params(const StandardAdapterWeights<T>& w) {
  int64_t n = 0;
  for (const auto* p : w.parameters()) n += p->tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
Adapter<T> Adapter<T>::make(AdapterKind kind, int64_t d, int64_t gamma, int64_t k, uint64_t seed) {
  if (kind == AdapterKind::kStandard) return Adapter(init_standard_adapter<T>(d, gamma, seed));
  auto w = init_tia<T>(d, gamma, k, seed);
  w.inner_residual = kind == AdapterKind::kTia;
  return Adapter(std::move(w));
}

template <typename T>
AdapterKind Adapter<T>::kind() const {
  if (const auto* t = tia()) return t->inner_residual ? AdapterKind::kTia : AdapterKind::kTiaNoResidual;
  return AdapterKind::kStandard;
}

template <typename T>
int64_t Adapter<T>::dim() const {
  return std::visit([](const auto& w) { return w.d; }, weights_);
}

template <typename T>
Tensor<T> Adapter<T>::forward_tokens(const Tensor<T>& x, bool outer_residual) const {
  if (const auto* t = tia()) return tia_tokens(*t, x, outer_residual);
  return standard_adapter_tokens(std::get<StandardAdapterWeights<T>>(weights_), x, outer_residual);
}

template <typename T>
std::vector<Parameter<T>*> Adapter<T>::parameters() {
  return std::visit([](auto& w) { return w.parameters(); }, weights_);
}

template <typename T>
std::vector<const Parameter<T>*> Adapter<T>::parameters() const {
  return std::visit([](const auto& w) { return w.parameters(); }, weights_);
}

template <typename T>
int64_t Adapter<T>::param_count() const {
  return std::visit([](const auto& w) { return count_params(w); }, weights_);
}

template <typename T>
void Adapter<T>::set_trainable(bool value) {
  for (auto* p : parameters()) p->set_trainable(value);
}

void save_adapter(std::ostream& os, const Adapter<float>& a) {
  if (const auto* t = a.tia()) {
    os << "tia d=" << t->d << " gamma=" << t->gamma << " k=" << t->k;
    if (!t->inner_residual) os << " noresidual";
  } else {
    os << "adapter d=" << a.dim() << " gamma=" << a.dim() / a.parameters()[0]->tensor.dim(1);
  }
  os << "\n";
  for (const auto* p : a.parameters()) write_blob(os, p->tensor);
}

Adapter<float> load_adapter(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw LoadError("missing adapter header");
  std::istringstream hs(header);
  std::string family;
  hs >> family;
  int64_t d = -1, gamma = -1, k = 1;
  bool inner_residual = true;
  std::string tok;
  while (hs >> tok) {
    auto eq = tok.find('=');
    if (tok == "noresidual") {
      inner_residual = false;
      continue;
    }
    if (eq == std::string::npos) throw LoadError("bad adapter header token '" + tok + "'");
    const auto key = tok.substr(0, eq);
    const auto val = std::stoll(tok.substr(eq + 1));
    if (key == "d") d = val;
    else if (key == "gamma") gamma = val;
    else if (key == "k") k = val;
    else throw LoadError("unknown adapter header key '" + key + "'");
  }
  if (d <= 0 || gamma <= 0) throw LoadError("adapter header missing d or gamma: '" + header + "'");
  Adapter<float> a;
  if (family == "tia") {
    a = Adapter<float>::make(inner_residual ? AdapterKind::kTia : AdapterKind::kTiaNoResidual, d, gamma, k, 0);
  } else if (family == "adapter") {
    a = Adapter<float>::make(AdapterKind::kStandard, d, gamma, 1, 0);
  } else {
    throw LoadError("unknown adapter family '" + family + "'");
  }
  for (auto* p : a.parameters()) {
    auto t = read_blob<float>(is);
    if (t.shape() != p->tensor.shape()) {
      throw LoadError("adapter parameter " + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(p->tensor.shape()));
    }
    p->tensor = t;
    p->tensor.set_requires_grad(p->trainable);
  }
  return a;
}

#define TIALAB_INSTANTIATE_ADAPTERS(T)                                                                  \
  template struct TIAWeights<T>;                                                                        \
  template struct StandardAdapterWeights<T>;                                                            \
  template class Adapter<T>;                                                                            \
  template TIAWeights<T> init_tia<T>(int64_t, int64_t, int64_t, uint64_t);                              \
  template StandardAdapterWeights<T> init_standard_adapter<T>(int64_t, int64_t, uint64_t);              \
  template Tensor<T> tia_forward<T>(const TIAWeights<T>&, const Tensor<T>&);                            \
  template Tensor<T> tia_side_forward<T>(const TIAWeights<T>&, const Tensor<T>&);                       \
  template Tensor<T> standard_adapter_forward<T>(const StandardAdapterWeights<T>&, const Tensor<T>&);   \
  template Tensor<T> tia_tokens<T>(const TIAWeights<T>&, const Tensor<T>&, bool);                       \
  template Tensor<T> standard_adapter_tokens<T>(const StandardAdapterWeights<T>&, const Tensor<T>&, bool); \
  template int64_t count_params<T>(const TIAWeights<T>&);                                               \
  template int64_t count_params<T>(const StandardAdapterWeights<T>&);

TIALAB_INSTANTIATE_ADAPTERS(float)
TIALAB_INSTANTIATE_ADAPTERS(double)

}  // namespace tialab::adapters
