// SPDX-License-Identifier: Apache-2.0
#include "tialab/detector.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "tialab/ops.hpp"

namespace tialab::detector {

void PyramidConfig::validate() const {
  if (levels < 1) throw ConfigError("head.levels must be >= 1");
  if (num_classes < 1) throw ConfigError("head.num_classes must be >= 1");
  if (dim < 1) throw ConfigError("head.dim must be >= 1");
  if (context_blocks < 0) throw ConfigError("head.context_blocks must be >= 0");
  if (context_kernel < 1 || context_kernel % 2 == 0) throw ConfigError("head.context_kernel must be odd");
  if (static_cast<int64_t>(range_bounds.size()) != levels - 1) {
    throw ConfigError("head.ranges needs " + std::to_string(levels - 1) + " bounds, got " +
                      std::to_string(range_bounds.size()));
  }
  double prev = 0;
  for (double b : range_bounds) {
    if (!(b > prev)) throw ConfigError("head.ranges must be positive and strictly increasing");
    prev = b;
  }
  if (score_threshold < 0 || score_threshold >= 1) throw ConfigError("head.score_threshold must be in [0,1)");
  if (nms_threshold <= 0 || nms_threshold > 1) throw ConfigError("head.nms_threshold must be in (0,1]");
  if (max_proposals < 1) throw ConfigError("head.max_proposals must be >= 1");
  if (prior_prob <= 0 || prior_prob >= 1) throw ConfigError("head.prior_prob must be in (0,1)");
}

std::pair<double, double> PyramidConfig::range(int64_t level) const {
  const double lo = level == 0 ? 0.0 : range_bounds[level - 1];
  const double hi = level == levels - 1 ? std::numeric_limits<double>::infinity() : range_bounds[level];
  return {lo, hi};
}

template <typename T>
PyramidHead<T>::PyramidHead(PyramidConfig cfg, int64_t in_channels) : cfg_(std::move(cfg)), in_channels_(in_channels) {
  cfg_.validate();
  if (in_channels < 1) throw ConfigError("head input channels must be >= 1");
  std::mt19937_64 rng(cfg_.seed);
  const int64_t D = cfg_.dim, K = cfg_.num_classes;
  auto dense = [&](const std::string& name, int64_t in, int64_t out) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    return Parameter<T>{name, Tensor<T>::uniform({in, out}, -bound, bound, rng)};
  };
  auto vec = [](const std::string& name, int64_t n, T v) { return Parameter<T>{name, Tensor<T>::full({n}, v)}; };
  proj_w_ = dense("head.proj_w", in_channels, D);
  proj_b_ = vec("head.proj_b", D, T(0));
  proj_g_ = vec("head.proj_g", D, T(1));
  proj_beta_ = vec("head.proj_beta", D, T(0));
  for (int64_t l = 1; l < cfg_.levels; ++l) {
    const std::string p = "head.down" + std::to_string(l) + ".";
    std::vector<T> binomial;
    for (int64_t c = 0; c < D; ++c) binomial.insert(binomial.end(), {T(0.25), T(0.5), T(0.25)});
    down_k_.push_back({p + "kernel", Tensor<T>({D, 3}, std::move(binomial))});
    down_b_.push_back(vec(p + "bias", D, T(0)));
    down_g_.push_back(vec(p + "g", D, T(1)));
    down_beta_.push_back(vec(p + "beta", D, T(0)));
  }
  ctx_.resize(static_cast<size_t>(cfg_.levels));
  for (int64_t l = 0; l < cfg_.levels; ++l) {
    for (int64_t i = 0; i < cfg_.context_blocks; ++i) {
      const std::string p = "head.level" + std::to_string(l) + ".ctx" + std::to_string(i) + ".";
      const T bound = T(1) / std::sqrt(static_cast<T>(cfg_.context_kernel));
      Parameter<T> k{p + "kernel", Tensor<T>::uniform({D, cfg_.context_kernel}, -bound, bound, rng)};
      ctx_[l].push_back({std::move(k), vec(p + "bias", D, T(0)), vec(p + "g", D, T(1)), vec(p + "beta", D, T(0)),
                         dense(p + "w1", D, 2 * D), vec(p + "b1", 2 * D, T(0)), dense(p + "w2", 2 * D, D),
                         vec(p + "b2", D, T(0))});
    }
  }
  tower_w_ = dense("head.tower_w", D, D);
  tower_b_ = vec("head.tower_b", D, T(0));
  cls_w_ = dense("head.cls_w", D, K);
  const T prior = static_cast<T>(-std::log((1 - cfg_.prior_prob) / cfg_.prior_prob));
  cls_b_ = vec("head.cls_b", K, prior);
  reg_w_ = dense("head.reg_w", D, 2);
  reg_b_ = vec("head.reg_b", 2, T(0));
}

template <typename T>
std::vector<Parameter<T>*> PyramidHead<T>::parameters() {
  std::vector<Parameter<T>*> out{&proj_w_, &proj_b_, &proj_g_, &proj_beta_};
  for (size_t i = 0; i < down_k_.size(); ++i) {
    out.insert(out.end(), {&down_k_[i], &down_b_[i], &down_g_[i], &down_beta_[i]});
  }
  for (auto& level : ctx_)
    for (auto& c : level) out.insert(out.end(), {&c.k, &c.b, &c.g, &c.beta, &c.w1, &c.b1, &c.w2, &c.b2});
  out.insert(out.end(), {&tower_w_, &tower_b_, &cls_w_, &cls_b_, &reg_w_, &reg_b_});
  return out;
}

template <typename T>
int64_t PyramidHead<T>::param_count() {
  int64_t n = 0;
  for (auto* p : parameters()) n += p->tensor.numel();
  return n;
}

template <typename T>
void PyramidHead<T>::zero_all() {
  for (auto* p : parameters()) {
    auto t = Tensor<T>::zeros(p->tensor.shape());
    t.set_requires_grad(p->trainable);
    p->tensor = t;
  }
}

template <typename T>
HeadOutputs<T> PyramidHead<T>::forward(const Tensor<T>& features) const {
  if (features.rank() != 2 || features.dim(1) != in_channels_) {
    throw ContractViolation("head expects features[T," + std::to_string(in_channels_) + "], got " +
                            shape_str(features.shape()));
  }
  const int64_t len = features.dim(0);
  if (len < (int64_t{1} << cfg_.levels)) {
    throw ConfigError("feature length " + std::to_string(len) + " is shorter than 2^levels = " +
                      std::to_string(int64_t{1} << cfg_.levels));
  }
  RegionScope region("head");
  HeadOutputs<T> out;
  Tensor<T> x = layer_norm(linear(features, proj_w_.tensor, proj_b_.tensor), proj_g_.tensor, proj_beta_.tensor);
  for (int64_t l = 0; l < cfg_.levels; ++l) {
    if (l > 0) {
      x = depthwise_temporal_conv(x, down_k_[l - 1].tensor, down_b_[l - 1].tensor, ConvLayout::kChannelsLast, 2);
      x = layer_norm(x, down_g_[l - 1].tensor, down_beta_[l - 1].tensor);
    }
    for (const auto& c : ctx_[l]) {
      auto z = depthwise_temporal_conv(x, c.k.tensor, c.b.tensor, ConvLayout::kChannelsLast);
      z = gelu(linear(layer_norm(z, c.g.tensor, c.beta.tensor), c.w1.tensor, c.b1.tensor));
      x = add(x, linear(z, c.w2.tensor, c.b2.tensor));
    }
    auto h = gelu(linear(x, tower_w_.tensor, tower_b_.tensor));
    out.push_back({linear(h, cls_w_.tensor, cls_b_.tensor), softplus(linear(h, reg_w_.tensor, reg_b_.tensor)),
                   cfg_.level_stride(l)});
  }
  return out;
}

std::vector<LevelTargets> assign_targets(const std::vector<Segment>& segments, const PyramidConfig& cfg,
                                         int64_t length) {
  const int64_t K = cfg.num_classes;
  std::vector<LevelTargets> out;
  for (int64_t l = 0; l < cfg.levels; ++l) {
    LevelTargets lt;
    lt.stride = cfg.level_stride(l);
    lt.length = (length + lt.stride - 1) / lt.stride;
    lt.cls.assign(static_cast<size_t>(lt.length * K), 0.0f);
    lt.distances.assign(static_cast<size_t>(lt.length * 2), 0.0f);
    const auto [lo, hi] = cfg.range(l);
    for (int64_t i = 0; i < lt.length; ++i) {
      const double t = static_cast<double>(i * lt.stride);
      const Segment* best = nullptr;
      for (const auto& s : segments) {
        if (s.label < 0 || s.label >= K) throw ContractViolation("segment label out of range");
        if (t < s.start || t > s.end) continue;
        const double reach = std::max(t - s.start, s.end - t);
        if (reach < lo || reach >= hi) continue;
        if (!best || s.end - s.start < best->end - best->start) best = &s;
      }
      if (!best) continue;
      lt.positive.push_back(i);
      lt.cls[i * K + best->label] = 1.0f;
      lt.distances[i * 2] = static_cast<float>((t - best->start) / lt.stride);
      lt.distances[i * 2 + 1] = static_cast<float>((best->end - t) / lt.stride);
    }
    out.push_back(std::move(lt));
  }
  return out;
}

template <typename T>
Tensor<T> compute_loss(const HeadOutputs<T>& out, const std::vector<LevelTargets>& targets, LossTerms* terms) {
  if (out.size() != targets.size()) throw ContractViolation("head outputs and targets differ in level count");
  RegionScope region("head");
  Tensor<T> cls_sum, reg_sum;
  int64_t locations = 0, positives = 0;
  for (size_t l = 0; l < out.size(); ++l) {
    const auto& o = out[l];
    const auto& tg = targets[l];
    const int64_t K = o.logits.dim(1);
    if (o.logits.dim(0) != tg.length || static_cast<int64_t>(tg.cls.size()) != tg.length * K) {
      throw ContractViolation("level " + std::to_string(l) + " logits " + shape_str(o.logits.shape()) +
                              " do not match targets of length " + std::to_string(tg.length));
    }
    Tensor<T> cls_t({tg.length, K}, std::vector<T>(tg.cls.begin(), tg.cls.end()));
    auto c = sum(sigmoid_focal_loss(o.logits, cls_t));
    cls_sum = cls_sum.defined() ? add(cls_sum, c) : c;
    locations += tg.length;
    if (!tg.positive.empty()) {
      const auto n = static_cast<int64_t>(tg.positive.size());
      std::vector<T> tv;
      tv.reserve(n * 2);
      for (auto i : tg.positive) {
        tv.push_back(static_cast<T>(tg.distances[i * 2]));
        tv.push_back(static_cast<T>(tg.distances[i * 2 + 1]));
      }
      auto r = sum(interval_iou_loss(index_select(o.distances, 0, tg.positive), Tensor<T>({n, 2}, std::move(tv))));
      reg_sum = reg_sum.defined() ? add(reg_sum, r) : r;
      positives += n;
    }
  }
  auto loss = scale(cls_sum, T(1) / static_cast<T>(std::max<int64_t>(locations, 1)));
  const double cls_value = static_cast<double>(loss.item());
  double reg_value = 0;
  if (positives > 0) {
    auto reg = scale(reg_sum, T(1) / static_cast<T>(positives));
    reg_value = static_cast<double>(reg.item());
    loss = add(loss, reg);
  }
  if (terms) *terms = {cls_value, reg_value, positives};
  return loss;
}

template <typename T>
std::vector<Proposal> decode_raw(const HeadOutputs<T>& out, const PyramidConfig& cfg) {
  std::vector<Proposal> props;
  for (const auto& o : out) {
    const int64_t len = o.logits.dim(0), K = o.logits.dim(1);
    auto logits = o.logits.data();
    auto dist = o.distances.data();
    for (int64_t i = 0; i < len; ++i) {
      int64_t best = 0;
      for (int64_t c = 1; c < K; ++c)
        if (logits[i * K + c] > logits[i * K + best]) best = c;
      const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i * K + best])));
      if (score <= cfg.score_threshold) continue;
      const double t = static_cast<double>(i * o.stride);
      const double s = t - static_cast<double>(dist[i * 2]) * o.stride;
      const double e = t + static_cast<double>(dist[i * 2 + 1]) * o.stride;
      if (!(e > s)) continue;
      props.push_back({s, e, best, score});
    }
  }
  return props;
}

template <typename T>
std::vector<Proposal> decode_proposals(const HeadOutputs<T>& out, const PyramidConfig& cfg) {
  return nms(decode_raw(out, cfg), cfg.nms_threshold, cfg.max_proposals);
}

std::vector<Proposal> nms(std::vector<Proposal> proposals, double tiou_threshold, int64_t max_keep) {
  std::stable_sort(proposals.begin(), proposals.end(),
                   [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  std::vector<Proposal> kept;
  for (const auto& p : proposals) {
    if (static_cast<int64_t>(kept.size()) >= max_keep) break;
    bool suppressed = false;
    for (const auto& q : kept) {
      if (q.label == p.label && tiou(p.t_start, p.t_end, q.t_start, q.t_end) > tiou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

void write_proposals_csv(std::ostream& os, const PredictionSet& predictions) {
  os << "video_id,t_start,t_end,class,score\n" << std::fixed << std::setprecision(6);
  for (const auto& [id, props] : predictions)
    for (const auto& p : props) os << id << ',' << p.t_start << ',' << p.t_end << ',' << p.label << ',' << p.score << '\n';
}

PredictionSet read_proposals_csv(std::istream& is) {
  PredictionSet out;
  std::string line;
  if (!std::getline(is, line) || line.rfind("video_id,", 0) != 0) throw LoadError("proposals csv: missing header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, f;
    Proposal p;
    std::getline(ls, id, ',');
    try {
      std::getline(ls, f, ',');
      p.t_start = std::stod(f);
      std::getline(ls, f, ',');
      p.t_end = std::stod(f);
      std::getline(ls, f, ',');
      p.label = std::stoll(f);
      std::getline(ls, f, ',');
      p.score = std::stod(f);
    } catch (const std::exception&) {
      throw LoadError("proposals csv: bad row '" + line + "'");
    }
    out[id].push_back(p);
  }
  return out;
}

#define TIALAB_INSTANTIATE_DETECTOR(T)                                                                         \
  template class PyramidHead<T>;                                                                               \
  template Tensor<T> compute_loss<T>(const HeadOutputs<T>&, const std::vector<LevelTargets>&, LossTerms*);     \
  template std::vector<Proposal> decode_raw<T>(const HeadOutputs<T>&, const PyramidConfig&);                   \
  template std::vector<Proposal> decode_proposals<T>(const HeadOutputs<T>&, const PyramidConfig&);

TIALAB_INSTANTIATE_DETECTOR(float)
TIALAB_INSTANTIATE_DETECTOR(double)

}  // namespace tialab::detector
