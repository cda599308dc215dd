// SPDX-License-Identifier: Apache-2.0
#include "tialab/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "tialab/ops.hpp"
#include "tialab/serialize.hpp"

namespace tialab::harness {

using backbone::EncodeMode;
using backbone::EncodeModeKind;
using backbone::Representation;

namespace {

void sync(RunConfig& c) {
  c.backbone.frame_h = c.data.height;
  c.backbone.frame_w = c.data.width;
  c.backbone.seed = c.seed;
  c.head.num_classes = c.data.num_classes;
  c.head.seed = c.seed + 1;
  c.eval.num_classes = c.data.num_classes;
}

}  // namespace

RunConfig::RunConfig() {
  data.height = 8;
  data.width = 8;
  data.min_frames = 96;
  data.max_frames = 192;
  data.min_action_frames = 16;
  data.max_action_frames = 48;
  backbone.dim = 32;
  backbone.heads = 2;
  backbone.mlp_ratio = 2;
  head.dim = 32;
  head.levels = 2;
  head.range_bounds = {16};
  sync(*this);
}

namespace {

EncodeMode encode_mode(const RunConfig& c) {
  EncodeMode m{c.mode, false};
  if (c.mode == EncodeModeKind::kAdapterOutside) m.adapt_last_half = c.adapt_last_half;
  return m;
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::istringstream ls(v);
  for (std::string cell; std::getline(ls, cell, ',');) out.push_back(to_double(key, trim(cell)));
  return out;
}

std::string from_list(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define TIALAB_INT(key, member)                                                                      \
  {key, {[](RunConfig& c, const std::string& v) { c.member = to_int(key, v); },                      \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define TIALAB_UINT(key, member)                                                                     \
  {key, {[](RunConfig& c, const std::string& v) { c.member = static_cast<uint64_t>(to_int(key, v)); }, \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define TIALAB_DOUBLE(key, member)                                                                   \
  {key, {[](RunConfig& c, const std::string& v) { c.member = to_double(key, v); },                   \
         [](const RunConfig& c) { return fmt_double(c.member); }}}
#define TIALAB_BOOL(key, member)                                                                     \
  {key, {[](RunConfig& c, const std::string& v) { c.member = to_bool(key, v); },                     \
         [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"data.path", {[](RunConfig& c, const std::string& v) { c.data_path = v; },
                     [](const RunConfig& c) { return c.data_path; }}},
      TIALAB_INT("data.num_classes", data.num_classes),
      TIALAB_INT("data.min_frames", data.min_frames),
      TIALAB_INT("data.max_frames", data.max_frames),
      TIALAB_INT("data.min_actions", data.min_actions),
      TIALAB_INT("data.max_actions", data.max_actions),
      TIALAB_INT("data.min_action_frames", data.min_action_frames),
      TIALAB_INT("data.max_action_frames", data.max_action_frames),
      TIALAB_INT("data.height", data.height),
      TIALAB_INT("data.width", data.width),
      TIALAB_DOUBLE("data.amplitude", data.amplitude),
      TIALAB_DOUBLE("data.noise", data.noise),
      TIALAB_DOUBLE("data.base_period", data.base_period),
      TIALAB_DOUBLE("data.fps", data.fps),
      TIALAB_UINT("data.seed", data.seed),
      TIALAB_INT("data.train_videos", train_videos),
      TIALAB_INT("data.test_videos", test_videos),
      TIALAB_INT("backbone.layers", backbone.num_layers),
      TIALAB_INT("backbone.dim", backbone.dim),
      TIALAB_INT("backbone.heads", backbone.heads),
      TIALAB_INT("backbone.mlp_ratio", backbone.mlp_ratio),
      TIALAB_INT("backbone.chunk_len", backbone.chunk_len),
      TIALAB_INT("backbone.patch", backbone.patch),
      TIALAB_BOOL("backbone.pos_embed", backbone.pos_embed),
      TIALAB_DOUBLE("backbone.pos_init_std", backbone.pos_init_std),
      TIALAB_DOUBLE("backbone.residual_init_scale", backbone.residual_init_scale),
      TIALAB_BOOL("backbone.checkpointing", backbone.checkpointing),
      TIALAB_INT("backbone.checkpoint_segment", backbone.checkpoint_segment),
      {"encode.mode", {[](RunConfig& c, const std::string& v) { c.mode = backbone::parse_encode_mode(v); },
                       [](const RunConfig& c) { return backbone::to_string(c.mode); }}},
      TIALAB_BOOL("encode.adapt_last_half", adapt_last_half),
      {"encode.representation",
       {[](RunConfig& c, const std::string& v) { c.representation = backbone::parse_representation(v); },
        [](const RunConfig& c) { return backbone::to_string(c.representation); }}},
      TIALAB_INT("encode.snippet_len", snippet_len),
      {"adapter.kind", {[](RunConfig& c, const std::string& v) { c.adapter_kind = adapters::parse_adapter_kind(v); },
                        [](const RunConfig& c) { return adapters::to_string(c.adapter_kind); }}},
      TIALAB_INT("adapter.gamma", gamma),
      TIALAB_INT("adapter.k", kernel),
      TIALAB_DOUBLE("adapter.lr_scale", adapter_lr_scale),
      TIALAB_INT("head.levels", head.levels),
      TIALAB_INT("head.dim", head.dim),
      TIALAB_INT("head.context_blocks", head.context_blocks),
      TIALAB_INT("head.context_kernel", head.context_kernel),
      {"head.ranges", {[](RunConfig& c, const std::string& v) { c.head.range_bounds = to_list("head.ranges", v); },
                       [](const RunConfig& c) { return from_list(c.head.range_bounds); }}},
      TIALAB_DOUBLE("head.score_threshold", head.score_threshold),
      TIALAB_DOUBLE("head.nms_threshold", head.nms_threshold),
      TIALAB_INT("head.max_proposals", head.max_proposals),
      TIALAB_DOUBLE("head.prior_prob", head.prior_prob),
      TIALAB_DOUBLE("optim.lr", lr),
      TIALAB_DOUBLE("optim.weight_decay", weight_decay),
      TIALAB_DOUBLE("optim.clip_norm", clip_norm),
      TIALAB_INT("optim.warmup_epochs", warmup_epochs),
      TIALAB_INT("optim.epochs", epochs),
      TIALAB_INT("optim.batch_size", batch_size),
      TIALAB_INT("window.length", window),
      TIALAB_INT("window.eval_length", eval_window),
      TIALAB_INT("window.stride", window_stride),
      TIALAB_DOUBLE("window.overlap", window_overlap),
      TIALAB_DOUBLE("window.keep_ratio", keep_ratio),
      TIALAB_BOOL("train.augment", augment),
      TIALAB_INT("train.eval_every", eval_every),
      TIALAB_DOUBLE("train.stop_at_train_map", stop_at_train_map),
      {"eval.tiou_thresholds",
       {[](RunConfig& c, const std::string& v) { c.eval.tiou_thresholds = to_list("eval.tiou_thresholds", v); },
        [](const RunConfig& c) { return from_list(c.eval.tiou_thresholds); }}},
      TIALAB_UINT("seed", seed),
  };
  return table;
}

#undef TIALAB_INT
#undef TIALAB_UINT
#undef TIALAB_DOUBLE
#undef TIALAB_BOOL

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key: " + key);
  it->second.set(cfg, value);
}

}  // namespace

void RunConfig::validate() const {
  data.validate();
  backbone.validate();
  head.validate();
  eval.validate();
  if (!(lr >= 0)) throw ConfigError("optim.lr must be >= 0");
  if (!(adapter_lr_scale >= 0)) throw ConfigError("adapter.lr_scale must be >= 0");
  if (weight_decay < 0 || clip_norm < 0) throw ConfigError("optim.weight_decay and optim.clip_norm must be >= 0");
  if (epochs < 1) throw ConfigError("optim.epochs must be >= 1");
  if (warmup_epochs < 0) throw ConfigError("optim.warmup_epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
  if (train_videos < 0 || test_videos < 0) throw ConfigError("video counts must be >= 0");
  if (window < 1 || window_stride < 1) throw ConfigError("window.length and window.stride must be >= 1");
  if (eval_window < 0) throw ConfigError("window.eval_length must be >= 0");
  if (window_overlap < 0 || window_overlap >= 1) throw ConfigError("window.overlap must be in [0,1)");
  if (keep_ratio < 0 || keep_ratio > 1) throw ConfigError("window.keep_ratio must be in [0,1]");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (snippet_len < 1) throw ConfigError("encode.snippet_len must be >= 1");
  if (head.num_classes != data.num_classes) throw ConfigError("head and data class counts differ");
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> unknown;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!fields().count(key)) {
      unknown.push_back(key);
      continue;
    }
    set_key(cfg, key, value);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  sync(cfg);
}

void apply_override(RunConfig& cfg, const std::string& key_equals_value) {
  const auto eq = key_equals_value.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + key_equals_value + "'");
  set_key(cfg, trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
  sync(cfg);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

std::string echo_config(const RunConfig& cfg) {
  std::string out = "# resolved configuration; toy-scale schedule, not a published recipe\n";
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, f] : fields()) keys.push_back(key);
  return keys;
}

void apply_environment(RunConfig& cfg) {
  if (const char* s = std::getenv("TIALAB_SEED"); s && *s) {
    cfg.seed = static_cast<uint64_t>(to_int("TIALAB_SEED", s));
    sync(cfg);
  }
}

// ---------------------------------------------------------------------------

namespace {

RunConfig synced(RunConfig c) {
  sync(c);
  c.validate();
  return c;
}

backbone::AdapterSet<float> make_adapters(const RunConfig& c) {
  backbone::AdapterSet<float> set;
  const auto m = encode_mode(c);
  if (!m.uses_adapters()) {
    set.slots.resize(c.backbone.num_layers);
    return set;
  }
  return backbone::AdapterSet<float>::make(c.adapter_kind, c.backbone, c.gamma, c.kernel,
                                           m.kind == EncodeModeKind::kAdapterOutside && m.adapt_last_half,
                                           c.seed + 2);
}

}  // namespace

Model::Model(const RunConfig& cfg)
    : cfg_(synced(cfg)),
      mode_(encode_mode(cfg_)),
      backbone_(cfg_.backbone),
      adapters_(make_adapters(cfg_)),
      head_(cfg_.head, cfg_.backbone.dim) {
  backbone_.set_trainable(mode_.backbone_trainable());
  adapters_.set_trainable(true);
}

backbone::FeatureMap<float> Model::encode(const TensorF& frames) const {
  const auto* ad = mode_.uses_adapters() ? &adapters_ : nullptr;
  if (cfg_.representation == Representation::kSnippet) {
    return backbone::encode_snippet_repr(backbone_, frames, cfg_.snippet_len, ad, mode_);
  }
  return backbone::encode_frame_repr(backbone_, frames, ad, mode_);
}

detector::HeadOutputs<float> Model::forward(const TensorF& frames) const {
  return head_.forward(encode(frames).values);
}

std::vector<Parameter<float>*> Model::parameters() {
  auto out = backbone_.parameters();
  for (auto* p : adapters_.parameters()) out.push_back(p);
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter<float>*> Model::trainable() {
  std::vector<Parameter<float>*> out;
  for (auto* p : parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

int64_t Model::trainable_count() {
  int64_t n = 0;
  for (auto* p : trainable()) n += p->tensor.numel();
  return n;
}

void Model::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto params = parameters();
  save_parameters(std::vector<const Parameter<float>*>(params.begin(), params.end()), dir / "manifest.txt",
                  dir / "weights.tlab");
  for (size_t l = 0; l < adapters_.slots.size(); ++l) {
    if (!adapters_.slots[l]) continue;
    std::ofstream os(dir / ("adapter_" + std::to_string(l) + ".tia"), std::ios::binary);
    adapters::save_adapter(os, *adapters_.slots[l]);
  }
  std::ofstream(dir / "config.txt") << echo_config(cfg_);
}

void Model::load(const std::filesystem::path& dir) {
  load_parameters(parameters(), dir / "manifest.txt", dir / "weights.tlab");
}

// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Parameter<float>*> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(static_cast<size_t>(p->tensor.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(p->tensor.numel()), 0.0f);
  }
  lr_scale_.assign(params_.size(), 1.0);
}

void AdamW::set_lr_scale(const std::vector<Parameter<float>*>& group, double scale) {
  for (size_t i = 0; i < params_.size(); ++i)
    if (std::find(group.begin(), group.end(), params_[i]) != group.end()) lr_scale_[i] = scale;
}

void AdamW::zero_grad() {
  for (auto* p : params_) p->tensor.zero_grad();
}

void AdamW::step(double lr, double grad_scale, double clip_norm) {
  ++t_;
  double norm2 = 0;
  for (auto* p : params_) {
    if (!p->trainable || !p->tensor.has_grad()) continue;
    const auto g = *p->tensor.grad();
    for (float v : g.data()) norm2 += (v / grad_scale) * (v / grad_scale);
  }
  double factor = 1.0 / grad_scale;
  if (clip_norm > 0 && std::sqrt(norm2) > clip_norm) factor *= clip_norm / std::sqrt(norm2);
  const double c1 = 1 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    if (!p->trainable || !p->tensor.has_grad()) continue;
    const auto grad = *p->tensor.grad();
    auto g = grad.data();
    auto w = p->tensor.mutable_data();
    const bool decay = p->tensor.rank() >= 2;
    auto& m = m_[i];
    auto& v = v_[i];
    const double step_lr = lr * lr_scale_[i];
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * factor;
      m[j] = static_cast<float>(b1_ * m[j] + (1 - b1_) * gj);
      v[j] = static_cast<float>(b2_ * v[j] + (1 - b2_) * gj * gj);
      double upd = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      if (decay) upd += wd_ * w[j];
      w[j] = static_cast<float>(w[j] - step_lr * upd);
    }
  }
  zero_grad();
}

double learning_rate(double base, int64_t step, int64_t warmup, int64_t total) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

// ---------------------------------------------------------------------------

Datasets prepare_datasets(const RunConfig& cfg) {
  Datasets ds;
  if (!cfg.data_path.empty()) {
    ds.train = data::read_dataset(std::filesystem::path(cfg.data_path) / "train");
    ds.test = data::read_dataset(std::filesystem::path(cfg.data_path) / "test");
    return ds;
  }
  ds.train = data::generate_dataset(cfg.data, cfg.train_videos, "train");
  auto test_spec = cfg.data;
  test_spec.seed = cfg.data.seed + 1000003;
  ds.test = data::generate_dataset(test_spec, cfg.test_videos, "test");
  return ds;
}

std::vector<detector::Segment> to_segments(const data::VideoSample& window) {
  std::vector<detector::Segment> out;
  for (const auto& a : window.annotations) out.push_back({a.t_start * window.fps, a.t_end * window.fps, a.label});
  return out;
}

std::vector<Proposal> predict_video(const Model& model, const data::VideoSample& v) {
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  std::vector<Proposal> merged;
  const int64_t len = cfg.inference_window();
  for (int64_t start : data::sliding_window_starts(v.num_frames(), len, cfg.window_stride, cfg.window_overlap)) {
    auto w = data::extract_window(v, start, len, cfg.window_stride);
    auto raw = detector::decode_raw(model.forward(w.frames), cfg.head);
    for (auto& p : raw) {
      p.t_start /= w.fps;
      p.t_end /= w.fps;
    }
    auto mapped = data::map_back(raw, {start, cfg.window_stride}, v.fps, v.duration());
    merged.insert(merged.end(), mapped.begin(), mapped.end());
  }
  return detector::nms(std::move(merged), cfg.head.nms_threshold, cfg.head.max_proposals);
}

PredictionSet predict(const Model& model, const std::vector<data::VideoSample>& videos) {
  PredictionSet out;
  for (const auto& v : videos) out[v.id] = predict_video(model, v);
  return out;
}

evaluation::MapResult evaluate(const Model& model, const std::vector<data::VideoSample>& videos) {
  return evaluation::mean_ap(predict(model, videos), data::ground_truth(videos), model.config().eval);
}

TrainResult train(Model& model, const Datasets& ds, const EpochCallback& on_epoch) {
  const auto& cfg = model.config();
  if (ds.train.empty()) throw ConfigError("training set is empty");
  std::mt19937_64 rng(cfg.seed + 3);
  AdamW opt(model.trainable(), cfg.weight_decay);
  opt.set_lr_scale(model.adapters().parameters(), cfg.adapter_lr_scale);
  const auto n = static_cast<int64_t>(ds.train.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total = cfg.epochs * steps_per_epoch;
  const int64_t warmup = cfg.warmup_epochs * steps_per_epoch;
  TrainResult result;
  result.trainable_params = model.trainable_count();
  int64_t step = 0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.lr = learning_rate(cfg.lr, step, warmup, total);
    int64_t in_batch = 0;
    for (int64_t i = 0; i < n; ++i) {
      auto win = data::truncate_window(ds.train[order[i]], cfg.window, cfg.window_stride, rng, nullptr,
                                       cfg.keep_ratio);
      if (cfg.augment) win = data::augment(win, rng);
      auto out = model.forward(win.frames);
      auto targets = detector::assign_targets(to_segments(win), cfg.head, out.front().logits.dim(0));
      detector::LossTerms terms;
      auto loss = detector::compute_loss(out, targets, &terms);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " on " + win.id);
      }
      backward(loss);
      log.loss += value;
      log.cls_loss += terms.classification;
      log.reg_loss += terms.regression;
      if (++in_batch == cfg.batch_size || i + 1 == n) {
        opt.step(learning_rate(cfg.lr, step, warmup, total), static_cast<double>(in_batch), cfg.clip_norm);
        ++step;
        in_batch = 0;
      }
    }
    log.loss /= static_cast<double>(n);
    log.cls_loss /= static_cast<double>(n);
    log.reg_loss /= static_cast<double>(n);
    const bool last = epoch == cfg.epochs;
    if (epoch % cfg.eval_every == 0 || last) {
      log.train_map = evaluate(model, ds.train).average;
      if (!ds.test.empty()) log.test_map = evaluate(model, ds.test).average;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    const bool reached = cfg.stop_at_train_map > 0 && log.train_map && *log.train_map >= cfg.stop_at_train_map;
    if (reached && !result.epoch_reached) result.epoch_reached = epoch;
    if (reached || last) {
      result.final_train_map = *log.train_map;
      result.final_test_map = log.test_map.value_or(0.0);
      break;
    }
  }
  return result;
}

void write_train_log(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "epoch,lr,loss,cls_loss,reg_loss,train_mAP,test_mAP\n" << std::fixed << std::setprecision(6);
  auto opt = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(6) << *v;
    else s << "nan";
    return s.str();
  };
  for (const auto& e : log) {
    os << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.cls_loss << ',' << e.reg_loss << ',' << opt(e.train_map)
       << ',' << opt(e.test_map) << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

void prepare_out(const RunConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  write_text(out / "config.txt", echo_config(cfg));
}

memory::Strategy strategy_of(const RunConfig& c) {
  memory::Strategy s;
  s.mode = encode_mode(c);
  s.representation = c.representation;
  s.checkpointing = c.backbone.checkpointing;
  return s;
}

}  // namespace

int cmd_train(const RunConfig& cfg_in, const std::filesystem::path& out) {
  RunConfig cfg = synced(cfg_in);
  prepare_out(cfg, out);
  auto ds = prepare_datasets(cfg);
  Model model(cfg);
  std::ofstream log_file(out / "train_log.csv");
  std::vector<EpochLog> so_far;
  auto result = train(model, ds, [&](const EpochLog& e) {
    so_far.push_back(e);
    std::cout << "epoch " << e.epoch << " loss " << std::fixed << std::setprecision(6) << e.loss;
    if (e.train_map) std::cout << " train_mAP " << *e.train_map;
    if (e.test_map) std::cout << " test_mAP " << *e.test_map;
    std::cout << std::endl;
  });
  write_train_log(log_file, result.log);
  model.save(out / "checkpoint");
  if (!ds.test.empty()) {
    std::ofstream rs(out / "results.csv");
    evaluation::write_results_csv(rs, evaluate(model, ds.test));
  }
  std::cout << "final train_mAP " << std::fixed << std::setprecision(6) << result.final_train_map << " test_mAP "
            << result.final_test_map << " trainable_params " << result.trainable_params << std::endl;
  return 0;
}

int cmd_eval(const RunConfig& cfg_in, const std::filesystem::path& checkpoint, const std::filesystem::path& out) {
  RunConfig cfg = synced(cfg_in);
  prepare_out(cfg, out);
  auto ds = prepare_datasets(cfg);
  Model model(cfg);
  model.load(checkpoint);
  auto preds = predict(model, ds.test);
  auto result = evaluation::mean_ap(preds, data::ground_truth(ds.test), cfg.eval);
  std::ofstream rs(out / "results.csv");
  evaluation::write_results_csv(rs, result);
  std::ofstream ps(out / "proposals.csv");
  detector::write_proposals_csv(ps, preds);
  std::cout << "test avg mAP " << std::fixed << std::setprecision(6) << result.average << std::endl;
  return 0;
}

int cmd_membench(const RunConfig& cfg_in, const std::filesystem::path& out) {
  RunConfig cfg = synced(cfg_in);
  prepare_out(cfg, out);
  Model probe(cfg);
  const int64_t head_params = probe.head().param_count();
  std::vector<memory::ShapeDescriptor> shapes;
  for (int64_t frames : {cfg.window, 2 * cfg.window}) {
    auto s = memory::describe(cfg.backbone, frames, cfg.gamma, cfg.kernel, head_params);
    s.snippet_len = cfg.snippet_len;
    shapes.push_back(s);
  }
  std::vector<memory::Strategy> strategies;
  for (auto rep : {Representation::kFrame, Representation::kSnippet}) {
    for (auto m : {EncodeMode::frozen(), EncodeMode::full_ft(), EncodeMode::adapter_inside(),
                   EncodeMode::adapter_outside(false), EncodeMode::adapter_outside(true),
                   EncodeMode::full_ft_plus_tia()}) {
      strategies.push_back({m, rep, false, false});
    }
  }
  strategies.push_back({EncodeMode::adapter_inside(), Representation::kFrame, true, false});
  strategies.push_back({EncodeMode::adapter_inside(), Representation::kFrame, false, true});
  auto cmp = memory::compare_strategies(shapes, strategies);
  std::ofstream os(out / "membench.csv");
  memory::write_membench_csv(os, cmp.rows);
  for (const auto& [name, ok] : cmp.checks) std::cout << (ok ? "PASS " : "FAIL ") << name << '\n';
  return cmp.all_hold() ? 0 : 1;
}

std::vector<std::string> ablation_axes() {
  return {"kernel_k", "adapter_kind", "mode", "representation", "frames", "resolution"};
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg_in, const std::string& axis,
                                      const std::filesystem::path& out) {
  const RunConfig base = synced(cfg_in);
  std::vector<std::pair<std::string, RunConfig>> settings;
  auto add = [&](const std::string& name, const std::function<void(RunConfig&)>& edit) {
    RunConfig c = base;
    edit(c);
    sync(c);
    settings.emplace_back(name, c);
  };
  if (axis == "kernel_k") {
    for (int64_t k : {1, 3, 7, 13, 21}) add(std::to_string(k), [k](RunConfig& c) {
        c.kernel = k;
        c.adapter_kind = adapters::AdapterKind::kTia;
      });
  } else if (axis == "adapter_kind") {
    for (auto kind : {adapters::AdapterKind::kStandard, adapters::AdapterKind::kTia,
                      adapters::AdapterKind::kTiaNoResidual}) {
      add(adapters::to_string(kind), [kind](RunConfig& c) { c.adapter_kind = kind; });
    }
  } else if (axis == "mode") {
    for (auto m : {EncodeModeKind::kFrozen, EncodeModeKind::kFullFT, EncodeModeKind::kAdapterInside,
                   EncodeModeKind::kAdapterOutside, EncodeModeKind::kFullFTPlusTIA}) {
      add(backbone::to_string(m), [m](RunConfig& c) { c.mode = m; });
    }
  } else if (axis == "representation") {
    for (auto r : {Representation::kFrame, Representation::kSnippet}) {
      add(backbone::to_string(r), [r](RunConfig& c) { c.representation = r; });
    }
  } else if (axis == "frames") {
    for (int64_t w : {base.window / 2, base.window, base.window * 2}) {
      add(std::to_string(w), [w](RunConfig& c) { c.window = w; });
    }
  } else if (axis == "resolution") {
    for (int64_t r : {base.data.height, base.data.height * 2}) {
      add(std::to_string(r), [r](RunConfig& c) {
        c.data.height = r;
        c.data.width = r;
      });
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  std::filesystem::create_directories(out);
  std::vector<AblationRow> rows;
  std::optional<Datasets> shared;
  for (auto& [name, c] : settings) {
    c.validate();
    const bool same_data = c.data.height == base.data.height;
    if (!same_data || !shared) shared = prepare_datasets(c);
    Model model(c);
    auto result = train(model, *shared);
    std::ofstream log(out / (axis + "_" + name + "_train_log.csv"));
    write_train_log(log, result.log);
    auto shape = memory::describe(c.backbone, c.window, c.gamma, c.kernel, model.head().param_count());
    shape.snippet_len = c.snippet_len;
    rows.push_back({axis, name, result.trainable_params, memory::estimate(strategy_of(c), shape).total_bytes,
                    result.final_train_map, result.final_test_map});
    if (!same_data) shared.reset();
    std::cout << axis << '=' << name << " trainable " << result.trainable_params << " train_mAP " << std::fixed
              << std::setprecision(4) << result.final_train_map << " test_mAP " << result.final_test_map << std::endl;
  }
  return rows;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "axis,setting,trainable_params,memory_total_bytes,train_mAP,test_mAP\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    os << r.axis << ',' << r.setting << ',' << r.trainable_params << ',' << r.memory_total_bytes << ',' << r.train_map
       << ',' << r.test_map << '\n';
  }
}

std::vector<AblationRow> read_ablation_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("axis,setting,", 0) != 0) throw LoadError("ablation csv: missing header");
  std::vector<AblationRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) c.push_back(cell);
    if (c.size() != 6) throw LoadError("ablation csv: bad row '" + line + "'");
    try {
      rows.push_back({c[0], c[1], std::stoll(c[2]), std::stoll(c[3]), std::stod(c[4]), std::stod(c[5])});
    } catch (const std::exception&) {
      throw LoadError("ablation csv: bad number in '" + line + "'");
    }
  }
  return rows;
}

int cmd_ablate(const RunConfig& cfg_in, const std::string& axis, const std::filesystem::path& out) {
  RunConfig cfg = synced(cfg_in);
  prepare_out(cfg, out);
  std::vector<std::string> axes;
  if (axis == "all") axes = {"kernel_k", "adapter_kind", "mode"};
  else axes = {axis};
  std::vector<AblationRow> rows;
  for (const auto& a : axes) {
    auto r = run_ablation(cfg, a, out);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::ofstream os(out / "ablation.csv");
  write_ablation_csv(os, rows);
  return 0;
}

int cmd_gen_data(const RunConfig& cfg_in, const std::filesystem::path& out) {
  RunConfig cfg = synced(cfg_in);
  prepare_out(cfg, out);
  cfg.data_path.clear();
  auto ds = prepare_datasets(cfg);
  data::write_dataset(out / "train", ds.train);
  data::write_dataset(out / "test", ds.test);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test videos to " << out.string()
            << std::endl;
  return 0;
}

}  // namespace tialab::harness
