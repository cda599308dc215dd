// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, the composed detector model, training and the
// experiment commands behind the `tialab` executable.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tialab/adapters.hpp"
#include "tialab/backbone.hpp"
#include "tialab/data.hpp"
#include "tialab/detector.hpp"
#include "tialab/evaluation.hpp"
#include "tialab/memory_model.hpp"

namespace tialab::harness {

struct RunConfig {
  // Dataset directory with train/ and test/ subdirectories; empty generates
  // the synthetic set in memory.
  std::string data_path;
  data::SyntheticSpec data;
  int64_t train_videos = 200;
  int64_t test_videos = 50;

  backbone::BackboneConfig backbone;
  backbone::EncodeModeKind mode = backbone::EncodeModeKind::kAdapterInside;
  bool adapt_last_half = false;
  backbone::Representation representation = backbone::Representation::kFrame;
  int64_t snippet_len = 16;

  adapters::AdapterKind adapter_kind = adapters::AdapterKind::kTia;
  int64_t gamma = 4;
  int64_t kernel = 3;
  // Adapter learning rate relative to `lr`.
  double adapter_lr_scale = 1.0;

  detector::PyramidConfig head;

  double lr = 3e-3;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  int64_t warmup_epochs = 2;
  int64_t epochs = 30;
  int64_t batch_size = 1;

  int64_t window = 64;
  // Inference window length; 0 reuses `window`.
  int64_t eval_window = 192;
  int64_t window_stride = 1;
  double window_overlap = 0.5;
  double keep_ratio = 0.25;
  bool augment = false;

  evaluation::EvalConfig eval;
  // Evaluate train/test mAP every this many epochs (and after the last).
  int64_t eval_every = 5;
  // Stop once train mAP reaches this value; 0 disables.
  double stop_at_train_map = 0;

  uint64_t seed = 1;

  RunConfig();
  void validate() const;
  int64_t inference_window() const { return eval_window > 0 ? eval_window : window; }
};

// Flat "key = value" text, '#' comments. Unknown keys raise ConfigError
// listing all of them; malformed values raise ConfigError naming the key.
void apply_config_text(RunConfig& cfg, const std::string& text);
void apply_override(RunConfig& cfg, const std::string& key_equals_value);
RunConfig load_config(const std::filesystem::path& path);
// Every key with its resolved value, one per line, sorted by key.
std::string echo_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

// Backbone + optional adapters + head, wired for one encode mode.
class Model {
 public:
  explicit Model(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  backbone::Backbone<float>& backbone() { return backbone_; }
  backbone::AdapterSet<float>& adapters() { return adapters_; }
  detector::PyramidHead<float>& head() { return head_; }

  backbone::FeatureMap<float> encode(const TensorF& frames) const;
  detector::HeadOutputs<float> forward(const TensorF& frames) const;

  // Every parameter in checkpoint order: backbone, adapters, head.
  std::vector<Parameter<float>*> parameters();
  std::vector<Parameter<float>*> trainable();
  int64_t trainable_count();

  void save(const std::filesystem::path& dir);
  // Throws LoadError when names or shapes differ from this model.
  void load(const std::filesystem::path& dir);

 private:
  RunConfig cfg_;
  backbone::EncodeMode mode_;
  backbone::Backbone<float> backbone_;
  backbone::AdapterSet<float> adapters_;
  detector::PyramidHead<float> head_;
};

// Adaptive moments with decoupled weight decay on rank >= 2 weights.
class AdamW {
 public:
  AdamW(std::vector<Parameter<float>*> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  // Applies accumulated gradients divided by `grad_scale`, then clears them.
  // Non-trainable parameters are never touched.
  void step(double lr, double grad_scale = 1.0, double clip_norm = 0.0);
  void zero_grad();
  // Multiplies the learning rate of every listed parameter by `scale`.
  void set_lr_scale(const std::vector<Parameter<float>*>& group, double scale);

 private:
  std::vector<Parameter<float>*> params_;
  std::vector<std::vector<float>> m_, v_;
  std::vector<double> lr_scale_;
  double wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
double learning_rate(double base, int64_t step, int64_t warmup, int64_t total);

struct Datasets {
  std::vector<data::VideoSample> train;
  std::vector<data::VideoSample> test;
};
Datasets prepare_datasets(const RunConfig& cfg);

// Window-relative annotations -> segments in feature steps.
std::vector<detector::Segment> to_segments(const data::VideoSample& window);

// Sliding-window inference over one video, merged and suppressed.
std::vector<Proposal> predict_video(const Model& model, const data::VideoSample& v);
PredictionSet predict(const Model& model, const std::vector<data::VideoSample>& videos);
evaluation::MapResult evaluate(const Model& model, const std::vector<data::VideoSample>& videos);

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double cls_loss = 0;
  double reg_loss = 0;
  std::optional<double> train_map;
  std::optional<double> test_map;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double final_train_map = 0;
  double final_test_map = 0;
  int64_t trainable_params = 0;
  std::optional<int64_t> epoch_reached;  // first evaluated epoch meeting stop_at_train_map
};

using EpochCallback = std::function<void(const EpochLog&)>;
TrainResult train(Model& model, const Datasets& ds, const EpochCallback& on_epoch = {});

void write_train_log(std::ostream& os, const std::vector<EpochLog>& log);

// Commands. Each writes the resolved config to <out>/config.txt and returns
// a process exit code.
int cmd_train(const RunConfig& cfg, const std::filesystem::path& out);
int cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& out);
int cmd_membench(const RunConfig& cfg, const std::filesystem::path& out);
int cmd_ablate(const RunConfig& cfg, const std::string& axis, const std::filesystem::path& out);
int cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out);

struct AblationRow {
  std::string axis;
  std::string setting;
  int64_t trainable_params = 0;
  int64_t memory_total_bytes = 0;
  double train_map = 0;
  double test_map = 0;
};
std::vector<std::string> ablation_axes();
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& axis,
                                      const std::filesystem::path& out);
void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_ablation_csv(std::istream& is);

// Applies TIALAB_SEED when set.
void apply_environment(RunConfig& cfg);

}  // namespace tialab::harness
