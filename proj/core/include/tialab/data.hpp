// SPDX-License-Identifier: Apache-2.0
//
// Synthetic untrimmed videos with interval annotations, plus the temporal
// preprocessing used for training and inference windows.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tialab/tensor.hpp"
#include "tialab/types.hpp"

namespace tialab::data {

struct VideoSample {
  std::string id;
  TensorF frames;  // [3, T, H, W]
  std::vector<ActionAnnotation> annotations;
  double fps = 10.0;

  int64_t num_frames() const { return frames.dim(1); }
  double duration() const { return static_cast<double>(num_frames()) / fps; }
};

// Checks t_start < t_end, both inside [0, duration], and labels in [0, K).
// Throws GenerationError naming the offending annotation.
void validate_sample(const VideoSample& v, int64_t num_classes);

struct SyntheticSpec {
  int64_t num_classes = 3;
  int64_t min_frames = 128;
  int64_t max_frames = 512;
  int64_t min_actions = 1;
  int64_t max_actions = 4;
  int64_t min_action_frames = 8;
  int64_t max_action_frames = 48;
  int64_t height = 16;
  int64_t width = 16;
  double amplitude = 1.0;
  double noise = 0.25;
  // Class c oscillates with period base_period / (c + 1) frames.
  double base_period = 16.0;
  double fps = 10.0;
  uint64_t seed = 7;

  void validate() const;
};

// Video `index` of the dataset; depends only on (spec, index).
VideoSample generate_video(const SyntheticSpec& spec, int64_t index, const std::string& prefix = "video");
std::vector<VideoSample> generate_dataset(const SyntheticSpec& spec, int64_t n_videos,
                                          const std::string& prefix = "video");

// Uniform index sampling round(i * (T-1) / (target-1)); fps scales with the
// length so annotation seconds are unchanged.
VideoSample resize_video(const VideoSample& v, int64_t target_frames);

struct WindowInfo {
  int64_t start_frame = 0;  // in source frames
  int64_t stride = 1;
};

// Frames start + i*stride for i < win_len (zero frames past the end). Times
// in the result are relative to the window start; fps becomes fps / stride.
// Annotations are clipped and kept when the clipped fraction of their
// original length is >= keep_ratio.
VideoSample extract_window(const VideoSample& v, int64_t start_frame, int64_t win_len, int64_t stride,
                           double keep_ratio = 0.25);

// Random training window. When the source has annotations and the drawn
// window keeps none, it is redrawn up to 20 times and then accepted empty.
VideoSample truncate_window(const VideoSample& v, int64_t win_len, int64_t stride, std::mt19937_64& rng,
                            WindowInfo* info = nullptr, double keep_ratio = 0.25);

// Start frames of inference windows covering `num_frames` source frames with
// a span of win_len*stride each. Consecutive starts advance by
// floor(span * (1 - overlap)); the last window is right-aligned.
std::vector<int64_t> sliding_window_starts(int64_t num_frames, int64_t win_len, int64_t stride, double overlap);

// Shifts window-relative proposals into source time and clips them to
// [0, duration]; proposals that collapse are dropped.
std::vector<Proposal> map_back(const std::vector<Proposal>& window_props, const WindowInfo& info, double fps,
                               double duration);

// Crop box [y0, y0+h) x [x0, x0+w) resized back to full size bilinearly.
VideoSample crop_resize(const VideoSample& v, int64_t y0, int64_t x0, int64_t h, int64_t w);
VideoSample hflip(const VideoSample& v);
// Square crop with area fraction in [0.7, 1], then a flip with p = 0.5.
VideoSample augment(const VideoSample& v, std::mt19937_64& rng);

// <dir>/<id>.tlab per video, annotations.csv, meta.csv.
void write_dataset(const std::filesystem::path& dir, const std::vector<VideoSample>& videos);
std::vector<VideoSample> read_dataset(const std::filesystem::path& dir);

GroundTruthSet ground_truth(const std::vector<VideoSample>& videos);

}  // namespace tialab::data
