// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "tialab/data.hpp"
#include "tialab/errors.hpp"

using namespace tialab;
using namespace tialab::data;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.min_frames = 64;
  s.max_frames = 96;
  s.height = 8;
  s.width = 8;
  return s;
}

// Frame t of channel 0 holds the value t everywhere.
VideoSample ramp(int64_t T, double fps = 10.0) {
  std::vector<float> px(static_cast<size_t>(3 * T * 4));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t k = 0; k < 4; ++k) px[(c * T + t) * 4 + k] = static_cast<float>(t);
  VideoSample v;
  v.id = "ramp";
  v.frames = TensorF({3, T, 2, 2}, std::move(px));
  v.fps = fps;
  return v;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("synthetic generator settings are validated") {
  auto s = small_spec();
  s.min_frames = 200;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.num_classes = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.noise = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("generation is deterministic per index") {
  auto s = small_spec();
  auto a = generate_dataset(s, 5);
  auto b = generate_dataset(s, 5);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frames.to_vector() == b[i].frames.to_vector());
    CHECK(a[i].annotations == b[i].annotations);
  }
  auto one = generate_video(s, 3);
  CHECK(one.frames.to_vector() == a[3].frames.to_vector());
  s.seed += 1;
  CHECK(generate_video(s, 3).frames.to_vector() != one.frames.to_vector());
}

TEST_CASE("every generated annotation satisfies the invariants") {
  SyntheticSpec s;
  s.min_frames = 128;
  s.max_frames = 256;
  s.height = 8;
  s.width = 8;
  for (const auto& v : generate_dataset(s, 200)) {
    CHECK(v.frames.dim(0) == 3);
    CHECK(v.num_frames() >= 128);
    CHECK(v.num_frames() <= 256);
    REQUIRE_FALSE(v.annotations.empty());
    CHECK_NOTHROW(validate_sample(v, 3));
    for (size_t i = 0; i < v.annotations.size(); ++i)
      for (size_t j = i + 1; j < v.annotations.size(); ++j) {
        const auto& a = v.annotations[i];
        const auto& b = v.annotations[j];
        if (a.label == b.label) CHECK((a.t_end <= b.t_start || b.t_end <= a.t_start));
      }
  }
}

TEST_CASE("zero amplitude and zero noise gives blank frames") {
  auto s = small_spec();
  s.amplitude = 0;
  s.noise = 0;
  for (float x : generate_video(s, 0).frames.to_vector()) CHECK(x == 0.0f);
}

TEST_CASE("impossible placement raises a generation error") {
  SyntheticSpec s = small_spec();
  s.num_classes = 1;
  s.min_frames = s.max_frames = 20;
  s.min_action_frames = s.max_action_frames = 15;
  s.min_actions = s.max_actions = 2;
  CHECK_THROWS_AS(generate_video(s, 0), GenerationError);
}

TEST_CASE("validate_sample rejects bad annotations") {
  auto v = ramp(10);
  v.annotations = {{0.2, 0.1, 0}};
  CHECK_THROWS_AS(validate_sample(v, 3), GenerationError);
  v.annotations = {{0.0, 1.5, 0}};
  CHECK_THROWS_AS(validate_sample(v, 3), GenerationError);
  v.annotations = {{0.0, 0.5, 3}};
  CHECK_THROWS_AS(validate_sample(v, 3), GenerationError);
}

TEST_CASE("resize samples round(i*(T-1)/(target-1))") {
  auto v = ramp(10);
  v.annotations = {{0.0, 1.0, 1}};
  auto r = resize_video(v, 4);
  CHECK(r.num_frames() == 4);
  for (int64_t i = 0; i < 4; ++i) CHECK(r.frames.at({0, i, 0, 0}) == static_cast<float>(3 * i));
  CHECK(r.annotations == v.annotations);
  CHECK(r.duration() == doctest::Approx(v.duration()));
  // An annotation over the whole video still covers all target frames.
  CHECK(r.annotations[0].t_end * r.fps == doctest::Approx(4.0));
  auto same = resize_video(v, 10);
  CHECK(same.frames.to_vector() == v.frames.to_vector());
  CHECK(same.fps == v.fps);
  CHECK_THROWS_AS(resize_video(v, 1), ConfigError);
}

TEST_CASE("window keep rule") {
  auto v = ramp(100);
  v.annotations = {{2.0, 4.0, 0}, {6.8, 8.8, 1}, {4.5, 5.5, 2}};
  // Window covers frames [40, 90): seconds [4, 9).
  auto w = extract_window(v, 40, 50, 1);
  CHECK(w.num_frames() == 50);
  CHECK(w.frames.at({0, 0, 0, 0}) == 40.0f);
  // [2,4) is outside, [6.8,8.8) inside, [4.5,5.5) inside.
  REQUIRE(w.annotations.size() == 2);
  CHECK(w.annotations[0].t_start == doctest::Approx(2.8));
  CHECK(w.annotations[1].t_start == doctest::Approx(0.5));
  // Half inside survives clipped; 10% inside is dropped.
  v.annotations = {{3.0, 5.0, 0}, {8.8, 10.8, 1}};
  w = extract_window(v, 40, 50, 1);
  REQUIRE(w.annotations.size() == 1);
  CHECK(w.annotations[0].t_start == doctest::Approx(0.0));
  CHECK(w.annotations[0].t_end == doctest::Approx(1.0));
  // Past the end the window is zero-padded.
  auto tail = extract_window(v, 90, 20, 1);
  CHECK(tail.frames.at({0, 9, 0, 0}) == 99.0f);
  CHECK(tail.frames.at({0, 10, 0, 0}) == 0.0f);
  // Stride halves the fps.
  auto strided = extract_window(v, 0, 10, 2);
  CHECK(strided.fps == 5.0);
  CHECK(strided.frames.at({0, 3, 0, 0}) == 6.0f);
}

TEST_CASE("whole-video window keeps annotations") {
  std::mt19937_64 rng(1);
  auto v = ramp(50);
  v.annotations = {{1.0, 2.0, 0}, {3.0, 4.5, 2}};
  WindowInfo info;
  auto w = truncate_window(v, 50, 1, rng, &info);
  CHECK(info.start_frame == 0);
  CHECK(w.annotations == v.annotations);
}

TEST_CASE("truncate then map back is exact on kept annotations") {
  auto s = small_spec();
  std::mt19937_64 rng(5);
  for (const auto& v : generate_dataset(s, 30)) {
    WindowInfo info;
    auto w = truncate_window(v, 32, 1, rng, &info);
    const double w0 = static_cast<double>(info.start_frame) / v.fps, w1 = w0 + 32.0 / v.fps;
    for (const auto& a : w.annotations) {
      bool found = false;
      for (const auto& o : v.annotations) {
        found |= o.label == a.label && std::abs(a.t_start + w0 - std::max(o.t_start, w0)) <= 1.0 / v.fps &&
                 std::abs(a.t_end + w0 - std::min(o.t_end, w1)) <= 1.0 / v.fps;
      }
      CHECK(found);
    }
  }
}

TEST_CASE("sliding window starts") {
  CHECK(sliding_window_starts(100, 50, 1, 0.5) == std::vector<int64_t>{0, 25, 50});
  CHECK(sliding_window_starts(40, 50, 1, 0.5) == std::vector<int64_t>{0});
  CHECK(sliding_window_starts(50, 50, 1, 0.0) == std::vector<int64_t>{0});
  CHECK(sliding_window_starts(110, 50, 1, 0.5) == std::vector<int64_t>{0, 25, 50, 60});
  CHECK_THROWS_AS(sliding_window_starts(100, 50, 1, 1.0), ConfigError);
}

TEST_CASE("map back clips to the video") {
  std::vector<Proposal> props{{0.5, 3.0, 0, 0.9}, {-1.0, -0.5, 1, 0.8}};
  auto out = map_back(props, {80, 1}, 10.0, 10.0);
  REQUIRE(out.size() == 2);
  CHECK(out[0].t_start == doctest::Approx(8.5));
  CHECK(out[0].t_end == 10.0);
  CHECK(out[1].t_start == doctest::Approx(7.0));
  for (const auto& p : out) CHECK(p.t_end <= 10.0);
  CHECK(map_back({{5.0, 6.0, 0, 1.0}}, {80, 1}, 10.0, 10.0).empty());
}

TEST_CASE("flip and crop") {
  auto v = generate_video(small_spec(), 0);
  CHECK(hflip(hflip(v)).frames.to_vector() == v.frames.to_vector());
  CHECK(hflip(v).frames.to_vector() != v.frames.to_vector());
  CHECK(hflip(v).frames.at({1, 2, 3, 0}) == v.frames.at({1, 2, 3, 7}));
  auto full = crop_resize(v, 0, 0, 8, 8);
  auto a = full.frames.to_vector(), b = v.frames.to_vector();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
  CHECK_THROWS_AS(crop_resize(v, 4, 4, 8, 8), ContractViolation);
}

TEST_CASE("augmentation never touches annotations") {
  std::mt19937_64 rng(9);
  auto vids = generate_dataset(small_spec(), 10);
  int changed = 0;
  for (int i = 0; i < 100; ++i) {
    const auto& v = vids[i % vids.size()];
    auto a = augment(v, rng);
    CHECK(a.annotations == v.annotations);
    CHECK(a.fps == v.fps);
    CHECK(a.frames.shape() == v.frames.shape());
    changed += a.frames.to_vector() != v.frames.to_vector();
  }
  CHECK(changed > 50);
}

TEST_CASE("dataset files round trip and are reproducible") {
  const auto root = std::filesystem::temp_directory_path() / "tialab_data_test";
  std::filesystem::remove_all(root);
  auto vids = generate_dataset(small_spec(), 4, "clip");
  write_dataset(root / "a", vids);
  write_dataset(root / "b", generate_dataset(small_spec(), 4, "clip"));
  for (const auto* name : {"annotations.csv", "meta.csv", "clip_00000.tlab"}) {
    REQUIRE(std::filesystem::exists(root / "a" / name));
    CHECK(read_file(root / "a" / name) == read_file(root / "b" / name));
  }
  CHECK(read_file(root / "a" / "annotations.csv").rfind("video_id,t_start,t_end,class\n", 0) == 0);
  CHECK(read_file(root / "a" / "meta.csv").rfind("video_id,fps,num_frames\n", 0) == 0);
  auto back = read_dataset(root / "a");
  REQUIRE(back.size() == vids.size());
  for (size_t i = 0; i < vids.size(); ++i) {
    CHECK(back[i].id == vids[i].id);
    CHECK(back[i].frames.to_vector() == vids[i].frames.to_vector());
    REQUIRE(back[i].annotations.size() == vids[i].annotations.size());
    for (size_t j = 0; j < vids[i].annotations.size(); ++j) {
      CHECK(back[i].annotations[j].t_start == doctest::Approx(vids[i].annotations[j].t_start).epsilon(1e-6));
      CHECK(back[i].annotations[j].label == vids[i].annotations[j].label);
    }
  }
  auto gt = ground_truth(vids);
  CHECK(gt.size() == 4);
  CHECK(gt.at(vids[0].id) == vids[0].annotations);
  std::filesystem::remove_all(root);
}
