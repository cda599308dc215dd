// SPDX-License-Identifier: Apache-2.0
#include "tialab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <map>
#include <sstream>

#include "tialab/serialize.hpp"

namespace tialab::data {

void validate_sample(const VideoSample& v, int64_t num_classes) {
  const double dur = v.duration();
  for (const auto& a : v.annotations) {
    if (!(a.t_start < a.t_end) || a.t_start < 0 || a.t_end > dur + 1e-9 || a.label < 0 || a.label >= num_classes) {
      std::ostringstream os;
      os << "invalid annotation in " << v.id << ": [" << a.t_start << ", " << a.t_end << ") class " << a.label
         << " (duration " << dur << ")";
      throw GenerationError(os.str());
    }
  }
}

void SyntheticSpec::validate() const {
  if (num_classes < 1) throw ConfigError("data.num_classes must be >= 1");
  if (min_frames < 2 || max_frames < min_frames) throw ConfigError("data frame range is empty");
  if (min_actions < 0 || max_actions < min_actions) throw ConfigError("data action count range is empty");
  if (min_action_frames < 1 || max_action_frames < min_action_frames || max_action_frames > min_frames) {
    throw ConfigError("data action length range must be non-empty and fit the shortest video");
  }
  if (height < 1 || width < 1) throw ConfigError("data frame size must be positive");
  if (noise < 0 || amplitude < 0) throw ConfigError("data noise and amplitude must be non-negative");
  if (base_period <= 0 || fps <= 0) throw ConfigError("data.base_period and data.fps must be positive");
}

namespace {

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

std::string video_id(const std::string& prefix, int64_t index) {
  std::ostringstream os;
  os << prefix << '_' << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

VideoSample generate_video(const SyntheticSpec& spec, int64_t index, const std::string& prefix) {
  spec.validate();
  std::seed_seq seq{static_cast<uint32_t>(spec.seed), static_cast<uint32_t>(spec.seed >> 32),
                    static_cast<uint32_t>(index)};
  std::mt19937_64 rng(seq);
  const int64_t Tn = uniform_int(rng, spec.min_frames, spec.max_frames);
  const int64_t H = spec.height, W = spec.width;
  const int64_t n_actions = uniform_int(rng, spec.min_actions, spec.max_actions);

  struct Placed {
    int64_t start, end, label;
    double phase, cy, cx;
  };
  std::vector<Placed> placed;
  for (int64_t a = 0; a < n_actions; ++a) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const int64_t label = uniform_int(rng, 0, spec.num_classes - 1);
      const int64_t len = uniform_int(rng, spec.min_action_frames, spec.max_action_frames);
      const int64_t start = uniform_int(rng, 0, Tn - len);
      ok = std::none_of(placed.begin(), placed.end(), [&](const Placed& p) {
        return p.label == label && start < p.end && p.start < start + len;
      });
      if (ok) {
        std::uniform_real_distribution<double> u(0, 1);
        placed.push_back({start, start + len, label, u(rng) * 2 * std::numbers::pi, u(rng) * (H - 1), u(rng) * (W - 1)});
      }
    }
    if (!ok) {
      throw GenerationError("could not place action " + std::to_string(a) + " in " + video_id(prefix, index) +
                            " without same-class overlap after 100 attempts");
    }
  }

  std::vector<float> px(static_cast<size_t>(3 * Tn * H * W));
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
  for (auto& v : px) v = spec.noise > 0 ? noise(rng) : 0.0f;
  const double sigma = std::max<double>(1.0, std::min(H, W) / 4.0);
  for (const auto& p : placed) {
    const double omega = 2 * std::numbers::pi * static_cast<double>(p.label + 1) / spec.base_period;
    for (int64_t t = p.start; t < p.end; ++t) {
      const double wave = spec.amplitude * std::sin(omega * static_cast<double>(t - p.start) + p.phase);
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const double r2 = (y - p.cy) * (y - p.cy) + (x - p.cx) * (x - p.cx);
          const auto v = static_cast<float>(wave * std::exp(-r2 / (2 * sigma * sigma)));
          for (int64_t c = 0; c < 3; ++c) px[((c * Tn + t) * H + y) * W + x] += v;
        }
    }
  }

  VideoSample out;
  out.id = video_id(prefix, index);
  out.frames = TensorF({3, Tn, H, W}, std::move(px));
  out.fps = spec.fps;
  for (const auto& p : placed) {
    out.annotations.push_back({static_cast<double>(p.start) / spec.fps, static_cast<double>(p.end) / spec.fps, p.label});
  }
  std::sort(out.annotations.begin(), out.annotations.end(),
            [](const ActionAnnotation& a, const ActionAnnotation& b) { return a.t_start < b.t_start; });
  validate_sample(out, spec.num_classes);
  return out;
}

std::vector<VideoSample> generate_dataset(const SyntheticSpec& spec, int64_t n_videos, const std::string& prefix) {
  std::vector<VideoSample> out;
  out.reserve(static_cast<size_t>(n_videos));
  for (int64_t i = 0; i < n_videos; ++i) out.push_back(generate_video(spec, i, prefix));
  return out;
}

namespace {

// frames[3, T, H, W] gathered at `indices` along T; negative or out-of-range
// indices give zero frames.
TensorF gather_frames(const TensorF& frames, const std::vector<int64_t>& indices) {
  const int64_t C = frames.dim(0), Tn = frames.dim(1), H = frames.dim(2), W = frames.dim(3);
  const int64_t plane = H * W;
  const auto n = static_cast<int64_t>(indices.size());
  std::vector<float> out(static_cast<size_t>(C * n * plane), 0.0f);
  auto src = frames.data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t j = 0; j < n; ++j) {
      const int64_t t = indices[j];
      if (t < 0 || t >= Tn) continue;
      std::copy_n(src.begin() + (c * Tn + t) * plane, plane, out.begin() + (c * n + j) * plane);
    }
  return TensorF({C, n, H, W}, std::move(out));
}

}  // namespace

VideoSample resize_video(const VideoSample& v, int64_t target_frames) {
  if (target_frames < 2) throw ConfigError("resize target must be >= 2 frames");
  const int64_t Tn = v.num_frames();
  std::vector<int64_t> idx(static_cast<size_t>(target_frames));
  for (int64_t i = 0; i < target_frames; ++i) {
    idx[i] = static_cast<int64_t>(std::llround(static_cast<double>(i) * static_cast<double>(Tn - 1) /
                                               static_cast<double>(target_frames - 1)));
  }
  VideoSample out = v;
  out.frames = Tn == target_frames ? v.frames : gather_frames(v.frames, idx);
  out.fps = v.fps * static_cast<double>(target_frames) / static_cast<double>(Tn);
  return out;
}


VideoSample extract_window(const VideoSample& v, int64_t start_frame, int64_t win_len, int64_t stride,
                           double keep_ratio) {
  if (win_len < 1 || stride < 1) throw ConfigError("window length and stride must be positive");
  std::vector<int64_t> idx(static_cast<size_t>(win_len));
  for (int64_t j = 0; j < win_len; ++j) idx[j] = start_frame + j * stride;
  VideoSample out;
  out.id = v.id;
  out.frames = gather_frames(v.frames, idx);
  out.fps = v.fps / static_cast<double>(stride);
  const double w0 = static_cast<double>(start_frame) / v.fps;
  const double w1 = static_cast<double>(start_frame + win_len * stride) / v.fps;
  for (const auto& a : v.annotations) {
    const double s = std::max(a.t_start, w0), e = std::min(a.t_end, w1);
    if (e <= s) continue;
    if ((e - s) / (a.t_end - a.t_start) < keep_ratio) continue;
    out.annotations.push_back({s - w0, e - w0, a.label});
  }
  return out;
}

VideoSample truncate_window(const VideoSample& v, int64_t win_len, int64_t stride, std::mt19937_64& rng,
                            WindowInfo* info, double keep_ratio) {
  const int64_t max_start = std::max<int64_t>(0, v.num_frames() - win_len * stride);
  VideoSample out;
  int64_t start = 0;
  for (int attempt = 0; attempt <= 20; ++attempt) {
    start = uniform_int(rng, 0, max_start);
    out = extract_window(v, start, win_len, stride, keep_ratio);
    if (!out.annotations.empty() || v.annotations.empty()) break;
  }
  if (info) *info = {start, stride};
  return out;
}

std::vector<int64_t> sliding_window_starts(int64_t num_frames, int64_t win_len, int64_t stride, double overlap) {
  if (overlap < 0 || overlap >= 1) throw ConfigError("window overlap must be in [0, 1)");
  if (win_len < 1 || stride < 1) throw ConfigError("window length and stride must be positive");
  const int64_t span = win_len * stride;
  const int64_t step = std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(span) * (1 - overlap))));
  std::vector<int64_t> starts{0};
  int64_t s = 0;
  while (s + span < num_frames) {
    s += step;
    if (s + span > num_frames) s = num_frames - span;
    starts.push_back(s);
  }
  return starts;
}

std::vector<Proposal> map_back(const std::vector<Proposal>& window_props, const WindowInfo& info, double fps,
                               double duration) {
  const double offset = static_cast<double>(info.start_frame) / fps;
  std::vector<Proposal> out;
  for (auto p : window_props) {
    p.t_start = std::clamp(p.t_start + offset, 0.0, duration);
    p.t_end = std::clamp(p.t_end + offset, 0.0, duration);
    if (p.t_end > p.t_start) out.push_back(p);
  }
  return out;
}

VideoSample crop_resize(const VideoSample& v, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  const int64_t C = v.frames.dim(0), Tn = v.frames.dim(1), H = v.frames.dim(2), W = v.frames.dim(3);
  if (h < 1 || w < 1 || y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W) {
    throw ContractViolation("crop box outside the frame");
  }
  auto src = v.frames.data();
  std::vector<float> out(static_cast<size_t>(C * Tn * H * W));
  auto coord = [](int64_t o, int64_t full, int64_t part, int64_t origin) {
    const double s = static_cast<double>(origin) + (static_cast<double>(o) + 0.5) * static_cast<double>(part) /
                                                       static_cast<double>(full) - 0.5;
    return std::clamp(s, static_cast<double>(origin), static_cast<double>(origin + part - 1));
  };
  for (int64_t y = 0; y < H; ++y) {
    const double sy = coord(y, H, h, y0);
    const auto y_lo = static_cast<int64_t>(std::floor(sy));
    const int64_t y_hi = std::min(y_lo + 1, y0 + h - 1);
    const double fy = sy - static_cast<double>(y_lo);
    for (int64_t x = 0; x < W; ++x) {
      const double sx = coord(x, W, w, x0);
      const auto x_lo = static_cast<int64_t>(std::floor(sx));
      const int64_t x_hi = std::min(x_lo + 1, x0 + w - 1);
      const double fx = sx - static_cast<double>(x_lo);
      for (int64_t ct = 0; ct < C * Tn; ++ct) {
        const float* f = src.data() + ct * H * W;
        const double top = f[y_lo * W + x_lo] * (1 - fx) + f[y_lo * W + x_hi] * fx;
        const double bot = f[y_hi * W + x_lo] * (1 - fx) + f[y_hi * W + x_hi] * fx;
        out[ct * H * W + y * W + x] = static_cast<float>(fy == 0 ? top : top * (1 - fy) + bot * fy);
      }
    }
  }
  VideoSample r = v;
  r.frames = TensorF(v.frames.shape(), std::move(out));
  return r;
}

VideoSample hflip(const VideoSample& v) {
  const int64_t W = v.frames.dim(3);
  auto src = v.frames.data();
  std::vector<float> out(src.size());
  for (size_t row = 0; row < src.size() / static_cast<size_t>(W); ++row)
    for (int64_t x = 0; x < W; ++x) out[row * W + x] = src[row * W + (W - 1 - x)];
  VideoSample r = v;
  r.frames = TensorF(v.frames.shape(), std::move(out));
  return r;
}

VideoSample augment(const VideoSample& v, std::mt19937_64& rng) {
  const int64_t H = v.frames.dim(2), W = v.frames.dim(3);
  const double frac = std::uniform_real_distribution<double>(0.7, 1.0)(rng);
  const int64_t h = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(H * std::sqrt(frac))), 1, H);
  const int64_t w = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(W * std::sqrt(frac))), 1, W);
  const int64_t y0 = uniform_int(rng, 0, H - h);
  const int64_t x0 = uniform_int(rng, 0, W - w);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  VideoSample out = (h == H && w == W) ? v : crop_resize(v, y0, x0, h, w);
  return flip ? hflip(out) : out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<VideoSample>& videos) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir / "annotations.csv");
  std::ofstream meta(dir / "meta.csv");
  if (!ann || !meta) throw Error("cannot write dataset under " + dir.string());
  ann << "video_id,t_start,t_end,class\n" << std::fixed << std::setprecision(6);
  meta << "video_id,fps,num_frames\n" << std::fixed << std::setprecision(6);
  for (const auto& v : videos) {
    save_blob(dir / (v.id + ".tlab"), v.frames);
    for (const auto& a : v.annotations) ann << v.id << ',' << a.t_start << ',' << a.t_end << ',' << a.label << '\n';
    meta << v.id << ',' << v.fps << ',' << v.num_frames() << '\n';
  }
}

std::vector<VideoSample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "meta.csv");
  std::ifstream ann(dir / "annotations.csv");
  if (!meta || !ann) throw LoadError("no dataset (meta.csv, annotations.csv) under " + dir.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    return cells;
  };
  std::string line;
  std::getline(meta, line);
  std::vector<VideoSample> out;
  std::map<std::string, size_t> index;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    auto c = split(line);
    if (c.size() != 3) throw LoadError("meta.csv: bad row '" + line + "'");
    VideoSample v;
    v.id = c[0];
    v.fps = std::stod(c[1]);
    v.frames = load_blob<float>(dir / (v.id + ".tlab"));
    if (v.frames.rank() != 4 || v.frames.dim(1) != std::stoll(c[2])) {
      throw LoadError("frame count mismatch for " + v.id);
    }
    index[v.id] = out.size();
    out.push_back(std::move(v));
  }
  std::getline(ann, line);
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    auto c = split(line);
    if (c.size() != 4) throw LoadError("annotations.csv: bad row '" + line + "'");
    auto it = index.find(c[0]);
    if (it == index.end()) throw LoadError("annotations.csv: unknown video " + c[0]);
    out[it->second].annotations.push_back({std::stod(c[1]), std::stod(c[2]), std::stoll(c[3])});
  }
  return out;
}

GroundTruthSet ground_truth(const std::vector<VideoSample>& videos) {
  GroundTruthSet gt;
  for (const auto& v : videos) gt[v.id] = v.annotations;
  return gt;
}

}  // namespace tialab::data
