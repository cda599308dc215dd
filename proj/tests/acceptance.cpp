// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion with the measured value
// and its pinned tolerance. Exit code is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ap_oracle.hpp"
#include "gradcheck.hpp"
#include "tialab/adapters.hpp"
#include "tialab/backbone.hpp"
#include "tialab/checkpoint.hpp"
#include "tialab/evaluation.hpp"
#include "tialab/harness.hpp"
#include "tialab/memory_model.hpp"

using namespace tialab;
using backbone::EncodeMode;
using backbone::EncodeModeKind;
using backbone::Representation;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Finite differences on every op and on TIA + head.
Outcome gradient_suite() {
  constexpr double kTol = 1e-4;
  constexpr int kCases = 100;
  constexpr double kBudget = 120;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0;
  std::string worst_name;
  int total = 0;
  auto record = [&](const std::string& name, double e) {
    ++total;
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  };
  for (const auto& op : testing::op_cases()) {
    for (int i = 0; i < kCases; ++i) record(op.name, testing::check_gradients(op.make(rng)).max_rel_error);
  }
  for (int i = 0; i < kCases; ++i) record("tia+head", testing::check_gradients(testing::tia_head_case(rng)).max_rel_error);
  const double secs = seconds_since(t0);
  return {worst < kTol && secs < kBudget, std::to_string(total) + " cases, max rel err " + fmt("%.2e", worst) + " (" +
                                              worst_name + ") < " + fmt("%.0e", kTol) + ", " + fmt("%.1f", secs) +
                                              " s < " + fmt("%.0f", kBudget) + " s"};
}

// 2. Frozen, fresh inside and fresh outside adapters give identical features.
Outcome identity_at_init() {
  constexpr int kVideos = 50;
  constexpr double kBudget = 60;
  const auto t0 = Clock::now();
  backbone::BackboneConfig cfg;
  backbone::Backbone<float> bb(cfg);
  auto inside = backbone::AdapterSet<float>::make(adapters::AdapterKind::kTia, cfg, 4, 3, false, 11);
  auto outside = backbone::AdapterSet<float>::make(adapters::AdapterKind::kTia, cfg, 4, 3, false, 12);
  const backbone::AdapterSet<float>* none = nullptr;
  std::mt19937_64 rng(202);
  int identical = 0;
  for (int i = 0; i < kVideos; ++i) {
    const int64_t t = testing::rand_i(rng, 8, 48);
    auto v = TensorF::uniform({3, t, cfg.frame_h, cfg.frame_w}, -1, 1, rng);
    const auto f = backbone::encode_frame_repr(bb, v, none, EncodeMode::frozen()).values.to_vector();
    const bool same = backbone::encode_frame_repr(bb, v, &inside, EncodeMode::adapter_inside()).values.to_vector() == f &&
                      backbone::encode_frame_repr(bb, v, &outside, EncodeMode::adapter_outside(false)).values.to_vector() == f;
    identical += same;
  }
  const double secs = seconds_since(t0);
  return {identical == kVideos && secs < kBudget, std::to_string(identical) + "/" + std::to_string(kVideos) +
                                                      " videos bit-identical, " + fmt("%.1f", secs) + " s < " +
                                                      fmt("%.0f", kBudget) + " s"};
}

harness::RunConfig small_run() {
  harness::RunConfig c;
  c.train_videos = 10;
  c.test_videos = 2;
  c.epochs = 1;
  c.batch_size = 1;
  return c;
}

// 3. Outside adapters never touch the backbone.
Outcome gradient_isolation() {
  constexpr double kBudget = 60;
  const auto t0 = Clock::now();
  auto c = small_run();
  c.mode = EncodeModeKind::kAdapterOutside;
  auto ds = harness::prepare_datasets(c);
  harness::Model model(c);
  std::vector<std::vector<float>> before;
  for (auto* p : model.backbone().parameters()) before.push_back(p->tensor.to_vector());
  std::vector<float> adapter_before;
  for (auto* p : model.adapters().parameters()) {
    auto v = p->tensor.to_vector();
    adapter_before.insert(adapter_before.end(), v.begin(), v.end());
  }
  auto& counters = BackwardCounters::instance();
  counters.reset();
  harness::train(model, ds);
  const int64_t backbone_calls = counters.count("backbone");
  const int64_t adapter_calls = counters.count("adapter");
  size_t changed = 0, i = 0;
  for (auto* p : model.backbone().parameters()) changed += p->tensor.to_vector() != before[i++];
  std::vector<float> adapter_after;
  for (auto* p : model.adapters().parameters()) {
    auto v = p->tensor.to_vector();
    adapter_after.insert(adapter_after.end(), v.begin(), v.end());
  }
  const bool adapters_moved = adapter_after != adapter_before;
  const double secs = seconds_since(t0);
  const bool pass = backbone_calls == 0 && changed == 0 && adapter_calls > 0 && adapters_moved && secs < kBudget;
  return {pass, "10 optimizer steps: backbone backward calls " + std::to_string(backbone_calls) + " (== 0), " +
                    std::to_string(changed) + " backbone tensors changed (== 0), adapter backward calls " +
                    std::to_string(adapter_calls) + ", adapters updated " + (adapters_moved ? "yes" : "no") + ", " +
                    fmt("%.1f", secs) + " s < " + fmt("%.0f", kBudget) + " s"};
}

// 4. Parameter accounting at the published backbone width.
Outcome parameter_accounting() {
  constexpr int64_t kExpected = 1006860;
  constexpr double kBackbone = 22e6, kLo = 0.044, kHi = 0.050;
  const int64_t total = adapters::tia_param_count(384, 4, 3) * 12;
  std::mt19937_64 rng(404);
  const int64_t built = adapters::count_params(adapters::init_tia<float>(384, 4, 3, rng())) * 12;
  const double share = static_cast<double>(total) / kBackbone;
  const bool pass = total == kExpected && built == total && share >= kLo && share <= kHi;
  return {pass, "12 x count_params(d=384, gamma=4, k=3) = " + std::to_string(total) + " (expected " +
                    std::to_string(kExpected) + ", built " + std::to_string(built) + "), " +
                    fmt("%.3f", 100 * share) + "% of 22M in [4.4%, 5.0%]"};
}

// 5. Checkpointed recomputation gives the same gradients with a lower peak.
Outcome checkpoint_equivalence() {
  constexpr double kTol = 1e-12, kMinDrop = 2.0, kBudget = 60;
  constexpr int64_t kBlocks = 8, kDim = 16;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(505);
  std::vector<TensorD> w, b;
  std::vector<Block<double>> blocks;
  for (int64_t i = 0; i < kBlocks; ++i) {
    w.push_back(TensorD::uniform({kDim, kDim}, -0.5, 0.5, rng).set_requires_grad(true));
    b.push_back(TensorD::uniform({kDim}, -0.5, 0.5, rng).set_requires_grad(true));
    auto wi = w.back(), bi = b.back();
    blocks.push_back([wi, bi](const TensorD& x) { return gelu(linear(x, wi, bi)); });
  }
  const auto x0 = TensorD::uniform({8, kDim}, -1, 1, rng);
  auto run = [&](bool ckpt, int64_t& peak) {
    for (auto& t : w) t.zero_grad();
    for (auto& t : b) t.zero_grad();
    auto& tracker = RetentionTracker::instance();
    tracker.reset_peak();
    const int64_t base = tracker.stats().live_tensors;
    auto x = x0.detach().set_requires_grad(true);
    // 8 blocks in 2 segments of 4.
    auto y = ckpt ? checkpointed_sequence(blocks, x, {kBlocks / 2}) : plain_sequence(blocks, x);
    peak = tracker.stats().peak_tensors - base;
    backward(testing::project(y, 55));
    std::vector<std::vector<double>> grads{x.grad_or_zeros().to_vector()};
    for (const auto& t : w) grads.push_back(t.grad_or_zeros().to_vector());
    for (const auto& t : b) grads.push_back(t.grad_or_zeros().to_vector());
    return grads;
  };
  int64_t plain_peak = 0, ckpt_peak = 0;
  const auto plain = run(false, plain_peak);
  const auto ckpt = run(true, ckpt_peak);
  double worst = 0;
  for (size_t i = 0; i < plain.size(); ++i) worst = std::max(worst, testing::rel_error(plain[i], ckpt[i]));
  const double drop = static_cast<double>(plain_peak) / static_cast<double>(std::max<int64_t>(ckpt_peak, 1));
  const double secs = seconds_since(t0);
  return {worst <= kTol && drop >= kMinDrop && secs < kBudget,
          "N=8, 2 segments: max grad rel diff " + fmt("%.2e", worst) + " <= 1e-12, retained peak " +
              std::to_string(plain_peak) + " -> " + std::to_string(ckpt_peak) + " (" + fmt("%.2f", drop) +
              "x >= 2x), " + fmt("%.1f", secs) + " s < " + fmt("%.0f", kBudget) + " s"};
}

int64_t measured_peak(EncodeModeKind mode, Representation rep) {
  harness::RunConfig cfg;
  cfg.backbone.num_layers = 2;
  cfg.backbone.dim = 16;
  cfg.backbone.chunk_len = 4;
  cfg.mode = mode;
  cfg.representation = rep;
  cfg.snippet_len = 16;
  harness::Model model(cfg);
  auto video = TensorF::full({3, 16, cfg.data.height, cfg.data.width}, 0.1f);
  auto& tracker = RetentionTracker::instance();
  tracker.reset_peak();
  const int64_t base = tracker.stats().live_elements;
  auto f = model.encode(video);
  return tracker.stats().peak_elements - base;
}

// 6. Memory model orderings and the measured snippet duplication.
Outcome memory_directions() {
  constexpr double kBudget = 120, kRatioLo = 8, kRatioHi = 16;
  const auto t0 = Clock::now();
  memory::ShapeDescriptor s;
  s.num_layers = 4;
  s.dim = 64;
  s.frames = 256;
  s.snippet_len = 16;
  s.backbone_params = backbone::backbone_param_count(backbone::BackboneConfig{});
  s.head_params = 20000;
  auto est = [&](EncodeMode m, Representation r = Representation::kFrame) {
    return memory::estimate({m, r, false, false}, s);
  };
  const auto full = est(EncodeMode::full_ft()), inside = est(EncodeMode::adapter_inside()),
             outside = est(EncodeMode::adapter_outside(false));
  const bool order = full.total_bytes > inside.total_bytes && inside.total_bytes > outside.total_bytes;
  const double model_ratio = static_cast<double>(est(EncodeMode::adapter_inside(), Representation::kSnippet).activation_bytes) /
                             static_cast<double>(inside.activation_bytes);
  const double measured = static_cast<double>(measured_peak(EncodeModeKind::kAdapterInside, Representation::kSnippet)) /
                          static_cast<double>(measured_peak(EncodeModeKind::kAdapterInside, Representation::kFrame));
  const double secs = seconds_since(t0);
  const bool pass = order && model_ratio == 16.0 && measured >= kRatioLo && measured <= kRatioHi && secs < kBudget;
  return {pass, "total bytes FullFT " + std::to_string(full.total_bytes) + " > Inside " +
                    std::to_string(inside.total_bytes) + " > Outside " + std::to_string(outside.total_bytes) + " (" +
                    (order ? "holds" : "violated") + "), model snippet/frame " + fmt("%.2f", model_ratio) +
                    " == 16, measured " + fmt("%.2f", measured) + " in [8, 16], " + fmt("%.1f", secs) + " s < " +
                    fmt("%.0f", kBudget) + " s"};
}

// 7. mean_ap against the rank-based brute force.
Outcome evaluation_oracle() {
  constexpr int kTrials = 10000;
  constexpr double kTol = 1e-9, kBudget = 120;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(707);
  evaluation::EvalConfig cfg;
  cfg.num_classes = 2;
  double worst = 0;
  for (int i = 0; i < kTrials; ++i) {
    auto [preds, gt] = testing::random_instance(rng, 8, 4);
    worst = std::max(worst, std::abs(evaluation::mean_ap(preds, gt, cfg).average - testing::oracle_map(preds, gt, cfg)));
  }
  const double secs = seconds_since(t0);
  return {worst <= kTol && secs < kBudget, std::to_string(kTrials) + " instances, max |diff| " + fmt("%.2e", worst) +
                                               " <= 1e-9, " + fmt("%.1f", secs) + " s < " + fmt("%.0f", kBudget) +
                                               " s"};
}

// 8. Synthetic end-to-end: TIA inside against frozen features.
Outcome end_to_end() {
  constexpr double kTrainTarget = 0.9, kMargin = 0.05, kBudget = 600;
  constexpr int64_t kEpochs = 30;
  const auto t0 = Clock::now();
  harness::RunConfig base;
  base.epochs = kEpochs;
  auto run = [&](EncodeModeKind mode) {
    auto c = base;
    c.mode = mode;
    auto ds = harness::prepare_datasets(c);
    harness::Model model(c);
    return harness::train(model, ds);
  };
  const auto inside = run(EncodeModeKind::kAdapterInside);
  const auto frozen = run(EncodeModeKind::kFrozen);
  double best_train = 0;
  int64_t reached = 0;
  for (const auto& e : inside.log) {
    if (!e.train_map) continue;
    best_train = std::max(best_train, *e.train_map);
    if (!reached && *e.train_map >= kTrainTarget) reached = e.epoch;
  }
  const double gap = inside.final_test_map - frozen.final_test_map;
  const double secs = seconds_since(t0);
  const bool pass = reached > 0 && gap >= kMargin && secs < kBudget;
  return {pass, "K=3, 200/50 videos, 30 epochs: inside best train mAP " + fmt("%.3f", best_train) + " (>= 0.9" +
                    (reached ? " at epoch " + std::to_string(reached) : std::string(", not reached")) +
                    "), test mAP inside " + fmt("%.3f", inside.final_test_map) + " vs frozen " +
                    fmt("%.3f", frozen.final_test_map) + " (gap " + fmt("%+.3f", gap) + ", need >= +0.050), " +
                    fmt("%.0f", secs) + " s < " + fmt("%.0f", kBudget) + " s"};
}

// 9. Ablation tables for kernel size, adapter design and encode mode.
Outcome ablations(const std::filesystem::path& out) {
  constexpr double kBudget = 1800;
  const auto t0 = Clock::now();
  harness::RunConfig c;
  c.train_videos = 40;
  c.test_videos = 10;
  c.epochs = 5;
  const std::map<std::string, std::vector<std::string>> expected{
      {"kernel_k", {"1", "3", "7", "13", "21"}},
      {"adapter_kind", {"standard", "tia", "tia_no_residual"}},
      {"mode", {"frozen", "full_ft", "adapter_inside", "adapter_outside", "full_ft_plus_tia"}}};
  std::vector<std::string> problems;
  std::map<std::string, std::map<std::string, int64_t>> params;
  for (const auto& [axis, settings] : expected) {
    auto rows = harness::run_ablation(c, axis, out / axis);
    std::ostringstream os;
    harness::write_ablation_csv(os, rows);
    {
      std::ofstream f(out / (axis + ".csv"));
      f << os.str();
    }
    std::ifstream f(out / (axis + ".csv"));
    auto back = harness::read_ablation_csv(f);
    std::vector<std::string> got;
    for (const auto& r : back) {
      got.push_back(r.setting);
      params[axis][r.setting] = r.trainable_params;
      if (r.memory_total_bytes <= 0) problems.push_back(axis + "/" + r.setting + " has no memory estimate");
    }
    if (got != settings) problems.push_back(axis + " rows do not match the setting list");
    if (back.size() != rows.size()) problems.push_back(axis + " csv did not round trip");
  }
  auto& m = params["mode"];
  if (!(m["frozen"] < m["adapter_inside"] && m["adapter_inside"] < m["full_ft"] && m["full_ft"] < m["full_ft_plus_tia"]))
    problems.push_back("mode trainable ordering violated");
  auto& k = params["kernel_k"];
  if (!(k["1"] < k["3"] && k["3"] < k["7"] && k["7"] < k["13"] && k["13"] < k["21"]))
    problems.push_back("kernel_k trainables not increasing in k");
  auto& a = params["adapter_kind"];
  if (!(a["standard"] < a["tia"] && a["tia"] == a["tia_no_residual"])) problems.push_back("adapter_kind counts");
  const double secs = seconds_since(t0);
  std::string detail = "13 rows over kernel_k/adapter_kind/mode parsed";
  for (const auto& p : problems) detail += "; " + p;
  detail += ", frozen " + std::to_string(m["frozen"]) + " < inside " + std::to_string(m["adapter_inside"]) +
            " < full " + std::to_string(m["full_ft"]) + " < full+tia " + std::to_string(m["full_ft_plus_tia"]) +
            ", " + fmt("%.0f", secs) + " s < " + fmt("%.0f", kBudget) + " s";
  return {problems.empty() && secs < kBudget, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tialab acceptance suite"};
  std::vector<int> only;
  std::string out = (std::filesystem::temp_directory_path() / "tialab_acceptance").string();
  app.add_option("--only", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--out", out, "Directory for ablation tables");
  CLI11_PARSE(app, argc, argv);

  std::filesystem::create_directories(out);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"identity at init", identity_at_init},
      {"gradient isolation", gradient_isolation},
      {"parameter accounting", parameter_accounting},
      {"checkpointing equivalence", checkpoint_equivalence},
      {"memory model directions", memory_directions},
      {"evaluation oracle", evaluation_oracle},
      {"end-to-end synthetic run", end_to_end},
      {"ablation harness", [&] { return ablations(out); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed;
}
