// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tialab/errors.hpp"
#include "tialab/harness.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "tialab_out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file (optional)");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)");
  cmd->add_option("--out", c.out, "output directory");
}

tialab::harness::RunConfig resolve(const Common& c) {
  tialab::harness::RunConfig cfg;
  if (!c.config.empty()) cfg = tialab::harness::load_config(c.config);
  for (const auto& s : c.sets) tialab::harness::apply_override(cfg, s);
  tialab::harness::apply_environment(cfg);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tialab: adapters for temporal action detection on synthetic video"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, mem_opts, ablate_opts, gen_opts;
  std::string checkpoint;
  std::string axis = "all";

  auto* train = app.add_subcommand("train", "train a detector and write checkpoint + logs");
  add_common(train, train_opts);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  auto* mem = app.add_subcommand("membench", "analytic memory table per strategy");
  add_common(mem, mem_opts);
  auto* ablate = app.add_subcommand("ablate", "train one run per setting of an axis");
  add_common(ablate, ablate_opts);
  ablate->add_option("--axis", axis, "kernel_k | adapter_kind | mode | representation | frames | resolution | all");
  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/test datasets");
  add_common(gen, gen_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return tialab::harness::cmd_train(resolve(train_opts), train_opts.out);
    if (eval->parsed()) return tialab::harness::cmd_eval(resolve(eval_opts), checkpoint, eval_opts.out);
    if (mem->parsed()) return tialab::harness::cmd_membench(resolve(mem_opts), mem_opts.out);
    if (ablate->parsed()) return tialab::harness::cmd_ablate(resolve(ablate_opts), axis, ablate_opts.out);
    if (gen->parsed()) return tialab::harness::cmd_gen_data(resolve(gen_opts), gen_opts.out);
  } catch (const tialab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const tialab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
