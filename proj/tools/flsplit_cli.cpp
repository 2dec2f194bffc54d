// Copyright 2026 The flsplit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <csignal>
#include <iostream>

#include "CLI11.hpp"
#include "flsplit/bench.hpp"

namespace {

extern "C" void on_sigint(int) { flsplit::interrupt_flag().store(true); }

}  // namespace

int main(int argc, char** argv) {
  flsplit::tune_allocator();
  std::signal(SIGINT, on_sigint);

  CLI::App app{"Split federated fine-tuning toy: train, evaluate, attack and measure traffic"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::optional<std::size_t> steps;
  bool grid = false;
  bool print_config = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory (overrides config and FLSPLIT_OUT_DIR)");
    sub->add_option("--steps", steps, "override train.steps");
    sub->add_flag("--print-config", print_config, "print the effective config and exit");
  };
  auto* train = app.add_subcommand("train", "train and write records, comm stats and a checkpoint");
  auto* gen = app.add_subcommand("generate", "generate from prompts through the split");
  auto* eval = app.add_subcommand("eval", "cloze scoring over candidate sets");
  auto* attack = app.add_subcommand("attack", "reconstruction attack by a curious server");
  auto* comm = app.add_subcommand("comm-report", "byte accounting: masks, decode traffic, parameter split");
  auto* grid_cmd = app.add_subcommand("grid", "partition sweep over (p, q)");
  for (auto* s : {train, gen, eval, attack, comm, grid_cmd}) add_common(s);
  attack->add_flag("--grid", grid, "sweep attack.ps x attack.deltas");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : flsplit::kExitConfig;
  }

  flsplit::ExperimentConfig cfg;
  try {
    cfg = flsplit::ExperimentConfig::load(config_path);
    cfg.apply_env();
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (steps) cfg.train.steps = *steps;
    cfg.validate();
  } catch (const flsplit::Error& e) {
    std::cerr << e.what() << '\n';
    return flsplit::kExitConfig;
  }
  if (print_config) {
    std::cout << cfg.to_json().dump(2) << '\n';
    return 0;
  }

  try {
    flsplit::RunResult r;
    if (train->parsed()) r = flsplit::run_train(cfg);
    else if (gen->parsed()) r = flsplit::run_generate(cfg);
    else if (eval->parsed()) r = flsplit::run_eval(cfg);
    else if (attack->parsed()) r = flsplit::run_attack_cmd(cfg, grid);
    else if (comm->parsed()) r = flsplit::run_comm_report(cfg);
    else r = flsplit::run_grid(cfg);
    std::cout << r.summary.dump(2) << '\n';
    return r.exit_code;
  } catch (const flsplit::Error& e) {
    std::cerr << e.what() << '\n';
    return flsplit::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return flsplit::kExitProtocol;
  }
}
