// cimlab — reproducible experiment driver for the crossbar reliability lab.
//
// Verbs: train, inject, mc-eval, ood-eval, oneshot, rank, fingerprint,
// recalibrate, sweep, report. Every verb takes --config/--seed/--out; a run is
// a pure function of its config file. LAB_THREADS caps per-seed parallelism.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cimlab/lab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cimlab: compute-in-memory Bayesian NN reliability lab"};
  app.require_subcommand(1);

  const std::vector<std::string> verbs = {"train",       "inject", "mc-eval",
                                          "ood-eval",    "oneshot", "rank",
                                          "fingerprint", "recalibrate", "sweep"};

  std::string config_path, out_dir = "out";
  std::string seed_list;
  for (const auto& verb : verbs) {
    auto* sub = app.add_subcommand(verb, "run the " + verb + " pipeline");
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed_list, "override the config seeds (comma separated)");
  }
  auto* report = app.add_subcommand("report", "aggregate an existing run directory");
  report->add_option("--out", out_dir, "run directory to aggregate")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) return cimlab::lab::run_report(out_dir, std::cout);

    cimlab::lab::ExperimentConfig cfg = cimlab::lab::ExperimentConfig::parse_file(config_path);
    for (const auto& verb : verbs)
      if (app.get_subcommand(verb)->parsed()) cfg.set("task", verb);
    if (!seed_list.empty()) cfg.set("seeds", seed_list);
    return cimlab::lab::run_experiment(cfg, out_dir, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
