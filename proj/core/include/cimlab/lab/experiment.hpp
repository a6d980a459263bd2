#pragma once

// Experiment driver: one config in, one result directory out. Pipelines are
// pure functions of the config (seeded end to end); per-seed work may run on
// up to LAB_THREADS workers with a fixed merge order, so thread count never
// changes results.

#include <ostream>
#include <string>

#include "cimlab/lab/config.hpp"

namespace cimlab::lab {

/// Executes the configured task, writing summary.json, per_seed.csv, the
/// config copy, and replay bundles (fault maps, test artifacts) into out_dir.
/// Returns 0 on success. On failure writes a FAILED.marker with the message
/// and returns 1.
int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log);

/// Aggregates an existing run directory's per_seed.csv into report.json and
/// prints one mean/std line per metric.
int run_report(const std::string& out_dir, std::ostream& os);

/// LAB_THREADS, floored at 1.
int lab_threads();

} // namespace cimlab::lab
