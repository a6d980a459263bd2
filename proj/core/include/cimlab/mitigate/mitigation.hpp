#pragma once

// Post-fault accuracy recovery: label-free ApproxBN recalibration through the
// faulty hardware path, the variation-aware training policy, and design-time
// sensing-reference generation for ADC-less binarized partial-sum readout.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cimlab/nn/train.hpp"
#include "cimlab/xbar/crossbar.hpp"

namespace cimlab::mitigate {

struct CalibrationSet {
  Tensor<float> inputs; // unlabeled batch
  double fraction = 0;  // of the training set size; at most 1%

  void validate() const {
    require(!inputs.empty(), "calibration set is empty");
    require(fraction > 0 && fraction <= 0.01, "calibration fraction must be in (0, 0.01]");
  }
};

/// One pass of the calibration inputs through the faulty program; every
/// normalization layer's running statistics are replaced by the plain batch
/// statistics of its observed inputs (no labels, no gradient updates, weights
/// untouched). Dead channels are floored at variance 1e-5 with a warning on
/// `warn`.
nn::Model<float> approx_bn_recalibrate(const nn::Model<float>& model,
                                       const xbar::CrossbarProgram& prog_faulty,
                                       const CalibrationSet& calib, u64 read_seed = 0,
                                       std::ostream* warn = nullptr);

struct VariationPolicy {
  double sigma_train = 0;
};

/// Training perturbation policy from a config with a noise spec: each training
/// forward multiplies weights by exp(eps), eps ~ N(0, sigma^2), fresh per
/// batch, gradients straight-through. The train loop consumes the same spec;
/// this accessor validates and exposes it.
VariationPolicy variation_aware_loss_hook(const nn::TrainConfig& cfg);

struct ReferenceVector {
  // theta per tile pair, aligned with prog.tiles; one threshold per column
  std::vector<std::vector<float>> theta;
  int scenario_count = 0;

  std::string serialize() const;
  static ReferenceVector parse(const std::string& text);
};

/// Margin-centered sensing thresholds: `scenarios` variation-perturbed copies
/// of the program each record per-column currents on 256 seeded random
/// calibration inputs; per scenario the midpoint between the currents whose
/// true (digital) activation is positive and those where it is negative, and
/// theta is the median midpoint over scenarios. Degenerate (constant-current)
/// columns get that constant.
ReferenceVector generate_reference(nn::Model<float>& model, const xbar::CrossbarProgram& prog,
                                   int scenarios, u64 seed);

/// Installs the thresholds into the program's tiles.
void install_reference(xbar::CrossbarProgram& prog, const ReferenceVector& ref);

} // namespace cimlab::mitigate
