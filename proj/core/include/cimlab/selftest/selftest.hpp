#pragma once

// Functional self-test toolkit: one-shot test vectors optimized toward unit
// Gaussian hidden pre-activation statistics, approximate-gradient ranked test
// compaction, fingerprint-trained concurrent self-test, and the
// fault-coverage harness that scores all of them.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cimlab/nn/train.hpp"
#include "cimlab/xbar/crossbar.hpp"

namespace cimlab::selftest {

// ---------------------------------------------------------------------------
// One-shot testing

struct OneShotVector {
  Tensor<float> x_star;             // input-shaped, leading batch dim of 1
  std::vector<int> monitored_layers; // model layer indices whose outputs are pooled
  double stat_fault_free = 0;       // d at convergence through the clean program
  double tau = 0;                   // pass/fail threshold, tau > stat_fault_free

  std::string serialize() const;
  static OneShotVector parse(const std::string& text);
};

struct OneShotOptions {
  int replays = 32;      // fault-free read-noise replays for threshold calibration
  double tau_margin = 1.5;
  int patience = 50;     // consecutive non-improving steps before giving up
};

/// Distribution statistic d = sqrt(m1^2 + (m2-1)^2) of the pooled monitored
/// pre-activations for one forward of v through `prog` (or the digital path
/// when prog is null).
double oneshot_statistic(nn::Model<float>& model, const OneShotVector& v,
                         const xbar::CrossbarProgram* prog, u64 read_seed);

/// Gradient descent on the input x (starting from N(0,1)) minimizing
/// L(x) = m1^2 + (m2-1)^2 over all hidden dense/conv pre-activations; then
/// calibrates tau = margin * max d over `replays` fault-free noisy replays
/// through `clean_prog`. Fails after `patience` consecutive non-improving
/// steps.
OneShotVector generate_oneshot(nn::Model<float>& model, const xbar::CrossbarProgram& clean_prog,
                               int steps, double lr, u64 seed, OneShotOptions opts = {});

struct TestOutcome {
  bool pass = false;
  double statistic = 0;
};

/// One forward pass through the program under test; fails iff d > tau.
TestOutcome oneshot_test(nn::Model<float>& model, const xbar::CrossbarProgram& prog_under_test,
                         const OneShotVector& v, u64 read_seed = 0);

// ---------------------------------------------------------------------------
// Approximate-gradient ranking

struct RankedTestSet {
  std::vector<int> indices;   // into the training set, scores non-increasing
  std::vector<double> scores;
};

/// Top-k training samples by accumulated last-layer gradient proxy score,
/// ties broken by lower sample index.
RankedTestSet rank_tests(const nn::TrainLog& log, int k);

// ---------------------------------------------------------------------------
// Fingerprint concurrent self-test

struct FingerprintSpec {
  int aux_units = 8;      // F
  double lambda = 0.1;    // auxiliary loss weight
  u64 target_seed = 7;    // seeds the Rademacher target
};

struct Fingerprint {
  Tensor<float> f_target; // +-1 vector of length F
  double lambda = 0.1;
  double tol = 0;

  std::string serialize() const;
  static Fingerprint parse(const std::string& text);
};

/// Seeded Rademacher +-1 target of length f.
Tensor<float> rademacher_target(int f, u64 seed);

struct FingerprintTrainResult {
  Fingerprint fingerprint;
  double task_accuracy = 0;     // on the calibration/validation set
  nn::TrainLog log;
};

/// Joint training: task cross-entropy on the first `classes` logits plus
/// lambda * MSE(aux, f_target) on the trailing aux_units logits. The model
/// must end in a dense layer of width classes + aux_units (no softmax).
/// tol = 1.5 * max over calibration inputs of ||aux - f_target||_inf.
/// When a baseline accuracy is supplied, a gap over 3 points fails
/// ("fingerprint capacity exceeded"); within (1,3] points it is reported by
/// the caller's own checks.
FingerprintTrainResult train_with_fingerprint(nn::Model<float>& model, const FingerprintSpec& spec,
                                              const Tensor<float>& x_train,
                                              const std::vector<int>& y_train,
                                              const Tensor<float>& x_calib,
                                              const std::vector<int>& y_calib, int classes,
                                              const nn::TrainConfig& cfg,
                                              std::optional<double> baseline_accuracy = {});

/// Pass iff ||output_aux - f_target||_inf <= tol. Pure; works inline or on
/// logged outputs.
bool check_fingerprint(const Tensor<float>& output_aux, const Fingerprint& fp);

/// Task probabilities / aux slice helpers for models with an extended head.
Tensor<float> head_class_probs(const Tensor<float>& logits, int classes);
Tensor<float> head_aux(const Tensor<float>& logits, int row, int classes, int aux_units);

// ---------------------------------------------------------------------------
// Fault-coverage harness

using ProgFactory = std::function<xbar::CrossbarProgram(u64 scenario_seed)>;

struct ScenarioResult {
  u64 scenario_seed = 0;
  bool detected = false;
  double statistic = 0; // prediction flips, one-shot d, or fingerprint failures
};

struct CoverageReport {
  int scenarios = 0;
  int detected = 0;
  std::vector<ScenarioResult> per_scenario;
  double coverage() const { return scenarios == 0 ? 0.0 : double(detected) / scenarios; }
};

/// Prediction-flip detection: a scenario is detected when any test input's
/// top-1 class under the faulty program differs from its prediction under the
/// fault-free program (noise-free baseline).
CoverageReport fault_coverage(nn::Model<float>& model, const xbar::CrossbarProgram& clean_prog,
                              const ProgFactory& make_faulty, const Tensor<float>& test_inputs,
                              int n_scenarios, u64 seed);

/// One-shot detection: a scenario is detected when d > tau.
CoverageReport fault_coverage_oneshot(nn::Model<float>& model, const ProgFactory& make_faulty,
                                      const OneShotVector& v, int n_scenarios, u64 seed);

/// One-sided sign test: p-value of seeing >= `wins` successes in `n` fair
/// coin flips (ties must be excluded by the caller).
double sign_test_pvalue(int wins, int n);

} // namespace cimlab::selftest
