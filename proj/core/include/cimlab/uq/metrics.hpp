#pragma once

// Scalar uncertainty scores and detection metrics over Monte-Carlo
// predictions. Pure functions, natural log throughout (nats).

#include <vector>

#include "cimlab/bayes/bayes.hpp"
#include "cimlab/tensor.hpp"

namespace cimlab::uq {

enum class Origin { InDistribution, OOD };

struct ScoredSet {
  std::vector<double> scores;
  Origin origin = Origin::InDistribution;
};

/// H(p) = -sum p ln p with 0 ln 0 := 0.
double entropy(const std::vector<double>& probs);
double entropy(const Tensor<float>& probs);

double predictive_entropy(const bayes::PredictiveResult<float>& r);

/// BALD decomposition MI = H(mean) - mean_t H(sample_t), clipped at >= 0.
/// Requires at least two samples.
double mutual_information(const bayes::PredictiveResult<float>& r);

/// Equal-width confidence-binned expected calibration error; empty bins are
/// skipped. probs: [N, C] probability rows.
double ece(const Tensor<float>& probs, const std::vector<int>& labels, int bins = 15);

struct OodResult {
  double auroc = 0;
  double detection_rate_at_5pct_fpr = 0;
  double threshold = 0;
};

/// Rank-statistic AUROC (ties counted half) treating OOD as the positive
/// class; threshold fixed at the 95th percentile of in-distribution scores,
/// detection rate = fraction of OOD scores above it.
OodResult ood_eval(const ScoredSet& in_set, const ScoredSet& ood_set);

} // namespace cimlab::uq
