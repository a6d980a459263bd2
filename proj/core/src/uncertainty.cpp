#include "cimlab/uq/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "cimlab/nn/loss.hpp"

namespace cimlab::uq {

double entropy(const std::vector<double>& probs) {
  double h = 0;
  for (double p : probs) {
    require(p >= -1e-9 && p <= 1.0 + 1e-9, "entropy: probabilities must be in [0,1]");
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

double entropy(const Tensor<float>& probs) {
  std::vector<double> p(probs.vec().begin(), probs.vec().end());
  return entropy(p);
}

double predictive_entropy(const bayes::PredictiveResult<float>& r) {
  return entropy(r.mean_probs);
}

double mutual_information(const bayes::PredictiveResult<float>& r) {
  require(r.draws() >= 2, "mutual_information: needs T >= 2 samples");
  double mean_h = 0;
  for (const auto& s : r.samples) mean_h += entropy(s);
  mean_h /= r.draws();
  return std::max(0.0, entropy(r.mean_probs) - mean_h);
}

double ece(const Tensor<float>& probs, const std::vector<int>& labels, int bins) {
  require(bins >= 1, "ece: bins must be >= 1");
  require(probs.rank() == 2, "ece: expected [N,C] probabilities");
  const int n = probs.dim(0), c = probs.dim(1);
  require(static_cast<int>(labels.size()) == n, "ece: label count mismatch");

  std::vector<double> bin_conf(static_cast<size_t>(bins), 0.0);
  std::vector<double> bin_acc(static_cast<size_t>(bins), 0.0);
  std::vector<int> bin_n(static_cast<size_t>(bins), 0);
  for (int i = 0; i < n; ++i) {
    int pred = 0;
    for (int j = 1; j < c; ++j)
      if (probs.at2(i, j) > probs.at2(i, pred)) pred = j;
    double conf = probs.at2(i, pred);
    int b = std::min(bins - 1, static_cast<int>(conf * bins));
    bin_conf[static_cast<size_t>(b)] += conf;
    bin_acc[static_cast<size_t>(b)] += pred == labels[static_cast<size_t>(i)] ? 1.0 : 0.0;
    bin_n[static_cast<size_t>(b)] += 1;
  }
  double e = 0;
  for (int b = 0; b < bins; ++b) {
    if (bin_n[static_cast<size_t>(b)] == 0) continue;
    double nb = bin_n[static_cast<size_t>(b)];
    e += (nb / n) * std::abs(bin_acc[static_cast<size_t>(b)] / nb - bin_conf[static_cast<size_t>(b)] / nb);
  }
  return e;
}

OodResult ood_eval(const ScoredSet& in_set, const ScoredSet& ood_set) {
  require(!in_set.scores.empty() && !ood_set.scores.empty(), "ood_eval: sets must be non-empty");

  // Rank statistic with midranks for ties: AUROC = (R_ood - n1(n1+1)/2) / (n0*n1).
  struct Item {
    double score;
    bool ood;
  };
  std::vector<Item> all;
  all.reserve(in_set.scores.size() + ood_set.scores.size());
  for (double s : in_set.scores) all.push_back({s, false});
  for (double s : ood_set.scores) all.push_back({s, true});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  const double n0 = static_cast<double>(in_set.scores.size());
  const double n1 = static_cast<double>(ood_set.scores.size());
  double rank_sum_ood = 0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)); // 1-based
    for (size_t k = i; k < j; ++k)
      if (all[k].ood) rank_sum_ood += midrank;
    i = j;
  }
  OodResult r;
  r.auroc = (rank_sum_ood - n1 * (n1 + 1) / 2.0) / (n0 * n1);

  // Nearest-rank 95th percentile of the in-distribution scores.
  std::vector<double> in_sorted = in_set.scores;
  std::sort(in_sorted.begin(), in_sorted.end());
  size_t k = static_cast<size_t>(std::ceil(0.95 * n0));
  k = std::min(std::max<size_t>(k, 1), in_sorted.size());
  r.threshold = in_sorted[k - 1];

  int detected = 0;
  for (double s : ood_set.scores) detected += s > r.threshold;
  r.detection_rate_at_5pct_fpr = static_cast<double>(detected) / n1;
  return r;
}

} // namespace cimlab::uq
