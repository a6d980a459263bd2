#pragma once

// Monte-Carlo predictive inference and the Bayesian-layer utilities: adaptive
// scale-dropout rates, the ELBO for scale-vector VI, and re-exports of the
// single-module scale-dropout step and the inverted-normalization op.

#include <vector>

#include "cimlab/nn/loss.hpp"
#include "cimlab/nn/model.hpp"

namespace cimlab::bayes {

using nn::inverted_norm_affine;
using nn::scale_dropout_step;

template <typename T>
struct PredictiveResult {
  Tensor<T> mean_probs;           // [classes]
  std::vector<Tensor<T>> samples; // T probability vectors [classes]
  int draws() const { return static_cast<int>(samples.size()); }
};

namespace detail {

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& z) {
  const int b = z.dim(0), c = z.dim(1);
  Tensor<T> y(z.shape());
  for (int r = 0; r < b; ++r) {
    T mx = z.at2(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, z.at2(r, j));
    double s = 0;
    for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(z.at2(r, j) - mx));
    for (int j = 0; j < c; ++j)
      y.at2(r, j) = static_cast<T>(std::exp(static_cast<double>(z.at2(r, j) - mx)) / s);
  }
  return y;
}

} // namespace detail

/// T stochastic forwards over a whole batch. Sample s draws every RNG source
/// from the stream derive(seed, s, source), so results are independent of
/// evaluation order. Returns one PredictiveResult per input row. If the model
/// does not end in Softmax the outputs are normalized here.
template <typename T>
std::vector<PredictiveResult<T>> mc_forward_batch(nn::Model<T>& model, const Tensor<T>& x,
                                                  int t_samples, u64 seed,
                                                  nn::MatmulBackend<T>* backend = nullptr) {
  require(t_samples >= 1, "mc_forward: T must be >= 1");
  const int batch = x.dim(0);
  const bool ends_softmax =
      !model.layers.empty() && model.layers.back()->kind() == nn::LayerKind::Softmax;

  std::vector<PredictiveResult<T>> results(static_cast<size_t>(batch));
  for (int s = 0; s < t_samples; ++s) {
    model.seed_sources(seed, static_cast<u64>(s));
    Tensor<T> out = nn::forward(model, x, Mode::Stochastic, backend);
    Tensor<T> probs = ends_softmax ? out : detail::softmax_rows(out);
    const int c = probs.dim(1);
    for (int r = 0; r < batch; ++r) {
      Tensor<T> row({c});
      for (int j = 0; j < c; ++j) row[j] = probs.at2(r, j);
      results[static_cast<size_t>(r)].samples.push_back(std::move(row));
    }
  }
  for (auto& r : results) {
    const int c = r.samples[0].numel() > 0 ? r.samples[0].dim(0) : 0;
    r.mean_probs = Tensor<T>({c});
    for (const auto& s : r.samples)
      for (int j = 0; j < c; ++j) r.mean_probs[j] += s[j];
    for (int j = 0; j < c; ++j) r.mean_probs[j] /= static_cast<T>(r.samples.size());
  }
  return results;
}

/// Single-input form; x may carry an explicit batch dimension of 1 or be a
/// bare feature vector.
template <typename T>
PredictiveResult<T> mc_forward(nn::Model<T>& model, const Tensor<T>& x, int t_samples, u64 seed,
                               nn::MatmulBackend<T>* backend = nullptr) {
  Tensor<T> batched = x;
  if (x.rank() >= 1 && x.dim(0) != 1) {
    std::vector<int> shape = x.shape();
    shape.insert(shape.begin(), 1);
    batched = x.reshaped(shape);
  }
  return mc_forward_batch(model, batched, t_samples, seed, backend)[0];
}

/// Layer-dependent adaptive scale-dropout rates:
/// p_l = p_min + (p_max - p_min) * params_l / max_l' params_l', where params_l
/// counts the weight layer the scale vector is attached to (the nearest
/// preceding dense/conv). Sets the rates in place and returns them.
template <typename T>
std::vector<double> adaptive_rates(nn::Model<T>& model, double p_min, double p_max) {
  require(p_min >= 0 && p_min <= p_max && p_max < 1, "adaptive_rates: need 0 <= p_min <= p_max < 1");
  std::vector<nn::ScaleDropout<T>*> scales;
  std::vector<std::int64_t> params;
  std::int64_t preceding = 0;
  for (auto& l : model.layers) {
    if (l->kind() == nn::LayerKind::Dense || l->kind() == nn::LayerKind::Conv2d)
      preceding = l->param_count();
    if (auto* s = dynamic_cast<nn::ScaleDropout<T>*>(l.get())) {
      scales.push_back(s);
      params.push_back(preceding > 0 ? preceding : s->channels());
    }
  }
  std::vector<double> rates;
  if (scales.empty()) return rates;
  std::int64_t mx = *std::max_element(params.begin(), params.end());
  for (size_t i = 0; i < scales.size(); ++i) {
    double p = p_min + (p_max - p_min) * (double(params[i]) / double(mx));
    scales[i]->set_p(p);
    rates.push_back(p);
  }
  return rates;
}

struct ElboParts {
  double loss = 0;
  double nll = 0;
  double kl = 0;
};

/// One stochastic evaluation of the ELBO objective on a batch:
/// loss = NLL + beta * sum KL(q(scale) || prior). The training loop applies
/// the same decomposition with gradients; this is the inspection entry point.
template <typename T>
ElboParts vi_elbo(nn::Model<T>& model, const Tensor<T>& x, const std::vector<int>& labels,
                  double beta, u64 seed) {
  auto vi_layers = model.template layers_of<nn::ScaleVI<T>>();
  require(!vi_layers.empty(), "vi_elbo: model has no ScaleVI layers");
  model.seed_sources(seed, 0);
  Tensor<T> out = nn::forward(model, x, Mode::Stochastic);
  Tensor<T> probs = model.layers.back()->kind() == nn::LayerKind::Softmax
                        ? out
                        : detail::softmax_rows(out);
  ElboParts parts;
  parts.nll = nn::cross_entropy(probs, labels).value;
  for (auto* vi : vi_layers) parts.kl += vi->kl();
  require(std::isfinite(parts.kl), "vi_elbo: non-finite KL divergence");
  parts.loss = parts.nll + beta * parts.kl;
  return parts;
}

/// Closed-form KL(N(mu, sigma^2) || N(1, prior_sigma^2)); the per-channel term
/// the ScaleVI layer sums.
inline double gaussian_kl_to_prior(double mu, double sigma, double prior_sigma) {
  return std::log(prior_sigma / sigma) +
         (sigma * sigma + (mu - 1.0) * (mu - 1.0)) / (2.0 * prior_sigma * prior_sigma) - 0.5;
}

} // namespace cimlab::bayes
