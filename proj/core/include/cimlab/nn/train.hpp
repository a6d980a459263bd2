#pragma once

// Mini-batch training loop with SGD/Adam, optional variation-aware weight
// noise, optional ELBO regularization for scale-VI layers, and per-sample
// difficulty scores (the approximate-gradient ranking signal). Fully
// deterministic given the model seed: batch order, dropout masks and noise
// draws all come from derived streams.

#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "cimlab/nn/loss.hpp"
#include "cimlab/nn/model.hpp"

namespace cimlab::nn {

enum class Optimizer { SGD, Adam };

struct NoiseSpec {
  double sigma_train = 0.0; // multiplicative lognormal std-dev on weights, fresh per batch
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.01;
  Optimizer optimizer = Optimizer::SGD;
  bool binary_weights = false; // consumed by the model builders, recorded here for provenance
  std::optional<NoiseSpec> noise_spec;
  LossKind loss = LossKind::CrossEntropy;
  double vi_beta = -1.0; // <0: defaults to 1/num_batches when ScaleVI layers exist
  bool shuffle = true;

  void validate() const {
    require(learning_rate > 0, "train: learning_rate must be > 0");
    require(batch_size >= 1, "train: batch_size must be >= 1");
    require(epochs >= 0, "train: epochs must be >= 0");
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  /// Per-sample score accumulated over all epochs:
  /// sum_epochs || softmax(z_i) - onehot(y_i) ||_2 (last-layer gradient proxy).
  std::vector<double> sample_scores;
  u64 noise_batches = 0;

  bool empty() const { return epoch_loss.empty(); }
};

class TrainDiverged : public Error {
public:
  TrainDiverged(int last_finite_epoch, int batch_index)
      : Error("training diverged: non-finite loss at batch " + std::to_string(batch_index) +
              ", last finite epoch " + std::to_string(last_finite_epoch)),
        last_finite_epoch(last_finite_epoch), batch_index(batch_index) {}
  int last_finite_epoch;
  int batch_index;
};

template <typename T>
struct BatchEval {
  double loss = 0;
  Tensor<T> grad;
  std::vector<double> sample_scores; // one per batch row
  int correct = 0;
};

/// out: model output for the batch; labels: batch labels. Returns loss value,
/// gradient at the output, per-sample scores and the correct-prediction count.
template <typename T>
using BatchLossFn = std::function<BatchEval<T>(const Tensor<T>& out, const std::vector<int>& labels)>;

template <typename T>
BatchEval<T> default_batch_loss(const Tensor<T>& out, const std::vector<int>& labels,
                                LossKind kind) {
  BatchEval<T> ev;
  const int b = out.dim(0), c = out.dim(1);
  if (kind == LossKind::CrossEntropy) {
    auto lr = cross_entropy(out, labels);
    ev.loss = lr.value;
    ev.grad = std::move(lr.grad);
  } else {
    auto lr = mse(out, onehot<T>(labels, c));
    ev.loss = lr.value;
    ev.grad = std::move(lr.grad);
  }
  ev.sample_scores.resize(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    double s = 0;
    for (int j = 0; j < c; ++j) {
      double d = static_cast<double>(out.at2(i, j)) - (j == labels[i] ? 1.0 : 0.0);
      s += d * d;
    }
    ev.sample_scores[static_cast<size_t>(i)] = std::sqrt(s);
    ev.correct += argmax_row(out, i) == labels[i];
  }
  return ev;
}

namespace detail {

/// Multiplies every dense/conv weight by exp(sigma * n), n ~ N(0,1). Biases
/// and normalization parameters stay digital and untouched. Returns the
/// stashed originals for restore.
template <typename T>
std::vector<Tensor<T>> perturb_weights(Model<T>& m, double sigma, Rng& rng) {
  std::vector<Tensor<T>> stash;
  for (auto& l : m.layers) {
    Tensor<T>* w = nullptr;
    if (auto* d = dynamic_cast<Dense<T>*>(l.get())) w = &d->weight();
    if (auto* c = dynamic_cast<Conv2d<T>*>(l.get())) w = &c->weight();
    if (!w) continue;
    stash.push_back(*w);
    for (std::int64_t i = 0; i < w->numel(); ++i)
      (*w)[i] *= static_cast<T>(std::exp(sigma * rng.normal()));
  }
  return stash;
}

template <typename T>
void restore_weights(Model<T>& m, const std::vector<Tensor<T>>& stash) {
  size_t k = 0;
  for (auto& l : m.layers) {
    Tensor<T>* w = nullptr;
    if (auto* d = dynamic_cast<Dense<T>*>(l.get())) w = &d->weight();
    if (auto* c = dynamic_cast<Conv2d<T>*>(l.get())) w = &c->weight();
    if (!w) continue;
    *w = stash[k++];
  }
}

template <typename T>
struct AdamState {
  Tensor<T> m, v;
};

} // namespace detail

/// Core loop. `loss_fn` defaults to CE/MSE per cfg.loss. Throws TrainDiverged
/// on a non-finite batch loss.
template <typename T>
TrainLog train(Model<T>& model, const Tensor<T>& X, const std::vector<int>& labels,
               const TrainConfig& cfg, BatchLossFn<T> loss_fn = nullptr) {
  cfg.validate();
  require(X.rank() >= 1 && X.dim(0) >= 1, "train: dataset is empty");
  const int n = X.dim(0);
  require(static_cast<int>(labels.size()) == n, "train: label count mismatch");

  TrainLog log;
  log.sample_scores.assign(static_cast<size_t>(n), 0.0);
  if (cfg.epochs == 0) return log;

  const int num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  auto vi_layers = model.template layers_of<ScaleVI<T>>();
  const double beta =
      vi_layers.empty() ? 0.0 : (cfg.vi_beta < 0 ? 1.0 / num_batches : cfg.vi_beta);

  // Adam slots keyed by (layer, param index).
  std::unordered_map<std::int64_t, detail::AdamState<T>> adam;
  std::int64_t adam_t = 0;

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  int last_finite_epoch = -1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      Rng shuffle_rng(derive_stream(model.seed, 0x5A, static_cast<u64>(epoch)));
      for (int i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(shuffle_rng.below(static_cast<u64>(i) + 1))]);
    }

    double epoch_loss = 0;
    int correct = 0;
    for (int b = 0; b < num_batches; ++b) {
      const int lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<int> idx(order.begin() + lo, order.begin() + hi);
      Tensor<T> bx = gather_rows(X, idx);
      std::vector<int> by(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) by[i] = labels[static_cast<size_t>(idx[i])];

      model.seed_sources(model.seed, derive_stream(0x7E, static_cast<u64>(epoch), static_cast<u64>(b)));

      std::vector<Tensor<T>> stash;
      const bool noisy = cfg.noise_spec && cfg.noise_spec->sigma_train > 0;
      if (noisy) {
        Rng nrng(derive_stream(model.seed, 0xA0, static_cast<u64>(epoch), static_cast<u64>(b)));
        stash = detail::perturb_weights(model, cfg.noise_spec->sigma_train, nrng);
        ++log.noise_batches;
      }

      ForwardTrace<T> trace;
      Tensor<T> out;
      try {
        out = forward(model, bx, Mode::Train, static_cast<MatmulBackend<T>*>(nullptr), &trace,
                      {.update_stats = true});
      } catch (const Error& e) {
        if (std::string(e.what()).find("non-finite") == std::string::npos) throw;
        if (noisy) detail::restore_weights(model, stash);
        throw TrainDiverged(last_finite_epoch, b);
      }
      BatchEval<T> ev =
          loss_fn ? loss_fn(out, by) : default_batch_loss(out, by, cfg.loss);

      double batch_loss = ev.loss;
      if (beta > 0)
        for (auto* vi : vi_layers) batch_loss += beta * vi->kl();

      if (!std::isfinite(batch_loss)) {
        if (noisy) detail::restore_weights(model, stash);
        throw TrainDiverged(last_finite_epoch, b);
      }

      Gradients<T> grads = backward(model, trace, ev.grad);
      if (noisy) detail::restore_weights(model, stash);

      // ELBO: add beta * dKL/d(mu,rho) straight onto the VI layers' grads.
      if (beta > 0) {
        for (int li = 0; li < model.size(); ++li) {
          if (auto* vi = dynamic_cast<ScaleVI<T>*>(model.layers[static_cast<size_t>(li)].get())) {
            auto& pg = grads.param[static_cast<size_t>(li)];
            vi->accumulate_kl_grads(pg[0], pg[1], beta);
          }
        }
      }

      ++adam_t;
      for (int li = 0; li < model.size(); ++li) {
        auto params = model.layers[static_cast<size_t>(li)]->parameters();
        auto& pg = grads.param[static_cast<size_t>(li)];
        for (size_t pi = 0; pi < params.size(); ++pi) {
          Tensor<T>& w = *params[pi].value;
          const Tensor<T>& g = pg[pi];
          if (cfg.optimizer == Optimizer::SGD) {
            for (std::int64_t i = 0; i < w.numel(); ++i)
              w[i] -= static_cast<T>(cfg.learning_rate) * g[i];
          } else {
            auto& st = adam[static_cast<std::int64_t>(li) * 64 + static_cast<std::int64_t>(pi)];
            if (st.m.empty()) {
              st.m = Tensor<T>(w.shape());
              st.v = Tensor<T>(w.shape());
            }
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, double(adam_t));
            const double bc2 = 1.0 - std::pow(b2, double(adam_t));
            for (std::int64_t i = 0; i < w.numel(); ++i) {
              st.m[i] = static_cast<T>(b1 * st.m[i] + (1 - b1) * g[i]);
              st.v[i] = static_cast<T>(b2 * st.v[i] + (1 - b2) * double(g[i]) * double(g[i]));
              double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
              w[i] -= static_cast<T>(cfg.learning_rate * mhat / (std::sqrt(vhat) + eps));
            }
          }
        }
      }

      epoch_loss += batch_loss * static_cast<double>(idx.size());
      correct += ev.correct;
      for (size_t i = 0; i < idx.size(); ++i)
        log.sample_scores[static_cast<size_t>(idx[i])] += ev.sample_scores[i];
    }

    log.epoch_loss.push_back(epoch_loss / n);
    log.epoch_accuracy.push_back(double(correct) / n);
    last_finite_epoch = epoch;
  }
  return log;
}

} // namespace cimlab::nn
