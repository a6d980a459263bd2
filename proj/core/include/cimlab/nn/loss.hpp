#pragma once

#include <cmath>
#include <vector>

#include "cimlab/tensor.hpp"

namespace cimlab::nn {

enum class LossKind { CrossEntropy, MSE };

template <typename T>
struct LossResult {
  double value = 0;
  Tensor<T> grad; // d loss / d model-output
};

/// Cross entropy on probability rows (the model ends in Softmax); mean over
/// the batch. Probabilities are floored at 1e-12 inside the log.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
  require(probs.rank() == 2, "cross_entropy: expected [B,C]");
  const int b = probs.dim(0), c = probs.dim(1);
  require(static_cast<int>(labels.size()) == b, "cross_entropy: label count mismatch");
  LossResult<T> r;
  r.grad = Tensor<T>(probs.shape());
  double total = 0;
  for (int i = 0; i < b; ++i) {
    require(labels[i] >= 0 && labels[i] < c, "cross_entropy: label out of range");
    double p = std::max(static_cast<double>(probs.at2(i, labels[i])), 1e-12);
    total -= std::log(p);
    r.grad.at2(i, labels[i]) = static_cast<T>(-1.0 / (p * b));
  }
  r.value = total / b;
  return r;
}

/// Sum of squared errors over features, mean over the batch. For a single
/// sample the output gradient is exactly 2*(o - t).
template <typename T>
LossResult<T> mse(const Tensor<T>& out, const Tensor<T>& target) {
  require(out.same_shape(target), "mse: shape mismatch");
  const int b = out.dim(0);
  LossResult<T> r;
  r.grad = Tensor<T>(out.shape());
  double total = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double d = static_cast<double>(out[i]) - static_cast<double>(target[i]);
    total += d * d;
    r.grad[i] = static_cast<T>(2.0 * d / b);
  }
  r.value = total / b;
  return r;
}

template <typename T>
Tensor<T> onehot(const std::vector<int>& labels, int classes) {
  Tensor<T> t({static_cast<int>(labels.size()), classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes, "onehot: label out of range");
    t.at2(static_cast<int>(i), labels[i]) = T(1);
  }
  return t;
}

template <typename T>
int argmax_row(const Tensor<T>& t, int row) {
  const int c = t.dim(1);
  int best = 0;
  for (int j = 1; j < c; ++j)
    if (t.at2(row, j) > t.at2(row, best)) best = j;
  return best;
}

template <typename T>
double accuracy(const Tensor<T>& probs, const std::vector<int>& labels) {
  const int b = probs.dim(0);
  int correct = 0;
  for (int i = 0; i < b; ++i) correct += argmax_row(probs, i) == labels[i];
  return b == 0 ? 0.0 : double(correct) / b;
}

} // namespace cimlab::nn
