#include "cimlab/data/datasets.hpp"

#include <algorithm>
#include <cmath>

#include "cimlab/rng.hpp"

namespace cimlab::data {

namespace {
constexpr double kTau = 6.283185307179586;
constexpr double kCenterRadius = 4.0;

void shuffle_in_place(Dataset& ds, u64 seed) {
  const int n = ds.size();
  const std::int64_t row = ds.x.numel() / n;
  Rng rng(derive_stream(seed, 0x5D));
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<u64>(i) + 1));
    for (std::int64_t k = 0; k < row; ++k)
      std::swap(ds.x[static_cast<std::int64_t>(i) * row + k],
                ds.x[static_cast<std::int64_t>(j) * row + k]);
    std::swap(ds.labels[static_cast<size_t>(i)], ds.labels[static_cast<size_t>(j)]);
  }
}
} // namespace

Dataset blobs(int n, int classes, double spread, u64 seed, double shift_x, double shift_y) {
  require(n >= classes && classes >= 2, "blobs: need n >= classes >= 2");
  Dataset ds;
  ds.classes = classes;
  ds.x = Tensor<float>({n, 2});
  ds.labels.resize(static_cast<size_t>(n));
  Rng rng(derive_stream(seed, 0xB1));
  for (int i = 0; i < n; ++i) {
    int c = i % classes;
    double angle = kTau * c / classes;
    double cx = kCenterRadius * std::cos(angle), cy = kCenterRadius * std::sin(angle);
    ds.x.at2(i, 0) = static_cast<float>(cx + spread * rng.normal() + shift_x);
    ds.x.at2(i, 1) = static_cast<float>(cy + spread * rng.normal() + shift_y);
    ds.labels[static_cast<size_t>(i)] = c;
  }
  shuffle_in_place(ds, seed);
  return ds;
}

Dataset moons(int n, double noise, u64 seed) {
  require(n >= 2, "moons: need n >= 2");
  Dataset ds;
  ds.classes = 2;
  ds.x = Tensor<float>({n, 2});
  ds.labels.resize(static_cast<size_t>(n));
  Rng rng(derive_stream(seed, 0xB2));
  for (int i = 0; i < n; ++i) {
    int c = i % 2;
    double t = rng.uniform() * kTau / 2.0;
    double px, py;
    if (c == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    ds.x.at2(i, 0) = static_cast<float>(px + noise * rng.normal());
    ds.x.at2(i, 1) = static_cast<float>(py + noise * rng.normal());
    ds.labels[static_cast<size_t>(i)] = c;
  }
  shuffle_in_place(ds, seed);
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, u64 seed) {
  require(train_fraction > 0 && train_fraction < 1, "split: fraction must be in (0,1)");
  const int n = ds.size();
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_stream(seed, 0x51));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(rng.below(static_cast<u64>(i) + 1))]);
  int n_train = std::max(1, static_cast<int>(n * train_fraction));
  n_train = std::min(n_train, n - 1);
  std::vector<int> tr(order.begin(), order.begin() + n_train);
  std::vector<int> te(order.begin() + n_train, order.end());

  auto take = [&](const std::vector<int>& idx) {
    Dataset out;
    out.classes = ds.classes;
    out.x = gather_rows(ds.x, idx);
    out.labels.reserve(idx.size());
    for (int i : idx) out.labels.push_back(ds.labels[static_cast<size_t>(i)]);
    return out;
  };
  return {take(tr), take(te)};
}

Tensor<float> head_inputs(const Dataset& ds, int count) {
  require(count >= 1 && count <= ds.size(), "head_inputs: bad count");
  std::vector<int> idx(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = i;
  return gather_rows(ds.x, idx);
}

Tensor<float> rotate90(const Tensor<float>& images) {
  require(images.rank() == 4, "rotate90: expected [N,C,H,W]");
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor<float> out({n, c, w, h});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          // (y, x) -> (x, h-1-y)
          out[((static_cast<std::int64_t>(i) * c + ch) * w + x) * h + (h - 1 - y)] =
              images[((static_cast<std::int64_t>(i) * c + ch) * h + y) * w + x];
        }
  return out;
}

} // namespace cimlab::data
