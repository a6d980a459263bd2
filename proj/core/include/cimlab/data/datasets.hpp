#pragma once

// Synthetic desk-scale datasets plus IDX ingestion. Generation is seeded and
// platform-independent; identical parameters always reproduce identical
// datasets.

#include <string>
#include <utility>
#include <vector>

#include "cimlab/tensor.hpp"

namespace cimlab::data {

struct Dataset {
  Tensor<float> x;         // [N, ...]
  std::vector<int> labels; // [N]
  int classes = 0;

  int size() const { return x.empty() ? 0 : x.dim(0); }
};

/// Gaussian blobs: class centers evenly spaced on a circle of radius 4,
/// isotropic spread, balanced classes, seeded shuffle. `shift` translates the
/// whole cloud (the OOD variant).
Dataset blobs(int n, int classes, double spread, u64 seed, double shift_x = 0.0,
              double shift_y = 0.0);

/// Two interleaved half-moons with Gaussian jitter.
Dataset moons(int n, double noise, u64 seed);

/// Deterministic train/test split (seeded permutation, then prefix/suffix).
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, u64 seed);

/// First `count` rows as an unlabeled calibration batch.
Tensor<float> head_inputs(const Dataset& ds, int count);

/// Rotates image tensors [N,C,H,W] by 90 degrees (the IDX OOD variant).
Tensor<float> rotate90(const Tensor<float>& images);

/// IDX image/label pair loader. Pixels scaled to [0,1]; shapes [N,1,H,W] and
/// [N]. Fails with the byte offset on malformed input and names both counts
/// on an image/label mismatch.
std::pair<Tensor<float>, std::vector<int>> load_idx(const std::string& images_path,
                                                    const std::string& labels_path);

} // namespace cimlab::data
