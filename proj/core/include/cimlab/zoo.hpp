#pragma once

// Reference architectures. The lab fixes its own desk-scale nets so every
// experiment and acceptance number is concrete:
//   mlp-s:  dense 128-64 head with batch-norm, the default classifier
//   conv-s: two 3x3 conv blocks + dense head, for image-shaped inputs
//   mlp-b:  sign-activation net whose hidden layers suit binarized
//           partial-sum readout
//   scale_chain: depth-L scale-dropout stack for the single-source contract

#include "cimlab/bayes/bayes.hpp"
#include "cimlab/nn/model.hpp"

namespace cimlab::zoo {

enum class BayesVariant { None, Neuron, Spatial, Scale, VI, InvNorm };

struct BayesOpts {
  BayesVariant variant = BayesVariant::None;
  double p = 0.2;         // neuron/spatial/affine dropout probability
  double p_min = 0.1;     // adaptive scale-dropout range
  double p_max = 0.3;
  bool adaptive = true;
  double prior_sigma = 0.25;
  double delta = 0.1;     // affine perturbation strength
};

namespace detail {

template <typename T>
void add_norm(nn::Model<T>& m, int channels, const BayesOpts& b) {
  if (b.variant == BayesVariant::InvNorm) {
    int src = m.add_source(SourceKind::Affine);
    m.template add<nn::InvertedNormAffine<T>>(channels, b.delta, b.p, src);
  } else {
    m.template add<nn::BatchNorm<T>>(channels);
  }
}

template <typename T>
void add_scale(nn::Model<T>& m, int channels, const BayesOpts& b, int scale_src) {
  if (b.variant == BayesVariant::Scale) {
    m.template add<nn::ScaleDropout<T>>(channels, b.p_min, scale_src);
  } else if (b.variant == BayesVariant::VI) {
    int src = m.add_source(SourceKind::ScaleVI);
    m.template add<nn::ScaleVI<T>>(channels, b.prior_sigma, src);
  }
}

template <typename T>
void add_feature_dropout(nn::Model<T>& m, const BayesOpts& b) {
  if (b.variant == BayesVariant::Neuron) {
    int src = m.add_source(SourceKind::Neuron);
    m.template add<nn::NeuronDropout<T>>(b.p, src);
  } else if (b.variant == BayesVariant::Spatial) {
    int src = m.add_source(SourceKind::Spatial);
    m.template add<nn::SpatialDropout<T>>(b.p, src);
  }
}

} // namespace detail

/// input-128-64-classes with batch-norm; hidden dense layers binarized when
/// `binary` is set, the classifier head stays real-valued.
inline nn::Model<float> mlp_s(int input_dim, int classes, u64 seed, bool binary = false,
                              BayesOpts bayes = {}) {
  nn::Model<float> m;
  m.seed = seed;
  Rng init(derive_stream(seed, 0x11));
  int scale_src = -1;
  if (bayes.variant == BayesVariant::Scale) scale_src = m.add_source(SourceKind::Scale);

  m.add<nn::Dense<float>>(input_dim, 128, true, binary, init);
  detail::add_norm(m, 128, bayes);
  detail::add_scale(m, 128, bayes, scale_src);
  m.add<nn::ReLU<float>>();
  detail::add_feature_dropout(m, bayes);

  m.add<nn::Dense<float>>(128, 64, true, binary, init);
  detail::add_norm(m, 64, bayes);
  detail::add_scale(m, 64, bayes, scale_src);
  m.add<nn::ReLU<float>>();
  detail::add_feature_dropout(m, bayes);

  m.add<nn::Dense<float>>(64, classes, true, false, init);
  m.add<nn::Softmax<float>>();

  if (bayes.variant == BayesVariant::Scale && bayes.adaptive)
    bayes::adaptive_rates(m, bayes.p_min, bayes.p_max);
  return m;
}

/// Two conv blocks (8, 16 maps) + dense head for [B,C,H,W] inputs.
inline nn::Model<float> conv_s(int in_channels, int height, int width, int classes, u64 seed,
                               bool binary = false, BayesOpts bayes = {}) {
  nn::Model<float> m;
  m.seed = seed;
  Rng init(derive_stream(seed, 0x12));
  int scale_src = -1;
  if (bayes.variant == BayesVariant::Scale) scale_src = m.add_source(SourceKind::Scale);

  m.add<nn::Conv2d<float>>(in_channels, 8, 3, true, binary, init);
  detail::add_norm(m, 8, bayes);
  detail::add_scale(m, 8, bayes, scale_src);
  m.add<nn::ReLU<float>>();
  detail::add_feature_dropout(m, bayes);

  m.add<nn::Conv2d<float>>(8, 16, 3, true, binary, init);
  detail::add_norm(m, 16, bayes);
  detail::add_scale(m, 16, bayes, scale_src);
  m.add<nn::ReLU<float>>();
  detail::add_feature_dropout(m, bayes);

  m.add<nn::Dense<float>>(16 * height * width, 64, true, false, init);
  detail::add_norm(m, 64, bayes);
  m.add<nn::ReLU<float>>();
  m.add<nn::Dense<float>>(64, classes, true, false, init);
  m.add<nn::Softmax<float>>();

  if (bayes.variant == BayesVariant::Scale && bayes.adaptive)
    bayes::adaptive_rates(m, bayes.p_min, bayes.p_max);
  return m;
}

/// mlp-s body with the classifier head widened by `aux_units` fingerprint
/// outputs and no softmax; task probabilities come from the first `classes`
/// logits, the trailing units carry the fingerprint.
inline nn::Model<float> mlp_s_aux(int input_dim, int classes, int aux_units, u64 seed) {
  nn::Model<float> m;
  m.seed = seed;
  Rng init(derive_stream(seed, 0x15));
  m.add<nn::Dense<float>>(input_dim, 128, true, false, init);
  m.add<nn::BatchNorm<float>>(128);
  m.add<nn::ReLU<float>>();
  m.add<nn::Dense<float>>(128, 64, true, false, init);
  m.add<nn::BatchNorm<float>>(64);
  m.add<nn::ReLU<float>>();
  m.add<nn::Dense<float>>(64, classes + aux_units, true, false, init);
  return m;
}

/// Sign-activation net: hidden dense layers feed Sign directly, which is the
/// shape binarized partial-sum readout expects.
inline nn::Model<float> mlp_b(int input_dim, int classes, u64 seed, int hidden = 64) {
  nn::Model<float> m;
  m.seed = seed;
  Rng init(derive_stream(seed, 0x13));
  m.add<nn::Dense<float>>(input_dim, hidden, true, false, init);
  m.add<nn::SignAct<float>>();
  m.add<nn::Dense<float>>(hidden, hidden, true, false, init);
  m.add<nn::SignAct<float>>();
  m.add<nn::Dense<float>>(hidden, classes, true, false, init);
  m.add<nn::Softmax<float>>();
  return m;
}

/// depth scale-dropout blocks sharing the single Scale source.
inline nn::Model<float> scale_chain(int input_dim, int classes, int depth, u64 seed,
                                    double p = 0.2, int hidden = 16) {
  nn::Model<float> m;
  m.seed = seed;
  Rng init(derive_stream(seed, 0x14));
  int scale_src = m.add_source(SourceKind::Scale);
  int prev = input_dim;
  for (int l = 0; l < depth; ++l) {
    m.add<nn::Dense<float>>(prev, hidden, true, false, init);
    m.add<nn::ScaleDropout<float>>(hidden, p, scale_src);
    m.add<nn::ReLU<float>>();
    prev = hidden;
  }
  m.add<nn::Dense<float>>(prev, classes, true, false, init);
  m.add<nn::Softmax<float>>();
  return m;
}

} // namespace cimlab::zoo
