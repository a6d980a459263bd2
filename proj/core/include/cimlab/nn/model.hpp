#pragma once

// Model = ordered layer stack + registered RNG sources. forward/backward walk
// the stack; backward supports gradient injection at arbitrary layer outputs,
// which the one-shot test generator uses to optimize inputs against hidden
// pre-activation statistics.

#include <memory>
#include <utility>
#include <vector>

#include "cimlab/nn/layers.hpp"

namespace cimlab::nn {

template <typename T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layer;
  std::vector<Tensor<T>> output; // output of every layer, in order
};

template <typename T>
class Model {
public:
  std::vector<std::unique_ptr<Layer<T>>> layers;
  Mode mode = Mode::Train;
  u64 seed = 1;
  std::vector<RngSource> sources;

  Model() = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model& o) { *this = o; }
  Model& operator=(const Model& o) {
    if (this == &o) return *this;
    layers.clear();
    layers.reserve(o.layers.size());
    for (const auto& l : o.layers) layers.push_back(l->clone());
    mode = o.mode;
    seed = o.seed;
    sources = o.sources;
    return *this;
  }

  template <typename L, typename... Args>
  L* add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers.push_back(std::move(layer));
    return raw;
  }

  /// Registers a randomness source. A model may hold at most one Scale
  /// source: scale dropout is a single time-multiplexed module.
  int add_source(SourceKind kind) {
    if (kind == SourceKind::Scale) {
      for (const auto& s : sources)
        require(s.kind != SourceKind::Scale,
                "scale dropout allows exactly one RNG source per model");
    }
    sources.push_back(RngSource{kind, Rng(0)});
    return static_cast<int>(sources.size()) - 1;
  }

  /// Reseeds every source with a stream derived from (seed, sample, source).
  void seed_sources(u64 base_seed, u64 sample) {
    for (size_t i = 0; i < sources.size(); ++i)
      sources[i].rng.reseed(derive_stream(base_seed, sample, 0x50u, static_cast<u64>(i)));
  }

  void reset_draw_counters() {
    for (auto& s : sources) s.reset_counters();
  }

  int size() const { return static_cast<int>(layers.size()); }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) n += l->param_count();
    return n;
  }

  bool has_stochastic_layers() const {
    for (const auto& l : layers) {
      switch (l->kind()) {
        case LayerKind::NeuronDropout:
        case LayerKind::SpatialDropout:
        case LayerKind::ScaleDropout:
        case LayerKind::ScaleVI:
        case LayerKind::InvertedNormAffine:
          return true;
        default:
          break;
      }
    }
    return false;
  }

  template <typename L>
  std::vector<L*> layers_of() {
    std::vector<L*> out;
    for (auto& l : layers)
      if (auto* p = dynamic_cast<L*>(l.get())) out.push_back(p);
    return out;
  }
};

struct ForwardOptions {
  bool update_stats = false;
};

template <typename T>
Tensor<T> forward(Model<T>& m, const Tensor<T>& x, Mode mode, MatmulBackend<T>* backend = nullptr,
                  ForwardTrace<T>* trace = nullptr, ForwardOptions opts = {}) {
  ExecCtx<T> ctx;
  ctx.mode = mode;
  ctx.update_stats = opts.update_stats;
  ctx.backend = backend;
  ctx.sources = &m.sources;
  if (trace) {
    trace->layer.assign(static_cast<size_t>(m.size()), LayerTrace<T>{});
    trace->output.assign(static_cast<size_t>(m.size()), Tensor<T>{});
  }
  Tensor<T> cur = x;
  for (int i = 0; i < m.size(); ++i) {
    ctx.layer_index = i;
    try {
      cur = m.layers[static_cast<size_t>(i)]->forward(
          cur, ctx, trace ? &trace->layer[static_cast<size_t>(i)] : nullptr);
    } catch (const Error& e) {
      fail("layer " + std::to_string(i) + " (" + m.layers[static_cast<size_t>(i)]->describe() +
           "): " + e.what());
    }
    if (trace) trace->output[static_cast<size_t>(i)] = cur;
  }
  require(cur.all_finite(), "forward produced non-finite values");
  return cur;
}

template <typename T>
Tensor<T> forward(Model<T>& m, const Tensor<T>& x) {
  return forward(m, x, m.mode);
}

template <typename T>
struct Gradients {
  std::vector<std::vector<Tensor<T>>> param; // [layer][param], parameters() order
  Tensor<T> input;
};

/// Reverse pass with gradient injection: `inject` lists (layer index, dL/d
/// output-of-that-layer) seeds that are accumulated as the walk passes each
/// position. A plain loss backward is a single injection at the last layer.
template <typename T>
Gradients<T> backward_injected(Model<T>& m, const ForwardTrace<T>& trace,
                               const std::vector<std::pair<int, Tensor<T>>>& inject) {
  require(!m.layers.empty(), "backward: empty model");
  require(!inject.empty(), "backward: nothing to differentiate");
  Gradients<T> g;
  g.param.resize(static_cast<size_t>(m.size()));

  Tensor<T> dy(trace.output.back().shape());
  for (int i = m.size() - 1; i >= 0; --i) {
    if (!dy.same_shape(trace.output[static_cast<size_t>(i)]))
      dy = Tensor<T>(trace.output[static_cast<size_t>(i)].shape());
    for (const auto& [idx, grad] : inject)
      if (idx == i) {
        require(grad.same_shape(dy), "backward: injected gradient shape mismatch at layer " +
                                         std::to_string(i));
        for (std::int64_t k = 0; k < dy.numel(); ++k) dy[k] += grad[k];
      }
    dy = m.layers[static_cast<size_t>(i)]->backward(dy, trace.layer[static_cast<size_t>(i)],
                                                    g.param[static_cast<size_t>(i)]);
  }
  g.input = std::move(dy);
  return g;
}

template <typename T>
Gradients<T> backward(Model<T>& m, const ForwardTrace<T>& trace, const Tensor<T>& dout) {
  return backward_injected(m, trace, {{m.size() - 1, dout}});
}

} // namespace cimlab::nn
