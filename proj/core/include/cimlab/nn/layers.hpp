#pragma once

// Layer zoo: dense / conv / batch-norm / activations plus the stochastic
// layers (neuron, spatial and scale dropout, scale-vector VI, inverted
// normalization with affine dropout). Each layer implements an explicit
// forward/backward pair; forward records what backward needs in a trace so
// evaluation stays stateless.
//
// Matrix products go through a MatmulBackend hook. The digital backend is the
// plain product; the crossbar backend (cimlab/xbar) routes the same call
// through programmed conductance tiles, which is how faulty inference reuses
// this exact forward path.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cimlab/common.hpp"
#include "cimlab/rng.hpp"
#include "cimlab/tensor.hpp"

namespace cimlab::nn {

enum class LayerKind {
  Dense,
  Conv2d,
  BatchNorm,
  ReLU,
  Sign,
  Softmax,
  NeuronDropout,
  SpatialDropout,
  ScaleDropout,
  ScaleVI,
  InvertedNormAffine,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Sign: return "sign";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::NeuronDropout: return "neuron_dropout";
    case LayerKind::SpatialDropout: return "spatial_dropout";
    case LayerKind::ScaleDropout: return "scale_dropout";
    case LayerKind::ScaleVI: return "scale_vi";
    case LayerKind::InvertedNormAffine: return "inverted_norm_affine";
  }
  return "?";
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* value;
};

template <typename T>
class MatmulBackend {
public:
  virtual ~MatmulBackend() = default;
  /// rows: [N, in], w_eff: [out, in]. Returns [N, out], bias excluded.
  virtual Tensor<T> matmul(int layer_index, const Tensor<T>& rows, const Tensor<T>& w_eff) = 0;
  /// True when the backend consumes the bias itself (binarized partial sums).
  virtual bool suppress_bias(int /*layer_index*/) const { return false; }
};

template <typename T>
Tensor<T> digital_matmul(const Tensor<T>& rows, const Tensor<T>& w) {
  const int n = rows.dim(0), in = rows.dim(1);
  const int out = w.dim(0);
  require(w.dim(1) == in, "matmul: inner dimensions disagree");
  Tensor<T> y({n, out});
  for (int r = 0; r < n; ++r) {
    const T* xr = rows.data() + static_cast<std::int64_t>(r) * in;
    for (int o = 0; o < out; ++o) {
      const T* wr = w.data() + static_cast<std::int64_t>(o) * in;
      T acc = T(0);
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y.at2(r, o) = acc;
    }
  }
  return y;
}

template <typename T>
struct ExecCtx {
  Mode mode = Mode::Eval;
  bool update_stats = false;
  MatmulBackend<T>* backend = nullptr;
  std::vector<RngSource>* sources = nullptr;
  int layer_index = -1;

  bool stochastic() const { return mode != Mode::Eval; }
  RngSource& source(int id) const {
    require(sources && id >= 0 && id < static_cast<int>(sources->size()),
            "layer references an unregistered RNG source");
    return (*sources)[static_cast<size_t>(id)];
  }
};

template <typename T>
struct LayerTrace {
  std::vector<Tensor<T>> saved;
  std::vector<int> in_shape;
  std::vector<int> flags;
};

template <typename T>
class Layer {
public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual std::string describe() const { return kind_name(kind()); }
  virtual Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) = 0;
  /// Maps dL/dy to dL/dx and appends one gradient tensor per parameter, in
  /// parameters() order. Requires the trace recorded by the matching forward.
  virtual Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                             std::vector<Tensor<T>>& pgrads) = 0;
  virtual std::vector<NamedParam<T>> parameters() { return {}; }
  virtual std::vector<NamedParam<T>> statistics() { return {}; }
  virtual std::int64_t param_count() const { return 0; }
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

// ---------------------------------------------------------------------------
// helpers

/// Forward value of the straight-through binarizer: sign(w) with sign(0)=+1.
template <typename T>
Tensor<T> binarize_ste(const Tensor<T>& w) {
  Tensor<T> y = w;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = w[i] < T(0) ? T(-1) : T(1);
  return y;
}

/// Straight-through gradient mask: 1 where |w| <= 1, else 0.
template <typename T>
Tensor<T> binarize_ste_mask(const Tensor<T>& w) {
  Tensor<T> m = w;
  for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = std::abs(w[i]) <= T(1) ? T(1) : T(0);
  return m;
}

template <typename T>
T softplus(T x) {
  return x > T(30) ? x : static_cast<T>(std::log1p(std::exp(static_cast<double>(x))));
}

template <typename T>
T sigmoid(T x) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

/// Channel decomposition for rank >= 2 tensors, channel axis 1:
/// [B, C, ...] -> (outer=B, channels=C, inner=numel/(B*C)).
struct ChannelDims {
  int outer;
  int channels;
  std::int64_t inner;
};

template <typename T>
ChannelDims channel_dims(const Tensor<T>& x) {
  require(x.rank() >= 2, "expected a batched tensor of rank >= 2, got " + x.shape_str());
  ChannelDims d;
  d.outer = x.dim(0);
  d.channels = x.dim(1);
  d.inner = x.numel() / (static_cast<std::int64_t>(d.outer) * d.channels);
  return d;
}

/// One bernoulli draw decides whether the whole per-channel scale vector is
/// replaced by the neutral all-ones vector. Returns (effective vector,
/// dropped flag); consumes exactly one draw from the source.
template <typename T>
std::pair<Tensor<T>, bool> scale_dropout_step(const Tensor<T>& scales, double p, RngSource& src) {
  bool dropped = src.draw_bernoulli(p);
  if (dropped) return {Tensor<T>::ones(scales.shape()), true};
  return {scales, false};
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
class Dense : public Layer<T> {
public:
  Dense(int in, int out, bool bias, bool binary, Rng& init)
      : in_(in), out_(out), use_bias_(bias), binary_(binary), w_({out, in}), b_({out}) {
    // Kaiming-style fan-in init.
    T s = static_cast<T>(std::sqrt(2.0 / in));
    for (std::int64_t i = 0; i < w_.numel(); ++i) w_[i] = static_cast<T>(init.normal()) * s;
  }

  LayerKind kind() const override { return LayerKind::Dense; }
  std::string describe() const override {
    return "dense(" + std::to_string(in_) + "->" + std::to_string(out_) +
           (binary_ ? ",binary" : "") + ")";
  }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    require(x.numel() % in_ == 0 && x.dim(0) >= 1 && x.numel() / x.dim(0) == in_,
            "dense: input " + x.shape_str() + " does not flatten to width " + std::to_string(in_));
    const int batch = x.dim(0);
    Tensor<T> rows = x.reshaped({batch, in_});
    Tensor<T> w_eff = binary_ ? binarize_ste(w_) : w_;
    Tensor<T> y = ctx.backend ? ctx.backend->matmul(ctx.layer_index, rows, w_eff)
                              : digital_matmul(rows, w_eff);
    if (use_bias_ && !(ctx.backend && ctx.backend->suppress_bias(ctx.layer_index))) {
      for (int r = 0; r < batch; ++r)
        for (int o = 0; o < out_; ++o) y.at2(r, o) += b_[o];
    }
    if (tr) {
      tr->saved = {rows};
      tr->in_shape = x.shape();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& rows = tr.saved[0];
    const int batch = rows.dim(0);
    Tensor<T> dw({out_, in_});
    for (int r = 0; r < batch; ++r)
      for (int o = 0; o < out_; ++o) {
        T g = dy.at2(r, o);
        if (g == T(0)) continue;
        T* dwo = dw.data() + static_cast<std::int64_t>(o) * in_;
        const T* xr = rows.data() + static_cast<std::int64_t>(r) * in_;
        for (int i = 0; i < in_; ++i) dwo[i] += g * xr[i];
      }
    if (binary_) {
      Tensor<T> mask = binarize_ste_mask(w_);
      for (std::int64_t i = 0; i < dw.numel(); ++i) dw[i] *= mask[i];
    }
    Tensor<T> w_eff = binary_ ? binarize_ste(w_) : w_;
    Tensor<T> dx({batch, in_});
    for (int r = 0; r < batch; ++r)
      for (int o = 0; o < out_; ++o) {
        T g = dy.at2(r, o);
        if (g == T(0)) continue;
        const T* wo = w_eff.data() + static_cast<std::int64_t>(o) * in_;
        T* dxr = dx.data() + static_cast<std::int64_t>(r) * in_;
        for (int i = 0; i < in_; ++i) dxr[i] += g * wo[i];
      }
    pgrads.push_back(std::move(dw));
    if (use_bias_) {
      Tensor<T> db({out_});
      for (int r = 0; r < batch; ++r)
        for (int o = 0; o < out_; ++o) db[o] += dy.at2(r, o);
      pgrads.push_back(std::move(db));
    }
    return dx.reshaped(tr.in_shape);
  }

  std::vector<NamedParam<T>> parameters() override {
    std::vector<NamedParam<T>> p{{"weight", &w_}};
    if (use_bias_) p.push_back({"bias", &b_});
    return p;
  }
  std::int64_t param_count() const override { return w_.numel() + (use_bias_ ? b_.numel() : 0); }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  bool binary() const { return binary_; }
  bool has_bias() const { return use_bias_; }
  Tensor<T>& weight() { return w_; }
  const Tensor<T>& weight() const { return w_; }
  Tensor<T>& bias() { return b_; }
  Tensor<T> effective_weight() const { return binary_ ? binarize_ste(w_) : w_; }

private:
  int in_, out_;
  bool use_bias_, binary_;
  Tensor<T> w_, b_;
};

// ---------------------------------------------------------------------------
// Conv2d (stride 1, zero-padded "same", odd kernel)

template <typename T>
class Conv2d : public Layer<T> {
public:
  Conv2d(int in_ch, int out_ch, int ksize, bool bias, bool binary, Rng& init)
      : cin_(in_ch), cout_(out_ch), k_(ksize), use_bias_(bias), binary_(binary),
        w_({out_ch, in_ch * ksize * ksize}), b_({out_ch}) {
    require(ksize % 2 == 1, "conv2d: kernel size must be odd for same padding");
    T s = static_cast<T>(std::sqrt(2.0 / (in_ch * ksize * ksize)));
    for (std::int64_t i = 0; i < w_.numel(); ++i) w_[i] = static_cast<T>(init.normal()) * s;
  }

  LayerKind kind() const override { return LayerKind::Conv2d; }
  std::string describe() const override {
    return "conv2d(" + std::to_string(cin_) + "->" + std::to_string(cout_) + ",k" +
           std::to_string(k_) + (binary_ ? ",binary" : "") + ")";
  }

  Tensor<T> im2col(const Tensor<T>& x) const {
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int pad = k_ / 2, patch = cin_ * k_ * k_;
    Tensor<T> cols({b * h * w, patch});
    std::int64_t row = 0;
    for (int bi = 0; bi < b; ++bi)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox, ++row) {
          T* dst = cols.data() + row * patch;
          std::int64_t col = 0;
          for (int c = 0; c < cin_; ++c)
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx, ++col) {
                int iy = oy + ky - pad, ix = ox + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                dst[col] = x[((static_cast<std::int64_t>(bi) * cin_ + c) * h + iy) * w + ix];
              }
        }
    return cols;
  }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    require(x.rank() == 4 && x.dim(1) == cin_,
            "conv2d: expected [B," + std::to_string(cin_) + ",H,W], got " + x.shape_str());
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor<T> cols = im2col(x);
    Tensor<T> w_eff = binary_ ? binarize_ste(w_) : w_;
    Tensor<T> y2 = ctx.backend ? ctx.backend->matmul(ctx.layer_index, cols, w_eff)
                               : digital_matmul(cols, w_eff);
    const bool add_bias =
        use_bias_ && !(ctx.backend && ctx.backend->suppress_bias(ctx.layer_index));
    Tensor<T> y({b, cout_, h, w});
    std::int64_t row = 0;
    for (int bi = 0; bi < b; ++bi)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox, ++row)
          for (int f = 0; f < cout_; ++f)
            y[((static_cast<std::int64_t>(bi) * cout_ + f) * h + oy) * w + ox] =
                y2.at2(static_cast<int>(row), f) + (add_bias ? b_[f] : T(0));
    if (tr) {
      tr->saved = {cols};
      tr->in_shape = x.shape();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& cols = tr.saved[0];
    const int b = tr.in_shape[0], h = tr.in_shape[2], w = tr.in_shape[3];
    const int pad = k_ / 2, patch = cin_ * k_ * k_;
    const std::int64_t nrows = cols.dim(0);

    // dy as [rows, cout]
    Tensor<T> dy2({static_cast<int>(nrows), cout_});
    std::int64_t row = 0;
    for (int bi = 0; bi < b; ++bi)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox, ++row)
          for (int f = 0; f < cout_; ++f)
            dy2.at2(static_cast<int>(row), f) =
                dy[((static_cast<std::int64_t>(bi) * cout_ + f) * h + oy) * w + ox];

    Tensor<T> dw({cout_, patch});
    for (std::int64_t r = 0; r < nrows; ++r)
      for (int f = 0; f < cout_; ++f) {
        T g = dy2.at2(static_cast<int>(r), f);
        if (g == T(0)) continue;
        T* dwf = dw.data() + static_cast<std::int64_t>(f) * patch;
        const T* cr = cols.data() + r * patch;
        for (int i = 0; i < patch; ++i) dwf[i] += g * cr[i];
      }
    if (binary_) {
      Tensor<T> mask = binarize_ste_mask(w_);
      for (std::int64_t i = 0; i < dw.numel(); ++i) dw[i] *= mask[i];
    }

    Tensor<T> w_eff = binary_ ? binarize_ste(w_) : w_;
    Tensor<T> dx({b, cin_, h, w});
    row = 0;
    for (int bi = 0; bi < b; ++bi)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox, ++row)
          for (int f = 0; f < cout_; ++f) {
            T g = dy2.at2(static_cast<int>(row), f);
            if (g == T(0)) continue;
            const T* wf = w_eff.data() + static_cast<std::int64_t>(f) * patch;
            std::int64_t col = 0;
            for (int c = 0; c < cin_; ++c)
              for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx, ++col) {
                  int iy = oy + ky - pad, ix = ox + kx - pad;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                  dx[((static_cast<std::int64_t>(bi) * cin_ + c) * h + iy) * w + ix] += g * wf[col];
                }
          }

    pgrads.push_back(std::move(dw));
    if (use_bias_) {
      Tensor<T> db({cout_});
      for (std::int64_t r = 0; r < nrows; ++r)
        for (int f = 0; f < cout_; ++f) db[f] += dy2.at2(static_cast<int>(r), f);
      pgrads.push_back(std::move(db));
    }
    return dx;
  }

  std::vector<NamedParam<T>> parameters() override {
    std::vector<NamedParam<T>> p{{"weight", &w_}};
    if (use_bias_) p.push_back({"bias", &b_});
    return p;
  }
  std::int64_t param_count() const override { return w_.numel() + (use_bias_ ? b_.numel() : 0); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int ksize() const { return k_; }
  bool binary() const { return binary_; }
  bool has_bias() const { return use_bias_; }
  Tensor<T>& weight() { return w_; }
  Tensor<T>& bias() { return b_; }
  Tensor<T> effective_weight() const { return binary_ ? binarize_ste(w_) : w_; }

private:
  int cin_, cout_, k_;
  bool use_bias_, binary_;
  Tensor<T> w_, b_; // weight kept flat [cout, cin*k*k]: conv is lowered to matmul
};

// ---------------------------------------------------------------------------
// BatchNorm

template <typename T>
class BatchNorm : public Layer<T> {
public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : c_(channels), momentum_(momentum), eps_(eps), gamma_({channels}, T(1)), beta_({channels}),
        run_mean_({channels}, T(0)), run_var_({channels}, T(1)) {}

  LayerKind kind() const override { return LayerKind::BatchNorm; }
  std::string describe() const override { return "batchnorm(" + std::to_string(c_) + ")"; }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    ChannelDims d = channel_dims(x);
    require(d.channels == c_, "batchnorm: expected " + std::to_string(c_) + " channels, got " +
                                  std::to_string(d.channels));
    const std::int64_t n = static_cast<std::int64_t>(d.outer) * d.inner;
    const bool batch_stats = ctx.mode == Mode::Train;

    Tensor<T> mean({c_}), var({c_});
    if (batch_stats) {
      for (int ch = 0; ch < c_; ++ch) {
        double s = 0;
        for (int o = 0; o < d.outer; ++o) {
          const T* p = x.data() + (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
          for (std::int64_t i = 0; i < d.inner; ++i) s += p[i];
        }
        mean[ch] = static_cast<T>(s / double(n));
        double v = 0;
        for (int o = 0; o < d.outer; ++o) {
          const T* p = x.data() + (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
          for (std::int64_t i = 0; i < d.inner; ++i) {
            double dd = p[i] - mean[ch];
            v += dd * dd;
          }
        }
        var[ch] = static_cast<T>(v / double(n));
      }
      if (ctx.update_stats) {
        for (int ch = 0; ch < c_; ++ch) {
          run_mean_[ch] = (T(1) - momentum_) * run_mean_[ch] + momentum_ * mean[ch];
          run_var_[ch] = (T(1) - momentum_) * run_var_[ch] + momentum_ * var[ch];
        }
      }
    } else {
      mean = run_mean_;
      var = run_var_;
    }

    Tensor<T> istd({c_});
    for (int ch = 0; ch < c_; ++ch)
      istd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[ch]) + eps_));

    Tensor<T> xhat(x.shape()), y(x.shape());
    for (int o = 0; o < d.outer; ++o)
      for (int ch = 0; ch < c_; ++ch) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          T xh = (x[base + i] - mean[ch]) * istd[ch];
          xhat[base + i] = xh;
          y[base + i] = gamma_[ch] * xh + beta_[ch];
        }
      }
    if (tr) {
      tr->saved = {xhat, istd};
      tr->in_shape = x.shape();
      tr->flags = {batch_stats ? 1 : 0};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& xhat = tr.saved[0];
    const Tensor<T>& istd = tr.saved[1];
    const bool batch_stats = tr.flags[0] != 0;
    ChannelDims d = channel_dims(dy);
    const std::int64_t n = static_cast<std::int64_t>(d.outer) * d.inner;

    Tensor<T> dgamma({c_}), dbeta({c_});
    Tensor<T> dx(dy.shape());
    for (int ch = 0; ch < c_; ++ch) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int o = 0; o < d.outer; ++o) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          sum_dy += dy[base + i];
          sum_dy_xhat += dy[base + i] * xhat[base + i];
        }
      }
      dgamma[ch] = static_cast<T>(sum_dy_xhat);
      dbeta[ch] = static_cast<T>(sum_dy);
      const double g = gamma_[ch], is = istd[ch];
      for (int o = 0; o < d.outer; ++o) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          if (batch_stats) {
            dx[base + i] = static_cast<T>(
                g * is / double(n) *
                (double(n) * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat));
          } else {
            dx[base + i] = static_cast<T>(g * is * dy[base + i]);
          }
        }
      }
    }
    pgrads.push_back(std::move(dgamma));
    pgrads.push_back(std::move(dbeta));
    return dx;
  }

  std::vector<NamedParam<T>> parameters() override {
    return {{"gamma", &gamma_}, {"beta", &beta_}};
  }
  std::vector<NamedParam<T>> statistics() override {
    return {{"running_mean", &run_mean_}, {"running_var", &run_var_}};
  }
  std::int64_t param_count() const override { return 2 * c_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

  int channels() const { return c_; }
  Tensor<T>& running_mean() { return run_mean_; }
  Tensor<T>& running_var() { return run_var_; }

private:
  int c_;
  T momentum_, eps_;
  Tensor<T> gamma_, beta_, run_mean_, run_var_;
};

// ---------------------------------------------------------------------------
// Activations

template <typename T>
class ReLU : public Layer<T> {
public:
  LayerKind kind() const override { return LayerKind::ReLU; }
  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>&, LayerTrace<T>* tr) override {
    Tensor<T> y = x, mask = x;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      mask[i] = x[i] > T(0) ? T(1) : T(0);
      y[i] = x[i] > T(0) ? x[i] : T(0);
    }
    if (tr) tr->saved = {std::move(mask)};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>&) override {
    Tensor<T> dx = dy;
    const Tensor<T>& mask = tr.saved[0];
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] *= mask[i];
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

/// Sign activation with the straight-through estimator backward.
template <typename T>
class SignAct : public Layer<T> {
public:
  LayerKind kind() const override { return LayerKind::Sign; }
  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>&, LayerTrace<T>* tr) override {
    if (tr) tr->saved = {binarize_ste_mask(x)};
    return binarize_ste(x);
  }
  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>&) override {
    Tensor<T> dx = dy;
    const Tensor<T>& mask = tr.saved[0];
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] *= mask[i];
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<SignAct>(*this); }
};

template <typename T>
class Softmax : public Layer<T> {
public:
  LayerKind kind() const override { return LayerKind::Softmax; }
  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>&, LayerTrace<T>* tr) override {
    require(x.rank() == 2, "softmax: expected [B,C], got " + x.shape_str());
    const int b = x.dim(0), c = x.dim(1);
    Tensor<T> y(x.shape());
    for (int r = 0; r < b; ++r) {
      T mx = x.at2(r, 0);
      for (int j = 1; j < c; ++j) mx = std::max(mx, x.at2(r, j));
      double s = 0;
      for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(x.at2(r, j) - mx));
      for (int j = 0; j < c; ++j)
        y.at2(r, j) = static_cast<T>(std::exp(static_cast<double>(x.at2(r, j) - mx)) / s);
    }
    if (tr) tr->saved = {y};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>&) override {
    const Tensor<T>& y = tr.saved[0];
    const int b = y.dim(0), c = y.dim(1);
    Tensor<T> dx(y.shape());
    for (int r = 0; r < b; ++r) {
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += dy.at2(r, j) * y.at2(r, j);
      for (int j = 0; j < c; ++j)
        dx.at2(r, j) = y.at2(r, j) * (dy.at2(r, j) - static_cast<T>(dot));
    }
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Softmax>(*this); }
};

// ---------------------------------------------------------------------------
// Dropout variants

/// Per-neuron dropout module: one mask entry per neuron (feature position),
/// shared across the batch within a single forward, inverted 1/(1-p) scaling.
template <typename T>
class NeuronDropout : public Layer<T> {
public:
  NeuronDropout(double p, int source_id) : p_(p), src_(source_id) {
    require(p >= 0 && p < 1, "dropout probability must be in [0,1)");
  }
  LayerKind kind() const override { return LayerKind::NeuronDropout; }
  std::string describe() const override { return "neuron_dropout(p=" + std::to_string(p_) + ")"; }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    if (!ctx.stochastic() || p_ == 0.0) {
      if (tr) tr->saved = {Tensor<T>()};
      return x;
    }
    const std::int64_t neurons = x.numel() / x.dim(0);
    RngSource& src = ctx.source(src_);
    Tensor<T> mask({static_cast<int>(neurons)});
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
    for (std::int64_t i = 0; i < neurons; ++i)
      mask[i] = src.draw_bernoulli(p_) ? T(0) : keep_scale;
    Tensor<T> y = x;
    for (int b = 0; b < x.dim(0); ++b)
      for (std::int64_t i = 0; i < neurons; ++i) y[b * neurons + i] *= mask[i];
    if (tr) tr->saved = {std::move(mask)};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>&) override {
    if (tr.saved[0].empty()) return dy;
    const Tensor<T>& mask = tr.saved[0];
    const std::int64_t neurons = mask.numel();
    Tensor<T> dx = dy;
    for (int b = 0; b < dy.dim(0); ++b)
      for (std::int64_t i = 0; i < neurons; ++i) dx[b * neurons + i] *= mask[i];
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<NeuronDropout>(*this); }
  double p() const { return p_; }
  int source_id() const { return src_; }

private:
  double p_;
  int src_;
};

/// Drops whole channels (feature maps); kept channels scaled by 1/(1-p).
template <typename T>
class SpatialDropout : public Layer<T> {
public:
  SpatialDropout(double p, int source_id) : p_(p), src_(source_id) {
    require(p >= 0 && p < 1, "dropout probability must be in [0,1)");
  }
  LayerKind kind() const override { return LayerKind::SpatialDropout; }
  std::string describe() const override { return "spatial_dropout(p=" + std::to_string(p_) + ")"; }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    if (!ctx.stochastic() || p_ == 0.0) {
      if (tr) tr->saved = {Tensor<T>()};
      return x;
    }
    ChannelDims d = channel_dims(x);
    RngSource& src = ctx.source(src_);
    Tensor<T> mask({d.channels});
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
    for (int c = 0; c < d.channels; ++c) mask[c] = src.draw_bernoulli(p_) ? T(0) : keep_scale;
    Tensor<T> y = x;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < d.channels; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * d.channels + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) y[base + i] *= mask[c];
      }
    if (tr) tr->saved = {std::move(mask)};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>&) override {
    if (tr.saved[0].empty()) return dy;
    const Tensor<T>& mask = tr.saved[0];
    ChannelDims d = channel_dims(dy);
    Tensor<T> dx = dy;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < d.channels; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * d.channels + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) dx[base + i] *= mask[c];
      }
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<SpatialDropout>(*this); }
  double p() const { return p_; }

private:
  double p_;
  int src_;
};

/// Trainable per-channel scale vector; with probability p the whole vector is
/// swapped for the neutral all-ones vector. All scale layers of a model share
/// one RNG source (the single time-multiplexed dropout module).
template <typename T>
class ScaleDropout : public Layer<T> {
public:
  ScaleDropout(int channels, double p, int source_id)
      : c_(channels), p_(p), src_(source_id), scale_({channels}, T(1)) {
    require(p >= 0 && p < 1, "dropout probability must be in [0,1)");
  }
  LayerKind kind() const override { return LayerKind::ScaleDropout; }
  std::string describe() const override {
    return "scale_dropout(c=" + std::to_string(c_) + ",p=" + std::to_string(p_) + ")";
  }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    ChannelDims d = channel_dims(x);
    require(d.channels == c_, "scale_dropout: channel mismatch");
    Tensor<T> eff = scale_;
    bool dropped = false;
    if (ctx.stochastic()) {
      auto [e, drop] = scale_dropout_step(scale_, p_, ctx.source(src_));
      eff = std::move(e);
      dropped = drop;
    }
    Tensor<T> y = x;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < c_; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) y[base + i] *= eff[c];
      }
    if (tr) {
      tr->saved = {x, eff};
      tr->flags = {dropped ? 1 : 0};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& x = tr.saved[0];
    const Tensor<T>& eff = tr.saved[1];
    const bool dropped = tr.flags[0] != 0;
    ChannelDims d = channel_dims(dy);
    Tensor<T> dscale({c_});
    Tensor<T> dx = dy;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < c_; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          if (!dropped) dscale[c] += dy[base + i] * x[base + i];
          dx[base + i] *= eff[c];
        }
      }
    pgrads.push_back(std::move(dscale));
    return dx;
  }

  std::vector<NamedParam<T>> parameters() override { return {{"scale", &scale_}}; }
  std::int64_t param_count() const override { return c_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ScaleDropout>(*this); }

  int channels() const { return c_; }
  double p() const { return p_; }
  void set_p(double p) { p_ = p; }
  int source_id() const { return src_; }
  Tensor<T>& scale() { return scale_; }

private:
  int c_;
  double p_;
  int src_;
  Tensor<T> scale_;
};

/// Variational per-channel scale: q(alpha) = N(mu, softplus(rho)^2) with prior
/// N(1, prior_sigma^2), sampled by reparameterization in stochastic mode and
/// collapsed to the posterior mean in Eval mode.
template <typename T>
class ScaleVI : public Layer<T> {
public:
  ScaleVI(int channels, double prior_sigma, int source_id)
      : c_(channels), prior_sigma_(prior_sigma), src_(source_id), mu_({channels}, T(1)),
        rho_({channels}, T(-3)) {
    require(prior_sigma > 0, "scale_vi: prior sigma must be positive");
  }
  LayerKind kind() const override { return LayerKind::ScaleVI; }
  std::string describe() const override { return "scale_vi(c=" + std::to_string(c_) + ")"; }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    ChannelDims d = channel_dims(x);
    require(d.channels == c_, "scale_vi: channel mismatch");
    Tensor<T> alpha({c_}), eps({c_});
    const bool sample = ctx.stochastic();
    for (int c = 0; c < c_; ++c) {
      T e = sample ? static_cast<T>(ctx.source(src_).draw_normal()) : T(0);
      eps[c] = e;
      alpha[c] = mu_[c] + softplus(rho_[c]) * e;
    }
    Tensor<T> y = x;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < c_; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) y[base + i] *= alpha[c];
      }
    if (tr) tr->saved = {x, alpha, eps};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& x = tr.saved[0];
    const Tensor<T>& alpha = tr.saved[1];
    const Tensor<T>& eps = tr.saved[2];
    ChannelDims d = channel_dims(dy);
    Tensor<T> dmu({c_}), drho({c_});
    Tensor<T> dx = dy;
    for (int o = 0; o < d.outer; ++o)
      for (int c = 0; c < c_; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          dmu[c] += dy[base + i] * x[base + i];
          dx[base + i] *= alpha[c];
        }
      }
    for (int c = 0; c < c_; ++c) drho[c] = dmu[c] * eps[c] * sigmoid(rho_[c]);
    pgrads.push_back(std::move(dmu));
    pgrads.push_back(std::move(drho));
    return dx;
  }

  /// Closed-form KL(q || prior) summed over channels.
  double kl() const {
    double total = 0;
    for (int c = 0; c < c_; ++c) {
      double s = softplus(static_cast<double>(rho_[c]));
      double dm = static_cast<double>(mu_[c]) - 1.0;
      total += std::log(prior_sigma_ / s) + (s * s + dm * dm) / (2.0 * prior_sigma_ * prior_sigma_) -
               0.5;
    }
    return total;
  }

  /// d KL / d mu and d KL / d rho, appended elementwise onto grads.
  void accumulate_kl_grads(Tensor<T>& dmu, Tensor<T>& drho, double weight) const {
    for (int c = 0; c < c_; ++c) {
      double s = softplus(static_cast<double>(rho_[c]));
      double dKL_dmu = (static_cast<double>(mu_[c]) - 1.0) / (prior_sigma_ * prior_sigma_);
      double dKL_ds = -1.0 / s + s / (prior_sigma_ * prior_sigma_);
      double ds_drho = sigmoid(static_cast<double>(rho_[c]));
      dmu[c] += static_cast<T>(weight * dKL_dmu);
      drho[c] += static_cast<T>(weight * dKL_ds * ds_drho);
    }
  }

  std::vector<NamedParam<T>> parameters() override { return {{"mu", &mu_}, {"rho", &rho_}}; }
  std::int64_t param_count() const override { return 2 * c_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ScaleVI>(*this); }

  int channels() const { return c_; }
  double prior_sigma() const { return prior_sigma_; }
  Tensor<T>& mu() { return mu_; }
  Tensor<T>& rho() { return rho_; }

private:
  int c_;
  double prior_sigma_;
  int src_;
  Tensor<T> mu_, rho_;
};

/// Normalizes against stored running statistics (never batch statistics) and
/// perturbs the affine pair multiplicatively per channel in stochastic mode:
/// gamma~ = gamma*(1+s*delta), beta~ = beta*(1+s*delta), s in {0,+1,-1} with
/// P(s=+1) = P(s=-1) = p/2.
template <typename T>
class InvertedNormAffine : public Layer<T> {
public:
  InvertedNormAffine(int channels, double delta, double p, int source_id, T momentum = T(0.1),
                     T eps = T(1e-5))
      : c_(channels), delta_(delta), p_(p), src_(source_id), momentum_(momentum), eps_(eps),
        gamma_({channels}, T(1)), beta_({channels}), run_mean_({channels}, T(0)),
        run_var_({channels}, T(1)) {
    require(p >= 0 && p < 1, "affine dropout probability must be in [0,1)");
  }

  LayerKind kind() const override { return LayerKind::InvertedNormAffine; }
  std::string describe() const override {
    return "inverted_norm_affine(c=" + std::to_string(c_) + ",delta=" + std::to_string(delta_) +
           ",p=" + std::to_string(p_) + ")";
  }

  Tensor<T> forward(const Tensor<T>& x, ExecCtx<T>& ctx, LayerTrace<T>* tr) override {
    ChannelDims d = channel_dims(x);
    require(d.channels == c_, "inverted_norm_affine: channel mismatch");
    const std::int64_t n = static_cast<std::int64_t>(d.outer) * d.inner;

    if (ctx.mode == Mode::Train && ctx.update_stats) {
      for (int ch = 0; ch < c_; ++ch) {
        double s = 0;
        for (int o = 0; o < d.outer; ++o) {
          const T* p = x.data() + (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
          for (std::int64_t i = 0; i < d.inner; ++i) s += p[i];
        }
        double m = s / double(n);
        double v = 0;
        for (int o = 0; o < d.outer; ++o) {
          const T* p = x.data() + (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
          for (std::int64_t i = 0; i < d.inner; ++i) v += (p[i] - m) * (p[i] - m);
        }
        v /= double(n);
        run_mean_[ch] = (T(1) - momentum_) * run_mean_[ch] + momentum_ * static_cast<T>(m);
        run_var_[ch] = (T(1) - momentum_) * run_var_[ch] + momentum_ * static_cast<T>(v);
      }
    }

    Tensor<T> svec({c_});
    if (ctx.stochastic() && p_ > 0 && delta_ != 0) {
      for (int ch = 0; ch < c_; ++ch) {
        double u = ctx.source(src_).draw_uniform();
        svec[ch] = u < p_ / 2 ? T(1) : (u < p_ ? T(-1) : T(0));
      }
    }

    Tensor<T> istd({c_});
    for (int ch = 0; ch < c_; ++ch)
      istd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(run_var_[ch]) + eps_));

    Tensor<T> xhat(x.shape()), y(x.shape());
    for (int o = 0; o < d.outer; ++o)
      for (int ch = 0; ch < c_; ++ch) {
        const T geff = gamma_[ch] * (T(1) + svec[ch] * static_cast<T>(delta_));
        const T beff = beta_[ch] * (T(1) + svec[ch] * static_cast<T>(delta_));
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          T xh = (x[base + i] - run_mean_[ch]) * istd[ch];
          xhat[base + i] = xh;
          y[base + i] = geff * xh + beff;
        }
      }
    if (tr) {
      tr->saved = {xhat, istd, svec};
      tr->in_shape = x.shape();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const LayerTrace<T>& tr,
                     std::vector<Tensor<T>>& pgrads) override {
    const Tensor<T>& xhat = tr.saved[0];
    const Tensor<T>& istd = tr.saved[1];
    const Tensor<T>& svec = tr.saved[2];
    ChannelDims d = channel_dims(dy);
    Tensor<T> dgamma({c_}), dbeta({c_});
    Tensor<T> dx(dy.shape());
    for (int ch = 0; ch < c_; ++ch) {
      const T f = T(1) + svec[ch] * static_cast<T>(delta_);
      double sg = 0, sb = 0;
      for (int o = 0; o < d.outer; ++o) {
        const std::int64_t base = (static_cast<std::int64_t>(o) * c_ + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) {
          sg += dy[base + i] * xhat[base + i];
          sb += dy[base + i];
          dx[base + i] = dy[base + i] * gamma_[ch] * f * istd[ch];
        }
      }
      dgamma[ch] = static_cast<T>(sg) * f;
      dbeta[ch] = static_cast<T>(sb) * f;
    }
    pgrads.push_back(std::move(dgamma));
    pgrads.push_back(std::move(dbeta));
    return dx;
  }

  std::vector<NamedParam<T>> parameters() override {
    return {{"gamma", &gamma_}, {"beta", &beta_}};
  }
  std::vector<NamedParam<T>> statistics() override {
    return {{"running_mean", &run_mean_}, {"running_var", &run_var_}};
  }
  std::int64_t param_count() const override { return 2 * c_; }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<InvertedNormAffine>(*this);
  }

  int channels() const { return c_; }
  Tensor<T>& running_mean() { return run_mean_; }
  Tensor<T>& running_var() { return run_var_; }

private:
  int c_;
  double delta_, p_;
  int src_;
  T momentum_, eps_;
  Tensor<T> gamma_, beta_, run_mean_, run_var_;
};

/// Standalone form of the inverted-normalization op for direct use in tests
/// and calibration code: one channel vector in, one out.
template <typename T>
Tensor<T> inverted_norm_affine(const Tensor<T>& x, const Tensor<T>& mean, const Tensor<T>& var,
                               const Tensor<T>& gamma, const Tensor<T>& beta, double delta,
                               double p, RngSource& src, bool stochastic, T eps = T(1e-5)) {
  ChannelDims d = channel_dims(x);
  require(mean.numel() == d.channels && var.numel() == d.channels, "stats/channel mismatch");
  Tensor<T> y(x.shape());
  std::vector<T> svec(static_cast<size_t>(d.channels), T(0));
  if (stochastic && p > 0 && delta != 0) {
    for (int c = 0; c < d.channels; ++c) {
      double u = src.draw_uniform();
      svec[static_cast<size_t>(c)] = u < p / 2 ? T(1) : (u < p ? T(-1) : T(0));
    }
  }
  for (int o = 0; o < d.outer; ++o)
    for (int c = 0; c < d.channels; ++c) {
      require(var[c] > T(0), "inverted_norm_affine: variance must be positive");
      T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
      T f = T(1) + svec[static_cast<size_t>(c)] * static_cast<T>(delta);
      const std::int64_t base = (static_cast<std::int64_t>(o) * d.channels + c) * d.inner;
      for (std::int64_t i = 0; i < d.inner; ++i)
        y[base + i] = gamma[c] * f * ((x[base + i] - mean[c]) * istd) + beta[c] * f;
    }
  return y;
}

} // namespace cimlab::nn
