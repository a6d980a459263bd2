#include "cimlab/mitigate/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace cimlab::mitigate {

namespace {

double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

} // namespace

nn::Model<float> approx_bn_recalibrate(const nn::Model<float>& model,
                                       const xbar::CrossbarProgram& prog_faulty,
                                       const CalibrationSet& calib, u64 read_seed,
                                       std::ostream* warn) {
  calib.validate();
  nn::Model<float> out = model;

  std::vector<int> norm_layers;
  for (int i = 0; i < out.size(); ++i) {
    auto k = out.layers[static_cast<size_t>(i)]->kind();
    if (k == nn::LayerKind::BatchNorm || k == nn::LayerKind::InvertedNormAffine)
      norm_layers.push_back(i);
  }
  require(!norm_layers.empty(), "recalibrate: model has no normalization layers");

  nn::ForwardTrace<float> trace;
  xbar::faulty_forward(out, prog_faulty, calib.inputs, read_seed, Mode::Eval, &trace);

  for (int li : norm_layers) {
    const Tensor<float>& input =
        li == 0 ? calib.inputs : trace.output[static_cast<size_t>(li - 1)];
    nn::ChannelDims d = nn::channel_dims(input);
    const std::int64_t n = static_cast<std::int64_t>(d.outer) * d.inner;

    Tensor<float>*rm = nullptr, *rv = nullptr;
    if (auto* bn = dynamic_cast<nn::BatchNorm<float>*>(out.layers[static_cast<size_t>(li)].get())) {
      rm = &bn->running_mean();
      rv = &bn->running_var();
    } else if (auto* in =
                   dynamic_cast<nn::InvertedNormAffine<float>*>(out.layers[static_cast<size_t>(li)].get())) {
      rm = &in->running_mean();
      rv = &in->running_var();
    }
    require(rm && rv && rm->numel() == d.channels, "recalibrate: stat shape mismatch");

    for (int ch = 0; ch < d.channels; ++ch) {
      double sum = 0;
      for (int o = 0; o < d.outer; ++o) {
        const float* p = input.data() + (static_cast<std::int64_t>(o) * d.channels + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) sum += p[i];
      }
      double mean = sum / double(n);
      double var = 0;
      for (int o = 0; o < d.outer; ++o) {
        const float* p = input.data() + (static_cast<std::int64_t>(o) * d.channels + ch) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= double(n);
      if (var < 1e-5) {
        if (warn)
          (*warn) << "recalibrate: layer " << li << " channel " << ch
                  << " has near-zero variance, flooring at 1e-5\n";
        var = 1e-5;
      }
      (*rm)[ch] = static_cast<float>(mean);
      (*rv)[ch] = static_cast<float>(var);
    }
  }
  return out;
}

VariationPolicy variation_aware_loss_hook(const nn::TrainConfig& cfg) {
  require(cfg.noise_spec.has_value(), "variation-aware training needs cfg.noise_spec");
  require(cfg.noise_spec->sigma_train >= 0, "noise sigma must be >= 0");
  return {cfg.noise_spec->sigma_train};
}

// ---------------------------------------------------------------------------

ReferenceVector generate_reference(nn::Model<float>& model, const xbar::CrossbarProgram& prog,
                                   int scenarios, u64 seed) {
  require(scenarios >= 1, "generate_reference: scenarios must be >= 1");
  xbar::check_compatible(model, prog);
  const auto& cfg = prog.config;
  constexpr int kCalibInputs = 256;

  // midpoints[tile][col][scenario]
  std::vector<std::vector<std::vector<double>>> midpoints(prog.tiles.size());
  for (size_t t = 0; t < prog.tiles.size(); ++t)
    midpoints[t].assign(static_cast<size_t>(prog.tiles[t].g_plus.dim(1)), {});

  // Fixed zero-information input set per layer, shared across scenarios.
  std::vector<Tensor<float>> layer_rows;
  for (const auto& lm : prog.mapping) {
    Rng rng(derive_stream(seed, 0x1F, static_cast<u64>(lm.layer_index)));
    layer_rows.push_back(Tensor<float>::randn({kCalibInputs, lm.in_dim}, rng));
  }

  for (int s = 0; s < scenarios; ++s) {
    xbar::CrossbarProgram prog_s =
        cfg.variation_sigma > 0
            ? xbar::apply_variation(prog, cfg.variation_sigma, derive_stream(seed, 0x5C, s))
            : prog;

    for (size_t mi = 0; mi < prog.mapping.size(); ++mi) {
      const auto& lm = prog.mapping[mi];
      const Tensor<float>& rows = layer_rows[mi];

      // True activation = full-precision w x + b; bias split evenly across
      // the layer's row tiles so per-tile partial truths sum to the whole.
      auto* layer = model.layers[static_cast<size_t>(lm.layer_index)].get();
      Tensor<float> w_eff;
      Tensor<float> bias({lm.out_dim});
      if (auto* dl = dynamic_cast<nn::Dense<float>*>(layer)) {
        w_eff = dl->effective_weight();
        if (dl->has_bias()) bias = dl->bias();
      } else if (auto* cl = dynamic_cast<nn::Conv2d<float>*>(layer)) {
        w_eff = cl->effective_weight();
        if (cl->has_bias()) bias = cl->bias();
      }

      for (int cb = 0; cb < lm.col_tiles; ++cb)
        for (int rb = 0; rb < lm.row_tiles; ++rb) {
          const int pair = lm.pair_at(rb, cb);
          const auto& t = prog_s.tiles[static_cast<size_t>(pair)];
          const int trows = t.g_plus.dim(0), tcols = t.g_plus.dim(1);
          const int r0 = rb * cfg.tile_rows, c0 = cb * cfg.tile_cols;

          for (int c = 0; c < tcols; ++c) {
            std::vector<double> pos, neg, all;
            for (int i = 0; i < kCalibInputs; ++i) {
              const float* x = rows.data() + static_cast<std::int64_t>(i) * lm.in_dim + r0;
              double current = 0, truth = double(bias[c0 + c]) / lm.row_tiles;
              for (int r = 0; r < trows; ++r) {
                current += double(x[r]) * (t.g_plus.at2(r, c) - t.g_minus.at2(r, c));
                truth += double(x[r]) * w_eff.at2(c0 + c, r0 + r);
              }
              all.push_back(current);
              (truth >= 0 ? pos : neg).push_back(current);
            }
            double mid;
            if (!pos.empty() && !neg.empty()) mid = 0.5 * (median(pos) + median(neg));
            else mid = median(all); // degenerate column: constant or one-sided
            midpoints[static_cast<size_t>(pair)][static_cast<size_t>(c)].push_back(mid);
          }
        }
    }
  }

  ReferenceVector ref;
  ref.scenario_count = scenarios;
  ref.theta.resize(prog.tiles.size());
  for (size_t t = 0; t < prog.tiles.size(); ++t) {
    ref.theta[t].resize(midpoints[t].size());
    for (size_t c = 0; c < midpoints[t].size(); ++c)
      ref.theta[t][c] = static_cast<float>(median(midpoints[t][c]));
  }
  return ref;
}

void install_reference(xbar::CrossbarProgram& prog, const ReferenceVector& ref) {
  require(ref.theta.size() == prog.tiles.size(), "install_reference: tile count mismatch");
  for (size_t t = 0; t < prog.tiles.size(); ++t) {
    require(static_cast<int>(ref.theta[t].size()) == prog.tiles[t].g_plus.dim(1),
            "install_reference: column count mismatch at tile " + std::to_string(t));
    prog.tiles[t].theta = ref.theta[t];
  }
}

std::string ReferenceVector::serialize() const {
  std::ostringstream os;
  os << "# reference v1 scenarios=" << scenario_count << "\n";
  for (size_t t = 0; t < theta.size(); ++t)
    for (size_t c = 0; c < theta[t].size(); ++c)
      os << t << "," << c << "," << fmt(theta[t][c]) << "\n";
  return os.str();
}

ReferenceVector ReferenceVector::parse(const std::string& text) {
  ReferenceVector ref;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("scenarios=");
      if (pos != std::string::npos) ref.scenario_count = std::stoi(line.substr(pos + 10));
      continue;
    }
    std::istringstream ls(line);
    std::string f1, f2, f3;
    require(std::getline(ls, f1, ',') && std::getline(ls, f2, ',') && std::getline(ls, f3, ','),
            "reference: malformed line '" + line + "'");
    size_t t = std::stoul(f1), c = std::stoul(f2);
    if (ref.theta.size() <= t) ref.theta.resize(t + 1);
    if (ref.theta[t].size() <= c) ref.theta[t].resize(c + 1);
    ref.theta[t][c] = std::stof(f3);
  }
  return ref;
}

} // namespace cimlab::mitigate
