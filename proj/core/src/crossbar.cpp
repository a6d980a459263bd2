#include "cimlab/xbar/crossbar.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace cimlab::xbar {

void CrossbarConfig::validate() const {
  require(g_on > g_off && g_off > 0, "crossbar: need g_on > g_off > 0");
  require(tile_rows >= 1 && tile_cols >= 1, "crossbar: tile dims must be >= 1");
  require(levels >= 2, "crossbar: need >= 2 conductance levels");
  if (mode == ReadoutMode::Adc) require(adc_bits >= 1, "crossbar: adc_bits must be >= 1");
  require(variation_sigma >= 0 && read_noise_sigma >= 0, "crossbar: sigmas must be >= 0");
}

// ---------------------------------------------------------------------------
// FaultMap

namespace {
u64 cell_key(int tile, int row, int col) {
  return (static_cast<u64>(tile) << 40) | (static_cast<u64>(row) << 20) | static_cast<u64>(col);
}

const char* kind_str(FaultKind k) {
  switch (k) {
    case FaultKind::StuckOn: return "stuck_on";
    case FaultKind::StuckOff: return "stuck_off";
    case FaultKind::Drift: return "drift";
  }
  return "?";
}
} // namespace

void FaultMap::canonicalize() {
  std::sort(entries.begin(), entries.end(), [](const FaultEntry& a, const FaultEntry& b) {
    return cell_key(a.tile, a.row, a.col) < cell_key(b.tile, b.row, b.col);
  });
  for (size_t i = 1; i < entries.size(); ++i)
    require(cell_key(entries[i].tile, entries[i].row, entries[i].col) !=
                cell_key(entries[i - 1].tile, entries[i - 1].row, entries[i - 1].col),
            "faultmap: at most one fault per cell");
}

std::string FaultMap::serialize() const {
  std::ostringstream os;
  os << "# faultmap v1 seed=" << seed << "\n";
  char buf[96];
  for (const auto& e : entries) {
    if (e.kind == FaultKind::Drift) {
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%s,%.9g\n", e.tile, e.row, e.col, kind_str(e.kind),
                    static_cast<double>(e.factor));
    } else {
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%s\n", e.tile, e.row, e.col, kind_str(e.kind));
    }
    os << buf;
  }
  return os.str();
}

FaultMap FaultMap::parse(const std::string& text) {
  FaultMap map;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("seed=");
      if (pos != std::string::npos) map.seed = std::stoull(line.substr(pos + 5));
      continue;
    }
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    require(fields.size() == 4 || fields.size() == 5,
            "faultmap: malformed line " + std::to_string(lineno) + ": '" + line + "'");
    FaultEntry e;
    e.tile = std::stoi(fields[0]);
    e.row = std::stoi(fields[1]);
    e.col = std::stoi(fields[2]);
    if (fields[3] == "stuck_on") e.kind = FaultKind::StuckOn;
    else if (fields[3] == "stuck_off") e.kind = FaultKind::StuckOff;
    else if (fields[3] == "drift") e.kind = FaultKind::Drift;
    else fail("faultmap: unknown fault kind '" + fields[3] + "' at line " + std::to_string(lineno));
    if (e.kind == FaultKind::Drift) {
      require(fields.size() == 5, "faultmap: drift entry needs a factor at line " +
                                      std::to_string(lineno));
      e.factor = std::stof(fields[4]);
      require(e.factor > 0.f && e.factor <= 1.f, "faultmap: drift factor must be in (0,1]");
    }
    map.entries.push_back(e);
  }
  map.canonicalize();
  return map;
}

// ---------------------------------------------------------------------------
// Program helpers

const LayerMapping* CrossbarProgram::mapping_for_layer(int layer_index) const {
  for (const auto& lm : mapping)
    if (lm.layer_index == layer_index) return &lm;
  return nullptr;
}

std::int64_t CrossbarProgram::cell_count() const {
  std::int64_t n = 0;
  for (const auto& t : tiles) n += 2 * t.g_plus.numel();
  return n;
}

namespace {

struct PlaneRef {
  Tensor<float>* plane;
  int pair;
  int which; // 0 = plus, 1 = minus
};

/// Iterates all physical planes in canonical order (pair, plus, minus).
template <typename Fn>
void for_each_plane(CrossbarProgram& prog, Fn&& fn) {
  for (size_t p = 0; p < prog.tiles.size(); ++p) {
    fn(static_cast<int>(2 * p), prog.tiles[p].g_plus);
    fn(static_cast<int>(2 * p + 1), prog.tiles[p].g_minus);
  }
}

float quantize_level(float magnitude, int levels) {
  // magnitude in [0,1] -> nearest of `levels` uniform states
  float q = std::round(magnitude * static_cast<float>(levels - 1)) / static_cast<float>(levels - 1);
  return std::min(1.0f, std::max(0.0f, q));
}

struct WeightLayer {
  int layer_index;
  Tensor<float> w_eff; // [out,in]
  bool followed_by_sign;
};

std::vector<WeightLayer> collect_weight_layers(nn::Model<float>& model) {
  std::vector<WeightLayer> out;
  for (int i = 0; i < model.size(); ++i) {
    auto* l = model.layers[static_cast<size_t>(i)].get();
    Tensor<float> w;
    if (auto* d = dynamic_cast<nn::Dense<float>*>(l)) w = d->effective_weight();
    else if (auto* c = dynamic_cast<nn::Conv2d<float>*>(l)) w = c->effective_weight();
    else continue;
    bool sign_next = i + 1 < model.size() &&
                     model.layers[static_cast<size_t>(i + 1)]->kind() == nn::LayerKind::Sign;
    out.push_back({i, std::move(w), sign_next});
  }
  return out;
}

/// Raw column currents of one tile pair for an input slice (no noise, no
/// quantization). x covers the tile's rows.
void tile_currents(const TilePair& t, const float* x, float* current) {
  const int rows = t.g_plus.dim(0), cols = t.g_plus.dim(1);
  for (int c = 0; c < cols; ++c) current[c] = 0.f;
  for (int r = 0; r < rows; ++r) {
    const float xv = x[r];
    if (xv == 0.f) continue;
    const float* gp = t.g_plus.data() + static_cast<std::int64_t>(r) * cols;
    const float* gm = t.g_minus.data() + static_cast<std::int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) current[c] += xv * (gp[c] - gm[c]);
  }
}

float adc_quantize(float current, float range, int bits) {
  const float step = range / static_cast<float>(1 << (bits - 1));
  if (step <= 0.f) return 0.f;
  const float lo = -static_cast<float>(1 << (bits - 1));
  const float hi = static_cast<float>(1 << (bits - 1));
  float code = std::round(current / step);
  code = std::min(hi, std::max(lo, code));
  return code * step;
}

/// Captures the row batches fed to each mapped layer during a digital
/// forward; used for dataset-driven ADC range calibration.
class CaptureBackend : public nn::MatmulBackend<float> {
public:
  Tensor<float> matmul(int layer_index, const Tensor<float>& rows,
                       const Tensor<float>& w_eff) override {
    captured[layer_index] = rows;
    return nn::digital_matmul(rows, w_eff);
  }
  std::map<int, Tensor<float>> captured;
};

} // namespace

// ---------------------------------------------------------------------------
// map_weights

CrossbarProgram map_weights(nn::Model<float>& model, const CrossbarConfig& cfg,
                            const Tensor<float>* calib_inputs,
                            const std::vector<float>* layer_scales) {
  cfg.validate();
  CrossbarProgram prog;
  prog.config = cfg;

  auto weight_layers = collect_weight_layers(model);
  require(!weight_layers.empty(), "map_weights: model has no dense/conv layers");
  if (layer_scales)
    require(layer_scales->size() == weight_layers.size(),
            "map_weights: layer_scales size must match the number of weight layers");

  // Dataset-driven calibration rows per layer.
  std::map<int, Tensor<float>> captured;
  if (calib_inputs) {
    CaptureBackend cap;
    nn::forward(model, *calib_inputs, Mode::Eval, &cap);
    captured = std::move(cap.captured);
  }

  const float span = cfg.g_on - cfg.g_off;
  for (size_t li = 0; li < weight_layers.size(); ++li) {
    const auto& wl = weight_layers[li];
    const int out = wl.w_eff.dim(0), in = wl.w_eff.dim(1);

    LayerMapping lm;
    lm.layer_index = wl.layer_index;
    lm.in_dim = in;
    lm.out_dim = out;
    float mx = max_abs(wl.w_eff);
    if (layer_scales) {
      lm.scale = (*layer_scales)[li];
      require(lm.scale > 0, "map_weights: layer scale must be positive");
      require(mx <= lm.scale * (1.f + 1e-6f),
              "map_weights: layer " + std::to_string(wl.layer_index) + " weight magnitude " +
                  std::to_string(mx) + " exceeds representable scale " + std::to_string(lm.scale) +
                  "; pre-normalize the layer");
    } else {
      lm.scale = mx > 0 ? mx : 1.0f;
    }
    require(wl.w_eff.all_finite(), "map_weights: non-finite weights in layer " +
                                       std::to_string(wl.layer_index));
    lm.row_tiles = (in + cfg.tile_rows - 1) / cfg.tile_rows;
    lm.col_tiles = (out + cfg.tile_cols - 1) / cfg.tile_cols;
    lm.first_pair = static_cast<int>(prog.tiles.size());
    lm.readout = cfg.mode == ReadoutMode::BinarizedPartialSum
                     ? (wl.followed_by_sign ? ReadoutMode::BinarizedPartialSum : ReadoutMode::Adc)
                     : cfg.mode;

    for (int cb = 0; cb < lm.col_tiles; ++cb) {
      for (int rb = 0; rb < lm.row_tiles; ++rb) {
        const int r0 = rb * cfg.tile_rows, c0 = cb * cfg.tile_cols;
        const int rows = std::min(cfg.tile_rows, in - r0);
        const int cols = std::min(cfg.tile_cols, out - c0);
        TilePair t;
        t.g_plus = Tensor<float>({rows, cols}, cfg.g_off);
        t.g_minus = Tensor<float>({rows, cols}, cfg.g_off);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            // crossbar rows are layer inputs: G[r][c] holds weight[out=c0+c][in=r0+r]
            float w = wl.w_eff.at2(c0 + c, r0 + r) / lm.scale;
            float mag = quantize_level(std::min(1.0f, std::abs(w)), cfg.levels);
            float g = cfg.g_off + mag * span;
            if (w >= 0) t.g_plus.at2(r, c) = g;
            else t.g_minus.at2(r, c) = g;
          }
        prog.tiles.push_back(std::move(t));
      }
    }
    prog.mapping.push_back(lm);
  }

  // ADC range calibration, fault-free and noise-free.
  for (const auto& lm : prog.mapping) {
    Tensor<float> rows;
    auto it = captured.find(lm.layer_index);
    if (it != captured.end()) {
      rows = it->second;
    } else {
      Rng rng(derive_stream(0xADCCA1u, static_cast<u64>(lm.layer_index)));
      rows = Tensor<float>::randn({256, lm.in_dim}, rng);
    }
    const int n = rows.dim(0);
    std::vector<float> current(static_cast<size_t>(cfg.tile_cols));
    for (int cb = 0; cb < lm.col_tiles; ++cb)
      for (int rb = 0; rb < lm.row_tiles; ++rb) {
        TilePair& t = prog.tiles[static_cast<size_t>(lm.pair_at(rb, cb))];
        const int cols = t.g_plus.dim(1);
        t.adc_range.assign(static_cast<size_t>(cols), 1e-6f);
        for (int i = 0; i < n; ++i) {
          const float* x = rows.data() + static_cast<std::int64_t>(i) * lm.in_dim + rb * cfg.tile_rows;
          tile_currents(t, x, current.data());
          for (int c = 0; c < cols; ++c)
            t.adc_range[static_cast<size_t>(c)] =
                std::max(t.adc_range[static_cast<size_t>(c)], std::abs(current[static_cast<size_t>(c)]));
        }
      }
  }
  return prog;
}

Tensor<float> read_back(const CrossbarProgram& prog, int mapped_index) {
  require(mapped_index >= 0 && mapped_index < static_cast<int>(prog.mapping.size()),
          "read_back: bad mapped layer index");
  const LayerMapping& lm = prog.mapping[static_cast<size_t>(mapped_index)];
  const float span = prog.config.g_on - prog.config.g_off;
  Tensor<float> w({lm.out_dim, lm.in_dim});
  for (int cb = 0; cb < lm.col_tiles; ++cb)
    for (int rb = 0; rb < lm.row_tiles; ++rb) {
      const TilePair& t = prog.tiles[static_cast<size_t>(lm.pair_at(rb, cb))];
      const int rows = t.g_plus.dim(0), cols = t.g_plus.dim(1);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          w.at2(cb * prog.config.tile_cols + c, rb * prog.config.tile_rows + r) =
              lm.scale * (t.g_plus.at2(r, c) - t.g_minus.at2(r, c)) / span;
    }
  return w;
}

// ---------------------------------------------------------------------------
// Fault injection and variation

std::pair<CrossbarProgram, FaultMap> inject_faults(const CrossbarProgram& prog,
                                                   double stuck_on_rate, double stuck_off_rate,
                                                   u64 seed) {
  require(stuck_on_rate >= 0 && stuck_off_rate >= 0 && stuck_on_rate + stuck_off_rate <= 1.0,
          "inject_faults: rates must be in [0,1] and sum to <= 1");
  CrossbarProgram out = prog;
  FaultMap map;
  map.seed = seed;

  std::unordered_set<u64> already;
  for (const auto& e : prog.faults.entries) already.insert(cell_key(e.tile, e.row, e.col));

  Rng rng(derive_stream(seed, 0xFA));
  for_each_plane(out, [&](int plane, Tensor<float>& g) {
    const int rows = g.dim(0), cols = g.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        double u = rng.uniform();
        if (already.count(cell_key(plane, r, c))) continue;
        if (u < stuck_on_rate) {
          g.at2(r, c) = out.config.g_on;
          map.entries.push_back({plane, r, c, FaultKind::StuckOn, 1.0f});
        } else if (u < stuck_on_rate + stuck_off_rate) {
          g.at2(r, c) = out.config.g_off;
          map.entries.push_back({plane, r, c, FaultKind::StuckOff, 1.0f});
        }
      }
  });
  map.canonicalize();
  out.faults.entries.insert(out.faults.entries.end(), map.entries.begin(), map.entries.end());
  out.faults.canonicalize();
  return {std::move(out), std::move(map)};
}

CrossbarProgram apply_variation(const CrossbarProgram& prog, double sigma, u64 seed) {
  require(sigma >= 0, "apply_variation: sigma must be >= 0");
  CrossbarProgram out = prog;
  if (sigma == 0) return out;

  std::unordered_set<u64> stuck;
  for (const auto& e : prog.faults.entries)
    if (e.kind != FaultKind::Drift) stuck.insert(cell_key(e.tile, e.row, e.col));

  Rng rng(derive_stream(seed, 0x7A));
  for_each_plane(out, [&](int plane, Tensor<float>& g) {
    const int rows = g.dim(0), cols = g.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        double eps = rng.normal(); // drawn for every cell; stuck cells ignore it
        if (stuck.count(cell_key(plane, r, c))) continue;
        float v = g.at2(r, c) * static_cast<float>(std::exp(sigma * eps));
        g.at2(r, c) = std::min(out.config.g_on, std::max(out.config.g_off, v));
      }
  });
  return out;
}

CrossbarProgram apply_fault_map(const CrossbarProgram& prog, const FaultMap& map) {
  CrossbarProgram out = prog;
  const int nplanes = static_cast<int>(2 * out.tiles.size());
  for (const auto& e : map.entries) {
    require(e.tile >= 0 && e.tile < nplanes, "apply_fault_map: tile index out of range");
    Tensor<float>& g = (e.tile % 2 == 0) ? out.tiles[static_cast<size_t>(e.tile / 2)].g_plus
                                         : out.tiles[static_cast<size_t>(e.tile / 2)].g_minus;
    require(e.row >= 0 && e.row < g.dim(0) && e.col >= 0 && e.col < g.dim(1),
            "apply_fault_map: cell out of range");
    switch (e.kind) {
      case FaultKind::StuckOn: g.at2(e.row, e.col) = out.config.g_on; break;
      case FaultKind::StuckOff: g.at2(e.row, e.col) = out.config.g_off; break;
      case FaultKind::Drift: {
        float v = g.at2(e.row, e.col) * e.factor;
        g.at2(e.row, e.col) = std::min(out.config.g_on, std::max(out.config.g_off, v));
        break;
      }
    }
  }
  out.faults.entries.insert(out.faults.entries.end(), map.entries.begin(), map.entries.end());
  out.faults.canonicalize();
  return out;
}

// ---------------------------------------------------------------------------
// Analog MVM

Tensor<float> analog_mvm(const CrossbarProgram& prog, int mapped_index, const Tensor<float>& x,
                         Rng& read_rng) {
  require(mapped_index >= 0 && mapped_index < static_cast<int>(prog.mapping.size()),
          "analog_mvm: bad mapped layer index");
  const LayerMapping& lm = prog.mapping[static_cast<size_t>(mapped_index)];
  require(x.numel() == lm.in_dim, "analog_mvm: input length " + std::to_string(x.numel()) +
                                      " != layer rows " + std::to_string(lm.in_dim));
  const CrossbarConfig& cfg = prog.config;
  const float span = cfg.g_on - cfg.g_off;

  Tensor<float> y({lm.out_dim});
  std::vector<float> current(static_cast<size_t>(cfg.tile_cols));
  for (int cb = 0; cb < lm.col_tiles; ++cb) {
    for (int rb = 0; rb < lm.row_tiles; ++rb) {
      const TilePair& t = prog.tiles[static_cast<size_t>(lm.pair_at(rb, cb))];
      const int cols = t.g_plus.dim(1);
      tile_currents(t, x.data() + rb * cfg.tile_rows, current.data());
      if (cfg.read_noise_sigma > 0)
        for (int c = 0; c < cols; ++c)
          current[static_cast<size_t>(c)] *=
              1.0f + cfg.read_noise_sigma * static_cast<float>(read_rng.normal());
      for (int c = 0; c < cols; ++c) {
        float part = current[static_cast<size_t>(c)];
        switch (lm.readout) {
          case ReadoutMode::Ideal:
            break;
          case ReadoutMode::Adc:
            part = adc_quantize(part, t.adc_range[static_cast<size_t>(c)], cfg.adc_bits);
            break;
          case ReadoutMode::BinarizedPartialSum:
            require(!t.theta.empty(),
                    "analog_mvm: binarized partial-sum readout needs a reference vector; run "
                    "reference generation first");
            part = part - t.theta[static_cast<size_t>(c)] >= 0 ? 1.0f : -1.0f;
            break;
        }
        y[cb * cfg.tile_cols + c] += part;
      }
    }
  }
  if (lm.readout != ReadoutMode::BinarizedPartialSum)
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= lm.scale / span;
  return y;
}

Tensor<float> CrossbarBackend::matmul(int layer_index, const Tensor<float>& rows,
                                      const Tensor<float>& w_eff) {
  const LayerMapping* lm = prog_->mapping_for_layer(layer_index);
  require(lm != nullptr, "crossbar backend: layer " + std::to_string(layer_index) +
                             " is not mapped onto the program");
  require(w_eff.dim(0) == lm->out_dim && w_eff.dim(1) == lm->in_dim,
          "crossbar backend: layer dimensions changed since mapping");
  int mapped_index = static_cast<int>(lm - prog_->mapping.data());
  const int n = rows.dim(0);
  Tensor<float> out({n, lm->out_dim});
  Tensor<float> xrow({lm->in_dim});
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < lm->in_dim; ++i) xrow[i] = rows.at2(r, i);
    Tensor<float> y = analog_mvm(*prog_, mapped_index, xrow, rng_);
    for (int c = 0; c < lm->out_dim; ++c) out.at2(r, c) = y[c];
  }
  return out;
}

bool CrossbarBackend::suppress_bias(int layer_index) const {
  const LayerMapping* lm = prog_->mapping_for_layer(layer_index);
  return lm && lm->readout == ReadoutMode::BinarizedPartialSum;
}

void check_compatible(const nn::Model<float>& model, const CrossbarProgram& prog) {
  for (const auto& lm : prog.mapping) {
    require(lm.layer_index >= 0 && lm.layer_index < model.size(),
            "program/model mismatch: mapped layer " + std::to_string(lm.layer_index) +
                " does not exist");
    const auto* l = model.layers[static_cast<size_t>(lm.layer_index)].get();
    int out = 0, in = 0;
    if (const auto* d = dynamic_cast<const nn::Dense<float>*>(l)) {
      out = d->out_features();
      in = d->in_features();
    } else if (const auto* c = dynamic_cast<const nn::Conv2d<float>*>(l)) {
      out = c->out_channels();
      in = c->in_channels() * c->ksize() * c->ksize();
    } else {
      fail("program/model mismatch: layer " + std::to_string(lm.layer_index) +
           " is not a weight layer");
    }
    require(out == lm.out_dim && in == lm.in_dim,
            "program/model mismatch: layer " + std::to_string(lm.layer_index) +
                " dimensions differ from the mapping");
  }
}

Tensor<float> faulty_forward(nn::Model<float>& model, const CrossbarProgram& prog,
                             const Tensor<float>& x, u64 read_seed, Mode mode,
                             nn::ForwardTrace<float>* trace) {
  check_compatible(model, prog);
  CrossbarBackend backend(prog, read_seed);
  return nn::forward(model, x, mode, &backend, trace);
}

} // namespace cimlab::xbar
