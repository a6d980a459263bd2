#pragma once

// Memristive crossbar model: trained weights map onto differential
// conductance pairs (G+ carries the positive part, G- the negative), split
// into tiles, quantized to a fixed number of conductance levels. Matrix-vector
// products run as column current sums with injectable non-idealities:
// stuck-at faults, lognormal variation, drift factors, multiplicative read
// noise, and either ADC quantization or binarized partial-sum readout.

#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "cimlab/nn/model.hpp"
#include "cimlab/rng.hpp"
#include "cimlab/tensor.hpp"

namespace cimlab::xbar {

enum class ReadoutMode { Ideal, Adc, BinarizedPartialSum };

struct CrossbarConfig {
  int tile_rows = 128;
  int tile_cols = 128;
  float g_on = 1.0f;  // conductance units are arbitrary; only ratios matter
  float g_off = 0.1f;
  int levels = 256;   // quantized conductance states in [g_off, g_on]
  ReadoutMode mode = ReadoutMode::Adc;
  int adc_bits = 12;
  float variation_sigma = 0.0f;
  float read_noise_sigma = 0.0f;

  void validate() const;
};

enum class FaultKind { StuckOn, StuckOff, Drift };

/// Cell address within the program: `tile` indexes physical conductance
/// planes, where even indices are the G+ plane and odd indices the G- plane
/// of differential pair tile/2.
struct FaultEntry {
  int tile = 0;
  int row = 0;
  int col = 0;
  FaultKind kind = FaultKind::StuckOn;
  float factor = 1.0f; // drift multiplier in (0,1]
};

struct FaultMap {
  std::vector<FaultEntry> entries;
  u64 seed = 0;

  void canonicalize(); // sorts by (tile,row,col); at most one fault per cell
  std::string serialize() const;
  static FaultMap parse(const std::string& text);
  bool empty() const { return entries.empty(); }
};

struct TilePair {
  Tensor<float> g_plus;  // [rows, cols]
  Tensor<float> g_minus;
  std::vector<float> adc_range; // per column, calibrated fault-free
  std::vector<float> theta;     // per column, binarized partial-sum reference
};

struct LayerMapping {
  int layer_index = -1; // position in the source model
  int in_dim = 0;
  int out_dim = 0;
  float scale = 1.0f;   // per-layer max-abs weight scale, re-applied digitally
  int row_tiles = 0;
  int col_tiles = 0;
  int first_pair = 0;   // index of this layer's first tile pair
  ReadoutMode readout = ReadoutMode::Adc;

  int pair_at(int rb, int cb) const { return first_pair + cb * row_tiles + rb; }
};

struct CrossbarProgram {
  CrossbarConfig config;
  std::vector<TilePair> tiles;
  std::vector<LayerMapping> mapping;
  FaultMap faults;

  const LayerMapping* mapping_for_layer(int layer_index) const;
  std::int64_t cell_count() const;
};

/// Maps every dense/conv layer onto differential tile pairs. Weights are
/// normalized per layer by max-abs, quantized to `levels` states, and ADC
/// ranges are calibrated per tile column: from propagated activations when
/// `calib_inputs` (a batch for the model) is given, else from 256 seeded
/// standard-normal rows. `layer_scales`, when given, overrides the per-layer
/// scale and mapping fails if any weight exceeds it.
CrossbarProgram map_weights(nn::Model<float>& model, const CrossbarConfig& cfg,
                            const Tensor<float>* calib_inputs = nullptr,
                            const std::vector<float>* layer_scales = nullptr);

/// Reconstructed weight matrix [out,in] for one mapped layer.
Tensor<float> read_back(const CrossbarProgram& prog, int mapped_index);

/// Independent per-cell stuck-at injection at the given rates. Already-faulted
/// cells are skipped (one fault per cell). Returns the new program and the
/// map of this round's faults.
std::pair<CrossbarProgram, FaultMap> inject_faults(const CrossbarProgram& prog,
                                                   double stuck_on_rate, double stuck_off_rate,
                                                   u64 seed);

/// Multiplies every non-stuck conductance by exp(eps), eps ~ N(0, sigma^2),
/// clamped to [g_off, g_on]. Stuck cells are invariant: a shorted or open
/// cell does not respond to analog perturbation.
CrossbarProgram apply_variation(const CrossbarProgram& prog, double sigma, u64 seed);

/// Replays a fault map onto a program (pins stuck cells, multiplies drift
/// factors); used by the CLI to reproduce serialized scenarios bit-exactly.
CrossbarProgram apply_fault_map(const CrossbarProgram& prog, const FaultMap& map);

/// One analog matrix-vector product for a mapped layer: per-column current
/// sum plus read noise, then per-tile ADC quantization or sign thresholding,
/// partial tiles accumulated digitally. Ideal/Adc results are returned in
/// weight units (scale re-applied); BinarizedPartialSum returns raw sign sums.
Tensor<float> analog_mvm(const CrossbarProgram& prog, int mapped_index, const Tensor<float>& x,
                         Rng& read_rng);

/// Matmul backend that routes dense/conv products through the program.
class CrossbarBackend : public nn::MatmulBackend<float> {
public:
  CrossbarBackend(const CrossbarProgram& prog, u64 read_seed)
      : prog_(&prog), rng_(derive_stream(read_seed, 0x4E)) {}

  Tensor<float> matmul(int layer_index, const Tensor<float>& rows,
                       const Tensor<float>& w_eff) override;
  bool suppress_bias(int layer_index) const override;

private:
  const CrossbarProgram* prog_;
  Rng rng_;
};

/// nn-core forward with every dense/conv matmul routed through the program.
Tensor<float> faulty_forward(nn::Model<float>& model, const CrossbarProgram& prog,
                             const Tensor<float>& x, u64 read_seed = 0, Mode mode = Mode::Eval,
                             nn::ForwardTrace<float>* trace = nullptr);

/// Checks that the program was derived from this model (same mapped layers
/// and dimensions); faulty_forward calls it on entry.
void check_compatible(const nn::Model<float>& model, const CrossbarProgram& prog);

} // namespace cimlab::xbar
