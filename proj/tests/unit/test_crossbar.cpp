#include <doctest.h>

#include <cmath>

#include "cimlab/data/datasets.hpp"
#include "cimlab/nn/train.hpp"
#include "cimlab/xbar/crossbar.hpp"
#include "cimlab/zoo.hpp"

using namespace cimlab;
using xbar::CrossbarConfig;
using xbar::CrossbarProgram;
using xbar::FaultKind;
using xbar::FaultMap;
using xbar::ReadoutMode;

TEST_SUITE_BEGIN("crossbar");

namespace {

/// Single dense layer model wrapping an explicit weight matrix [out,in].
nn::Model<float> wrap_weights(const Tensor<float>& w, const Tensor<float>* bias = nullptr) {
  nn::Model<float> m;
  Rng init(1);
  auto* d = m.add<nn::Dense<float>>(w.dim(1), w.dim(0), bias != nullptr, false, init);
  d->weight() = w;
  if (bias) d->bias() = *bias;
  return m;
}

CrossbarConfig small_cfg() {
  CrossbarConfig cfg;
  cfg.tile_rows = 8;
  cfg.tile_cols = 8;
  cfg.levels = 16;
  cfg.mode = ReadoutMode::Ideal;
  return cfg;
}

} // namespace

TEST_CASE("zero weight maps to the g_off baseline on both planes") {
  Tensor<float> w({2, 2}, 0.0f);
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());
  for (const auto& t : prog.tiles)
    for (std::int64_t i = 0; i < t.g_plus.numel(); ++i) {
      CHECK(t.g_plus[i] == prog.config.g_off);
      CHECK(t.g_minus[i] == prog.config.g_off);
    }
}

TEST_CASE("max weight with two levels maps to the extreme pair") {
  Tensor<float> w({1, 1}, std::vector<float>{0.7f});
  nn::Model<float> m = wrap_weights(w);
  CrossbarConfig cfg = small_cfg();
  cfg.levels = 2;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  CHECK(prog.tiles[0].g_plus[0] == cfg.g_on);
  CHECK(prog.tiles[0].g_minus[0] == cfg.g_off);
}

TEST_CASE("read-back error stays within half a quantization step") {
  Rng rng(77);
  Tensor<float> w = Tensor<float>::randn({4, 4}, rng);
  nn::Model<float> m = wrap_weights(w);
  CrossbarConfig cfg = small_cfg();
  cfg.levels = 16;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  Tensor<float> rb = xbar::read_back(prog, 0);
  const float w_max = max_abs(w);
  const float bound = w_max / (cfg.levels - 1) / 2 + 1e-6f;
  for (std::int64_t i = 0; i < w.numel(); ++i)
    CHECK(std::abs(rb[i] - w[i]) <= bound);
}

TEST_CASE("weight above a caller-fixed scale is rejected") {
  Tensor<float> w({2, 2}, std::vector<float>{0.1f, 0.2f, 1.5f, -0.3f});
  nn::Model<float> m = wrap_weights(w);
  std::vector<float> scales{1.0f};
  CHECK_THROWS_WITH_AS(xbar::map_weights(m, small_cfg(), nullptr, &scales),
                       doctest::Contains("exceeds representable scale"), Error);
}

TEST_CASE("zero rates change nothing and an all-on rate pins every cell") {
  Rng rng(5);
  Tensor<float> w = Tensor<float>::randn({6, 6}, rng);
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());

  auto [same, empty_map] = xbar::inject_faults(prog, 0.0, 0.0, 9);
  CHECK(empty_map.empty());
  for (size_t t = 0; t < prog.tiles.size(); ++t)
    for (std::int64_t i = 0; i < prog.tiles[t].g_plus.numel(); ++i) {
      CHECK(same.tiles[t].g_plus[i] == prog.tiles[t].g_plus[i]);
      CHECK(same.tiles[t].g_minus[i] == prog.tiles[t].g_minus[i]);
    }

  auto [all_on, map] = xbar::inject_faults(prog, 1.0, 0.0, 9);
  CHECK(static_cast<std::int64_t>(map.entries.size()) == prog.cell_count());
  for (const auto& t : all_on.tiles)
    for (std::int64_t i = 0; i < t.g_plus.numel(); ++i) {
      CHECK(t.g_plus[i] == prog.config.g_on);
      CHECK(t.g_minus[i] == prog.config.g_on);
    }
}

TEST_CASE("observed fault count stays within 4 sigma of the binomial") {
  // 10000 cells at rate 0.05: expect 500 +- 4*sqrt(10000*0.05*0.95) ~ [413, 587].
  Tensor<float> w({50, 100}, 0.5f);
  nn::Model<float> m = wrap_weights(w);
  CrossbarConfig cfg = small_cfg();
  cfg.tile_rows = 128;
  cfg.tile_cols = 128;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  CHECK(prog.cell_count() == 10000);
  auto [faulty, map] = xbar::inject_faults(prog, 0.05, 0.0, 123);
  const double mean = 500, sigma = std::sqrt(10000 * 0.05 * 0.95);
  CHECK(static_cast<double>(map.entries.size()) >= mean - 4 * sigma);
  CHECK(static_cast<double>(map.entries.size()) <= mean + 4 * sigma);
}

TEST_CASE("fault injection is reproducible from its seed") {
  Rng rng(6);
  Tensor<float> w = Tensor<float>::randn({10, 10}, rng);
  nn::Model<float> m1 = wrap_weights(w), m2 = wrap_weights(w);
  CrossbarProgram p1 = xbar::map_weights(m1, small_cfg());
  CrossbarProgram p2 = xbar::map_weights(m2, small_cfg());
  auto [f1, map1] = xbar::inject_faults(p1, 0.05, 0.03, 42);
  auto [f2, map2] = xbar::inject_faults(p2, 0.05, 0.03, 42);
  REQUIRE(map1.entries.size() == map2.entries.size());
  CHECK(map1.serialize() == map2.serialize());
}

TEST_CASE("variation: sigma 0 is identity, lognormal std matches, clamping holds") {
  Tensor<float> w({20, 50}, 0.0f);
  nn::Model<float> m = wrap_weights(w);
  CrossbarConfig cfg = small_cfg();
  cfg.tile_rows = 64;
  cfg.tile_cols = 64;
  cfg.g_off = 0.05f;
  cfg.g_on = 20.0f;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  // park all conductances mid-range so sigma=0.1 never clamps
  for (auto& t : prog.tiles) {
    t.g_plus.fill(1.0f);
    t.g_minus.fill(1.0f);
  }

  CrossbarProgram same = xbar::apply_variation(prog, 0.0, 3);
  for (size_t t = 0; t < prog.tiles.size(); ++t)
    for (std::int64_t i = 0; i < prog.tiles[t].g_plus.numel(); ++i)
      CHECK(same.tiles[t].g_plus[i] == prog.tiles[t].g_plus[i]);

  CrossbarProgram varied = xbar::apply_variation(prog, 0.1, 3);
  double sum = 0, sumsq = 0;
  std::int64_t n = 0;
  for (size_t t = 0; t < prog.tiles.size(); ++t)
    for (std::int64_t i = 0; i < prog.tiles[t].g_plus.numel(); ++i) {
      double lr = std::log(varied.tiles[t].g_plus[i] / prog.tiles[t].g_plus[i]);
      sum += lr;
      sumsq += lr * lr;
      ++n;
    }
  double std_dev = std::sqrt(sumsq / n - (sum / n) * (sum / n));
  CHECK(std_dev == doctest::Approx(0.1).epsilon(0.10));

  CrossbarProgram big = xbar::apply_variation(prog, 3.0, 4);
  for (const auto& t : big.tiles)
    for (std::int64_t i = 0; i < t.g_plus.numel(); ++i) {
      CHECK(t.g_plus[i] >= cfg.g_off);
      CHECK(t.g_plus[i] <= cfg.g_on);
    }
}

TEST_CASE("stuck cells are invariant under variation") {
  Rng rng(8);
  Tensor<float> w = Tensor<float>::randn({12, 12}, rng);
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());
  auto [faulty, map] = xbar::inject_faults(prog, 0.1, 0.1, 77);
  CrossbarProgram varied = xbar::apply_variation(faulty, 0.5, 78);
  for (const auto& e : map.entries) {
    const auto& pair = varied.tiles[static_cast<size_t>(e.tile / 2)];
    const Tensor<float>& plane = e.tile % 2 == 0 ? pair.g_plus : pair.g_minus;
    float expect = e.kind == FaultKind::StuckOn ? prog.config.g_on : prog.config.g_off;
    CHECK(plane.at2(e.row, e.col) == expect);
  }
}

TEST_CASE("noise-free ideal mvm equals the digital product of the read-back") {
  Rng rng(9);
  Tensor<float> w = Tensor<float>::randn({20, 13}, rng); // forces 2x3 tiling at 8x8
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());
  Tensor<float> rb = xbar::read_back(prog, 0);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> x = Tensor<float>::randn({13}, rng);
    Rng noise(1);
    Tensor<float> y = xbar::analog_mvm(prog, 0, x, noise);
    for (int c = 0; c < 20; ++c) {
      double expect = 0;
      for (int r = 0; r < 13; ++r) expect += double(rb.at2(c, r)) * x[r];
      CHECK(y[c] == doctest::Approx(expect).epsilon(1e-5));
    }
  }
}

TEST_CASE("zero input gives zero output in adc mode") {
  Rng rng(10);
  Tensor<float> w = Tensor<float>::randn({5, 5}, rng);
  nn::Model<float> m = wrap_weights(w);
  CrossbarConfig cfg = small_cfg();
  cfg.mode = ReadoutMode::Adc;
  cfg.adc_bits = 8;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  Tensor<float> x({5}, 0.0f);
  Rng noise(1);
  Tensor<float> y = xbar::analog_mvm(prog, 0, x, noise);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("binarized partial sums follow the sign rule") {
  // One column with differential current +0.7 under theta=0 reads +1.
  Tensor<float> w({1, 2}, std::vector<float>{0.7f, 0.0f});
  nn::Model<float> m;
  Rng init(1);
  auto* d = m.add<nn::Dense<float>>(2, 1, false, false, init);
  d->weight() = w;
  m.add<nn::SignAct<float>>(); // makes the dense layer eligible for BPS readout
  CrossbarConfig cfg = small_cfg();
  cfg.mode = ReadoutMode::BinarizedPartialSum;
  cfg.levels = 1024;
  CrossbarProgram prog = xbar::map_weights(m, cfg);
  REQUIRE(prog.mapping[0].readout == ReadoutMode::BinarizedPartialSum);

  CHECK_THROWS_WITH_AS(
      [&] {
        Tensor<float> x({2}, std::vector<float>{1.0f, 0.0f});
        Rng noise(1);
        return xbar::analog_mvm(prog, 0, x, noise);
      }(),
      doctest::Contains("reference"), Error);

  prog.tiles[0].theta.assign(1, 0.0f);
  Tensor<float> x({2}, std::vector<float>{1.0f, 0.0f});
  Rng noise(1);
  Tensor<float> y = xbar::analog_mvm(prog, 0, x, noise);
  CHECK(y[0] == 1.0f);

  Tensor<float> xneg({2}, std::vector<float>{-1.0f, 0.0f});
  CHECK(xbar::analog_mvm(prog, 0, xneg, noise)[0] == -1.0f);
}

TEST_CASE("all-stuck-off program behaves as the bias-only network") {
  data::Dataset ds = data::blobs(64, 2, 1.0, 31);
  nn::Model<float> model = zoo::mlp_s(2, 2, 31);
  nn::TrainConfig tc;
  tc.epochs = 3;
  nn::train(model, ds.x, ds.labels, tc);

  CrossbarConfig cfg;
  cfg.mode = ReadoutMode::Ideal;
  CrossbarProgram prog = xbar::map_weights(model, cfg);
  auto [dead, map] = xbar::inject_faults(prog, 0.0, 1.0, 1);

  Tensor<float> out = xbar::faulty_forward(model, dead, ds.x);

  // bias-only reference: all dense weights zeroed, digital forward
  nn::Model<float> bias_only = model;
  for (auto& l : bias_only.layers)
    if (auto* d = dynamic_cast<nn::Dense<float>*>(l.get())) d->weight().fill(0.0f);
  Tensor<float> expect = nn::forward(bias_only, ds.x, Mode::Eval);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("faultmap text round-trips bit-exactly and replays") {
  Rng rng(12);
  Tensor<float> w = Tensor<float>::randn({9, 9}, rng);
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());
  auto [faulty, map] = xbar::inject_faults(prog, 0.07, 0.05, 99);

  std::string text = map.serialize();
  FaultMap parsed = FaultMap::parse(text);
  CHECK(parsed.seed == 99);
  CHECK(parsed.serialize() == text);

  CrossbarProgram replayed = xbar::apply_fault_map(prog, parsed);
  for (size_t t = 0; t < faulty.tiles.size(); ++t)
    for (std::int64_t i = 0; i < faulty.tiles[t].g_plus.numel(); ++i) {
      CHECK(replayed.tiles[t].g_plus[i] == faulty.tiles[t].g_plus[i]);
      CHECK(replayed.tiles[t].g_minus[i] == faulty.tiles[t].g_minus[i]);
    }
}

TEST_CASE("drift entries parse, apply multiplicatively and clamp") {
  Tensor<float> w({1, 1}, std::vector<float>{1.0f});
  nn::Model<float> m = wrap_weights(w);
  CrossbarProgram prog = xbar::map_weights(m, small_cfg());
  float before = prog.tiles[0].g_plus[0];
  FaultMap map = FaultMap::parse("0,0,0,drift,0.5\n");
  CrossbarProgram out = xbar::apply_fault_map(prog, map);
  CHECK(out.tiles[0].g_plus[0] ==
        doctest::Approx(std::max(prog.config.g_off, before * 0.5f)));
  CHECK_THROWS_AS(FaultMap::parse("0,0,0,drift,1.5\n"), Error);
  CHECK_THROWS_AS(FaultMap::parse("0,0,0,wobble\n"), Error);
}

TEST_CASE("monotone degradation: accuracy non-increasing in stuck-at rate") {
  data::Dataset ds = data::blobs(600, 3, 1.0, 55);
  auto [train_ds, test_ds] = data::split(ds, 0.8, 55);
  nn::Model<float> model = zoo::mlp_s(2, 3, 55);
  nn::TrainConfig tc;
  tc.epochs = 15;
  tc.learning_rate = 0.05;
  nn::train(model, train_ds.x, train_ds.labels, tc);

  CrossbarConfig cfg;
  cfg.levels = 256;
  cfg.adc_bits = 12;
  Tensor<float> calib = data::head_inputs(train_ds, 128);
  CrossbarProgram prog = xbar::map_weights(model, cfg, &calib);

  const double rates[] = {0.0, 0.01, 0.02, 0.05, 0.10};
  const int maps_per_rate = 20;
  double prev = 2.0;
  for (double rate : rates) {
    double mean_acc = 0;
    for (int s = 0; s < maps_per_rate; ++s) {
      auto [f, fmap] = xbar::inject_faults(prog, rate, 0.0, derive_stream(1000, s, u64(rate * 1e4)));
      Tensor<float> out = xbar::faulty_forward(model, f, test_ds.x);
      mean_acc += nn::accuracy(out, test_ds.labels);
    }
    mean_acc /= maps_per_rate;
    CHECK(mean_acc <= prev + 0.015); // averages non-increasing, small sampling slack
    prev = mean_acc;
  }
}

TEST_SUITE_END();
