#include "cimlab/lab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cimlab/data/datasets.hpp"
#include "cimlab/mitigate/mitigation.hpp"
#include "cimlab/selftest/selftest.hpp"
#include "cimlab/uq/metrics.hpp"
#include "cimlab/zoo.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace cimlab::lab {

int lab_threads() {
  const char* env = std::getenv("LAB_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string hex64(u64 v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    require(f.good(), "cannot write '" + tmp.string() + "'");
    f << content;
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Config-driven builders

struct TaskData {
  data::Dataset train;
  data::Dataset test;
  data::Dataset ood; // empty unless the task needs it
};

TaskData build_data(const ExperimentConfig& cfg, u64 run_seed, bool want_ood) {
  TaskData td;
  const std::string kind = cfg.get("dataset.kind", "blobs");
  const double frac = cfg.get_num("dataset.train_fraction", 0.8);
  const u64 ds_seed = derive_stream(static_cast<u64>(cfg.get_num("dataset.seed", 7)), run_seed);

  if (kind == "blobs") {
    const int n = cfg.get_int("dataset.n", 4000);
    const int classes = cfg.get_int("dataset.classes", 4);
    const double spread = cfg.get_num("dataset.spread", 1.0);
    data::Dataset full = data::blobs(n, classes, spread, ds_seed);
    auto [tr, te] = data::split(full, frac, ds_seed);
    td.train = std::move(tr);
    td.test = std::move(te);
    if (want_ood) {
      const double shift = cfg.get_num("dataset.ood_shift", 4.0);
      const double sx = shift / std::sqrt(2.0), sy = shift / std::sqrt(2.0);
      td.ood = data::blobs(td.test.size(), classes, spread, derive_stream(ds_seed, 0x0D), sx, sy);
    }
  } else if (kind == "moons") {
    const int n = cfg.get_int("dataset.n", 4000);
    const double noise = cfg.get_num("dataset.noise", 0.1);
    data::Dataset full = data::moons(n, noise, ds_seed);
    auto [tr, te] = data::split(full, frac, ds_seed);
    td.train = std::move(tr);
    td.test = std::move(te);
    if (want_ood) {
      const double shift = cfg.get_num("dataset.ood_shift", 4.0);
      td.ood = data::moons(td.test.size(), noise, derive_stream(ds_seed, 0x0D));
      for (int i = 0; i < td.ood.size(); ++i) {
        td.ood.x.at2(i, 0) += static_cast<float>(shift / std::sqrt(2.0));
        td.ood.x.at2(i, 1) += static_cast<float>(shift / std::sqrt(2.0));
      }
    }
  } else if (kind == "idx") {
    auto [x, labels] = data::load_idx(cfg.require_get("dataset.images"),
                                      cfg.require_get("dataset.labels"));
    data::Dataset full;
    full.x = std::move(x);
    full.labels = std::move(labels);
    full.classes = 1 + *std::max_element(full.labels.begin(), full.labels.end());
    auto [tr, te] = data::split(full, frac, ds_seed);
    td.train = std::move(tr);
    td.test = std::move(te);
    if (want_ood) {
      td.ood = td.test;
      td.ood.x = data::rotate90(td.test.x);
    }
  } else {
    fail("config: unknown dataset.kind '" + kind + "'");
  }
  return td;
}

zoo::BayesOpts bayes_opts(const ExperimentConfig& cfg) {
  zoo::BayesOpts b;
  const std::string v = cfg.get("bayes.variant", "none");
  if (v == "none") b.variant = zoo::BayesVariant::None;
  else if (v == "neuron") b.variant = zoo::BayesVariant::Neuron;
  else if (v == "spatial") b.variant = zoo::BayesVariant::Spatial;
  else if (v == "scale") b.variant = zoo::BayesVariant::Scale;
  else if (v == "vi") b.variant = zoo::BayesVariant::VI;
  else if (v == "invnorm") b.variant = zoo::BayesVariant::InvNorm;
  else fail("config: unknown bayes.variant '" + v + "'");
  b.p = cfg.get_num("bayes.p", b.p);
  b.p_min = cfg.get_num("bayes.p_min", b.p_min);
  b.p_max = cfg.get_num("bayes.p_max", b.p_max);
  b.adaptive = cfg.get_bool("bayes.adaptive", b.adaptive);
  b.prior_sigma = cfg.get_num("bayes.prior_sigma", b.prior_sigma);
  b.delta = cfg.get_num("bayes.delta", b.delta);
  return b;
}

nn::Model<float> build_model(const ExperimentConfig& cfg, const TaskData& td, u64 run_seed) {
  const std::string arch = cfg.get("model.arch", "mlp-s");
  const bool binary = cfg.get_bool("model.binary", false);
  zoo::BayesOpts b = bayes_opts(cfg);
  if (arch == "mlp-s") {
    int in = static_cast<int>(td.train.x.numel() / td.train.size());
    return zoo::mlp_s(in, td.train.classes, run_seed, binary, b);
  }
  if (arch == "conv-s") {
    require(td.train.x.rank() == 4, "conv-s needs [N,C,H,W] input data");
    return zoo::conv_s(td.train.x.dim(1), td.train.x.dim(2), td.train.x.dim(3), td.train.classes,
                       run_seed, binary, b);
  }
  if (arch == "mlp-b") {
    int in = static_cast<int>(td.train.x.numel() / td.train.size());
    return zoo::mlp_b(in, td.train.classes, run_seed, cfg.get_int("model.hidden", 64));
  }
  fail("config: unknown model.arch '" + arch + "'");
}

nn::TrainConfig train_config(const ExperimentConfig& cfg) {
  nn::TrainConfig tc;
  tc.epochs = cfg.get_int("train.epochs", 30);
  tc.batch_size = cfg.get_int("train.batch_size", 64);
  tc.learning_rate = cfg.get_num("train.lr", 0.05);
  const std::string opt = cfg.get("train.optimizer", "sgd");
  if (opt == "sgd") tc.optimizer = nn::Optimizer::SGD;
  else if (opt == "adam") tc.optimizer = nn::Optimizer::Adam;
  else fail("config: unknown train.optimizer '" + opt + "'");
  const std::string loss = cfg.get("train.loss", "ce");
  if (loss == "ce") tc.loss = nn::LossKind::CrossEntropy;
  else if (loss == "mse") tc.loss = nn::LossKind::MSE;
  else fail("config: unknown train.loss '" + loss + "'");
  tc.binary_weights = cfg.get_bool("model.binary", false);
  const double sigma = cfg.get_num("train.sigma", 0.0);
  if (sigma > 0) tc.noise_spec = nn::NoiseSpec{sigma};
  tc.vi_beta = cfg.get_num("train.vi_beta", -1.0);
  return tc;
}

xbar::CrossbarConfig xbar_config(const ExperimentConfig& cfg) {
  xbar::CrossbarConfig xc;
  xc.tile_rows = cfg.get_int("crossbar.tile_rows", 128);
  xc.tile_cols = cfg.get_int("crossbar.tile_cols", 128);
  xc.g_on = static_cast<float>(cfg.get_num("crossbar.g_on", 1.0));
  xc.g_off = static_cast<float>(cfg.get_num("crossbar.g_off", 0.1));
  xc.levels = cfg.get_int("crossbar.levels", 256);
  const std::string mode = cfg.get("crossbar.mode", "adc");
  if (mode == "ideal") xc.mode = xbar::ReadoutMode::Ideal;
  else if (mode == "adc") xc.mode = xbar::ReadoutMode::Adc;
  else if (mode == "bps") xc.mode = xbar::ReadoutMode::BinarizedPartialSum;
  else fail("config: unknown crossbar.mode '" + mode + "'");
  xc.adc_bits = cfg.get_int("crossbar.adc_bits", 12);
  xc.variation_sigma = static_cast<float>(cfg.get_num("crossbar.variation_sigma", 0.0));
  xc.read_noise_sigma = static_cast<float>(cfg.get_num("crossbar.read_noise_sigma", 0.0));
  xc.validate();
  return xc;
}

/// Maps the model with dataset-driven ADC calibration; installs sensing
/// references when any layer reads binarized partial sums.
xbar::CrossbarProgram map_program(const ExperimentConfig& cfg, nn::Model<float>& model,
                                  const TaskData& td, u64 run_seed, const fs::path& out_dir,
                                  std::vector<std::pair<std::string, std::string>>* files) {
  xbar::CrossbarConfig xc = xbar_config(cfg);
  Tensor<float> calib = data::head_inputs(td.train, std::min(256, td.train.size()));
  xbar::CrossbarProgram prog = xbar::map_weights(model, xc, &calib);

  bool any_bps = false;
  for (const auto& lm : prog.mapping)
    any_bps |= lm.readout == xbar::ReadoutMode::BinarizedPartialSum;
  if (any_bps) {
    mitigate::ReferenceVector ref;
    if (cfg.get_bool("reference.zero", false)) {
      ref.scenario_count = 0;
      ref.theta.resize(prog.tiles.size());
      for (size_t t = 0; t < prog.tiles.size(); ++t)
        ref.theta[t].assign(static_cast<size_t>(prog.tiles[t].g_plus.dim(1)), 0.f);
    } else {
      ref = mitigate::generate_reference(model, prog, cfg.get_int("reference.scenarios", 5),
                                         derive_stream(run_seed, 0x8EF));
    }
    mitigate::install_reference(prog, ref);
    if (files) {
      std::string name = "reference_seed" + std::to_string(run_seed) + ".txt";
      write_atomic(out_dir / name, ref.serialize());
      files->push_back({"reference_file", name});
    }
  }
  return prog;
}

double crossbar_accuracy(nn::Model<float>& model, const xbar::CrossbarProgram& prog,
                         const data::Dataset& ds, u64 read_seed) {
  Tensor<float> out = xbar::faulty_forward(model, prog, ds.x, read_seed);
  return nn::accuracy(out, ds.labels);
}

// ---------------------------------------------------------------------------
// Per-seed rows

struct SeedRow {
  u64 seed = 0;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::pair<std::string, std::string>> files;
};

using SeedFn = std::function<std::vector<SeedRow>(u64 seed)>;

std::vector<SeedRow> run_seeds(const std::vector<u64>& seeds, const SeedFn& fn) {
  const int threads = std::min<int>(lab_threads(), static_cast<int>(seeds.size()));
  std::vector<std::vector<SeedRow>> results(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());

  if (threads <= 1) {
    for (size_t i = 0; i < seeds.size(); ++i) results[i] = fn(seeds[i]);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        size_t i = next.fetch_add(1);
        if (i >= seeds.size()) return;
        try {
          results[i] = fn(seeds[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<SeedRow> flat;
  for (auto& rs : results)
    for (auto& r : rs) flat.push_back(std::move(r));
  return flat;
}

void inject_rates(const ExperimentConfig& cfg, double& on, double& off) {
  on = cfg.get_num("inject.stuck_on", 0.05);
  off = cfg.get_num("inject.stuck_off", 0.0);
}

// ---------------------------------------------------------------------------
// Pipelines (one function per task; each returns the per-seed rows)

std::vector<SeedRow> task_train(const ExperimentConfig& cfg, const fs::path&) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::TrainLog log = nn::train(model, td.train.x, td.train.labels, train_config(cfg));
    Tensor<float> out = nn::forward(model, td.test.x, Mode::Eval);
    SeedRow row{seed,
                {{"train_acc", log.epoch_accuracy.empty() ? 0 : log.epoch_accuracy.back()},
                 {"test_acc", nn::accuracy(out, td.test.labels)},
                 {"final_loss", log.epoch_loss.empty() ? 0 : log.epoch_loss.back()}},
                {}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_inject(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    SeedRow row;
    row.seed = seed;
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, &row.files);
    double clean = crossbar_accuracy(model, prog, td.test, 0);

    double on, off;
    inject_rates(cfg, on, off);
    auto [prog_f, map] = xbar::inject_faults(prog, on, off, derive_stream(seed, 0xF0));
    const double vsig = cfg.get_num("inject.variation", 0.0);
    if (vsig > 0) prog_f = xbar::apply_variation(prog_f, vsig, derive_stream(seed, 0xF1));
    double faulty = crossbar_accuracy(model, prog_f, td.test, derive_stream(seed, 0xF2));

    std::string name = "faultmap_seed" + std::to_string(seed) + ".txt";
    write_atomic(out_dir / name, map.serialize());
    row.files.push_back({"faultmap_file", name});
    row.metrics = {{"stuck_on", on},
                   {"stuck_off", off},
                   {"clean_acc", clean},
                   {"faulty_acc", faulty},
                   {"acc_drop", clean - faulty}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_mc_eval(const ExperimentConfig& cfg, const fs::path&) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    const int t_samples = cfg.get_int("mc.samples", 32);
    auto results =
        bayes::mc_forward_batch(model, td.test.x, t_samples, derive_stream(seed, 0x3C));
    const int n = td.test.size();
    Tensor<float> mean_probs({n, td.test.classes});
    double mean_h = 0, mean_mi = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < td.test.classes; ++j)
        mean_probs.at2(i, j) = results[static_cast<size_t>(i)].mean_probs[j];
      mean_h += uq::predictive_entropy(results[static_cast<size_t>(i)]);
      if (t_samples >= 2) mean_mi += uq::mutual_information(results[static_cast<size_t>(i)]);
    }
    SeedRow row{seed,
                {{"mc_acc", nn::accuracy(mean_probs, td.test.labels)},
                 {"ece", uq::ece(mean_probs, td.test.labels)},
                 {"mean_entropy", mean_h / n},
                 {"mean_mi", mean_mi / n}},
                {}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_ood_eval(const ExperimentConfig& cfg, const fs::path&) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, true);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    const int t_samples = cfg.get_int("mc.samples", 32);
    auto score = [&](const Tensor<float>& x, u64 s) {
      auto results = bayes::mc_forward_batch(model, x, t_samples, s);
      std::vector<double> out;
      out.reserve(results.size());
      for (const auto& r : results) out.push_back(uq::predictive_entropy(r));
      return out;
    };
    uq::ScoredSet in_set{score(td.test.x, derive_stream(seed, 0x3C)), uq::Origin::InDistribution};
    uq::ScoredSet ood_set{score(td.ood.x, derive_stream(seed, 0x3D)), uq::Origin::OOD};
    uq::OodResult r = uq::ood_eval(in_set, ood_set);

    Tensor<float> out = nn::forward(model, td.test.x, Mode::Eval);
    double mean_in = 0, mean_ood = 0;
    for (double s : in_set.scores) mean_in += s;
    for (double s : ood_set.scores) mean_ood += s;
    SeedRow row{seed,
                {{"auroc", r.auroc},
                 {"detection_rate", r.detection_rate_at_5pct_fpr},
                 {"threshold", r.threshold},
                 {"test_acc", nn::accuracy(out, td.test.labels)},
                 {"mean_entropy_in", mean_in / in_set.scores.size()},
                 {"mean_entropy_ood", mean_ood / ood_set.scores.size()}},
                {}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_oneshot(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    SeedRow row;
    row.seed = seed;
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, &row.files);
    selftest::OneShotVector v =
        selftest::generate_oneshot(model, prog, cfg.get_int("oneshot.steps", 400),
                                   cfg.get_num("oneshot.lr", 0.05), derive_stream(seed, 0x05));

    int false_pos = 0;
    const int replays = cfg.get_int("oneshot.replays", 200);
    for (int r = 0; r < replays; ++r)
      false_pos += !selftest::oneshot_test(model, prog, v, derive_stream(seed, 0xFF, r)).pass;

    double on, off;
    inject_rates(cfg, on, off);
    auto factory = [&](u64 s) { return xbar::inject_faults(prog, on, off, s).first; };
    selftest::CoverageReport cov = selftest::fault_coverage_oneshot(
        model, factory, v, cfg.get_int("oneshot.scenarios", 100), derive_stream(seed, 0xC0));

    std::string name = "oneshot_seed" + std::to_string(seed) + ".txt";
    write_atomic(out_dir / name, v.serialize());
    row.files.push_back({"oneshot_file", name});
    row.metrics = {{"stat_fault_free", v.stat_fault_free},
                   {"tau", v.tau},
                   {"false_pos", double(false_pos)},
                   {"replays", double(replays)},
                   {"detection_rate", cov.coverage()}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_rank(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::TrainLog log = nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    const int n = td.train.size();
    const double frac = cfg.get_num("rank.fraction", 0.002);
    const int k = std::max(1, static_cast<int>(std::lround(frac * n)));
    selftest::RankedTestSet ranked = selftest::rank_tests(log, k);

    Rng pick(derive_stream(seed, 0x7D));
    std::vector<int> randset;
    std::vector<char> used(static_cast<size_t>(n), 0);
    while (static_cast<int>(randset.size()) < k) {
      int i = static_cast<int>(pick.below(static_cast<u64>(n)));
      if (!used[static_cast<size_t>(i)]) {
        used[static_cast<size_t>(i)] = 1;
        randset.push_back(i);
      }
    }

    SeedRow row;
    row.seed = seed;
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, &row.files);
    double on, off;
    inject_rates(cfg, on, off);
    auto factory = [&](u64 s) { return xbar::inject_faults(prog, on, off, s).first; };
    const int scenarios = cfg.get_int("rank.scenarios", 40);
    // Same coverage seed for both batteries: scenarios are paired.
    selftest::CoverageReport cov_r = selftest::fault_coverage(
        model, prog, factory, gather_rows(td.train.x, ranked.indices), scenarios,
        derive_stream(seed, 0xC1));
    selftest::CoverageReport cov_n = selftest::fault_coverage(
        model, prog, factory, gather_rows(td.train.x, randset), scenarios,
        derive_stream(seed, 0xC1));

    row.metrics = {{"k", double(k)},
                   {"cov_ranked", cov_r.coverage()},
                   {"cov_random", cov_n.coverage()},
                   {"cov_gain", cov_r.coverage() - cov_n.coverage()}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_fingerprint(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    const int in_dim = static_cast<int>(td.train.x.numel() / td.train.size());
    const int classes = td.train.classes;

    nn::Model<float> baseline = zoo::mlp_s(in_dim, classes, seed);
    nn::train(baseline, td.train.x, td.train.labels, train_config(cfg));
    double base_acc =
        nn::accuracy(nn::forward(baseline, td.test.x, Mode::Eval), td.test.labels);

    selftest::FingerprintSpec spec;
    spec.aux_units = cfg.get_int("fingerprint.aux", 8);
    spec.lambda = cfg.get_num("fingerprint.lambda", 0.1);
    spec.target_seed = derive_stream(seed, 0xFB);
    nn::Model<float> model = zoo::mlp_s_aux(in_dim, classes, spec.aux_units, seed);
    selftest::FingerprintTrainResult ftr = selftest::train_with_fingerprint(
        model, spec, td.train.x, td.train.labels, td.test.x, td.test.labels, classes,
        train_config(cfg), base_acc);

    // Fault-free false positives on the calibration set (0 by construction).
    Tensor<float> calib_out = nn::forward(model, td.test.x, Mode::Eval);
    int false_pos = 0;
    for (int i = 0; i < td.test.size(); ++i)
      false_pos += !selftest::check_fingerprint(
          selftest::head_aux(calib_out, i, classes, spec.aux_units), ftr.fingerprint);

    SeedRow row;
    row.seed = seed;
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, &row.files);
    double on, off;
    inject_rates(cfg, on, off);
    auto [prog_f, map] = xbar::inject_faults(prog, on, off, derive_stream(seed, 0xF3));
    Tensor<float> out = xbar::faulty_forward(model, prog_f, td.test.x, derive_stream(seed, 0xF4));
    int detected = 0;
    for (int i = 0; i < td.test.size(); ++i)
      detected += !selftest::check_fingerprint(
          selftest::head_aux(out, i, classes, spec.aux_units), ftr.fingerprint);

    std::string name = "fingerprint_seed" + std::to_string(seed) + ".txt";
    write_atomic(out_dir / name, ftr.fingerprint.serialize());
    row.files.push_back({"fingerprint_file", name});
    std::string mapname = "faultmap_seed" + std::to_string(seed) + ".txt";
    write_atomic(out_dir / mapname, map.serialize());
    row.files.push_back({"faultmap_file", mapname});

    row.metrics = {{"baseline_acc", base_acc},
                   {"fp_acc", ftr.task_accuracy},
                   {"acc_gap", base_acc - ftr.task_accuracy},
                   {"false_pos", double(false_pos)},
                   {"tol", ftr.fingerprint.tol},
                   {"detection_rate", double(detected) / td.test.size()}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_recalibrate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return run_seeds(cfg.seeds(), [&](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));

    SeedRow row;
    row.seed = seed;
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, &row.files);
    double clean = crossbar_accuracy(model, prog, td.test, 0);

    const double vsig = cfg.get_num("inject.variation", 0.4);
    xbar::CrossbarProgram prog_v = xbar::apply_variation(prog, vsig, derive_stream(seed, 0xAB));
    double on, off;
    on = cfg.get_num("inject.stuck_on", 0.0);
    off = cfg.get_num("inject.stuck_off", 0.0);
    if (on > 0 || off > 0)
      prog_v = xbar::inject_faults(prog_v, on, off, derive_stream(seed, 0xAC)).first;
    double faulty = crossbar_accuracy(model, prog_v, td.test, derive_stream(seed, 0xAD));

    const double frac = cfg.get_num("recal.fraction", 0.002);
    const int n_calib = std::max(1, static_cast<int>(std::lround(frac * td.train.size())));
    mitigate::CalibrationSet calib{data::head_inputs(td.train, n_calib), frac};
    nn::Model<float> recal =
        mitigate::approx_bn_recalibrate(model, prog_v, calib, derive_stream(seed, 0xAE));
    double recovered = crossbar_accuracy(recal, prog_v, td.test, derive_stream(seed, 0xAD));

    double drop = clean - faulty;
    row.metrics = {{"clean_acc", clean},
                   {"faulty_acc", faulty},
                   {"recal_acc", recovered},
                   {"acc_drop", drop},
                   {"recovered_frac", drop > 1e-9 ? (recovered - faulty) / drop : 0.0},
                   {"calib_size", double(n_calib)}};
    return std::vector<SeedRow>{row};
  });
}

std::vector<SeedRow> task_sweep(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const std::vector<double> rates =
      cfg.get_num_list("sweep.rates", {0.0, 0.01, 0.02, 0.05, 0.10});
  return run_seeds(cfg.seeds(), [&, rates](u64 seed) {
    TaskData td = build_data(cfg, seed, false);
    nn::Model<float> model = build_model(cfg, td, seed);
    nn::train(model, td.train.x, td.train.labels, train_config(cfg));
    xbar::CrossbarProgram prog = map_program(cfg, model, td, seed, out_dir, nullptr);

    std::vector<SeedRow> rows;
    for (double rate : rates) {
      SeedRow row;
      row.seed = seed;
      auto [prog_f, map] =
          xbar::inject_faults(prog, rate, 0.0, derive_stream(seed, 0xF5, u64(rate * 10000)));
      double acc = crossbar_accuracy(model, prog_f, td.test, derive_stream(seed, 0xF6));
      char name[64];
      std::snprintf(name, sizeof name, "faultmap_seed%llu_rate%.4f.txt",
                    static_cast<unsigned long long>(seed), rate);
      write_atomic(out_dir / name, map.serialize());
      row.files.push_back({"faultmap_file", name});
      row.metrics = {{"rate", rate}, {"faulty_acc", acc}};
      rows.push_back(std::move(row));
    }
    return rows;
  });
}

// ---------------------------------------------------------------------------
// Output writers

std::string rows_to_csv(const std::vector<SeedRow>& rows) {
  require(!rows.empty(), "run produced no rows");
  std::ostringstream os;
  os << "seed";
  for (const auto& [k, v] : rows[0].metrics) os << "," << k;
  for (const auto& [k, v] : rows[0].files) os << "," << k;
  os << "\n";
  for (const auto& r : rows) {
    os << r.seed;
    for (const auto& [k, v] : r.metrics) os << "," << fmt(v);
    for (const auto& [k, v] : r.files) os << "," << v;
    os << "\n";
  }
  return os.str();
}

json mean_metrics(const std::vector<SeedRow>& rows) {
  json m = json::object();
  if (rows.empty()) return m;
  for (size_t c = 0; c < rows[0].metrics.size(); ++c) {
    double sum = 0;
    for (const auto& r : rows) sum += r.metrics[c].second;
    m[rows[0].metrics[c].first] = sum / double(rows.size());
  }
  return m;
}

} // namespace

int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);

  try {
    const std::string task = cfg.require_get("task");

    // Provenance: the exact config and its content hashes.
    std::string canon;
    for (const auto& [k, v] : cfg.kv) canon += k + " = " + v + "\n";
    write_atomic(dir / "config.txt", canon);
    u64 inputs_hash = cfg.hash();
    if (cfg.get("dataset.kind", "blobs") == "idx") {
      inputs_hash = derive_stream(inputs_hash, fnv1a(read_file(cfg.require_get("dataset.images"))),
                                  fnv1a(read_file(cfg.require_get("dataset.labels"))));
    }

    std::vector<SeedRow> rows;
    json extras = json::object();
    if (task == "train") rows = task_train(cfg, dir);
    else if (task == "inject") rows = task_inject(cfg, dir);
    else if (task == "mc-eval") rows = task_mc_eval(cfg, dir);
    else if (task == "ood-eval") rows = task_ood_eval(cfg, dir);
    else if (task == "oneshot") rows = task_oneshot(cfg, dir);
    else if (task == "rank") {
      rows = task_rank(cfg, dir);
      int wins = 0, ties = 0;
      for (const auto& r : rows) {
        double gain = 0;
        for (const auto& [k, v] : r.metrics)
          if (k == "cov_gain") gain = v;
        if (gain > 0) ++wins;
        else if (gain == 0) ++ties;
      }
      int decided = static_cast<int>(rows.size()) - ties;
      extras["sign_test_wins"] = wins;
      extras["sign_test_n"] = decided;
      extras["sign_test_p"] = decided > 0 ? selftest::sign_test_pvalue(wins, decided) : 1.0;
    } else if (task == "fingerprint") rows = task_fingerprint(cfg, dir);
    else if (task == "recalibrate") rows = task_recalibrate(cfg, dir);
    else if (task == "sweep") rows = task_sweep(cfg, dir);
    else fail("config: unknown task '" + task + "'");

    write_atomic(dir / "per_seed.csv", rows_to_csv(rows));

    json summary;
    summary["task"] = task;
    summary["config_hash"] = hex64(cfg.hash());
    summary["inputs_hash"] = hex64(inputs_hash);
    summary["rows"] = rows.size();
    summary["metrics"] = mean_metrics(rows);
    for (auto& [k, v] : extras.items()) summary[k] = v;
    const auto t1 = std::chrono::steady_clock::now();
    summary["wall_time_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    write_atomic(dir / "summary.json", summary.dump(2) + "\n");

    log << "wrote " << (dir / "summary.json").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    write_atomic(dir / "FAILED.marker", std::string(e.what()) + "\n");
    log << "run failed: " << e.what() << "\n";
    return 1;
  }
}

int run_report(const std::string& out_dir, std::ostream& os) {
  fs::path csv = fs::path(out_dir) / "per_seed.csv";
  require(fs::exists(csv), "report: no per_seed.csv in '" + out_dir + "'");
  std::ifstream f(csv);
  std::string header;
  std::getline(f, header);
  std::vector<std::string> cols;
  {
    std::istringstream hs(header);
    std::string c;
    while (std::getline(hs, c, ',')) cols.push_back(c);
  }
  std::vector<std::vector<double>> numeric(cols.size());
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    size_t i = 0;
    while (std::getline(ls, cell, ',') && i < cols.size()) {
      try {
        size_t pos = 0;
        double v = std::stod(cell, &pos);
        if (pos == cell.size()) numeric[i].push_back(v);
      } catch (...) {
        // non-numeric column (file references)
      }
      ++i;
    }
  }
  json report;
  for (size_t i = 0; i < cols.size(); ++i) {
    if (numeric[i].empty()) continue;
    double mean = 0;
    for (double v : numeric[i]) mean += v;
    mean /= double(numeric[i].size());
    double var = 0;
    for (double v : numeric[i]) var += (v - mean) * (v - mean);
    double sd = numeric[i].size() > 1 ? std::sqrt(var / double(numeric[i].size() - 1)) : 0.0;
    report[cols[i]] = {{"mean", mean}, {"std", sd}, {"n", numeric[i].size()}};
    os << cols[i] << ": mean " << fmt(mean) << "  std " << fmt(sd) << "  n "
       << numeric[i].size() << "\n";
  }
  write_atomic(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  return 0;
}

} // namespace cimlab::lab
