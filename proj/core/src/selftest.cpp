#include "cimlab/selftest/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "cimlab/nn/loss.hpp"

namespace cimlab::selftest {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Hidden dense/conv layers whose outputs are pooled: all weight layers except
/// the classifier head (the last one) when there is more than one.
std::vector<int> monitored_layer_indices(const nn::Model<float>& model) {
  std::vector<int> idx;
  for (int i = 0; i < model.size(); ++i) {
    auto k = model.layers[static_cast<size_t>(i)]->kind();
    if (k == nn::LayerKind::Dense || k == nn::LayerKind::Conv2d) idx.push_back(i);
  }
  require(!idx.empty(), "one-shot: model has no dense/conv layers to monitor");
  if (idx.size() > 1) idx.pop_back();
  return idx;
}

struct Moments {
  double m1 = 0;     // mean
  double m2 = 0;     // population variance
  std::int64_t n = 0;
};

Moments pooled_moments(const nn::ForwardTrace<float>& trace, const std::vector<int>& monitored) {
  Moments m;
  double sum = 0;
  for (int li : monitored) {
    const auto& t = trace.output[static_cast<size_t>(li)];
    m.n += t.numel();
    for (std::int64_t i = 0; i < t.numel(); ++i) sum += t[i];
  }
  require(m.n > 0, "one-shot: empty monitored population");
  m.m1 = sum / double(m.n);
  double var = 0;
  for (int li : monitored) {
    const auto& t = trace.output[static_cast<size_t>(li)];
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      double d = t[i] - m.m1;
      var += d * d;
    }
  }
  m.m2 = var / double(m.n);
  return m;
}

double stat_from_moments(const Moments& m) {
  return std::sqrt(m.m1 * m.m1 + (m.m2 - 1.0) * (m.m2 - 1.0));
}

} // namespace

double oneshot_statistic(nn::Model<float>& model, const OneShotVector& v,
                         const xbar::CrossbarProgram* prog, u64 read_seed) {
  nn::ForwardTrace<float> trace;
  if (prog) {
    xbar::faulty_forward(model, *prog, v.x_star, read_seed, Mode::Eval, &trace);
  } else {
    nn::forward<float>(model, v.x_star, Mode::Eval, nullptr, &trace);
  }
  return stat_from_moments(pooled_moments(trace, v.monitored_layers));
}

OneShotVector generate_oneshot(nn::Model<float>& model, const xbar::CrossbarProgram& clean_prog,
                               int steps, double lr, u64 seed, OneShotOptions opts) {
  require(steps >= 1, "one-shot: steps must be >= 1");
  require(lr > 0, "one-shot: lr must be > 0");
  xbar::check_compatible(model, clean_prog);

  OneShotVector v;
  v.monitored_layers = monitored_layer_indices(model);

  auto* first = dynamic_cast<nn::Dense<float>*>(model.layers.front().get());
  require(first != nullptr,
          "one-shot: automatic input shape needs a dense first layer; build the vector manually "
          "for image models");
  Rng init(derive_stream(seed, 0x05));
  Tensor<float> x = Tensor<float>::randn({1, first->in_features()}, init);

  Tensor<float> best_x = x;
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  double grad_norm = 0;

  for (int step = 0; step < steps; ++step) {
    nn::ForwardTrace<float> trace;
    nn::forward<float>(model, x, Mode::Eval, nullptr, &trace);
    Moments m = pooled_moments(trace, v.monitored_layers);
    double loss = m.m1 * m.m1 + (m.m2 - 1.0) * (m.m2 - 1.0);

    if (loss < best_loss * (1.0 - 1e-9) || best_loss == std::numeric_limits<double>::infinity()) {
      best_loss = loss;
      best_x = x;
      stale = 0;
    } else if (++stale >= opts.patience) {
      if (best_loss <= 1e-6 || grad_norm <= 1e-8) break; // stationary: converged
      fail("one-shot generation did not converge (loss stalled at " + fmt(best_loss) + ")");
    }

    // dL/dA_k = (2/N) * (m1 + 2*(m2-1)*(A_k - m1)) for every pooled value.
    std::vector<std::pair<int, Tensor<float>>> inject;
    for (int li : v.monitored_layers) {
      const auto& out = trace.output[static_cast<size_t>(li)];
      Tensor<float> g(out.shape());
      for (std::int64_t i = 0; i < out.numel(); ++i)
        g[i] = static_cast<float>(2.0 / double(m.n) *
                                  (m.m1 + 2.0 * (m.m2 - 1.0) * (out[i] - m.m1)));
      inject.push_back({li, std::move(g)});
    }
    nn::Gradients<float> grads = nn::backward_injected(model, trace, inject);
    grad_norm = 0;
    for (std::int64_t i = 0; i < grads.input.numel(); ++i) {
      x[i] -= static_cast<float>(lr) * grads.input[i];
      grad_norm += double(grads.input[i]) * grads.input[i];
    }
    grad_norm = std::sqrt(grad_norm);
    if (grad_norm <= 1e-12) break; // exact stationary point
  }

  v.x_star = best_x;
  v.stat_fault_free = oneshot_statistic(model, v, &clean_prog, 0);

  double worst = v.stat_fault_free;
  for (int r = 0; r < opts.replays; ++r)
    worst = std::max(worst, oneshot_statistic(model, v, &clean_prog, derive_stream(seed, 0xCB, r)));
  v.tau = opts.tau_margin * worst;
  if (v.tau <= v.stat_fault_free) v.tau = v.stat_fault_free * opts.tau_margin + 1e-9;
  return v;
}

TestOutcome oneshot_test(nn::Model<float>& model, const xbar::CrossbarProgram& prog_under_test,
                         const OneShotVector& v, u64 read_seed) {
  TestOutcome out;
  out.statistic = oneshot_statistic(model, v, &prog_under_test, read_seed);
  out.pass = out.statistic <= v.tau;
  return out;
}

std::string OneShotVector::serialize() const {
  std::ostringstream os;
  os << "oneshot v1\n";
  os << "shape";
  for (int d : x_star.shape()) os << " " << d;
  os << "\nmonitored";
  for (int i : monitored_layers) os << " " << i;
  os << "\nstat " << fmt(stat_fault_free) << "\ntau " << fmt(tau) << "\ndata";
  for (std::int64_t i = 0; i < x_star.numel(); ++i) os << " " << fmt(x_star[i]);
  os << "\n";
  return os.str();
}

OneShotVector OneShotVector::parse(const std::string& text) {
  std::istringstream is(text);
  std::string header, version;
  is >> header >> version;
  require(header == "oneshot" && version == "v1", "oneshot artifact: unknown header");
  OneShotVector v;
  std::string key;
  std::vector<int> shape;
  std::vector<float> data;
  while (is >> key) {
    if (key == "shape") {
      std::string rest;
      std::getline(is, rest);
      std::istringstream rs(rest);
      int d;
      while (rs >> d) shape.push_back(d);
    } else if (key == "monitored") {
      std::string rest;
      std::getline(is, rest);
      std::istringstream rs(rest);
      int d;
      while (rs >> d) v.monitored_layers.push_back(d);
    } else if (key == "stat") {
      is >> v.stat_fault_free;
    } else if (key == "tau") {
      is >> v.tau;
    } else if (key == "data") {
      float f;
      while (is >> f) data.push_back(f);
    } else {
      fail("oneshot artifact: unknown key '" + key + "'");
    }
  }
  require(!shape.empty() && !data.empty(), "oneshot artifact: missing shape or data");
  v.x_star = Tensor<float>(shape, data);
  return v;
}

// ---------------------------------------------------------------------------

RankedTestSet rank_tests(const nn::TrainLog& log, int k) {
  const int n = static_cast<int>(log.sample_scores.size());
  require(n > 0, "rank_tests: training log has no per-sample scores");
  require(k >= 0 && k <= n, "rank_tests: k = " + std::to_string(k) +
                                " exceeds dataset size " + std::to_string(n));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    double sa = log.sample_scores[static_cast<size_t>(a)];
    double sb = log.sample_scores[static_cast<size_t>(b)];
    return sa != sb ? sa > sb : a < b;
  });
  RankedTestSet out;
  out.indices.assign(order.begin(), order.begin() + k);
  for (int i : out.indices) out.scores.push_back(log.sample_scores[static_cast<size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------

Tensor<float> rademacher_target(int f, u64 seed) {
  require(f >= 4, "fingerprint: need at least 4 auxiliary units");
  Rng rng(derive_stream(seed, 0xF1));
  Tensor<float> t({f});
  for (int i = 0; i < f; ++i) t[i] = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  return t;
}

Tensor<float> head_class_probs(const Tensor<float>& logits, int classes) {
  const int n = logits.dim(0);
  Tensor<float> probs({n, classes});
  for (int r = 0; r < n; ++r) {
    float mx = logits.at2(r, 0);
    for (int j = 1; j < classes; ++j) mx = std::max(mx, logits.at2(r, j));
    double s = 0;
    for (int j = 0; j < classes; ++j) s += std::exp(double(logits.at2(r, j)) - mx);
    for (int j = 0; j < classes; ++j)
      probs.at2(r, j) = static_cast<float>(std::exp(double(logits.at2(r, j)) - mx) / s);
  }
  return probs;
}

Tensor<float> head_aux(const Tensor<float>& logits, int row, int classes, int aux_units) {
  Tensor<float> aux({aux_units});
  for (int j = 0; j < aux_units; ++j) aux[j] = logits.at2(row, classes + j);
  return aux;
}

FingerprintTrainResult train_with_fingerprint(nn::Model<float>& model, const FingerprintSpec& spec,
                                              const Tensor<float>& x_train,
                                              const std::vector<int>& y_train,
                                              const Tensor<float>& x_calib,
                                              const std::vector<int>& y_calib, int classes,
                                              const nn::TrainConfig& cfg,
                                              std::optional<double> baseline_accuracy) {
  require(spec.lambda > 0, "fingerprint: lambda must be > 0");
  require(spec.aux_units >= 4, "fingerprint: need at least 4 auxiliary units");
  auto* head = dynamic_cast<nn::Dense<float>*>(model.layers.back().get());
  require(head != nullptr && head->out_features() == classes + spec.aux_units,
          "fingerprint: model must end in a dense layer of width classes + aux_units");

  Fingerprint fp;
  fp.f_target = rademacher_target(spec.aux_units, spec.target_seed);
  fp.lambda = spec.lambda;

  const int f = spec.aux_units;
  const Tensor<float>& target = fp.f_target;
  nn::BatchLossFn<float> joint = [&, classes, f](const Tensor<float>& out,
                                                 const std::vector<int>& by) {
    nn::BatchEval<float> ev;
    const int b = out.dim(0);
    ev.grad = Tensor<float>(out.shape());
    Tensor<float> probs = head_class_probs(out, classes);
    double task = 0, aux_loss = 0;
    ev.sample_scores.resize(static_cast<size_t>(b));
    for (int r = 0; r < b; ++r) {
      double p = std::max(double(probs.at2(r, by[static_cast<size_t>(r)])), 1e-12);
      task -= std::log(p);
      for (int j = 0; j < classes; ++j)
        ev.grad.at2(r, j) =
            (probs.at2(r, j) - (j == by[static_cast<size_t>(r)] ? 1.0f : 0.0f)) / b;
      for (int j = 0; j < f; ++j) {
        double e = double(out.at2(r, classes + j)) - target[j];
        aux_loss += e * e / (double(f) * b);
        ev.grad.at2(r, classes + j) = static_cast<float>(spec.lambda * 2.0 * e / (double(f) * b));
      }
      double s = 0;
      for (int j = 0; j < classes; ++j) {
        double d = double(probs.at2(r, j)) - (j == by[static_cast<size_t>(r)] ? 1.0 : 0.0);
        s += d * d;
      }
      ev.sample_scores[static_cast<size_t>(r)] = std::sqrt(s);
      ev.correct += nn::argmax_row(probs, r) == by[static_cast<size_t>(r)];
    }
    ev.loss = task / b + spec.lambda * aux_loss;
    return ev;
  };

  FingerprintTrainResult res;
  res.log = nn::train(model, x_train, y_train, cfg, joint);

  // Calibrate tolerance and measure task accuracy on the held-out set.
  Tensor<float> out = nn::forward(model, x_calib, Mode::Eval);
  double worst = 0;
  for (int r = 0; r < out.dim(0); ++r) {
    double e = 0;
    for (int j = 0; j < f; ++j)
      e = std::max(e, std::abs(double(out.at2(r, classes + j)) - target[j]));
    worst = std::max(worst, e);
  }
  fp.tol = 1.5 * worst;
  if (fp.tol <= 0) fp.tol = 1e-6;

  Tensor<float> probs = head_class_probs(out, classes);
  res.task_accuracy = nn::accuracy(probs, y_calib);
  if (baseline_accuracy) {
    double gap = *baseline_accuracy - res.task_accuracy;
    require(gap <= 0.03, "fingerprint capacity exceeded: task accuracy dropped " +
                             fmt(gap * 100) + " points against the baseline");
  }
  res.fingerprint = fp;
  return res;
}

bool check_fingerprint(const Tensor<float>& output_aux, const Fingerprint& fp) {
  require(output_aux.numel() == fp.f_target.numel(), "fingerprint: length mismatch");
  double e = 0;
  for (std::int64_t i = 0; i < output_aux.numel(); ++i)
    e = std::max(e, std::abs(double(output_aux[i]) - fp.f_target[i]));
  return e <= fp.tol;
}

std::string Fingerprint::serialize() const {
  std::ostringstream os;
  os << "fingerprint v1\n";
  os << "f " << f_target.numel() << "\n";
  os << "lambda " << fmt(lambda) << "\n";
  os << "tol " << fmt(tol) << "\n";
  os << "target";
  for (std::int64_t i = 0; i < f_target.numel(); ++i) os << " " << fmt(f_target[i]);
  os << "\n";
  return os.str();
}

Fingerprint Fingerprint::parse(const std::string& text) {
  std::istringstream is(text);
  std::string header, version;
  is >> header >> version;
  require(header == "fingerprint" && version == "v1", "fingerprint artifact: unknown header");
  Fingerprint fp;
  std::string key;
  int f = 0;
  std::vector<float> target;
  while (is >> key) {
    if (key == "f") is >> f;
    else if (key == "lambda") is >> fp.lambda;
    else if (key == "tol") is >> fp.tol;
    else if (key == "target") {
      float v;
      while (is >> v) target.push_back(v);
    } else {
      fail("fingerprint artifact: unknown key '" + key + "'");
    }
  }
  require(f >= 4 && static_cast<int>(target.size()) == f, "fingerprint artifact: bad target");
  fp.f_target = Tensor<float>({f}, target);
  return fp;
}

// ---------------------------------------------------------------------------

CoverageReport fault_coverage(nn::Model<float>& model, const xbar::CrossbarProgram& clean_prog,
                              const ProgFactory& make_faulty, const Tensor<float>& test_inputs,
                              int n_scenarios, u64 seed) {
  require(n_scenarios >= 1, "fault_coverage: need at least one scenario");
  const int n = test_inputs.dim(0);
  require(n >= 1, "fault_coverage: empty test set");

  Tensor<float> base_out = xbar::faulty_forward(model, clean_prog, test_inputs, 0);
  std::vector<int> base_pred(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) base_pred[static_cast<size_t>(i)] = nn::argmax_row(base_out, i);

  CoverageReport report;
  report.scenarios = n_scenarios;
  for (int s = 0; s < n_scenarios; ++s) {
    u64 sseed = derive_stream(seed, static_cast<u64>(s));
    xbar::CrossbarProgram prog = make_faulty(sseed);
    Tensor<float> out = xbar::faulty_forward(model, prog, test_inputs, derive_stream(seed, s, 1));
    int flips = 0;
    for (int i = 0; i < n; ++i)
      flips += nn::argmax_row(out, i) != base_pred[static_cast<size_t>(i)];
    ScenarioResult sr{sseed, flips > 0, double(flips)};
    report.detected += sr.detected;
    report.per_scenario.push_back(sr);
  }
  return report;
}

CoverageReport fault_coverage_oneshot(nn::Model<float>& model, const ProgFactory& make_faulty,
                                      const OneShotVector& v, int n_scenarios, u64 seed) {
  require(n_scenarios >= 1, "fault_coverage: need at least one scenario");
  CoverageReport report;
  report.scenarios = n_scenarios;
  for (int s = 0; s < n_scenarios; ++s) {
    u64 sseed = derive_stream(seed, static_cast<u64>(s));
    xbar::CrossbarProgram prog = make_faulty(sseed);
    double d = oneshot_statistic(model, v, &prog, derive_stream(seed, s, 1));
    ScenarioResult sr{sseed, d > v.tau, d};
    report.detected += sr.detected;
    report.per_scenario.push_back(sr);
  }
  return report;
}

double sign_test_pvalue(int wins, int n) {
  require(wins >= 0 && wins <= n && n >= 1, "sign_test: bad arguments");
  double p = 0;
  for (int k = wins; k <= n; ++k) {
    double lchoose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    p += std::exp(lchoose - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

} // namespace cimlab::selftest
