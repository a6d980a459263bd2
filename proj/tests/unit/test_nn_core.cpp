#include <doctest.h>

#include <cmath>

#include "cimlab/data/datasets.hpp"
#include "cimlab/nn/train.hpp"
#include "cimlab/zoo.hpp"

using namespace cimlab;
using nn::Dense;
using nn::Model;

TEST_SUITE_BEGIN("nn_core");

namespace {

Model<double> empty_model() { return Model<double>{}; }

/// Loss of a full forward, deterministic given the source seeding inside.
double loss_value(Model<double>& m, const Tensor<double>& x, const std::vector<int>& labels,
                  nn::LossKind kind, const Tensor<double>* mse_target) {
  m.seed_sources(99, 0); // identical stochastic draws on every evaluation
  Tensor<double> out = nn::forward(m, x, Mode::Train);
  if (kind == nn::LossKind::CrossEntropy) return nn::cross_entropy(out, labels).value;
  return nn::mse(out, *mse_target).value;
}

struct FdCheck {
  double worst = 0;
  int checked = 0;
};

/// Central finite differences vs analytic gradients for every parameter and
/// every input element.
FdCheck fd_check(Model<double>& m, Tensor<double> x, const std::vector<int>& labels,
                 nn::LossKind kind, const Tensor<double>* mse_target = nullptr) {
  m.seed_sources(99, 0);
  nn::ForwardTrace<double> trace;
  Tensor<double> out = nn::forward(m, x, Mode::Train, nullptr, &trace);
  nn::LossResult<double> lr = kind == nn::LossKind::CrossEntropy
                                  ? nn::cross_entropy(out, labels)
                                  : nn::mse(out, *mse_target);
  nn::Gradients<double> grads = nn::backward(m, trace, lr.grad);

  FdCheck fc;
  auto record = [&](double analytic, double numeric) {
    double mag = std::max(std::abs(analytic), std::abs(numeric));
    double err = mag >= 1e-6 ? std::abs(analytic - numeric) / mag
                             : std::abs(analytic - numeric) * 1e2; // tiny grads: near-exact match
    fc.worst = std::max(fc.worst, err);
    ++fc.checked;
  };

  for (int li = 0; li < m.size(); ++li) {
    auto params = m.layers[static_cast<size_t>(li)]->parameters();
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<double>& w = *params[pi].value;
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        double orig = w[i];
        double h = 1e-5 * std::max(1.0, std::abs(orig));
        w[i] = orig + h;
        double lp = loss_value(m, x, labels, kind, mse_target);
        w[i] = orig - h;
        double lm = loss_value(m, x, labels, kind, mse_target);
        w[i] = orig;
        record(grads.param[static_cast<size_t>(li)][pi][i], (lp - lm) / (2 * h));
      }
    }
  }
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double orig = x[i];
    double h = 1e-5 * std::max(1.0, std::abs(orig));
    x[i] = orig + h;
    double lp = loss_value(m, x, labels, kind, mse_target);
    x[i] = orig - h;
    double lm = loss_value(m, x, labels, kind, mse_target);
    x[i] = orig;
    record(grads.input[i], (lp - lm) / (2 * h));
  }
  return fc;
}

/// Random small double-precision net; `arch` cycles through layer mixes.
Model<double> random_net(int arch, int classes, Rng& rng, int din, bool& wants_mse) {
  Model<double> m;
  m.seed = rng.next_u64();
  Rng init(m.seed);
  int h = 4 + static_cast<int>(rng.below(3));
  wants_mse = false;
  switch (arch % 5) {
    case 0:
      m.add<Dense<double>>(din, h, true, false, init);
      m.add<nn::ReLU<double>>();
      m.add<Dense<double>>(h, classes, true, false, init);
      m.add<nn::Softmax<double>>();
      break;
    case 1:
      m.add<Dense<double>>(din, h, true, false, init);
      m.add<nn::BatchNorm<double>>(h);
      m.add<nn::ReLU<double>>();
      m.add<Dense<double>>(h, classes, true, false, init);
      m.add<nn::Softmax<double>>();
      break;
    case 2: {
      m.add<nn::Conv2d<double>>(1, 2, 3, true, false, init);
      m.add<nn::ReLU<double>>();
      m.add<Dense<double>>(2 * 16, classes, true, false, init);
      m.add<nn::Softmax<double>>();
      break;
    }
    case 3:
      m.add<Dense<double>>(din, h, true, false, init);
      m.add<nn::ReLU<double>>();
      m.add<Dense<double>>(h, classes, true, false, init);
      wants_mse = true;
      break;
    case 4: {
      int src = m.add_source(SourceKind::ScaleVI);
      m.add<Dense<double>>(din, h, true, false, init);
      m.add<nn::BatchNorm<double>>(h);
      m.add<nn::ScaleVI<double>>(h, 0.25, src);
      m.add<nn::ReLU<double>>();
      m.add<Dense<double>>(h, classes, true, false, init);
      m.add<nn::Softmax<double>>();
      break;
    }
  }
  return m;
}

} // namespace

TEST_CASE("identity model returns its input") {
  Model<double> m = empty_model();
  Rng rng(3);
  Tensor<double> x = Tensor<double>::randn({2, 5}, rng);
  Tensor<double> y = nn::forward(m, x, Mode::Eval);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("dense identity weights pass the input through") {
  Model<float> m;
  Rng init(1);
  auto* d = m.add<Dense<float>>(2, 2, true, false, init);
  d->weight() = Tensor<float>({2, 2}, std::vector<float>{1, 0, 0, 1});
  d->bias().fill(0);
  Tensor<float> x({1, 2}, std::vector<float>{1, 2});
  Tensor<float> y = nn::forward(m, x, Mode::Eval);
  CHECK(y.at2(0, 0) == 1.0f);
  CHECK(y.at2(0, 1) == 2.0f);
}

TEST_CASE("two-layer chain matches the hand-computed values") {
  // Computed independently: h = W1 x + b1 = [-1.4, 2.3], y = W2 h + b2 = [-0.95, 3.65].
  Model<double> m;
  Rng init(1);
  auto* d1 = m.add<Dense<double>>(2, 2, true, false, init);
  d1->weight() = Tensor<double>({2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.25});
  d1->bias() = Tensor<double>({2}, std::vector<double>{0.1, -0.2});
  auto* d2 = m.add<Dense<double>>(2, 2, true, false, init);
  d2->weight() = Tensor<double>({2, 2}, std::vector<double>{1.5, 0.5, -0.75, 1.0});
  d2->bias() = Tensor<double>({2}, std::vector<double>{0.0, 0.3});
  Tensor<double> x({1, 2}, std::vector<double>{1.0, 2.0});
  Tensor<double> y = nn::forward(m, x, Mode::Eval);
  CHECK(y.at2(0, 0) == doctest::Approx(-0.95).epsilon(1e-12));
  CHECK(y.at2(0, 1) == doctest::Approx(3.65).epsilon(1e-12));
}

TEST_CASE("single dense layer MSE gradient matches the closed form") {
  // B=1 so the loss gradient is exactly 2*(Wx - t); computed independently:
  // residual = [-2.5, 3.5], dW = [[-5,-10],[7,14]], dx = [11.5, 6.75].
  Model<double> m;
  Rng init(1);
  auto* d = m.add<Dense<double>>(2, 2, false, false, init);
  d->weight() = Tensor<double>({2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.25});
  Tensor<double> x({1, 2}, std::vector<double>{1.0, 2.0});
  Tensor<double> t({1, 2}, std::vector<double>{1.0, -1.0});

  nn::ForwardTrace<double> trace;
  Tensor<double> out = nn::forward(m, x, Mode::Train, nullptr, &trace);
  auto lr = nn::mse(out, t);
  auto grads = nn::backward(m, trace, lr.grad);

  const auto& dW = grads.param[0][0];
  CHECK(dW.at2(0, 0) == doctest::Approx(-5.0));
  CHECK(dW.at2(0, 1) == doctest::Approx(-10.0));
  CHECK(dW.at2(1, 0) == doctest::Approx(7.0));
  CHECK(dW.at2(1, 1) == doctest::Approx(14.0));
  CHECK(grads.input[0] == doctest::Approx(11.5));
  CHECK(grads.input[1] == doctest::Approx(6.75));
}

TEST_CASE("zero learning signal gives all-zero gradients") {
  Model<double> m;
  Rng init(5);
  m.add<Dense<double>>(3, 2, true, false, init);
  Rng rx(6);
  Tensor<double> x = Tensor<double>::randn({2, 3}, rx);
  nn::ForwardTrace<double> trace;
  Tensor<double> out = nn::forward(m, x, Mode::Train, nullptr, &trace);
  auto lr = nn::mse(out, out); // target == output
  CHECK(lr.value == 0.0);
  auto grads = nn::backward(m, trace, lr.grad);
  for (const auto& pg : grads.param)
    for (const auto& g : pg)
      for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("gradients match central finite differences on random nets") {
  Rng rng(2024);
  for (int trial = 0; trial < 6; ++trial) {
    bool wants_mse = false;
    const int classes = 3;
    Model<double> m = random_net(trial, classes, rng, 4, wants_mse);
    Tensor<double> x = trial % 5 == 2 ? Tensor<double>::randn({2, 1, 4, 4}, rng)
                                      : Tensor<double>::randn({3, 4}, rng);
    std::vector<int> labels(static_cast<size_t>(x.dim(0)));
    for (auto& l : labels) l = static_cast<int>(rng.below(classes));
    Tensor<double> target = Tensor<double>::randn({x.dim(0), classes}, rng);
    FdCheck fc = fd_check(m, x, labels, wants_mse ? nn::LossKind::MSE : nn::LossKind::CrossEntropy,
                          &target);
    INFO("trial ", trial, " checked ", fc.checked, " partials, worst rel err ", fc.worst);
    CHECK(fc.worst < 1e-4);
  }
}

TEST_CASE("softmax outputs are a distribution") {
  Model<double> m;
  m.add<nn::Softmax<double>>();
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Tensor<double> x = Tensor<double>::randn({4, 6}, rng, 3.0);
    Tensor<double> y = nn::forward(m, x, Mode::Eval);
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int c = 0; c < 6; ++c) {
        CHECK(y.at2(r, c) >= 0.0);
        CHECK(y.at2(r, c) <= 1.0);
        sum += y.at2(r, c);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("binarize_ste forward and gradient mask") {
  Tensor<float> w({3}, std::vector<float>{-0.3f, 0.0f, 2.1f});
  Tensor<float> b = nn::binarize_ste(w);
  CHECK(b[0] == -1.0f);
  CHECK(b[1] == 1.0f); // sign(0) = +1
  CHECK(b[2] == 1.0f);
  Tensor<float> m = nn::binarize_ste_mask(w);
  CHECK(m[0] == 1.0f);
  CHECK(m[1] == 1.0f);
  CHECK(m[2] == 0.0f);

  Rng rng(4);
  Tensor<float> r = Tensor<float>::randn({64}, rng);
  Tensor<float> rb = nn::binarize_ste(r);
  for (std::int64_t i = 0; i < rb.numel(); ++i)
    CHECK((rb[i] == 1.0f || rb[i] == -1.0f));
}

TEST_CASE("binary net learns linearly separable blobs") {
  data::Dataset ds = data::blobs(400, 2, 0.5, 21);
  nn::Model<float> m;
  Rng init(derive_stream(21, 0x11));
  m.seed = 21;
  m.add<Dense<float>>(2, 16, true, true, init);
  m.add<nn::BatchNorm<float>>(16);
  m.add<nn::ReLU<float>>();
  m.add<Dense<float>>(16, 2, true, true, init);
  m.add<nn::Softmax<float>>();

  nn::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  nn::TrainLog log = nn::train(m, ds.x, ds.labels, cfg);
  CHECK(log.epoch_accuracy.back() >= 0.95);
}

TEST_CASE("training reaches 95 percent on 500 gaussian blob samples") {
  data::Dataset ds = data::blobs(500, 2, 1.0, 33);
  nn::Model<float> m = zoo::mlp_s(2, 2, 33);
  nn::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  nn::TrainLog log = nn::train(m, ds.x, ds.labels, cfg);
  CHECK(log.epoch_accuracy.back() >= 0.95);
}

TEST_CASE("epochs=0 leaves the model untouched and the log empty") {
  data::Dataset ds = data::blobs(50, 2, 1.0, 5);
  nn::Model<float> m = zoo::mlp_s(2, 2, 5);
  nn::Model<float> before = m;
  nn::TrainConfig cfg;
  cfg.epochs = 0;
  nn::TrainLog log = nn::train(m, ds.x, ds.labels, cfg);
  CHECK(log.empty());
  for (int li = 0; li < m.size(); ++li) {
    auto pa = m.layers[static_cast<size_t>(li)]->parameters();
    auto pb = before.layers[static_cast<size_t>(li)]->parameters();
    for (size_t p = 0; p < pa.size(); ++p)
      for (std::int64_t i = 0; i < pa[p].value->numel(); ++i)
        CHECK((*pa[p].value)[i] == (*pb[p].value)[i]);
  }
}

TEST_CASE("identical seeds give bitwise identical training") {
  data::Dataset ds = data::blobs(200, 3, 1.0, 8);
  nn::TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.05;
  cfg.optimizer = nn::Optimizer::Adam;

  nn::Model<float> a = zoo::mlp_s(2, 3, 77, false, {.variant = zoo::BayesVariant::Scale});
  nn::Model<float> b = zoo::mlp_s(2, 3, 77, false, {.variant = zoo::BayesVariant::Scale});
  nn::TrainLog la = nn::train(a, ds.x, ds.labels, cfg);
  nn::TrainLog lb = nn::train(b, ds.x, ds.labels, cfg);

  CHECK(la.epoch_loss == lb.epoch_loss);
  CHECK(la.epoch_accuracy == lb.epoch_accuracy);
  CHECK(la.sample_scores == lb.sample_scores);
  for (int li = 0; li < a.size(); ++li) {
    auto pa = a.layers[static_cast<size_t>(li)]->parameters();
    auto pb = b.layers[static_cast<size_t>(li)]->parameters();
    for (size_t p = 0; p < pa.size(); ++p)
      for (std::int64_t i = 0; i < pa[p].value->numel(); ++i)
        CHECK((*pa[p].value)[i] == (*pb[p].value)[i]);
  }
}

TEST_CASE("shape mismatch names the offending layer") {
  nn::Model<float> m = zoo::mlp_s(2, 2, 1);
  Rng rng(2);
  Tensor<float> bad = Tensor<float>::randn({4, 3}, rng);
  CHECK_THROWS_WITH_AS(nn::forward(m, bad, Mode::Eval),
                       doctest::Contains("layer 0"), Error);
}

TEST_CASE("divergence reports the offending batch and last finite epoch") {
  data::Dataset ds = data::blobs(64, 2, 1.0, 9);
  nn::Model<float> m = zoo::mlp_s(2, 2, 9);
  nn::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e14; // guaranteed blow-up
  CHECK_THROWS_AS(nn::train(m, ds.x, ds.labels, cfg), Error);
}

TEST_SUITE_END();
