#include <doctest.h>

#include "cimlab/rng.hpp"
#include "cimlab/tensor.hpp"

using namespace cimlab;

TEST_SUITE_BEGIN("tensor_rng");

TEST_CASE("tensor shape and data stay consistent") {
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at2(1, 2) == 1.5f);
  CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5)), Error);
  CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("finiteness check catches bad values") {
  Tensor<float> t({2}, 1.0f);
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("gather_rows picks leading-dim slices") {
  Tensor<float> t({3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor<float> g = gather_rows(t, {2, 0});
  CHECK(g.at2(0, 0) == 5);
  CHECK(g.at2(1, 1) == 2);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  CHECK(derive_stream(1, 2, 3) == derive_stream(1, 2, 3));
  CHECK(derive_stream(1, 2, 3) != derive_stream(1, 3, 2));
  CHECK(derive_stream(1, 2) != derive_stream(2, 2));
}

TEST_CASE("uniform and normal draws have sane statistics") {
  Rng rng(7);
  const int n = 20000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));

  sum = 0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    sum += z;
    sumsq += z * z;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1.0).scale(0.05));
  CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("source draw counters track bernoulli and normal draws") {
  RngSource src{SourceKind::Neuron, Rng(1)};
  for (int i = 0; i < 5; ++i) src.draw_bernoulli(0.5);
  for (int i = 0; i < 3; ++i) src.draw_normal();
  CHECK(src.bernoulli_draws == 5);
  CHECK(src.normal_draws == 3);
  src.reset_counters();
  CHECK(src.bernoulli_draws == 0);
}

TEST_SUITE_END();
