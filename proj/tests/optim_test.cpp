#include <doctest.h>

#include <cmath>

#include "cseg/optim.hpp"
#include "support/oracles.hpp"

using namespace cseg;
using Td = Tensor<double>;

TEST_SUITE("optim") {

TEST_CASE("lr schedule drops by the factor every interval") {
  LrSchedule s{1e-6, 0.1, 40};
  CHECK(s.at(0) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.at(39) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.at(40) == doctest::Approx(1e-7).epsilon(1e-12));
  CHECK(s.at(80) == doctest::Approx(1e-8).epsilon(1e-12));
  CHECK_THROWS_AS((void)s.at(-1), shape_error);
}

TEST_CASE("zero gradient leaves fresh parameters unchanged") {
  Td p = Td::from(Shape{1, 1, 1, 2}, {1.5, -0.25}, true);
  Adam<double> adam({{"p", p}});
  adam.step(1e-2);
  CHECK(p.data()[0] == 1.5);
  CHECK(p.data()[1] == -0.25);
}

TEST_CASE("first step moves by ~lr in the gradient direction") {
  Td p = Td::scalar(0.0, true);
  p.grad()[0] = 2.0;
  Adam<double> adam({{"p", p}});
  adam.step(1e-3);
  CHECK(p.data()[0] == doctest::Approx(-1e-3).epsilon(1e-6));

  oracle::ScalarAdam ref;
  CHECK(ref.step(0.0, 2.0, 1e-3) == doctest::Approx(p.data()[0]).epsilon(1e-15));
}

TEST_CASE("trajectory matches the scalar oracle under constant gradient") {
  Td p = Td::scalar(1.0, true);
  Adam<double> adam({{"p", p}});
  oracle::ScalarAdam ref;
  double ref_p = 1.0;
  double prev = 1.0;
  for (int t = 0; t < 25; ++t) {
    p.grad()[0] = 0.7;
    adam.step(1e-2);
    ref_p = ref.step(ref_p, 0.7, 1e-2);
    CHECK(p.data()[0] == doctest::Approx(ref_p).epsilon(1e-12));
    CHECK(std::abs(p.data()[0] - prev) <= 1e-2 * 1.05);  // |step| <= lr * (1 + margin)
    prev = p.data()[0];
    p.zero_grad();
  }
}

TEST_CASE("drives a quadratic to zero") {
  Td p = Td::scalar(1.0, true);
  Adam<double> adam({{"p", p}});
  int steps = 0;
  for (; steps < 10000 && std::abs(p.data()[0]) >= 1e-3; ++steps) {
    p.grad()[0] = 2.0 * p.data()[0];
    adam.step(1e-2);
    p.zero_grad();
  }
  CHECK(std::abs(p.data()[0]) < 1e-3);
  CHECK(steps < 10000);
}

TEST_CASE("identical gradient sequences give identical trajectories") {
  auto run = [] {
    Rng rng(77);
    Td p = Td::randn(Shape{1, 1, 2, 2}, rng);
    p.set_requires_grad(true);
    Adam<double> adam({{"p", p}});
    Rng grng(99);
    for (int t = 0; t < 10; ++t) {
      for (int i = 0; i < 4; ++i) p.grad()[i] = grng.normal();
      adam.step(1e-3);
      p.zero_grad();
    }
    return std::vector<double>(p.data(), p.data() + 4);
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite gradients are fatal") {
  Td p = Td::scalar(0.0, true);
  Adam<double> adam({{"p", p}});
  p.grad()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam.step(1e-3), numeric_error);
}

TEST_CASE("moment state is exposed for checkpointing") {
  Td p = Td::scalar(1.0, true);
  Adam<double> adam({{"p", p}});
  p.grad()[0] = 1.0;
  adam.step(1e-3);
  auto m = adam.first_moments();
  auto v = adam.second_moments();
  REQUIRE(m.size() == 1);
  CHECK(m[0].first == "p");
  CHECK(m[0].second.data()[0] == doctest::Approx(0.5));     // (1-beta1) * g
  CHECK(v[0].second.data()[0] == doctest::Approx(0.001));   // (1-beta2) * g^2
  CHECK(adam.step_count() == 1);
}

}  // TEST_SUITE
