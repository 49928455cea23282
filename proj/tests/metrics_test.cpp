#include <doctest.h>

#include <cmath>

#include "cseg/metrics.hpp"
#include "support/oracles.hpp"

using namespace cseg;
using Tf = Tensor<float>;

TEST_SUITE("metrics") {

TEST_CASE("confusion counts and the standard scores") {
  SUBCASE("perfect prediction") {
    Tf gt = Tf::from(Shape{1, 1, 2, 2}, {1, 0, 1, 0});
    auto m = scores(confusion(gt, gt));
    CHECK(m.ac == 1.0);
    CHECK(m.di == 1.0);
    CHECK(m.ja == 1.0);
    CHECK(m.se == 1.0);
  }
  SUBCASE("hand-counted 4x4 example") {
    // gt: 4 lesion pixels of 16; pred: 2 of them, no false positives
    Tf gt = Tf::zeros(Shape{1, 1, 4, 4});
    gt.at(0, 0, 0, 0) = gt.at(0, 0, 0, 1) = gt.at(0, 0, 1, 0) = gt.at(0, 0, 1, 1) = 1;
    Tf pred = Tf::zeros(Shape{1, 1, 4, 4});
    pred.at(0, 0, 0, 0) = pred.at(0, 0, 1, 1) = 1;
    Confusion c = confusion(pred, gt);
    CHECK(c.tp == 2);
    CHECK(c.fp == 0);
    CHECK(c.fn == 2);
    CHECK(c.tn == 12);
    auto m = scores(c);
    CHECK(m.di == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    CHECK(m.ja == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.se == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.ac == doctest::Approx(14.0 / 16.0).epsilon(1e-12));
  }
  SUBCASE("all-zero prediction against a nonempty ground truth") {
    Tf gt = Tf::from(Shape{1, 1, 1, 4}, {1, 1, 0, 0});
    Tf pred = Tf::zeros(Shape{1, 1, 1, 4});
    auto m = scores(confusion(pred, gt));
    CHECK(m.di == 0.0);
    CHECK(m.se == 0.0);
  }
  SUBCASE("empty ground truth conventions") {
    Tf gt = Tf::zeros(Shape{1, 1, 1, 4});
    Tf clean = Tf::zeros(Shape{1, 1, 1, 4});
    auto m0 = scores(confusion(clean, gt));
    CHECK(m0.di == 1.0);
    CHECK(m0.ja == 1.0);
    CHECK(m0.se == 1.0);
    Tf noisy = Tf::from(Shape{1, 1, 1, 4}, {1, 0, 0, 0});
    auto m1 = scores(confusion(noisy, gt));
    CHECK(m1.di == 0.0);
    CHECK(m1.ja == 0.0);
    CHECK(m1.se == 1.0);
  }
  SUBCASE("non-binary input is rejected") {
    Tf gt = Tf::from(Shape{1, 1, 1, 2}, {1, 0});
    Tf soft = Tf::from(Shape{1, 1, 1, 2}, {0.7f, 0.0f});
    CHECK_THROWS_AS((void)confusion(soft, gt), error);
  }
}

TEST_CASE("dice/jaccard identity holds on random confusions") {
  Rng rng(1234);
  for (int i = 0; i < 1000; ++i) {
    Confusion c;
    c.tp = std::int64_t(rng.below(100));
    c.fp = std::int64_t(rng.below(100));
    c.fn = std::int64_t(rng.below(100));
    c.tn = std::int64_t(rng.below(100)) + 1;
    if (i % 7 == 0) c.tp = c.fn = 0;  // include empty-gt degenerate cases
    auto m = scores(c);
    CHECK(std::abs(m.di - 2.0 * m.ja / (1.0 + m.ja)) < 1e-12);
    const double n = double(c.total());
    CHECK(m.ac >= 1.0 - double(c.fp + c.fn) / n - 1e-12);
  }
}

TEST_CASE("aggregate mean and population std") {
  SUBCASE("single value has zero std") {
    auto r = aggregate({0.83});
    CHECK(r.mean == 0.83);
    CHECK(r.std == 0.0);
  }
  SUBCASE("two dice scores") {
    auto r = aggregate({0.8, 0.6});
    CHECK(r.mean == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(r.std == doctest::Approx(0.1).epsilon(1e-12));
  }
  SUBCASE("matches an independent two-pass recomputation") {
    std::vector<double> xs{0.91, 0.77, 0.84, 0.88, 0.66};
    auto r = aggregate(xs);
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= double(xs.size());
    CHECK(r.mean == doctest::Approx(mean).epsilon(1e-15));
    CHECK(r.std == doctest::Approx(std::sqrt(var)).epsilon(1e-15));
  }
  SUBCASE("empty series is an error") {
    CHECK_THROWS_AS((void)aggregate({}), shape_error);
  }
}

}  // TEST_SUITE
