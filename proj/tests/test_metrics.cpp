#include <doctest.h>

#include <numeric>
#include <thread>

#include "puma/errors.hpp"
#include "puma/metrics.hpp"
#include "puma/rng.hpp"

using namespace puma;

TEST_CASE("accuracy of constant and perfect predictors") {
  const auto data = generate(Shape::radial, 200, 0.05, 1);
  const ProbabilityFn constant = [](std::span<const double>) { return std::vector<double>{0.9, 0.1}; };
  CHECK(accuracy(constant, data) == 0.5);

  // Radial labels alternate by cluster angle, so the true cluster is recoverable.
  const ProbabilityFn oracle = [](std::span<const double> x) {
    const double a = std::atan2(x[1], x[0]);
    const long k = std::lround(a / (std::numbers::pi / 3.0));
    const int label = static_cast<int>(((k % 2) + 2) % 2);
    return label == 0 ? std::vector<double>{1.0, 0.0} : std::vector<double>{0.0, 1.0};
  };
  CHECK(accuracy(oracle, data) == 1.0);

  // Ties go to the lowest class index.
  const ProbabilityFn tie = [](std::span<const double>) { return std::vector<double>{0.5, 0.5}; };
  CHECK(accuracy(tie, data) == 0.5);
}

TEST_CASE("ECE hand computations") {
  std::vector<double> conf(10, 1.0);
  std::vector<char> ok(10, 1);
  auto as_bool = [](const std::vector<char>& v) {
    std::unique_ptr<bool[]> b(new bool[v.size()]);
    for (std::size_t i = 0; i < v.size(); ++i) b[i] = v[i] != 0;
    return b;
  };
  auto b1 = as_bool(ok);
  CHECK(ece_from_predictions(conf, {b1.get(), 10}).ece == 0.0);

  for (int i = 0; i < 3; ++i) ok[i] = 0;
  auto b2 = as_bool(ok);
  const auto r = ece_from_predictions(conf, {b2.get(), 10});
  CHECK(r.ece == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(r.bins.back().count == 10);

  std::vector<double> half(10, 0.5);
  for (int i = 0; i < 10; ++i) ok[i] = i % 2;
  auto b3 = as_bool(ok);
  CHECK(ece_from_predictions(half, {b3.get(), 10}).ece == doctest::Approx(0.0));

  // Two bins: 0.25 with accuracy 0, 0.95 with accuracy 1 -> (0.25 + 0.05) / 2.
  const std::vector<double> two{0.25, 0.95};
  const bool mixed[] = {false, true};
  CHECK(ece_from_predictions(two, mixed).ece == doctest::Approx(0.15).epsilon(1e-12));

  const auto data = generate(Shape::radial, 100, 0.1, 2);
  const ProbabilityFn sure = [](std::span<const double>) { return std::vector<double>{1.0, 0.0}; };
  CHECK(ece(sure, data).ece == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("discovery curves") {
  const auto grid = uniform_grid(0.05);
  CHECK(grid.front() == doctest::Approx(0.05));
  CHECK(grid.back() == doctest::Approx(1.0));

  std::vector<SampleId> ranking(1000);
  std::iota(ranking.begin(), ranking.end(), SampleId{0});
  IdSet truth(ranking.begin(), ranking.begin() + 100);
  const std::vector<double> at{0.05, 0.1, 0.5};
  const auto perfect = discovery_curve(ranking, truth, at);
  CHECK(perfect.recall_at(0.05) == doctest::Approx(0.5));
  CHECK(perfect.recall_at(0.1) == 1.0);

  std::vector<SampleId> reversed(ranking.rbegin(), ranking.rend());
  const std::vector<double> late{0.5, 0.9, 0.95};
  const auto worst = discovery_curve(reversed, truth, late);
  CHECK(worst.recall_at(0.5) == 0.0);
  CHECK(worst.recall_at(0.9) == 0.0);
  CHECK(worst.recall_at(0.95) == doctest::Approx(0.5));

  CounterRng rng(7, 7);
  auto shuffled = ranking;
  shuffle(shuffled, rng);
  const auto random = discovery_curve(shuffled, truth, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(std::abs(random.recall[i] - grid[i]) <= 0.15);
  }
}

TEST_CASE("timed") {
  const double noop = timed([] {});
  CHECK(noop >= 0.0);
  const auto [value, ms] = timed([] { return 42; });
  CHECK(value == 42);
  CHECK(ms >= 0.0);

  const double a = timed([] { std::this_thread::sleep_for(std::chrono::milliseconds(20)); });
  const double b = timed([] { std::this_thread::sleep_for(std::chrono::milliseconds(30)); });
  const double both = timed([] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
  });
  CHECK(std::abs(both - (a + b)) < 15.0);
}
