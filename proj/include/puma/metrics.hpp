#pragma once

#include <chrono>
#include <functional>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "puma/dataset.hpp"
#include "puma/model.hpp"

namespace puma {

/// Maps a feature row to class probabilities.
using ProbabilityFn = std::function<std::vector<double>(std::span<const double>)>;

ProbabilityFn as_predictor(const MlpModel& model);

/// Fraction of argmax-correct rows; ties pick the lowest class index.
double accuracy(const ProbabilityFn& predict, const Dataset& data);
double accuracy(const MlpModel& model, const Dataset& data);

struct EceBin {
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct EceReport {
  int num_bins = 15;
  std::vector<EceBin> bins;
  double ece = 0.0;
};

/// Equal-width bins over the max-probability confidence; bin b covers
/// [b/B, (b+1)/B) with 1.0 falling in the last bin.
EceReport ece_from_predictions(std::span<const double> confidence, std::span<const bool> correct,
                               int num_bins = 15);
EceReport ece(const ProbabilityFn& predict, const Dataset& data, int num_bins = 15);
EceReport ece(const MlpModel& model, const Dataset& data, int num_bins = 15);

struct DiscoveryCurve {
  std::vector<double> fractions;
  std::vector<double> recall;

  double recall_at(double fraction) const;
};

/// Recall of `true_set` after inspecting the first floor(f * n) ranked ids,
/// for each f in `grid`.
DiscoveryCurve discovery_curve(std::span<const SampleId> ranking, const IdSet& true_set,
                               std::span<const double> grid);

std::vector<double> uniform_grid(double step);

/// Runs op and returns its result with the elapsed wall-clock milliseconds
/// (steady clock).
template <class Op>
auto timed(Op&& op) {
  const auto start = std::chrono::steady_clock::now();
  if constexpr (std::is_void_v<std::invoke_result_t<Op>>) {
    std::forward<Op>(op)();
    const auto stop = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(stop - start).count();
  } else {
    auto result = std::forward<Op>(op)();
    const auto stop = std::chrono::steady_clock::now();
    return std::pair{std::move(result),
                     std::chrono::duration<double, std::milli>(stop - start).count()};
  }
}

}  // namespace puma
