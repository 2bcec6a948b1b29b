#include "puma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "puma/errors.hpp"

namespace puma {

ProbabilityFn as_predictor(const MlpModel& model) {
  return [&model](std::span<const double> x) { return forward(model, x); };
}

double accuracy(const ProbabilityFn& predict, const Dataset& data) {
  if (data.empty()) throw InvalidArgument("accuracy: empty dataset");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = predict(data.row(i));
    const auto best = std::max_element(p.begin(), p.end()) - p.begin();
    if (best == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

double accuracy(const MlpModel& model, const Dataset& data) {
  return accuracy(as_predictor(model), data);
}

EceReport ece_from_predictions(std::span<const double> confidence, std::span<const bool> correct,
                               int num_bins) {
  if (num_bins < 2) throw InvalidArgument("ece: need at least two bins");
  if (confidence.size() != correct.size()) throw DimensionMismatch("ece: length mismatch");
  if (confidence.empty()) throw InvalidArgument("ece: empty dataset");
  EceReport rep;
  rep.num_bins = num_bins;
  rep.bins.assign(static_cast<std::size_t>(num_bins), {});
  std::vector<double> conf_sum(rep.bins.size(), 0.0);
  std::vector<double> hit_sum(rep.bins.size(), 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = std::clamp(confidence[i], 0.0, 1.0);
    auto b = static_cast<std::size_t>(std::floor(c * num_bins));
    b = std::min(b, rep.bins.size() - 1);
    ++rep.bins[b].count;
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(confidence.size());
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    auto& bin = rep.bins[b];
    if (bin.count == 0) continue;
    bin.mean_confidence = conf_sum[b] / static_cast<double>(bin.count);
    bin.accuracy = hit_sum[b] / static_cast<double>(bin.count);
    rep.ece += static_cast<double>(bin.count) / n * std::abs(bin.accuracy - bin.mean_confidence);
  }
  return rep;
}

EceReport ece(const ProbabilityFn& predict, const Dataset& data, int num_bins) {
  if (data.empty()) throw InvalidArgument("ece: empty dataset");
  std::vector<double> conf(data.size());
  std::unique_ptr<bool[]> hits(new bool[data.size()]);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = predict(data.row(i));
    const auto best = std::max_element(p.begin(), p.end());
    conf[i] = *best;
    hits[i] = (best - p.begin()) == data.labels[i];
  }
  return ece_from_predictions(conf, std::span<const bool>(hits.get(), data.size()), num_bins);
}

EceReport ece(const MlpModel& model, const Dataset& data, int num_bins) {
  return ece(as_predictor(model), data, num_bins);
}

double DiscoveryCurve::recall_at(double fraction) const {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (std::abs(fractions[i] - fraction) < 1e-9) return recall[i];
  }
  throw InvalidArgument("discovery curve has no grid point at " + std::to_string(fraction));
}

DiscoveryCurve discovery_curve(std::span<const SampleId> ranking, const IdSet& true_set,
                               std::span<const double> grid) {
  if (true_set.empty()) throw InvalidArgument("discovery_curve: empty true set");
  const IdSet ranked = make_id_set({ranking.begin(), ranking.end()});
  for (SampleId id : true_set) {
    if (!contains(ranked, id)) throw InvalidArgument("discovery_curve: true id missing from ranking");
  }
  const std::size_t n = ranking.size();
  // hits_prefix[m] = true ids among the first m ranked entries
  std::vector<std::size_t> hits_prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    hits_prefix[i + 1] = hits_prefix[i] + (contains(true_set, ranking[i]) ? 1 : 0);
  }
  DiscoveryCurve curve;
  for (double f : grid) {
    const auto m = std::min<std::size_t>(
        n, static_cast<std::size_t>(std::floor(std::clamp(f, 0.0, 1.0) * static_cast<double>(n) + 1e-9)));
    curve.fractions.push_back(f);
    curve.recall.push_back(static_cast<double>(hits_prefix[m]) /
                           static_cast<double>(true_set.size()));
  }
  return curve;
}

std::vector<double> uniform_grid(double step) {
  std::vector<double> grid;
  const auto count = static_cast<int>(std::llround(1.0 / step));
  for (int i = 1; i <= count; ++i) grid.push_back(static_cast<double>(i) / count);
  return grid;
}

}  // namespace puma
