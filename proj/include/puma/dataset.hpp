#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace puma {

using SampleId = std::uint64_t;
using IdSet = std::vector<SampleId>;  // sorted, unique

/// Row-major feature matrix with integer labels and stable sample ids.
///
/// `clusters` records which generator cluster produced each row (synthetic
/// data only); it is empty for ingested data.
struct Dataset {
  std::string name;
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  std::vector<SampleId> ids;
  std::vector<int> clusters;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * num_features, num_features};
  }

  /// Throws InvalidArgument when labels are out of range, ids repeat, or a
  /// feature is not finite.
  void validate() const;

  std::unordered_map<SampleId, std::size_t> index() const;

  /// Rows in the given order (duplicates allowed).
  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset select_ids(std::span<const SampleId> keep) const;
  Dataset without_ids(std::span<const SampleId> drop) const;

  std::vector<std::size_t> class_counts() const;
};

enum class Shape { radial, rectangular, two_moons, spiral };

Shape parse_shape(std::string_view name);
std::string_view to_string(Shape shape);

/// Synthetic benchmark generator. `noise` is the standard deviation of the
/// isotropic Gaussian added to each point.
///   radial       2 classes, 6 clusters on the unit ring, classes alternate
///   rectangular  3 classes, 4x4 grid of cluster centres, label (r + c) mod 3
///   two_moons    2 interleaved half circles
///   spiral       2 interleaved arms
Dataset generate(Shape shape, std::size_t n, double noise, std::uint64_t seed);

struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct CsvData {
  Dataset dataset;
  Standardization standardization;
  std::vector<std::string> label_values;  // raw label text, index = class id
};

/// Reads a header-first CSV. Every column other than `label_column` must be
/// numeric. Labels are mapped to class ids: integer labels keep their value
/// when they cover 0..k-1, otherwise distinct values are numbered in sorted
/// order. Features are standardized per column.
CsvData load_csv(const std::filesystem::path& path, std::string_view label_column = "label",
                 bool standardize = true);

/// Writes `f0..f{d-1},label` with round-trip precision.
void save_csv(const Dataset& data, const std::filesystem::path& path);

enum class Scenario { ordered, random };

Scenario parse_scenario(std::string_view name);
std::string_view to_string(Scenario scenario);

struct MarkSpec {
  Scenario scenario = Scenario::random;
  double fraction = 0.2;
  int kmeans_k = 5;
  std::uint64_t seed = 0;
};

struct MarkResult {
  IdSet ids;
  bool truncated = false;  // a cluster had to be split to hit the fraction
};

/// Cluster-based marking: per class, k-means on that class's features, then
/// whole clusters (largest first, ties by smaller centroid norm) until the
/// per-class quota round(fraction * class size) is met.
MarkResult mark_for_removal(const Dataset& data, const MarkSpec& spec);

nlohmann::json marking_to_json(const MarkResult& result, const MarkSpec& spec);

struct KMeansResult {
  std::vector<double> centroids;  // k x d
  std::vector<int> assignment;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding; stops after `max_iter` rounds or
/// when no centroid moves more than `tol`.
KMeansResult kmeans(std::span<const double> points, std::size_t dim, int k, std::uint64_t seed,
                    int max_iter = 50, double tol = 1e-6);

struct FlipResult {
  Dataset dataset;
  IdSet flipped;
};

/// Changes exactly floor(fraction * n) labels, each to a different class.
FlipResult flip_labels(const Dataset& data, double fraction, std::uint64_t seed);

struct SplitResult {
  Dataset train;
  Dataset test;
};

/// Stratified split; each class contributes round(test_fraction * count).
SplitResult split(const Dataset& data, double test_fraction, std::uint64_t seed);

IdSet make_id_set(std::vector<SampleId> ids);
bool contains(const IdSet& set, SampleId id);

}  // namespace puma
