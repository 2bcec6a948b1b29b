#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "puma/dataset.hpp"
#include "puma/metrics.hpp"
#include "puma/model.hpp"

namespace puma {

struct ShadowConfig {
  std::size_t count = 5;
  double subset_fraction = 0.1;
  int epochs = 50;
  std::size_t batch_size = 8;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;

  void validate(std::size_t n) const;
};

struct Shadow {
  MlpModel model;
  IdSet in_ids;
  IdSet out_ids;
};

struct ShadowSet {
  std::vector<Shadow> shadows;
  double subset_fraction = 0.0;
};

/// Each shadow shares the target architecture and trains on a seeded random
/// subset of floor(subset_fraction * n) ids; an equally sized, disjoint
/// out-set is drawn from the remainder.
ShadowSet train_shadows(const Dataset& train_set, const MlpSpec& spec, const ShadowConfig& cfg);

/// Attack input for one sample: predicted probabilities sorted descending,
/// followed by the one-hot of the sample's label.
std::vector<double> attack_features(std::span<const double> probabilities, int label,
                                    std::size_t num_classes);

/// One row per (shadow, in/out id); label 1 = member, 0 = non-member.
Dataset build_attack_dataset(const ShadowSet& shadows, const Dataset& train_set);

struct AttackTrainConfig {
  std::vector<std::size_t> hidden = {128, 64};
  int epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
};

struct AttackClassifier {
  MlpModel model;  // output class 1 = member
  double train_accuracy = 0.0;
};

AttackClassifier train_attack(const Dataset& attack_dataset, const AttackTrainConfig& cfg);

double member_probability(const AttackClassifier& clf, std::span<const double> features);

/// Fraction of `points` whose member probability exceeds `threshold`.
double attack_rate(const AttackClassifier& clf, const ProbabilityFn& target, const Dataset& points,
                   double threshold = 0.5);
double attack_rate(const AttackClassifier& clf, const MlpModel& target, const Dataset& points,
                   double threshold = 0.5);

void save_attack(const AttackClassifier& clf, const std::filesystem::path& path);
AttackClassifier load_attack(const std::filesystem::path& path);

}  // namespace puma
