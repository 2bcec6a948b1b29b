#include "puma/attack.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "puma/errors.hpp"
#include "puma/rng.hpp"

namespace puma {

void ShadowConfig::validate(std::size_t n) const {
  if (count == 0) throw InvalidArgument("ShadowConfig: count must be positive");
  if (!(subset_fraction > 0.0 && subset_fraction <= 0.5)) {
    throw InvalidArgument("ShadowConfig: subset_fraction must lie in (0, 0.5]");
  }
  const auto m = static_cast<std::size_t>(std::floor(subset_fraction * static_cast<double>(n)));
  if (m < batch_size || m == 0) {
    throw InvalidArgument("ShadowConfig: shadow subset of " + std::to_string(m) +
                          " points is smaller than the batch size " + std::to_string(batch_size));
  }
}

ShadowSet train_shadows(const Dataset& train_set, const MlpSpec& spec, const ShadowConfig& cfg) {
  cfg.validate(train_set.size());
  const std::size_t n = train_set.size();
  const auto m = static_cast<std::size_t>(std::floor(cfg.subset_fraction * static_cast<double>(n)));
  ShadowSet set;
  set.subset_fraction = cfg.subset_fraction;
  for (std::size_t s = 0; s < cfg.count; ++s) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(cfg.seed, 0x736861 + s);
    shuffle(order, rng);
    std::vector<std::size_t> in_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<std::size_t> out_rows(order.begin() + static_cast<std::ptrdiff_t>(m),
                                      order.begin() + static_cast<std::ptrdiff_t>(2 * m));
    std::sort(in_rows.begin(), in_rows.end());
    std::sort(out_rows.begin(), out_rows.end());
    const Dataset in_data = train_set.subset(in_rows);

    MlpSpec shadow_spec = spec;
    shadow_spec.seed = derive_seed(cfg.seed, 0x5000 + s);
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.shuffle_seed = derive_seed(cfg.seed, 0x6000 + s);
    auto trained = train(init_mlp(shadow_spec), in_data, tc);

    Shadow sh{std::move(trained.model), {}, {}};
    for (std::size_t r : in_rows) sh.in_ids.push_back(train_set.ids[r]);
    for (std::size_t r : out_rows) sh.out_ids.push_back(train_set.ids[r]);
    set.shadows.push_back(std::move(sh));
  }
  return set;
}

std::vector<double> attack_features(std::span<const double> probabilities, int label,
                                    std::size_t num_classes) {
  std::vector<double> f(probabilities.begin(), probabilities.end());
  std::sort(f.begin(), f.end(), std::greater<>());
  f.resize(2 * num_classes, 0.0);
  f[num_classes + static_cast<std::size_t>(label)] = 1.0;
  return f;
}

Dataset build_attack_dataset(const ShadowSet& shadows, const Dataset& train_set) {
  if (shadows.shadows.empty()) throw InvalidArgument("build_attack_dataset: no shadow models");
  const auto index = train_set.index();
  const std::size_t k = shadows.shadows.front().model.spec.num_classes();
  Dataset out;
  out.name = "attack";
  out.num_features = 2 * k;
  out.num_classes = 2;
  auto add = [&](const MlpModel& model, SampleId id, int member) {
    const std::size_t r = index.at(id);
    const auto p = forward(model, train_set.row(r));
    const auto f = attack_features(p, train_set.labels[r], k);
    out.features.insert(out.features.end(), f.begin(), f.end());
    out.labels.push_back(member);
    out.ids.push_back(out.ids.size());
  };
  for (const auto& sh : shadows.shadows) {
    for (SampleId id : sh.in_ids) add(sh.model, id, 1);
    for (SampleId id : sh.out_ids) add(sh.model, id, 0);
  }
  return out;
}

AttackClassifier train_attack(const Dataset& attack_dataset, const AttackTrainConfig& cfg) {
  if (attack_dataset.empty()) throw InvalidArgument("train_attack: empty attack dataset");
  MlpSpec spec;
  spec.layer_dims.push_back(attack_dataset.num_features);
  spec.layer_dims.insert(spec.layer_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  spec.layer_dims.push_back(2);
  spec.activation = Activation::relu;
  spec.seed = derive_seed(cfg.seed, 0x61747463);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = std::min(cfg.batch_size, attack_dataset.size());
  tc.learning_rate = cfg.learning_rate;
  tc.shuffle_seed = derive_seed(cfg.seed, 0x61747464);
  auto trained = train(init_mlp(spec), attack_dataset, tc);
  AttackClassifier clf{std::move(trained.model), 0.0};
  clf.train_accuracy = accuracy(clf.model, attack_dataset);
  return clf;
}

double member_probability(const AttackClassifier& clf, std::span<const double> features) {
  return forward(clf.model, features)[1];
}

double attack_rate(const AttackClassifier& clf, const ProbabilityFn& target, const Dataset& points,
                   double threshold) {
  if (points.empty()) return 0.0;
  const std::size_t k = clf.model.spec.input_dim() / 2;
  std::size_t members = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto p = target(points.row(i));
    if (p.size() != k) throw DimensionMismatch("attack_rate: target class count mismatch");
    if (member_probability(clf, attack_features(p, points.labels[i], k)) > threshold) ++members;
  }
  return static_cast<double>(members) / static_cast<double>(points.size());
}

double attack_rate(const AttackClassifier& clf, const MlpModel& target, const Dataset& points,
                   double threshold) {
  return attack_rate(clf, as_predictor(target), points, threshold);
}

void save_attack(const AttackClassifier& clf, const std::filesystem::path& path) {
  save_model(clf.model, path, "attack");
}

AttackClassifier load_attack(const std::filesystem::path& path) {
  return {load_model(path, "attack"), 0.0};
}

}  // namespace puma
