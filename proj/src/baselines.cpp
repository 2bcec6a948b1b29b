#include "puma/baselines.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "puma/errors.hpp"
#include "puma/rng.hpp"

namespace puma {

TrainResult retrain(const Dataset& train_set, const IdSet& marked_ids, const MlpSpec& spec,
                    const TrainConfig& config) {
  const Dataset remaining = train_set.without_ids(marked_ids);
  if (remaining.empty()) throw InvalidArgument("retrain: every training point is marked");
  TrainConfig cfg = config;
  cfg.batch_size = std::min(cfg.batch_size, remaining.size());
  return train(init_mlp(spec), remaining, cfg);
}

namespace {

SisaShard train_shard(const Dataset& data, std::size_t index, const MlpSpec& spec,
                      const TrainConfig& config) {
  MlpSpec shard_spec = spec;
  shard_spec.seed = derive_seed(spec.seed, index + 1);
  TrainConfig cfg = config;
  cfg.shuffle_seed = derive_seed(config.shuffle_seed, index + 1);
  cfg.batch_size = std::min(cfg.batch_size, data.size());
  cfg.record_ledger = false;
  cfg.grouped_ids.clear();
  auto trained = train(init_mlp(shard_spec), data, cfg);
  return {std::move(trained.model), data, cfg, index};
}

}  // namespace

SisaEnsemble sisa_train(const Dataset& train_set, std::size_t num_shards, const MlpSpec& spec,
                        const TrainConfig& config, std::uint64_t seed, const IdSet& grouped) {
  if (num_shards == 0 || num_shards > train_set.size()) {
    throw InvalidArgument("sisa_train: num_shards must lie in [1, n]");
  }
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(seed, 0x73697361);
  shuffle(order, rng);
  if (!grouped.empty()) {
    std::stable_partition(order.begin(), order.end(),
                          [&](std::size_t r) { return contains(grouped, train_set.ids[r]); });
  }
  SisaEnsemble ens;
  ens.num_shards = num_shards;
  ens.spec = spec;
  ens.train_config = config;
  const std::size_t n = order.size();
  std::size_t start = 0;
  for (std::size_t s = 0; s < num_shards; ++s) {
    const std::size_t len = n / num_shards + (s < n % num_shards ? 1 : 0);
    if (len == 0) throw InvalidArgument("sisa_train: empty shard after partition");
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(start + len));
    std::sort(rows.begin(), rows.end());
    ens.shards.push_back(train_shard(train_set.subset(rows), s, spec, config));
    start += len;
  }
  return ens;
}

IdSet sisa_members(const SisaEnsemble& ensemble) {
  IdSet all;
  for (const auto& s : ensemble.shards) all.insert(all.end(), s.data.ids.begin(), s.data.ids.end());
  return make_id_set(std::move(all));
}

SisaRemoval sisa_remove(const SisaEnsemble& ensemble, const IdSet& marked_ids) {
  const IdSet members = sisa_members(ensemble);
  for (SampleId id : marked_ids) {
    if (!contains(members, id)) {
      throw InvalidArgument("sisa_remove: id " + std::to_string(id) + " is not in the ensemble");
    }
  }
  SisaRemoval out;
  out.ensemble.num_shards = ensemble.num_shards;
  out.ensemble.spec = ensemble.spec;
  out.ensemble.train_config = ensemble.train_config;
  for (const auto& shard : ensemble.shards) {
    const bool touched = std::any_of(shard.data.ids.begin(), shard.data.ids.end(),
                                     [&](SampleId id) { return contains(marked_ids, id); });
    if (!touched) {
      out.ensemble.shards.push_back(shard);
      continue;
    }
    Dataset kept = shard.data.without_ids(marked_ids);
    if (kept.empty()) {
      out.dropped.push_back(shard.index);
      continue;
    }
    out.retrained.push_back(shard.index);
    out.ensemble.shards.push_back(
        train_shard(kept, shard.index, ensemble.spec, ensemble.train_config));
  }
  return out;
}

std::vector<double> sisa_predict(const SisaEnsemble& ensemble, std::span<const double> x) {
  if (ensemble.shards.empty()) throw InvalidArgument("sisa_predict: empty ensemble");
  std::vector<double> mean;
  for (const auto& shard : ensemble.shards) {
    const auto p = forward(shard.model, x);
    if (mean.empty()) mean.assign(p.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k];
  }
  const double inv = 1.0 / static_cast<double>(ensemble.shards.size());
  for (double& v : mean) v *= inv;
  return mean;
}

ProbabilityFn as_predictor(const SisaEnsemble& ensemble) {
  return [&ensemble](std::span<const double> x) { return sisa_predict(ensemble, x); };
}

void save_ensemble(const SisaEnsemble& ensemble, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "puma-sisa-ensemble/1"},
                          {"num_shards", ensemble.num_shards},
                          {"shards", nlohmann::json::array()}};
  for (const auto& shard : ensemble.shards) {
    const std::string file = "shard_" + std::to_string(shard.index) + ".json";
    save_model(shard.model, dir / file, "sisa_shard");
    const std::string data_file = "shard_" + std::to_string(shard.index) + ".csv";
    save_csv(shard.data, dir / data_file);
    manifest["shards"].push_back({{"index", shard.index},
                                  {"checkpoint", file},
                                  {"data", data_file},
                                  {"member_ids", shard.data.ids},
                                  {"labels", shard.data.labels},
                                  {"num_classes", shard.data.num_classes},
                                  {"epochs", shard.config.epochs},
                                  {"batch_size", shard.config.batch_size},
                                  {"learning_rate", shard.config.learning_rate},
                                  {"shuffle_seed", shard.config.shuffle_seed}});
  }
  manifest["spec"] = ensemble.spec.layer_dims;
  manifest["activation"] = to_string(ensemble.spec.activation);
  manifest["seed"] = ensemble.spec.seed;
  manifest["train_config"] = {{"epochs", ensemble.train_config.epochs},
                              {"batch_size", ensemble.train_config.batch_size},
                              {"learning_rate", ensemble.train_config.learning_rate},
                              {"shuffle_seed", ensemble.train_config.shuffle_seed}};
  std::ofstream out(dir / kEnsembleManifest);
  if (!out) throw IoError("cannot write ensemble manifest in '" + dir.string() + "'");
  out << manifest.dump(2) << '\n';
}

SisaEnsemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream in(dir / kEnsembleManifest);
  if (!in) throw IoError("no ensemble manifest in '" + dir.string() + "'");
  SisaEnsemble ens;
  try {
    nlohmann::json m;
    in >> m;
    if (m.at("format").get<std::string>() != "puma-sisa-ensemble/1") {
      throw ParseError("unsupported ensemble format");
    }
    ens.num_shards = m.at("num_shards").get<std::size_t>();
    ens.spec.layer_dims = m.at("spec").get<std::vector<std::size_t>>();
    ens.spec.activation = parse_activation(m.at("activation").get<std::string>());
    ens.spec.seed = m.at("seed").get<std::uint64_t>();
    const auto& tc = m.at("train_config");
    ens.train_config.epochs = tc.at("epochs").get<int>();
    ens.train_config.batch_size = tc.at("batch_size").get<std::size_t>();
    ens.train_config.learning_rate = tc.at("learning_rate").get<double>();
    ens.train_config.shuffle_seed = tc.at("shuffle_seed").get<std::uint64_t>();
    for (const auto& s : m.at("shards")) {
      SisaShard shard;
      shard.index = s.at("index").get<std::size_t>();
      shard.model = load_model(dir / s.at("checkpoint").get<std::string>(), "sisa_shard");
      auto csv = load_csv(dir / s.at("data").get<std::string>(), "label", false);
      shard.data = std::move(csv.dataset);
      shard.data.ids = s.at("member_ids").get<std::vector<SampleId>>();
      shard.data.labels = s.at("labels").get<std::vector<int>>();
      shard.data.num_classes = s.at("num_classes").get<std::size_t>();
      shard.data.name = "sisa_shard_" + std::to_string(shard.index);
      shard.data.validate();
      shard.config = ens.train_config;
      shard.config.epochs = s.at("epochs").get<int>();
      shard.config.batch_size = s.at("batch_size").get<std::size_t>();
      shard.config.learning_rate = s.at("learning_rate").get<double>();
      shard.config.shuffle_seed = s.at("shuffle_seed").get<std::uint64_t>();
      ens.shards.push_back(std::move(shard));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed ensemble manifest: ") + e.what());
  }
  return ens;
}

AmnesiacResult amnesiac_remove(const MlpModel& model, const BatchLedger& ledger,
                               const IdSet& marked_ids) {
  if (fingerprint(model.params) != ledger.final_fingerprint) {
    throw InvalidArgument("amnesiac_remove: model does not match the ledger's training run");
  }
  AmnesiacResult out{model, {}};
  for (std::size_t e = 0; e < ledger.entries.size(); ++e) {
    const auto& entry = ledger.entries[e];
    const bool hit = std::any_of(entry.members.begin(), entry.members.end(),
                                 [&](SampleId id) { return contains(marked_ids, id); });
    if (!hit) continue;
    out.model.params -= entry.delta;
    out.removed_entries.push_back(e);
  }
  return out;
}

}  // namespace puma
