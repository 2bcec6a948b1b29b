#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "puma/dataset.hpp"
#include "puma/metrics.hpp"
#include "puma/model.hpp"

namespace puma {

/// Trains a fresh model (init from spec.seed) on train_set minus marked_ids.
/// The batch size is clipped to the remaining sample count.
TrainResult retrain(const Dataset& train_set, const IdSet& marked_ids, const MlpSpec& spec,
                    const TrainConfig& config);

struct SisaShard {
  MlpModel model;
  Dataset data;          // the shard's members
  TrainConfig config;    // per-shard derived seeds
  std::size_t index = 0; // position in the original partition
};

struct SisaEnsemble {
  std::vector<SisaShard> shards;
  std::size_t num_shards = 0;
  MlpSpec spec;
  TrainConfig train_config;
};

/// Partitions ids into num_shards contiguous chunks of a seeded permutation
/// (sizes differ by at most one) and trains one model per chunk. Ids in
/// `grouped` are placed first so they concentrate in the fewest shards.
SisaEnsemble sisa_train(const Dataset& train_set, std::size_t num_shards, const MlpSpec& spec,
                        const TrainConfig& config, std::uint64_t seed, const IdSet& grouped = {});

struct SisaRemoval {
  SisaEnsemble ensemble;
  std::vector<std::size_t> retrained;  // original shard indices
  std::vector<std::size_t> dropped;    // shards whose every member was marked
};

/// Retrains only the shards holding marked ids; other shards are copied
/// untouched.
SisaRemoval sisa_remove(const SisaEnsemble& ensemble, const IdSet& marked_ids);

/// Mean of the shard probability vectors.
std::vector<double> sisa_predict(const SisaEnsemble& ensemble, std::span<const double> x);
ProbabilityFn as_predictor(const SisaEnsemble& ensemble);

IdSet sisa_members(const SisaEnsemble& ensemble);

inline constexpr std::string_view kEnsembleManifest = "manifest.json";
void save_ensemble(const SisaEnsemble& ensemble, const std::filesystem::path& dir);
SisaEnsemble load_ensemble(const std::filesystem::path& dir);

struct AmnesiacResult {
  MlpModel model;
  std::vector<std::size_t> removed_entries;  // ledger positions subtracted
};

/// Subtracts the recorded delta of every batch that contains a marked id.
/// The model must be the one the ledger was recorded for.
AmnesiacResult amnesiac_remove(const MlpModel& model, const BatchLedger& ledger,
                               const IdSet& marked_ids);

}  // namespace puma
