#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "puma/attack.hpp"
#include "puma/dataset.hpp"
#include "puma/influence.hpp"
#include "puma/model.hpp"
#include "puma/removal.hpp"

namespace puma {

enum class Method { puma, retrain, sisa, amnesiac };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);

/// How marked sets are chosen: per-class k-means clusters at each configured
/// fraction, one whole generator cluster (repeat r marks cluster r), or
/// nothing at all.
enum class MarkTarget { kmeans, cluster, none };

/// Which data the removal criterion averages over.
enum class CriterionSet { remaining, test, train };

struct DataSource {
  std::optional<Shape> shape = Shape::radial;
  std::filesystem::path csv;
  std::string label_column = "label";
  std::size_t n = 600;
  double noise = 0.15;
  double test_fraction = 0.2;
  double flip_fraction = 0.0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  int repeats = 5;
  double delta = 0.05;  // tolerated accuracy change, evaluation only

  DataSource data;
  std::vector<std::size_t> layers = {2, 64, 32, 2};
  Activation activation = Activation::relu;
  TrainConfig train;

  Scenario scenario = Scenario::random;
  std::vector<double> fractions = {0.2, 0.4, 0.6, 0.8};
  int kmeans_k = 5;
  MarkTarget mark_target = MarkTarget::kmeans;

  std::vector<Method> methods = {Method::puma, Method::retrain};
  RemovalConfig removal;
  CriterionSet criterion = CriterionSet::remaining;
  LissaConfig lissa;
  std::size_t sisa_shards = 5;

  bool attack_enabled = false;
  ShadowConfig shadows;
  AttackTrainConfig attack;

  double k_fraction = 0.1;  // debug top-k as a share of the training set
  double inspect_fraction = 0.2;
  double grid_step = 0.05;
  bool per_point_ihvp = false;

  double calibration_eta = 1e-4;
  double calibration_k_fraction = 0.1;

  std::vector<double> eta_grid = {0.0, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.5};

  /// Throws InvalidArgument describing the first offending key.
  void validate() const;
  nlohmann::json to_json() const;
};

/// INI text with sections [experiment] [data] [model] [train] [mark]
/// [removal] [lissa] [sisa] [attack] [debug] [calibration] [sweep]. Unknown
/// sections or keys are rejected. Throws ParseError or InvalidArgument.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Inverse of ExperimentConfig::to_json, so a report's config echo can be re-run.
ExperimentConfig config_from_json(const nlohmann::json& j);

inline constexpr std::string_view kReportSchema = "puma-run-report/1";

struct ReportCell {
  std::string method;
  std::string scenario;
  double fraction = 0.0;
  int repeat = 0;
  bool ok = true;
  std::string error;
  /// Scalar results; names ending in "_ms" are wall-clock timings.
  std::map<std::string, double> metrics;
  nlohmann::json details = nlohmann::json::object();
};

struct RunReport {
  std::string kind;
  nlohmann::json config;
  nlohmann::json environment;
  std::vector<ReportCell> cells;

  std::size_t failed_cells() const;
  /// 0 all cells ok, 2 some failed, 3 none succeeded (or no cells).
  int exit_code() const;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
  /// The JSON form with every timing metric removed.
  nlohmann::json without_timing() const;
  /// Cells matching method (and fraction when given), in report order.
  std::vector<const ReportCell*> select(std::string_view method,
                                        std::optional<double> fraction = std::nullopt) const;
};

/// The base model of one repeat (random scenario, no ledger) and its
/// training wall-clock in milliseconds.
std::pair<MlpModel, double> train_base_model(const ExperimentConfig& cfg, int repeat);

RunReport run_removal_experiment(const ExperimentConfig& cfg);
/// Ranks flipped labels by PUMA psi, by the Hessian-free NTK score, at random
/// and (optionally) by NTK with one inverse-HVP per training point.
RunReport run_debug_experiment(const ExperimentConfig& cfg);
RunReport run_calibration_experiment(const ExperimentConfig& cfg);
/// One removal plan per repeat, applied at every eta in cfg.eta_grid.
RunReport run_eta_sweep(const ExperimentConfig& cfg);

enum class ReportFormat { json, csv };
ReportFormat parse_report_format(std::string_view name);

void emit_report(const RunReport& report, const std::filesystem::path& path, ReportFormat format);
std::string report_to_csv(const RunReport& report);
RunReport load_report(const std::filesystem::path& path);

/// Per-repeat seeds: cfg.seed + stage offset + repeat.
namespace seed_offset {
inline constexpr std::uint64_t data = 100;
inline constexpr std::uint64_t split = 200;
inline constexpr std::uint64_t model = 300;
inline constexpr std::uint64_t shuffle = 400;
inline constexpr std::uint64_t mark = 500;
inline constexpr std::uint64_t removal = 600;
inline constexpr std::uint64_t lissa = 700;
inline constexpr std::uint64_t shadows = 800;
inline constexpr std::uint64_t attack = 900;
inline constexpr std::uint64_t flip = 1000;
inline constexpr std::uint64_t ranking = 1100;
inline constexpr std::uint64_t sisa = 1200;
}  // namespace seed_offset

}  // namespace puma
