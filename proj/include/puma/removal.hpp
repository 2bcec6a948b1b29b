#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "puma/dataset.hpp"
#include "puma/influence.hpp"
#include "puma/model.hpp"

namespace puma {

struct RemovalConfig {
  double eta = 0.05;       // projection rate
  double l1 = 0.0;
  double l2 = 1e-3;
  std::size_t pool_size = 512;
  double lambda_box = 1.0;  // |lambda_j| <= lambda_box
  std::uint64_t seed = 0;
  /// Accept an empty marked set and return the model unchanged.
  bool allow_empty = false;

  static constexpr double kMaxEta = 0.5;
  void validate() const;
};

struct LambdaSolution {
  std::vector<SampleId> ids;
  std::vector<double> lambdas;
  double objective_value = 0.0;
  std::size_t nnz = 0;
  int iterations = 0;
  /// False when the pool carries no signal (all psi zero) but the target is
  /// nonzero, so the residual cannot be reduced.
  bool attained = true;
};

/// Elastic-net least squares over the box [-lambda_box, lambda_box]^m,
///   (sum_j lambda_j psi_j - target)^2 + l1 |lambda|_1 + l2 |lambda|_2^2,
/// by proximal gradient (step 1 / Lipschitz). Stops when no coordinate moves
/// more than 1e-10 or after 10^4 iterations. Starts from lambda = 0 when
/// l2 == 0, otherwise from the exact minimiser found by a scalar bisection.
LambdaSolution solve_lambda(std::span<const InfluenceScore> psi_pool, double psi_marked_sum,
                            const RemovalConfig& cfg);

double lambda_objective(std::span<const double> psi, std::span<const double> lambdas,
                        double target, double l1, double l2);

/// Everything a removal computes before the projection rate is applied.
struct RemovalPlan {
  IdSet marked_ids;
  std::vector<SampleId> pool_ids;
  LambdaSolution lambda;
  double psi_marked_sum = 0.0;
  ParamVector phi_mk;
  ParamVector phi_up;
  double criterion_grad_norm = 0.0;
  double train_grad_norm = 0.0;  // stationarity of the original model
};

struct RemovalDiagnostics {
  RemovalPlan plan;
  double eta = 0.0;
  ParamVector patch;  // eta * (phi_mk - phi_up), added elementwise to theta
  double pre_accuracy = 0.0;   // on the criterion evaluation set
  double post_accuracy = 0.0;

  nlohmann::json to_json() const;
};

struct RemovalResult {
  MlpModel model;
  RemovalDiagnostics diagnostics;
};

/// Cache grad(C) H^-1, score marked and pool points, solve lambda, and
/// project both summed gradients through H^-1. When `pool` is given it is
/// used verbatim as the upweight set; otherwise up to cfg.pool_size ids are
/// drawn uniformly from the unmarked remainder.
RemovalPlan plan_removal(const MlpModel& model, const Dataset& train_set, const IdSet& marked_ids,
                         const CriterionSpec& criterion, const RemovalConfig& cfg,
                         const LissaConfig& lissa_cfg,
                         const std::optional<IdSet>& pool = std::nullopt);

/// theta_mod = theta_org + eta * (phi_mk - phi_up).
RemovalResult apply_removal(const MlpModel& model, const RemovalPlan& plan, double eta,
                            const CriterionSpec& criterion);

RemovalResult remove(const MlpModel& model, const Dataset& train_set, const IdSet& marked_ids,
                     const CriterionSpec& criterion, const RemovalConfig& cfg,
                     const LissaConfig& lissa_cfg,
                     const std::optional<IdSet>& pool = std::nullopt);

// Debugging -------------------------------------------------------------------

struct DebugReport {
  std::vector<SampleId> suspects;  // ranked by psi, most negative first
  std::map<std::string, IdSet> categories;  // over_confident, over_uncertain, other_noise
  std::map<SampleId, double> influence;
  std::map<SampleId, double> confidence;
  std::vector<SampleId> ranking;  // every training id, most negative psi first
  bool guard_triggered = false;
};

/// Suspected mislabels: the k most negative-psi ids minus the k least and k
/// most confident ids, emptied when their mean psi exceeds the mean psi of
/// the low-influence, low-confidence intersection.
DebugReport debug_mislabels(const MlpModel& model, const Dataset& train_set,
                            const CriterionSpec& criterion, std::size_t k,
                            const LissaConfig& lissa_cfg);

/// Splits the k most negative-psi ids into over-confident, over-uncertain,
/// and other-noise groups.
DebugReport debug_categories(const MlpModel& model, const Dataset& train_set,
                             const CriterionSpec& criterion, std::size_t k,
                             const LissaConfig& lissa_cfg);

struct CalibrationResult {
  MlpModel model;
  DebugReport report;
  std::optional<RemovalDiagnostics> removal;
  bool applied = false;
  std::string notice;
};

inline constexpr double kMaxCalibrationEta = 1e-3;

/// Debug against the calibration surrogate, then remove over-confident and
/// other-noise points while upweighting the over-uncertain ones.
CalibrationResult calibration_patch(const MlpModel& model, const Dataset& train_set,
                                    const LissaConfig& lissa_cfg, double eta, std::size_t k,
                                    const RemovalConfig& removal_cfg);

}  // namespace puma
