#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "puma/dataset.hpp"
#include "puma/model.hpp"

namespace puma {

/// The performance criterion C: mean of `loss` over `eval_set`.
struct CriterionSpec {
  LossKind loss = LossKind::cross_entropy;
  const Dataset* eval_set = nullptr;
};

/// Stochastic Neumann-series (LiSSA) estimator of (H + damping I)^-1 v:
///   r_0 = v,  r_t = v + (I - (H_batch + damping I) / scale) r_{t-1},
/// result = mean over repeats of r_depth / scale.
struct LissaConfig {
  int recursion_depth = 1000;
  double damping = 0.01;
  double scale = 10.0;
  int repeats = 4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static LissaConfig from_json(const nlohmann::json& j);
  bool operator==(const LissaConfig&) const = default;
};

/// Cached row vector grad(C) H^-1, stored transposed (H is symmetric).
struct IhvpCache {
  ParamVector vector;
  LossKind criterion_loss = LossKind::cross_entropy;
  LissaConfig config;
  std::uint64_t param_fingerprint = 0;
};

struct InfluenceScore {
  SampleId id = 0;
  double psi = 0.0;
};

struct LabeledPoint {
  std::span<const double> x;
  int y = 0;
};

/// Mean gradient of the criterion loss over its evaluation set.
ParamVector criterion_grad(const MlpModel& model, const CriterionSpec& criterion);

/// Sum over the given rows of weight_i * grad L_t(x_i, y_i); weights may be
/// empty (all ones).
ParamVector gradient_sum(const MlpModel& model, const Dataset& data,
                         std::span<const std::size_t> rows, std::span<const double> weights = {});

/// Approximates (H + damping I)^-1 v where H is the Hessian of the mean
/// training cross-entropy. Deterministic in cfg.seed. Throws DivergenceError
/// when the recursion blows up (||r_t|| > 1e6 ||v||).
ParamVector inverse_hvp(const MlpModel& model, const Dataset& train_set, const ParamVector& v,
                        const LissaConfig& cfg);

/// Transpose of the exact linear operator inverse_hvp applies for the same
/// config (same sampled batches). The criterion cache is the row vector
/// grad_C * H^-1, so it is built with this; psi_j = <cache, grad_j> then equals
/// <grad_C, inverse_hvp(grad_j)> to rounding.
ParamVector inverse_hvp_adjoint(const MlpModel& model, const Dataset& train_set,
                                const ParamVector& v, const LissaConfig& cfg);

/// Largest |eigenvalue| of H + damping I by power iteration; the LiSSA
/// recursion needs it below cfg.scale.
double estimate_spectral_norm(const MlpModel& model, const Dataset& train_set,
                              const LissaConfig& cfg, int iterations = 30);

IhvpCache build_cache(const MlpModel& model, const Dataset& train_set,
                      const CriterionSpec& criterion, const LissaConfig& cfg);

/// psi_j = <cache, grad L_t(x_j, y_j)> in sample order. Throws StaleCache if
/// the model changed since the cache was built.
std::vector<InfluenceScore> psi_scores(const IhvpCache& cache, const MlpModel& model,
                                       const Dataset& samples);

/// Parameter-space projection H^-1 V for an already summed (and possibly
/// lambda-weighted) gradient V.
ParamVector phi_projection(const MlpModel& model, const Dataset& train_set,
                           const ParamVector& weighted_grad_sum, const LissaConfig& cfg);

/// -grad L(test) H^-1 grad L(train): first-order change of the test loss when
/// the training point is upweighted.
double pairwise_influence(const MlpModel& model, const Dataset& train_set,
                          const LabeledPoint& train_pt, const LabeledPoint& test_pt,
                          const LissaConfig& cfg);

/// Influence without the inverse Hessian: <criterion_grad, grad L_t(x_j, y_j)>.
std::vector<InfluenceScore> ntk_scores(const MlpModel& model, const ParamVector& criterion_grad,
                                       const Dataset& samples);

inline constexpr std::string_view kCacheFormat = "puma-ihvp-cache/1";

nlohmann::json cache_to_json(const IhvpCache& cache);
/// Refuses (StaleCache) when the stored parameter hash does not match `model`.
IhvpCache cache_from_json(const nlohmann::json& j, const MlpModel& model);
void save_cache(const IhvpCache& cache, const std::filesystem::path& path);
IhvpCache load_cache(const std::filesystem::path& path, const MlpModel& model);

}  // namespace puma
