#include "puma/removal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "puma/errors.hpp"
#include "puma/metrics.hpp"
#include "puma/rng.hpp"

namespace puma {

void RemovalConfig::validate() const {
  if (!(eta >= 0.0) || eta > kMaxEta) {
    throw InvalidArgument("RemovalConfig: eta must lie in [0, " + std::to_string(kMaxEta) + "]");
  }
  if (!(l1 >= 0.0) || !(l2 >= 0.0)) throw InvalidArgument("RemovalConfig: l1, l2 must be >= 0");
  if (pool_size == 0) throw InvalidArgument("RemovalConfig: pool_size must be positive");
  if (!(lambda_box > 0.0)) throw InvalidArgument("RemovalConfig: lambda_box must be positive");
}

// Lambda solver -----------------------------------------------------------------

double lambda_objective(std::span<const double> psi, std::span<const double> lambdas,
                        double target, double l1, double l2) {
  double fit = -target;
  double a1 = 0.0;
  double a2 = 0.0;
  for (std::size_t j = 0; j < psi.size(); ++j) {
    fit += lambdas[j] * psi[j];
    a1 += std::abs(lambdas[j]);
    a2 += lambdas[j] * lambdas[j];
  }
  return fit * fit + l1 * a1 + l2 * a2;
}

namespace {

// With l2 > 0 every optimal lambda_j is a clipped soft-threshold of mu * psi_j,
// where mu = 2 (target - sum lambda psi). That residual equation is monotone
// in mu, so bisection recovers the minimiser; the proximal iteration below
// then starts at its own fixed point instead of crawling along the flat
// directions orthogonal to psi.
std::vector<double> exact_start(const std::vector<double>& psi, double target,
                                const RemovalConfig& cfg) {
  auto lambdas_at = [&](double mu, std::vector<double>& lam) {
    double fit = 0.0;
    for (std::size_t j = 0; j < psi.size(); ++j) {
      const double z = mu * psi[j];
      const double shrunk = z > cfg.l1 ? z - cfg.l1 : (z < -cfg.l1 ? z + cfg.l1 : 0.0);
      lam[j] = std::clamp(shrunk / (2.0 * cfg.l2), -cfg.lambda_box, cfg.lambda_box);
      fit += lam[j] * psi[j];
    }
    return mu - 2.0 * (target - fit);
  };
  std::vector<double> lam(psi.size(), 0.0);
  if (target == 0.0) return lam;
  double lo = std::min(0.0, 2.0 * target), hi = std::max(0.0, 2.0 * target);
  for (int it = 0; it < 200 && lo < hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    (lambdas_at(mid, lam) < 0.0 ? lo : hi) = mid;
  }
  const double gap_lo = std::abs(lambdas_at(lo, lam));
  const double gap_hi = std::abs(lambdas_at(hi, lam));
  lambdas_at(gap_lo < gap_hi ? lo : hi, lam);
  return lam;
}

}  // namespace

LambdaSolution solve_lambda(std::span<const InfluenceScore> psi_pool, double psi_marked_sum,
                            const RemovalConfig& cfg) {
  if (psi_pool.empty()) throw InvalidArgument("solve_lambda: empty upweight pool");
  constexpr int kMaxIterations = 10'000;
  constexpr double kTolerance = 1e-10;

  const std::size_t m = psi_pool.size();
  std::vector<double> psi(m);
  LambdaSolution sol;
  sol.ids.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    psi[j] = psi_pool[j].psi;
    sol.ids.push_back(psi_pool[j].id);
  }
  sol.lambdas.assign(m, 0.0);

  const double psi_sq = std::inner_product(psi.begin(), psi.end(), psi.begin(), 0.0);
  const double lipschitz = 2.0 * psi_sq + 2.0 * cfg.l2;
  if (lipschitz == 0.0) {
    // No curvature: psi == 0 and l2 == 0, so lambda cannot change the fit.
    sol.objective_value = psi_marked_sum * psi_marked_sum;
    sol.attained = psi_marked_sum == 0.0;
    return sol;
  }
  const double step = 1.0 / lipschitz;
  const double thresh = step * cfg.l1;
  auto& lam = sol.lambdas;
  if (cfg.l2 > 0.0) lam = exact_start(psi, psi_marked_sum, cfg);
  for (int it = 0; it < kMaxIterations; ++it) {
    double residual = -psi_marked_sum;
    for (std::size_t j = 0; j < m; ++j) residual += lam[j] * psi[j];
    double max_change = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double grad = 2.0 * residual * psi[j] + 2.0 * cfg.l2 * lam[j];
      double z = lam[j] - step * grad;
      // prox of l1 + box indicator: soft-threshold then clip
      z = z > thresh ? z - thresh : (z < -thresh ? z + thresh : 0.0);
      z = std::clamp(z, -cfg.lambda_box, cfg.lambda_box);
      max_change = std::max(max_change, std::abs(z - lam[j]));
      lam[j] = z;
    }
    sol.iterations = it + 1;
    if (max_change < kTolerance) break;
  }
  sol.objective_value = lambda_objective(psi, lam, psi_marked_sum, cfg.l1, cfg.l2);
  sol.nnz = static_cast<std::size_t>(
      std::count_if(lam.begin(), lam.end(), [](double v) { return v != 0.0; }));
  sol.attained = !(psi_sq == 0.0 && psi_marked_sum != 0.0);
  return sol;
}

// Removal -----------------------------------------------------------------------

namespace {

std::vector<std::size_t> rows_of(const std::unordered_map<SampleId, std::size_t>& index,
                                 std::span<const SampleId> ids, const char* what) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (SampleId id : ids) {
    auto it = index.find(id);
    if (it == index.end()) {
      throw InvalidArgument(std::string(what) + ": id " + std::to_string(id) +
                            " is not in the training set");
    }
    rows.push_back(it->second);
  }
  return rows;
}

}  // namespace

RemovalPlan plan_removal(const MlpModel& model, const Dataset& train_set, const IdSet& marked_ids,
                         const CriterionSpec& criterion, const RemovalConfig& cfg,
                         const LissaConfig& lissa_cfg, const std::optional<IdSet>& pool) {
  cfg.validate();
  lissa_cfg.validate();
  RemovalPlan plan;
  plan.phi_mk = ParamVector(model.spec.layout());
  plan.phi_up = ParamVector(model.spec.layout());
  plan.marked_ids = make_id_set(marked_ids);
  if (plan.marked_ids.empty()) {
    if (!cfg.allow_empty) throw InvalidArgument("remove: marked set is empty");
    plan.lambda.objective_value = 0.0;
    return plan;
  }
  const auto index = train_set.index();
  const auto marked_rows = rows_of(index, plan.marked_ids, "remove");

  // Upweight pool, excluding marked ids before sampling.
  if (pool) {
    plan.pool_ids = make_id_set(*pool);
  } else {
    std::vector<SampleId> remaining;
    for (SampleId id : train_set.ids) {
      if (!contains(plan.marked_ids, id)) remaining.push_back(id);
    }
    std::sort(remaining.begin(), remaining.end());
    CounterRng rng(cfg.seed, 0x706f6f6c);
    shuffle(remaining, rng);
    remaining.resize(std::min(remaining.size(), cfg.pool_size));
    std::sort(remaining.begin(), remaining.end());
    plan.pool_ids = std::move(remaining);
  }
  for (SampleId id : plan.pool_ids) {
    if (contains(plan.marked_ids, id)) {
      throw Error("remove: upweight pool overlaps the marked set (id " + std::to_string(id) + ")");
    }
  }
  const auto pool_rows = rows_of(index, plan.pool_ids, "remove");

  plan.train_grad_norm = norm(mean_grad(model, train_set, LossKind::cross_entropy));
  const ParamVector c_grad = criterion_grad(model, criterion);
  plan.criterion_grad_norm = norm(c_grad);
  const IhvpCache cache{inverse_hvp_adjoint(model, train_set, c_grad, lissa_cfg), criterion.loss,
                        lissa_cfg, fingerprint(model.params)};

  const auto marked_scores = psi_scores(cache, model, train_set.subset(marked_rows));
  for (const auto& s : marked_scores) plan.psi_marked_sum += s.psi;

  if (!pool_rows.empty()) {
    const auto pool_scores = psi_scores(cache, model, train_set.subset(pool_rows));
    plan.lambda = solve_lambda(pool_scores, plan.psi_marked_sum, cfg);
  } else {
    plan.lambda.objective_value = plan.psi_marked_sum * plan.psi_marked_sum;
  }

  const ParamVector v_mk = gradient_sum(model, train_set, marked_rows);
  plan.phi_mk = phi_projection(model, train_set, v_mk, lissa_cfg);
  if (!pool_rows.empty()) {
    const ParamVector v_up = gradient_sum(model, train_set, pool_rows, plan.lambda.lambdas);
    plan.phi_up = phi_projection(model, train_set, v_up, lissa_cfg);
  }
  return plan;
}

RemovalResult apply_removal(const MlpModel& model, const RemovalPlan& plan, double eta,
                            const CriterionSpec& criterion) {
  if (!(eta >= 0.0) || eta > RemovalConfig::kMaxEta) {
    throw InvalidArgument("remove: eta must lie in [0, 0.5]");
  }
  RemovalResult res{model, {}};
  auto& diag = res.diagnostics;
  diag.plan = plan;
  diag.eta = eta;
  diag.patch = ParamVector(model.spec.layout());
  for (std::size_t i = 0; i < diag.patch.size(); ++i) {
    diag.patch[i] = eta * (plan.phi_mk[i] - plan.phi_up[i]);
  }
  // Zero entries are skipped so an all-zero patch leaves every bit intact.
  for (std::size_t i = 0; i < diag.patch.size(); ++i) {
    if (diag.patch[i] != 0.0) res.model.params[i] += diag.patch[i];
  }
  if (criterion.eval_set != nullptr && !criterion.eval_set->empty()) {
    diag.pre_accuracy = accuracy(model, *criterion.eval_set);
    diag.post_accuracy = accuracy(res.model, *criterion.eval_set);
  }
  return res;
}

RemovalResult remove(const MlpModel& model, const Dataset& train_set, const IdSet& marked_ids,
                     const CriterionSpec& criterion, const RemovalConfig& cfg,
                     const LissaConfig& lissa_cfg, const std::optional<IdSet>& pool) {
  const RemovalPlan plan =
      plan_removal(model, train_set, marked_ids, criterion, cfg, lissa_cfg, pool);
  return apply_removal(model, plan, cfg.eta, criterion);
}

nlohmann::json RemovalDiagnostics::to_json() const {
  return {{"marked_ids", plan.marked_ids},
          {"pool_ids", plan.pool_ids},
          {"lambdas", plan.lambda.lambdas},
          {"eta", eta},
          {"objective_value", plan.lambda.objective_value},
          {"lambda_nnz", plan.lambda.nnz},
          {"lambda_iterations", plan.lambda.iterations},
          {"lambda_attained", plan.lambda.attained},
          {"psi_marked_sum", plan.psi_marked_sum},
          {"phi_mk_norm", norm(plan.phi_mk)},
          {"phi_up_norm", norm(plan.phi_up)},
          {"patch_norm", norm(patch)},
          {"criterion_grad_norm", plan.criterion_grad_norm},
          {"train_grad_norm", plan.train_grad_norm},
          {"pre_accuracy", pre_accuracy},
          {"post_accuracy", post_accuracy}};
}

// Debugging ---------------------------------------------------------------------

namespace {

struct Scored {
  SampleId id;
  double psi;
  double confidence;
};

std::vector<Scored> score_training_set(const MlpModel& model, const Dataset& train_set,
                                       const CriterionSpec& criterion,
                                       const LissaConfig& lissa_cfg) {
  const IhvpCache cache = build_cache(model, train_set, criterion, lissa_cfg);
  const auto psi = psi_scores(cache, model, train_set);
  std::vector<Scored> out;
  out.reserve(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const auto p = forward(model, train_set.row(i));
    out.push_back({train_set.ids[i], psi[i].psi, p[static_cast<std::size_t>(train_set.labels[i])]});
  }
  return out;
}

template <class Key>
IdSet top_k(const std::vector<Scored>& scored, std::size_t k, Key key) {
  std::vector<const Scored*> order;
  order.reserve(scored.size());
  for (const auto& s : scored) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [&](const Scored* a, const Scored* b) {
    const double ka = key(*a), kb = key(*b);
    if (ka != kb) return ka < kb;
    return a->id < b->id;
  });
  IdSet out;
  for (std::size_t i = 0; i < k && i < order.size(); ++i) out.push_back(order[i]->id);
  return make_id_set(std::move(out));
}

IdSet set_intersection(const IdSet& a, const IdSet& b) {
  IdSet out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

IdSet set_difference(const IdSet& a, const IdSet& b) {
  IdSet out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

IdSet set_union(const IdSet& a, const IdSet& b) {
  IdSet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

struct Partition {
  IdSet low_influence;   // L_if
  IdSet low_confidence;  // L_cf
  IdSet high_confidence; // H_cf
};

DebugReport base_report(const std::vector<Scored>& scored, std::size_t k, Partition& part) {
  DebugReport rep;
  for (const auto& s : scored) {
    rep.influence[s.id] = s.psi;
    rep.confidence[s.id] = s.confidence;
  }
  part.low_influence = top_k(scored, k, [](const Scored& s) { return s.psi; });
  part.low_confidence = top_k(scored, k, [](const Scored& s) { return s.confidence; });
  part.high_confidence = top_k(scored, k, [](const Scored& s) { return -s.confidence; });

  std::vector<const Scored*> order;
  for (const auto& s : scored) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](const Scored* a, const Scored* b) {
    if (a->psi != b->psi) return a->psi < b->psi;
    return a->id < b->id;
  });
  for (const auto* s : order) rep.ranking.push_back(s->id);
  return rep;
}

std::vector<SampleId> rank_by_psi(const IdSet& ids, const DebugReport& rep) {
  std::vector<SampleId> out(ids.begin(), ids.end());
  std::stable_sort(out.begin(), out.end(), [&](SampleId a, SampleId b) {
    const double pa = rep.influence.at(a), pb = rep.influence.at(b);
    if (pa != pb) return pa < pb;
    return a < b;
  });
  return out;
}

double mean_psi(const IdSet& ids, const DebugReport& rep) {
  double s = 0.0;
  for (SampleId id : ids) s += rep.influence.at(id);
  return s / static_cast<double>(ids.size());
}

void fill_categories(DebugReport& rep, const Partition& part) {
  // With k <= n/2 the confidence sets are disjoint; beyond that an id in both
  // counts as over-uncertain so the categories stay disjoint.
  const IdSet over_uncertain = set_intersection(part.low_influence, part.low_confidence);
  const IdSet over_confident =
      set_difference(set_intersection(part.low_influence, part.high_confidence), part.low_confidence);
  const IdSet other =
      set_difference(part.low_influence, set_union(part.low_confidence, part.high_confidence));
  rep.categories["over_confident"] = over_confident;
  rep.categories["over_uncertain"] = over_uncertain;
  rep.categories["other_noise"] = other;
}

void check_k(std::size_t k, std::size_t n) {
  if (k == 0 || k > n) {
    throw InvalidArgument("debug: k must lie in [1, " + std::to_string(n) + "], got " +
                          std::to_string(k));
  }
}

}  // namespace

DebugReport debug_mislabels(const MlpModel& model, const Dataset& train_set,
                            const CriterionSpec& criterion, std::size_t k,
                            const LissaConfig& lissa_cfg) {
  check_k(k, train_set.size());
  const auto scored = score_training_set(model, train_set, criterion, lissa_cfg);
  Partition part;
  DebugReport rep = base_report(scored, k, part);
  fill_categories(rep, part);

  IdSet suspects = rep.categories.at("other_noise");
  const IdSet& uncertain = rep.categories.at("over_uncertain");
  // Mean-influence guard; skipped when the comparison set is empty.
  if (!suspects.empty() && !uncertain.empty() &&
      mean_psi(suspects, rep) > mean_psi(uncertain, rep)) {
    suspects.clear();
    rep.guard_triggered = true;
  }
  rep.suspects = rank_by_psi(suspects, rep);
  return rep;
}

DebugReport debug_categories(const MlpModel& model, const Dataset& train_set,
                             const CriterionSpec& criterion, std::size_t k,
                             const LissaConfig& lissa_cfg) {
  check_k(k, train_set.size());
  const auto scored = score_training_set(model, train_set, criterion, lissa_cfg);
  Partition part;
  DebugReport rep = base_report(scored, k, part);
  fill_categories(rep, part);
  rep.suspects = rank_by_psi(rep.categories.at("other_noise"), rep);
  return rep;
}

CalibrationResult calibration_patch(const MlpModel& model, const Dataset& train_set,
                                    const LissaConfig& lissa_cfg, double eta, std::size_t k,
                                    const RemovalConfig& removal_cfg) {
  if (!(eta >= 0.0) || eta > kMaxCalibrationEta) {
    throw InvalidArgument("calibration_patch: eta must lie in [0, 1e-3]");
  }
  const CriterionSpec criterion{LossKind::calibration_surrogate, &train_set};
  CalibrationResult res{model, debug_categories(model, train_set, criterion, k, lissa_cfg),
                        std::nullopt, false, {}};
  const IdSet marked = set_union(res.report.categories.at("over_confident"),
                                 res.report.categories.at("other_noise"));
  if (marked.empty()) {
    res.notice = "no over-confident or other-noise points; model left unchanged";
    return res;
  }
  RemovalConfig cfg = removal_cfg;
  cfg.eta = eta;
  auto removal = remove(model, train_set, marked, criterion, cfg, lissa_cfg,
                        res.report.categories.at("over_uncertain"));
  res.model = std::move(removal.model);
  res.removal = std::move(removal.diagnostics);
  res.applied = true;
  return res;
}

}  // namespace puma
