// Acceptance battery: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Runs the fixtures in configs/ with their fixed seeds.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "puma/baselines.hpp"
#include "puma/experiment.hpp"
#include "puma/metrics.hpp"
#include "puma/removal.hpp"

using namespace puma;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig config(const std::string& name) {
  return load_config(std::filesystem::path(PUMA_CONFIG_DIR) / name);
}

MlpModel perturbed(std::vector<std::size_t> dims, Activation act, std::uint64_t seed) {
  MlpModel m = init_mlp({std::move(dims), act, seed});
  CounterRng rng(seed, 9);
  for (auto& x : m.params.values()) x += 0.3 * rng.normal();
  return m;
}

ParamVector random_like(const ParamVector& like, std::uint64_t seed) {
  CounterRng rng(seed, 21);
  ParamVector v(like.layout());
  for (auto& x : v.values()) x = rng.normal();
  return v;
}

// 1 ---------------------------------------------------------------------------

Outcome numerical_core() {
  double grad_err = 0.0;
  for (auto act : {Activation::tanh, Activation::relu}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto m = perturbed({2, 5, 3}, act, seed);
      CounterRng rng(seed, 2);
      const std::vector<double> x{rng.normal(), rng.normal()};
      for (auto loss : {LossKind::cross_entropy, LossKind::calibration_surrogate}) {
        const int y = static_cast<int>(seed % 3);
        const auto g = per_sample_grad(m, x, y, loss);
        // ReLU kinks make central differences meaningless; a step that crosses
        // one shows up as a large one-sided disagreement, so skip those points.
        const auto fd = oracle::fd_grad(m, x, y, loss, 1e-6);
        const auto fd2 = oracle::fd_grad(m, x, y, loss, 2e-6);
        if (oracle::max_relative_error(fd, fd2, 1e-3) > 1e-5) continue;
        grad_err = std::max(grad_err, oracle::max_relative_error(g, fd, 1e-3));
      }
    }
  }

  double sym = 0.0;
  double lin = 0.0;
  const auto data = generate(Shape::two_moons, 64, 0.2, 3);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto m = perturbed({2, 8, 2}, seed % 2 ? Activation::tanh : Activation::relu, seed);
    const auto u = random_like(m.params, 2 * seed);
    const auto v = random_like(m.params, 2 * seed + 1);
    const auto hu = hvp(m, data, u, LossKind::cross_entropy);
    const auto hv = hvp(m, data, v, LossKind::cross_entropy);
    const double a = dot(u, hv), b = dot(v, hu);
    sym = std::max(sym, std::abs(a - b) / std::max(1.0, std::abs(a)));
    const auto combo = hvp(m, data, 2.5 * u + (-0.5) * v, LossKind::cross_entropy);
    const auto want = 2.5 * hu + (-0.5) * hv;
    lin = std::max(lin, norm(combo - want) / std::max(1.0, norm(want)));
  }

  // Softmax regression, 6 parameters, fitted by Newton with the damping as
  // ridge so the dense damped Hessian is the exact operator LiSSA inverts.
  const double damping = 0.01;
  const auto moons = generate(Shape::two_moons, 80, 0.3, 4);
  const oracle::SoftmaxRegression reg{2, 2};
  const std::vector<double> ones(moons.size(), 1.0);
  const Eigen::VectorXd w = reg.fit(moons, ones, damping, Eigen::VectorXd::Zero(6));
  MlpModel model = init_mlp({{2, 2}, Activation::relu, 0});
  model.params = oracle::from_eigen(w, model.params);
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  reg.derivatives(w, moons, ones, damping, g, h);
  LissaConfig lc;
  lc.recursion_depth = 4000;
  lc.damping = damping;
  lc.scale = 5.0;
  lc.repeats = 1;
  lc.batch_size = moons.size();
  double ihvp = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto v = random_like(model.params, 100 + s);
    const Eigen::VectorXd want = h.ldlt().solve(oracle::to_eigen(v));
    lc.seed = s;
    const auto got = inverse_hvp(model, moons, v, lc);
    ihvp = std::max(ihvp, (oracle::to_eigen(got) - want).norm() / want.norm());
  }

  return {grad_err < 1e-4 && sym <= 1e-10 && lin <= 1e-10 && ihvp < 5e-2,
          fmt("grad rel err %.2e, hvp asymmetry %.2e, nonlinearity %.2e, ihvp rel err %.2e",
              grad_err, sym, lin, ihvp)};
}

// 2 ---------------------------------------------------------------------------

std::vector<InfluenceScore> pool_of(const std::vector<double>& psi) {
  std::vector<InfluenceScore> out;
  for (std::size_t j = 0; j < psi.size(); ++j) out.push_back({j, psi[j]});
  return out;
}

Outcome lambda_solver() {
  CounterRng rng(2024, 1);
  double ridge_err = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t m = 1 + rng.below(30);
    std::vector<double> psi(m);
    for (auto& p : psi) p = rng.normal();
    const double target = rng.normal();
    RemovalConfig cfg;
    cfg.l1 = 0.0;
    cfg.l2 = 0.05 + rng.uniform();
    cfg.lambda_box = 1e9;
    const auto sol = solve_lambda(pool_of(psi), target, cfg);
    double sq = 0.0;
    for (double p : psi) sq += p * p;
    for (std::size_t j = 0; j < m; ++j) {
      ridge_err = std::max(ridge_err, std::abs(sol.lambdas[j] - psi[j] * target / (sq + cfg.l2)));
    }
  }

  int killed_ok = 0;
  const int kill_trials = 100;
  for (int t = 0; t < kill_trials; ++t) {
    const std::size_t m = 1 + rng.below(20);
    std::vector<double> psi(m);
    double biggest = 0.0;
    for (auto& p : psi) biggest = std::max(biggest, std::abs(p = rng.normal()));
    const double target = rng.normal();
    RemovalConfig cfg;
    cfg.l2 = rng.uniform();
    cfg.l1 = 2.0 * std::abs(target) * biggest * 1.01;
    const auto sol = solve_lambda(pool_of(psi), target, cfg);
    killed_ok += std::all_of(sol.lambdas.begin(), sol.lambdas.end(), [](double l) { return l == 0.0; });
  }

  int never_worse = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const std::size_t m = 1 + rng.below(40);
    std::vector<double> psi(m);
    const double spread = std::pow(10.0, rng.uniform(-3.0, 2.0));
    for (auto& p : psi) p = spread * rng.normal();
    const double target = spread * 3.0 * rng.normal();
    RemovalConfig cfg;
    cfg.l1 = rng.uniform() < 0.5 ? 0.0 : spread * rng.uniform();
    cfg.l2 = rng.uniform() < 0.2 ? 0.0 : spread * spread * rng.uniform();
    cfg.lambda_box = rng.uniform(0.1, 5.0);
    const auto sol = solve_lambda(pool_of(psi), target, cfg);
    const std::vector<double> zero(m, 0.0);
    const double at_zero = lambda_objective(psi, zero, target, cfg.l1, cfg.l2);
    never_worse += lambda_objective(psi, sol.lambdas, target, cfg.l1, cfg.l2) <= at_zero;
  }

  return {ridge_err <= 1e-8 && killed_ok == kill_trials && never_worse == trials,
          fmt("ridge max err %.2e, killed %d/%d, objective <= zero objective %d/%d", ridge_err,
              killed_ok, kill_trials, never_worse, trials)};
}

// 3 ---------------------------------------------------------------------------

Outcome patch_identities() {
  const auto data = generate(Shape::radial, 300, 0.15, 11);
  const auto sp = split(data, 0.2, 12);
  TrainConfig tc;
  tc.epochs = 60;
  tc.shuffle_seed = 13;
  const auto model = train(init_mlp({{2, 16, 2}, Activation::relu, 14}), sp.train, tc).model;
  const Dataset& eval = sp.test;
  const CriterionSpec crit{LossKind::cross_entropy, &eval};
  LissaConfig lc;
  lc.recursion_depth = 50;
  lc.repeats = 1;
  RemovalConfig rc;
  rc.seed = 15;

  RemovalConfig empty_ok = rc;
  empty_ok.allow_empty = true;
  const bool empty_same = remove(model, sp.train, {}, crit, empty_ok, lc).model.params == model.params;

  const auto marked = mark_for_removal(sp.train, {Scenario::random, 0.2, 5, 16}).ids;
  const auto plan = plan_removal(model, sp.train, marked, crit, rc, lc);
  const bool zero_same = apply_removal(model, plan, 0.0, crit).model.params == model.params;

  bool decomposition = true;
  for (double eta : {1e-4, 0.01, 0.05, 0.3}) {
    const auto res = apply_removal(model, plan, eta, crit);
    const auto& d = res.diagnostics;
    ParamVector want(model.params.layout());
    for (std::size_t i = 0; i < want.size(); ++i) want[i] = eta * (d.plan.phi_mk[i] - d.plan.phi_up[i]);
    decomposition &= d.patch == want;
    decomposition &= res.model.params == model.params + d.patch;
  }
  return {empty_same && zero_same && decomposition,
          fmt("empty marked identical %d, eta 0 identical %d, patch = eta(phi_mk - phi_up) %d",
              empty_same, zero_same, decomposition)};
}

// 4, 6, 7 share the radial removal battery --------------------------------------

Outcome preservation(const RunReport& report) {
  int wins = 0;
  int total = 0;
  double worst = 1.0;
  std::string per;
  for (const auto* p : report.select("puma", 0.8)) {
    for (const auto* r : report.select("retrain", 0.8)) {
      if (r->repeat != p->repeat || !p->ok || !r->ok) continue;
      ++total;
      const double a = p->metrics.at("accuracy_after");
      const double b = r->metrics.at("accuracy_after");
      wins += a - b >= 0.03;
      worst = std::min(worst, a);
      per += fmt(" %.3f/%.3f", a, b);
    }
  }
  return {total == 5 && wins >= 3 && worst >= 0.55,
          fmt("80%% removal, puma beats retrain by >= 3pp on %d/%d, min puma %.3f (puma/retrain:%s)",
              wins, total, worst, per.c_str())};
}

Outcome baseline_sanity(const RunReport& report) {
  constexpr double prior = 0.5;  // radial classes are balanced
  bool collapse = true;
  std::string per;
  for (double f : {0.4, 0.6, 0.8}) {
    double sum = 0.0;
    int n = 0;
    for (const auto* c : report.select("amnesiac", f)) {
      if (!c->ok) continue;
      sum += c->metrics.at("accuracy_after");
      ++n;
    }
    const double mean = n ? sum / n : 0.0;
    collapse &= n == 5 && std::abs(mean - prior) <= 0.15;
    per += fmt(" %.0f%%: %.3f", 100 * f, mean);
  }

  const auto data = generate(Shape::radial, 300, 0.15, 21);
  const MlpSpec spec{{2, 16, 2}, Activation::relu, 22};
  TrainConfig tc;
  tc.epochs = 30;
  tc.shuffle_seed = 23;
  tc.record_ledger = true;
  const auto trained = train(init_mlp(spec), data, tc);
  const bool all_initial =
      amnesiac_remove(trained.model, *trained.ledger, make_id_set(data.ids)).model.params ==
      trained.ledger->initial;

  tc.record_ledger = false;
  const auto ens = sisa_train(data, 5, spec, tc, 24);
  const IdSet inside(ens.shards[3].data.ids.begin(), ens.shards[3].data.ids.begin() + 7);
  const auto removed = sisa_remove(ens, make_id_set(inside));
  bool untouched = removed.retrained == std::vector<std::size_t>{3};
  for (std::size_t s = 0; s < 5; ++s) {
    if (s == 3) continue;
    untouched &= removed.ensemble.shards[s].model.params == ens.shards[s].model.params;
  }
  return {collapse && all_initial && untouched,
          fmt("amnesiac random mean accuracy%s (prior 0.5); remove-all = initial %d; untouched "
              "SISA shards identical %d",
              per.c_str(), all_initial, untouched)};
}

Outcome efficiency(const RunReport& report) {
  int faster = 0;
  int total = 0;
  std::string per;
  for (const auto* p : report.select("puma", 0.2)) {
    for (const auto* r : report.select("retrain", 0.2)) {
      if (r->repeat != p->repeat || !p->ok || !r->ok) continue;
      ++total;
      const double a = p->metrics.at("remove_ms");
      const double b = r->metrics.at("remove_ms");
      faster += a < b;
      per += fmt(" %.0f/%.0f", a, b);
    }
  }
  return {total == 5 && faster == total,
          fmt("20%% removal, puma faster on %d/%d repeats (ms puma/retrain:%s)", faster, total,
              per.c_str())};
}

// 5 ---------------------------------------------------------------------------

Outcome attack_effectiveness() {
  auto cfg = config("attack_radial.ini");
  cfg.methods = {Method::puma};
  const auto report = run_removal_experiment(cfg);
  double before = 0.0;
  double after = 0.0;
  int n = 0;
  for (const auto* c : report.select("puma")) {
    if (!c->ok) continue;
    before += c->metrics.at("attack_before");
    after += c->metrics.at("attack_after");
    ++n;
  }
  if (n) {
    before /= n;
    after /= n;
  }
  return {n == 5 && before >= 0.9 && after <= 0.4,
          fmt("marked-cluster attack rate %.3f before, %.3f after (%d repeats)", before, after, n)};
}

// 8 ---------------------------------------------------------------------------

Outcome mislabel_debugging() {
  const auto report = run_debug_experiment(config("debug_moons.ini"));
  int above = 0;
  int total = 0;
  double worst = 1.0;
  std::string per;
  for (const auto* p : report.select("puma")) {
    for (const auto* q : report.select("ntk")) {
      if (q->repeat != p->repeat || !p->ok || !q->ok) continue;
      ++total;
      const double a = p->metrics.at("recall_at_inspect");
      const double b = q->metrics.at("recall_at_inspect");
      worst = std::min(worst, a);
      above += a > b;
      per += fmt(" %.3f/%.3f", a, b);
    }
  }
  return {total == 5 && worst >= 0.6 && above >= 3,
          fmt("recall at 20%% inspected, min puma %.3f, above NTK on %d/%d (puma/ntk:%s)", worst,
              above, total, per.c_str())};
}

// 9 ---------------------------------------------------------------------------

Outcome calibration() {
  const auto cfg = config("calibration_moons.ini");
  const auto report = run_calibration_experiment(cfg);
  int lower = 0;
  int total = 0;
  std::string per;
  for (const auto& c : report.cells) {
    if (!c.ok) continue;
    ++total;
    const double a = c.metrics.at("ece_before");
    const double b = c.metrics.at("ece_after");
    lower += b < a;
    per += fmt(" %.5f->%.5f", a, b);
  }
  return {cfg.calibration_eta <= 1e-4 && total == 5 && lower >= 4,
          fmt("eta %.0e, train ECE lower after patch on %d/%d (%s)", cfg.calibration_eta, lower,
              total, per.c_str())};
}

// 10 --------------------------------------------------------------------------

Outcome determinism() {
  const auto smoke = config("smoke.ini");
  std::vector<std::pair<std::string, std::function<RunReport(const ExperimentConfig&)>>> kinds = {
      {"removal", run_removal_experiment},
      {"sweep", run_eta_sweep},
      {"debug", run_debug_experiment},
      {"calibration", run_calibration_experiment},
  };
  int same = 0;
  std::string which;
  for (const auto& [name, run] : kinds) {
    const auto first = run(smoke);
    // Re-run from the report's own config echo, as a reader of the report would.
    const auto second = run(config_from_json(first.config));
    const bool eq = first.without_timing() == second.without_timing() && first.exit_code() == 0;
    same += eq;
    which += " " + name + (eq ? " ok" : " differs");
  }
  auto ordered = config("removal_radial_ordered.ini");
  ordered.repeats = 1;
  ordered.fractions = {0.4};
  const bool ord = run_removal_experiment(ordered).without_timing() ==
                   run_removal_experiment(ordered).without_timing();
  which += ord ? " ordered ok" : " ordered differs";
  return {same == static_cast<int>(kinds.size()) && ord,
          fmt("re-runs identical modulo timing:%s", which.c_str())};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    double ms = 0.0;
    try {
      std::tie(o, ms) = timed(check);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", name,
                o.detail.c_str(), ms / 1000.0);
    std::fflush(stdout);
  };

  report(1, "numerical core", numerical_core);
  report(2, "lambda solver", lambda_solver);
  report(3, "patch identities", patch_identities);

  RunReport radial;
  double radial_ms = 0.0;
  std::string radial_error;
  try {
    std::tie(radial, radial_ms) = timed([] { return run_removal_experiment(config("removal_radial.ini")); });
  } catch (const std::exception& e) {
    radial_error = e.what();
  }
  auto from_radial = [&](auto fn) {
    return [&, fn] {
      if (!radial_error.empty()) throw std::runtime_error(radial_error);
      return fn(radial);
    };
  };
  std::printf("radial removal battery: %zu cells, %zu failed [%.1f s]\n", radial.cells.size(),
              radial.failed_cells(), radial_ms / 1000.0);
  report(4, "performance preservation", from_radial(preservation));
  report(5, "removal effectiveness", attack_effectiveness);
  report(6, "baseline sanity", from_radial(baseline_sanity));
  report(7, "efficiency", from_radial(efficiency));
  report(8, "mislabel debugging", mislabel_debugging);
  report(9, "calibration patch", calibration);
  report(10, "determinism", determinism);

  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
