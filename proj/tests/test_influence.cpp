#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "oracles.hpp"
#include "puma/errors.hpp"
#include "puma/influence.hpp"

using namespace puma;

namespace {

constexpr double kDamping = 0.01;

// Overlapping 1-D classes plus a far-right point labelled 0 (the outlier) and
// its correctly labelled twin at the same position.
struct ConvexFixture {
  Dataset train;
  Dataset test;
  std::size_t outlier_row = 0;
  std::size_t twin_row = 0;
  oracle::SoftmaxRegression reg{1, 2};
  Eigen::VectorXd w;
  MlpModel model;
};

void append(Dataset& d, double x, int y, SampleId id) {
  d.features.push_back(x);
  d.labels.push_back(y);
  d.ids.push_back(id);
}

ConvexFixture convex_fixture(std::size_t n = 60, std::uint64_t seed = 1) {
  ConvexFixture f;
  f.train = oracle::overlapping_1d(n, seed);
  f.outlier_row = f.train.size();
  append(f.train, 2.5, 0, 1000);
  f.twin_row = f.train.size();
  append(f.train, 2.5, 1, 1001);
  f.test = oracle::overlapping_1d(200, seed + 100);
  const std::vector<double> ones(f.train.size(), 1.0);
  f.w = f.reg.fit(f.train, ones, kDamping, Eigen::VectorXd::Zero(4));
  f.model = init_mlp({{1, 2}, Activation::relu, 0});
  f.model.params = oracle::from_eigen(f.w, f.model.params);
  return f;
}

// Full-batch recursion, long enough to converge on the 4-parameter models.
LissaConfig exact_lissa() {
  LissaConfig cfg;
  cfg.recursion_depth = 4000;
  cfg.damping = kDamping;
  cfg.scale = 5.0;
  cfg.repeats = 1;
  cfg.batch_size = 1u << 20;
  cfg.seed = 1;
  return cfg;
}

Eigen::MatrixXd damped_hessian(const ConvexFixture& f) {
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  f.reg.derivatives(f.w, f.train, std::vector<double>(f.train.size(), 1.0), kDamping, g, h);
  return h;
}

MlpModel small_trained_net(const Dataset& data, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = 150;
  tc.batch_size = 16;
  tc.learning_rate = 0.1;
  tc.shuffle_seed = seed;
  return train(init_mlp({{2, 8, 2}, Activation::tanh, seed}), data, tc).model;
}

ParamVector random_vector(const ParamVector& like, std::uint64_t seed) {
  CounterRng rng(seed, 21);
  ParamVector v(like.layout());
  for (auto& x : v.values()) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("criterion_grad") {
  const auto data = generate(Shape::two_moons, 80, 0.2, 3);
  const auto model = small_trained_net(data, 3);
  const auto cg = criterion_grad(model, {LossKind::cross_entropy, &data});
  const auto mg = mean_grad(model, data, LossKind::cross_entropy);
  for (std::size_t i = 0; i < cg.size(); ++i) CHECK(std::abs(cg[i] - mg[i]) <= 1e-12);

  const auto one = data.subset(std::vector<std::size_t>{5});
  CHECK(criterion_grad(model, {LossKind::calibration_surrogate, &one}) ==
        per_sample_grad(model, one.row(0), one.labels[0], LossKind::calibration_surrogate));

  // Always correct and fully confident: the surrogate sits at its minimum.
  MlpModel sure = init_mlp({{1, 2}, Activation::relu, 0});
  sure.params.set_zero();
  sure.params[0] = -30.0;
  sure.params[1] = 30.0;
  const auto sep = oracle::overlapping_1d(40, 2, 0.1);
  CHECK(norm(criterion_grad(sure, {LossKind::calibration_surrogate, &sep})) < 1e-6);

  Dataset empty;
  empty.num_features = 2;
  empty.num_classes = 2;
  CHECK_THROWS_AS(criterion_grad(model, {LossKind::cross_entropy, &empty}), InvalidArgument);
  CHECK_THROWS_AS(criterion_grad(model, {LossKind::cross_entropy, nullptr}), InvalidArgument);
}

TEST_CASE("inverse_hvp agrees with a dense solve on a 4-parameter model") {
  const auto f = convex_fixture();
  // The training loss has no ridge term; damping plays that role, so the
  // dense oracle is the ridge Hessian at the same point.
  const Eigen::MatrixXd h = damped_hessian(f);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto v = random_vector(f.model.params, s);
    const Eigen::VectorXd want = h.ldlt().solve(oracle::to_eigen(v));

    const auto exact = inverse_hvp(f.model, f.train, v, exact_lissa());
    CHECK((oracle::to_eigen(exact) - want).norm() / want.norm() < 5e-2);

    LissaConfig sampled = exact_lissa();
    sampled.batch_size = 16;
    sampled.repeats = 8;
    sampled.seed = s;
    const auto est = inverse_hvp(f.model, f.train, v, sampled);
    CHECK((oracle::to_eigen(est) - want).norm() / want.norm() < 5e-2);
  }

  ParamVector zero(f.model.params.layout());
  CHECK(norm(inverse_hvp(f.model, f.train, zero, exact_lissa())) == 0.0);
}

TEST_CASE("inverse_hvp round trip on a small net") {
  const auto data = generate(Shape::two_moons, 120, 0.2, 5);
  // Trained long enough that H + damping is positive definite.
  TrainConfig tc;
  tc.epochs = 1000;
  tc.batch_size = 16;
  tc.learning_rate = 0.1;
  tc.shuffle_seed = 5;
  const auto model = train(init_mlp({{2, 8, 2}, Activation::tanh, 5}), data, tc).model;
  LissaConfig cfg;
  cfg.recursion_depth = 2000;
  cfg.repeats = 1;
  cfg.batch_size = data.size();
  cfg.scale = 1.0;
  CHECK(estimate_spectral_norm(model, data, cfg) < cfg.scale);
  const auto v = mean_grad(model, data.subset(std::vector<std::size_t>{0, 1, 2, 60, 61}),
                           LossKind::cross_entropy);
  const auto u = inverse_hvp(model, data, v, cfg);
  auto back = hvp(model, data, u, LossKind::cross_entropy);
  axpy(cfg.damping, u, back);
  CHECK(norm(back - v) / norm(v) < 1e-1);
}

TEST_CASE("estimate_spectral_norm matches the dense Hessian") {
  const auto data = generate(Shape::two_moons, 40, 0.2, 6);
  const auto model = small_trained_net(data, 6);
  LissaConfig cfg;
  cfg.batch_size = data.size();
  const Eigen::MatrixXd h = oracle::fd_hessian(model, data, LossKind::cross_entropy);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
  const double want = es.eigenvalues().cwiseAbs().maxCoeff() + cfg.damping;
  CHECK(estimate_spectral_norm(model, data, cfg, 200) == doctest::Approx(want).epsilon(2e-2));
}

TEST_CASE("LiSSA determinism, adjoint identity and divergence") {
  const auto data = generate(Shape::two_moons, 100, 0.2, 7);
  const auto model = small_trained_net(data, 7);
  LissaConfig cfg;
  cfg.recursion_depth = 200;
  cfg.repeats = 3;
  cfg.batch_size = 16;
  cfg.seed = 11;
  const auto a = random_vector(model.params, 1);
  const auto b = random_vector(model.params, 2);
  const auto mb = inverse_hvp(model, data, b, cfg);
  CHECK(mb == inverse_hvp(model, data, b, cfg));

  const auto mta = inverse_hvp_adjoint(model, data, a, cfg);
  const double lhs = dot(a, mb), rhs = dot(mta, b);
  CHECK(std::abs(lhs - rhs) <= 1e-10 * norm(a) * norm(mb));

  // Linear in v for a fixed seed.
  const auto ma = inverse_hvp(model, data, a, cfg);
  const auto mab = inverse_hvp(model, data, 2.0 * a - 0.5 * b, cfg);
  const auto want = 2.0 * ma - 0.5 * mb;
  CHECK(norm(mab - want) <= 1e-9 * norm(want));

  LissaConfig bad = cfg;
  bad.scale = 1e-3;
  CHECK_THROWS_AS(inverse_hvp(model, data, a, bad), DivergenceError);
  bad = cfg;
  bad.repeats = 0;
  CHECK_THROWS_AS(inverse_hvp(model, data, a, bad), InvalidArgument);
}

TEST_CASE("psi_scores: zero cache, duplicates, order independence, additivity") {
  const auto data = generate(Shape::two_moons, 100, 0.2, 8);
  const auto model = small_trained_net(data, 8);
  LissaConfig cfg;
  cfg.recursion_depth = 100;
  cfg.repeats = 1;
  const auto cache = build_cache(model, data, {LossKind::cross_entropy, &data}, cfg);
  CHECK(cache.param_fingerprint == fingerprint(model.params));

  IhvpCache zero = cache;
  zero.vector.set_zero();
  for (const auto& s : psi_scores(zero, model, data)) CHECK(s.psi == 0.0);

  const auto dup = data.subset(std::vector<std::size_t>{3, 3, 40});
  const auto ds = psi_scores(cache, model, dup);
  CHECK(ds[0].psi == ds[1].psi);

  const auto all = psi_scores(cache, model, data);
  std::vector<std::size_t> rev(data.size());
  std::iota(rev.rbegin(), rev.rend(), 0);
  const auto back = psi_scores(cache, model, data.subset(rev));
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].id == all[data.size() - 1 - i].id);
    CHECK(back[i].psi == all[data.size() - 1 - i].psi);
  }

  const std::vector<std::size_t> rows{1, 7, 19, 50, 77};
  double sum = 0.0;
  for (auto r : rows) sum += all[r].psi;
  const double joint = dot(cache.vector, gradient_sum(model, data, rows));
  CHECK(std::abs(joint - sum) <= 1e-10 * std::max(1.0, std::abs(sum)));

  MlpModel moved = model;
  moved.params[0] += 1e-3;
  CHECK_THROWS_AS(psi_scores(cache, moved, data), StaleCache);
}

TEST_CASE("psi sign and pairwise ranking follow leave-one-out retraining") {
  const auto f = convex_fixture();
  const CriterionSpec crit{LossKind::cross_entropy, &f.test};
  const auto cache = build_cache(f.model, f.train, crit, exact_lissa());
  const auto psi = psi_scores(cache, f.model, f.train);
  CHECK(psi[f.outlier_row].psi < 0.0);
  CHECK(psi[f.outlier_row].psi < psi[f.twin_row].psi);

  auto test_loss = [&](const Eigen::VectorXd& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.test.size(); ++i) s += f.reg.loss(w, f.test.row(i), f.test.labels[i]);
    return s / static_cast<double>(f.test.size());
  };
  const double base = test_loss(f.w);
  std::vector<double> loo_change, predicted;
  for (std::size_t j = 0; j < f.train.size(); ++j) {
    std::vector<double> weight(f.train.size(), 1.0);
    weight[j] = 0.0;
    const auto wj = f.reg.fit(f.train, weight, kDamping, f.w);
    loo_change.push_back(test_loss(wj) - base);
    predicted.push_back(psi[j].psi);
  }
  // Removing the outlier improves the criterion; ψ predicts it.
  CHECK(loo_change[f.outlier_row] < 0.0);
  CHECK(oracle::spearman(predicted, loo_change) > 0.9);

  // Pairwise influence on a single test point against its LOO change.
  const LabeledPoint tp{f.test.row(0), f.test.labels[0]};
  std::vector<double> pair, loo_point;
  for (std::size_t j = 0; j < f.train.size(); j += 3) {
    pair.push_back(pairwise_influence(f.model, f.train, {f.train.row(j), f.train.labels[j]}, tp,
                                      exact_lissa()));
    std::vector<double> weight(f.train.size(), 1.0);
    weight[j] = 0.0;
    const auto wj = f.reg.fit(f.train, weight, kDamping, f.w);
    loo_point.push_back(f.reg.loss(wj, tp.x, tp.y) - f.reg.loss(f.w, tp.x, tp.y));
  }
  // Upweighting derivative is minus the removal change.
  for (auto& v : loo_point) v = -v;
  CHECK(oracle::spearman(pair, loo_point) > 0.9);
}

TEST_CASE("pairwise influence: zero gradient and mirror symmetry") {
  // Symmetric under x -> -x with labels swapped.
  Dataset data;
  data.name = "mirror";
  data.num_features = 1;
  data.num_classes = 2;
  CounterRng rng(4, 4);
  for (SampleId i = 0; i < 30; ++i) {
    const double x = 1.0 + 0.8 * rng.normal();
    append(data, x, 1, 2 * i);
    append(data, -x, 0, 2 * i + 1);
  }
  const oracle::SoftmaxRegression reg{1, 2};
  const auto w = reg.fit(data, std::vector<double>(data.size(), 1.0), kDamping, Eigen::VectorXd::Zero(4));
  MlpModel model = init_mlp({{1, 2}, Activation::relu, 0});
  model.params = oracle::from_eigen(w, model.params);

  const std::vector<double> a{0.7}, ma{-0.7}, t{1.3}, mt{-1.3};
  const double p1 = pairwise_influence(model, data, {a, 1}, {t, 0}, exact_lissa());
  const double p2 = pairwise_influence(model, data, {ma, 0}, {mt, 1}, exact_lissa());
  CHECK(std::abs(p1 - p2) <= 1e-6);

  MlpModel sure = model;
  sure.params.set_zero();
  sure.params[2] = -40.0;
  sure.params[3] = 40.0;
  const std::vector<double> z{0.0};
  CHECK(pairwise_influence(sure, data, {z, 1}, {t, 0}, exact_lissa()) == doctest::Approx(0.0));
}

TEST_CASE("phi_projection is inverse_hvp on summed gradients") {
  const auto data = generate(Shape::two_moons, 100, 0.2, 9);
  const auto model = small_trained_net(data, 9);
  LissaConfig cfg;
  cfg.recursion_depth = 150;
  cfg.repeats = 2;
  const std::vector<std::size_t> one{12};
  const auto g = gradient_sum(model, data, one);
  CHECK(g == per_sample_grad(model, data.row(12), data.labels[12], LossKind::cross_entropy));
  CHECK(phi_projection(model, data, g, cfg) == inverse_hvp(model, data, g, cfg));
  ParamVector zero(model.params.layout());
  CHECK(norm(phi_projection(model, data, zero, cfg)) == 0.0);

  const std::vector<std::size_t> rows{1, 2, 3};
  const std::vector<double> wts{0.5, -1.0, 2.0};
  ParamVector manual(model.params.layout());
  for (std::size_t i = 0; i < 3; ++i) {
    axpy(wts[i], per_sample_grad(model, data.row(rows[i]), data.labels[rows[i]], LossKind::cross_entropy),
         manual);
  }
  CHECK(norm(gradient_sum(model, data, rows, wts) - manual) <= 1e-12 * norm(manual));
}

TEST_CASE("ntk_scores") {
  const auto f = convex_fixture();
  const auto cg = criterion_grad(f.model, {LossKind::cross_entropy, &f.test});
  const auto ntk = ntk_scores(f.model, cg, f.train);
  CHECK(ntk[f.outlier_row].psi < ntk[f.twin_row].psi);
  CHECK(ntk[f.outlier_row].psi < 0.0);

  ParamVector zero(f.model.params.layout());
  for (const auto& s : ntk_scores(f.model, zero, f.train)) CHECK(s.psi == 0.0);

  // With the identity in place of the inverse Hessian, psi and ntk coincide.
  IhvpCache identity{cg, LossKind::cross_entropy, exact_lissa(), fingerprint(f.model.params)};
  const auto psi = psi_scores(identity, f.model, f.train);
  for (std::size_t i = 0; i < psi.size(); ++i) CHECK(std::abs(psi[i].psi - ntk[i].psi) <= 1e-8);
}

TEST_CASE("cache persistence refuses a different model") {
  const auto data = generate(Shape::two_moons, 60, 0.2, 10);
  const auto model = small_trained_net(data, 10);
  LissaConfig cfg;
  cfg.recursion_depth = 50;
  cfg.repeats = 1;
  const auto cache = build_cache(model, data, {LossKind::calibration_surrogate, &data}, cfg);
  const auto path = std::filesystem::temp_directory_path() / "puma_cache_test.json";
  save_cache(cache, path);
  const auto back = load_cache(path, model);
  CHECK(back.vector == cache.vector);
  CHECK(back.config == cache.config);
  CHECK(back.criterion_loss == LossKind::calibration_surrogate);
  CHECK(back.param_fingerprint == cache.param_fingerprint);

  MlpModel other = model;
  other.params[1] *= 1.5;
  CHECK_THROWS_AS(load_cache(path, other), StaleCache);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_cache(path, model), IoError);
}
