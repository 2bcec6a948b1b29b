#include "puma/influence.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "puma/errors.hpp"
#include "puma/rng.hpp"

namespace puma {

void LissaConfig::validate() const {
  if (recursion_depth <= 0) throw InvalidArgument("LissaConfig: recursion_depth must be positive");
  if (!(damping >= 0.0)) throw InvalidArgument("LissaConfig: damping must be nonnegative");
  if (!(scale > 0.0)) throw InvalidArgument("LissaConfig: scale must be positive");
  if (repeats <= 0) throw InvalidArgument("LissaConfig: repeats must be positive");
  if (batch_size == 0) throw InvalidArgument("LissaConfig: batch_size must be positive");
}

nlohmann::json LissaConfig::to_json() const {
  return {{"recursion_depth", recursion_depth}, {"damping", damping}, {"scale", scale},
          {"repeats", repeats},                 {"batch_size", batch_size}, {"seed", seed}};
}

LissaConfig LissaConfig::from_json(const nlohmann::json& j) {
  LissaConfig c;
  c.recursion_depth = j.at("recursion_depth").get<int>();
  c.damping = j.at("damping").get<double>();
  c.scale = j.at("scale").get<double>();
  c.repeats = j.at("repeats").get<int>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

ParamVector criterion_grad(const MlpModel& model, const CriterionSpec& criterion) {
  if (criterion.eval_set == nullptr || criterion.eval_set->empty()) {
    throw InvalidArgument("criterion_grad: empty evaluation set");
  }
  return mean_grad(model, *criterion.eval_set, criterion.loss);
}

ParamVector gradient_sum(const MlpModel& model, const Dataset& data,
                         std::span<const std::size_t> rows, std::span<const double> weights) {
  if (!weights.empty() && weights.size() != rows.size()) {
    throw DimensionMismatch("gradient_sum: weights and rows differ in length");
  }
  ParamVector total(model.spec.layout());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    if (w == 0.0) continue;
    const std::size_t r = rows[i];
    axpy(1.0, per_sample_grad(model, data.row(r), data.labels[r], LossKind::cross_entropy, w),
         total);
  }
  return total;
}

namespace {

[[noreturn]] void diverged(int step, double rn, const LissaConfig& cfg) {
  std::ostringstream msg;
  msg << "inverse_hvp diverged at step " << step << " (|r| = " << rn
      << "); increase scale (now " << cfg.scale << ") or damping (now " << cfg.damping << ")";
  throw DivergenceError(msg.str());
}

// One recursion step operator: B_t r = (1 - damping/scale) r - H_t r / scale.
// Forward evaluates r_T = v + B_T r_{T-1}; the adjoint evaluates the transpose
// of that same operator by applying B_T, B_{T-1}, ... to v and summing the
// iterates, so <M^T a, b> = <a, M b> holds for the sampled batches.
ParamVector lissa(const MlpModel& model, const Dataset& train_set, const ParamVector& v,
                  const LissaConfig& cfg, bool adjoint) {
  cfg.validate();
  if (train_set.empty()) throw InvalidArgument("inverse_hvp: empty training set");
  if (v.size() != model.params.size()) {
    throw DimensionMismatch("inverse_hvp: vector length does not match the model");
  }
  ParamVector result(model.spec.layout());
  const double v_norm = norm(v);
  if (v_norm == 0.0) return result;

  const std::size_t n = train_set.size();
  const bool full_batch = cfg.batch_size >= n;
  const std::size_t b = full_batch ? n : cfg.batch_size;
  const auto depth = static_cast<std::size_t>(cfg.recursion_depth);
  const double keep = 1.0 - cfg.damping / cfg.scale;
  const double inv_scale = 1.0 / cfg.scale;
  std::vector<std::size_t> all(full_batch ? n : 0);
  std::iota(all.begin(), all.end(), 0);

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    CounterRng rng(cfg.seed, static_cast<std::uint64_t>(rep));
    std::vector<std::size_t> batches(full_batch ? 0 : depth * b);
    for (auto& row : batches) row = rng.below(n);
    auto batch = [&](std::size_t t) -> std::span<const std::size_t> {
      if (full_batch) return all;
      return {batches.data() + t * b, b};
    };
    auto step = [&](const ParamVector& r, std::size_t t) {
      const ParamVector hr = hvp(model, train_set, batch(t), r, LossKind::cross_entropy);
      ParamVector out = r;
      auto ov = out.values();
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = keep * ov[i] - inv_scale * hr[i];
      return out;
    };

    ParamVector acc = v;
    if (!adjoint) {
      for (std::size_t t = 0; t < depth; ++t) {
        acc = v + step(acc, t);
        const double rn = norm(acc);
        if (!std::isfinite(rn) || rn > 1e6 * v_norm) diverged(static_cast<int>(t), rn, cfg);
      }
    } else {
      ParamVector u = v;
      for (std::size_t t = depth; t-- > 0;) {
        u = step(u, t);
        acc += u;
        const double rn = norm(acc);
        if (!std::isfinite(rn) || rn > 1e6 * v_norm) {
          diverged(static_cast<int>(depth - 1 - t), rn, cfg);
        }
      }
    }
    axpy(inv_scale, acc, result);
  }
  result *= 1.0 / static_cast<double>(cfg.repeats);
  return result;
}

}  // namespace

ParamVector inverse_hvp(const MlpModel& model, const Dataset& train_set, const ParamVector& v,
                        const LissaConfig& cfg) {
  return lissa(model, train_set, v, cfg, false);
}

ParamVector inverse_hvp_adjoint(const MlpModel& model, const Dataset& train_set,
                                const ParamVector& v, const LissaConfig& cfg) {
  return lissa(model, train_set, v, cfg, true);
}

double estimate_spectral_norm(const MlpModel& model, const Dataset& train_set,
                              const LissaConfig& cfg, int iterations) {
  CounterRng rng(cfg.seed, 0x706f776572);
  ParamVector v(model.spec.layout());
  for (auto& x : v.values()) x = rng.normal();
  v *= 1.0 / norm(v);
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    ParamVector hv = hvp(model, train_set, v, LossKind::cross_entropy);
    axpy(cfg.damping, v, hv);
    lambda = norm(hv);
    if (lambda == 0.0) break;
    v = (1.0 / lambda) * std::move(hv);
  }
  return lambda;
}

IhvpCache build_cache(const MlpModel& model, const Dataset& train_set,
                      const CriterionSpec& criterion, const LissaConfig& cfg) {
  const ParamVector g = criterion_grad(model, criterion);
  return {inverse_hvp_adjoint(model, train_set, g, cfg), criterion.loss, cfg, fingerprint(model.params)};
}

namespace {

void require_fresh(const IhvpCache& cache, const MlpModel& model) {
  if (cache.param_fingerprint != fingerprint(model.params)) {
    throw StaleCache("inverse-HVP cache was built for different model parameters");
  }
  if (cache.vector.size() != model.params.size()) {
    throw StaleCache("inverse-HVP cache length does not match the model");
  }
}

}  // namespace

std::vector<InfluenceScore> psi_scores(const IhvpCache& cache, const MlpModel& model,
                                       const Dataset& samples) {
  require_fresh(cache, model);
  std::vector<InfluenceScore> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto g =
        per_sample_grad(model, samples.row(i), samples.labels[i], LossKind::cross_entropy);
    out.push_back({samples.ids[i], dot(cache.vector, g)});
  }
  return out;
}

ParamVector phi_projection(const MlpModel& model, const Dataset& train_set,
                           const ParamVector& weighted_grad_sum, const LissaConfig& cfg) {
  return inverse_hvp(model, train_set, weighted_grad_sum, cfg);
}

double pairwise_influence(const MlpModel& model, const Dataset& train_set,
                          const LabeledPoint& train_pt, const LabeledPoint& test_pt,
                          const LissaConfig& cfg) {
  const auto g_train = per_sample_grad(model, train_pt.x, train_pt.y, LossKind::cross_entropy);
  const auto g_test = per_sample_grad(model, test_pt.x, test_pt.y, LossKind::cross_entropy);
  return -dot(g_test, inverse_hvp(model, train_set, g_train, cfg));
}

std::vector<InfluenceScore> ntk_scores(const MlpModel& model, const ParamVector& criterion_grad,
                                       const Dataset& samples) {
  std::vector<InfluenceScore> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto g =
        per_sample_grad(model, samples.row(i), samples.labels[i], LossKind::cross_entropy);
    out.push_back({samples.ids[i], dot(criterion_grad, g)});
  }
  return out;
}

nlohmann::json cache_to_json(const IhvpCache& cache) {
  const auto v = cache.vector.values();
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& s : cache.vector.layout()) layout.push_back({s.in, s.out});
  return {{"format", kCacheFormat},
          {"criterion_loss", to_string(cache.criterion_loss)},
          {"lissa", cache.config.to_json()},
          {"param_fingerprint", cache.param_fingerprint},
          {"layout", layout},
          {"vector", std::vector<double>(v.begin(), v.end())}};
}

IhvpCache cache_from_json(const nlohmann::json& j, const MlpModel& model) {
  IhvpCache c;
  try {
    if (j.at("format").get<std::string>() != kCacheFormat) {
      throw ParseError("unsupported cache format");
    }
    std::vector<LayerShape> layout;
    for (const auto& s : j.at("layout")) layout.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    c.vector = ParamVector(std::move(layout), j.at("vector").get<std::vector<double>>());
    c.criterion_loss = parse_loss(j.at("criterion_loss").get<std::string>());
    c.config = LissaConfig::from_json(j.at("lissa"));
    c.param_fingerprint = j.at("param_fingerprint").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed cache file: ") + e.what());
  }
  require_fresh(c, model);
  return c;
}

void save_cache(const IhvpCache& cache, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write cache '" + path.string() + "'");
  out << cache_to_json(cache).dump() << '\n';
}

IhvpCache load_cache(const std::filesystem::path& path, const MlpModel& model) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cache '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("cache '" + path.string() + "': " + e.what());
  }
  return cache_from_json(j, model);
}

}  // namespace puma
