#include "puma/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "mlp_kernel.hpp"
#include "puma/errors.hpp"
#include "puma/rng.hpp"

namespace puma {

using detail::Dual;
using detail::MlpKernel;

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

LossKind parse_loss(std::string_view name) {
  if (name == "cross_entropy") return LossKind::cross_entropy;
  if (name == "calibration_surrogate") return LossKind::calibration_surrogate;
  throw InvalidArgument("unknown loss '" + std::string(name) + "'");
}

std::string_view to_string(LossKind loss) {
  return loss == LossKind::cross_entropy ? "cross_entropy" : "calibration_surrogate";
}

// ParamVector -------------------------------------------------------------------

namespace {

std::size_t layout_size(const std::vector<LayerShape>& layout) {
  std::size_t n = 0;
  for (const auto& s : layout) n += s.param_count();
  return n;
}

void require_same_size(const ParamVector& a, const ParamVector& b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionMismatch(std::string(what) + ": parameter vectors of length " +
                            std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
}

}  // namespace

ParamVector::ParamVector(std::vector<LayerShape> layout)
    : layout_(std::move(layout)), values_(layout_size(layout_), 0.0) {}

ParamVector::ParamVector(std::vector<LayerShape> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_size(layout_)) {
    throw DimensionMismatch("ParamVector: " + std::to_string(values_.size()) +
                            " values for a layout of " + std::to_string(layout_size(layout_)));
  }
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require_same_size(*this, other, "operator+=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require_same_size(*this, other, "operator-=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  for (double& v : values_) v *= s;
  return *this;
}

bool ParamVector::operator==(const ParamVector& other) const {
  return layout_ == other.layout_ && values_.size() == other.values_.size() &&
         std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void ParamVector::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
ParamVector operator*(double s, ParamVector a) { return a *= s; }

double dot(const ParamVector& a, const ParamVector& b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const ParamVector& a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, const ParamVector& x, ParamVector& y) {
  require_same_size(x, y, "axpy");
  auto yv = y.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += alpha * xv[i];
}

std::uint64_t fingerprint(const ParamVector& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(p.values().data());
  for (std::size_t i = 0; i < p.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// MlpSpec -----------------------------------------------------------------------

void MlpSpec::validate() const {
  if (layer_dims.size() < 2) throw InvalidSpec("MlpSpec: need at least input and output dims");
  for (std::size_t d : layer_dims) {
    if (d == 0) throw InvalidSpec("MlpSpec: layer dims must be positive");
  }
  if (layer_dims.back() < 2) throw InvalidSpec("MlpSpec: need at least two output classes");
}

std::vector<LayerShape> MlpSpec::layout() const {
  std::vector<LayerShape> out;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    out.push_back({layer_dims[l], layer_dims[l + 1]});
  }
  return out;
}

std::size_t MlpSpec::param_count() const { return layout_size(layout()); }

double quantize_to_ledger_grid(double x) {
  return std::nearbyint(x / kLedgerQuantum) * kLedgerQuantum;
}

MlpModel init_mlp(const MlpSpec& spec) {
  spec.validate();
  MlpModel m{spec, ParamVector(spec.layout())};
  CounterRng rng(spec.seed, 0x696e6974);
  std::size_t off = 0;
  for (const auto& s : spec.layout()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
    for (std::size_t i = 0; i < s.weight_count(); ++i) {
      m.params[off + i] = quantize_to_ledger_grid(rng.uniform(-bound, bound));
    }
    off += s.param_count();
  }
  return m;
}

// Evaluation --------------------------------------------------------------------

namespace {

void check_input(const MlpModel& model, std::span<const double> x) {
  if (x.size() != model.spec.input_dim()) {
    throw DimensionMismatch("input has " + std::to_string(x.size()) + " features, model expects " +
                            std::to_string(model.spec.input_dim()));
  }
  if (model.params.size() != model.spec.param_count()) {
    throw DimensionMismatch("model parameters do not match its spec");
  }
}

void check_label(const MlpModel& model, int y) {
  if (y < 0 || static_cast<std::size_t>(y) >= model.spec.num_classes()) {
    throw InvalidArgument("label " + std::to_string(y) + " outside [0, " +
                          std::to_string(model.spec.num_classes()) + ")");
  }
}

void check_dataset(const MlpModel& model, const Dataset& data) {
  if (data.num_features != model.spec.input_dim()) {
    throw DimensionMismatch("dataset has " + std::to_string(data.num_features) +
                            " features, model expects " + std::to_string(model.spec.input_dim()));
  }
  if (data.num_classes > model.spec.num_classes()) {
    throw DimensionMismatch("dataset has more classes than the model outputs");
  }
}

std::vector<std::size_t> all_rows(const Dataset& data) {
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace

std::vector<double> forward(const MlpModel& model, std::span<const double> x) {
  check_input(model, x);
  MlpKernel<double> k(model.spec);
  k.forward(model.params.values(), x);
  return k.probs();
}

int predict(const MlpModel& model, std::span<const double> x) {
  const auto p = forward(model, x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double sample_loss(const MlpModel& model, std::span<const double> x, int y, LossKind loss) {
  check_input(model, x);
  check_label(model, y);
  MlpKernel<double> k(model.spec);
  k.forward(model.params.values(), x);
  return k.loss_value(y, loss);
}

double mean_loss(const MlpModel& model, const Dataset& data, LossKind loss) {
  if (data.empty()) throw InvalidArgument("mean_loss: empty dataset");
  check_dataset(model, data);
  MlpKernel<double> k(model.spec);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    k.forward(model.params.values(), data.row(i));
    total += k.loss_value(data.labels[i], loss);
  }
  return total / static_cast<double>(data.size());
}

ParamVector per_sample_grad(const MlpModel& model, std::span<const double> x, int y,
                            LossKind loss, double weight) {
  check_input(model, x);
  check_label(model, y);
  MlpKernel<double> k(model.spec);
  ParamVector g(model.spec.layout());
  k.forward(model.params.values(), x);
  k.backward(model.params.values(), y, loss, weight, g.values());
  return g;
}

ParamVector mean_grad(const MlpModel& model, const Dataset& data, LossKind loss) {
  return mean_grad(model, data, all_rows(data), loss);
}

ParamVector mean_grad(const MlpModel& model, const Dataset& data,
                      std::span<const std::size_t> rows, LossKind loss) {
  if (rows.empty()) throw InvalidArgument("mean_grad: empty dataset");
  check_dataset(model, data);
  MlpKernel<double> k(model.spec);
  ParamVector g(model.spec.layout());
  const double w = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    k.forward(model.params.values(), data.row(r));
    k.backward(model.params.values(), data.labels[r], loss, w, g.values());
  }
  return g;
}

ParamVector hvp(const MlpModel& model, const Dataset& data, const ParamVector& v, LossKind loss) {
  return hvp(model, data, all_rows(data), v, loss);
}

ParamVector hvp(const MlpModel& model, const Dataset& data, std::span<const std::size_t> rows,
                const ParamVector& v, LossKind loss) {
  if (rows.empty()) throw InvalidArgument("hvp: empty dataset");
  check_dataset(model, data);
  if (v.size() != model.params.size()) {
    throw DimensionMismatch("hvp: vector of length " + std::to_string(v.size()) +
                            " for a model with " + std::to_string(model.params.size()) +
                            " parameters");
  }
  const std::size_t n = v.size();
  std::vector<Dual> theta(n);
  for (std::size_t i = 0; i < n; ++i) theta[i] = Dual(model.params[i], v[i]);
  std::vector<Dual> grad(n);
  MlpKernel<Dual> k(model.spec);
  const double w = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    k.forward(theta, data.row(r));
    k.backward(theta, data.labels[r], loss, w, grad);
  }
  ParamVector out(model.spec.layout());
  for (std::size_t i = 0; i < n; ++i) out[i] = grad[i].d;
  return out;
}

// Training ----------------------------------------------------------------------

void TrainConfig::validate(std::size_t dataset_size) const {
  if (epochs <= 0) throw InvalidArgument("TrainConfig: epochs must be positive");
  if (batch_size == 0) throw InvalidArgument("TrainConfig: batch_size must be positive");
  if (batch_size > dataset_size) {
    throw InvalidArgument("TrainConfig: batch_size " + std::to_string(batch_size) +
                          " exceeds dataset size " + std::to_string(dataset_size));
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("TrainConfig: learning_rate must be positive");
  }
}

std::vector<std::size_t> epoch_order(const Dataset& data, const TrainConfig& config, int epoch) {
  std::vector<std::size_t> order = all_rows(data);
  CounterRng rng(config.shuffle_seed, static_cast<std::uint64_t>(epoch) + 1);
  shuffle(order, rng);
  if (!config.grouped_ids.empty()) {
    std::stable_partition(order.begin(), order.end(), [&](std::size_t r) {
      return contains(config.grouped_ids, data.ids[r]);
    });
  }
  return order;
}

TrainResult train(const MlpModel& model, const Dataset& data, const TrainConfig& config) {
  config.validate(data.size());
  check_dataset(model, data);

  TrainResult result{model, std::nullopt, 0.0};
  auto& params = result.model.params;
  for (double& v : params.values()) v = quantize_to_ledger_grid(v);
  if (config.record_ledger) result.ledger = BatchLedger{params, 0, {}};

  MlpKernel<double> k(model.spec);
  ParamVector grad(model.spec.layout());
  const std::size_t n = data.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(data, config, epoch);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const double w = 1.0 / static_cast<double>(stop - start);
      grad.set_zero();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t r = order[i];
        k.forward(params.values(), data.row(r));
        batch_loss += k.loss_value(data.labels[r], LossKind::cross_entropy);
        k.backward(params.values(), data.labels[r], LossKind::cross_entropy, w, grad.values());
      }
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("training diverged: non-finite loss in epoch " +
                              std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      for (auto& g : grad.values()) g = quantize_to_ledger_grid(-config.learning_rate * g);
      params += grad;
      if (!params.all_finite()) {
        throw DivergenceError("training diverged: non-finite parameters in epoch " +
                              std::to_string(epoch));
      }
      if (result.ledger) {
        LedgerEntry e{epoch, batch, {}, grad};
        e.members.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i) e.members.push_back(data.ids[order[i]]);
        result.ledger->entries.push_back(std::move(e));
      }
    }
    result.final_loss = epoch_loss / static_cast<double>(n);
  }
  if (result.ledger) result.ledger->final_fingerprint = fingerprint(params);
  return result;
}

// Checkpoints -------------------------------------------------------------------

nlohmann::json model_to_json(const MlpModel& model, std::string_view role) {
  return {{"format", kCheckpointFormat},
          {"role", role},
          {"layer_dims", model.spec.layer_dims},
          {"activation", to_string(model.spec.activation)},
          {"seed", model.spec.seed},
          {"params", std::vector<double>(model.params.values().begin(), model.params.values().end())}};
}

MlpModel model_from_json(const nlohmann::json& j, std::string_view expected_role) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw ParseError("unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
    }
    if (j.at("role").get<std::string>() != expected_role) {
      throw ParseError("checkpoint role '" + j.at("role").get<std::string>() + "', expected '" +
                       std::string(expected_role) + "'");
    }
    MlpSpec spec;
    spec.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    spec.activation = parse_activation(j.at("activation").get<std::string>());
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.validate();
    MlpModel m{spec, ParamVector(spec.layout(), j.at("params").get<std::vector<double>>())};
    if (!m.params.all_finite()) throw ParseError("checkpoint contains non-finite parameters");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_model(const MlpModel& model, const std::filesystem::path& path, std::string_view role) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out << model_to_json(model, role).dump() << '\n';
}

MlpModel load_model(const std::filesystem::path& path, std::string_view expected_role) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path.string() + "': " + e.what());
  }
  return model_from_json(j, expected_role);
}

}  // namespace puma
