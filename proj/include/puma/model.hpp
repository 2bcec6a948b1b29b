#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "puma/dataset.hpp"

namespace puma {

enum class Activation { relu, tanh };
enum class LossKind { cross_entropy, calibration_surrogate };
enum class Optimizer { sgd };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);
LossKind parse_loss(std::string_view name);
std::string_view to_string(LossKind loss);

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;

  std::size_t weight_count() const { return in * out; }
  std::size_t param_count() const { return in * out + out; }
  bool operator==(const LayerShape&) const = default;
};

/// Flat vector over all trainable weights, layer by layer: the row-major
/// `out x in` weight matrix followed by the `out` biases.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<LayerShape> layout);
  ParamVector(std::vector<LayerShape> layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  const std::vector<LayerShape>& layout() const { return layout_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double s);

  /// Bitwise equality of values and identical layout.
  bool operator==(const ParamVector& other) const;

  bool all_finite() const;
  void set_zero();

 private:
  std::vector<LayerShape> layout_;
  std::vector<double> values_;
};

ParamVector operator+(ParamVector a, const ParamVector& b);
ParamVector operator-(ParamVector a, const ParamVector& b);
ParamVector operator*(double s, ParamVector a);

double dot(const ParamVector& a, const ParamVector& b);
double norm(const ParamVector& a);
/// y += alpha * x
void axpy(double alpha, const ParamVector& x, ParamVector& y);
/// FNV-1a over the raw bytes of the values.
std::uint64_t fingerprint(const ParamVector& p);

struct MlpSpec {
  std::vector<std::size_t> layer_dims;  // input, hidden..., output
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t num_classes() const { return layer_dims.back(); }
  std::vector<LayerShape> layout() const;
  std::size_t param_count() const;
};

struct MlpModel {
  MlpSpec spec;
  ParamVector params;
};

/// Glorot-uniform weights from a counter-based stream keyed by `spec.seed`,
/// zero biases. Values are rounded onto the SGD ledger grid (see train()).
MlpModel init_mlp(const MlpSpec& spec);

/// Softmax class probabilities.
std::vector<double> forward(const MlpModel& model, std::span<const double> x);
/// argmax of forward(); ties resolve to the lowest class index.
int predict(const MlpModel& model, std::span<const double> x);

double sample_loss(const MlpModel& model, std::span<const double> x, int y, LossKind loss);
double mean_loss(const MlpModel& model, const Dataset& data, LossKind loss);

/// Exact reverse-mode gradient of `weight * loss(x, y)`.
ParamVector per_sample_grad(const MlpModel& model, std::span<const double> x, int y,
                            LossKind loss, double weight = 1.0);

/// Average per-sample gradient over the dataset.
ParamVector mean_grad(const MlpModel& model, const Dataset& data, LossKind loss);
/// Average per-sample gradient over the given rows.
ParamVector mean_grad(const MlpModel& model, const Dataset& data,
                      std::span<const std::size_t> rows, LossKind loss);

/// Hessian of the mean loss times v, computed forward-over-reverse: the
/// backward pass is run on dual numbers seeded with tangent v, so the
/// tangent of the gradient is exactly H v.
ParamVector hvp(const MlpModel& model, const Dataset& data, const ParamVector& v, LossKind loss);
ParamVector hvp(const MlpModel& model, const Dataset& data, std::span<const std::size_t> rows,
                const ParamVector& v, LossKind loss);

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  Optimizer optimizer = Optimizer::sgd;
  std::uint64_t shuffle_seed = 0;
  bool record_ledger = false;
  /// Ids packed into the leading batches of every epoch (ordered scenario).
  IdSet grouped_ids;

  void validate(std::size_t dataset_size) const;
};

struct LedgerEntry {
  int epoch = 0;
  std::size_t batch = 0;
  std::vector<SampleId> members;
  ParamVector delta;  // the update actually added to the parameters
};

/// Per-batch parameter deltas of a plain-SGD run. Parameters and deltas both
/// live on a 2^-40 grid, so initial + sum(deltas) == final holds exactly in
/// any summation order.
struct BatchLedger {
  ParamVector initial;
  std::uint64_t final_fingerprint = 0;
  std::vector<LedgerEntry> entries;
};

struct TrainResult {
  MlpModel model;
  std::optional<BatchLedger> ledger;
  double final_loss = 0.0;  // mean batch loss over the last epoch
};

inline constexpr double kLedgerQuantum = 0x1.0p-40;
double quantize_to_ledger_grid(double x);

/// Order of dataset rows for one epoch: seeded permutation, with rows whose
/// ids appear in `grouped` moved to the front.
std::vector<std::size_t> epoch_order(const Dataset& data, const TrainConfig& config, int epoch);

/// Mini-batch SGD on mean cross-entropy. Throws DivergenceError on a
/// non-finite loss.
TrainResult train(const MlpModel& model, const Dataset& data, const TrainConfig& config);

// Checkpoints -----------------------------------------------------------------

inline constexpr std::string_view kCheckpointFormat = "puma-mlp-checkpoint/1";

nlohmann::json model_to_json(const MlpModel& model, std::string_view role = "model");
MlpModel model_from_json(const nlohmann::json& j, std::string_view expected_role = "model");
void save_model(const MlpModel& model, const std::filesystem::path& path,
                std::string_view role = "model");
MlpModel load_model(const std::filesystem::path& path, std::string_view expected_role = "model");

}  // namespace puma
