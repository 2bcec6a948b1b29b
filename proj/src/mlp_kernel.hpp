#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dual.hpp"
#include "puma/model.hpp"

namespace puma::detail {

using std::exp;
using std::tanh;

/// Forward/backward pass of one sample, generic over the scalar so the same
/// code yields gradients (double) and gradient + Hessian-vector tangents (Dual).
template <class T>
class MlpKernel {
 public:
  explicit MlpKernel(const MlpSpec& spec) : activation_(spec.activation), shapes_(spec.layout()) {
    offsets_.reserve(shapes_.size());
    std::size_t off = 0;
    acts_.emplace_back(spec.layer_dims.front());
    for (const auto& s : shapes_) {
      offsets_.push_back(off);
      off += s.param_count();
      pre_.emplace_back(s.out);
      acts_.emplace_back(s.out);
    }
    delta_.resize(*std::max_element(spec.layer_dims.begin(), spec.layer_dims.end()));
    back_.resize(delta_.size());
    probs_.resize(spec.num_classes());
  }

  /// Fills probs(); returns nothing, logits are kept in pre_.back().
  void forward(std::span<const T> params, std::span<const double> x) {
    auto& a0 = acts_.front();
    for (std::size_t i = 0; i < x.size(); ++i) a0[i] = T(x[i]);
    const std::size_t last = shapes_.size() - 1;
    for (std::size_t l = 0; l < shapes_.size(); ++l) {
      const auto& s = shapes_[l];
      const T* w = params.data() + offsets_[l];
      const T* b = w + s.weight_count();
      const auto& in = acts_[l];
      auto& z = pre_[l];
      for (std::size_t r = 0; r < s.out; ++r) {
        T acc = b[r];
        const T* wr = w + r * s.in;
        for (std::size_t c = 0; c < s.in; ++c) acc += wr[c] * in[c];
        z[r] = acc;
      }
      auto& out = acts_[l + 1];
      if (l == last) {
        for (std::size_t r = 0; r < s.out; ++r) out[r] = z[r];
      } else if (activation_ == Activation::relu) {
        for (std::size_t r = 0; r < s.out; ++r) out[r] = real(z[r]) > 0.0 ? z[r] : T(0.0);
      } else {
        for (std::size_t r = 0; r < s.out; ++r) out[r] = tanh(z[r]);
      }
    }
    const auto& logits = pre_.back();
    double m = real(logits[0]);
    for (const auto& z : logits) m = std::max(m, real(z));
    T total(0.0);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      probs_[k] = exp(logits[k] - T(m));
      total += probs_[k];
    }
    for (auto& p : probs_) p = p / total;
  }

  const std::vector<T>& probs() const { return probs_; }

  /// Loss of the last forward() at label y (real part only).
  double loss_value(int y, LossKind loss) const {
    const auto& logits = pre_.back();
    const auto yy = static_cast<std::size_t>(y);
    if (loss == LossKind::cross_entropy) {
      double m = real(logits[0]);
      for (const auto& z : logits) m = std::max(m, real(z));
      double s = 0.0;
      for (const auto& z : logits) s += std::exp(real(z) - m);
      return m + std::log(s) - real(logits[yy]);
    }
    const double gap = real(probs_[yy]) - (correct(y) ? 1.0 : 0.0);
    return gap * gap;
  }

  /// Accumulates weight * d loss / d params into grad. Requires a prior
  /// forward() with the same params and x.
  void backward(std::span<const T> params, int y, LossKind loss, double weight,
                std::span<T> grad) {
    const std::size_t k = probs_.size();
    const auto yy = static_cast<std::size_t>(y);
    if (loss == LossKind::cross_entropy) {
      for (std::size_t i = 0; i < k; ++i) delta_[i] = probs_[i] - T(i == yy ? 1.0 : 0.0);
    } else {
      // d/dz (p_y - c)^2 = 2 (p_y - c) p_y (e_y - p); c is piecewise constant.
      const T coef = T(2.0) * (probs_[yy] - T(correct(y) ? 1.0 : 0.0)) * probs_[yy];
      for (std::size_t i = 0; i < k; ++i) delta_[i] = coef * (T(i == yy ? 1.0 : 0.0) - probs_[i]);
    }
    if (weight != 1.0) {
      for (std::size_t i = 0; i < k; ++i) delta_[i] = delta_[i] * weight;
    }

    for (std::size_t l = shapes_.size(); l-- > 0;) {
      const auto& s = shapes_[l];
      const T* w = params.data() + offsets_[l];
      T* gw = grad.data() + offsets_[l];
      T* gb = gw + s.weight_count();
      const auto& in = acts_[l];
      for (std::size_t r = 0; r < s.out; ++r) {
        const T dr = delta_[r];
        T* gwr = gw + r * s.in;
        for (std::size_t c = 0; c < s.in; ++c) gwr[c] += dr * in[c];
        gb[r] += dr;
      }
      if (l == 0) break;
      for (std::size_t c = 0; c < s.in; ++c) back_[c] = T(0.0);
      for (std::size_t r = 0; r < s.out; ++r) {
        const T dr = delta_[r];
        const T* wr = w + r * s.in;
        for (std::size_t c = 0; c < s.in; ++c) back_[c] += wr[c] * dr;
      }
      const auto& z = pre_[l - 1];
      const auto& a = acts_[l];
      if (activation_ == Activation::relu) {
        // Subgradient at 0 is 0.
        for (std::size_t c = 0; c < s.in; ++c) delta_[c] = real(z[c]) > 0.0 ? back_[c] : T(0.0);
      } else {
        for (std::size_t c = 0; c < s.in; ++c) delta_[c] = back_[c] * (T(1.0) - a[c] * a[c]);
      }
    }
  }

 private:
  bool correct(int y) const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs_.size(); ++i) {
      if (real(probs_[i]) > real(probs_[best])) best = i;
    }
    return best == static_cast<std::size_t>(y);
  }

  Activation activation_;
  std::vector<LayerShape> shapes_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<T>> pre_;
  std::vector<std::vector<T>> acts_;
  std::vector<T> delta_;
  std::vector<T> back_;
  std::vector<T> probs_;
};

}  // namespace puma::detail
