#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sauron/tensor.hpp"

namespace sauron {

/// lr0 * (1 - epoch/epochs)^0.9
inline double poly_lr(double epoch, double epochs, double lr0) {
  if (epochs <= 0) throw InvalidArgument("poly_lr: epochs must be positive");
  if (epoch < 0 || epoch > epochs)
    throw InvalidArgument("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epochs) + "]");
  return lr0 * std::pow(1.0 - epoch / epochs, 0.9);
}

/// A named trainable tensor. Names are stable across structural pruning, so
/// optimizer state can follow its parameter.
template <std::floating_point T>
struct NamedParameter {
  std::string name;
  Tensor<T>* tensor;
};

/// One slicing applied to a parameter during filter removal.
struct ParameterSlice {
  std::string name;
  std::size_t axis = 0;
  std::vector<std::size_t> indices;  // sorted, removed
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  // false: L2 term added to the gradient before the moment updates (classic Adam).
  // true: decoupled decay applied directly to the weights (AdamW).
  bool decoupled_weight_decay = false;
};

template <std::floating_point T>
class Adam {
 public:
  struct Moments {
    Shape shape;
    std::vector<T> first, second;
  };

  explicit Adam(AdamOptions options = {}) : options_(options) {}

  std::size_t step_count() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::map<std::string, Moments>& state() const { return moments_; }

  /// One update of every parameter from its current gradient. A parameter
  /// without a gradient is treated as having a zero gradient.
  void step(const std::vector<NamedParameter<T>>& params, double lr) {
    if (!(lr > 0)) throw InvalidArgument("Adam::step: learning rate must be positive");
    for (const auto& p : params) {
      if (!p.tensor->has_grad()) continue;
      for (T g : p.tensor->grad())
        if (!std::isfinite(g)) throw NumericError("Adam::step: non-finite gradient in parameter '" + p.name + "'");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (const auto& p : params) {
      auto& slot = moments_[p.name];
      const std::size_t n = p.tensor->numel();
      if (slot.first.size() != n) {
        if (!slot.first.empty())
          throw ShapeError("Adam::step: moments of '" + p.name + "' have " + std::to_string(slot.first.size()) +
                           " entries but parameter has " + std::to_string(n));
        slot.shape = p.tensor->shape();
        slot.first.assign(n, T(0));
        slot.second.assign(n, T(0));
      }
      const bool has = p.tensor->has_grad();
      const auto grad = p.tensor->grad();
      auto w = p.tensor->mutable_data();
      for (std::size_t i = 0; i < n; ++i) {
        double g = has ? static_cast<double>(grad[i]) : 0.0;
        if (!options_.decoupled_weight_decay) g += options_.weight_decay * static_cast<double>(w[i]);
        const double m = options_.beta1 * slot.first[i] + (1 - options_.beta1) * g;
        const double v = options_.beta2 * slot.second[i] + (1 - options_.beta2) * g * g;
        slot.first[i] = static_cast<T>(m);
        slot.second[i] = static_cast<T>(v);
        double update = lr * (m / bc1) / (std::sqrt(v / bc2) + options_.eps);
        if (options_.decoupled_weight_decay) update += lr * options_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

  /// Keeps moments aligned with parameters that lost slices to pruning.
  void apply_slices(const std::vector<ParameterSlice>& slices) {
    for (const auto& s : slices) {
      auto it = moments_.find(s.name);
      if (it == moments_.end() || s.indices.empty()) continue;
      Shape shape;
      it->second.first = remove_along_axis<T>(it->second.first, it->second.shape, s.axis, s.indices, &shape);
      it->second.second = remove_along_axis<T>(it->second.second, it->second.shape, s.axis, s.indices);
      it->second.shape = shape;
    }
  }

 private:
  AdamOptions options_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace sauron
