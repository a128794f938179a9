#pragma once

// Segmentation losses and the channel-distance regularizer.
//
// The regularizer averages, per layer, the L2 distances between the pooled
// first channel and every other pooled channel, scaled by 1/C. Distances are
// computed per sample and averaged over the batch.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "sauron/ops.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

enum class DeltaNormMode {
  minmax_feature_maps,     // min-max normalize every channel map to [0, 1]
  divide_by_max_distance,  // raw maps; distances divided by their per-layer maximum
  none,                    // raw maps and raw distances
};

inline std::string to_string(DeltaNormMode m) {
  switch (m) {
    case DeltaNormMode::minmax_feature_maps: return "minmax_feature_maps";
    case DeltaNormMode::divide_by_max_distance: return "divide_by_max_distance";
    case DeltaNormMode::none: return "none";
  }
  return "?";
}

inline DeltaNormMode parse_delta_norm_mode(std::string_view s) {
  if (s == "minmax_feature_maps") return DeltaNormMode::minmax_feature_maps;
  if (s == "divide_by_max_distance") return DeltaNormMode::divide_by_max_distance;
  if (s == "none") return DeltaNormMode::none;
  throw InvalidArgument("unknown delta_norm_mode '" + std::string(s) + "'");
}

struct LossConfig {
  double lambda = 0.5;
  std::size_t omega = 2;
  DeltaNormMode mode = DeltaNormMode::minmax_feature_maps;

  void validate() const {
    if (!(lambda >= 0)) throw InvalidArgument("LossConfig: lambda must be >= 0");
    if (omega < 1) throw InvalidArgument("LossConfig: omega must be >= 1");
  }
};

/// (x - min) / (max - min); a constant map becomes all zeros.
template <typename T>
std::vector<T> minmax_normalize(std::span<const T> map) {
  std::vector<T> out(map.size(), T(0));
  if (map.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const T range = *hi - *lo;
  if (range <= T(0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - *lo) / range;
  return out;
}

/// Differentiable min-max normalization of every (sample, channel) map of [B, C, H, W].
template <std::floating_point T>
Tensor<T> channel_minmax(const Tensor<T>& x) {
  detail::require_rank4("channel_minmax", "input", x);
  const std::size_t groups = x.dim(0) * x.dim(1), n = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel(), T(0));
  auto lo_idx = std::make_shared<std::vector<std::size_t>>(groups);
  auto hi_idx = std::make_shared<std::vector<std::size_t>>(groups);
  auto range = std::make_shared<std::vector<T>>(groups);
  const auto v = x.data();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* p = v.data() + g * n;
    const std::size_t lo = static_cast<std::size_t>(std::min_element(p, p + n) - p);
    const std::size_t hi = static_cast<std::size_t>(std::max_element(p, p + n) - p);
    (*lo_idx)[g] = lo;
    (*hi_idx)[g] = hi;
    (*range)[g] = p[hi] - p[lo];
    if ((*range)[g] > T(0))
      for (std::size_t i = 0; i < n; ++i) out[g * n + i] = (p[i] - p[lo]) / (*range)[g];
  }
  return detail::make_result<T>("channel_minmax", x.shape(), std::move(out), {x}, [=](detail::Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    for (std::size_t g = 0; g < groups; ++g) {
      const T r = (*range)[g];
      if (r <= T(0)) continue;
      T to_max = 0, to_min = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T gy = self.grad[g * n + i];
        gx[g * n + i] += gy / r;
        to_max -= gy * y[g * n + i] / r;
        to_min += gy * (y[g * n + i] - T(1)) / r;
      }
      gx[g * n + (*hi_idx)[g]] += to_max;
      gx[g * n + (*lo_idx)[g]] += to_min;
    }
  });
}

/// L2 distance of every channel r >= 1 to channel 0, per sample: [B, C, ...] -> [B, C-1].
template <std::floating_point T>
Tensor<T> first_channel_distances(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("first_channel_distances: need [B, C, ...], got " + detail::shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), n = x.numel() / (B * C);
  if (C < 2) throw ShapeError("first_channel_distances: need at least 2 channels");
  std::vector<T> out(B * (C - 1));
  const auto v = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    const T* first = v.data() + b * C * n;
    for (std::size_t r = 1; r < C; ++r) {
      const T* other = first + r * n;
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += (first[i] - other[i]) * (first[i] - other[i]);
      out[b * (C - 1) + r - 1] = std::sqrt(acc);
    }
  }
  return detail::make_result<T>("first_channel_distances", {B, C - 1}, std::move(out), {x},
                                [B, C, n](detail::Node<T>& self) {
                                  T* gx = detail::grad_of(self, 0);
                                  if (!gx) return;
                                  const auto& xv = self.parents[0]->value;
                                  for (std::size_t b = 0; b < B; ++b) {
                                    const T* first = xv.data() + b * C * n;
                                    for (std::size_t r = 1; r < C; ++r) {
                                      const T d = self.value[b * (C - 1) + r - 1];
                                      if (d <= T(0)) continue;  // subgradient 0 at coincidence
                                      const T scale = self.grad[b * (C - 1) + r - 1] / d;
                                      const T* other = first + r * n;
                                      for (std::size_t i = 0; i < n; ++i) {
                                        const T diff = (other[i] - first[i]) * scale;
                                        gx[(b * C + r) * n + i] += diff;
                                        gx[b * C * n + i] -= diff;
                                      }
                                    }
                                  }
                                });
}

/// Divides every row of [B, n] by its maximum; all-zero rows stay zero.
template <std::floating_point T>
Tensor<T> row_max_normalize(const Tensor<T>& d) {
  if (d.rank() != 2) throw ShapeError("row_max_normalize: need [B, n], got " + detail::shape_str(d.shape()));
  const std::size_t B = d.dim(0), n = d.dim(1);
  std::vector<T> out(d.numel(), T(0));
  auto arg = std::make_shared<std::vector<std::size_t>>(B);
  const auto v = d.data();
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = v.data() + b * n;
    const std::size_t m = static_cast<std::size_t>(std::max_element(row, row + n) - row);
    (*arg)[b] = m;
    if (row[m] > T(0))
      for (std::size_t i = 0; i < n; ++i) out[b * n + i] = row[i] / row[m];
  }
  return detail::make_result<T>("row_max_normalize", d.shape(), std::move(out), {d}, [=](detail::Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const auto& dv = self.parents[0]->value;
    for (std::size_t b = 0; b < B; ++b) {
      const T mx = dv[b * n + (*arg)[b]];
      if (mx <= T(0)) continue;
      T to_max = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T gy = self.grad[b * n + i];
        gx[b * n + i] += gy / mx;
        to_max -= gy * self.value[b * n + i] / mx;
      }
      gx[b * n + (*arg)[b]] += to_max;
    }
  });
}

/// The geometry every distance is measured in: channels normalized per the
/// mode (min-max for minmax_feature_maps), then average-pooled with window omega.
template <std::floating_point T>
Tensor<T> distance_view(const Tensor<T>& feature_maps, const LossConfig& cfg) {
  const Tensor<T> normalized =
      cfg.mode == DeltaNormMode::minmax_feature_maps ? channel_minmax(feature_maps) : feature_maps;
  return cfg.omega == 1 ? normalized : avg_pool2d(normalized, cfg.omega);
}

/// One layer's contribution: batch mean of (1/C) * sum_{r>=2} ||phi(O_1) - phi(O_r)||.
template <std::floating_point T>
Tensor<T> layer_delta_term(const Tensor<T>& feature_maps, const LossConfig& cfg) {
  const std::size_t B = feature_maps.dim(0), C = feature_maps.dim(1);
  if (C < 2) return Tensor<T>::scalar(T(0));
  Tensor<T> d = first_channel_distances(distance_view(feature_maps, cfg));
  if (cfg.mode == DeltaNormMode::divide_by_max_distance) d = row_max_normalize(d);
  return scale(sum(d), T(1) / static_cast<T>(B * C));
}

template <std::floating_point T>
Tensor<T> delta_opt(const std::vector<FeatureMapRecord<T>>& records, const LossConfig& cfg) {
  if (records.empty()) throw InvalidArgument("delta_opt: no feature-map records");
  cfg.validate();
  Tensor<T> total;
  for (const auto& r : records) {
    if (r.channels() < 1) throw InvalidArgument("delta_opt: record '" + r.layer + "' has no channels");
    Tensor<T> term = layer_delta_term(r.output, cfg);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, T(1) / static_cast<T>(records.size()));
}

/// Dense one-hot target [B, C, H, W] from labels [B*H*W].
template <std::floating_point T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t batch, std::size_t classes, std::size_t h, std::size_t w) {
  if (labels.size() != batch * h * w)
    throw ShapeError("one_hot: " + std::to_string(labels.size()) + " labels for a " + std::to_string(batch) + "x" +
                     std::to_string(h) + "x" + std::to_string(w) + " batch");
  std::vector<T> out(batch * classes * h * w, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < h * w; ++i) {
      const int y = labels[b * h * w + i];
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw InvalidArgument("one_hot: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      out[(b * classes + static_cast<std::size_t>(y)) * h * w + i] = T(1);
    }
  return Tensor<T>::from({batch, classes, h, w}, std::move(out));
}

inline constexpr double kDiceSmooth = 1e-5;

/// 1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps); sums run over batch and space.
template <std::floating_point T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target) {
  detail::require_rank4("dice_loss", "probs", probs);
  if (probs.shape() != target.shape()) detail::shape_mismatch("dice_loss", "probs", probs.shape(), "target", target.shape());
  const std::size_t B = probs.dim(0), C = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
  const T eps = static_cast<T>(kDiceSmooth);
  auto inter = std::make_shared<std::vector<T>>(C, T(0));
  auto denom = std::make_shared<std::vector<T>>(C, T(0));
  const auto p = probs.data();
  const auto t = target.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (b * C + c) * HW + i;
        (*inter)[c] += p[idx] * t[idx];
        (*denom)[c] += p[idx] + t[idx];
      }
  T mean_dice = 0;
  for (std::size_t c = 0; c < C; ++c) mean_dice += (2 * (*inter)[c] + eps) / ((*denom)[c] + eps);
  mean_dice /= static_cast<T>(C);
  return detail::make_result<T>("dice_loss", {1}, {T(1) - mean_dice}, {probs, target}, [=](detail::Node<T>& self) {
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    T* gp = detail::grad_of(self, 0);
    T* gt = detail::grad_of(self, 1);
    const T up = self.grad[0] / static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c) {
      const T S = (*denom)[c] + eps, N = 2 * (*inter)[c] + eps;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t idx = (b * C + c) * HW + i;
          if (gp) gp[idx] -= up * (2 * tv[idx] * S - N) / (S * S);
          if (gt) gt[idx] -= up * (2 * pv[idx] * S - N) / (S * S);
        }
    }
  });
}

/// Mean over pixels of -log softmax(logits)[label].
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank4("cross_entropy", "logits", logits);
  const std::size_t B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  if (labels.size() != B * HW)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     detail::shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw InvalidArgument("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const auto x = logits.data();
  T total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[(b * C + c) * HW + i]);
      T z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(x[(b * C + c) * HW + i] - mx);
      const T log_z = mx + std::log(z);
      for (std::size_t c = 0; c < C; ++c) (*probs)[(b * C + c) * HW + i] = std::exp(x[(b * C + c) * HW + i] - log_z);
      total += log_z - x[(b * C + static_cast<std::size_t>((*lab)[b * HW + i])) * HW + i];
    }
  const T n = static_cast<T>(B * HW);
  return detail::make_result<T>("cross_entropy", {1}, {total / n}, {logits}, [=](detail::Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const T up = self.grad[0] / n;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t idx = (b * C + c) * HW + i;
          const T target = static_cast<std::size_t>((*lab)[b * HW + i]) == c ? T(1) : T(0);
          gx[idx] += up * ((*probs)[idx] - target);
        }
  });
}

/// ce + dice + lambda * dopt
template <std::floating_point T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& dice, const Tensor<T>& dopt, T lambda) {
  Tensor<T> loss = add(ce, dice);
  if (dopt.defined()) loss = add(loss, scale(dopt, lambda));
  if (!std::isfinite(loss.item())) throw NumericError("total_loss: non-finite loss");
  return loss;
}

}  // namespace sauron
