#pragma once

// Per-image segmentation scores: Dice and the 95th percentile of symmetric
// boundary distances (HD95), both per foreground class.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "sauron/tensor.hpp"

namespace sauron {

/// Argmax over channels of [B, C, H, W] logits, flattened to [B*H*W].
template <std::floating_point T>
std::vector<int> argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_labels: need [B,C,H,W], got " + detail::shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<int> out(B * HW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits[(b * C + c) * HW + i] > logits[(b * C + best) * HW + i]) best = c;
      out[b * HW + i] = static_cast<int>(best);
    }
  return out;
}

/// 2|P&G| / (|P| + |G|) for one class; 1 when both are empty.
inline double dice_score(std::span<const int> pred, std::span<const int> truth, int cls) {
  if (pred.size() != truth.size()) throw ShapeError("dice_score: prediction and ground truth differ in size");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == cls, b = truth[i] == cls;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

namespace detail {

/// Mask pixels with a 4-neighbor outside the mask (or outside the image).
inline std::vector<std::pair<int, int>> boundary(std::span<const int> labels, int cls, std::size_t h, std::size_t w) {
  std::vector<std::pair<int, int>> out;
  auto in = [&](long y, long x) {
    return y >= 0 && x >= 0 && y < static_cast<long>(h) && x < static_cast<long>(w) &&
           labels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] == cls;
  };
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x)
      if (in(y, x) && (!in(y - 1, x) || !in(y + 1, x) || !in(y, x - 1) || !in(y, x + 1)))
        out.emplace_back(static_cast<int>(y), static_cast<int>(x));
  return out;
}

inline void directed_distances(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                               std::vector<double>& out) {
  for (const auto& [y, x] : from) {
    long best = std::numeric_limits<long>::max();
    for (const auto& [v, u] : to) best = std::min(best, static_cast<long>(y - v) * (y - v) + static_cast<long>(x - u) * (x - u));
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
}

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// HD95 in pixels for one class of one h x w image. Both masks empty gives 0;
/// exactly one empty gives the image diagonal.
inline double hd95(std::span<const int> pred, std::span<const int> truth, int cls, std::size_t h, std::size_t w) {
  if (pred.size() != h * w || truth.size() != h * w) throw ShapeError("hd95: label maps must be h*w");
  const auto bp = detail::boundary(pred, cls, h, w);
  const auto bt = detail::boundary(truth, cls, h, w);
  if (bp.empty() && bt.empty()) return 0.0;
  if (bp.empty() || bt.empty()) return std::hypot(static_cast<double>(h), static_cast<double>(w));
  std::vector<double> d;
  d.reserve(bp.size() + bt.size());
  detail::directed_distances(bp, bt, d);
  detail::directed_distances(bt, bp, d);
  return detail::percentile(std::move(d), 95.0);
}

struct SegmentationScores {
  std::vector<double> dice;  // per foreground class 1..C-1, mean over images
  std::vector<double> hd95;

  double mean_dice() const {
    double s = 0;
    for (double d : dice) s += d;
    return dice.empty() ? 0.0 : s / static_cast<double>(dice.size());
  }
};

/// Accumulates per-image scores; every image counts equally.
class ScoreAccumulator {
 public:
  ScoreAccumulator(std::size_t classes, std::size_t h, std::size_t w)
      : classes_(classes), h_(h), w_(w), dice_(classes - 1, 0.0), hd_(classes - 1, 0.0) {}

  void add_image(std::span<const int> pred, std::span<const int> truth) {
    for (std::size_t c = 1; c < classes_; ++c) {
      dice_[c - 1] += dice_score(pred, truth, static_cast<int>(c));
      hd_[c - 1] += hd95(pred, truth, static_cast<int>(c), h_, w_);
    }
    ++images_;
  }

  SegmentationScores result() const {
    if (images_ == 0) throw InvalidArgument("ScoreAccumulator: no images scored");
    SegmentationScores s{dice_, hd_};
    for (auto& v : s.dice) v /= static_cast<double>(images_);
    for (auto& v : s.hd95) v /= static_cast<double>(images_);
    return s;
  }

 private:
  std::size_t classes_, h_, w_;
  std::vector<double> dice_, hd_;
  std::size_t images_ = 0;
};

}  // namespace sauron
