#pragma once

// Synthetic segmentation corpus: a filled ellipse (class 1) and a ring
// (class 2) on a noisy background, standardized per image.

#include <cmath>
#include <numbers>
#include <vector>

#include "sauron/error.hpp"
#include "sauron/rng.hpp"
#include "sauron/tensor.hpp"

namespace sauron {

struct SyntheticDataset {
  std::size_t height = 0, width = 0, classes = 0;
  std::vector<std::vector<double>> images;  // [H*W] each, one channel
  std::vector<std::vector<int>> labels;     // [H*W] each
  std::vector<std::size_t> train, val, test;

  std::size_t size() const { return images.size(); }

  double foreground_fraction(std::size_t i) const {
    std::size_t fg = 0;
    for (int l : labels[i]) fg += l != 0;
    return static_cast<double>(fg) / static_cast<double>(labels[i].size());
  }

  /// Stacks images `idx` into a [B, 1, H, W] tensor and flat labels.
  template <std::floating_point T>
  std::pair<Tensor<T>, std::vector<int>> batch(std::span<const std::size_t> idx, bool flip = false) const {
    std::vector<T> x;
    std::vector<int> y;
    x.reserve(idx.size() * height * width);
    y.reserve(idx.size() * height * width);
    for (std::size_t i : idx) {
      if (i >= size()) throw InvalidArgument("SyntheticDataset::batch: index out of range");
      for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) {
          const std::size_t src = r * width + (flip ? width - 1 - c : c);
          x.push_back(static_cast<T>(images[i][src]));
          y.push_back(labels[i][src]);
        }
    }
    return {Tensor<T>::from({idx.size(), 1, height, width}, std::move(x)), std::move(y)};
  }
};

namespace detail {

struct Ellipse {
  double cy, cx, a, b, theta;
  bool contains(double y, double x, double scale = 1.0) const {
    const double dy = y - cy, dx = x - cx;
    const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / (a * scale);
    const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / (b * scale);
    return u * u + v * v <= 1.0;
  }
};

}  // namespace detail

/// Reproducible corpus of n images of h x w. Classes: 2 (ellipse only) or 3
/// (ellipse and ring). Splits: 80/20 into train+val / test, then 90/10 into
/// train / val.
inline SyntheticDataset gen_synthetic(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                                      std::size_t classes = 3) {
  if (n < 10) throw InvalidArgument("gen_synthetic: need at least 10 images for the splits, got " + std::to_string(n));
  if (classes < 2 || classes > 3) throw InvalidArgument("gen_synthetic: classes must be 2 or 3");
  if (h < 16 || w < 16) throw InvalidArgument("gen_synthetic: images must be at least 16x16");
  SyntheticDataset ds;
  ds.height = h;
  ds.width = w;
  ds.classes = classes;
  Rng rng = Rng::stream(seed, 0xDA7A);
  const double size = static_cast<double>(std::min(h, w));
  const std::size_t hw = h * w;

  for (std::size_t img = 0; img < n; ++img) {
    std::vector<int> label(hw, 0);
    std::vector<double> x(hw, 0.0);
    double fraction = 0.0;
    do {
      std::fill(label.begin(), label.end(), 0);
      if (classes == 3) {
        const double ro = rng.uniform(0.14, 0.26) * size;
        const double thickness = rng.uniform(0.06, 0.10) * size;
        const detail::Ellipse outer{rng.uniform(ro, h - ro), rng.uniform(ro, w - ro), ro, ro * rng.uniform(0.8, 1.0),
                                    rng.uniform(0.0, std::numbers::pi)};
        const double inner_scale = (ro - thickness) / ro;
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c) {
            const double y = r + 0.5, xx = c + 0.5;
            if (outer.contains(y, xx) && !outer.contains(y, xx, inner_scale)) label[r * w + c] = 2;
          }
      }
      const double a = rng.uniform(0.08, 0.2) * size, b = rng.uniform(0.08, 0.2) * size;
      const double m = std::max(a, b);
      const detail::Ellipse blob{rng.uniform(m, h - m), rng.uniform(m, w - m), a, b, rng.uniform(0.0, std::numbers::pi)};
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
          if (blob.contains(r + 0.5, c + 0.5)) label[r * w + c] = 1;
      std::size_t fg = 0;
      for (int l : label) fg += l != 0;
      fraction = static_cast<double>(fg) / static_cast<double>(hw);
    } while (fraction < 0.02 || fraction > 0.40);

    // Intensities with per-image jitter; the ring is darker than the blob.
    const double gain = rng.uniform(0.8, 1.2), offset = rng.uniform(-0.5, 0.5), noise = rng.uniform(0.25, 0.45);
    const double level[3] = {0.0, 1.0, 0.55};
    for (std::size_t i = 0; i < hw; ++i) x[i] = offset + gain * level[label[i]] + noise * rng.normal();

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(hw);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(hw));
    for (double& v : x) v = (v - mean) / sd;

    ds.images.push_back(std::move(x));
    ds.labels.push_back(std::move(label));
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split = Rng::stream(seed, 0x5917);
  split.shuffle(order);
  const std::size_t n_trainval = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const std::size_t n_train = static_cast<std::size_t>(std::llround(0.9 * static_cast<double>(n_trainval)));
  ds.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  ds.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_trainval));
  ds.test.assign(order.begin() + static_cast<long>(n_trainval), order.end());
  return ds;
}

}  // namespace sauron
