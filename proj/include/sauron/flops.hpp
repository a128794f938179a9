#pragma once

// FLOPs of all convolutions: H * W * C_in * C_out * K^2 per layer, evaluated
// at each layer's output feature-map size. The 3D form multiplies in an extra
// depth D and kernel extent K.

#include <cstdint>
#include <string>
#include <vector>

#include "sauron/segnet.hpp"

namespace sauron {

inline std::uint64_t conv_flops(std::uint64_t h, std::uint64_t w, std::uint64_t cin, std::uint64_t cout,
                                std::uint64_t k) {
  return h * w * cin * cout * k * k;
}

inline std::uint64_t conv_flops_3d(std::uint64_t h, std::uint64_t w, std::uint64_t d, std::uint64_t cin,
                                   std::uint64_t cout, std::uint64_t k) {
  return conv_flops(h, w, cin, cout, k) * d * k;
}

struct LayerFlops {
  std::string name;
  std::size_t height = 0, width = 0, in_channels = 0, out_channels = 0, kernel = 0;
  std::uint64_t flops = 0;
};

struct FlopsReport {
  std::uint64_t total = 0;
  std::vector<LayerFlops> layers;
};

template <std::floating_point T>
FlopsReport count_flops(const SegNet<T>& net, std::size_t height, std::size_t width) {
  const auto sizes = net.output_sizes(height, width);
  FlopsReport report;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    LayerFlops lf{l.name, sizes[i].first, sizes[i].second, l.in_channels(), l.out_channels(), l.kernel, 0};
    lf.flops = conv_flops(lf.height, lf.width, lf.in_channels, lf.out_channels, lf.kernel);
    report.total += lf.flops;
    report.layers.push_back(lf);
  }
  return report;
}

struct FlopsReduction {
  double percent = 0.0;
  bool anomaly = false;  // after > before
};

inline FlopsReduction flops_reduction(std::uint64_t before, std::uint64_t after) {
  if (before == 0) throw InvalidArgument("flops_reduction: baseline FLOPs must be positive");
  return {100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before)), after > before};
}

}  // namespace sauron
