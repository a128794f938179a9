#pragma once

// Constructions shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "sauron/pruner.hpp"
#include "sauron/segnet.hpp"

namespace testing_support {

/// Makes output filter `copy` of `layer` an exact duplicate of filter `source`
/// (weights, bias and norm parameters), so both produce identical feature maps.
inline void duplicate_filter(sauron::SegNet<double>& net, const std::string& layer, std::size_t source,
                             std::size_t copy) {
  auto& l = net.layer(layer);
  const std::size_t per = l.weight.numel() / l.out_channels();
  auto w = l.weight.mutable_data();
  for (std::size_t i = 0; i < per; ++i) w[copy * per + i] = w[source * per + i];
  l.bias.mutable_data()[copy] = l.bias[source];
  if (l.norm != sauron::NormKind::none) {
    l.norm_scale.mutable_data()[copy] = l.norm_scale[source];
    l.norm_shift.mutable_data()[copy] = l.norm_shift[source];
  }
}

/// FLOPs recounted from what a forward pass actually produces: the spatial
/// size of every captured output and the live weight shapes.
inline std::uint64_t forward_flops(sauron::SegNet<double>& net, std::size_t h, std::size_t w) {
  auto x = sauron::Tensor<double>::zeros({1, net.spec().in_channels, h, w});
  auto fwd = net.forward(x, true, false);
  std::uint64_t total = 0;
  std::size_t r = 0;
  for (const auto& l : net.layers()) {
    std::size_t oh, ow;
    if (l.prunable) {
      oh = fwd.records[r].output.dim(2);
      ow = fwd.records[r].output.dim(3);
      ++r;
    } else {
      oh = fwd.logits.dim(2);
      ow = fwd.logits.dim(3);
    }
    const std::size_t k = l.weight.dim(2);
    total += std::uint64_t(oh) * ow * l.weight.dim(1) * l.weight.dim(0) * k * k;
  }
  return total;
}

/// A ThresholdState whose histories make C1..C4 evaluate to the given values
/// for `layer` at `epoch` = 10 with `live` = 8 filters.
struct ConditionScenario {
  sauron::ThresholdState state;
  std::string layer = "enc_conv_1";
  int epoch = 10;
  std::size_t live = 8;
};

inline ConditionScenario condition_scenario(bool c1, bool c2, bool c3, bool c4) {
  ConditionScenario s;
  const std::vector<double> train = c1 ? std::vector<double>{1.0, 0.5, 0.7} : std::vector<double>{1.0, 0.7, 0.5};
  const std::vector<double> val = c2 ? std::vector<double>{1.0, 0.5, 0.7} : std::vector<double>{1.0, 0.7, 0.5};
  for (std::size_t i = 0; i < train.size(); ++i) s.state.record_losses(train[i], val[i]);
  auto& lt = s.state.layer(s.layer);
  lt.pruned_history = {0, c3 ? 0u : 3u};  // 2% of 8 filters is 0.16
  if (!c4) lt.last_increase_epoch = s.epoch - 2;
  return s;
}

}  // namespace testing_support
