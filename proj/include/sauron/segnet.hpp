#pragma once

// Prunable 2D U-Net.
//
// The network is an ordered list of convolutional layers. Every layer names the
// producers whose outputs it consumes (concatenated along channels, in order),
// which is the channel provenance used to cascade filter removal into
// consumers, including across skip connections.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sauron/ops.hpp"
#include "sauron/optim.hpp"
#include "sauron/rng.hpp"
#include "sauron/tensor.hpp"

namespace sauron {

enum class NormKind { instance, batch, none };
enum class Activation { leaky_relu, relu, none };
enum class LayerKind { conv, transposed };

inline std::string to_string(NormKind n) {
  switch (n) {
    case NormKind::instance: return "instance";
    case NormKind::batch: return "batch";
    case NormKind::none: return "none";
  }
  return "?";
}
inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::relu: return "relu";
    case Activation::none: return "none";
  }
  return "?";
}
inline std::string to_string(LayerKind k) { return k == LayerKind::conv ? "conv" : "transposed"; }

inline NormKind parse_norm(std::string_view s) {
  if (s == "instance") return NormKind::instance;
  if (s == "batch") return NormKind::batch;
  if (s == "none") return NormKind::none;
  throw InvalidArgument("unknown norm kind '" + std::string(s) + "'");
}
inline Activation parse_activation(std::string_view s) {
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "relu") return Activation::relu;
  if (s == "none") return Activation::none;
  throw InvalidArgument("unknown activation '" + std::string(s) + "'");
}
inline LayerKind parse_layer_kind(std::string_view s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "transposed") return LayerKind::transposed;
  throw InvalidArgument("unknown layer kind '" + std::string(s) + "'");
}

/// Index used in `ConvLayer::inputs` for the network input.
inline constexpr int kNetworkInput = -1;

template <std::floating_point T>
struct ConvLayer {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t kernel = 3, stride = 1, padding = 1;
  NormKind norm = NormKind::instance;
  Activation activation = Activation::leaky_relu;
  bool prunable = true;
  std::vector<int> inputs;  // producers, concatenated in this order

  Tensor<T> weight;      // [s_out, s_in, k, k]
  Tensor<T> bias;        // [s_out]
  Tensor<T> norm_scale;  // [s_out] when norm != none
  Tensor<T> norm_shift;
  std::vector<T> running_mean, running_var;  // batch norm only

  std::vector<std::size_t> origin;  // original channel index of every live output

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
};

/// Post-block output of one prunable layer captured during a forward pass.
template <std::floating_point T>
struct FeatureMapRecord {
  std::string layer;
  std::size_t layer_index = 0;
  int epoch = 0;
  Tensor<T> output;  // [B, C, H, W], after norm and activation

  std::size_t channels() const { return output.dim(1); }
};

template <std::floating_point T>
struct ForwardResult {
  Tensor<T> logits;
  std::vector<FeatureMapRecord<T>> records;
};

struct UNetSpec {
  std::size_t levels = 3;
  std::size_t init_filters = 8;
  std::size_t in_channels = 1;
  std::size_t num_classes = 3;
  NormKind norm = NormKind::instance;
  Activation activation = Activation::leaky_relu;
};

inline constexpr std::size_t kMaxFilters = 480;

/// Filters per level: doubling from init_filters, capped at 480.
inline std::vector<std::size_t> level_filters(std::size_t levels, std::size_t init_filters) {
  std::vector<std::size_t> f;
  std::size_t current = init_filters;
  for (std::size_t v = 0; v < levels; ++v) {
    f.push_back(std::min(current, kMaxFilters));
    current = std::min(current * 2, kMaxFilters * 2);
  }
  return f;
}

template <std::floating_point T>
class SegNet {
 public:
  SegNet(UNetSpec spec, std::vector<ConvLayer<T>> layers) : spec_(spec), layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) index_[layers_[i].name] = i;
    audit();
  }

  const UNetSpec& spec() const { return spec_; }
  const std::vector<ConvLayer<T>>& layers() const { return layers_; }
  std::vector<ConvLayer<T>>& mutable_layers() { return layers_; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no layer named '" + name + "'");
    return it->second;
  }
  const ConvLayer<T>& layer(const std::string& name) const { return layers_[index_of(name)]; }
  ConvLayer<T>& layer(const std::string& name) { return layers_[index_of(name)]; }
  bool has_layer(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::size_t> prunable_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].prunable) out.push_back(i);
    return out;
  }

  /// Sum of live output channels over prunable layers.
  std::size_t live_filters() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      if (l.prunable) n += l.out_channels();
    return n;
  }

  std::size_t spatial_divisor() const { return std::size_t{1} << (spec_.levels - 1); }

  std::vector<NamedParameter<T>> parameters() {
    std::vector<NamedParameter<T>> out;
    for (auto& l : layers_) {
      out.push_back({l.name + ".weight", &l.weight});
      out.push_back({l.name + ".bias", &l.bias});
      if (l.norm != NormKind::none) {
        out.push_back({l.name + ".norm_scale", &l.norm_scale});
        out.push_back({l.name + ".norm_shift", &l.norm_shift});
      }
    }
    return out;
  }

  /// Per-layer output spatial size for an input of height x width.
  std::vector<std::pair<std::size_t, std::size_t>> output_sizes(std::size_t height, std::size_t width) const {
    check_spatial(height, width);
    std::vector<std::pair<std::size_t, std::size_t>> sizes(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const int src = l.inputs.front();
      auto [h, w] = src == kNetworkInput ? std::pair{height, width} : sizes[static_cast<std::size_t>(src)];
      if (l.kind == LayerKind::conv)
        sizes[i] = {conv_out_size(h, l.kernel, l.stride, l.padding), conv_out_size(w, l.kernel, l.stride, l.padding)};
      else
        sizes[i] = {conv_transpose_out_size(h, l.kernel, l.stride, l.padding),
                    conv_transpose_out_size(w, l.kernel, l.stride, l.padding)};
    }
    return sizes;
  }

  /// Runs the network. `training` selects batch statistics for batch norm (and
  /// updates the running averages); instance norm behaves the same either way.
  ForwardResult<T> forward(const Tensor<T>& batch, bool capture, bool training = true) {
    if (batch.rank() != 4)
      throw ShapeError("forward: batch must be [B,C,H,W], got " + detail::shape_str(batch.shape()));
    if (batch.dim(1) != spec_.in_channels)
      throw ShapeError("forward: batch has " + std::to_string(batch.dim(1)) + " channels, network expects " +
                       std::to_string(spec_.in_channels));
    check_spatial(batch.dim(2), batch.dim(3));

    ForwardResult<T> result;
    std::vector<Tensor<T>> outputs(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      std::vector<Tensor<T>> parts;
      for (int src : l.inputs) parts.push_back(src == kNetworkInput ? batch : outputs[static_cast<std::size_t>(src)]);
      Tensor<T> x = parts.size() == 1 ? parts[0] : concat_channels(parts);
      Tensor<T> y = l.kind == LayerKind::conv ? conv2d(x, l.weight, l.bias, l.stride, l.padding)
                                              : conv_transpose2d(x, l.weight, l.bias, l.stride, l.padding);
      y = normalize(l, y, training);
      switch (l.activation) {
        case Activation::leaky_relu: y = leaky_relu(y, T(0.01)); break;
        case Activation::relu: y = relu(y); break;
        case Activation::none: break;
      }
      outputs[i] = y;
      if (capture && l.prunable) result.records.push_back({l.name, i, 0, y});
    }
    result.logits = outputs.back();
    return result;
  }

  /// Structurally removes output filters `indices` (live positions) of a
  /// prunable layer, and the matching input slices of every consumer.
  /// Returns the parameter slices applied, for optimizer bookkeeping.
  std::vector<ParameterSlice> remove_filters(const std::string& name, std::vector<std::size_t> indices) {
    const std::size_t li = index_of(name);
    auto& l = layers_[li];
    if (!l.prunable) throw StructureError("remove_filters: layer '" + name + "' is not prunable");
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    if (indices.empty()) return {};
    const std::size_t live = l.out_channels();
    if (indices.back() >= live)
      throw StructureError("remove_filters: channel " + std::to_string(indices.back()) + " is not live in '" + name +
                           "' (" + std::to_string(live) + " channels)");
    if (indices.size() >= live)
      throw StructureError("remove_filters: removing " + std::to_string(indices.size()) + " of " +
                           std::to_string(live) + " filters would empty '" + name + "'");

    std::vector<ParameterSlice> slices;
    auto slice_param = [&](Tensor<T>& t, const std::string& pname, std::size_t axis, const std::vector<std::size_t>& idx) {
      Shape shape;
      auto values = remove_along_axis<T>(t.data(), t.shape(), axis, idx, &shape);
      t = Tensor<T>::parameter(std::move(shape), std::move(values));
      slices.push_back({pname, axis, idx});
    };
    slice_param(l.weight, name + ".weight", 0, indices);
    slice_param(l.bias, name + ".bias", 0, indices);
    if (l.norm != NormKind::none) {
      slice_param(l.norm_scale, name + ".norm_scale", 0, indices);
      slice_param(l.norm_shift, name + ".norm_shift", 0, indices);
    }
    if (!l.running_mean.empty()) {
      l.running_mean = remove_along_axis<T>(l.running_mean, {live}, 0, indices);
      l.running_var = remove_along_axis<T>(l.running_var, {live}, 0, indices);
    }
    l.origin = remove_along_axis<std::size_t>(l.origin, {live}, 0, indices);

    for (auto& c : layers_) {
      std::size_t offset = 0;
      std::vector<std::size_t> in_idx;
      for (int src : c.inputs) {
        if (src == static_cast<int>(li))
          for (std::size_t i : indices) in_idx.push_back(offset + i);
        offset += src == kNetworkInput ? spec_.in_channels
                  : src == static_cast<int>(li) ? live
                                                : layers_[static_cast<std::size_t>(src)].out_channels();
      }
      if (!in_idx.empty()) slice_param(c.weight, c.name + ".weight", 1, in_idx);
    }
    return slices;
  }

  /// Full-graph consistency check; throws StructureError on the first violation.
  void audit() const {
    if (layers_.empty()) throw StructureError("network has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.inputs.empty()) throw StructureError("layer '" + l.name + "' has no inputs");
      std::size_t expected = 0;
      for (int src : l.inputs) {
        if (src != kNetworkInput && (src < 0 || static_cast<std::size_t>(src) >= i))
          throw StructureError("layer '" + l.name + "' consumes a later or unknown layer (cycle)");
        expected += src == kNetworkInput ? spec_.in_channels : layers_[static_cast<std::size_t>(src)].out_channels();
      }
      if (l.weight.rank() != 4 || l.in_channels() != expected)
        throw StructureError("layer '" + l.name + "' has " + std::to_string(l.in_channels()) +
                             " input channels but its producers supply " + std::to_string(expected));
      if (l.out_channels() < 1) throw StructureError("layer '" + l.name + "' has no output channels");
      if (l.bias.numel() != l.out_channels() || l.origin.size() != l.out_channels())
        throw StructureError("layer '" + l.name + "' bias/origin out of sync with its filters");
      if (l.norm != NormKind::none &&
          (l.norm_scale.numel() != l.out_channels() || l.norm_shift.numel() != l.out_channels()))
        throw StructureError("layer '" + l.name + "' normalization parameters out of sync");
    }
    const auto& head = layers_.back();
    if (head.prunable) throw StructureError("the classifier layer must not be prunable");
    if (head.out_channels() != spec_.num_classes)
      throw StructureError("classifier emits " + std::to_string(head.out_channels()) + " channels, expected " +
                           std::to_string(spec_.num_classes));
  }

 private:
  void check_spatial(std::size_t h, std::size_t w) const {
    const std::size_t d = spatial_divisor();
    if (h == 0 || w == 0 || h % d != 0 || w % d != 0)
      throw ShapeError("spatial size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by " +
                       std::to_string(d) + " (2^(levels-1))");
  }

  Tensor<T> normalize(ConvLayer<T>& l, const Tensor<T>& y, bool training) {
    constexpr T eps = T(1e-5);
    switch (l.norm) {
      case NormKind::none: return y;
      case NormKind::instance: return instance_norm(y, l.norm_scale, l.norm_shift, eps);
      case NormKind::batch: {
        if (!training) return batch_norm_inference<T>(y, l.norm_scale, l.norm_shift, l.running_mean, l.running_var, eps);
        std::vector<T> m, v;
        auto out = batch_norm(y, l.norm_scale, l.norm_shift, eps, &m, &v);
        constexpr T momentum = T(0.1);
        for (std::size_t c = 0; c < m.size(); ++c) {
          l.running_mean[c] = (1 - momentum) * l.running_mean[c] + momentum * m[c];
          l.running_var[c] = (1 - momentum) * l.running_var[c] + momentum * v[c];
        }
        return out;
      }
    }
    return y;
  }

  UNetSpec spec_;
  std::vector<ConvLayer<T>> layers_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <std::floating_point T>
ConvLayer<T> make_layer(std::string name, LayerKind kind, std::size_t cin, std::size_t cout, std::size_t k,
                        std::size_t stride, std::size_t padding, NormKind norm, Activation act, bool prunable,
                        std::vector<int> inputs, Rng& rng) {
  ConvLayer<T> l;
  l.name = std::move(name);
  l.kind = kind;
  l.kernel = k;
  l.stride = stride;
  l.padding = padding;
  l.norm = norm;
  l.activation = act;
  l.prunable = prunable;
  l.inputs = std::move(inputs);
  // He initialization on the fan-in.
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  std::vector<T> w(cout * cin * k * k);
  for (auto& v : w) v = static_cast<T>(rng.normal() * stddev);
  l.weight = Tensor<T>::parameter({cout, cin, k, k}, std::move(w));
  l.bias = Tensor<T>::parameter({cout}, std::vector<T>(cout, T(0)));
  if (norm != NormKind::none) {
    l.norm_scale = Tensor<T>::parameter({cout}, std::vector<T>(cout, T(1)));
    l.norm_shift = Tensor<T>::parameter({cout}, std::vector<T>(cout, T(0)));
  }
  if (norm == NormKind::batch) {
    l.running_mean.assign(cout, T(0));
    l.running_var.assign(cout, T(1));
  }
  l.origin.resize(cout);
  for (std::size_t i = 0; i < cout; ++i) l.origin[i] = i;
  return l;
}

}  // namespace detail

/// Builds the U-Net: two 3x3 convs per encoder level (the first of each level
/// below the top downsamples with stride 2), then per decoder level a 2x2
/// transposed conv followed by two 3x3 convs over [upsampled, skip]; a
/// non-prunable 1x1 classifier closes the network.
template <std::floating_point T>
SegNet<T> build_unet(std::size_t levels, std::size_t init_filters, std::size_t in_channels, std::size_t num_classes,
                     NormKind norm, std::uint64_t seed, Activation activation = Activation::leaky_relu) {
  if (levels < 2) throw InvalidArgument("build_unet: levels must be >= 2");
  if (init_filters < 2) throw InvalidArgument("build_unet: init_filters must be >= 2");
  if (in_channels < 1) throw InvalidArgument("build_unet: in_channels must be >= 1");
  if (num_classes < 2) throw InvalidArgument("build_unet: num_classes must be >= 2");
  Rng rng = Rng::stream(seed, 0x1417);
  const auto f = level_filters(levels, init_filters);
  std::vector<ConvLayer<T>> layers;
  std::vector<int> encoder_out(levels);
  int prev = kNetworkInput;
  std::size_t prev_ch = in_channels;
  std::size_t enc = 0;
  for (std::size_t v = 0; v < levels; ++v) {
    layers.push_back(detail::make_layer<T>("enc_conv_" + std::to_string(++enc), LayerKind::conv, prev_ch, f[v], 3,
                                           v == 0 ? 1 : 2, 1, norm, activation, true, {prev}, rng));
    prev = static_cast<int>(layers.size() - 1);
    layers.push_back(detail::make_layer<T>("enc_conv_" + std::to_string(++enc), LayerKind::conv, f[v], f[v], 3, 1, 1,
                                           norm, activation, true, {prev}, rng));
    prev = static_cast<int>(layers.size() - 1);
    prev_ch = f[v];
    encoder_out[v] = prev;
  }
  std::size_t dec = 0;
  for (std::size_t j = 1; j < levels; ++j) {
    const std::size_t t = levels - 1 - j;  // target level (0-based)
    layers.push_back(detail::make_layer<T>("dec_trans_" + std::to_string(j), LayerKind::transposed, prev_ch, f[t], 2,
                                           2, 0, NormKind::none, Activation::none, true, {prev}, rng));
    const int up = static_cast<int>(layers.size() - 1);
    layers.push_back(detail::make_layer<T>("dec_conv_" + std::to_string(++dec), LayerKind::conv, 2 * f[t], f[t], 3, 1,
                                           1, norm, activation, true, {up, encoder_out[t]}, rng));
    prev = static_cast<int>(layers.size() - 1);
    layers.push_back(detail::make_layer<T>("dec_conv_" + std::to_string(++dec), LayerKind::conv, f[t], f[t], 3, 1, 1,
                                           norm, activation, true, {prev}, rng));
    prev = static_cast<int>(layers.size() - 1);
    prev_ch = f[t];
  }
  layers.push_back(detail::make_layer<T>("classifier", LayerKind::conv, prev_ch, num_classes, 1, 1, 0, NormKind::none,
                                         Activation::none, false, {prev}, rng));
  UNetSpec spec{levels, init_filters, in_channels, num_classes, norm, activation};
  return SegNet<T>(spec, std::move(layers));
}

}  // namespace sauron
