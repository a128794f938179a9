#pragma once

// Threshold-driven filter elimination.
//
// Each epoch a reference channel is drawn per layer. Every batch contributes
// the distances of all other channels to it, divided by their maximum so the
// farthest channel sits at 1. At epoch end, per layer: the threshold may rise by
// tau_max/kappa when training has stalled (C1-C4), then every channel whose
// epoch-mean distance is <= tau is removed.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sauron/losses.hpp"
#include "sauron/rng.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

struct PrunerConfig {
  double tau_max = 0.3;
  std::size_t kappa = 15;
  std::size_t patience = 5;  // rho
  double mu = 2.0;           // percent
  // C2 as "latest validation loss exceeds every previous value" instead of
  // "latest validation loss is not a new minimum".
  bool strict_c2 = false;

  double step() const { return tau_max / static_cast<double>(kappa); }

  void validate() const {
    if (!(tau_max > 0) || tau_max > 1) throw InvalidArgument("PrunerConfig: tau_max must be in (0, 1]");
    if (kappa < 1) throw InvalidArgument("PrunerConfig: kappa must be >= 1");
    if (!(mu >= 0)) throw InvalidArgument("PrunerConfig: mu must be >= 0");
  }
};

struct LayerThreshold {
  double tau = 0.0;
  std::optional<int> last_increase_epoch;
  std::vector<std::size_t> pruned_history;  // filters removed at each pruning step
  std::vector<double> tau_history;          // tau after each pruning step
};

class ThresholdState {
 public:
  explicit ThresholdState(PrunerConfig config = {}) : config_(config) { config_.validate(); }

  const PrunerConfig& config() const { return config_; }

  LayerThreshold& layer(const std::string& name) { return layers_[name]; }
  const LayerThreshold& layer(const std::string& name) const {
    static const LayerThreshold empty;
    auto it = layers_.find(name);
    return it == layers_.end() ? empty : it->second;
  }
  const std::map<std::string, LayerThreshold>& layers() const { return layers_; }

  /// Epoch-mean losses, appended once per epoch before the pruning step.
  void record_losses(double train_loss, double val_loss) {
    train_losses_.push_back(train_loss);
    val_losses_.push_back(val_loss);
  }
  const std::vector<double>& train_losses() const { return train_losses_; }
  const std::vector<double>& val_losses() const { return val_losses_; }

 private:
  PrunerConfig config_;
  std::map<std::string, LayerThreshold> layers_;
  std::vector<double> train_losses_, val_losses_;
};

struct Conditions {
  bool c1 = false;  // training loss converging
  bool c2 = false;  // validation loss not improving
  bool c3 = false;  // few filters pruned at the previous step
  bool c4 = false;  // tau not raised within the patience window
  bool all() const { return c1 && c2 && c3 && c4; }
};

/// Evaluates C1-C4 for `layer` at epoch `epoch` (1-based). With fewer than two
/// epochs of loss history every condition reads false.
inline Conditions evaluate_conditions(const ThresholdState& state, const std::string& layer, int epoch,
                                      std::size_t live_filters) {
  Conditions c;
  const auto& train = state.train_losses();
  const auto& val = state.val_losses();
  if (train.size() < 2 || val.size() < 2) return c;
  const auto& cfg = state.config();

  const double latest_train = train.back();
  const auto [tmin, tmax] = std::minmax_element(train.begin(), train.end() - 1);
  c.c1 = latest_train > *tmin && latest_train < *tmax;

  const double latest_val = val.back();
  if (cfg.strict_c2)
    c.c2 = latest_val > *std::max_element(val.begin(), val.end() - 1);
  else
    c.c2 = latest_val >= *std::min_element(val.begin(), val.end() - 1);

  const auto& lt = state.layer(layer);
  const double pruned_prev = lt.pruned_history.empty() ? 0.0 : static_cast<double>(lt.pruned_history.back());
  c.c3 = pruned_prev < cfg.mu / 100.0 * static_cast<double>(live_filters);

  c.c4 = !lt.last_increase_epoch || epoch - *lt.last_increase_epoch >= static_cast<int>(cfg.patience);
  return c;
}

inline bool check_conditions(const ThresholdState& state, const std::string& layer, int epoch,
                             std::size_t live_filters) {
  return evaluate_conditions(state, layer, epoch, live_filters).all();
}

/// tau <- min(tau + tau_max/kappa, tau_max). Returns whether tau changed.
inline bool increase_threshold(ThresholdState& state, const std::string& layer, int epoch) {
  auto& lt = state.layer(layer);
  const auto& cfg = state.config();
  if (lt.tau >= cfg.tau_max) return false;
  double next = lt.tau + cfg.step();
  // Accumulated rounding must not leave a sliver below the cap.
  if (next > cfg.tau_max || cfg.tau_max - next < cfg.step() * 1e-9) next = cfg.tau_max;
  lt.tau = next;
  lt.last_increase_epoch = epoch;
  return true;
}

/// Uniform draw over the live channels.
inline std::size_t sample_reference(std::size_t channels, Rng& rng) {
  if (channels < 1) throw InvalidArgument("sample_reference: layer has no channels");
  return rng.index(channels);
}

/// Max-normalized distances from channel `reference` to every channel, for
/// one sample of a distance view [C, n]. Entry `reference` is 0. An all-zero
/// distance set stays all zero.
inline std::vector<double> normalized_reference_distances(std::span<const double> view, std::size_t channels,
                                                          std::size_t reference) {
  const std::size_t n = view.size() / channels;
  std::vector<double> d(channels, 0.0);
  double mx = 0.0;
  const double* ref = view.data() + reference * n;
  for (std::size_t r = 0; r < channels; ++r) {
    if (r == reference) continue;
    const double* other = view.data() + r * n;
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += (ref[i] - other[i]) * (ref[i] - other[i]);
    d[r] = std::sqrt(acc);
    mx = std::max(mx, d[r]);
  }
  if (mx > 0)
    for (auto& v : d) v /= mx;
  return d;
}

/// Batch-mean normalized distances to channel `reference` for one record.
/// The returned vector has one entry per channel; the reference slot is 0.
/// A single-channel record yields an empty vector.
template <std::floating_point T>
std::vector<double> delta_prune(const FeatureMapRecord<T>& record, std::size_t reference, const LossConfig& cfg) {
  const std::size_t C = record.channels();
  if (C < 2) return {};
  if (reference >= C)
    throw InvalidArgument("delta_prune: reference " + std::to_string(reference) + " outside " + std::to_string(C) +
                          " channels of '" + record.layer + "'");
  const Tensor<T> view = distance_view(record.output.detach(), cfg);
  const std::size_t B = view.dim(0), per_sample = view.numel() / B;
  std::vector<double> mean(C, 0.0);
  std::vector<double> sample(per_sample);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < per_sample; ++i) sample[i] = static_cast<double>(view[b * per_sample + i]);
    const auto d = normalized_reference_distances(sample, C, reference);
    for (std::size_t r = 0; r < C; ++r) mean[r] += d[r] / static_cast<double>(B);
  }
  return mean;
}

/// Epoch-level running mean of per-sample normalized distances, per layer.
class DistanceAccumulator {
 public:
  struct Entry {
    std::size_t reference = 0;
    std::size_t channels = 0;
    std::vector<double> sum;
    std::size_t samples = 0;
  };

  /// Draws the epoch's reference channel for every prunable layer, in layer order.
  template <std::floating_point T>
  void begin_epoch(const SegNet<T>& net, Rng& rng) {
    entries_.clear();
    for (std::size_t i : net.prunable_indices()) {
      const auto& l = net.layers()[i];
      Entry e;
      e.channels = l.out_channels();
      e.reference = sample_reference(e.channels, rng);
      e.sum.assign(e.channels, 0.0);
      entries_[l.name] = std::move(e);
    }
  }

  void set_reference(const std::string& layer, std::size_t reference) {
    auto& e = entry(layer);
    if (reference >= e.channels) throw InvalidArgument("set_reference: channel out of range");
    e.reference = reference;
  }

  std::size_t reference(const std::string& layer) const { return entry(layer).reference; }
  bool has(const std::string& layer) const { return entries_.count(layer) > 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  template <std::floating_point T>
  void add(const std::vector<FeatureMapRecord<T>>& records, const LossConfig& cfg) {
    for (const auto& r : records) {
      auto it = entries_.find(r.layer);
      if (it == entries_.end()) continue;
      auto& e = it->second;
      if (r.channels() != e.channels)
        throw StructureError("DistanceAccumulator: '" + r.layer + "' has " + std::to_string(r.channels()) +
                             " channels, expected " + std::to_string(e.channels));
      if (e.channels < 2) continue;
      const auto d = delta_prune(r, e.reference, cfg);
      const std::size_t B = r.output.dim(0);
      for (std::size_t c = 0; c < e.channels; ++c) e.sum[c] += d[c] * static_cast<double>(B);
      e.samples += B;
    }
  }

  /// Sums another accumulator over the same references into this one.
  void merge(const DistanceAccumulator& other) {
    for (const auto& [name, o] : other.entries_) {
      auto& e = entry(name);
      if (e.reference != o.reference || e.channels != o.channels)
        throw InvalidArgument("DistanceAccumulator::merge: mismatched reference for '" + name + "'");
      for (std::size_t c = 0; c < e.channels; ++c) e.sum[c] += o.sum[c];
      e.samples += o.samples;
    }
  }

  /// Epoch-mean distance per channel (reference slot 0); empty when nothing was accumulated.
  std::vector<double> mean(const std::string& layer) const {
    const auto& e = entry(layer);
    if (e.samples == 0) return {};
    std::vector<double> m(e.channels);
    for (std::size_t c = 0; c < e.channels; ++c) m[c] = e.sum[c] / static_cast<double>(e.samples);
    return m;
  }

 private:
  Entry& entry(const std::string& layer) {
    auto it = entries_.find(layer);
    if (it == entries_.end()) throw InvalidArgument("DistanceAccumulator: unknown layer '" + layer + "'");
    return it->second;
  }
  const Entry& entry(const std::string& layer) const {
    auto it = entries_.find(layer);
    if (it == entries_.end()) throw InvalidArgument("DistanceAccumulator: unknown layer '" + layer + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

struct PruneEvent {
  int epoch = 0;
  std::string layer;
  std::size_t reference = 0;             // original channel index
  std::vector<std::size_t> removed;      // original channel indices
  std::vector<double> distances;         // epoch-mean normalized distance of each removed channel
  double tau = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"layer", layer}, {"reference", reference},
            {"removed", removed}, {"distances", distances}, {"tau", tau}};
  }
  static PruneEvent from_json(const nlohmann::json& j) {
    PruneEvent e;
    e.epoch = j.at("epoch").get<int>();
    e.layer = j.at("layer").get<std::string>();
    e.reference = j.at("reference").get<std::size_t>();
    e.removed = j.at("removed").get<std::vector<std::size_t>>();
    e.distances = j.at("distances").get<std::vector<double>>();
    e.tau = j.at("tau").get<double>();
    return e;
  }
};

struct PruneOutcome {
  std::vector<PruneEvent> events;
  std::vector<ParameterSlice> slices;  // for the optimizer
  std::size_t removed_total = 0;
};

/// End-of-epoch threshold update and filter elimination over every prunable
/// layer. Losses for `epoch` must already be recorded in `state`. On any
/// structural error neither `net` nor `state` is modified.
template <std::floating_point T>
PruneOutcome prune_step(SegNet<T>& net, const DistanceAccumulator& distances, ThresholdState& state, int epoch) {
  SegNet<T> next = net;  // parameter tensors are replaced, not mutated, by remove_filters
  ThresholdState next_state = state;
  PruneOutcome outcome;
  try {
    for (std::size_t i : next.prunable_indices()) {
      const std::string name = next.layers()[i].name;
      const std::size_t live = next.layers()[i].out_channels();
      auto& lt = next_state.layer(name);
      if (check_conditions(next_state, name, epoch, live) && lt.tau < next_state.config().tau_max)
        increase_threshold(next_state, name, epoch);

      std::vector<std::size_t> remove;
      std::vector<double> removed_d;
      std::size_t reference = 0;
      if (live >= 2 && distances.has(name)) {
        const auto mean = distances.mean(name);
        reference = distances.reference(name);
        if (!mean.empty()) {
          if (mean.size() != live)
            throw StructureError("prune_step: distances for '" + name + "' cover " + std::to_string(mean.size()) +
                                 " channels, layer has " + std::to_string(live));
          for (std::size_t r = 0; r < live; ++r)
            if (r != reference && mean[r] <= lt.tau) remove.push_back(r);
          // Never strip a layer down to its reference while a distinct channel exists.
          if (remove.size() == live - 1) {
            std::size_t far = remove.front();
            for (std::size_t r : remove)
              if (mean[r] > mean[far]) far = r;
            if (mean[far] > 0) remove.erase(std::find(remove.begin(), remove.end(), far));
          }
          for (std::size_t r : remove) removed_d.push_back(mean[r]);
        }
      }
      lt.pruned_history.push_back(remove.size());
      lt.tau_history.push_back(lt.tau);
      if (remove.empty()) continue;

      PruneEvent ev;
      ev.epoch = epoch;
      ev.layer = name;
      ev.reference = next.layers()[i].origin[reference];
      for (std::size_t r : remove) ev.removed.push_back(next.layers()[i].origin[r]);
      ev.distances = removed_d;
      ev.tau = lt.tau;
      auto slices = next.remove_filters(name, remove);
      outcome.slices.insert(outcome.slices.end(), slices.begin(), slices.end());
      outcome.removed_total += remove.size();
      outcome.events.push_back(std::move(ev));
    }
    next.audit();
  } catch (const Error& e) {
    throw StructureError("prune_step aborted at epoch " + std::to_string(epoch) + ": " + e.what());
  }
  net = std::move(next);
  state = std::move(next_state);
  return outcome;
}

}  // namespace sauron
