#pragma once

// Training driver: per epoch, forward/backward over shuffled batches with the
// regularizer in the loss, an Adam step with polynomial decay, validation,
// then (optionally) the pruning step.
//
// Run directory:
//   config.cfg          config snapshot
//   metrics.csv         one row per epoch
//   prune_log.jsonl     one JSON object per prune event
//   maps/*.bin          per-epoch feature-map dumps (capture only)
//   checkpoints/*.ckpt  start, end, and after every pruning epoch

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sauron/checkpoint.hpp"
#include "sauron/clusterlab.hpp"
#include "sauron/config.hpp"
#include "sauron/dataset.hpp"
#include "sauron/flops.hpp"
#include "sauron/losses.hpp"
#include "sauron/metrics.hpp"
#include "sauron/optim.hpp"
#include "sauron/pruner.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0, val_loss = 0, delta_opt = 0, lr = 0;
  std::size_t live_filters = 0;
  std::uint64_t flops = 0;
  SegmentationScores val_scores;
  double seconds = 0;
  std::size_t pruned = 0;  // filters removed at this epoch's pruning step
};

struct EvalResult {
  double loss = 0;
  double delta_opt = 0;
  SegmentationScores scores;
};

struct RunResult {
  std::vector<EpochMetrics> epochs;
  std::vector<PruneEvent> events;
  std::uint64_t initial_flops = 0;
  std::uint64_t final_flops = 0;
  SegmentationScores test_scores;
  std::filesystem::path dir;
};

using Net = SegNet<double>;

/// Loss (cross-entropy + Dice + lambda * regularizer) and scores on `indices`,
/// in inference mode.
inline EvalResult evaluate(Net& net, const SyntheticDataset& ds, const std::vector<std::size_t>& indices,
                           const LossConfig& loss_cfg, std::size_t batch_size = 8) {
  if (indices.empty()) throw InvalidArgument("evaluate: empty split");
  EvalResult out;
  ScoreAccumulator acc(ds.classes, ds.height, ds.width);
  const std::size_t hw = ds.height * ds.width;
  double loss_sum = 0, dopt_sum = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    std::span<const std::size_t> idx(indices.data() + start, end - start);
    auto [x, y] = ds.batch<double>(idx);
    auto fr = net.forward(x, true, false);
    const auto probs = softmax_channels(fr.logits);
    const double ce = cross_entropy(fr.logits, std::span<const int>(y)).item();
    const double dice = dice_loss(probs, one_hot<double>(y, idx.size(), ds.classes, ds.height, ds.width)).item();
    const double dopt = fr.records.empty() ? 0.0 : delta_opt(fr.records, loss_cfg).item();
    const double n = static_cast<double>(idx.size());
    loss_sum += (ce + dice + loss_cfg.lambda * dopt) * n;
    dopt_sum += dopt * n;
    const auto pred = argmax_labels(fr.logits);
    for (std::size_t b = 0; b < idx.size(); ++b)
      acc.add_image(std::span<const int>(pred).subspan(b * hw, hw), std::span<const int>(y).subspan(b * hw, hw));
  }
  out.loss = loss_sum / static_cast<double>(indices.size());
  out.delta_opt = dopt_sum / static_cast<double>(indices.size());
  out.scores = acc.result();
  return out;
}

namespace detail {

inline std::string metrics_header(std::size_t classes) {
  std::string h = "epoch,train_loss,val_loss,delta_opt,lr,live_filters_total,flops";
  for (std::size_t c = 1; c < classes; ++c) h += ",dice_class" + std::to_string(c);
  for (std::size_t c = 1; c < classes; ++c) h += ",hd95_class" + std::to_string(c);
  return h + ",seconds";
}

inline std::string metrics_row(const EpochMetrics& m) {
  std::ostringstream os;
  os.precision(10);
  os << m.epoch << ',' << m.train_loss << ',' << m.val_loss << ',' << m.delta_opt << ',' << m.lr << ','
     << m.live_filters << ',' << m.flops;
  for (double d : m.val_scores.dice) os << ',' << d;
  for (double d : m.val_scores.hd95) os << ',' << d;
  os << ',' << std::setprecision(4) << m.seconds;
  return os.str();
}

inline void dump_maps(Net& net, const SyntheticDataset& ds, const std::vector<std::size_t>& probe,
                      const LossConfig& loss_cfg, int epoch, const std::filesystem::path& dir) {
  auto [x, y] = ds.batch<double>(probe);
  auto fr = net.forward(x, true, false);
  for (auto& r : fr.records) {
    r.epoch = epoch;
    std::ostringstream name;
    name << 'e' << std::setw(4) << std::setfill('0') << epoch << "_l" << std::setw(2) << r.layer_index << '_'
         << r.layer << ".bin";
    write_channel_vectors(dir / name.str(), channel_vectors(r, loss_cfg));
  }
}

}  // namespace detail

struct RunOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::function<void(const EpochMetrics&)> on_epoch;
  bool save_checkpoints = true;
};

inline RunResult run_training(const TrainConfig& cfg, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  cfg.validate();
  const LossConfig loss_cfg = cfg.loss();
  const SyntheticDataset ds =
      gen_synthetic(cfg.data_seed, cfg.dataset_size, cfg.image_height, cfg.image_width, cfg.num_classes);
  Net net = build_unet<double>(cfg.levels, cfg.init_filters, 1, cfg.num_classes, cfg.norm, cfg.seed);
  Adam<double> opt(AdamOptions{0.9, 0.999, 1e-8, cfg.weight_decay, false});
  ThresholdState state(cfg.pruner());
  Rng order_rng = Rng::stream(cfg.seed, 0x0DE5);
  Rng ref_rng = Rng::stream(cfg.seed, 0x5E1F);
  Rng flip_rng = Rng::stream(cfg.seed, 0xF11B);

  RunResult result;
  const bool files = !opts.out_dir.empty();
  std::ofstream metrics, prune_log;
  std::vector<std::size_t> probe(ds.val.begin(), ds.val.begin() + static_cast<long>(std::min(cfg.probe_images, ds.val.size())));
  if (files) {
    result.dir = opts.out_dir;
    fs::create_directories(opts.out_dir / "checkpoints");
    std::ofstream(opts.out_dir / "config.cfg") << cfg.to_text();
    metrics.open(opts.out_dir / "metrics.csv");
    prune_log.open(opts.out_dir / "prune_log.jsonl");
    if (!metrics || !prune_log) throw Error("cannot create run files in " + opts.out_dir.string());
    metrics << detail::metrics_header(cfg.num_classes) << '\n';
    if (opts.save_checkpoints) save_checkpoint(net, opts.out_dir / "checkpoints" / "start.ckpt");
    if (cfg.capture_feature_maps && !probe.empty()) {
      fs::create_directories(opts.out_dir / "maps");
      detail::dump_maps(net, ds, probe, loss_cfg, 0, opts.out_dir / "maps");
    }
  }
  result.initial_flops = count_flops(net, cfg.image_height, cfg.image_width).total;

  const double lambda = cfg.lambda;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const int epoch = static_cast<int>(e);
    const auto t0 = clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = poly_lr(static_cast<double>(e - 1), static_cast<double>(cfg.epochs), cfg.lr0);

    std::vector<std::size_t> order = ds.train;
    order_rng.shuffle(order);
    DistanceAccumulator acc;
    if (cfg.pruning_enabled) acc.begin_epoch(net, ref_rng);

    double loss_sum = 0, dopt_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const bool flip = cfg.flip && flip_rng.uniform() < 0.5;
      auto [x, y] = ds.batch<double>(idx, flip);
      auto fr = net.forward(x, true, true);
      const auto probs = softmax_channels(fr.logits);
      const auto ce = cross_entropy(fr.logits, std::span<const int>(y));
      const auto dice = dice_loss(probs, one_hot<double>(y, idx.size(), ds.classes, ds.height, ds.width));
      Tensor<double> dopt;
      if (lambda > 0) {
        dopt = delta_opt(fr.records, loss_cfg);
      } else {
        std::vector<FeatureMapRecord<double>> detached = fr.records;
        for (auto& r : detached) r.output = r.output.detach();
        dopt = delta_opt(detached, loss_cfg);
      }
      Tensor<double> loss;
      try {
        loss = total_loss(ce, dice, lambda > 0 ? dopt : Tensor<double>(), lambda);
      } catch (const NumericError&) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      backward(loss);
      try {
        opt.step(net.parameters(), m.lr);
      } catch (const NumericError& err) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) + ": " + err.what());
      }
      if (cfg.pruning_enabled) acc.add(fr.records, loss_cfg);
      const double n = static_cast<double>(idx.size());
      loss_sum += loss.item() * n;
      dopt_sum += dopt.item() * n;
    }
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.delta_opt = dopt_sum / static_cast<double>(order.size());

    const EvalResult val = evaluate(net, ds, ds.val, loss_cfg, cfg.batch_size);
    m.val_loss = val.loss;
    m.val_scores = val.scores;
    state.record_losses(m.train_loss, m.val_loss);

    if (cfg.pruning_enabled) {
      auto outcome = prune_step(net, acc, state, epoch);
      opt.apply_slices(outcome.slices);
      m.pruned = outcome.removed_total;
      for (auto& ev : outcome.events) {
        if (files) prune_log << ev.to_json().dump() << '\n';
        result.events.push_back(std::move(ev));
      }
      if (files && opts.save_checkpoints && outcome.removed_total > 0)
        save_checkpoint(net, opts.out_dir / "checkpoints" / ("epoch_" + std::to_string(epoch) + ".ckpt"));
    }
    m.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    m.live_filters = net.live_filters();
    m.flops = count_flops(net, cfg.image_height, cfg.image_width).total;

    if (files) {
      if (cfg.capture_feature_maps && !probe.empty())
        detail::dump_maps(net, ds, probe, loss_cfg, epoch, opts.out_dir / "maps");
      metrics << detail::metrics_row(m) << '\n' << std::flush;
      prune_log << std::flush;
    }
    if (opts.on_epoch) opts.on_epoch(m);
    result.epochs.push_back(std::move(m));
  }

  result.final_flops = count_flops(net, cfg.image_height, cfg.image_width).total;
  result.test_scores = evaluate(net, ds, ds.test, loss_cfg, cfg.batch_size).scores;
  if (files && opts.save_checkpoints) save_checkpoint(net, opts.out_dir / "checkpoints" / "final.ckpt");
  return result;
}

}  // namespace sauron
