#pragma once

// Post-run summaries from a run directory: per-layer FLOPs before/after,
// test-split Dice/HD95 of the final network, and the prune timeline.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sauron/trainer.hpp"

namespace sauron {

struct RunReport {
  std::uint64_t flops_before = 0, flops_after = 0;
  FlopsReduction reduction;
  SegmentationScores test_scores;
  std::vector<PruneEvent> events;
};

inline std::vector<PruneEvent> read_prune_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::vector<PruneEvent> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(PruneEvent::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Writes report/flops.csv, report/scores.csv and report/prune_timeline.csv.
inline RunReport write_run_report(const std::filesystem::path& run) {
  namespace fs = std::filesystem;
  const TrainConfig cfg = load_config(run / "config.cfg");
  Net start = load_checkpoint<double>(run / "checkpoints" / "start.ckpt");
  Net final_net = load_checkpoint<double>(run / "checkpoints" / "final.ckpt");
  const auto before = count_flops(start, cfg.image_height, cfg.image_width);
  const auto after = count_flops(final_net, cfg.image_height, cfg.image_width);

  RunReport rep;
  rep.flops_before = before.total;
  rep.flops_after = after.total;
  rep.reduction = flops_reduction(before.total, after.total);
  const auto ds = gen_synthetic(cfg.data_seed, cfg.dataset_size, cfg.image_height, cfg.image_width, cfg.num_classes);
  rep.test_scores = evaluate(final_net, ds, ds.test, cfg.loss(), cfg.batch_size).scores;
  rep.events = read_prune_log(run / "prune_log.jsonl");

  fs::create_directories(run / "report");
  {
    std::ofstream os(run / "report" / "flops.csv");
    os << "layer,in_before,out_before,in_after,out_after,flops_before,flops_after\n";
    for (std::size_t i = 0; i < before.layers.size(); ++i) {
      const auto& b = before.layers[i];
      const auto& a = after.layers[i];
      os << b.name << ',' << b.in_channels << ',' << b.out_channels << ',' << a.in_channels << ',' << a.out_channels
         << ',' << b.flops << ',' << a.flops << '\n';
    }
    os.precision(6);
    os << "total,,,,," << before.total << ',' << after.total << '\n';
    os << "reduction_percent,,,,,," << rep.reduction.percent << '\n';
  }
  {
    std::ofstream os(run / "report" / "scores.csv");
    os << "class,dice,hd95\n";
    for (std::size_t c = 0; c < rep.test_scores.dice.size(); ++c)
      os << c + 1 << ',' << rep.test_scores.dice[c] << ',' << rep.test_scores.hd95[c] << '\n';
    os << "mean," << rep.test_scores.mean_dice() << ",\n";
  }
  {
    std::ofstream os(run / "report" / "prune_timeline.csv");
    os << "epoch,layer,removed,tau,reference\n";
    for (const auto& e : rep.events)
      os << e.epoch << ',' << e.layer << ',' << e.removed.size() << ',' << e.tau << ',' << e.reference << '\n';
  }
  return rep;
}

/// Runs the clusterability analysis over run/maps and writes
/// run/clusterability.csv and run/trends.csv.
inline ClusterabilityReport write_clusterability(const std::filesystem::path& run, DipAggregate agg = DipAggregate::mean) {
  auto rep = analyze_dumps(run / "maps", agg);
  rep.write_csv(run / "clusterability.csv", run / "trends.csv");
  return rep;
}

}  // namespace sauron
