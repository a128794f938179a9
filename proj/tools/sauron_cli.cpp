// Command-line front end: train, analyze, report.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "sauron/sauron.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Filter pruning of a small U-Net on synthetic data"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train (and prune) a network");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  bool no_prune = false, capture = false, quiet = false;
  train->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_option("--seed", seed, "override the seed");
  train->add_option("--lambda", lambda, "override lambda");
  train->add_flag("--no-prune", no_prune, "disable the pruning step");
  train->add_flag("--capture-maps", capture, "dump per-epoch feature maps");
  train->add_flag("--quiet", quiet, "no per-epoch output");

  auto* analyze = app.add_subcommand("analyze", "clusterability report over dumped feature maps");
  std::string run_dir;
  bool dip_max = false;
  analyze->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_flag("--dip-max", dip_max, "aggregate channel dips with max instead of mean");

  auto* report = app.add_subcommand("report", "FLOPs, scores and prune timeline of a run");
  report->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      auto cfg = sauron::load_config(config_path);
      if (seed) cfg.seed = *seed;
      if (lambda) cfg.lambda = *lambda;
      if (no_prune) cfg.pruning_enabled = false;
      if (capture) cfg.capture_feature_maps = true;
      sauron::RunOptions opts;
      opts.out_dir = out_dir;
      if (!quiet)
        opts.on_epoch = [](const sauron::EpochMetrics& m) {
          std::printf("epoch %3d  train %.4f  val %.4f  dopt %.4f  dice %.3f  filters %4zu  flops %10llu  %.2fs\n", m.epoch,
                      m.train_loss, m.val_loss, m.delta_opt, m.val_scores.mean_dice(), m.live_filters,
                      static_cast<unsigned long long>(m.flops), m.seconds);
          std::fflush(stdout);
        };
      const auto res = sauron::run_training(cfg, opts);
      const auto red = sauron::flops_reduction(res.initial_flops, res.final_flops);
      std::printf("test mean dice %.4f  flops reduction %.2f%%\n", res.test_scores.mean_dice(), red.percent);
    } else if (*analyze) {
      const auto rep = sauron::write_clusterability(run_dir, dip_max ? sauron::DipAggregate::max : sauron::DipAggregate::mean);
      std::printf("%zu rows, %zu layers; dip increase fraction %.3f\n", rep.rows.size(), rep.trends.size(),
                  rep.increase_fraction());
    } else if (*report) {
      const auto rep = sauron::write_run_report(run_dir);
      std::printf("flops %llu -> %llu (%.2f%% reduction)  test mean dice %.4f  prune events %zu\n",
                  static_cast<unsigned long long>(rep.flops_before), static_cast<unsigned long long>(rep.flops_after),
                  rep.reduction.percent, rep.test_scores.mean_dice(), rep.events.size());
    }
  } catch (const sauron::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
