#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sauron/sauron.hpp"
#include "support/gradcheck.hpp"

using namespace sauron;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sauron_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<int> square(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t side, int cls = 1) {
  std::vector<int> m(h * w, 0);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m[y * w + x] = cls;
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.levels = 2;
  c.init_filters = 4;
  c.dataset_size = 20;
  c.image_height = 16;
  c.image_width = 16;
  c.lr0 = 3e-3;
  c.probe_images = 2;
  return c;
}

}  // namespace

TEST(Dataset, DeterministicAndSeedSensitive) {
  auto a = gen_synthetic(3, 30, 32, 32);
  auto b = gen_synthetic(3, 30, 32, 32);
  auto c = gen_synthetic(4, 30, 32, 32);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.train, b.train);
  EXPECT_NE(a.images, c.images);
}

TEST(Dataset, StandardizedImages) {
  auto ds = gen_synthetic(1, 40, 32, 32);
  for (const auto& img : ds.images) {
    double mu = 0, var = 0;
    for (double v : img) mu += v / img.size();
    for (double v : img) var += (v - mu) * (v - mu) / img.size();
    EXPECT_NEAR(mu, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Dataset, ForegroundFractionAndClasses) {
  auto ds = gen_synthetic(2, 200, 32, 32);
  bool saw_ring = false, saw_blob = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double f = ds.foreground_fraction(i);
    EXPECT_GE(f, 0.02);
    EXPECT_LE(f, 0.40);
    for (int l : ds.labels[i]) {
      saw_blob |= l == 1;
      saw_ring |= l == 2;
    }
  }
  EXPECT_TRUE(saw_blob && saw_ring);
}

TEST(Dataset, SplitsAreDisjointAndCover) {
  auto ds = gen_synthetic(0, 200, 32, 32);
  EXPECT_EQ(ds.train.size(), 144u);
  EXPECT_EQ(ds.val.size(), 16u);
  EXPECT_EQ(ds.test.size(), 40u);
  std::vector<std::size_t> all;
  for (const auto* s : {&ds.train, &ds.val, &ds.test}) all.insert(all.end(), s->begin(), s->end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
}

TEST(Dataset, Errors) {
  EXPECT_THROW(gen_synthetic(0, 9, 32, 32), InvalidArgument);
  EXPECT_THROW(gen_synthetic(0, 20, 32, 32, 4), InvalidArgument);
}

TEST(Dataset, FlippedBatchMirrorsColumns) {
  auto ds = gen_synthetic(0, 10, 16, 16);
  std::vector<std::size_t> idx{3};
  auto [x, y] = ds.batch<double>(idx, false);
  auto [xf, yf] = ds.batch<double>(idx, true);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      EXPECT_EQ(x[r * 16 + c], xf[r * 16 + 15 - c]);
      EXPECT_EQ(y[r * 16 + c], yf[r * 16 + 15 - c]);
    }
}

TEST(Config, ParseOverridesAndComments) {
  auto c = parse_config("# comment\nepochs = 12\nlambda=0.25  \n\ndelta_norm_mode = none\nnorm = batch\n");
  EXPECT_EQ(c.epochs, 12u);
  EXPECT_EQ(c.lambda, 0.25);
  EXPECT_EQ(c.delta_norm_mode, DeltaNormMode::none);
  EXPECT_EQ(c.norm, NormKind::batch);
  EXPECT_EQ(c.kappa, 15u);
}

TEST(Config, UnknownKeyAndBadValuesAreErrors) {
  EXPECT_THROW(parse_config("epochz = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs = three\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs 3\n"), ConfigError);
  EXPECT_THROW(parse_config("image_height = 30\n"), ConfigError);
  try {
    parse_config("epochs = 3\nbogus = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Config, TextRoundTrip) {
  TrainConfig c;
  c.lambda = 0.1 + 0.2;
  c.seed = 99;
  c.pruning_enabled = false;
  c.delta_norm_mode = DeltaNormMode::divide_by_max_distance;
  EXPECT_EQ(parse_config(c.to_text()).to_text(), c.to_text());
}

TEST(Config, ShippedToyConfigMatchesDefaults) {
  auto c = load_config(fs::path(SAURON_SOURCE_DIR) / "configs" / "toy.cfg");
  EXPECT_EQ(c.to_text(), TrainConfig{}.to_text());
}

TEST(Metrics, PerfectPrediction) {
  auto m = square(32, 32, 8, 8, 12);
  EXPECT_EQ(dice_score(m, m, 1), 1.0);
  EXPECT_EQ(hd95(m, m, 1, 32, 32), 0.0);
}

TEST(Metrics, OnePixelShiftGivesHd95One) {
  auto truth = square(40, 40, 10, 10, 16);
  auto pred = square(40, 40, 10, 11, 16);
  EXPECT_DOUBLE_EQ(hd95(pred, truth, 1, 40, 40), 1.0);
  EXPECT_NEAR(dice_score(pred, truth, 1), 2.0 * 15 / 32, 1e-15);
}

TEST(Metrics, EmptyCases) {
  auto truth = square(16, 16, 4, 4, 4);
  std::vector<int> empty(256, 0);
  EXPECT_EQ(dice_score(empty, truth, 1), 0.0);
  EXPECT_EQ(dice_score(empty, empty, 1), 1.0);
  EXPECT_EQ(hd95(empty, empty, 1, 16, 16), 0.0);
  EXPECT_DOUBLE_EQ(hd95(empty, truth, 1, 16, 16), std::hypot(16.0, 16.0));
}

TEST(Metrics, AccumulatorAveragesImages) {
  ScoreAccumulator acc(3, 16, 16);
  auto a = square(16, 16, 2, 2, 5, 1);
  acc.add_image(a, a);
  std::vector<int> empty(256, 0);
  acc.add_image(empty, a);
  auto s = acc.result();
  EXPECT_DOUBLE_EQ(s.dice[0], 0.5);
  EXPECT_DOUBLE_EQ(s.dice[1], 1.0);  // class 2 absent everywhere
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const auto dir = temp_dir("ckpt");
  for (bool pruned : {false, true}) {
    auto net = build_unet<double>(3, 8, 1, 3, NormKind::batch, 4);
    testing_support::Rng rng(1);
    auto x = testing_support::random_parameter({2, 1, 16, 16}, rng).detach();
    net.forward(x, false, true);  // populate running statistics
    if (pruned) {
      net.remove_filters("enc_conv_2", {0, 3});
      net.remove_filters("dec_trans_1", {5});
    }
    save_checkpoint(net, dir / "n.ckpt");
    auto back = load_checkpoint<double>(dir / "n.ckpt");
    auto a = net.forward(x, false, false).logits;
    auto b = back.forward(x, false, false).logits;
    ASSERT_EQ(a.numel(), b.numel());
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)), 0);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
      EXPECT_EQ(back.layers()[i].weight.shape(), net.layers()[i].weight.shape());
      EXPECT_EQ(back.layers()[i].origin, net.layers()[i].origin);
    }
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(net));
  }
}

TEST(Checkpoint, PrunedShapesReported) {
  auto net = build_unet<double>(3, 8, 1, 3, NormKind::instance, 0);
  net.remove_filters("enc_conv_2", {1, 2});
  auto back = deserialize_checkpoint<double>(serialize_checkpoint(net));
  EXPECT_EQ(back.layer("enc_conv_2").out_channels(), 6u);
  EXPECT_EQ(back.layer("enc_conv_3").in_channels(), 6u);
  EXPECT_EQ(back.layer("dec_conv_3").in_channels(), 14u);
}

TEST(Checkpoint, CorruptionIsRejected) {
  auto net = build_unet<double>(2, 4, 1, 2, NormKind::instance, 0);
  const std::string good = serialize_checkpoint(net);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<double>(bad_magic), CheckpointError);
  std::string flipped = good;
  flipped[30] ^= 0x20;
  EXPECT_THROW(deserialize_checkpoint<double>(flipped), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint<double>(good.substr(0, good.size() / 2)), CheckpointError);
  std::string version = good;
  version[8] = 9;  // version field follows the 8-byte magic
  EXPECT_THROW(deserialize_checkpoint<double>(version), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>("/nonexistent/x.ckpt"), CheckpointError);
}

TEST(Training, ShortRunWritesArtifactsDeterministically) {
  auto cfg = tiny_config();
  cfg.capture_feature_maps = true;
  const auto d1 = temp_dir("run1"), d2 = temp_dir("run2");
  RunOptions o1, o2;
  o1.out_dir = d1;
  o2.out_dir = d2;
  auto r1 = run_training(cfg, o1);
  auto r2 = run_training(cfg, o2);
  ASSERT_EQ(r1.epochs.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(r1.epochs[e].train_loss, r2.epochs[e].train_loss);
    EXPECT_EQ(r1.epochs[e].val_loss, r2.epochs[e].val_loss);
  }
  EXPECT_EQ(slurp(d1 / "prune_log.jsonl"), slurp(d2 / "prune_log.jsonl"));
  EXPECT_EQ(slurp(d1 / "checkpoints" / "final.ckpt"), slurp(d2 / "checkpoints" / "final.ckpt"));
  for (const char* f : {"config.cfg", "metrics.csv", "checkpoints/start.ckpt"}) EXPECT_TRUE(fs::exists(d1 / f)) << f;

  std::ifstream m(d1 / "metrics.csv");
  std::string header, line;
  std::getline(m, header);
  EXPECT_EQ(header,
            "epoch,train_loss,val_loss,delta_opt,lr,live_filters_total,flops,dice_class1,dice_class2,hd95_class1,"
            "hd95_class2,seconds");
  std::size_t rows = 0;
  while (std::getline(m, line)) ++rows;
  EXPECT_EQ(rows, 3u);

  auto rep = write_clusterability(d1);
  EXPECT_EQ(rep.rows.size(), 4u * 7u);  // initial state + 3 epochs, 7 prunable layers
  auto run = write_run_report(d1);
  EXPECT_EQ(run.flops_before, r1.initial_flops);
  EXPECT_TRUE(fs::exists(d1 / "report" / "flops.csv"));
}

TEST(Training, NoPruneNoRegularizerHasNoEvents) {
  auto cfg = tiny_config();
  cfg.lambda = 0.0;
  cfg.pruning_enabled = false;
  auto r = run_training(cfg);
  EXPECT_TRUE(r.events.empty());
  EXPECT_EQ(r.initial_flops, r.final_flops);
  EXPECT_GT(r.epochs.back().delta_opt, 0.0);  // still reported
}

TEST(Training, LambdaOnlyChangesTheLoss) {
  // Same data order and initialization: the first training batch sees the same
  // weights, so epoch-1 differences come only from the regularizer.
  auto a = tiny_config();
  a.epochs = 1;
  a.pruning_enabled = false;
  auto b = a;
  b.lambda = 0.0;
  auto ra = run_training(a), rb = run_training(b);
  EXPECT_NE(ra.epochs[0].train_loss, rb.epochs[0].train_loss);
  EXPECT_EQ(ra.initial_flops, rb.initial_flops);
}
