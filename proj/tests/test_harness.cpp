// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "sgdll/errors.hpp"
#include "sgdll/harness.hpp"

namespace fs = std::filesystem;
using namespace sgdll;

namespace {

RunConfig tiny(OptimizerKind kind, double lr) {
  RunConfig c;
  c.model.kind = ModelKind::transformer;
  c.model.vocab = 32;
  c.model.width = 16;
  c.model.depth = 1;
  c.model.heads = 2;
  c.model.seq_len = 16;
  c.data.gen.vocab = 32;
  c.data.gen.length = 20000;
  c.optim.kind = kind;
  c.optim.lr = lr;
  c.optim.tau = 1e-2;
  c.optim.delta = 1e-1;
  c.train.steps = 30;
  c.train.batch = 4;
  c.train.eval_count = 2;
  c.train.eval_windows = 8;
  c.train.token_stats_every = 10;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sgdll_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Config, RoundTripIsCanonical) {
  auto c = tiny(OptimizerKind::sgdll, 3.0);
  c.sweep.lr_by_optimizer[OptimizerKind::sgd] = {0.1, 0.5};
  c.sweep.optimizer = {OptimizerKind::sgd, OptimizerKind::adam};
  c.sweep.batch = {8, 64};
  c.sweep.seed = {1, 2};
  c.theory.scaling_B = {4, 16, 64, 256};
  const std::string text = to_ini(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(to_ini(back), text);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.optim.kind, OptimizerKind::sgdll);
  EXPECT_EQ(back.sweep.lr_by_optimizer.at(OptimizerKind::sgd), (std::vector<double>{0.1, 0.5}));
}

TEST(Config, HashChangesWithContent) {
  auto a = tiny(OptimizerKind::sgd, 0.1);
  auto b = a;
  b.optim.lr = 0.2;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, UnknownKeysAndSectionsRejected) {
  EXPECT_THROW(parse_config("[model]\nvocabb = 32\n"), ConfigError);
  EXPECT_THROW(parse_config("[modle]\nvocab = 32\n"), ConfigError);
  EXPECT_THROW(parse_config("[optim]\nlr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nprecision = half\n"), ConfigError);
}

TEST(Config, MissingPathRejected) {
  EXPECT_THROW(parse_config("[data]\ncorpus_path = /nonexistent/corpus.bin\n"), ConfigError);
}

TEST(Config, EmptyBatchGridRejected) {
  EXPECT_THROW(parse_config("[theory]\nscaling_B =\n"), ConfigError);
  EXPECT_THROW(parse_config("[theory]\nscaling_B = 8,32,128\n"), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesModelAtInit) {
  auto c = tiny(OptimizerKind::sgd, 0.0);
  const auto r = train_run(c, 3, {});
  EXPECT_FALSE(r.summary.diverged);
  EXPECT_EQ(r.summary.distance_from_init, 0.0);
  EXPECT_EQ(r.summary.steps_completed, 30);
  // same weights, different batches: only sampling noise
  const double mean = std::accumulate(r.loss.begin(), r.loss.end(), 0.0) / static_cast<double>(r.loss.size());
  EXPECT_NEAR(mean, r.summary.initial_loss, 0.05 * r.summary.initial_loss);
  EXPECT_NEAR(r.summary.initial_loss, std::log(32.0), 0.1);
}

TEST(Train, RerunIsByteIdentical) {
  auto c = tiny(OptimizerKind::sgdll, 3.0);
  const auto a = scratch("det_a"), b = scratch("det_b");
  train_run(c, 7, a);
  train_run(c, 7, b);
  for (const char* f : {"metrics.csv", "token_stats.csv", "config.ini"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto sa = read_summary_json(a / "summary.json");
  EXPECT_EQ(sa.config_hash, config_hash(c));
}

TEST(Train, DifferentSeedsDiffer) {
  auto c = tiny(OptimizerKind::adam, 1e-2);
  const auto a = train_run(c, 1, {});
  const auto b = train_run(c, 2, {});
  EXPECT_NE(a.loss, b.loss);
}

TEST(Train, HugeLearningRateDiverges) {
  auto c = tiny(OptimizerKind::sgd, 1e6);
  const auto dir = scratch("diverge");
  const auto r = train_run(c, 1, dir);
  EXPECT_TRUE(r.summary.diverged);
  EXPECT_GE(r.summary.divergence_step, 0);
  EXPECT_FALSE(r.summary.divergence_reason.empty());
  EXPECT_LT(r.summary.steps_completed, 30);
  // every logged row is complete
  std::ifstream in(dir / "metrics.csv");
  std::string header, line;
  std::getline(in, header);
  const auto cols = std::count(header.begin(), header.end(), ',');
  long rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), cols);
    ++rows;
  }
  EXPECT_GT(rows, 0);
  EXPECT_TRUE(read_summary_json(dir / "summary.json").diverged);
}

TEST(Train, SgdLlRespectsClipContracts) {
  auto c = tiny(OptimizerKind::sgdll, 50.0);
  const auto r = train_run(c, 1, {});
  ASSERT_FALSE(r.summary.diverged);
  EXPECT_LE(r.max_update_rms_over_tau, 1.0 + 1e-6);
  EXPECT_LE(r.max_clipped_row_norm, c.optim.delta * (1.0 + 1e-6));
}

TEST(Sweep, CrossProductWithPerOptimizerGrid) {
  auto c = tiny(OptimizerKind::adam, 1e-3);
  c.sweep.optimizer = {OptimizerKind::adam, OptimizerKind::sgd};
  c.sweep.lr = {1e-3};
  c.sweep.lr_by_optimizer[OptimizerKind::sgd] = {0.1, 0.3};
  c.sweep.seed = {1};
  const auto cells = sweep_cells(c);
  ASSERT_EQ(cells.size(), 3u);
  EXPECT_EQ(cells[0].cfg.optim.kind, OptimizerKind::adam);
  EXPECT_DOUBLE_EQ(cells[2].cfg.optim.lr, 0.3);
  EXPECT_NE(cells[1].name, cells[2].name);
}

TEST(Sweep, WritesOneRowPerCellAndContinuesPastDivergence) {
  auto c = tiny(OptimizerKind::sgd, 0.1);
  c.train.steps = 10;
  c.sweep.lr = {0.1, 1e6};
  c.sweep.seed = {1};
  const auto dir = scratch("sweep");
  const auto rows = run_sweep(c, dir, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].diverged);
  EXPECT_TRUE(rows[1].diverged);
  std::ifstream in(dir / "sweep.csv");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 3);
}

TEST(Ablation, NeitherArmIsMomentumSgd) {
  auto c = tiny(OptimizerKind::sgdll, 0.5);
  c.train.steps = 15;
  const auto arms = run_ablation(c, scratch("ablate"), 1);
  ASSERT_EQ(arms.size(), 4u);
  EXPECT_EQ(arms[3].name, "neither");
  EXPECT_TRUE(std::isinf(arms[3].tau));
  EXPECT_TRUE(std::isinf(arms[3].delta));

  auto m = c;
  m.optim.kind = OptimizerKind::msgd;
  const auto a = train_run(m, c.train.seeds.front(), {});
  auto n = c;
  n.optim.tau = n.optim.delta = std::numeric_limits<double>::infinity();
  const auto b = train_run(n, c.train.seeds.front(), {});
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.summary.distance_from_init, b.summary.distance_from_init);
  EXPECT_EQ(arms[3].summary.final_loss, b.summary.final_loss);
}

TEST(Report, TableOneAnchor) {
  auto row = [](const char* opt, double loss) {
    ReportRow r;
    r.dir = opt;
    r.present = true;
    r.summary.optimizer = opt;
    r.summary.val_loss = loss;
    r.summary.final_loss = loss;
    return r;
  };
  const auto rows = make_report({row("adam", 3.11), row("sgd", 5.07), row("sgdll", 3.24)});
  EXPECT_NEAR(rows[0].gap_to_adam, 0.0, 1e-15);
  EXPECT_NEAR(rows[1].gap_to_adam, 0.63, 0.005);
  EXPECT_NEAR(rows[2].gap_to_adam, 0.042, 0.0005);
  for (const auto& r : rows) EXPECT_NEAR(r.perplexity, std::exp(r.summary.val_loss), 1e-12 * r.perplexity);
  const std::string text = render_report(rows);
  EXPECT_NE(text.find("sgdll"), std::string::npos);
}

TEST(Report, NoAdamRowMeansNoGap) {
  ReportRow r;
  r.present = true;
  r.summary.optimizer = "sgd";
  r.summary.val_loss = 4.0;
  EXPECT_TRUE(std::isnan(make_report({r})[0].gap_to_adam));
}

TEST(Report, MissingDirectoryListedAsAbsent) {
  auto c = tiny(OptimizerKind::adam, 1e-2);
  c.train.steps = 5;
  const auto dir = scratch("report_run");
  train_run(c, 1, dir);
  const auto rows = load_report({dir, scratch("report_missing")});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].present);
  EXPECT_FALSE(rows[1].present);
  EXPECT_NE(render_report(rows).find("absent"), std::string::npos);
  const auto out = scratch("report_out");
  fs::create_directories(out);
  write_report_csv(out / "report.csv", rows);
  EXPECT_TRUE(fs::exists(out / "report.csv"));
}

TEST(Summary, JsonRoundTripKeepsNonFinite) {
  RunSummary s;
  s.optimizer = "sgd";
  s.lr = 0.5;
  s.val_loss = std::numeric_limits<double>::quiet_NaN();
  s.final_loss = std::numeric_limits<double>::infinity();
  s.diverged = true;
  s.divergence_step = 12;
  const auto p = scratch("summary");
  fs::create_directories(p);
  write_summary_json(p / "summary.json", s);
  const auto b = read_summary_json(p / "summary.json");
  EXPECT_EQ(b.optimizer, "sgd");
  EXPECT_TRUE(std::isnan(b.val_loss));
  EXPECT_TRUE(b.diverged);
  EXPECT_EQ(b.divergence_step, 12);
}
