// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sgdll/theory.hpp"

using namespace sgdll;

namespace {

WorldSpec spec(int V, int d, std::uint64_t seed) {
  WorldSpec s;
  s.vocab = V;
  s.dim = d;
  s.seed = seed;
  s.fit_samples = 20000;
  return s;
}

TermSampling quick() { return {20000, 2000}; }

}  // namespace

TEST(World, ZipfRatioAndNormalization) {
  auto s = spec(64, 4, 1);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  EXPECT_NEAR(w.q()[0] / w.q()[63], 147.0333894396205, 1e-9);
  double z = 0;
  for (double x : w.q()) z += x;
  EXPECT_NEAR(z, 1.0, 1e-12);
  Rng rng(2);
  Tensor2d h;
  std::vector<int> y;
  w.sample(1000, rng, h, y);
  const Tensor2d post = w.posterior(h);
  for (Eigen::Index i = 0; i < post.rows(); ++i) EXPECT_NEAR(post.row(i).sum(), 1.0, 1e-10);
}

TEST(World, NearZeroExponentIsUniform) {
  auto s = spec(16, 2, 1);
  s.zipf_s = 1e-12;
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  for (double x : w.q()) EXPECT_NEAR(x, 1.0 / 16, 1e-12);
}

TEST(World, CalibratedBayesStudentEqualsPosterior) {
  auto s = spec(32, 6, 3);
  s.means = MeanMode::calibrated;
  s.student = StudentMode::bayes;
  const auto w = SyntheticWorld::make(s);
  Rng rng(4);
  Tensor2d h;
  std::vector<int> y;
  w.sample(500, rng, h, y);
  EXPECT_LT((w.probs(h, LayerKind::output) - w.posterior(h)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(World, RejectsBadSpecs) {
  auto s = spec(3, 4, 1);
  EXPECT_THROW(SyntheticWorld::make(s), ConfigError);
  s = spec(8, 4, 1);
  s.student = StudentMode::bayes;
  EXPECT_THROW(SyntheticWorld::make(s), ConfigError);
}

TEST(Partition, Examples) {
  const std::vector<double> uni(10, 0.1);
  const auto t = partition_tokens(uni, PartitionMode::threshold, 0.05);
  EXPECT_TRUE(t.tail.empty());
  EXPECT_EQ(t.head.size(), 10u);
  EXPECT_EQ(t.c_q, 0.0);
  EXPECT_EQ(partition_tokens(uni, PartitionMode::quantile, 0.8).tail.size(), 2u);
  const auto all_tail = partition_tokens(uni, PartitionMode::quantile, 0.0);
  EXPECT_EQ(all_tail.tail.size(), 10u);

  auto s = spec(64, 2, 1);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  const auto p = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
  EXPECT_EQ(p.head.size(), 51u);
  EXPECT_NEAR(p.c_q, 0.0025523968983235524, 1e-15);
  const auto th = partition_tokens(w.q(), PartitionMode::threshold, 0.01);
  for (int j : th.tail) EXPECT_LT(w.q()[j], 0.01);
  for (int j : th.head) EXPECT_GE(w.q()[j], 0.01);
}

// E||G||^2 at B = 1 by enumerating both labels and integrating over h on a grid.
TEST(Lhs, TwoClassQuadrature) {
  const double a = 1.2;
  Tensor2d mu(2, 2), ws(2, 2);
  mu << a, 0, -a, 0;
  ws << 0.8, 0.3, -0.5, 0.1;
  const auto w = SyntheticWorld::custom({0.5, 0.5}, mu, 1.0, ws);

  const double lim = 12.0, step = 0.04;
  const int n = static_cast<int>(std::lround(2 * lim / step));
  double total = 0.0;
  for (int ix = 0; ix <= n; ++ix) {
    for (int iy = 0; iy <= n; ++iy) {
      const double x = -lim + ix * step, y = -lim + iy * step;
      const double wx = (ix == 0 || ix == n) ? 0.5 : 1.0, wy = (iy == 0 || iy == n) ? 0.5 : 1.0;
      const double z0 = 0.8 * x + 0.3 * y, z1 = -0.5 * x + 0.1 * y;
      const double p0 = 1.0 / (1.0 + std::exp(z1 - z0)), p1 = 1.0 - p0;
      const double h2 = x * x + y * y;
      for (int c = 0; c < 2; ++c) {
        const double mx = c == 0 ? a : -a;
        const double dens = std::exp(-0.5 * ((x - mx) * (x - mx) + y * y)) / (2 * std::numbers::pi);
        const double r0 = p0 - (c == 0), r1 = p1 - (c == 1);
        total += 0.5 * wx * wy * dens * (r0 * r0 + r1 * r1) * h2;
      }
    }
  }
  total *= step * step;
  Rng rng(11);
  const auto est = estimate_lhs(w, 1, 200000, LayerKind::output, rng);
  EXPECT_NEAR(est.value.mean, total, 3 * est.value.se);
  EXPECT_EQ(est.identity_violations, 0u);
}

TEST(Lhs, DoublingBatchesHalvesVariance) {
  auto s = spec(16, 4, 5);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  Rng r1(1), r2(2);
  const auto a = estimate_lhs(w, 8, 4000, LayerKind::output, r1).value;
  const auto b = estimate_lhs(w, 8, 8000, LayerKind::output, r2).value;
  EXPECT_NEAR(b.se * b.se / (a.se * a.se), 0.5, 0.1);
}

TEST(Lhs, IntermediateIdentities) {
  auto s = spec(12, 5, 6);
  s.hidden = 7;
  s.student = StudentMode::random;
  s.random_scale = 1.0;
  const auto w = SyntheticWorld::make(s);
  Rng rng(7);
  const auto est = estimate_lhs(w, 16, 300, LayerKind::intermediate, rng);
  EXPECT_EQ(est.identity_violations, 0u);
  EXPECT_LT(est.max_identity_error, 1e-12);
  EXPECT_LT(est.max_rank1_error, 1e-10);
}

TEST(Bound, EmptySetsGiveExactZeros) {
  auto s = spec(16, 4, 8);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  Rng rng(9);
  const auto all_head = partition_tokens(w.q(), PartitionMode::quantile, 1.0);
  const auto r1 = bound_terms(w, all_head, 8, LayerKind::output, rng, quick());
  EXPECT_EQ(r1.term_tail_hits.mean, 0.0);
  EXPECT_EQ(r1.term_tail_background.mean, 0.0);
  EXPECT_GT(r1.term_head_cov.mean, 0.0);
  const auto all_tail = partition_tokens(w.q(), PartitionMode::quantile, 0.0);
  const auto r2 = bound_terms(w, all_tail, 8, LayerKind::output, rng, quick());
  EXPECT_EQ(r2.term_head_bias.mean, 0.0);
  EXPECT_EQ(r2.term_head_cov.mean, 0.0);
  EXPECT_GT(r2.term_tail_hits.mean, 0.0);
  PartitionSpec bad = all_head;
  bad.tail.push_back(0);
  EXPECT_THROW(bound_terms(w, bad, 8, LayerKind::output, rng, quick()), ContractError);
}

TEST(Bound, WellTrainedHeadHasSmallBias) {
  auto s = spec(32, 8, 10);
  s.means = MeanMode::calibrated;
  s.fit_samples = 100000;
  const auto w = SyntheticWorld::make(s);
  const auto part = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
  Rng rng(12);
  const int B = 16;
  const auto r = bound_terms(w, part, B, LayerKind::output, rng, quick());
  const double eps_sum = r.term_head_bias.mean / (1.0 + 1.0 / B);
  EXPECT_LT(eps_sum, 0.01 * r.term_head_cov.mean * B);
}

TEST(Theorem1, RandomWorldsPass) {
  for (std::uint64_t seed = 20; seed < 24; ++seed) {
    auto s = spec(24 + 8 * static_cast<int>(seed % 3), 6, seed);
    s.student = seed % 2 ? StudentMode::random : StudentMode::well_trained;
    const auto w = SyntheticWorld::make(s);
    const auto part = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
    Rng rng(seed);
    const auto r = verify_theorem1(w, part, 4 << seed % 4, 2000, LayerKind::output, rng, quick());
    EXPECT_TRUE(r.pass) << "seed " << seed << " lhs " << r.lhs.mean << " rhs " << r.rhs;
    EXPECT_GE(r.rhs, r.kappa * r.term_head_cov.mean);
    EXPECT_EQ(r.lhs_detail.identity_violations, 0u);
  }
}

TEST(Theorem1, IntermediateWorldPasses) {
  auto s = spec(16, 6, 30);
  s.hidden = 8;
  const auto w = SyntheticWorld::make(s);
  const auto part = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
  Rng rng(31);
  const auto r = verify_theorem1(w, part, 8, 2000, LayerKind::intermediate, rng, quick());
  EXPECT_DOUBLE_EQ(r.kappa, 16.0);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.lhs_detail.identity_violations, 0u);
}

TEST(Theorem1, UniformWorldAtBatchOnePositiveMargin) {
  auto s = spec(8, 4, 32);
  s.zipf_s = 1e-12;
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  const auto part = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
  Rng rng(33);
  const auto r = verify_theorem1(w, part, 1, 4000, LayerKind::output, rng, quick());
  EXPECT_TRUE(r.pass);
  EXPECT_GT(r.margin, 0.0);
}

TEST(Theorem1, ShrunkTermsAreCaught) {
  auto s = spec(32, 6, 34);
  s.means = MeanMode::calibrated;
  s.student = StudentMode::bayes;
  const auto w = SyntheticWorld::make(s);
  const auto part = partition_tokens(w.q(), PartitionMode::quantile, 0.8);
  Rng rng(35);
  EXPECT_FALSE(verify_theorem1(w, part, 16, 2000, LayerKind::output, rng, quick(), 0.1).pass);
}

TEST(Lemmas, FixedProbabilities) {
  Rng rng(40);
  Eigen::VectorXd p(3), q(3), h(2);
  p << 0.5, 0.3, 0.2;
  q << 0.3, 0.3, 0.4;
  h << 1.0, -2.0;
  const auto r = check_lemmas_at(p, q, h, 0, 100000, rng);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.checks[0].expected, 0.2, 1e-15);
  EXPECT_NEAR(r.checks[0].measured, 0.2, 4 * r.checks[0].se);
  const auto same = check_lemmas_at(q, q, h, 1, 100000, rng);
  EXPECT_TRUE(same.pass);
  EXPECT_EQ(same.checks[0].expected, 0.0);
  Eigen::VectorXd det(3);
  det << 0.0, 1.0, 0.0;
  const auto d = check_lemmas_at(p, det, h, 1, 10000, rng);
  EXPECT_TRUE(d.pass);
  EXPECT_NEAR(d.checks[2].measured, 0.0, 1e-20);
  EXPECT_EQ(d.checks[2].expected, 0.0);
}

TEST(Lemmas, RareLabelNeverSampled) {
  Rng rng(45);
  Eigen::VectorXd p(3), q(3), h(2);
  p << 0.2, 0.5, 0.3;
  q << 1e-7, 0.6, 0.4 - 1e-7;
  h << 0.5, 1.5;
  const auto r = check_lemmas_at(p, q, h, 0, 100000, rng);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.checks[0].se, std::sqrt(1e-7 * (1 - 1e-7) / 1e5), 1e-15);
}

TEST(Lemmas, SampledWorlds) {
  for (std::uint64_t seed = 41; seed < 44; ++seed) {
    auto s = spec(8, 3, seed);
    s.student = StudentMode::random;
    const auto w = SyntheticWorld::make(s);
    Rng rng(seed);
    EXPECT_TRUE(verify_lemmas(w, 0, 100000, rng).pass);
  }
}

TEST(Props, HeadAndTail) {
  auto s = spec(32, 6, 50);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  Rng rng(51);
  const auto head = verify_props(w, 0, true, 16, 3000, rng, quick());
  EXPECT_TRUE(head.pass);
  EXPECT_LT(head.split_error, 1e-12);
  const auto tail = verify_props(w, 30, false, 16, 3000, rng, quick());
  EXPECT_TRUE(tail.pass);
  EXPECT_LT(tail.split_error, 1e-12);
}

TEST(Props, ExactStudentGivesInverseBatchScaling) {
  auto s = spec(16, 4, 52);
  s.means = MeanMode::calibrated;
  s.student = StudentMode::bayes;
  const auto w = SyntheticWorld::make(s);
  Rng rng(53);
  std::vector<double> x, y;
  for (int B : {8, 32, 128, 512}) {
    const auto g = token_grad_sq(w, B, 2000, rng);
    x.push_back(std::log(B));
    y.push_back(std::log(g[0].mean));
  }
  const double slope = fit_slope(x, y);
  EXPECT_GE(slope, -1.25);
  EXPECT_LE(slope, -0.75);
}

// Sample-statistics form of the bias-variance split: mean ||g||^2 equals
// ||mean g||^2 plus the trace of the (1/n) sample covariance.
TEST(Props, BiasVarianceIdentity) {
  auto s = spec(8, 3, 54);
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  Rng rng(55);
  const int n = 500, B = 4, j = 1;
  Tensor2d gs(n, 3);
  Tensor2d h;
  std::vector<int> y;
  for (int t = 0; t < n; ++t) {
    w.sample(B, rng, h, y);
    const Tensor2d p = w.probs(h, LayerKind::output);
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(3);
    for (int b = 0; b < B; ++b) g += (p(b, j) - (y[b] == j)) * h.row(b) / B;
    gs.row(t) = g;
  }
  const Eigen::RowVectorXd mean = gs.colwise().mean();
  const double lhs = gs.rowwise().squaredNorm().mean();
  const double cov = (gs.rowwise() - mean).squaredNorm() / n;
  EXPECT_NEAR(lhs, mean.squaredNorm() + cov, 1e-12 * lhs);
}

TEST(Theorem2, FrequentOverRareCase) {
  auto s = spec(110, 6, 60);
  s.zipf_s = 1.0;
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  EXPECT_NEAR(w.q()[0] / w.q()[99], 100.0, 1e-9);
  Rng rng(61);
  const auto r = verify_theorem2(w, 0, 99, 256, 3000, rng, quick());
  EXPECT_FALSE(r.vacuous);
  EXPECT_TRUE(r.lower_pass);
  EXPECT_TRUE(r.ratio_pass);
  EXPECT_GT(r.ratio.mean, 1.0);
  const auto same = verify_theorem2(w, 5, 5, 64, 2000, rng, quick());
  EXPECT_NEAR(same.ratio.mean, 1.0, 1e-12);
  EXPECT_LE(same.ratio_bound, 0.25);
  EXPECT_TRUE(same.ratio_pass);
}

TEST(Theorem2, TrainedFrequentTokenIsVacuous) {
  auto s = spec(64, 6, 62);
  s.means = MeanMode::calibrated;
  s.student = StudentMode::bayes;
  s.zipf_s = 1.5;
  s.mean_scale = 1.5;
  const auto w = SyntheticWorld::make(s);
  Rng rng(63);
  const auto r = verify_theorem2(w, 0, 40, 16, 500, rng, quick());
  EXPECT_TRUE(r.vacuous);
  EXPECT_GT(r.c, 1.6);
}

TEST(Theorem2, BoundGrowsWithBatchAtFixedC) {
  auto s = spec(128, 6, 64);
  s.zipf_s = 1.0;
  s.student = StudentMode::random;
  const auto w = SyntheticWorld::make(s);
  Rng rng(65);
  const auto k = theorem2_constants(w, 0, 99, rng, quick());
  const auto curve = theorem2_ratio_curve(k, {16, 64, 256, 1024});
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i], curve[i - 1]);
  // with c held at zero the bound shrinks instead
  EXPECT_GT(theorem2_ratio_bound(k, 0.0, 16), theorem2_ratio_bound(k, 0.0, 1024));
}

TEST(Wsg, WellTrainedSlope) {
  auto s = spec(32, 8, 70);
  s.means = MeanMode::calibrated;
  s.fit_samples = 100000;
  const auto w = SyntheticWorld::make(s);
  Rng rng(71);
  const auto r = verify_wsg_corollary(w, 0.0, {8, 32, 128, 512}, 2000, rng);
  EXPECT_GE(r.slope, 0.3);
  EXPECT_LE(r.slope, 0.7);
  const auto g = grad_norm_scaling(w, {8, 32, 128, 512}, 2000, rng);
  EXPECT_GE(g.slope, -1.25);
  EXPECT_LE(g.slope, -0.75);
  for (std::size_t i = 1; i < g.values.size(); ++i) EXPECT_LT(g.values[i].mean, g.values[i - 1].mean);
  EXPECT_THROW(verify_wsg_corollary(w, 1e9, {8, 32, 128, 512}, 10, rng), ContractError);
}

TEST(Wsg, ConstantGradientHasFlatSlope) {
  auto s = spec(4, 3, 72);
  s.zipf_s = 30;
  s.sigma = 1e-9;
  s.student = StudentMode::random;
  s.random_scale = 1.0;
  const auto w = SyntheticWorld::make(s);
  Rng rng(73);
  const auto r = verify_wsg_corollary(w, 0.0, {8, 32, 128, 512}, 200, rng);
  EXPECT_NEAR(r.slope, 0.0, 1e-6);
}
