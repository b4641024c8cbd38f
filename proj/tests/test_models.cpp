// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sgdll/models.hpp"

using namespace sgdll;

namespace {

Batch random_batch(int B, int T, int V, Rng& rng) {
  Batch b{B, T, {}, {}};
  for (int i = 0; i < B * T; ++i) {
    b.inputs.push_back(static_cast<std::int32_t>(rng.below(V)));
    b.targets.push_back(static_cast<std::int32_t>(rng.below(V)));
  }
  return b;
}

ModelConfig tiny(ModelKind kind, int V, int d, int L, int heads, int T) {
  ModelConfig c;
  c.kind = kind;
  c.vocab = V;
  c.width = d;
  c.depth = L;
  c.heads = heads;
  c.seq_len = T;
  c.init_std = 0.5;
  return c;
}

// Straight-line recomputation of the transformer loss with plain loops and
// no shared code path with the library kernels.
double oracle_transformer_loss(const ParamSet<double>& p, const ModelConfig& c, const Batch& b) {
  const int d = c.width, V = c.vocab, T = b.seq_len, H = c.heads, dh = d / H;
  auto W = [&](const std::string& n) -> const Tensor2d& { return p.at(n); };
  auto matvec = [](const Tensor2d& M, const std::vector<double>& x) {
    std::vector<double> y(static_cast<std::size_t>(M.rows()), 0.0);
    for (Eigen::Index i = 0; i < M.rows(); ++i)
      for (Eigen::Index k = 0; k < M.cols(); ++k) y[i] += M(i, k) * x[k];
    return y;
  };
  auto norm = [&](const std::vector<double>& x, const Tensor2d& g) {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / d + 1e-6);
    std::vector<double> y(x.size());
    for (int k = 0; k < d; ++k) y[k] = x[k] * r * g(0, k);
    return y;
  };
  auto gelu = [](double u) { return 0.5 * u * (1 + std::erf(u / std::numbers::sqrt2)); };
  double total = 0;
  for (int bi = 0; bi < b.batch; ++bi) {
    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < d; ++k) x[t][k] = W("embed")(b.input(bi, t), k) + W("pos_embed")(t, k);
    for (int l = 1; l <= c.depth; ++l) {
      const std::string pre = "block" + std::to_string(l);
      std::vector<std::vector<double>> qkv(T);
      for (int t = 0; t < T; ++t) qkv[t] = matvec(W(pre + ".attn.qkv"), norm(x[t], W(pre + ".attn_norm")));
      std::vector<std::vector<double>> att(T, std::vector<double>(d, 0.0));
      for (int h = 0; h < H; ++h) {
        for (int t = 0; t < T; ++t) {
          std::vector<double> s(t + 1);
          double mx = -1e300;
          for (int u = 0; u <= t; ++u) {
            double dot = 0;
            for (int k = 0; k < dh; ++k) dot += qkv[t][h * dh + k] * qkv[u][d + h * dh + k];
            s[u] = dot / std::sqrt(double(dh));
            mx = std::max(mx, s[u]);
          }
          double z = 0;
          for (auto& v : s) z += (v = std::exp(v - mx));
          for (int u = 0; u <= t; ++u)
            for (int k = 0; k < dh; ++k) att[t][h * dh + k] += s[u] / z * qkv[u][2 * d + h * dh + k];
        }
      }
      for (int t = 0; t < T; ++t) {
        const auto o = matvec(W(pre + ".attn.proj"), att[t]);
        for (int k = 0; k < d; ++k) x[t][k] += o[k];
        auto u = matvec(W(pre + ".mlp.fc"), norm(x[t], W(pre + ".mlp_norm")));
        for (auto& v : u) v = gelu(v);
        const auto m = matvec(W(pre + ".mlp.proj"), u);
        for (int k = 0; k < d; ++k) x[t][k] += m[k];
      }
    }
    const Tensor2d& head = c.tie_embeddings ? W("embed") : W("output_head");
    for (int t = 0; t < T; ++t) {
      const auto z = matvec(head, norm(x[t], W("final_norm")));
      const double mx = *std::max_element(z.begin(), z.end());
      double se = 0;
      for (int j = 0; j < V; ++j) se += std::exp(z[j] - mx);
      total += mx + std::log(se) - z[b.target(bi, t)];
    }
  }
  return total / static_cast<double>(b.positions());
}

}  // namespace

TEST(Layout, LinearSoftmaxShape) {
  ModelConfig c = tiny(ModelKind::linear_softmax, 8, 4, 0, 1, 4);
  const auto p = init_params<double>(c, Rng(1));
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.info(0).name, "output_head");
  EXPECT_EQ(p[0].rows(), 8);
  EXPECT_EQ(p[0].cols(), 4);
  EXPECT_EQ(p.info(0).kind, BlockKind::output);
}

TEST(Layout, TransformerNamesAndTags) {
  ModelConfig c = tiny(ModelKind::transformer, 16, 8, 2, 2, 4);
  const auto lay = make_layout(c);
  EXPECT_EQ(lay->size(), 2u + 6u * 2u + 2u);
  EXPECT_EQ((*lay)[lay->index("block2.attn.qkv")].rows, 24);
  EXPECT_EQ((*lay)[lay->index("block2.attn.qkv")].layer, 2);
  EXPECT_EQ((*lay)[lay->output_index()].name, "output_head");
  c.tie_embeddings = true;
  const auto tied = make_layout(c);
  EXPECT_EQ((*tied)[tied->output_index()].name, "embed");
  EXPECT_FALSE(tied->contains("output_head"));
}

TEST(Layout, InvalidConfigs) {
  EXPECT_THROW(make_layout(tiny(ModelKind::transformer, 16, 8, 1, 3, 4)), ConfigError);
  EXPECT_THROW(make_layout(tiny(ModelKind::transformer, 1, 8, 1, 2, 4)), ConfigError);
}

TEST(Init, Deterministic) {
  const ModelConfig c = tiny(ModelKind::transformer, 16, 8, 2, 2, 4);
  EXPECT_EQ(init_params<double>(c, Rng(7)), init_params<double>(c, Rng(7)));
  EXPECT_FALSE(init_params<double>(c, Rng(7)) == init_params<double>(c, Rng(8)));
  const auto p = init_params<float>(c, Rng(7));
  EXPECT_EQ(p.at("final_norm"), Tensor2f::Ones(1, 8));
}

TEST(Forward, UniformLogitsGiveLogV) {
  Rng rng(1);
  for (int V : {8, 32}) {
    ModelConfig c = tiny(ModelKind::transformer, V, 8, 1, 2, 4);
    auto p = init_params<double>(c, Rng(2));
    p.at("output_head").setZero();
    const Batch b = random_batch(3, 4, V, rng);
    EXPECT_NEAR(forward_loss(p, c, b).loss, std::log(static_cast<double>(V)), 1e-14);
    c.depth = 0;
    auto z = ParamSet<double>::zeros(make_layout(c));
    EXPECT_NEAR(forward_loss(z, c, b).loss, std::log(static_cast<double>(V)), 1e-14);
  }
  EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(Forward, MatchesStraightLineOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig c = tiny(ModelKind::transformer, 12 + trial, 8, trial % 3, 2, 5);
    c.tie_embeddings = trial % 2 == 1;
    const auto p = init_params<double>(c, rng.split(trial));
    const Batch b = random_batch(2, 5, c.vocab, rng);
    const double got = forward_loss(p, c, b).loss;
    const double want = oracle_transformer_loss(p, c, b);
    EXPECT_NEAR(got, want, 1e-12 * std::abs(want)) << "trial " << trial;
  }
}

TEST(Forward, BatchMeanOfSingletons) {
  Rng rng(4);
  const ModelConfig c = tiny(ModelKind::transformer, 16, 8, 2, 2, 6);
  const auto p = init_params<double>(c, Rng(5));
  const Batch b = random_batch(5, 6, 16, rng);
  double acc = 0;
  for (int i = 0; i < 5; ++i) {
    Batch s{1, 6, {}, {}};
    s.inputs.assign(b.inputs.begin() + i * 6, b.inputs.begin() + (i + 1) * 6);
    s.targets.assign(b.targets.begin() + i * 6, b.targets.begin() + (i + 1) * 6);
    acc += forward_loss(p, c, s).loss;
  }
  EXPECT_NEAR(forward_loss(p, c, b).loss, acc / 5, 1e-12 * acc / 5);
}

TEST(Forward, PermutationOfBatchRows) {
  Rng rng(6);
  const ModelConfig c = tiny(ModelKind::mlp1, 16, 8, 0, 1, 4);
  const auto p = init_params<double>(c, Rng(5));
  const Batch b = random_batch(4, 4, 16, rng);
  Batch r = b;
  std::vector<int> perm{2, 0, 3, 1};
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < 4; ++t) {
      r.inputs[i * 4 + t] = b.input(perm[i], t);
      r.targets[i * 4 + t] = b.target(perm[i], t);
    }
  const auto f1 = forward_loss(p, c, b);
  const auto f2 = forward_loss(p, c, r);
  EXPECT_NEAR(f1.loss, f2.loss, 1e-12 * f1.loss);
  const auto g1 = backward(p, c, f1.cache, b);
  const auto g2 = backward(p, c, f2.cache, r);
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_LT((g1[k] - g2[k]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, RejectsBadBatch) {
  const ModelConfig c = tiny(ModelKind::linear_softmax, 8, 4, 0, 1, 4);
  const auto p = init_params<double>(c, Rng(1));
  Batch b{1, 2, {0, 8}, {1, 2}};
  EXPECT_THROW(forward_loss(p, c, b), std::invalid_argument);
}

TEST(Forward, NonFiniteIsDivergence) {
  Rng rng(2);
  const ModelConfig c = tiny(ModelKind::linear_softmax, 8, 4, 0, 1, 4);
  auto p = init_params<double>(c, Rng(1));
  p[0](0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward_loss(p, c, random_batch(2, 4, 8, rng)), DivergenceError);
}

TEST(Backward, StaleCacheIsContractError) {
  Rng rng(2);
  const ModelConfig c = tiny(ModelKind::transformer, 8, 4, 1, 2, 4);
  auto p = init_params<double>(c, Rng(1));
  const Batch b = random_batch(2, 4, 8, rng);
  const auto fr = forward_loss(p, c, b);
  EXPECT_NO_THROW(backward(p, c, fr.cache, b));
  p[3](0, 0) += 1e-3;
  EXPECT_THROW(backward(p, c, fr.cache, b), ContractError);
  p[3](0, 0) -= 1e-3;
  Batch other = b;
  other.targets[0] = (other.targets[0] + 1) % 8;
  EXPECT_THROW(backward(p, c, fr.cache, other), ContractError);
}

TEST(Backward, FiniteDifferencesAllKinds) {
  Rng rng(10);
  for (auto kind : {ModelKind::linear_softmax, ModelKind::mlp1, ModelKind::transformer}) {
    for (int L = 0; L <= (kind == ModelKind::transformer ? 2 : 0); ++L) {
      ModelConfig c = tiny(kind, 20, 8, L, 2, 4);
      c.activation = L == 1 ? Activation::relu : Activation::gelu;
      const auto p = init_params<double>(c, rng.split(L));
      const Batch b = random_batch(3, 4, 20, rng);
      const FdReport r = fd_check(p, c, b, 1e-5);
      EXPECT_LT(r.max_rel_error, 1e-5) << to_string(kind) << " L=" << L << " worst " << r.worst_block;
      if (kind == ModelKind::linear_softmax) {
        EXPECT_LT(r.max_rel_error, 1e-7);
      }
    }
  }
  EXPECT_THROW(fd_check(init_params<double>(tiny(ModelKind::linear_softmax, 4, 2, 0, 1, 2), Rng(0)),
                        tiny(ModelKind::linear_softmax, 4, 2, 0, 1, 2), Batch{1, 1, {0}, {1}}, 0.0),
               std::invalid_argument);
}

TEST(TokenGrads, HandExample) {
  Tensor2d h(1, 2), probs(1, 2);
  h << 1, 0;
  probs << 0.6, 0.4;
  const std::vector<std::int32_t> y{0};
  const Tensor2d g = head_token_grads(h, probs, y);
  EXPECT_NEAR(g(0, 0), -0.4, 1e-15);
  EXPECT_NEAR(g(1, 0), 0.4, 1e-15);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(TokenGrads, ClosedFormOnLinearSoftmax) {
  Rng rng(12);
  ModelConfig c = tiny(ModelKind::linear_softmax, 16, 6, 0, 1, 5);
  const auto p = init_params<double>(c, Rng(3));
  const Batch b = random_batch(4, 5, 16, rng);
  const auto fr = forward_loss(p, c, b);
  const auto g = backward(p, c, fr.cache, b);
  const auto tg = output_head_token_grads(p, c, b);
  // independent closed form from the feature table
  const Tensor2d F = classifier_features(c);
  Tensor2d want = Tensor2d::Zero(16, 6);
  for (std::size_t n = 0; n < b.positions(); ++n) {
    const auto h = F.row(b.inputs[n]);
    Eigen::VectorXd z = p[0] * h.transpose();
    const double mx = z.maxCoeff();
    const Eigen::VectorXd e = (z.array() - mx).exp();
    const Eigen::VectorXd pr = e / e.sum();
    for (int j = 0; j < 16; ++j) want.row(j) += (pr(j) - (b.targets[n] == j ? 1.0 : 0.0)) * h;
  }
  want /= static_cast<double>(b.positions());
  EXPECT_LT((g[0] - want).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((tg.rows - want).cwiseAbs().maxCoeff(), 1e-10);
  // column sums vanish and the kappa = 1 identity holds
  EXPECT_LT(tg.rows.colwise().sum().cwiseAbs().maxCoeff(), 1e-14);
  double s = 0;
  for (double n : tg.norms) s += n * n;
  EXPECT_NEAR(sum_squares(tg.rows), s, 1e-14 * s);
}

TEST(TokenGrads, TransformerHeadMatchesBackward) {
  Rng rng(13);
  const ModelConfig c = tiny(ModelKind::transformer, 16, 8, 1, 2, 4);
  const auto p = init_params<double>(c, Rng(3));
  const Batch b = random_batch(2, 4, 16, rng);
  const auto fr = forward_loss(p, c, b);
  const auto g = backward(p, c, fr.cache, b);
  const auto tg = output_head_token_grads(p, c, b);
  EXPECT_LT((g.at("output_head") - tg.rows).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Precision, FloatTracksDouble) {
  Rng rng(14);
  ModelConfig c = tiny(ModelKind::transformer, 32, 16, 2, 4, 8);
  c.init_std = 0.02;
  const auto pd = init_params<double>(c, Rng(1));
  const auto pf = pd.cast<float>();
  const Batch b = random_batch(4, 8, 32, rng);
  const auto fd = forward_loss(pd, c, b);
  const auto ff = forward_loss(pf, c, b);
  EXPECT_NEAR(fd.loss, ff.loss, 1e-5);
  const auto gd = backward(pd, c, fd.cache, b);
  const auto gf = backward(pf, c, ff.cache, b);
  for (std::size_t k = 0; k < gd.size(); ++k)
    EXPECT_LT((gd[k] - gf[k].cast<double>()).cwiseAbs().maxCoeff(), 1e-4 * (gd[k].cwiseAbs().maxCoeff() + 1e-3));
}
