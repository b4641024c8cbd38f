// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <numbers>

#include "sgdll/models.hpp"

namespace sgdll {

namespace {

constexpr double kNormEps = 1e-6;

class Fnv {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h_ = (h_ ^ c[i]) * 0x100000001B3ULL;
  }
  template <typename T>
  void value(const T& v) {
    bytes(&v, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

template <typename Scalar>
std::uint64_t fingerprint(const ParamSet<Scalar>& params, const ModelConfig& cfg, const Batch& batch) {
  Fnv f;
  f.value(static_cast<int>(cfg.kind));
  f.value(cfg.vocab);
  f.value(cfg.width);
  f.value(cfg.depth);
  f.value(batch.batch);
  f.value(batch.seq_len);
  f.bytes(batch.inputs.data(), batch.inputs.size() * sizeof(std::int32_t));
  f.bytes(batch.targets.data(), batch.targets.size() * sizeof(std::int32_t));
  for (std::size_t i = 0; i < params.size(); ++i)
    f.bytes(params[i].data(), static_cast<std::size_t>(params[i].size()) * sizeof(Scalar));
  return f.digest();
}

template <typename Scalar>
Scalar act(Activation a, Scalar u) {
  if (a == Activation::relu) return u > Scalar(0) ? u : Scalar(0);
  return Scalar(0.5) * u * (Scalar(1) + std::erf(u * Scalar(std::numbers::sqrt2 / 2)));
}

template <typename Scalar>
Scalar act_grad(Activation a, Scalar u) {
  if (a == Activation::relu) return u > Scalar(0) ? Scalar(1) : Scalar(0);
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(u * Scalar(std::numbers::sqrt2 / 2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * u * u) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + u * pdf;
}

}  // namespace

template <typename S>
struct ModelKernels {
  using T2 = Tensor2<S>;
  using Cache = ForwardCache<S>;

  // y = x * rinv * gain, with rinv = 1 / sqrt(mean(x^2) + eps) per row.
  static void rmsnorm(const T2& x, const T2& gain, T2& y, T2& rinv) {
    const Eigen::Index n = x.rows(), d = x.cols();
    y.resize(n, d);
    rinv.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      double ss = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) ss += static_cast<double>(x(i, k)) * x(i, k);
      const S r = static_cast<S>(1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps));
      rinv(i, 0) = r;
      y.row(i) = x.row(i).cwiseProduct(gain.row(0)) * r;
    }
  }

  // Accumulates into dx; writes dgain.
  static void rmsnorm_back(const T2& x, const T2& rinv, const T2& gain, const T2& dy, T2& dx, T2& dgain) {
    const Eigen::Index n = x.rows(), d = x.cols();
    dgain.setZero(1, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S r = rinv(i, 0);
      dgain.row(0) += (dy.row(i).cwiseProduct(x.row(i)) * r);
      const S dot = dy.row(i).cwiseProduct(gain.row(0)).dot(x.row(i));
      const S c = r * r * r * dot / static_cast<S>(d);
      dx.row(i) += dy.row(i).cwiseProduct(gain.row(0)) * r - x.row(i) * c;
    }
  }

  // Softmax cross-entropy per row, evaluated in double.
  static void softmax_xent(const T2& logits, const Batch& batch, Cache& c) {
    const Eigen::Index n = logits.rows(), V = logits.cols();
    c.probs_.resize(n, V);
    c.position_losses_.assign(static_cast<std::size_t>(n), 0.0);
    std::vector<double> e(static_cast<std::size_t>(V));
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < V; ++j) {
        const double z = logits(i, j);
        if (!std::isfinite(z)) throw DivergenceError("logits", "non-finite logit in forward pass");
        mx = std::max(mx, z);
      }
      for (Eigen::Index j = 0; j < V; ++j) e[static_cast<std::size_t>(j)] = std::exp(logits(i, j) - mx);
      const double z = pairwise_sum(e);
      const double lse = mx + std::log(z);
      for (Eigen::Index j = 0; j < V; ++j) c.probs_(i, j) = static_cast<S>(e[static_cast<std::size_t>(j)] / z);
      c.position_losses_[static_cast<std::size_t>(i)] = lse - logits(i, batch.targets[static_cast<std::size_t>(i)]);
    }
  }

  static T2 gather_rows(const T2& table, const std::vector<std::int32_t>& ids) {
    T2 out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
    return out;
  }

  static T2 activate(const T2& u, Activation a) {
    return u.unaryExpr([a](S v) { return act(a, v); });
  }

  static void check_finite(const T2& x, const char* where) {
    if (!x.allFinite()) throw DivergenceError(where, "non-finite activation in forward pass");
  }

  static void attention(const T2& qkv, int B, int T, int heads, T2& out, std::vector<T2>& probs) {
    const Eigen::Index d = qkv.cols() / 3, dh = d / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    out.resize(qkv.rows(), d);
    probs.assign(static_cast<std::size_t>(B * heads), T2());
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < heads; ++h) {
        const auto Q = qkv.block(b * T, h * dh, T, dh);
        const auto K = qkv.block(b * T, d + h * dh, T, dh);
        const auto Vv = qkv.block(b * T, 2 * d + h * dh, T, dh);
        T2 P(T, T);
        P.noalias() = (Q * K.transpose()) * scale;
        for (int i = 0; i < T; ++i) {
          S mx = P(i, 0);
          for (int j = 1; j <= i; ++j) mx = std::max(mx, P(i, j));
          S sum = 0;
          for (int j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - mx);
            sum += P(i, j);
          }
          for (int j = 0; j <= i; ++j) P(i, j) /= sum;
          for (int j = i + 1; j < T; ++j) P(i, j) = 0;
        }
        out.block(b * T, h * dh, T, dh).noalias() = P * Vv;
        probs[static_cast<std::size_t>(b * heads + h)] = std::move(P);
      }
    }
  }

  static void attention_back(const T2& qkv, const std::vector<T2>& probs, const T2& dout, int B, int T, int heads,
                             T2& dqkv) {
    const Eigen::Index d = qkv.cols() / 3, dh = d / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    dqkv.setZero(qkv.rows(), qkv.cols());
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < heads; ++h) {
        const T2& P = probs[static_cast<std::size_t>(b * heads + h)];
        const auto Q = qkv.block(b * T, h * dh, T, dh);
        const auto K = qkv.block(b * T, d + h * dh, T, dh);
        const auto Vv = qkv.block(b * T, 2 * d + h * dh, T, dh);
        const auto dO = dout.block(b * T, h * dh, T, dh);
        T2 dP = dO * Vv.transpose();
        dqkv.block(b * T, 2 * d + h * dh, T, dh).noalias() = P.transpose() * dO;
        T2 dS(T, T);
        for (int i = 0; i < T; ++i) {
          const S dot = P.row(i).dot(dP.row(i));
          dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
        }
        dqkv.block(b * T, h * dh, T, dh).noalias() = (dS * K) * scale;
        dqkv.block(b * T, d + h * dh, T, dh).noalias() = (dS.transpose() * Q) * scale;
      }
    }
  }

  static double finish(const T2& logits, const Batch& batch, Cache& c) {
    softmax_xent(logits, batch, c);
    return pairwise_sum(c.position_losses_) / static_cast<double>(c.position_losses_.size());
  }

  static ForwardResult<S> forward(const ParamSet<S>& p, const ModelConfig& cfg, const Batch& batch) {
    batch.validate(cfg.vocab);
    const LayoutPtr expected = make_layout(cfg);
    if (!(p.layout() == *expected)) throw ContractError("forward_loss: parameters do not match the configuration");
    if (cfg.kind == ModelKind::transformer && batch.seq_len > cfg.seq_len)
      throw std::invalid_argument("forward_loss: batch seq_len exceeds the model's position table");
    ForwardResult<S> r;
    Cache& c = r.cache;
    c.fingerprint_ = fingerprint(p, cfg, batch);
    const T2& Wout = p[p.layout().output_index()];
    T2 logits;
    switch (cfg.kind) {
      case ModelKind::linear_softmax: {
        const T2 F = classifier_features(cfg).template cast<S>();
        c.head_inputs_ = gather_rows(F, batch.inputs);
        break;
      }
      case ModelKind::mlp1: {
        const T2 F = classifier_features(cfg).template cast<S>();
        c.features_ = gather_rows(F, batch.inputs);
        c.hidden_pre_.noalias() = c.features_ * p.at("hidden").transpose();
        c.head_inputs_ = activate(c.hidden_pre_, cfg.activation);
        break;
      }
      case ModelKind::transformer:
        forward_transformer(p, cfg, batch, c);
        break;
    }
    check_finite(c.head_inputs_, "head_inputs");
    logits.noalias() = c.head_inputs_ * Wout.transpose();
    r.loss = finish(logits, batch, c);
    return r;
  }

  static void forward_transformer(const ParamSet<S>& p, const ModelConfig& cfg, const Batch& batch, Cache& c) {
    const int B = batch.batch, T = batch.seq_len;
    const Eigen::Index N = static_cast<Eigen::Index>(batch.positions());
    T2 x = gather_rows(p.at("embed"), batch.inputs);
    const T2& pos = p.at("pos_embed");
    for (Eigen::Index i = 0; i < N; ++i) x.row(i) += pos.row(i % T);
    c.layers_.assign(static_cast<std::size_t>(cfg.depth), {});
    for (int l = 1; l <= cfg.depth; ++l) {
      const std::string pre = "block" + std::to_string(l);
      auto& L = c.layers_[static_cast<std::size_t>(l - 1)];
      L.x_attn_in = x;
      rmsnorm(x, p.at(pre + ".attn_norm"), L.attn_norm_out, L.attn_rinv);
      L.qkv.noalias() = L.attn_norm_out * p.at(pre + ".attn.qkv").transpose();
      attention(L.qkv, B, T, cfg.heads, L.attn_out, L.attn_probs);
      x.noalias() += L.attn_out * p.at(pre + ".attn.proj").transpose();
      L.x_mlp_in = x;
      rmsnorm(x, p.at(pre + ".mlp_norm"), L.mlp_norm_out, L.mlp_rinv);
      L.mlp_pre.noalias() = L.mlp_norm_out * p.at(pre + ".mlp.fc").transpose();
      L.mlp_act = activate(L.mlp_pre, cfg.activation);
      x.noalias() += L.mlp_act * p.at(pre + ".mlp.proj").transpose();
      check_finite(x, pre.c_str());
    }
    c.x_final_in = std::move(x);
    rmsnorm(c.x_final_in, p.at("final_norm"), c.head_inputs_, c.final_rinv);
  }

  // (probs - onehot) / N
  static T2 dlogits(const Cache& c, const Batch& batch) {
    T2 g = c.probs_;
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, batch.targets[static_cast<std::size_t>(i)]) -= S(1);
    g /= static_cast<S>(g.rows());
    return g;
  }

  static GradSet<S> backward(const ParamSet<S>& p, const ModelConfig& cfg, const Cache& c, const Batch& batch) {
    if (c.fingerprint_ == 0 || c.fingerprint_ != fingerprint(p, cfg, batch))
      throw ContractError("backward: cache was not produced by forward_loss on these parameters and batch");
    GradSet<S> g = GradSet<S>::zeros_like(p);
    const std::size_t out = p.layout().output_index();
    const T2& Wout = p[out];
    const T2 dz = dlogits(c, batch);
    g[out].noalias() = dz.transpose() * c.head_inputs_;
    T2 dh;
    dh.noalias() = dz * Wout;
    switch (cfg.kind) {
      case ModelKind::linear_softmax:
        break;
      case ModelKind::mlp1: {
        const T2 du = dh.cwiseProduct(c.hidden_pre_.unaryExpr([a = cfg.activation](S v) { return act_grad(a, v); }));
        g.at("hidden").noalias() = du.transpose() * c.features_;
        break;
      }
      case ModelKind::transformer:
        backward_transformer(p, cfg, c, batch, dh, g);
        break;
    }
    return g;
  }

  static void backward_transformer(const ParamSet<S>& p, const ModelConfig& cfg, const Cache& c, const Batch& batch,
                                   const T2& dh, GradSet<S>& g) {
    const int B = batch.batch, T = batch.seq_len;
    const Eigen::Index N = static_cast<Eigen::Index>(batch.positions());
    T2 dx = T2::Zero(N, cfg.width);
    rmsnorm_back(c.x_final_in, c.final_rinv, p.at("final_norm"), dh, dx, g.at("final_norm"));
    for (int l = cfg.depth; l >= 1; --l) {
      const std::string pre = "block" + std::to_string(l);
      const auto& L = c.layers_[static_cast<std::size_t>(l - 1)];
      // mlp
      g.at(pre + ".mlp.proj").noalias() = dx.transpose() * L.mlp_act;
      T2 du;
      du.noalias() = dx * p.at(pre + ".mlp.proj");
      du = du.cwiseProduct(L.mlp_pre.unaryExpr([a = cfg.activation](S v) { return act_grad(a, v); }));
      g.at(pre + ".mlp.fc").noalias() = du.transpose() * L.mlp_norm_out;
      T2 dn;
      dn.noalias() = du * p.at(pre + ".mlp.fc");
      rmsnorm_back(L.x_mlp_in, L.mlp_rinv, p.at(pre + ".mlp_norm"), dn, dx, g.at(pre + ".mlp_norm"));
      // attention
      g.at(pre + ".attn.proj").noalias() = dx.transpose() * L.attn_out;
      T2 datt;
      datt.noalias() = dx * p.at(pre + ".attn.proj");
      T2 dqkv;
      attention_back(L.qkv, L.attn_probs, datt, B, T, cfg.heads, dqkv);
      g.at(pre + ".attn.qkv").noalias() = dqkv.transpose() * L.attn_norm_out;
      dn.noalias() = dqkv * p.at(pre + ".attn.qkv");
      rmsnorm_back(L.x_attn_in, L.attn_rinv, p.at(pre + ".attn_norm"), dn, dx, g.at(pre + ".attn_norm"));
    }
    T2& dE = g.at("embed");
    T2& dP = g.at("pos_embed");
    for (Eigen::Index i = 0; i < N; ++i) {
      dE.row(batch.inputs[static_cast<std::size_t>(i)]) += dx.row(i);
      dP.row(i % T) += dx.row(i);
    }
  }
};

template <typename Scalar>
ForwardResult<Scalar> forward_loss(const ParamSet<Scalar>& params, const ModelConfig& cfg, const Batch& batch) {
  return ModelKernels<Scalar>::forward(params, cfg, batch);
}

template <typename Scalar>
GradSet<Scalar> backward(const ParamSet<Scalar>& params, const ModelConfig& cfg, const ForwardCache<Scalar>& cache,
                         const Batch& batch) {
  return ModelKernels<Scalar>::backward(params, cfg, cache, batch);
}

template <typename Scalar>
Tensor2<Scalar> head_token_grads(const Tensor2<Scalar>& h, const Tensor2<Scalar>& probs,
                                 std::span<const std::int32_t> targets) {
  if (h.rows() != probs.rows() || static_cast<std::size_t>(h.rows()) != targets.size())
    throw std::invalid_argument("head_token_grads: row counts differ");
  Tensor2<Scalar> r = probs;
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const auto y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= r.cols()) throw std::invalid_argument("head_token_grads: target outside vocabulary");
    r(i, y) -= Scalar(1);
  }
  Tensor2<Scalar> rows;
  rows.noalias() = r.transpose() * h;
  rows /= static_cast<Scalar>(h.rows());
  return rows;
}

template <typename Scalar>
std::vector<double> row_norms(const Tensor2<Scalar>& rows) {
  std::vector<double> n(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index j = 0; j < rows.rows(); ++j) n[static_cast<std::size_t>(j)] = frobenius_norm(rows.row(j));
  return n;
}

template <typename Scalar>
TokenGrads<Scalar> output_head_token_grads(const ParamSet<Scalar>& params, const ModelConfig& cfg,
                                           const Batch& batch) {
  const auto fr = forward_loss(params, cfg, batch);
  TokenGrads<Scalar> t;
  t.rows = head_token_grads(fr.cache.head_inputs(), fr.cache.probs(), batch.targets);
  t.norms = row_norms(t.rows);
  return t;
}

#define SGDLL_INSTANTIATE(S)                                                                                  \
  template ForwardResult<S> forward_loss<S>(const ParamSet<S>&, const ModelConfig&, const Batch&);            \
  template GradSet<S> backward<S>(const ParamSet<S>&, const ModelConfig&, const ForwardCache<S>&,             \
                                  const Batch&);                                                              \
  template Tensor2<S> head_token_grads<S>(const Tensor2<S>&, const Tensor2<S>&, std::span<const std::int32_t>); \
  template std::vector<double> row_norms<S>(const Tensor2<S>&);                                               \
  template TokenGrads<S> output_head_token_grads<S>(const ParamSet<S>&, const ModelConfig&, const Batch&);

SGDLL_INSTANTIATE(float)
SGDLL_INSTANTIATE(double)
#undef SGDLL_INSTANTIATE

FdReport fd_check(const ParamSet<double>& params, const ModelConfig& cfg, const Batch& batch, double eps,
                  std::uint64_t seed, std::size_t coords_per_block) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("fd_check: eps must be positive");
  const auto fr = forward_loss(params, cfg, batch);
  const GradSet<double> g = backward(params, cfg, fr.cache, batch);
  ParamSet<double> work = params;
  Rng rng(seed, 0xFDC0ULL);
  FdReport rep;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto& w = work[b];
    const auto n = static_cast<std::size_t>(w.size());
    std::vector<std::size_t> coords;
    if (n <= coords_per_block) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < coords_per_block; ++i) coords.push_back(rng.below(n));
    }
    for (std::size_t k : coords) {
      double* x = w.data() + k;
      const double orig = *x;
      *x = orig + eps;
      const double lp = forward_loss(work, cfg, batch).loss;
      *x = orig - eps;
      const double lm = forward_loss(work, cfg, batch).loss;
      *x = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = g[b].data()[k];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      if (rep.worst_block.empty() || rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_block = params.info(b).name;
      }
      ++rep.coordinates;
    }
  }
  return rep;
}

}  // namespace sgdll
