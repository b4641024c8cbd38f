// SPDX-License-Identifier: Apache-2.0
#include "sgdll/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sgdll {

int Schedule::warmup_steps() const { return static_cast<int>(std::lround(warmup_fraction * total_steps)); }

void Schedule::validate() const {
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw std::invalid_argument("schedule: peak_lr must be >= 0");
  if (total_steps < 1) throw std::invalid_argument("schedule: total_steps must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw std::invalid_argument("schedule: warmup_fraction must lie in [0, 1)");
  if (!(final_fraction >= 0.0 && final_fraction < 1.0))
    throw std::invalid_argument("schedule: final_fraction must lie in [0, 1)");
}

double lr_at(const Schedule& s, int t) {
  s.validate();
  if (t < 0 || t >= s.total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(t) + " outside [0, " +
                                std::to_string(s.total_steps) + ")");
  const int W = s.warmup_steps();
  if (t < W) return s.peak_lr * (t + 1) / W;
  const double floor = s.final_fraction * s.peak_lr;
  const double frac = static_cast<double>(t - W) / static_cast<double>(s.total_steps - W);
  return floor + (s.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void SgdLlConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("sgdll: tau must be positive");
  if (!(delta > 0.0)) throw ConfigError("sgdll: delta must be positive");
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("sgdll: beta must lie in [0, 1)");
}

namespace {

template <typename Scalar>
void require_finite(const GradSet<Scalar>& g) {
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!g[i].allFinite()) throw DivergenceError(g.info(i).name, "non-finite gradient");
}

template <typename Scalar>
void apply(ParamSet<Scalar>& p, std::size_t i, const Tensor2<Scalar>& u, StepTrace& tr) {
  p[i] -= u;
  tr.update_rms[i] = u.size() ? rms_norm(u, p.info(i).name) : 0.0;
}

StepTrace blank_trace(std::size_t n) {
  StepTrace tr;
  tr.update_rms.assign(n, 0.0);
  tr.layer_scale.assign(n, 1.0);
  return tr;
}

template <typename Scalar>
void update_momentum(MomentumState<Scalar>& st, const GradSet<Scalar>& g) {
  if (st.steps == 0 || st.m.size() == 0) {
    st.m = g;  // m^(0) is the first gradient
  } else {
    require_same_layout(st.m, g, "momentum");
    const Scalar b = static_cast<Scalar>(st.beta);
    const Scalar one_minus = static_cast<Scalar>(1.0 - st.beta);
    for (std::size_t i = 0; i < g.size(); ++i) st.m[i] = b * st.m[i] + one_minus * g[i];
  }
  ++st.steps;
}

}  // namespace

template <typename Scalar>
StepTrace step_sgd(ParamSet<Scalar>& params, const GradSet<Scalar>& grads, double lr) {
  require_same_layout(params, grads, "step_sgd");
  require_finite(grads);
  StepTrace tr = blank_trace(params.size());
  const Scalar s = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) apply(params, i, Tensor2<Scalar>(s * grads[i]), tr);
  return tr;
}

template <typename Scalar>
StepTrace step_momentum_sgd(ParamSet<Scalar>& params, MomentumState<Scalar>& state, const GradSet<Scalar>& grads,
                            double lr) {
  require_same_layout(params, grads, "step_momentum_sgd");
  require_finite(grads);
  if (!(state.beta >= 0.0 && state.beta < 1.0)) throw ConfigError("momentum: beta must lie in [0, 1)");
  update_momentum(state, grads);
  StepTrace tr = blank_trace(params.size());
  const Scalar s = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) apply(params, i, Tensor2<Scalar>(s * state.m[i]), tr);
  return tr;
}

template <typename Scalar>
StepTrace step_adam(ParamSet<Scalar>& params, AdamState<Scalar>& state, const GradSet<Scalar>& grads, double lr) {
  require_same_layout(params, grads, "step_adam");
  require_finite(grads);
  if (!(state.beta1 >= 0.0 && state.beta1 < 1.0 && state.beta2 >= 0.0 && state.beta2 < 1.0))
    throw ConfigError("adam: betas must lie in [0, 1)");
  if (!(state.eps > 0.0)) throw ConfigError("adam: eps must be positive");
  if (state.steps == 0 || state.m.size() == 0) {
    state.m = GradSet<Scalar>::zeros_like(grads);
    state.v = GradSet<Scalar>::zeros_like(grads);
  }
  ++state.steps;
  const double c1 = state.bias_correction ? 1.0 - std::pow(state.beta1, static_cast<double>(state.steps)) : 1.0;
  const double c2 = state.bias_correction ? 1.0 - std::pow(state.beta2, static_cast<double>(state.steps)) : 1.0;
  const Scalar b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const Scalar a1 = static_cast<Scalar>(1.0 - state.beta1), a2 = static_cast<Scalar>(1.0 - state.beta2);
  const Scalar s = static_cast<Scalar>(lr / c1);
  const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
  const Scalar eps = static_cast<Scalar>(state.eps);
  StepTrace tr = blank_trace(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + a1 * grads[i];
    state.v[i] = b2 * state.v[i] + a2 * grads[i].cwiseAbs2();
    const Tensor2<Scalar> u =
        (s * state.m[i].array() / ((state.v[i].array() * inv_c2).sqrt() + eps)).matrix();
    apply(params, i, u, tr);
  }
  return tr;
}

template <typename Scalar>
StepTrace step_sgdll(ParamSet<Scalar>& params, MomentumState<Scalar>& state, const GradSet<Scalar>& grads, double lr,
                     const SgdLlConfig& cfg) {
  require_same_layout(params, grads, "step_sgdll");
  cfg.validate();
  const std::size_t out = params.layout().output_index();
  require_finite(grads);
  state.beta = cfg.beta;
  update_momentum(state, grads);
  StepTrace tr = blank_trace(params.size());
  tr.output_block = out;
  const Scalar s = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i != out) {
      auto c = clip_with_scale(Tensor2<Scalar>(s * state.m[i]), cfg.tau, Norm::RMS);
      tr.layer_scale[i] = c.scale;
      apply(params, i, c.value, tr);
      continue;
    }
    // Row clipping acts on a copy; the stored momentum is left untouched.
    const Tensor2<Scalar>& m = state.m[i];
    Tensor2<Scalar> rows(m.rows(), m.cols());
    tr.row_scale.assign(static_cast<std::size_t>(m.rows()), 1.0);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      auto c = clip_with_scale(m.row(r), cfg.delta, Norm::L2);
      rows.row(r) = c.value;
      tr.row_scale[static_cast<std::size_t>(r)] = c.scale;
      tr.max_clipped_row_norm = std::max(tr.max_clipped_row_norm, frobenius_norm(c.value));
    }
    auto c = clip_with_scale(Tensor2<Scalar>(s * rows), cfg.tau, Norm::RMS);
    tr.layer_scale[i] = c.scale;
    apply(params, i, c.value, tr);
  }
  return tr;
}

std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::msgd: return "msgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgdll: return "sgdll";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "msgd") return OptimizerKind::msgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgdll") return OptimizerKind::sgdll;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

void OptimConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer: lr must be finite and >= 0");
  auto unit = [](double b) { return b >= 0.0 && b < 1.0; };
  if (!unit(beta) || !unit(beta1) || !unit(beta2)) throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  if (kind == OptimizerKind::sgdll) SgdLlConfig{tau, delta, beta}.validate();
  Schedule{lr, 1, warmup_fraction, final_fraction}.validate();
}

template <typename Scalar>
Optimizer<Scalar>::Optimizer(const OptimConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  mom_.beta = cfg_.beta;
  adam_.beta1 = cfg_.beta1;
  adam_.beta2 = cfg_.beta2;
  adam_.eps = cfg_.eps;
  adam_.bias_correction = cfg_.bias_correction;
}

template <typename Scalar>
const StepTrace& Optimizer<Scalar>::step(ParamSet<Scalar>& params, const GradSet<Scalar>& grads, double lr) {
  switch (cfg_.kind) {
    case OptimizerKind::sgd: trace_ = step_sgd(params, grads, lr); break;
    case OptimizerKind::msgd: trace_ = step_momentum_sgd(params, mom_, grads, lr); break;
    case OptimizerKind::adam: trace_ = step_adam(params, adam_, grads, lr); break;
    case OptimizerKind::sgdll:
      trace_ = step_sgdll(params, mom_, grads, lr, SgdLlConfig{cfg_.tau, cfg_.delta, cfg_.beta});
      break;
  }
  layout_ = params.layout_ptr();
  last_lr_ = lr;
  ++steps_;
  return trace_;
}

template <typename Scalar>
const StepTrace& Optimizer<Scalar>::last_trace() const {
  if (steps_ == 0) throw ContractError("optimizer: no step has been taken");
  return trace_;
}

template <typename Scalar>
Tensor2d Optimizer<Scalar>::effective_lr_coords(std::size_t i) const {
  if (steps_ == 0) throw ContractError("effective_lr: optimizer state was never stepped");
  const BlockInfo& b = (*layout_)[i];
  switch (cfg_.kind) {
    case OptimizerKind::sgd:
    case OptimizerKind::msgd:
      return Tensor2d::Constant(b.rows, b.cols, last_lr_);
    case OptimizerKind::adam: {
      const double c2 = adam_.bias_correction ? 1.0 - std::pow(adam_.beta2, static_cast<double>(adam_.steps)) : 1.0;
      const Tensor2d vhat = adam_.v[i].template cast<double>() / c2;
      return (last_lr_ / (vhat.array().sqrt() + adam_.eps)).matrix();
    }
    case OptimizerKind::sgdll: {
      Tensor2d a = Tensor2d::Constant(b.rows, b.cols, last_lr_ * trace_.layer_scale[i]);
      if (i == trace_.output_block)
        for (Eigen::Index r = 0; r < a.rows(); ++r) a.row(r) *= trace_.row_scale[static_cast<std::size_t>(r)];
      return a;
    }
  }
  return {};
}

template <typename Scalar>
std::vector<EffectiveLr> Optimizer<Scalar>::effective_lr() const {
  if (steps_ == 0) throw ContractError("effective_lr: optimizer state was never stepped");
  std::vector<EffectiveLr> out;
  for (std::size_t i = 0; i < layout_->size(); ++i) {
    const Tensor2d a = effective_lr_coords(i);
    out.push_back({(*layout_)[i].name, a.mean(), a.minCoeff(), a.maxCoeff()});
  }
  return out;
}

template <typename Scalar>
const GradSet<Scalar>* Optimizer<Scalar>::momentum() const {
  switch (cfg_.kind) {
    case OptimizerKind::sgd: return nullptr;
    case OptimizerKind::adam: return adam_.m.size() ? &adam_.m : nullptr;
    default: return mom_.m.size() ? &mom_.m : nullptr;
  }
}

#define SGDLL_INSTANTIATE(S)                                                                                   \
  template StepTrace step_sgd<S>(ParamSet<S>&, const GradSet<S>&, double);                                     \
  template StepTrace step_momentum_sgd<S>(ParamSet<S>&, MomentumState<S>&, const GradSet<S>&, double);         \
  template StepTrace step_adam<S>(ParamSet<S>&, AdamState<S>&, const GradSet<S>&, double);                     \
  template StepTrace step_sgdll<S>(ParamSet<S>&, MomentumState<S>&, const GradSet<S>&, double,                 \
                                   const SgdLlConfig&);                                                        \
  template class Optimizer<S>;

SGDLL_INSTANTIATE(float)
SGDLL_INSTANTIATE(double)
#undef SGDLL_INSTANTIATE

}  // namespace sgdll
