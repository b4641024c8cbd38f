// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sgdll/models.hpp"

namespace sgdll {

/// Linear warm-up followed by cosine decay.
struct Schedule {
  double peak_lr = 0.0;
  int total_steps = 1;
  double warmup_fraction = 0.1;
  double final_fraction = 0.0;

  int warmup_steps() const;
  void validate() const;
};

/// eta*(t+1)/W for t < W, then cosine from eta down to final_fraction*eta.
/// Throws std::invalid_argument for t outside [0, T).
double lr_at(const Schedule& s, int t);

template <typename Scalar>
struct MomentumState {
  GradSet<Scalar> m;
  double beta = 0.9;
  long steps = 0;
};

template <typename Scalar>
struct AdamState {
  GradSet<Scalar> m;
  GradSet<Scalar> v;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  bool bias_correction = true;
  long steps = 0;
};

struct SgdLlConfig {
  double tau = 5e-4;
  double delta = 1e-3;
  double beta = 0.9;
  void validate() const;
};

/// What one step did to each block.
struct StepTrace {
  std::vector<double> update_rms;   // RMS of the update tensor subtracted from each block
  std::vector<double> layer_scale;  // realized layer clip factor (1 when inactive)
  std::vector<double> row_scale;    // realized per-row clip factors of the output block
  double max_clipped_row_norm = 0.0;  // max_i ||m~_i||_2 after row clipping
  std::size_t output_block = 0;
};

/// w <- w - lr * g. Throws DivergenceError on a non-finite gradient.
template <typename Scalar>
StepTrace step_sgd(ParamSet<Scalar>& params, const GradSet<Scalar>& grads, double lr);

/// m <- beta*m + (1-beta)*g (m = g on the first call); w <- w - lr*m.
template <typename Scalar>
StepTrace step_momentum_sgd(ParamSet<Scalar>& params, MomentumState<Scalar>& state, const GradSet<Scalar>& grads,
                            double lr);

/// Adam with optional bias correction; update lr * m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
StepTrace step_adam(ParamSet<Scalar>& params, AdamState<Scalar>& state, const GradSet<Scalar>& grads, double lr);

/// Momentum SGD with layer-wise RMS clipping of every update and L2 clipping
/// of each output-head momentum row before the layer clip. state.beta is
/// overwritten by cfg.beta.
template <typename Scalar>
StepTrace step_sgdll(ParamSet<Scalar>& params, MomentumState<Scalar>& state, const GradSet<Scalar>& grads, double lr,
                     const SgdLlConfig& cfg);

enum class OptimizerKind { sgd, msgd, adam, sgdll };
std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(std::string_view s);

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  bool bias_correction = true;
  double tau = 5e-4;
  double delta = 1e-3;
  double warmup_fraction = 0.1;
  double final_fraction = 0.0;
  void validate() const;
};

struct EffectiveLr {
  std::string block;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Owns the state of one optimizer and remembers the last step.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(const OptimConfig& cfg);

  const StepTrace& step(ParamSet<Scalar>& params, const GradSet<Scalar>& grads, double lr);
  const OptimConfig& config() const noexcept { return cfg_; }
  long steps() const noexcept { return steps_; }
  const StepTrace& last_trace() const;

  /// Per-coordinate effective momentum learning rate of the last step for
  /// block i. Throws ContractError before the first step.
  Tensor2d effective_lr_coords(std::size_t i) const;
  /// Per-block mean/min/max of effective_lr_coords.
  std::vector<EffectiveLr> effective_lr() const;
  /// Momentum buffer (msgd, sgdll, adam first moment); nullptr for sgd.
  const GradSet<Scalar>* momentum() const;

 private:
  OptimConfig cfg_;
  MomentumState<Scalar> mom_;
  AdamState<Scalar> adam_;
  StepTrace trace_;
  LayoutPtr layout_;
  double last_lr_ = 0.0;
  long steps_ = 0;
};

}  // namespace sgdll
