// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sgdll/numcore.hpp"

namespace sgdll {

enum class ModelKind { transformer, linear_softmax, mlp1 };
enum class Activation { gelu, relu };
enum class BlockKind { embedding, attention, mlp, norm, output };

std::string_view to_string(ModelKind k);
std::string_view to_string(Activation a);
std::string_view to_string(BlockKind k);
ModelKind parse_model_kind(std::string_view s);
Activation parse_activation(std::string_view s);

struct ModelConfig {
  ModelKind kind = ModelKind::transformer;
  int vocab = 512;
  int width = 64;
  int depth = 2;  // transformer blocks; 0 is embedding + head only
  int heads = 4;
  int seq_len = 64;
  bool tie_embeddings = false;
  Activation activation = Activation::gelu;
  double init_std = 0.02;
  // Seed of the frozen input-feature table used by the two classifier kinds.
  std::uint64_t feature_seed = 0;

  /// Throws ConfigError when the configuration cannot be built.
  void validate() const;
};

struct BlockInfo {
  std::string name;
  BlockKind kind;
  int layer;  // 0 for embeddings, 1..L for transformer blocks, L+1 for the head side
  Eigen::Index rows;
  Eigen::Index cols;
};

/// Ordered block descriptions shared by a parameter set and its gradients.
class Layout {
 public:
  explicit Layout(std::vector<BlockInfo> blocks);

  std::size_t size() const noexcept { return blocks_.size(); }
  const BlockInfo& operator[](std::size_t i) const { return blocks_[i]; }
  const std::vector<BlockInfo>& blocks() const noexcept { return blocks_; }
  /// Index of the named block; throws std::out_of_range when absent.
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;
  /// Index of the unique block tagged output; throws ConfigError otherwise.
  std::size_t output_index() const;
  bool operator==(const Layout& other) const;

 private:
  std::vector<BlockInfo> blocks_;
};

using LayoutPtr = std::shared_ptr<const Layout>;

struct ParamTag {};
struct GradTag {};

/// A named, ordered collection of dense blocks over a fixed layout.
template <typename Scalar, typename Tag>
class BlockSet {
 public:
  using scalar_type = Scalar;

  BlockSet() = default;
  BlockSet(LayoutPtr layout, std::vector<Tensor2<Scalar>> tensors)
      : layout_(std::move(layout)), tensors_(std::move(tensors)) {
    if (!layout_) throw ContractError("BlockSet: null layout");
    if (tensors_.size() != layout_->size()) throw ContractError("BlockSet: block count differs from layout");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& b = (*layout_)[i];
      if (tensors_[i].rows() != b.rows || tensors_[i].cols() != b.cols)
        throw ContractError("BlockSet: shape mismatch for block " + b.name);
    }
  }

  static BlockSet zeros(LayoutPtr layout) {
    std::vector<Tensor2<Scalar>> t;
    t.reserve(layout->size());
    for (const auto& b : layout->blocks()) t.push_back(Tensor2<Scalar>::Zero(b.rows, b.cols));
    return BlockSet(std::move(layout), std::move(t));
  }

  template <typename OtherTag>
  static BlockSet zeros_like(const BlockSet<Scalar, OtherTag>& other) {
    return zeros(other.layout_ptr());
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  const Layout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const noexcept { return layout_; }
  const BlockInfo& info(std::size_t i) const { return (*layout_)[i]; }

  Tensor2<Scalar>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor2<Scalar>& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor2<Scalar>& at(std::string_view name) { return tensors_[layout_->index(name)]; }
  const Tensor2<Scalar>& at(std::string_view name) const { return tensors_[layout_->index(name)]; }

  template <typename OtherScalar, typename OtherTag>
  bool same_layout(const BlockSet<OtherScalar, OtherTag>& other) const {
    return layout_ == other.layout_ptr() || (layout_ && other.layout_ptr() && *layout_ == other.layout());
  }

  template <typename OtherScalar>
  BlockSet<OtherScalar, Tag> cast() const {
    std::vector<Tensor2<OtherScalar>> t;
    t.reserve(tensors_.size());
    for (const auto& x : tensors_) t.push_back(x.template cast<OtherScalar>());
    return BlockSet<OtherScalar, Tag>(layout_, std::move(t));
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  bool operator==(const BlockSet& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i] != other.tensors_[i]) return false;
    return true;
  }

 private:
  LayoutPtr layout_;
  std::vector<Tensor2<Scalar>> tensors_;
};

template <typename Scalar>
using ParamSet = BlockSet<Scalar, ParamTag>;
template <typename Scalar>
using GradSet = BlockSet<Scalar, GradTag>;

/// Throws ContractError unless both sets share a layout.
template <typename A, typename B>
void require_same_layout(const A& a, const B& b, const char* where) {
  if (!a.same_layout(b)) throw ContractError(std::string(where) + ": block layouts differ");
}

/// B windows of seq_len tokens with next-token targets, stored row-major.
struct Batch {
  int batch = 0;
  int seq_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;

  std::int32_t input(int b, int t) const { return inputs[static_cast<std::size_t>(b * seq_len + t)]; }
  std::int32_t target(int b, int t) const { return targets[static_cast<std::size_t>(b * seq_len + t)]; }
  std::size_t positions() const { return static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq_len); }
  /// Throws std::invalid_argument on inconsistent sizes or ids >= vocab.
  void validate(int vocab) const;
};

/// Block layout implied by a configuration (names, tags and shapes).
LayoutPtr make_layout(const ModelConfig& cfg);

/// Gaussian(0, init_std) weights, unit norm gains. Deterministic in (cfg, rng).
template <typename Scalar>
ParamSet<Scalar> init_params(const ModelConfig& cfg, Rng rng);

/// Frozen V x d feature table the classifier kinds read their inputs from.
Tensor2d classifier_features(const ModelConfig& cfg);

/// Activations retained by forward_loss for backward. Opaque to callers apart
/// from the few read-only views below.
template <typename Scalar>
class ForwardCache {
 public:
  /// Per-position cross-entropy, row-major over (batch, position).
  const std::vector<double>& position_losses() const noexcept { return position_losses_; }
  /// Inputs to the output head, one row per position.
  const Tensor2<Scalar>& head_inputs() const noexcept { return head_inputs_; }
  /// Softmax probabilities, one row per position.
  const Tensor2<Scalar>& probs() const noexcept { return probs_; }

 private:
  template <typename S>
  friend struct ModelKernels;

  std::uint64_t fingerprint_ = 0;
  std::vector<double> position_losses_;
  Tensor2<Scalar> head_inputs_;
  Tensor2<Scalar> probs_;

  // transformer
  struct LayerCache {
    Tensor2<Scalar> x_attn_in, attn_rinv, attn_norm_out, qkv, attn_out;
    std::vector<Tensor2<Scalar>> attn_probs;  // (batch * heads) matrices of seq_len x seq_len
    Tensor2<Scalar> x_mlp_in, mlp_rinv, mlp_norm_out, mlp_pre, mlp_act;
  };
  std::vector<LayerCache> layers_;
  Tensor2<Scalar> x_final_in, final_rinv;

  // mlp1
  Tensor2<Scalar> features_, hidden_pre_;
};

template <typename Scalar>
struct ForwardResult {
  double loss = 0.0;
  ForwardCache<Scalar> cache;
};

/// Mean next-token cross-entropy over all batch positions.
/// Throws DivergenceError when logits turn non-finite.
template <typename Scalar>
ForwardResult<Scalar> forward_loss(const ParamSet<Scalar>& params, const ModelConfig& cfg, const Batch& batch);

/// Exact gradient of the mean cross-entropy. Throws ContractError when the
/// cache was produced from different parameters or a different batch.
template <typename Scalar>
GradSet<Scalar> backward(const ParamSet<Scalar>& params, const ModelConfig& cfg, const ForwardCache<Scalar>& cache,
                         const Batch& batch);

/// Per-token-class output-head gradients: row j is
/// (1/N) sum_n (p_j(h_n) - 1{y_n = j}) h_n, plus the row norms.
template <typename Scalar>
struct TokenGrads {
  Tensor2<Scalar> rows;
  std::vector<double> norms;
};

template <typename Scalar>
TokenGrads<Scalar> output_head_token_grads(const ParamSet<Scalar>& params, const ModelConfig& cfg,
                                           const Batch& batch);

/// Rows (1/N) sum_n (probs_n - e_{y_n}) h_n^T for given head inputs and
/// probabilities; the building block of output_head_token_grads.
template <typename Scalar>
Tensor2<Scalar> head_token_grads(const Tensor2<Scalar>& h, const Tensor2<Scalar>& probs,
                                 std::span<const std::int32_t> targets);

/// Row norms of an already computed output-head gradient.
template <typename Scalar>
std::vector<double> row_norms(const Tensor2<Scalar>& rows);

struct FdReport {
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t coordinates = 0;
};

/// Central finite differences on up to `coords_per_block` coordinates per block
/// (all of them for small blocks). The relative error of a coordinate is
/// |fd - analytic| / max(|fd|, |analytic|, 1e-3).
FdReport fd_check(const ParamSet<double>& params, const ModelConfig& cfg, const Batch& batch, double eps,
                  std::uint64_t seed = 0, std::size_t coords_per_block = 200);

}  // namespace sgdll
