// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <stdexcept>

#include "sgdll/models.hpp"

namespace sgdll {

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::transformer: return "transformer";
    case ModelKind::linear_softmax: return "linear_softmax";
    case ModelKind::mlp1: return "mlp1";
  }
  return "?";
}

std::string_view to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::embedding: return "embedding";
    case BlockKind::attention: return "attention";
    case BlockKind::mlp: return "mlp";
    case BlockKind::norm: return "norm";
    case BlockKind::output: return "output";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "transformer") return ModelKind::transformer;
  if (s == "linear_softmax") return ModelKind::linear_softmax;
  if (s == "mlp1") return ModelKind::mlp1;
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

Activation parse_activation(std::string_view s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
  if (width < 1) throw ConfigError("model: width must be positive");
  if (seq_len < 1) throw ConfigError("model: seq_len must be positive");
  if (!(init_std >= 0.0)) throw ConfigError("model: init_std must be nonnegative");
  if (kind == ModelKind::transformer) {
    if (depth < 0) throw ConfigError("model: depth must be nonnegative");
    if (heads < 1) throw ConfigError("model: heads must be positive");
    if (width % heads != 0)
      throw ConfigError("model: width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  } else if (tie_embeddings) {
    throw ConfigError("model: tie_embeddings only applies to the transformer");
  }
}

void Batch::validate(int vocab) const {
  if (batch < 1 || seq_len < 1) throw std::invalid_argument("batch: empty batch");
  if (inputs.size() != positions() || targets.size() != positions())
    throw std::invalid_argument("batch: token arrays do not match batch x seq_len");
  auto bad = [vocab](std::int32_t t) { return t < 0 || t >= vocab; };
  if (std::any_of(inputs.begin(), inputs.end(), bad) || std::any_of(targets.begin(), targets.end(), bad))
    throw std::invalid_argument("batch: token id outside vocabulary");
}

Layout::Layout(std::vector<BlockInfo> blocks) : blocks_(std::move(blocks)) {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    for (std::size_t j = i + 1; j < blocks_.size(); ++j)
      if (blocks_[i].name == blocks_[j].name) throw ContractError("layout: duplicate block " + blocks_[i].name);
}

std::size_t Layout::index(std::string_view name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].name == name) return i;
  throw std::out_of_range("layout: no block named '" + std::string(name) + "'");
}

bool Layout::contains(std::string_view name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const BlockInfo& b) { return b.name == name; });
}

std::size_t Layout::output_index() const {
  std::size_t found = blocks_.size();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].kind != BlockKind::output) continue;
    if (found != blocks_.size()) throw ConfigError("layout: more than one block tagged output");
    found = i;
  }
  if (found == blocks_.size()) throw ConfigError("layout: no block tagged output");
  return found;
}

bool Layout::operator==(const Layout& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& a = blocks_[i];
    const auto& b = other.blocks_[i];
    if (a.name != b.name || a.kind != b.kind || a.layer != b.layer || a.rows != b.rows || a.cols != b.cols)
      return false;
  }
  return true;
}

LayoutPtr make_layout(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index V = cfg.vocab, d = cfg.width;
  std::vector<BlockInfo> b;
  switch (cfg.kind) {
    case ModelKind::linear_softmax:
      b.push_back({"output_head", BlockKind::output, 1, V, d});
      break;
    case ModelKind::mlp1:
      b.push_back({"hidden", BlockKind::mlp, 1, d, d});
      b.push_back({"output_head", BlockKind::output, 2, V, d});
      break;
    case ModelKind::transformer: {
      const int L = cfg.depth;
      b.push_back({"embed", cfg.tie_embeddings ? BlockKind::output : BlockKind::embedding, 0, V, d});
      b.push_back({"pos_embed", BlockKind::embedding, 0, cfg.seq_len, d});
      for (int l = 1; l <= L; ++l) {
        const std::string p = "block" + std::to_string(l);
        b.push_back({p + ".attn_norm", BlockKind::norm, l, 1, d});
        b.push_back({p + ".attn.qkv", BlockKind::attention, l, 3 * d, d});
        b.push_back({p + ".attn.proj", BlockKind::attention, l, d, d});
        b.push_back({p + ".mlp_norm", BlockKind::norm, l, 1, d});
        b.push_back({p + ".mlp.fc", BlockKind::mlp, l, 4 * d, d});
        b.push_back({p + ".mlp.proj", BlockKind::mlp, l, d, 4 * d});
      }
      b.push_back({"final_norm", BlockKind::norm, L + 1, 1, d});
      if (!cfg.tie_embeddings) b.push_back({"output_head", BlockKind::output, L + 1, V, d});
      break;
    }
  }
  return std::make_shared<const Layout>(std::move(b));
}

template <typename Scalar>
ParamSet<Scalar> init_params(const ModelConfig& cfg, Rng rng) {
  auto layout = make_layout(cfg);
  std::vector<Tensor2<Scalar>> t;
  t.reserve(layout->size());
  for (const auto& b : layout->blocks()) {
    if (b.kind == BlockKind::norm)
      t.push_back(Tensor2<Scalar>::Ones(b.rows, b.cols));
    else
      t.push_back(gaussian<Scalar>(b.rows, b.cols, cfg.init_std, rng));
  }
  return ParamSet<Scalar>(std::move(layout), std::move(t));
}

template ParamSet<float> init_params<float>(const ModelConfig&, Rng);
template ParamSet<double> init_params<double>(const ModelConfig&, Rng);

Tensor2d classifier_features(const ModelConfig& cfg) {
  Rng rng(cfg.feature_seed, 0xFEA7'0000ULL);
  return gaussian<double>(cfg.vocab, cfg.width, 1.0, rng);
}

}  // namespace sgdll
