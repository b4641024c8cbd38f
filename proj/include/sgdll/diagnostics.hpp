// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sgdll/data.hpp"
#include "sgdll/models.hpp"
#include "sgdll/optim.hpp"

namespace sgdll {

/// ||w||_F / ||g||_F per block and for the concatenation. A zero denominator
/// gives +inf and sets the flag.
struct RatioReport {
  std::vector<double> per_block;
  std::vector<bool> infinite;
  double global = 0.0;
};

template <typename Scalar, typename TagA, typename TagB>
RatioReport norm_ratio(const BlockSet<Scalar, TagA>& num, const BlockSet<Scalar, TagB>& den) {
  require_same_layout(num, den, "norm_ratio");
  RatioReport r;
  double sn = 0.0, sd = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    const double a = sum_squares(num[i], num.info(i).name);
    const double b = sum_squares(den[i], den.info(i).name);
    sn += a;
    sd += b;
    r.infinite.push_back(b == 0.0);
    r.per_block.push_back(b == 0.0 ? std::numeric_limits<double>::infinity() : std::sqrt(a / b));
  }
  r.global = sd == 0.0 ? std::numeric_limits<double>::infinity() : std::sqrt(sn / sd);
  return r;
}

template <typename Scalar>
RatioReport weight_sg_ratio(const ParamSet<Scalar>& params, const GradSet<Scalar>& grads) {
  return norm_ratio(params, grads);
}

/// ||w - w0||_F over all blocks.
template <typename Scalar>
double distance_from_init(const ParamSet<Scalar>& params, const ParamSet<Scalar>& params0) {
  require_same_layout(params, params0, "distance_from_init");
  double s = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    s += sum_squares((params[i].template cast<double>() - params0[i].template cast<double>()).eval(),
                     params.info(i).name);
  return std::sqrt(s);
}

/// Indices t where series[t] > k * median(series[t-window .. t-1]). At least
/// kMinHistory earlier values are required before anything can be flagged;
/// the window shrinks to the available history until it is full.
std::vector<std::size_t> spike_detect(std::span<const double> series, double k, int window);

struct SpikeFlag {
  std::string block;
  double ratio = 0.0;  // value / trailing median
};

/// Streaming form of spike_detect over several named series.
class SpikeDetector {
 public:
  static constexpr int kMinHistory = 8;
  SpikeDetector(std::vector<std::string> names, double k = 5.0, int window = 64);
  std::vector<SpikeFlag> observe(std::span<const double> values);

 private:
  std::vector<std::string> names_;
  double k_;
  int window_;
  std::vector<std::deque<double>> hist_;
};

struct TokenClassStats {
  long step = 0;
  std::vector<double> norms;
  double imbalance_ratio = 1.0;
  std::array<double, 10> quantile_mean_loss{};  // NaN when the quantile has no targets
  std::array<std::size_t, 10> quantile_counts{};
  std::array<double, 10> quantile_mean_norm{};
};

/// Decile of a token under corpus-wide frequency ranks; 0 = most frequent 10%.
int frequency_decile(const FreqTable& freqs, std::int32_t token);

/// max_j n_j / mean_j n_j (1 when every norm is zero).
double imbalance_ratio(std::span<const double> norms);

TokenClassStats token_class_report(std::span<const double> norms, const FreqTable& freqs,
                                   std::span<const std::int32_t> targets, std::span<const double> position_losses,
                                   long step = 0);

/// Shortest round-trip decimal; "inf"/"-inf"/"nan" for non-finite values.
std::string format_real(double x);

/// One training step's diagnostics.
struct MetricsRecord {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_loss;
  double grad_norm = 0.0;
  double distance_from_init = 0.0;
  double wsg_ratio = 0.0;
  double wm_ratio = 0.0;
  std::vector<double> grad_rms;
  std::vector<double> update_rms;
  std::vector<double> wsg_block;
  std::vector<double> wm_block;
  std::vector<EffectiveLr> eff_lr;
  std::size_t spikes = 0;
};

/// Writers for the documented CSV files. Rows are flushed as written so a
/// divergence never leaves a partial line behind.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& dir, const Layout& layout);
  void write(const MetricsRecord& r);
  void write_tokens(const TokenClassStats& s);
  void write_spikes(long step, const std::vector<SpikeFlag>& flags);

  static std::string metrics_header(const Layout& layout);

 private:
  std::ofstream metrics_, tokens_, quantiles_, spikes_;
  std::size_t blocks_;
};

}  // namespace sgdll
