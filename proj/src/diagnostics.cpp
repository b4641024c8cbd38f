// SPDX-License-Identifier: Apache-2.0
#include "sgdll/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace sgdll {

namespace {

double median(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + n / 2, v.end());
  const double hi = v[n / 2];
  if (n % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + n / 2);
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<std::size_t> spike_detect(std::span<const double> series, double k, int window) {
  if (window < 8) throw std::invalid_argument("spike_detect: window must be >= 8");
  std::vector<std::size_t> out;
  for (std::size_t t = SpikeDetector::kMinHistory; t < series.size(); ++t) {
    const std::size_t from = t > static_cast<std::size_t>(window) ? t - static_cast<std::size_t>(window) : 0;
    const double med = median(std::vector<double>(series.begin() + from, series.begin() + t));
    if (series[t] > k * med) out.push_back(t);
  }
  return out;
}

SpikeDetector::SpikeDetector(std::vector<std::string> names, double k, int window)
    : names_(std::move(names)), k_(k), window_(window), hist_(names_.size()) {
  if (window_ < 8) throw std::invalid_argument("spike detector: window must be >= 8");
}

std::vector<SpikeFlag> SpikeDetector::observe(std::span<const double> values) {
  if (values.size() != names_.size()) throw ContractError("spike detector: series count changed");
  std::vector<SpikeFlag> flags;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& h = hist_[i];
    if (h.size() >= static_cast<std::size_t>(kMinHistory)) {
      const double med = median(std::vector<double>(h.begin(), h.end()));
      if (values[i] > k_ * med) flags.push_back({names_[i], med > 0 ? values[i] / med : std::numeric_limits<double>::infinity()});
    }
    h.push_back(values[i]);
    if (h.size() > static_cast<std::size_t>(window_)) h.pop_front();
  }
  return flags;
}

int frequency_decile(const FreqTable& freqs, std::int32_t token) {
  const auto V = static_cast<long>(freqs.vocab());
  return static_cast<int>(static_cast<long>(freqs.rank_of.at(static_cast<std::size_t>(token))) * 10 / V);
}

double imbalance_ratio(std::span<const double> norms) {
  if (norms.empty()) throw std::invalid_argument("imbalance_ratio: empty");
  const double mean = pairwise_sum(norms) / static_cast<double>(norms.size());
  if (mean == 0.0) return 1.0;
  return std::max(1.0, *std::max_element(norms.begin(), norms.end()) / mean);
}

TokenClassStats token_class_report(std::span<const double> norms, const FreqTable& freqs,
                                   std::span<const std::int32_t> targets, std::span<const double> position_losses,
                                   long step) {
  if (norms.size() != freqs.freqs.size())
    throw std::invalid_argument("token_class_report: frequency table does not cover the vocabulary");
  if (targets.size() != position_losses.size())
    throw std::invalid_argument("token_class_report: targets and losses differ in length");
  TokenClassStats s;
  s.step = step;
  s.norms.assign(norms.begin(), norms.end());
  s.imbalance_ratio = imbalance_ratio(norms);
  std::array<std::vector<double>, 10> losses, qn;
  for (std::size_t n = 0; n < targets.size(); ++n)
    losses[static_cast<std::size_t>(frequency_decile(freqs, targets[n]))].push_back(position_losses[n]);
  for (std::size_t j = 0; j < norms.size(); ++j)
    qn[static_cast<std::size_t>(frequency_decile(freqs, static_cast<std::int32_t>(j)))].push_back(norms[j]);
  for (std::size_t q = 0; q < 10; ++q) {
    s.quantile_counts[q] = losses[q].size();
    s.quantile_mean_loss[q] =
        losses[q].empty() ? std::nan("") : pairwise_sum(losses[q]) / static_cast<double>(losses[q].size());
    s.quantile_mean_norm[q] = qn[q].empty() ? std::nan("") : pairwise_sum(qn[q]) / static_cast<double>(qn[q].size());
  }
  return s;
}

std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

namespace {

std::ofstream open_csv(const std::filesystem::path& p, const std::string& header) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << header << '\n' << std::flush;
  return out;
}

}  // namespace

std::string MetricsWriter::metrics_header(const Layout& layout) {
  std::string h = "step,lr,loss,val_loss,grad_norm,distance_from_init,wsg_ratio,wm_ratio,spikes";
  for (const char* col : {"grad_rms", "update_rms", "wsg_ratio", "wm_ratio", "efflr_mean", "efflr_min", "efflr_max"})
    for (const auto& b : layout.blocks()) h += std::string(",") + col + "/" + b.name;
  return h;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& dir, const Layout& layout) : blocks_(layout.size()) {
  std::filesystem::create_directories(dir);
  metrics_ = open_csv(dir / "metrics.csv", metrics_header(layout));
  tokens_ = open_csv(dir / "token_stats.csv", "step,token_id,grad_norm");
  quantiles_ = open_csv(dir / "quantiles.csv", "step,quantile,mean_loss,count");
  spikes_ = open_csv(dir / "spikes.csv", "step,layer,ratio");
}

void MetricsWriter::write(const MetricsRecord& r) {
  std::string line = std::to_string(r.step);
  auto add = [&](double x) {
    line += ',';
    line += format_real(x);
  };
  add(r.lr);
  add(r.loss);
  line += ',';
  if (r.val_loss) line += format_real(*r.val_loss);
  add(r.grad_norm);
  add(r.distance_from_init);
  add(r.wsg_ratio);
  add(r.wm_ratio);
  line += ',' + std::to_string(r.spikes);
  auto add_all = [&](const std::vector<double>& v) {
    for (std::size_t i = 0; i < blocks_; ++i) i < v.size() ? add(v[i]) : void(line += ',');
  };
  add_all(r.grad_rms);
  add_all(r.update_rms);
  add_all(r.wsg_block);
  add_all(r.wm_block);
  for (int which = 0; which < 3; ++which)
    for (std::size_t i = 0; i < blocks_; ++i) {
      if (i >= r.eff_lr.size()) {
        line += ',';
        continue;
      }
      const auto& e = r.eff_lr[i];
      add(which == 0 ? e.mean : which == 1 ? e.min : e.max);
    }
  metrics_ << line << '\n' << std::flush;
}

void MetricsWriter::write_tokens(const TokenClassStats& s) {
  for (std::size_t j = 0; j < s.norms.size(); ++j)
    tokens_ << s.step << ',' << j << ',' << format_real(s.norms[j]) << '\n';
  tokens_ << std::flush;
  for (std::size_t q = 0; q < 10; ++q) {
    quantiles_ << s.step << ',' << q << ',';
    if (s.quantile_counts[q] > 0) quantiles_ << format_real(s.quantile_mean_loss[q]);
    quantiles_ << ',' << s.quantile_counts[q] << '\n';
  }
  quantiles_ << std::flush;
}

void MetricsWriter::write_spikes(long step, const std::vector<SpikeFlag>& flags) {
  for (const auto& f : flags) spikes_ << step << ',' << f.block << ',' << format_real(f.ratio) << '\n';
  if (!flags.empty()) spikes_ << std::flush;
}

}  // namespace sgdll
