// SPDX-License-Identifier: Apache-2.0
#include "sgdll/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace sgdll {

void CorpusConfig::validate() const {
  if (vocab < 2) throw ConfigError("corpus: vocab must be >= 2");
  if (!(zipf_s >= 0.0)) throw ConfigError("corpus: zipf_s must be >= 0");
  if (markov_order != 0 && markov_order != 1) throw ConfigError("corpus: markov_order must be 0 or 1");
  if (length < 2) throw ConfigError("corpus: length must be >= 2");
  if (!(local_mix >= 0.0 && local_mix <= 1.0)) throw ConfigError("corpus: local_mix must lie in [0, 1]");
  if (local_width < 1) throw ConfigError("corpus: local_width must be positive");
}

std::vector<double> zipf_probs(int vocab, double s) {
  if (vocab < 1) throw std::invalid_argument("zipf_probs: empty vocabulary");
  if (!(s >= 0.0)) throw std::invalid_argument("zipf_probs: exponent must be >= 0");
  std::vector<double> q(static_cast<std::size_t>(vocab));
  for (int j = 0; j < vocab; ++j) q[static_cast<std::size_t>(j)] = std::pow(static_cast<double>(j + 1), -s);
  const double z = pairwise_sum(q);
  for (double& x : q) x /= z;
  return q;
}

TokenSeq gen_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const auto q = zipf_probs(cfg.vocab, cfg.zipf_s);
  const Categorical cat(q);
  Rng rng(cfg.seed, 0xC0'0000ULL);
  TokenSeq out(cfg.length);
  auto fresh = [&] { return static_cast<std::int32_t>(cat.sample(rng)); };
  out[0] = fresh();
  for (std::size_t t = 1; t < cfg.length; ++t) {
    if (cfg.markov_order == 0 || rng.uniform() >= cfg.local_mix) {
      out[t] = fresh();
      continue;
    }
    const std::int32_t i = out[t - 1];
    const auto w = static_cast<std::uint64_t>(cfg.local_width);
    auto step = static_cast<std::int64_t>(rng.below(2 * w)) - static_cast<std::int64_t>(w);
    if (step >= 0) ++step;  // offsets -w..-1, 1..w
    const std::int64_t j = i + step;
    std::int32_t next = i;
    if (j >= 0 && j < cfg.vocab) {
      const double accept = std::min(1.0, q[static_cast<std::size_t>(j)] / q[static_cast<std::size_t>(i)]);
      if (rng.uniform() < accept) next = static_cast<std::int32_t>(j);
    }
    out[t] = next;
  }
  return out;
}

namespace {

FreqTable finish_table(std::vector<std::uint64_t> counts, std::vector<double> freqs) {
  FreqTable t;
  t.counts = std::move(counts);
  t.freqs = std::move(freqs);
  const auto V = t.freqs.size();
  t.by_rank.resize(V);
  std::iota(t.by_rank.begin(), t.by_rank.end(), 0);
  std::stable_sort(t.by_rank.begin(), t.by_rank.end(),
                   [&](std::int32_t a, std::int32_t b) { return t.freqs[a] > t.freqs[b]; });
  t.rank_of.resize(V);
  for (std::size_t r = 0; r < V; ++r) t.rank_of[static_cast<std::size_t>(t.by_rank[r])] = static_cast<int>(r);
  return t;
}

}  // namespace

FreqTable freq_table(std::span<const std::int32_t> tokens, int vocab) {
  if (vocab < 1) throw std::invalid_argument("freq_table: empty vocabulary");
  if (tokens.empty()) throw std::invalid_argument("freq_table: empty token sequence");
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(vocab), 0);
  for (auto t : tokens) {
    if (t < 0 || t >= vocab) throw std::invalid_argument("freq_table: token id outside vocabulary");
    ++counts[static_cast<std::size_t>(t)];
  }
  std::vector<double> f(counts.size());
  const double n = static_cast<double>(tokens.size());
  for (std::size_t j = 0; j < counts.size(); ++j) f[j] = static_cast<double>(counts[j]) / n;
  return finish_table(std::move(counts), std::move(f));
}

FreqTable freq_table_from_probs(std::span<const double> probs) {
  std::vector<double> f(probs.begin(), probs.end());
  const double z = pairwise_sum(f);
  if (!(z > 0.0)) throw std::invalid_argument("freq_table_from_probs: zero mass");
  for (double& x : f) x /= z;
  std::vector<std::uint64_t> counts(f.size(), 0);
  return finish_table(std::move(counts), std::move(f));
}

CharCorpus char_ingest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("char_ingest: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::invalid_argument("char_ingest: empty file " + path.string());
  std::array<int, 256> id{};
  id.fill(-1);
  for (unsigned char b : bytes) id[b] = 0;
  CharCorpus c;
  for (int b = 0; b < 256; ++b)
    if (id[static_cast<std::size_t>(b)] == 0) {
      id[static_cast<std::size_t>(b)] = static_cast<int>(c.id_to_byte.size());
      c.id_to_byte.push_back(static_cast<unsigned char>(b));
    }
  c.tokens.reserve(bytes.size());
  for (unsigned char b : bytes) c.tokens.push_back(id[b]);
  c.freqs = freq_table(c.tokens, static_cast<int>(c.id_to_byte.size()));
  return c;
}

std::vector<unsigned char> detokenize(const CharCorpus& c, std::span<const std::int32_t> tokens) {
  std::vector<unsigned char> out;
  out.reserve(tokens.size());
  for (auto t : tokens) out.push_back(c.id_to_byte.at(static_cast<std::size_t>(t)));
  return out;
}

Batch next_batch(std::span<const std::int32_t> seq, int batch, int seq_len, Rng& rng) {
  if (batch < 1 || seq_len < 1) throw std::invalid_argument("next_batch: batch and seq_len must be positive");
  if (seq.size() < static_cast<std::size_t>(seq_len) + 1)
    throw std::invalid_argument("next_batch: sequence shorter than seq_len + 1");
  const std::uint64_t starts = seq.size() - static_cast<std::size_t>(seq_len);
  Batch b{batch, seq_len, {}, {}};
  b.inputs.reserve(b.positions());
  b.targets.reserve(b.positions());
  for (int i = 0; i < batch; ++i) {
    const std::size_t s = rng.below(starts);
    b.inputs.insert(b.inputs.end(), seq.begin() + s, seq.begin() + s + seq_len);
    b.targets.insert(b.targets.end(), seq.begin() + s + 1, seq.begin() + s + seq_len + 1);
  }
  return b;
}

std::vector<Batch> sequential_batches(std::span<const std::int32_t> seq, int batch, int seq_len,
                                      std::size_t max_windows) {
  if (batch < 1 || seq_len < 1) throw std::invalid_argument("sequential_batches: bad shape");
  std::vector<Batch> out;
  std::size_t pos = 0, windows = 0;
  Batch cur{0, seq_len, {}, {}};
  while (pos + static_cast<std::size_t>(seq_len) + 1 <= seq.size() && windows < max_windows) {
    cur.inputs.insert(cur.inputs.end(), seq.begin() + pos, seq.begin() + pos + seq_len);
    cur.targets.insert(cur.targets.end(), seq.begin() + pos + 1, seq.begin() + pos + seq_len + 1);
    ++cur.batch;
    ++windows;
    pos += static_cast<std::size_t>(seq_len);
    if (cur.batch == batch) {
      out.push_back(std::move(cur));
      cur = Batch{0, seq_len, {}, {}};
    }
  }
  if (cur.batch > 0) out.push_back(std::move(cur));
  return out;
}

CorpusSplit split_holdout(std::span<const std::int32_t> seq, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_holdout: fraction must lie in (0, 1)");
  const auto n_valid = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(seq.size())));
  return {seq.first(seq.size() - n_valid), seq.last(n_valid)};
}

void save_corpus(const std::filesystem::path& path, std::span<const std::int32_t> tokens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_corpus: cannot write " + path.string());
  for (auto t : tokens) {
    const auto u = static_cast<std::uint32_t>(t);
    const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

TokenSeq load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_corpus: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw ConfigError("load_corpus: size of " + path.string() + " is not a multiple of 4");
  TokenSeq t(bytes.size() / 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t u = bytes[4 * i] | (bytes[4 * i + 1] << 8) | (bytes[4 * i + 2] << 16) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    t[i] = static_cast<std::int32_t>(u);
  }
  return t;
}

void write_freq_csv(const std::filesystem::path& path, const FreqTable& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_freq_csv: cannot write " + path.string());
  out << "token_id,count,freq,rank\n" << std::setprecision(17);
  for (std::size_t j = 0; j < t.freqs.size(); ++j)
    out << j << ',' << t.counts[j] << ',' << t.freqs[j] << ',' << t.rank_of[j] << '\n';
}

}  // namespace sgdll
