// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sgdll/models.hpp"

namespace sgdll {

using TokenSeq = std::vector<std::int32_t>;

struct CorpusConfig {
  int vocab = 512;
  double zipf_s = 1.1;
  int markov_order = 1;
  std::size_t length = 5'000'000;
  std::uint64_t seed = 0;
  // order-1 chain: probability of a local Metropolis move (else a fresh Zipf draw)
  double local_mix = 0.7;
  // half-width of the local proposal, in ranks
  int local_width = 4;

  void validate() const;
};

/// q_j proportional to (j+1)^-s over ids 0..V-1 (id 0 is the most frequent).
std::vector<double> zipf_probs(int vocab, double s);

/// Order 0: i.i.d. Zipf draws. Order 1: a chain mixing a Metropolis kernel with
/// +-local_width rank proposals and independent Zipf draws. Both components
/// leave the Zipf vector invariant, so the stationary marginal is Zipf.
TokenSeq gen_corpus(const CorpusConfig& cfg);

struct FreqTable {
  std::vector<std::uint64_t> counts;
  std::vector<double> freqs;
  std::vector<std::int32_t> by_rank;  // token ids, most frequent first (ties by id)
  std::vector<int> rank_of;           // inverse of by_rank

  int vocab() const { return static_cast<int>(freqs.size()); }
};

FreqTable freq_table(std::span<const std::int32_t> tokens, int vocab);
/// Table over a known probability vector (theory worlds).
FreqTable freq_table_from_probs(std::span<const double> probs);

struct CharCorpus {
  TokenSeq tokens;
  std::vector<unsigned char> id_to_byte;  // sorted byte values present in the file
  FreqTable freqs;
};

/// Byte-level ingestion with compacted, sorted ids. Throws on empty files.
CharCorpus char_ingest(const std::filesystem::path& path);
std::vector<unsigned char> detokenize(const CharCorpus& c, std::span<const std::int32_t> tokens);

/// B windows drawn uniformly with replacement; targets are the one-step shift.
Batch next_batch(std::span<const std::int32_t> seq, int batch, int seq_len, Rng& rng);

/// Consecutive non-overlapping windows from the start of seq (at most max_windows).
std::vector<Batch> sequential_batches(std::span<const std::int32_t> seq, int batch, int seq_len,
                                      std::size_t max_windows);

struct CorpusSplit {
  std::span<const std::int32_t> train;
  std::span<const std::int32_t> valid;
};
/// The final `fraction` of the sequence is held out.
CorpusSplit split_holdout(std::span<const std::int32_t> seq, double fraction);

/// Little-endian 32-bit ids.
void save_corpus(const std::filesystem::path& path, std::span<const std::int32_t> tokens);
TokenSeq load_corpus(const std::filesystem::path& path);
/// token_id,count,freq,rank
void write_freq_csv(const std::filesystem::path& path, const FreqTable& t);

}  // namespace sgdll
