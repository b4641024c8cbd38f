// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sgdll/data.hpp"
#include "sgdll/diagnostics.hpp"
#include "sgdll/models.hpp"
#include "sgdll/optim.hpp"
#include "sgdll/theory.hpp"

namespace sgdll {

enum class Precision { float32, float64 };

struct DataConfig {
  std::string corpus_path;  // little-endian u32 ids; overrides the generator
  std::string text_path;    // byte-level text; overrides the generator
  CorpusConfig gen;         // gen.vocab is taken from the model section
  double holdout_fraction = 0.02;
};

struct TrainConfig {
  int steps = 2000;
  int batch = 64;
  std::vector<std::uint64_t> seeds{0};
  Precision precision = Precision::float32;
  int eval_count = 10;              // evaluations spread evenly over the run
  std::size_t eval_windows = 1024;  // held-out windows per evaluation
  int token_stats_every = 50;
  double spike_k = 5.0;
  int spike_window = 64;
  double divergence_factor = 10.0;
  int divergence_patience = 50;
};

struct SweepConfig {
  std::vector<double> lr;
  // per-optimizer grids (keys lr_sgd, lr_msgd, lr_adam, lr_sgdll); they replace `lr` for that optimizer
  std::map<OptimizerKind, std::vector<double>> lr_by_optimizer;
  std::vector<int> batch;
  std::vector<OptimizerKind> optimizer;
  std::vector<std::uint64_t> seed;
  int parallel = 1;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  OptimConfig optim;
  TrainConfig train;
  SweepConfig sweep;
  TheoryCampaign theory;
  std::string out_dir = "runs/default";

  void validate() const;
};

/// Flat INI text: [model] [data] [optim] [train] [sweep] [theory] [output].
/// Unknown sections or keys raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical INI rendering; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& c);
/// FNV-1a of to_ini, as 16 hex digits.
std::string config_hash(const RunConfig& c);

struct RunSummary {
  std::string optimizer;
  double lr = 0.0;
  int batch = 0;
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double best_loss = 0.0;
  double val_loss = 0.0;  // NaN when no evaluation completed
  bool diverged = false;
  long divergence_step = -1;
  std::string divergence_reason;
  long steps_completed = 0;
  double distance_from_init = 0.0;
  double mean_wsg_ratio = 0.0;
  double wall_clock_seconds = 0.0;
  std::string config_hash;
};

struct RunResult {
  RunSummary summary;
  std::vector<long> spike_steps;              // one entry per flag
  std::vector<TokenClassStats> token_stats;   // every token_stats_every steps
  std::vector<double> wsg_ratio;              // global, per step
  std::vector<double> loss;                   // per step
  double max_update_rms_over_tau = 0.0;       // sgdll only
  double max_clipped_row_norm = 0.0;          // sgdll only
  std::optional<ParamSet<double>> final_params;
};

/// Corpus for a config (generated corpora are cached in-process).
std::shared_ptr<const TokenSeq> corpus_for(const DataConfig& d, const ModelConfig& m);

/// One training run. With out_dir non-empty the CSV logs and summary.json
/// are written there. Divergence is reported in the summary, not thrown.
RunResult train_run(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir,
                    bool keep_params = false);

struct SweepCell {
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::string name;
};

std::vector<SweepCell> sweep_cells(const RunConfig& base);
/// Runs every cell (up to `parallel` at a time) and writes sweep.csv.
std::vector<RunSummary> run_sweep(const RunConfig& base, const std::filesystem::path& out_dir, int parallel);

struct AblationArm {
  std::string name;
  double tau;
  double delta;
  RunSummary summary;
};
/// Both clips, layer only, token only, neither; writes ablation.csv.
std::vector<AblationArm> run_ablation(const RunConfig& base, const std::filesystem::path& out_dir, int parallel);

struct ReportRow {
  std::string dir;
  bool present = false;
  RunSummary summary;
  double perplexity = 0.0;
  double gap_to_adam = 0.0;  // NaN without an adam row
};

/// Relative gaps (loss - loss_adam) / loss_adam and perplexities exp(loss).
std::vector<ReportRow> make_report(std::vector<ReportRow> rows);
std::vector<ReportRow> load_report(const std::vector<std::filesystem::path>& dirs);
std::string render_report(const std::vector<ReportRow>& rows);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

void write_summary_json(const std::filesystem::path& path, const RunSummary& s);
RunSummary read_summary_json(const std::filesystem::path& path);

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitVerification = 3, kExitAllDiverged = 4 };

}  // namespace sgdll
