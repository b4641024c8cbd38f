// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: train, sweep, verify-theory, ablate-clipping, report.
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "sgdll/harness.hpp"

namespace fs = std::filesystem;
using namespace sgdll;

namespace {

void set_log_level() {
  const char* env = std::getenv("SGDLL_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
}

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> parallel;
};

RunConfig load(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.seed) {
    cfg.train.seeds = {*c.seed};
    cfg.sweep.seed.clear();
  }
  if (c.parallel) cfg.sweep.parallel = *c.parallel;
  cfg.validate();
  return cfg;
}

int cmd_train(const Common& c) {
  const auto cfg = load(c);
  bool all_diverged = true;
  for (auto seed : cfg.train.seeds) {
    const fs::path dir = cfg.train.seeds.size() == 1 ? fs::path(cfg.out_dir) : fs::path(cfg.out_dir) / ("seed" + std::to_string(seed));
    const auto r = train_run(cfg, seed, dir);
    all_diverged = all_diverged && r.summary.diverged;
  }
  return all_diverged ? kExitAllDiverged : kExitOk;
}

int cmd_sweep(const Common& c) {
  const auto cfg = load(c);
  const auto rows = run_sweep(cfg, cfg.out_dir, cfg.sweep.parallel);
  for (const auto& r : rows)
    if (!r.diverged) return kExitOk;
  return kExitAllDiverged;
}

int cmd_verify(const Common& c) {
  const auto cfg = load(c);
  fs::create_directories(cfg.out_dir);
  const auto res = run_theory_campaign(cfg.theory, [](const TheoryRow& r) {
    spdlog::debug("{} seed={} V={} B={} lhs={} rhs={} {}", r.check, r.world_seed, r.V, r.B, r.lhs, r.rhs, r.status);
  });
  write_theory_csv((fs::path(cfg.out_dir) / "theory_report.csv").string(), res.rows);
  spdlog::info("theorem1 output {}/{}, intermediate {}/{}, lemmas {}/{}, theorem2 {}/{} ({} vacuous), "
               "ratio growth {}/{}, slopes {:.3f} / {:.3f}",
               res.output_pass, res.output_total, res.intermediate_pass, res.intermediate_total, res.lemma_pass,
               res.lemma_total, res.theorem2_pass, res.theorem2_total - res.theorem2_vacuous, res.theorem2_vacuous,
               res.monotone_pass, res.monotone_total, res.lhs_slope, res.wsg_slope);
  return res.all_pass() ? kExitOk : kExitVerification;
}

int cmd_ablate(const Common& c) {
  const auto cfg = load(c);
  const auto arms = run_ablation(cfg, cfg.out_dir, cfg.sweep.parallel);
  bool all = true;
  for (const auto& a : arms) {
    std::cout << a.name << " tau=" << format_real(a.tau) << " delta=" << format_real(a.delta)
              << " val_loss=" << format_real(a.summary.val_loss)
              << (a.summary.diverged ? " diverged@" + std::to_string(a.summary.divergence_step) : "") << '\n';
    all = all && a.summary.diverged;
  }
  return all ? kExitAllDiverged : kExitOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const auto rows = load_report(paths);
  std::cout << render_report(rows);
  if (!out.empty()) {
    fs::create_directories(out);
    write_report_csv(fs::path(out) / "report.csv", rows);
  }
  for (const auto& r : rows)
    if (!r.present) return kExitConfig;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level();
  CLI::App app{"Tiny-model laboratory for SGD with layer-wise and token-wise clipping"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI run configuration")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", common.seed, "override the seed list with one seed");
    sub->add_option("--parallel", common.parallel, "concurrent sweep cells")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("train", "one training run per configured seed");
  auto* sweep = app.add_subcommand("sweep", "cross product of the [sweep] axes");
  auto* verify = app.add_subcommand("verify-theory", "Monte Carlo verification campaign");
  auto* ablate = app.add_subcommand("ablate-clipping", "both / layer-only / token-only / neither clipping arms");
  for (auto* s : {train, sweep, verify, ablate}) add_common(s);
  auto* report = app.add_subcommand("report", "summary table over run directories");
  std::vector<std::string> dirs;
  std::string report_out;
  report->add_option("dirs", dirs, "run or sweep directories")->required();
  report->add_option("--out", report_out, "directory for report.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  try {
    if (*train) return cmd_train(common);
    if (*sweep) return cmd_sweep(common);
    if (*verify) return cmd_verify(common);
    if (*ablate) return cmd_ablate(common);
    if (*report) return cmd_report(dirs, report_out);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
