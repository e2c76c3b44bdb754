#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "mfeit/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CommonOptions {
  std::string config_path;
  std::string out_override;
  int64_t seed_override = -1;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& opt) {
  cmd->add_option("config", opt.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", opt.out_override, "output directory (overrides config)");
  cmd->add_option("--seed", opt.seed_override, "random seed (overrides config)");
  cmd->add_flag("--quiet", opt.quiet, "suppress the run summary");
}

mfeit::ExperimentConfig load_with_overrides(const CommonOptions& opt) {
  mfeit::ExperimentConfig cfg = mfeit::load_config(opt.config_path);
  if (!opt.out_override.empty()) cfg.out_dir = opt.out_override;
  if (opt.seed_override >= 0) {
    cfg.seed = static_cast<uint64_t>(opt.seed_override);
    cfg.echo["seed"] = cfg.seed;
  }
  return cfg;
}

int cmd_run(const CommonOptions& opt) {
  const auto cfg = load_with_overrides(opt);
  const auto report = mfeit::run_experiment(cfg);
  mfeit::write_report(report, cfg.out_dir);
  if (!opt.quiet) {
    std::printf("experiment %s (%s mode, seed %llu) -> %s\n",
                cfg.phantom_name.empty() ? cfg.phantom.name.c_str() : cfg.phantom_name.c_str(),
                report.mode.c_str(), static_cast<unsigned long long>(report.seed),
                cfg.out_dir.c_str());
    for (const auto& w : report.warnings) std::printf("warning: %s\n", w.c_str());
    for (const auto& rec : report.recoveries) {
      std::printf("  k=%d  %s=%.6g  jaccard=%.3f  max|A|=%.6g  iters=%d%s\n", rec.k,
                  rec.metrics.error_is_absolute ? "abs_err" : "rel_err",
                  rec.metrics.relative_error, rec.metrics.jaccard, rec.metrics.max_abs,
                  rec.solve.iterations, rec.solve.converged ? "" : " (not converged)");
    }
    std::printf("  %.1f ms\n", report.timing_ms);
  }
  return kExitOk;
}

int cmd_table1(const CommonOptions& opt) {
  const auto cfg = load_with_overrides(opt);
  const auto grid = mfeit::parse_table1(cfg.echo);
  const auto result = mfeit::run_table1(cfg, grid);
  mfeit::write_table1_csv(result, cfg.out_dir);
  if (!opt.quiet) {
    std::printf("table1 grid %zu alphas x %zu noise levels x %zu mesh sizes -> %s/table1.csv\n",
                result.alphas.size(), result.epsilons.size(), result.inversion_h.size(),
                cfg.out_dir.c_str());
    for (size_t ai = 0; ai < result.alphas.size(); ++ai) {
      for (size_t ei = 0; ei < result.epsilons.size(); ++ei) {
        std::printf("  alpha=%g eps=%g:", result.alphas[ai], result.epsilons[ei]);
        for (size_t hi = 0; hi < result.inversion_h.size(); ++hi)
          std::printf(" %.3e", result.cells[ai][ei][hi]);
        std::printf("\n");
      }
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mfEIT simulation and group-sparse reconstruction toolkit"};
  app.require_subcommand(1);

  CommonOptions run_opt, table_opt;
  auto* run = app.add_subcommand("run", "run one experiment from a JSON config");
  add_common(run, run_opt);
  auto* table1 = app.add_subcommand("table1", "mesh/noise/alpha error study");
  add_common(table1, table_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(run_opt);
    if (table1->parsed()) return cmd_table1(table_opt);
  } catch (const mfeit::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const mfeit::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitOk;
}
