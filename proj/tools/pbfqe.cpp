// Command-line front end for experiment sweeps.
//
//   pbfqe run <config.json>
//   pbfqe slopes <records.csv> --x K|KHF --y abs_err|reward_mse [--D n] [--K n] [--KHF n]
//   pbfqe verify <records.csv>
//
// Exit codes: 0 success, 1 runtime failure (failed cells, verification
// mismatches, too few grid points), 2 invalid config or usage.
// PBFQE_WORKERS sets the worker count for `run`.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pbfqe/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, bool quiet) {
  const pbfqe::ExperimentConfig cfg = pbfqe::load_experiment_config(config_path);
  pbfqe::RunOptions opt;
  opt.workers = pbfqe::workers_from_env();
  if (!quiet) opt.log = &std::cerr;
  const auto summary = pbfqe::run_experiment(cfg, opt);
  std::cout << "tasks " << summary.tasks << ", skipped " << summary.skipped << ", completed " << summary.completed
            << ", failed " << summary.failed << "\n"
            << "records: " << (std::filesystem::path(cfg.output_dir) / "records.csv").string() << "\n";
  return summary.exit_code();
}

int cmd_slopes(const std::string& path, const std::string& x, const std::string& y, std::optional<int> D,
               std::optional<std::size_t> K, std::optional<std::size_t> K_HF) {
  const auto records = pbfqe::load_records(path);
  pbfqe::RecordFilter f;
  f.D = D;
  f.K = K;
  f.K_HF = K_HF;
  const auto fit = pbfqe::fit_decay_slope(records, x == "K" ? pbfqe::SlopeAxis::kK : pbfqe::SlopeAxis::kKHF,
                                          y == "abs_err" ? pbfqe::SlopeMetric::kAbsErr : pbfqe::SlopeMetric::kRewardMse, f);
  std::cout << "x,median_" << y << "\n";
  for (std::size_t i = 0; i < fit.x.size(); ++i)
    std::cout << pbfqe::format_double(fit.x[i]) << ',' << pbfqe::format_double(fit.median_y[i]) << "\n";
  std::cout << "slope " << pbfqe::format_double(fit.slope) << "\n"
            << "intercept " << pbfqe::format_double(fit.intercept) << "\n"
            << "band95 [" << pbfqe::format_double(fit.band_lo) << ", " << pbfqe::format_double(fit.band_hi) << "]\n";
  return 0;
}

int cmd_verify(const std::string& path) {
  const auto rep = pbfqe::verify_records(path);
  for (const auto& p : rep.problems) std::cout << p << "\n";
  std::cout << rep.rows << " rows, " << rep.problems.size() << " problems\n";
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-based fitted Q-evaluation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run or resume the experiment described by a config file");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_flag("-q,--quiet", quiet, "Do not log per-task progress");

  std::string records_path, x_axis, y_metric;
  std::optional<int> fix_d;
  std::optional<std::size_t> fix_k, fix_khf;
  auto* slopes = app.add_subcommand("slopes", "Fit a log-log decay slope to recorded errors");
  slopes->add_option("records", records_path, "records.csv")->required();
  slopes->add_option("--x", x_axis, "Sample-size axis")->required()->check(CLI::IsMember({"K", "KHF"}));
  slopes->add_option("--y", y_metric, "Error metric")->required()->check(CLI::IsMember({"abs_err", "reward_mse"}));
  slopes->add_option("--D", fix_d, "Keep only rows with this ambient dimension");
  slopes->add_option("--K", fix_k, "Keep only rows with this K");
  slopes->add_option("--KHF", fix_khf, "Keep only rows with this K_HF");

  std::string verify_path;
  auto* verify = app.add_subcommand("verify", "Recompute v_true and abs_err for every record");
  verify->add_option("records", verify_path, "records.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(config_path, quiet);
    if (*slopes) return cmd_slopes(records_path, x_axis, y_metric, fix_d, fix_k, fix_khf);
    if (*verify) return cmd_verify(verify_path);
  } catch (const pbfqe::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
