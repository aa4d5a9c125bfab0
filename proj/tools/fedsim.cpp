#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/gradcheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

std::vector<fedsim::Strategy> parse_strategies(const std::string& csv) {
  std::vector<fedsim::Strategy> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      out.push_back(fedsim::strategy_from_string(item));
    }
  }
  if (out.empty()) {
    throw fedsim::ConfigError("--strategies must name at least one strategy");
  }
  return out;
}

int cmd_run(const std::string& config_path,
            const std::optional<std::string>& out_dir,
            const std::optional<std::uint64_t>& seed) {
  fedsim::ExperimentConfig cfg = fedsim::load_config_file(config_path);
  if (out_dir) {
    cfg.output_dir = *out_dir;
  }
  if (seed) {
    cfg.master_seed = *seed;
  }
  const auto started = std::chrono::steady_clock::now();
  fedsim::ExperimentResult result = fedsim::run_experiment(cfg);
  fedsim::write_artifacts(result);
  const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - started)
                           .count();

  std::printf("strategy=%s clients=%zu rounds=%d seed=%llu\n",
              fedsim::strategy_name(result.resolved.strategy.kind).c_str(),
              result.final_accuracy.size(), result.resolved.rounds,
              static_cast<unsigned long long>(result.resolved.master_seed));
  for (const auto& r : result.records) {
    if (r.client_id == -1) {
      std::printf("round %3d  mean_acc %.4f  mean_loss %.4f\n", r.round,
                  r.test_accuracy, r.train_loss);
    }
  }
  std::printf("final mean accuracy %.4f, 90%% of final reached at round %d\n",
              result.final_mean_accuracy, result.rounds_to_90pct);
  std::printf("artifacts in %s (%lld ms)\n",
              result.resolved.output_dir.c_str(),
              static_cast<long long>(elapsed));
  return kExitOk;
}

int cmd_compare(const std::string& config_path, const std::string& strategies,
                const std::optional<std::string>& out_dir,
                const std::optional<std::uint64_t>& seed) {
  fedsim::ExperimentConfig cfg = fedsim::load_config_file(config_path);
  if (out_dir) {
    cfg.output_dir = *out_dir;
  }
  if (seed) {
    cfg.master_seed = *seed;
  }
  const std::vector<fedsim::Strategy> list = parse_strategies(strategies);
  const fedsim::Comparison cmp = fedsim::compare_strategies(cfg, list);
  std::filesystem::create_directories(cfg.output_dir);
  const std::string csv_path =
      (std::filesystem::path(cfg.output_dir) / "comparison.csv").string();
  fedsim::write_comparison_csv(cmp, csv_path);
  std::fputs(fedsim::render_comparison(cmp).c_str(), stdout);
  std::printf("comparison written to %s\n", csv_path.c_str());
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  const fedsim::GradCheckReport report =
      fedsim::finite_difference_check(fedsim::gradcheck_default_spec(), seed);
  for (const auto& e : report.per_param) {
    std::printf("param %-16s max_rel_err %.3e\n", e.name.c_str(),
                e.max_rel_err);
  }
  std::printf("max_rel_err %.17g\n", report.max_rel_err);
  const bool ok = report.max_rel_err < 1e-4;
  std::printf("%s (threshold 1e-4)\n", ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitRuntime;
}

int cmd_partition_report(const std::string& config_path) {
  const fedsim::ExperimentConfig cfg = fedsim::load_config_file(config_path);
  std::fputs(fedsim::render_partition_report(cfg).c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedsim - personalized federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string strategies;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::uint64_t gradcheck_seed = 0;

  auto* run = app.add_subcommand("run", "run one experiment from a config");
  run->add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  run->add_option("--out", out_dir, "override the output directory");
  run->add_option("--seed", seed, "override master_seed");

  auto* compare = app.add_subcommand(
      "compare", "run several strategies on the identical partition");
  compare->add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  compare
      ->add_option("--strategies", strategies,
                   "comma-separated strategy list, e.g. fedavg,fedbn,fedap")
      ->required();
  compare->add_option("--out", out_dir, "override the output directory");
  compare->add_option("--seed", seed, "override master_seed");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "compare analytic and finite-difference gradients");
  gradcheck->add_option("--seed", gradcheck_seed, "gradcheck seed");

  auto* partition = app.add_subcommand(
      "partition-report", "print per-client label histograms for a config");
  partition->add_option("--config", config_path, "experiment config (JSON)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run->parsed()) {
      return cmd_run(config_path, out_dir, seed);
    }
    if (compare->parsed()) {
      return cmd_compare(config_path, strategies, out_dir, seed);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(gradcheck_seed);
    }
    if (partition->parsed()) {
      return cmd_partition_report(config_path);
    }
  } catch (const fedsim::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
