#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/datagen.hpp"
#include "fedsim/federation.hpp"

namespace fedsim {

struct DataConfig {
  enum class Kind { synthetic, csv };
  Kind kind = Kind::synthetic;
  SynthConfig synth;      // synthetic source (seed derived from master_seed)
  std::string csv_path;   // csv source
  std::size_t n_clients = 0;
  double alpha = 0.1;     // Dirichlet label-skew concentration
  double train_ratio = 0.5;
};

struct ExperimentConfig {
  std::uint64_t master_seed = 0;
  std::string output_dir;
  DataConfig data;
  ModelSpec model;  // input_dim/num_classes of 0 are derived from the data
  StrategyConfig strategy;
  int rounds = -1;  // negative: 20 for the FedAP family, 100 otherwise
  TrainOptions train;
  double pretrain_fraction = 0.2;
  std::size_t pretrain_epochs = 3;
};

/// Parses and validates a config; throws ConfigError naming the offending
/// field.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Number of worker threads for client-level parallelism, from the
/// FEDSIM_THREADS environment variable (0 = sequential). Defaults to the
/// hardware concurrency when unset.
std::size_t threads_from_env();

struct ClientData {
  std::vector<ClientShard> shards;
  Dataset pretrain_pool;  // union of all clients' train splits
};

/// Full data pipeline: generate or load, standardize features globally,
/// Dirichlet-partition, apply per-client offsets, split train/test.
ClientData build_client_data(const ExperimentConfig& cfg);

struct ExperimentResult {
  ExperimentConfig resolved;         // config with every default filled in
  std::vector<RoundRecord> records;  // clients 0..n-1 then the mean row (-1)
                                     // for every round
  std::vector<double> final_accuracy;
  double final_mean_accuracy = 0.0;
  int rounds_to_90pct = 0;
  std::optional<SimilarityMatrix> weights;
  int weight_computations = 0;
};

/// Runs one experiment end to end (no file output).
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Writes metrics.csv, final_summary.json, weights.json (FedAP family) and
/// the resolved config.json into the output directory.
void write_artifacts(const ExperimentResult& result);

/// First round whose mean accuracy reaches `threshold_fraction` of the final
/// round's mean accuracy; rounds+1 when never reached.
int rounds_to_threshold(const std::vector<RoundRecord>& records,
                        double threshold_fraction);

struct Comparison {
  std::vector<std::string> strategies;
  std::vector<int> client_ids;
  /// accuracy[row][col]: final accuracy of client row under strategy col;
  /// one extra row at the end holds the per-strategy means.
  std::vector<std::vector<double>> accuracy;
  std::vector<std::size_t> best;  // per-row argmax column
};

/// Runs every strategy on the identical data partition and client seeds.
/// Per-strategy artifacts land in <output>/<strategy>/.
Comparison compare_strategies(const ExperimentConfig& cfg,
                              const std::vector<Strategy>& strategies);
void write_comparison_csv(const Comparison& cmp, const std::string& path);
std::string render_comparison(const Comparison& cmp);

/// Per-client label histogram table for a config's partition.
std::string render_partition_report(const ExperimentConfig& cfg);

/// Shortest-exact decimal formatting used in every CSV artifact.
std::string format_double(double v);

/// Reads a metrics.csv back into records.
std::vector<RoundRecord> load_metrics_csv(const std::string& path);

}  // namespace fedsim
