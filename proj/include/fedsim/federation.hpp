#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/similarity.hpp"

namespace fedsim {

enum class Strategy { base, fedavg, fedprox, fedper, fedbn, fedap, dfedap, ffedap };
enum class AvgWeighting { uniform, by_samples };

Strategy strategy_from_string(const std::string& name);
std::string strategy_name(Strategy s);

/// fedap, dfedap and ffedap.
bool is_fedap_family(Strategy s);
/// Strategies whose clients keep their own BN parameters.
bool keeps_local_bn(Strategy s);
/// Strategies that need a pretrained reference model for statistics.
bool needs_reference(Strategy s);

struct StrategyConfig {
  Strategy kind = Strategy::fedavg;
  double lambda = 0.5;             // FedAP family self-weight
  double prox_mu = 0.01;           // FedProx proximal coefficient
  std::size_t personal_layers = 1; // FedPer groups kept local, from the top
  int warmup_rounds = -1;          // f-FedAP; negative means rounds/2
  AvgWeighting avg_weighting = AvgWeighting::uniform;

  /// Checks strategy/architecture compatibility for a run of `rounds` rounds.
  void validate(const ModelSpec& spec, int rounds) const;
  int effective_warmup(int rounds) const;
};

struct TrainOptions {
  std::size_t local_epochs = 1;
  double lr = 1e-2;
  std::size_t batch_size = 32;
};

struct ClientState {
  int client_id = 0;
  ParamSet params;
  ClientShard shard;
  Rng rng;
};

/// Trains a fresh model on a random fraction of the pooled dataset; the
/// result serves as the reference model for statistics collection only.
ParamSet pretrain(const ModelSpec& spec, const Dataset& pool, double fraction,
                  std::size_t epochs, const TrainOptions& opts, Rng& rng);

/// Merges the incoming parameters into the client according to the strategy
/// (whole model, shared-only, or shared groups), then runs E local epochs of
/// minibatch SGD. Returns the mean per-sample training loss. E = 0 performs
/// the merge only.
double local_update(const ModelSpec& spec, ClientState& client,
                    const ParamSet* incoming, const StrategyConfig& strategy,
                    const TrainOptions& opts);

/// Plain parameter average over all entries, BN included.
ParamSet aggregate_fedavg(std::span<const ParamSet> client_params,
                          AvgWeighting weighting,
                          std::span<const std::size_t> sample_counts = {});

/// Shared entries averaged uniformly; every client keeps its own BN entries.
std::vector<ParamSet> aggregate_fedbn(std::span<const ParamSet> client_params);

/// Bottom groups averaged uniformly; the last `personal_layers` parameter
/// groups stay local.
std::vector<ParamSet> aggregate_fedper(std::span<const ParamSet> client_params,
                                       std::size_t personal_layers,
                                       const ModelSpec& spec);

/// Similarity-weighted combination of the shared entries, one output per
/// client; BN entries pass through untouched.
std::vector<ParamSet> aggregate_fedap(std::span<const ParamSet> client_params,
                                      const SimilarityMatrix& weights);

/// Mean argmax accuracy over a dataset in eval mode.
double evaluate_accuracy(const ModelSpec& spec, const ParamSet& params,
                         const Dataset& ds, std::size_t batch_size = 256);

/// Mean cross-entropy over a dataset in eval mode.
double evaluate_loss(const ModelSpec& spec, const ParamSet& params,
                     const Dataset& ds, std::size_t batch_size = 256);

struct RoundRecord {
  int round = 0;
  int client_id = 0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  std::int64_t wall_ms = 0;
};

struct FederationResult {
  std::vector<RoundRecord> records;  // per round, per client
  std::optional<SimilarityMatrix> weights;
  int weight_computations = 0;
};

/// Runs the full round loop: aggregate the previous submissions, distribute,
/// update every client locally, evaluate each client on its own test split.
/// The similarity matrix is computed exactly once (before round one, or
/// after the warm-up for ffedap) and is frozen afterwards. `threads` caps
/// client-level parallelism (0 = sequential); results do not depend on it.
FederationResult run_federation(const ModelSpec& spec,
                                std::vector<ClientState>& clients,
                                const StrategyConfig& strategy, int rounds,
                                const TrainOptions& opts,
                                const ParamSet* reference = nullptr,
                                std::size_t threads = 0);

}  // namespace fedsim
