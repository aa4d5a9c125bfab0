#include "fedsim/federation.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <unordered_set>

#include "fedsim/error.hpp"

namespace fedsim {

Strategy strategy_from_string(const std::string& name) {
  if (name == "base") return Strategy::base;
  if (name == "fedavg") return Strategy::fedavg;
  if (name == "fedprox") return Strategy::fedprox;
  if (name == "fedper") return Strategy::fedper;
  if (name == "fedbn") return Strategy::fedbn;
  if (name == "fedap") return Strategy::fedap;
  if (name == "dfedap") return Strategy::dfedap;
  if (name == "ffedap") return Strategy::ffedap;
  throw ConfigError("unknown strategy '" + name + "'");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::base: return "base";
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedprox: return "fedprox";
    case Strategy::fedper: return "fedper";
    case Strategy::fedbn: return "fedbn";
    case Strategy::fedap: return "fedap";
    case Strategy::dfedap: return "dfedap";
    case Strategy::ffedap: return "ffedap";
  }
  return "?";
}

bool is_fedap_family(Strategy s) {
  return s == Strategy::fedap || s == Strategy::dfedap || s == Strategy::ffedap;
}

bool keeps_local_bn(Strategy s) {
  return s == Strategy::fedbn || is_fedap_family(s);
}

bool needs_reference(Strategy s) {
  return s == Strategy::fedap || s == Strategy::dfedap;
}

void StrategyConfig::validate(const ModelSpec& spec, int rounds) const {
  if (lambda < 0.0 || lambda > 1.0) {
    throw ConfigError("lambda must lie in [0, 1]");
  }
  if (prox_mu < 0.0) {
    throw ConfigError("prox_mu must be nonnegative");
  }
  if (rounds < 1) {
    throw ConfigError("rounds must be positive");
  }
  if (kind == Strategy::fedper) {
    if (personal_layers < 1 || personal_layers >= spec.param_group_count()) {
      throw ConfigError("personal_layers must lie in [1, groups-1]");
    }
  }
  // The similarity computation needs BN activations; plain FedBN degrades
  // gracefully to FedAvg on a BN-free architecture.
  if (is_fedap_family(kind) && spec.bn_layer_count() == 0) {
    throw ConfigError(strategy_name(kind) +
                      " requires at least one BN layer in the model");
  }
  if (kind == Strategy::ffedap) {
    const int warmup = effective_warmup(rounds);
    if (warmup < 1 || warmup >= rounds) {
      throw ConfigError("ffedap warmup_rounds must lie in [1, rounds-1]");
    }
  }
}

int StrategyConfig::effective_warmup(int rounds) const {
  return warmup_rounds < 0 ? std::max(1, rounds / 2) : warmup_rounds;
}

namespace {

void check_same_architecture(std::span<const ParamSet> sets) {
  if (sets.empty()) {
    throw InputError("aggregation needs at least one client");
  }
  for (std::size_t i = 1; i < sets.size(); ++i) {
    if (!sets[i].same_architecture(sets[0])) {
      throw ConfigError("aggregation: client architectures differ");
    }
  }
}

std::vector<double> aggregation_weights(std::size_t n, AvgWeighting weighting,
                                        std::span<const std::size_t> counts) {
  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  if (weighting == AvgWeighting::by_samples) {
    if (counts.size() != n) {
      throw InputError("by_samples weighting needs one count per client");
    }
    double total = 0.0;
    for (std::size_t c : counts) {
      total += static_cast<double>(c);
    }
    if (total <= 0.0) {
      throw InputError("by_samples weighting needs a positive total count");
    }
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = static_cast<double>(counts[i]) / total;
    }
  }
  return w;
}

// Weighted average of entry `e` across all clients into `out`.
void average_entry(std::span<const ParamSet> sets, std::size_t e,
                   std::span<const double> w, Tensor& out) {
  for (auto& v : out.data()) {
    v = 0.0;
  }
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const Tensor& src = sets[i].entries()[e].value;
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] += w[i] * src[k];
    }
  }
}

// One SGD pass over `ds` for `epochs` epochs; returns the mean per-sample
// loss across all minibatch steps. A trailing single-sample batch is folded
// into the previous one so BN always sees at least two samples.
double train_sgd(const ModelSpec& spec, ParamSet& params, const Dataset& ds,
                 std::size_t epochs, const TrainOptions& opts, Rng& rng,
                 const ParamSet* prox_anchor, double prox_mu,
                 const std::string& who) {
  const std::size_t n = ds.size();
  if (n < 2) {
    throw TrainingError(who + ": need at least 2 training samples");
  }
  if (opts.batch_size < 2) {
    throw ConfigError("batch_size must be at least 2");
  }
  double loss_sum = 0.0;
  std::size_t seen = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    // Fresh identity order per epoch: a run of E epochs is then the same
    // trajectory whether it is issued as one call or round by round.
    for (std::size_t i = 0; i < n; ++i) {
      order[i] = i;
    }
    rng.shuffle(order);
    std::size_t start = 0;
    while (start < n) {
      std::size_t stop = std::min(n, start + opts.batch_size);
      if (n - stop == 1) {
        stop = n;  // absorb the trailing singleton
      }
      const auto idx =
          std::span<const std::size_t>(order).subspan(start, stop - start);
      const Tensor batch = gather_rows(ds.features, idx);
      std::vector<std::size_t> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        labels[i] = ds.labels[idx[i]];
      }
      const ForwardCache cache = forward(spec, params, batch, Mode::train);
      const double loss = cross_entropy(cache.logits, labels);
      if (!std::isfinite(loss)) {
        throw TrainingError(who + ": non-finite loss (training diverged)");
      }
      Gradients grads = backward(spec, params, cache, labels);
      if (prox_anchor != nullptr && prox_mu > 0.0) {
        for (auto& [name, g] : grads.items) {
          const Tensor& p = params.at(name);
          const Tensor& a = prox_anchor->at(name);
          for (std::size_t k = 0; k < g.size(); ++k) {
            g[k] += prox_mu * (p[k] - a[k]);
          }
        }
      }
      try {
        sgd_step(params, grads, opts.lr);
      } catch (const TrainingError& e) {
        throw TrainingError(who + ": " + e.what());
      }
      loss_sum += loss * static_cast<double>(idx.size());
      seen += idx.size();
      start = stop;
    }
  }
  return seen == 0 ? 0.0 : loss_sum / static_cast<double>(seen);
}

// Installs the server's parameters into the client per the strategy's
// sharing rule.
ParamSet merge_incoming(const ModelSpec& spec, const ParamSet& own,
                        const ParamSet& incoming, const StrategyConfig& s) {
  if (!own.same_architecture(incoming)) {
    throw ConfigError("incoming parameters do not match the client model");
  }
  switch (s.kind) {
    case Strategy::base:
      return own;
    case Strategy::fedavg:
    case Strategy::fedprox:
      return incoming;
    case Strategy::fedper: {
      ParamSet merged = own;
      const std::size_t shared_groups =
          spec.param_group_count() - s.personal_layers;
      for (std::size_t g = 0; g < shared_groups; ++g) {
        for (const auto& name : param_group(spec, g)) {
          merged.at(name) = incoming.at(name);
        }
      }
      return merged;
    }
    case Strategy::fedbn:
    case Strategy::fedap:
    case Strategy::dfedap:
    case Strategy::ffedap: {
      ParamSet merged = own;
      for (auto& e : merged.entries()) {
        if (!e.bn_private) {
          e.value = incoming.at(e.name);
        }
      }
      return merged;
    }
  }
  throw ConfigError("unhandled strategy");
}

}  // namespace

ParamSet pretrain(const ModelSpec& spec, const Dataset& pool, double fraction,
                  std::size_t epochs, const TrainOptions& opts, Rng& rng) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ConfigError("pretrain fraction must lie in (0, 1]");
  }
  pool.validate();
  const auto want = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(pool.size())));
  if (want < 2) {
    throw DataError("pretrain subset is too small (" + std::to_string(want) +
                    " samples)");
  }
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = i;
  }
  rng.shuffle(idx);
  idx.resize(want);
  const Dataset subset = pool.subset(idx);
  ParamSet params = init_params(spec, rng);
  train_sgd(spec, params, subset, epochs, opts, rng, nullptr, 0.0, "pretrain");
  return params;
}

double local_update(const ModelSpec& spec, ClientState& client,
                    const ParamSet* incoming, const StrategyConfig& strategy,
                    const TrainOptions& opts) {
  const std::string who = "client " + std::to_string(client.client_id);
  if (incoming != nullptr) {
    client.params = merge_incoming(spec, client.params, *incoming, strategy);
  }
  if (opts.local_epochs == 0) {
    return evaluate_loss(spec, client.params, client.shard.train);
  }
  ParamSet anchor;
  const ParamSet* prox = nullptr;
  if (strategy.kind == Strategy::fedprox && strategy.prox_mu > 0.0) {
    anchor = client.params;  // global model as distributed this round
    prox = &anchor;
  }
  return train_sgd(spec, client.params, client.shard.train, opts.local_epochs,
                   opts, client.rng, prox, strategy.prox_mu, who);
}

ParamSet aggregate_fedavg(std::span<const ParamSet> client_params,
                          AvgWeighting weighting,
                          std::span<const std::size_t> sample_counts) {
  check_same_architecture(client_params);
  const std::vector<double> w =
      aggregation_weights(client_params.size(), weighting, sample_counts);
  ParamSet out = client_params[0];
  for (std::size_t e = 0; e < out.size(); ++e) {
    average_entry(client_params, e, w, out.entries()[e].value);
  }
  return out;
}

std::vector<ParamSet> aggregate_fedbn(std::span<const ParamSet> client_params) {
  check_same_architecture(client_params);
  const std::vector<double> w =
      aggregation_weights(client_params.size(), AvgWeighting::uniform, {});
  ParamSet shared = client_params[0];
  for (std::size_t e = 0; e < shared.size(); ++e) {
    if (!shared.entries()[e].bn_private) {
      average_entry(client_params, e, w, shared.entries()[e].value);
    }
  }
  std::vector<ParamSet> out;
  out.reserve(client_params.size());
  for (const ParamSet& own : client_params) {
    ParamSet merged = own;
    for (std::size_t e = 0; e < merged.size(); ++e) {
      if (!merged.entries()[e].bn_private) {
        merged.entries()[e].value = shared.entries()[e].value;
      }
    }
    out.push_back(std::move(merged));
  }
  return out;
}

std::vector<ParamSet> aggregate_fedper(std::span<const ParamSet> client_params,
                                       std::size_t personal_layers,
                                       const ModelSpec& spec) {
  check_same_architecture(client_params);
  if (personal_layers < 1 || personal_layers >= spec.param_group_count()) {
    throw ConfigError("personal_layers must lie in [1, groups-1]");
  }
  std::unordered_set<std::string> shared_names;
  const std::size_t shared_groups = spec.param_group_count() - personal_layers;
  for (std::size_t g = 0; g < shared_groups; ++g) {
    for (auto& name : param_group(spec, g)) {
      shared_names.insert(name);
    }
  }
  const std::vector<double> w =
      aggregation_weights(client_params.size(), AvgWeighting::uniform, {});
  ParamSet shared = client_params[0];
  for (std::size_t e = 0; e < shared.size(); ++e) {
    if (shared_names.count(shared.entries()[e].name) != 0) {
      average_entry(client_params, e, w, shared.entries()[e].value);
    }
  }
  std::vector<ParamSet> out;
  out.reserve(client_params.size());
  for (const ParamSet& own : client_params) {
    ParamSet merged = own;
    for (std::size_t e = 0; e < merged.size(); ++e) {
      if (shared_names.count(merged.entries()[e].name) != 0) {
        merged.entries()[e].value = shared.entries()[e].value;
      }
    }
    out.push_back(std::move(merged));
  }
  return out;
}

std::vector<ParamSet> aggregate_fedap(std::span<const ParamSet> client_params,
                                      const SimilarityMatrix& weights) {
  check_same_architecture(client_params);
  const std::size_t n = client_params.size();
  if (weights.n != n) {
    throw InputError("aggregate_fedap: weight matrix size mismatch");
  }
  std::vector<ParamSet> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ParamSet merged = client_params[i];
    for (std::size_t e = 0; e < merged.size(); ++e) {
      if (merged.entries()[e].bn_private) {
        continue;
      }
      average_entry(client_params, e, weights.w[i], merged.entries()[e].value);
    }
    out.push_back(std::move(merged));
  }
  return out;
}

double evaluate_accuracy(const ModelSpec& spec, const ParamSet& params,
                         const Dataset& ds, std::size_t batch_size) {
  ds.validate();
  ParamSet model = params;  // eval mode never mutates it
  std::size_t correct = 0;
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = i;
  }
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t stop = std::min(ds.size(), start + batch_size);
    const Tensor batch = gather_rows(
        ds.features,
        std::span<const std::size_t>(idx).subspan(start, stop - start));
    const ForwardCache cache = forward(spec, model, batch, Mode::eval);
    for (std::size_t i = 0; i < stop - start; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < cache.logits.cols(); ++j) {
        if (cache.logits.at(i, j) > cache.logits.at(i, best)) {
          best = j;
        }
      }
      if (best == ds.labels[start + i]) {
        ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double evaluate_loss(const ModelSpec& spec, const ParamSet& params,
                     const Dataset& ds, std::size_t batch_size) {
  ds.validate();
  ParamSet model = params;
  double total = 0.0;
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    idx[i] = i;
  }
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t stop = std::min(ds.size(), start + batch_size);
    const auto span =
        std::span<const std::size_t>(idx).subspan(start, stop - start);
    const Tensor batch = gather_rows(ds.features, span);
    std::vector<std::size_t> labels(span.size());
    for (std::size_t i = 0; i < span.size(); ++i) {
      labels[i] = ds.labels[span[i]];
    }
    const ForwardCache cache = forward(spec, model, batch, Mode::eval);
    total += cross_entropy(cache.logits, labels) *
             static_cast<double>(span.size());
  }
  return total / static_cast<double>(ds.size());
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// independent; the partition by index keeps results identical to a
// sequential run.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (std::size_t i = t; i < n; i += workers) {
          fn(i);
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) {
    th.join();
  }
  for (auto& err : errors) {
    if (err) {
      std::rethrow_exception(err);
    }
  }
}

SimilarityMatrix weights_from_profiles(
    const std::vector<BnStatsProfile>& profiles, DistanceVariant variant,
    double lambda) {
  const std::size_t n = profiles.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i][j] = pairwise_distance(profiles[i], profiles[j], variant);
      d[j][i] = d[i][j];
    }
  }
  return build_weight_matrix(d, lambda);
}

}  // namespace

FederationResult run_federation(const ModelSpec& spec,
                                std::vector<ClientState>& clients,
                                const StrategyConfig& strategy, int rounds,
                                const TrainOptions& opts,
                                const ParamSet* reference,
                                std::size_t threads) {
  spec.validate();
  strategy.validate(spec, rounds);
  if (clients.empty()) {
    throw ConfigError("run_federation: no clients");
  }
  for (const auto& c : clients) {
    if (!c.params.same_architecture(clients[0].params)) {
      throw ConfigError("run_federation: client architectures differ");
    }
  }

  FederationResult result;
  std::optional<SimilarityMatrix> weights;

  if (needs_reference(strategy.kind)) {
    if (reference == nullptr) {
      throw ConfigError(strategy_name(strategy.kind) +
                        " needs a pretrained reference model");
    }
    std::vector<BnStatsProfile> profiles(clients.size());
    parallel_for(clients.size(), threads, [&](std::size_t i) {
      profiles[i] = collect_bn_stats(spec, *reference, clients[i].shard.train);
    });
    const DistanceVariant variant = strategy.kind == Strategy::dfedap
                                        ? DistanceVariant::last_layer
                                        : DistanceVariant::full;
    weights = weights_from_profiles(profiles, variant, strategy.lambda);
    ++result.weight_computations;
  }

  const int warmup = strategy.kind == Strategy::ffedap
                         ? strategy.effective_warmup(rounds)
                         : 0;
  std::vector<std::size_t> sample_counts;
  for (const auto& c : clients) {
    sample_counts.push_back(c.shard.train.size());
  }

  std::vector<ParamSet> submissions;
  submissions.reserve(clients.size());
  for (const auto& c : clients) {
    submissions.push_back(c.params);
  }

  for (int t = 1; t <= rounds; ++t) {
    if (strategy.kind == Strategy::ffedap && t == warmup + 1) {
      // Warm-up over: derive the similarity matrix from the clients' own BN
      // running statistics, once.
      std::vector<BnStatsProfile> profiles;
      profiles.reserve(clients.size());
      for (const auto& sub : submissions) {
        profiles.push_back(stats_from_bn_params(spec, sub));
      }
      weights =
          weights_from_profiles(profiles, DistanceVariant::full, strategy.lambda);
      ++result.weight_computations;
    }

    // Server side: one aggregation per round over last round's submissions.
    ParamSet global;
    std::vector<ParamSet> per_client;
    switch (strategy.kind) {
      case Strategy::base:
        break;
      case Strategy::fedavg:
      case Strategy::fedprox:
        global = aggregate_fedavg(submissions, strategy.avg_weighting,
                                  sample_counts);
        break;
      case Strategy::fedbn:
        per_client = aggregate_fedbn(submissions);
        break;
      case Strategy::fedper:
        per_client =
            aggregate_fedper(submissions, strategy.personal_layers, spec);
        break;
      case Strategy::fedap:
      case Strategy::dfedap:
        per_client = aggregate_fedap(submissions, *weights);
        break;
      case Strategy::ffedap:
        per_client = t <= warmup ? aggregate_fedbn(submissions)
                                 : aggregate_fedap(submissions, *weights);
        break;
    }

    std::vector<double> losses(clients.size(), 0.0);
    std::vector<double> accs(clients.size(), 0.0);
    std::vector<const ParamSet*> incoming(clients.size(), nullptr);
    for (std::size_t i = 0; i < clients.size(); ++i) {
      if (strategy.kind == Strategy::fedavg ||
          strategy.kind == Strategy::fedprox) {
        incoming[i] = &global;
      } else if (strategy.kind != Strategy::base) {
        incoming[i] = &per_client[i];
      }
    }
    try {
      parallel_for(clients.size(), threads, [&](std::size_t i) {
        losses[i] = local_update(spec, clients[i], incoming[i], strategy, opts);
        accs[i] =
            evaluate_accuracy(spec, clients[i].params, clients[i].shard.test);
      });
    } catch (const TrainingError& e) {
      throw TrainingError("round " + std::to_string(t) + ": " + e.what());
    }

    for (std::size_t i = 0; i < clients.size(); ++i) {
      result.records.push_back(
          {t, clients[i].client_id, accs[i], losses[i], 0});
      submissions[i] = clients[i].params;
    }
  }

  result.weights = std::move(weights);
  return result;
}

}  // namespace fedsim
