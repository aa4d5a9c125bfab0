#include "fedsim/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

const nlohmann::json& require(const nlohmann::json& j, const std::string& key,
                              const std::string& where) {
  if (!j.contains(key)) {
    throw ConfigError(where + ": missing field '" + key + "'");
  }
  return j.at(key);
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& key,
         const std::string& where) {
  try {
    return require(j, key, where).get<T>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(where + ": field '" + key + "' has the wrong type");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback,
         const std::string& where) {
  if (!j.contains(key)) {
    return fallback;
  }
  return get_as<T>(j, key, where);
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.master_seed = get_or<std::uint64_t>(j, "master_seed", 0, "config");
  cfg.output_dir = get_or<std::string>(j, "output", "", "config");

  const auto& d = require(j, "data", "config");
  const std::string kind = get_as<std::string>(d, "kind", "data");
  cfg.data.n_clients = get_as<std::size_t>(d, "n_clients", "data");
  cfg.data.alpha = get_as<double>(d, "label_skew_alpha", "data");
  cfg.data.train_ratio = get_or<double>(d, "train_ratio", 0.5, "data");
  if (kind == "synthetic") {
    cfg.data.kind = DataConfig::Kind::synthetic;
    auto& s = cfg.data.synth;
    s.n_clients = cfg.data.n_clients;
    s.classes = get_as<std::size_t>(d, "classes", "data");
    s.samples_per_client = get_as<std::size_t>(d, "samples_per_client", "data");
    s.feature_dim = get_as<std::size_t>(d, "feature_dim", "data");
    s.label_skew_alpha = cfg.data.alpha;
    s.feature_shift_scale =
        get_or<double>(d, "feature_shift_scale", 0.0, "data");
    s.noise_scale = get_or<double>(d, "noise_scale", 1.0, "data");
    s.center_spread = get_or<double>(d, "center_spread", 2.0, "data");
    s.validate();
  } else if (kind == "csv") {
    cfg.data.kind = DataConfig::Kind::csv;
    cfg.data.csv_path = get_as<std::string>(d, "path", "data");
  } else {
    throw ConfigError("data: kind must be 'synthetic' or 'csv'");
  }
  if (cfg.data.n_clients == 0) {
    throw ConfigError("data: n_clients must be positive");
  }
  if (!(cfg.data.alpha > 0.0)) {
    throw ConfigError("data: label_skew_alpha must be positive");
  }
  if (!(cfg.data.train_ratio > 0.0) || !(cfg.data.train_ratio < 1.0)) {
    throw ConfigError("data: train_ratio must lie in (0, 1)");
  }

  const auto& m = require(j, "model", "config");
  cfg.model.input_dim = get_or<std::size_t>(m, "input_dim", 0, "model");
  cfg.model.num_classes = get_or<std::size_t>(m, "num_classes", 0, "model");
  cfg.model.bn_epsilon = get_or<double>(m, "bn_epsilon", 1e-5, "model");
  cfg.model.bn_momentum = get_or<double>(m, "bn_momentum", 0.1, "model");
  const auto& hidden = require(m, "hidden", "model");
  if (!hidden.is_array() || hidden.empty()) {
    throw ConfigError("model: hidden must be a nonempty array");
  }
  for (const auto& h : hidden) {
    HiddenLayer layer;
    layer.width = get_as<std::size_t>(h, "width", "model.hidden");
    layer.has_bn = get_or<bool>(h, "bn", false, "model.hidden");
    cfg.model.hidden.push_back(layer);
  }

  const auto& f = require(j, "federation", "config");
  cfg.strategy.kind =
      strategy_from_string(get_as<std::string>(f, "strategy", "federation"));
  cfg.rounds = get_or<int>(f, "rounds", -1, "federation");
  cfg.train.local_epochs =
      get_or<std::size_t>(f, "local_epochs", 1, "federation");
  cfg.train.lr = get_or<double>(f, "learning_rate", 1e-2, "federation");
  cfg.train.batch_size = get_or<std::size_t>(f, "batch_size", 32, "federation");
  cfg.strategy.lambda = get_or<double>(f, "lambda", 0.5, "federation");
  cfg.strategy.prox_mu = get_or<double>(f, "prox_mu", 0.01, "federation");
  cfg.strategy.personal_layers =
      get_or<std::size_t>(f, "personal_layers", 1, "federation");
  cfg.strategy.warmup_rounds =
      get_or<int>(f, "warmup_rounds", -1, "federation");
  const std::string weighting =
      get_or<std::string>(f, "avg_weighting", "uniform", "federation");
  if (weighting == "uniform") {
    cfg.strategy.avg_weighting = AvgWeighting::uniform;
  } else if (weighting == "by_samples") {
    cfg.strategy.avg_weighting = AvgWeighting::by_samples;
  } else {
    throw ConfigError("federation: avg_weighting must be 'uniform' or 'by_samples'");
  }
  cfg.pretrain_fraction =
      get_or<double>(f, "pretrain_fraction", 0.2, "federation");
  cfg.pretrain_epochs =
      get_or<std::size_t>(f, "pretrain_epochs", 3, "federation");
  if (!(cfg.pretrain_fraction > 0.0) || cfg.pretrain_fraction > 1.0) {
    throw ConfigError("federation: pretrain_fraction must lie in (0, 1]");
  }

  if (cfg.rounds < 0) {
    cfg.rounds = is_fedap_family(cfg.strategy.kind) ? 20 : 100;
  }
  if (cfg.output_dir.empty()) {
    cfg.output_dir = "runs/" + strategy_name(cfg.strategy.kind);
  }
  if (cfg.train.lr <= 0.0) {
    throw ConfigError("federation: learning_rate must be positive");
  }
  if (cfg.train.batch_size < 2) {
    throw ConfigError("federation: batch_size must be at least 2");
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path);
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json d;
  if (cfg.data.kind == DataConfig::Kind::synthetic) {
    d["kind"] = "synthetic";
    d["classes"] = cfg.data.synth.classes;
    d["samples_per_client"] = cfg.data.synth.samples_per_client;
    d["feature_dim"] = cfg.data.synth.feature_dim;
    d["feature_shift_scale"] = cfg.data.synth.feature_shift_scale;
    d["noise_scale"] = cfg.data.synth.noise_scale;
    d["center_spread"] = cfg.data.synth.center_spread;
  } else {
    d["kind"] = "csv";
    d["path"] = cfg.data.csv_path;
  }
  d["n_clients"] = cfg.data.n_clients;
  d["label_skew_alpha"] = cfg.data.alpha;
  d["train_ratio"] = cfg.data.train_ratio;

  nlohmann::json hidden = nlohmann::json::array();
  for (const auto& h : cfg.model.hidden) {
    hidden.push_back({{"width", h.width}, {"bn", h.has_bn}});
  }
  nlohmann::json m{{"hidden", std::move(hidden)},
                   {"input_dim", cfg.model.input_dim},
                   {"num_classes", cfg.model.num_classes},
                   {"bn_epsilon", cfg.model.bn_epsilon},
                   {"bn_momentum", cfg.model.bn_momentum}};

  nlohmann::json f{{"strategy", strategy_name(cfg.strategy.kind)},
                   {"rounds", cfg.rounds},
                   {"local_epochs", cfg.train.local_epochs},
                   {"learning_rate", cfg.train.lr},
                   {"batch_size", cfg.train.batch_size},
                   {"lambda", cfg.strategy.lambda},
                   {"prox_mu", cfg.strategy.prox_mu},
                   {"personal_layers", cfg.strategy.personal_layers},
                   {"warmup_rounds", cfg.strategy.warmup_rounds},
                   {"avg_weighting", cfg.strategy.avg_weighting ==
                                             AvgWeighting::by_samples
                                         ? "by_samples"
                                         : "uniform"},
                   {"pretrain_fraction", cfg.pretrain_fraction},
                   {"pretrain_epochs", cfg.pretrain_epochs}};

  return nlohmann::json{{"master_seed", cfg.master_seed},
                        {"output", cfg.output_dir},
                        {"data", std::move(d)},
                        {"model", std::move(m)},
                        {"federation", std::move(f)}};
}

std::size_t threads_from_env() {
  const char* env = std::getenv("FEDSIM_THREADS");
  if (env == nullptr || *env == '\0') {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
  }
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0') {
    throw ConfigError("FEDSIM_THREADS must be a nonnegative integer");
  }
  return static_cast<std::size_t>(v);
}

ClientData build_client_data(const ExperimentConfig& cfg) {
  Dataset ds;
  std::vector<std::vector<double>> offsets;
  if (cfg.data.kind == DataConfig::Kind::synthetic) {
    SynthConfig synth = cfg.data.synth;
    synth.seed = derive_seed(cfg.master_seed, "data");
    SynthResult gen = synth_generate(synth);
    ds = std::move(gen.data);
    offsets = std::move(gen.client_offsets);
  } else {
    ds = load_csv(cfg.data.csv_path);
  }
  standardize_features(ds);

  Rng partition_rng(derive_seed(cfg.master_seed, "partition"));
  const std::vector<int> assignment = dirichlet_partition(
      ds.labels, cfg.data.n_clients, cfg.data.alpha, partition_rng);

  ClientData out;
  out.shards = build_shards(ds, assignment, cfg.data.n_clients, offsets,
                            cfg.data.train_ratio, cfg.master_seed);

  // Pool of every client's train split, in client order, for pretraining.
  std::size_t total = 0;
  for (const auto& s : out.shards) {
    total += s.train.size();
  }
  Tensor features({total, ds.dim()});
  std::vector<std::size_t> labels;
  labels.reserve(total);
  std::size_t row = 0;
  for (const auto& s : out.shards) {
    for (std::size_t i = 0; i < s.train.size(); ++i) {
      for (std::size_t j = 0; j < ds.dim(); ++j) {
        features.at(row, j) = s.train.features.at(i, j);
      }
      labels.push_back(s.train.labels[i]);
      ++row;
    }
  }
  out.pretrain_pool = Dataset{std::move(features), std::move(labels),
                              ds.num_classes};
  return out;
}

namespace {

void resolve_model(ExperimentConfig& cfg, const Dataset& sample) {
  if (cfg.model.input_dim == 0) {
    cfg.model.input_dim = sample.dim();
  } else if (cfg.model.input_dim != sample.dim()) {
    throw ConfigError("model: input_dim " +
                      std::to_string(cfg.model.input_dim) +
                      " does not match the data dimensionality " +
                      std::to_string(sample.dim()));
  }
  if (cfg.model.num_classes == 0) {
    cfg.model.num_classes = sample.num_classes;
  } else if (cfg.model.num_classes != sample.num_classes) {
    throw ConfigError("model: num_classes " +
                      std::to_string(cfg.model.num_classes) +
                      " does not match the data class count " +
                      std::to_string(sample.num_classes));
  }
  cfg.model.validate();
}

std::vector<RoundRecord> with_mean_rows(const std::vector<RoundRecord>& raw,
                                        std::size_t n_clients, int rounds) {
  std::vector<RoundRecord> out;
  out.reserve(raw.size() + static_cast<std::size_t>(rounds));
  std::size_t pos = 0;
  for (int t = 1; t <= rounds; ++t) {
    double acc = 0.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < n_clients; ++i, ++pos) {
      out.push_back(raw[pos]);
      acc += raw[pos].test_accuracy;
      loss += raw[pos].train_loss;
    }
    out.push_back({t, -1, acc / static_cast<double>(n_clients),
                   loss / static_cast<double>(n_clients), 0});
  }
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ExperimentResult result;
  result.resolved = cfg;
  ExperimentConfig& rc = result.resolved;

  ClientData data = build_client_data(rc);
  resolve_model(rc, data.shards[0].train);
  if (rc.rounds < 0) {
    rc.rounds = is_fedap_family(rc.strategy.kind) ? 20 : 100;
  }
  rc.strategy.validate(rc.model, rc.rounds);
  if (rc.strategy.kind == Strategy::ffedap && rc.strategy.warmup_rounds < 0) {
    rc.strategy.warmup_rounds = rc.strategy.effective_warmup(rc.rounds);
  }

  const std::size_t threads = threads_from_env();

  // Identical initial parameters for every client.
  Rng init_rng(derive_seed(rc.master_seed, "init"));
  const ParamSet initial = init_params(rc.model, init_rng);

  std::vector<ClientState> clients;
  clients.reserve(data.shards.size());
  for (std::size_t i = 0; i < data.shards.size(); ++i) {
    clients.push_back(ClientState{static_cast<int>(i), initial,
                                  std::move(data.shards[i]),
                                  Rng(derive_seed(rc.master_seed, "client", i))});
  }

  ParamSet reference;
  const ParamSet* reference_ptr = nullptr;
  if (needs_reference(rc.strategy.kind)) {
    Rng pre_rng(derive_seed(rc.master_seed, "pretrain"));
    reference = pretrain(rc.model, data.pretrain_pool, rc.pretrain_fraction,
                         rc.pretrain_epochs, rc.train, pre_rng);
    reference_ptr = &reference;
  }

  FederationResult fed = run_federation(rc.model, clients, rc.strategy,
                                        rc.rounds, rc.train, reference_ptr,
                                        threads);

  result.records = with_mean_rows(fed.records, clients.size(), rc.rounds);
  result.weights = std::move(fed.weights);
  result.weight_computations = fed.weight_computations;

  result.final_accuracy.resize(clients.size());
  const std::size_t last_block =
      result.records.size() - (clients.size() + 1);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    result.final_accuracy[i] = result.records[last_block + i].test_accuracy;
  }
  result.final_mean_accuracy = result.records.back().test_accuracy;
  result.rounds_to_90pct = rounds_to_threshold(result.records, 0.9);
  return result;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_artifacts(const ExperimentResult& result) {
  namespace fs = std::filesystem;
  const fs::path dir(result.resolved.output_dir);
  fs::create_directories(dir);

  {
    std::ofstream out(dir / "metrics.csv");
    if (!out) {
      throw DataError("cannot write " + (dir / "metrics.csv").string());
    }
    out << "round,client_id,test_accuracy,train_loss,wall_ms\n";
    for (const auto& r : result.records) {
      out << r.round << ',' << r.client_id << ','
          << format_double(r.test_accuracy) << ','
          << format_double(r.train_loss) << ',' << r.wall_ms << '\n';
    }
  }
  {
    nlohmann::json summary{
        {"per_client_final_accuracy", result.final_accuracy},
        {"mean_final_accuracy", result.final_mean_accuracy},
        {"rounds_to_90pct_of_final", result.rounds_to_90pct},
    };
    std::ofstream out(dir / "final_summary.json");
    out << summary.dump(2) << '\n';
  }
  if (result.weights) {
    std::ofstream out(dir / "weights.json");
    out << result.weights->to_json().dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "config.json");
    out << config_to_json(result.resolved).dump(2) << '\n';
  }
}

int rounds_to_threshold(const std::vector<RoundRecord>& records,
                        double threshold_fraction) {
  if (records.empty()) {
    throw InputError("rounds_to_threshold: no records");
  }
  int rounds = 0;
  for (const auto& r : records) {
    rounds = std::max(rounds, r.round);
  }
  std::vector<double> mean_acc(static_cast<std::size_t>(rounds), 0.0);
  std::vector<std::size_t> counts(static_cast<std::size_t>(rounds), 0);
  for (const auto& r : records) {
    if (r.client_id < 0) {
      continue;  // mean rows are derived, recompute from client rows
    }
    mean_acc[static_cast<std::size_t>(r.round - 1)] += r.test_accuracy;
    counts[static_cast<std::size_t>(r.round - 1)] += 1;
  }
  for (std::size_t t = 0; t < mean_acc.size(); ++t) {
    if (counts[t] == 0) {
      throw InputError("rounds_to_threshold: missing rounds in records");
    }
    mean_acc[t] /= static_cast<double>(counts[t]);
  }
  const double target = threshold_fraction * mean_acc.back();
  for (std::size_t t = 0; t < mean_acc.size(); ++t) {
    if (mean_acc[t] >= target) {
      return static_cast<int>(t) + 1;
    }
  }
  return rounds + 1;
}

Comparison compare_strategies(const ExperimentConfig& cfg,
                              const std::vector<Strategy>& strategies) {
  if (strategies.empty()) {
    throw ConfigError("compare: no strategies given");
  }
  Comparison cmp;
  const std::size_t n = cfg.data.n_clients;
  cmp.client_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    cmp.client_ids[i] = static_cast<int>(i);
  }
  cmp.accuracy.assign(n + 1, std::vector<double>(strategies.size(), 0.0));
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.strategy.kind = strategies[s];
    run_cfg.output_dir = (std::filesystem::path(cfg.output_dir) /
                          strategy_name(strategies[s]))
                             .string();
    ExperimentResult result = run_experiment(run_cfg);
    write_artifacts(result);
    cmp.strategies.push_back(strategy_name(strategies[s]));
    for (std::size_t i = 0; i < n; ++i) {
      cmp.accuracy[i][s] = result.final_accuracy[i];
    }
    cmp.accuracy[n][s] = result.final_mean_accuracy;
  }
  cmp.best.resize(cmp.accuracy.size());
  for (std::size_t r = 0; r < cmp.accuracy.size(); ++r) {
    cmp.best[r] = static_cast<std::size_t>(
        std::max_element(cmp.accuracy[r].begin(), cmp.accuracy[r].end()) -
        cmp.accuracy[r].begin());
  }
  return cmp;
}

void write_comparison_csv(const Comparison& cmp, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path);
  }
  out << "client";
  for (const auto& s : cmp.strategies) {
    out << ',' << s;
  }
  out << ",best\n";
  for (std::size_t r = 0; r < cmp.accuracy.size(); ++r) {
    if (r < cmp.client_ids.size()) {
      out << cmp.client_ids[r];
    } else {
      out << "avg";
    }
    for (double v : cmp.accuracy[r]) {
      out << ',' << format_double(v);
    }
    out << ',' << cmp.strategies[cmp.best[r]] << '\n';
  }
}

std::string render_comparison(const Comparison& cmp) {
  std::ostringstream out;
  out << "client";
  for (const auto& s : cmp.strategies) {
    out << '\t' << s;
  }
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < cmp.accuracy.size(); ++r) {
    if (r < cmp.client_ids.size()) {
      out << cmp.client_ids[r];
    } else {
      out << "avg";
    }
    for (std::size_t s = 0; s < cmp.accuracy[r].size(); ++s) {
      std::snprintf(buf, sizeof(buf), "%.4f", cmp.accuracy[r][s]);
      out << '\t' << buf << (cmp.best[r] == s ? "*" : "");
    }
    out << '\n';
  }
  return out.str();
}

std::string render_partition_report(const ExperimentConfig& cfg) {
  ClientData data = build_client_data(cfg);
  std::ostringstream out;
  out << "client\tsamples\ttrain\ttest\thistogram\n";
  for (const auto& s : data.shards) {
    std::size_t total = 0;
    for (std::size_t c : s.label_histogram) {
      total += c;
    }
    out << s.client_id << '\t' << total << '\t' << s.train.size() << '\t'
        << s.test.size() << '\t';
    for (std::size_t k = 0; k < s.label_histogram.size(); ++k) {
      out << (k == 0 ? "" : " ") << s.label_histogram[k];
    }
    out << '\n';
  }
  return out.str();
}

std::vector<RoundRecord> load_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError(path + ": empty file");
  }
  if (line != "round,client_id,test_accuracy,train_loss,wall_ms") {
    throw DataError(path + ": unexpected header");
  }
  std::vector<RoundRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    RoundRecord r;
    try {
      std::getline(ss, cell, ',');
      r.round = std::stoi(cell);
      std::getline(ss, cell, ',');
      r.client_id = std::stoi(cell);
      std::getline(ss, cell, ',');
      r.test_accuracy = std::stod(cell);
      std::getline(ss, cell, ',');
      r.train_loss = std::stod(cell);
      std::getline(ss, cell, ',');
      r.wall_ms = std::stoll(cell);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed row");
    }
    records.push_back(r);
  }
  return records;
}

}  // namespace fedsim
