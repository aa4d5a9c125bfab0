#include "fedsim/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

// Streaming per-channel mean and M2, one Welford update per sample. A
// constant input stream yields an exactly zero variance.
struct RunningStats {
  std::size_t count = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  void init(std::size_t channels) {
    mean.assign(channels, 0.0);
    m2.assign(channels, 0.0);
  }

  void merge_batch(const Tensor& batch) {
    const std::size_t b = batch.rows();
    const std::size_t c = batch.cols();
    for (std::size_t i = 0; i < b; ++i) {
      ++count;
      const double inv_n = 1.0 / static_cast<double>(count);
      for (std::size_t j = 0; j < c; ++j) {
        const double x = batch.at(i, j);
        const double delta = x - mean[j];
        mean[j] += delta * inv_n;
        m2[j] += delta * (x - mean[j]);
      }
    }
  }

  GaussianStats finish() const {
    const std::size_t c = mean.size();
    Tensor mu({c});
    Tensor var({c});
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = mean[j];
      var[j] = std::max(0.0, m2[j] / static_cast<double>(count));
    }
    return {std::move(mu), std::move(var)};
  }
};

void check_gaussian_pair(const Tensor& mu_a, const Tensor& var_a,
                         const Tensor& mu_b, const Tensor& var_b) {
  if (mu_a.size() != mu_b.size() || var_a.size() != var_b.size() ||
      mu_a.size() != var_a.size()) {
    throw InputError("wasserstein_diag: mismatched vector lengths");
  }
  for (std::size_t i = 0; i < var_a.size(); ++i) {
    if (var_a[i] < 0.0 || var_b[i] < 0.0) {
      throw InputError("wasserstein_diag: variances must be nonnegative");
    }
  }
}

}  // namespace

BnStatsProfile collect_bn_stats(const ModelSpec& spec,
                                const ParamSet& reference_params,
                                const Dataset& shard_train,
                                std::size_t batch_size) {
  spec.validate();
  if (spec.bn_layer_count() == 0) {
    throw ConfigError("collect_bn_stats: architecture has no BN layers");
  }
  if (shard_train.size() < 2) {
    throw DataError("collect_bn_stats: need at least 2 samples");
  }
  if (batch_size == 0) {
    throw InputError("collect_bn_stats: batch_size must be positive");
  }

  std::vector<std::size_t> bn_layers;
  for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
    if (spec.hidden[l].has_bn) {
      bn_layers.push_back(l);
    }
  }
  std::vector<RunningStats> acc(bn_layers.size());
  for (std::size_t i = 0; i < bn_layers.size(); ++i) {
    acc[i].init(spec.hidden[bn_layers[i]].width);
  }
  RunningStats last;
  last.init(spec.hidden.back().width);

  ParamSet model = reference_params;  // eval mode never mutates it
  const std::size_t n = shard_train.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = i;
  }
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    const Tensor batch = gather_rows(
        shard_train.features,
        std::span<const std::size_t>(idx).subspan(start, stop - start));
    const ForwardCache cache = forward(spec, model, batch, Mode::eval);
    for (std::size_t i = 0; i < bn_layers.size(); ++i) {
      acc[i].merge_batch(cache.bn_in[bn_layers[i]]);
    }
    last.merge_batch(cache.dense_in.back());
  }

  BnStatsProfile profile;
  for (const auto& a : acc) {
    profile.layers.push_back(a.finish());
  }
  profile.last_feature = last.finish();
  return profile;
}

double wasserstein_diag(const Tensor& mu_a, const Tensor& var_a,
                        const Tensor& mu_b, const Tensor& var_b) {
  check_gaussian_pair(mu_a, var_a, mu_b, var_b);
  double sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double dm = mu_a[i] - mu_b[i];
    const double ds = std::sqrt(var_a[i]) - std::sqrt(var_b[i]);
    sum += dm * dm + ds * ds;
  }
  return std::sqrt(sum);
}

double pairwise_distance(const BnStatsProfile& a, const BnStatsProfile& b,
                         DistanceVariant variant) {
  if (variant == DistanceVariant::last_layer) {
    if (!a.last_feature || !b.last_feature) {
      throw InputError(
          "pairwise_distance: profiles carry no classifier-input statistics");
    }
    return wasserstein_diag(a.last_feature->mu, a.last_feature->var,
                            b.last_feature->mu, b.last_feature->var);
  }
  if (a.layers.size() != b.layers.size() || a.layers.empty()) {
    throw InputError("pairwise_distance: profiles from different architectures");
  }
  double d = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].mu.size() != b.layers[l].mu.size()) {
      throw InputError(
          "pairwise_distance: profiles from different architectures");
    }
    d += wasserstein_diag(a.layers[l].mu, a.layers[l].var, b.layers[l].mu,
                          b.layers[l].var);
  }
  return d;
}

SimilarityMatrix build_weight_matrix(
    const std::vector<std::vector<double>>& distances, double lambda,
    double d_floor) {
  const std::size_t n = distances.size();
  if (n == 0) {
    throw InputError("build_weight_matrix: empty distance matrix");
  }
  if (lambda < 0.0 || lambda > 1.0) {
    throw InputError("build_weight_matrix: lambda must lie in [0, 1]");
  }
  if (!(d_floor > 0.0)) {
    throw InputError("build_weight_matrix: d_floor must be positive");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (distances[i].size() != n) {
      throw InputError("build_weight_matrix: distance matrix must be square");
    }
    if (distances[i][i] != 0.0) {
      throw InputError("build_weight_matrix: diagonal distances must be zero");
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double d = distances[i][j];
      if (!(d >= 0.0)) {
        throw InputError("build_weight_matrix: distances must be nonnegative");
      }
      const double tol = 1e-9 * std::max(1.0, std::abs(d));
      if (std::abs(d - distances[j][i]) > tol) {
        throw InputError("build_weight_matrix: distance matrix must be symmetric");
      }
    }
  }

  SimilarityMatrix sim;
  sim.n = n;
  sim.lambda = n == 1 ? 1.0 : lambda;
  sim.w.assign(n, std::vector<double>(n, 0.0));
  if (n == 1) {
    sim.w[0][0] = 1.0;  // a federation of one trains locally
    return sim;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        continue;
      }
      sim.w[i][j] = 1.0 / std::max(distances[i][j], d_floor);
      sum += sim.w[i][j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        continue;
      }
      sim.w[i][j] = (1.0 - lambda) * (sim.w[i][j] / sum);
    }
    sim.w[i][i] = lambda;
  }
  return sim;
}

BnStatsProfile stats_from_bn_params(const ModelSpec& spec,
                                    const ParamSet& params) {
  spec.validate();
  if (spec.bn_layer_count() == 0) {
    throw ConfigError("stats_from_bn_params: architecture has no BN layers");
  }
  BnStatsProfile profile;
  for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
    if (!spec.hidden[l].has_bn) {
      continue;
    }
    const BnLayerState st = bn_layer_state(spec, params, l);
    profile.layers.push_back({st.running_mean, st.running_var});
  }
  return profile;
}

nlohmann::json SimilarityMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : w) {
    rows.push_back(row);
  }
  return nlohmann::json{
      {"clients", n}, {"lambda", lambda}, {"rows", std::move(rows)}};
}

nlohmann::json profile_to_json(const BnStatsProfile& profile) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : profile.layers) {
    layers.push_back({{"mu", std::vector<double>(layer.mu.data().begin(),
                                                 layer.mu.data().end())},
                      {"var", std::vector<double>(layer.var.data().begin(),
                                                  layer.var.data().end())}});
  }
  nlohmann::json out{{"layers", std::move(layers)}};
  if (profile.last_feature) {
    out["last_feature"] = {
        {"mu", std::vector<double>(profile.last_feature->mu.data().begin(),
                                   profile.last_feature->mu.data().end())},
        {"var", std::vector<double>(profile.last_feature->var.data().begin(),
                                    profile.last_feature->var.data().end())}};
  }
  return out;
}

}  // namespace fedsim
