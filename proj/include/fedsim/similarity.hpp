#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/nn.hpp"

namespace fedsim {

/// Diagonal Gaussian fitted to one activation vector: per-channel mean and
/// variance.
struct GaussianStats {
  Tensor mu;
  Tensor var;
};

/// One client's activation statistics under a reference model: one entry per
/// BN layer, plus the classifier-input statistics used by the last-layer
/// distance variant. Profiles built from BN parameters alone carry no
/// classifier-input entry.
struct BnStatsProfile {
  std::vector<GaussianStats> layers;
  std::optional<GaussianStats> last_feature;
};

enum class DistanceVariant { full, last_layer };

/// Row-stochastic aggregation weight matrix with a fixed self-weight lambda
/// on the diagonal.
struct SimilarityMatrix {
  std::size_t n = 0;
  double lambda = 0.0;
  std::vector<std::vector<double>> w;

  double at(std::size_t i, std::size_t j) const { return w[i][j]; }
  nlohmann::json to_json() const;
};

/// Feeds the whole training shard through the reference model in eval mode
/// and accumulates each BN layer's input statistics (and the classifier
/// input's) in one streaming pass. Reordering the shard changes the result
/// only by floating-point rounding.
BnStatsProfile collect_bn_stats(const ModelSpec& spec,
                                const ParamSet& reference_params,
                                const Dataset& shard_train,
                                std::size_t batch_size = 256);

/// 2-Wasserstein distance between two diagonal Gaussians:
/// sqrt(|mu_a - mu_b|^2 + |sqrt(var_a) - sqrt(var_b)|^2).
double wasserstein_diag(const Tensor& mu_a, const Tensor& var_a,
                        const Tensor& mu_b, const Tensor& var_b);

/// Client-to-client distance: the sum of per-layer Wasserstein distances
/// (full), or the classifier-input distance alone (last_layer).
double pairwise_distance(const BnStatsProfile& a, const BnStatsProfile& b,
                         DistanceVariant variant);

/// Turns a symmetric distance matrix into aggregation weights: off-diagonal
/// weights are the row-normalized inverse distances scaled by (1 - lambda),
/// the diagonal is lambda. Distances are floored at d_floor before
/// inversion, which makes rows of identical clients come out uniform.
SimilarityMatrix build_weight_matrix(
    const std::vector<std::vector<double>>& distances, double lambda,
    double d_floor = 1e-12);

/// Profile built from each BN layer's running statistics instead of
/// collected activations; used when no pretrained reference model exists.
BnStatsProfile stats_from_bn_params(const ModelSpec& spec,
                                    const ParamSet& params);

nlohmann::json profile_to_json(const BnStatsProfile& profile);

}  // namespace fedsim
