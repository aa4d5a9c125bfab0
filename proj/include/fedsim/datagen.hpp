#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

/// Assigns every sample to a client. For each class a proportion vector is
/// drawn from Dirichlet(alpha) and converted to integer counts by largest
/// remainder; the whole partition is redrawn until every client holds at
/// least min_samples samples.
std::vector<int> dirichlet_partition(std::span<const std::size_t> labels,
                                     std::size_t n_clients, double alpha,
                                     Rng& rng, std::size_t min_samples = 10,
                                     int max_retries = 100);

struct SynthResult {
  Dataset data;
  /// Per-client feature offset (norm feature_shift_scale), to be added to a
  /// client's samples after partitioning.
  std::vector<std::vector<double>> client_offsets;
};

SynthResult synth_generate(const SynthConfig& cfg);

/// Stratified train/test split. Classes with a single sample go entirely to
/// train; every class with two or more samples contributes to both sides.
std::pair<Dataset, Dataset> split_train_test(const Dataset& shard,
                                             double ratio, Rng& rng);

/// CSV with header f0,...,f{D-1},label; features are 64-bit floats, labels
/// nonnegative integers. num_classes becomes max label + 1.
Dataset load_csv(const std::string& path);

/// Inverse of load_csv; values printed with 17 significant digits so a
/// round-trip is exact.
void save_csv(const Dataset& ds, const std::string& path);

/// Global z-score per feature dimension. Dimensions with (near) zero
/// variance are centered only.
void standardize_features(Dataset& ds);

/// Full shard assembly: gathers each client's samples, applies its feature
/// offset when given, and makes a stratified train/test split seeded from
/// (master_seed, "split", client).
std::vector<ClientShard> build_shards(
    const Dataset& ds, const std::vector<int>& assignment,
    std::size_t n_clients, std::span<const std::vector<double>> offsets,
    double train_ratio, std::uint64_t master_seed);

}  // namespace fedsim
