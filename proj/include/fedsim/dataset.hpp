#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

/// Labeled feature matrix. Labels are class indices in [0, num_classes).
struct Dataset {
  Tensor features;  // N x D
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const;
  Dataset subset(std::span<const std::size_t> idx) const;
};

/// One client's local data.
struct ClientShard {
  int client_id = 0;
  Dataset train;
  Dataset test;
  std::vector<std::size_t> label_histogram;  // over train + test
};

/// Synthetic-benchmark generator settings. Class clouds are Gaussians with
/// centers at least 4*noise_scale apart; each client additionally has a
/// fixed feature offset of norm feature_shift_scale.
struct SynthConfig {
  std::size_t n_clients = 0;
  std::size_t classes = 0;
  std::size_t samples_per_client = 0;
  std::size_t feature_dim = 0;
  double label_skew_alpha = 0.1;
  double feature_shift_scale = 0.0;
  double noise_scale = 1.0;
  double center_spread = 2.0;  // center coordinate range, in noise_scale units
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<std::size_t> label_histogram(const Dataset& ds);

}  // namespace fedsim
