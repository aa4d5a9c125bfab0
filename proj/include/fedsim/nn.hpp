#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedsim/param_set.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

struct HiddenLayer {
  std::size_t width = 0;
  bool has_bn = false;
};

/// Dense network architecture: input -> [linear (+BN) -> ReLU]* -> linear.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<HiddenLayer> hidden;
  std::size_t num_classes = 0;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  void validate() const;
  std::size_t bn_layer_count() const;
  /// Parameter groups in depth order: one per hidden layer plus the output
  /// layer. FedPer-style sharing is counted in these units.
  std::size_t param_group_count() const { return hidden.size() + 1; }
};

enum class Mode { train, eval };

/// Snapshot of one batch-norm layer's state.
struct BnLayerState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

struct BnTrainCache {
  Tensor mean;  // per-channel batch mean
  Tensor var;   // per-channel biased batch variance
  Tensor xhat;  // normalized pre-scale activations
};

/// Everything the backward pass and the statistics collector need from a
/// forward pass. bn_in keeps each BN layer's input in both modes.
struct ForwardCache {
  Mode mode = Mode::eval;
  std::vector<Tensor> dense_in;  // input to dense layer l; last entry is the
                                 // classifier input
  std::vector<Tensor> bn_in;     // dense output per hidden layer
  std::vector<BnTrainCache> bn;  // train-mode BN internals per hidden layer
  std::vector<Tensor> act_in;    // input to ReLU per hidden layer
  Tensor logits;
};

struct Gradients {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  bool all_finite() const;
};

/// Fresh parameters: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases
/// zero, BN scale 1 / offset 0 / running mean 0 / running var 1.
ParamSet init_params(const ModelSpec& spec, Rng& rng);

/// Entry names of parameter group g (see ModelSpec::param_group_count).
std::vector<std::string> param_group(const ModelSpec& spec, std::size_t group);

/// Copy of hidden layer `layer`'s BN state; the layer must have BN.
BnLayerState bn_layer_state(const ModelSpec& spec, const ParamSet& params,
                            std::size_t layer);

/// Runs the network on a batch. Train mode normalizes with batch statistics
/// and updates the running statistics in `params`; eval mode is a pure
/// function of (params, batch). Train mode requires a batch of at least two
/// samples so the batch variance is defined.
ForwardCache forward(const ModelSpec& spec, ParamSet& params,
                     const Tensor& batch, Mode mode);

/// Mean cross-entropy of logits against integer labels, computed with
/// max-subtracted log-sum-exp.
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Gradients of mean cross-entropy for every learnable parameter (running
/// statistics carry no gradient). Requires a train-mode cache produced from
/// the same parameters.
Gradients backward(const ModelSpec& spec, const ParamSet& params,
                   const ForwardCache& cache,
                   std::span<const std::size_t> labels);

/// In-place p -= lr * g. Rejects non-finite gradients.
void sgd_step(ParamSet& params, const Gradients& grads, double lr);

}  // namespace fedsim
