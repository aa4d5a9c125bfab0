#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/nn.hpp"

namespace fedsim {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
};

/// Compares analytic gradients against central finite differences of the
/// training loss on a random model and batch, element by element.
/// Deterministic given the seed.
GradCheckReport finite_difference_check(const ModelSpec& spec,
                                        std::uint64_t seed,
                                        std::size_t batch_size = 8,
                                        double step = 1e-5);

/// Architecture used by the gradcheck CLI verb: covers dense, BN, ReLU and
/// softmax cross-entropy in one stack.
ModelSpec gradcheck_default_spec();

}  // namespace fedsim
