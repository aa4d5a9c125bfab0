#include "fedsim/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

double loss_at(const ModelSpec& spec, const ParamSet& params,
               const Tensor& batch, std::span<const std::size_t> labels) {
  ParamSet probe = params;  // running-stat updates stay local to the probe
  const ForwardCache cache = forward(spec, probe, batch, Mode::train);
  return cross_entropy(cache.logits, labels);
}

}  // namespace

GradCheckReport finite_difference_check(const ModelSpec& spec,
                                        std::uint64_t seed,
                                        std::size_t batch_size, double step) {
  spec.validate();
  Rng rng(derive_seed(seed, "gradcheck"));
  ParamSet params = init_params(spec, rng);
  // Move every learnable entry off its init point so no gradient is
  // accidentally zero by symmetry. Running statistics stay valid; they do
  // not enter the train-mode loss.
  for (auto& e : params.entries()) {
    if (e.name.find("running_") != std::string::npos) {
      continue;
    }
    for (auto& v : e.value.data()) {
      v += 0.3 * rng.normal();
    }
  }
  Tensor batch({batch_size, spec.input_dim});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  std::vector<std::size_t> labels(batch_size);
  for (auto& y : labels) {
    y = rng.below(spec.num_classes);
  }

  ParamSet work = params;
  const ForwardCache cache = forward(spec, work, batch, Mode::train);
  const Gradients analytic = backward(spec, work, cache, labels);

  GradCheckReport report;
  report.seed = seed;
  for (const auto& [name, grad] : analytic.items) {
    double worst = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      ParamSet probe = params;
      Tensor& t = probe.at(name);
      const double p0 = t[i];
      const double h = step * std::max(1.0, std::abs(p0));
      t[i] = p0 + h;
      const double lp = loss_at(spec, probe, batch, labels);
      t[i] = p0 - h;
      const double lm = loss_at(spec, probe, batch, labels);
      const double numeric = (lp - lm) / (2.0 * h);
      const double denom =
          std::max({std::abs(grad[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
    }
    report.per_param.push_back({name, worst});
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  return report;
}

ModelSpec gradcheck_default_spec() {
  ModelSpec spec;
  spec.input_dim = 6;
  spec.hidden = {{7, true}, {5, true}, {4, false}};
  spec.num_classes = 3;
  return spec;
}

}  // namespace fedsim
