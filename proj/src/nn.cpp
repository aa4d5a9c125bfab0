#include "fedsim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

std::string layer_prefix(std::size_t l) { return "h" + std::to_string(l); }

// out(BxN) = x(BxM) * w(MxN) + bias(N)
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::size_t b = x.rows();
  const std::size_t m = x.cols();
  const std::size_t n = w.cols();
  Tensor out({b, n});
  const auto xd = x.data();
  const auto wd = w.data();
  auto od = out.data();
  for (std::size_t i = 0; i < b; ++i) {
    double* orow = od.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = bias[j];
    }
    const double* xrow = xd.data() + i * m;
    for (std::size_t k = 0; k < m; ++k) {
      const double xv = xrow[k];
      const double* wrow = wd.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        orow[j] += xv * wrow[j];
      }
    }
  }
  return out;
}

// dw += x^T * dy, db += column sums of dy, dx = dy * w^T
void dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                    Tensor& dw, Tensor& db, Tensor& dx) {
  const std::size_t b = x.rows();
  const std::size_t m = x.cols();
  const std::size_t n = w.cols();
  for (std::size_t i = 0; i < b; ++i) {
    const double* xrow = x.data().data() + i * m;
    const double* dyrow = dy.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      db[j] += dyrow[j];
    }
    for (std::size_t k = 0; k < m; ++k) {
      const double xv = xrow[k];
      double* dwrow = dw.data().data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        dwrow[j] += xv * dyrow[j];
      }
    }
    double* dxrow = dx.data().data() + i * m;
    for (std::size_t k = 0; k < m; ++k) {
      const double* wrow = w.data().data() + k * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        acc += dyrow[j] * wrow[j];
      }
      dxrow[k] = acc;
    }
  }
}

}  // namespace

void ModelSpec::validate() const {
  if (input_dim == 0) {
    throw ConfigError("model input_dim must be positive");
  }
  if (num_classes == 0) {
    throw ConfigError("model num_classes must be positive");
  }
  if (hidden.empty()) {
    throw ConfigError("model needs at least one hidden layer");
  }
  for (const auto& h : hidden) {
    if (h.width == 0) {
      throw ConfigError("hidden layer width must be positive");
    }
  }
  if (!(bn_epsilon > 0.0)) {
    throw ConfigError("bn_epsilon must be positive");
  }
  if (!(bn_momentum > 0.0) || bn_momentum > 1.0) {
    throw ConfigError("bn_momentum must lie in (0, 1]");
  }
}

std::size_t ModelSpec::bn_layer_count() const {
  std::size_t n = 0;
  for (const auto& h : hidden) {
    n += h.has_bn ? 1 : 0;
  }
  return n;
}

Tensor* Gradients::find(const std::string& name) {
  for (auto& [n, g] : items) {
    if (n == name) {
      return &g;
    }
  }
  return nullptr;
}

const Tensor* Gradients::find(const std::string& name) const {
  for (const auto& [n, g] : items) {
    if (n == name) {
      return &g;
    }
  }
  return nullptr;
}

bool Gradients::all_finite() const {
  for (const auto& [n, g] : items) {
    if (!g.all_finite()) {
      return false;
    }
  }
  return true;
}

ParamSet init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet params;
  std::size_t fan_in = spec.input_dim;
  auto add_dense = [&](const std::string& prefix, std::size_t in,
                       std::size_t out) {
    Tensor w({in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& v : w.data()) {
      v = rng.uniform(-bound, bound);
    }
    params.add(prefix + ".weight", std::move(w), false);
    params.add(prefix + ".bias", Tensor({out}), false);
  };
  for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
    const auto& h = spec.hidden[l];
    add_dense(layer_prefix(l), fan_in, h.width);
    if (h.has_bn) {
      const std::string p = layer_prefix(l);
      params.add(p + ".gamma", Tensor::filled({h.width}, 1.0), true);
      params.add(p + ".beta", Tensor({h.width}), true);
      params.add(p + ".running_mean", Tensor({h.width}), true);
      params.add(p + ".running_var", Tensor::filled({h.width}, 1.0), true);
    }
    fan_in = h.width;
  }
  add_dense("out", fan_in, spec.num_classes);
  return params;
}

std::vector<std::string> param_group(const ModelSpec& spec, std::size_t group) {
  if (group >= spec.param_group_count()) {
    throw InputError("parameter group index out of range");
  }
  if (group == spec.hidden.size()) {
    return {"out.weight", "out.bias"};
  }
  const std::string p = layer_prefix(group);
  std::vector<std::string> names = {p + ".weight", p + ".bias"};
  if (spec.hidden[group].has_bn) {
    names.insert(names.end(), {p + ".gamma", p + ".beta", p + ".running_mean",
                               p + ".running_var"});
  }
  return names;
}

BnLayerState bn_layer_state(const ModelSpec& spec, const ParamSet& params,
                            std::size_t layer) {
  if (layer >= spec.hidden.size() || !spec.hidden[layer].has_bn) {
    throw InputError("layer " + std::to_string(layer) + " has no BN state");
  }
  const std::string p = layer_prefix(layer);
  return {params.at(p + ".gamma"), params.at(p + ".beta"),
          params.at(p + ".running_mean"), params.at(p + ".running_var"),
          spec.bn_momentum, spec.bn_epsilon};
}

ForwardCache forward(const ModelSpec& spec, ParamSet& params,
                     const Tensor& batch, Mode mode) {
  if (batch.rank() != 2 || batch.cols() != spec.input_dim) {
    throw ConfigError("forward: batch shape does not match model input_dim");
  }
  const std::size_t b = batch.rows();
  if (b == 0) {
    throw InputError("forward: empty batch");
  }
  if (mode == Mode::train && b < 2) {
    throw TrainingError(
        "forward: train mode needs a batch of at least 2 samples");
  }
  if (!batch.all_finite()) {
    throw InputError("forward: batch contains non-finite values");
  }

  ForwardCache cache;
  cache.mode = mode;
  Tensor x = batch;
  for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
    const auto& h = spec.hidden[l];
    const std::string p = layer_prefix(l);
    cache.dense_in.push_back(x);
    Tensor z = affine(x, params.at(p + ".weight"), params.at(p + ".bias"));
    cache.bn_in.push_back(z);
    cache.bn.emplace_back();

    Tensor y = z;
    if (h.has_bn) {
      const std::size_t c = h.width;
      const Tensor& gamma = params.at(p + ".gamma");
      const Tensor& beta = params.at(p + ".beta");
      if (mode == Mode::train) {
        Tensor mean({c});
        Tensor var({c});
        for (std::size_t j = 0; j < c; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < b; ++i) {
            s += z.at(i, j);
          }
          mean[j] = s / static_cast<double>(b);
        }
        for (std::size_t j = 0; j < c; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < b; ++i) {
            const double d = z.at(i, j) - mean[j];
            s += d * d;
          }
          var[j] = s / static_cast<double>(b);  // biased
        }
        Tensor xhat({b, c});
        for (std::size_t j = 0; j < c; ++j) {
          const double inv_std = 1.0 / std::sqrt(var[j] + spec.bn_epsilon);
          for (std::size_t i = 0; i < b; ++i) {
            xhat.at(i, j) = (z.at(i, j) - mean[j]) * inv_std;
            y.at(i, j) = gamma[j] * xhat.at(i, j) + beta[j];
          }
        }
        Tensor& rm = params.at(p + ".running_mean");
        Tensor& rv = params.at(p + ".running_var");
        for (std::size_t j = 0; j < c; ++j) {
          rm[j] = (1.0 - spec.bn_momentum) * rm[j] + spec.bn_momentum * mean[j];
          rv[j] = (1.0 - spec.bn_momentum) * rv[j] + spec.bn_momentum * var[j];
        }
        cache.bn.back() = {std::move(mean), std::move(var), std::move(xhat)};
      } else {
        const Tensor& rm = params.at(p + ".running_mean");
        const Tensor& rv = params.at(p + ".running_var");
        for (std::size_t j = 0; j < c; ++j) {
          const double inv_std = 1.0 / std::sqrt(rv[j] + spec.bn_epsilon);
          for (std::size_t i = 0; i < b; ++i) {
            y.at(i, j) = gamma[j] * (z.at(i, j) - rm[j]) * inv_std + beta[j];
          }
        }
      }
    }
    cache.act_in.push_back(y);
    for (auto& v : y.data()) {
      v = v > 0.0 ? v : 0.0;
    }
    x = std::move(y);
  }
  cache.dense_in.push_back(x);
  cache.logits =
      affine(cache.dense_in.back(), params.at("out.weight"), params.at("out.bias"));
  return cache;
}

double cross_entropy(const Tensor& logits,
                     std::span<const std::size_t> labels) {
  const std::size_t b = logits.rows();
  const std::size_t k = logits.cols();
  if (labels.size() != b) {
    throw InputError("cross_entropy: one label per row required");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) {
      throw InputError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(k) + " classes");
    }
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) {
      mx = std::max(mx, logits.at(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      sum += std::exp(logits.at(i, j) - mx);
    }
    total += mx + std::log(sum) - logits.at(i, labels[i]);
  }
  return total / static_cast<double>(b);
}

Gradients backward(const ModelSpec& spec, const ParamSet& params,
                   const ForwardCache& cache,
                   std::span<const std::size_t> labels) {
  if (cache.mode != Mode::train) {
    throw InputError("backward requires a train-mode forward cache");
  }
  if (cache.dense_in.size() != spec.hidden.size() + 1) {
    throw InputError("backward: cache does not match the model architecture");
  }
  const std::size_t b = cache.logits.rows();
  const std::size_t k = cache.logits.cols();
  if (labels.size() != b) {
    throw InputError("backward: one label per row required");
  }

  // d(mean CE)/d(logits) = (softmax - onehot) / B
  Tensor dlogits({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) {
      throw InputError("backward: label out of range");
    }
    double mx = cache.logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) {
      mx = std::max(mx, cache.logits.at(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      sum += std::exp(cache.logits.at(i, j) - mx);
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(cache.logits.at(i, j) - mx) / sum;
      dlogits.at(i, j) =
          (p - (labels[i] == j ? 1.0 : 0.0)) / static_cast<double>(b);
    }
  }

  Gradients grads;
  const Tensor& h_last = cache.dense_in.back();
  Tensor dw_out({h_last.cols(), k});
  Tensor db_out({k});
  Tensor dh(h_last.shape());
  dense_backward(h_last, params.at("out.weight"), dlogits, dw_out, db_out, dh);

  std::vector<std::pair<std::string, Tensor>> reversed;
  reversed.emplace_back("out.bias", std::move(db_out));
  reversed.emplace_back("out.weight", std::move(dw_out));

  Tensor g = std::move(dh);
  for (std::size_t li = spec.hidden.size(); li-- > 0;) {
    const auto& h = spec.hidden[li];
    const std::string p = layer_prefix(li);
    const std::size_t c = h.width;

    // ReLU mask from its input
    const Tensor& act_in = cache.act_in[li];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(act_in[i] > 0.0)) {
        g[i] = 0.0;
      }
    }

    Tensor dz = g;
    if (h.has_bn) {
      const BnTrainCache& bc = cache.bn[li];
      const Tensor& gamma = params.at(p + ".gamma");
      Tensor dgamma({c});
      Tensor dbeta({c});
      for (std::size_t j = 0; j < c; ++j) {
        double sg = 0.0;
        double sb = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          sg += g.at(i, j) * bc.xhat.at(i, j);
          sb += g.at(i, j);
        }
        dgamma[j] = sg;
        dbeta[j] = sb;
      }
      // dz = inv_std/B * (B*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
      for (std::size_t j = 0; j < c; ++j) {
        const double inv_std = 1.0 / std::sqrt(bc.var[j] + spec.bn_epsilon);
        double sum_dx = 0.0;
        double sum_dx_xhat = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          const double dxhat = g.at(i, j) * gamma[j];
          sum_dx += dxhat;
          sum_dx_xhat += dxhat * bc.xhat.at(i, j);
        }
        for (std::size_t i = 0; i < b; ++i) {
          const double dxhat = g.at(i, j) * gamma[j];
          dz.at(i, j) = inv_std / static_cast<double>(b) *
                        (static_cast<double>(b) * dxhat - sum_dx -
                         bc.xhat.at(i, j) * sum_dx_xhat);
        }
      }
      reversed.emplace_back(p + ".beta", std::move(dbeta));
      reversed.emplace_back(p + ".gamma", std::move(dgamma));
    }

    const Tensor& x = cache.dense_in[li];
    Tensor dw({x.cols(), c});
    Tensor db({c});
    Tensor dx(x.shape());
    dense_backward(x, params.at(p + ".weight"), dz, dw, db, dx);
    reversed.emplace_back(p + ".bias", std::move(db));
    reversed.emplace_back(p + ".weight", std::move(dw));
    g = std::move(dx);
  }

  grads.items.assign(std::make_move_iterator(reversed.rbegin()),
                     std::make_move_iterator(reversed.rend()));
  return grads;
}

void sgd_step(ParamSet& params, const Gradients& grads, double lr) {
  if (!grads.all_finite()) {
    throw TrainingError("sgd_step: non-finite gradient (training diverged)");
  }
  for (const auto& [name, g] : grads.items) {
    Tensor& p = params.at(name);
    if (!p.same_shape(g)) {
      throw ConfigError("sgd_step: gradient shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * g[i];
    }
  }
}

}  // namespace fedsim
