#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/gradcheck.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

namespace {

ModelSpec one_bn_layer_spec(std::size_t dim) {
  ModelSpec spec;
  spec.input_dim = dim;
  spec.hidden = {{dim, true}};
  spec.num_classes = 2;
  return spec;
}

// Makes hidden layer 0 an identity map so the BN layer sees the raw batch.
void make_identity(ParamSet& params, std::size_t dim) {
  Tensor& w = params.at("h0.weight");
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      w.at(i, j) = i == j ? 1.0 : 0.0;
    }
  }
  for (auto& v : params.at("h0.bias").data()) {
    v = 0.0;
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    return false;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("tensor construction validates shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), InputError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), InputError);
  CHECK_THROWS_AS(Tensor({0, 3}), InputError);
  const Tensor t({2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(t.at(1, 0) == 3.0);
  CHECK(t.size() == 4);
}

TEST_CASE(
    "BN passes a zero-mean unit-variance batch through, up to the epsilon "
    "factor") {
  const ModelSpec spec = one_bn_layer_spec(2);
  Rng rng(1);
  ParamSet params = init_params(spec, rng);
  make_identity(params, 2);
  // Each channel has batch mean 0 and biased variance 1.
  const Tensor batch({2, 2}, {-1.0, 1.0, 1.0, -1.0});
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  const double factor = 1.0 / std::sqrt(1.0 + spec.bn_epsilon);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(cache.act_in[0].at(i, j) ==
            doctest::Approx(batch.at(i, j) * factor).epsilon(1e-12));
    }
  }
}

TEST_CASE("BN with zero gamma emits beta for the whole batch") {
  const ModelSpec spec = one_bn_layer_spec(3);
  Rng rng(2);
  ParamSet params = init_params(spec, rng);
  for (auto& v : params.at("h0.gamma").data()) {
    v = 0.0;
  }
  params.at("h0.beta") = Tensor({3}, {0.5, -1.5, 2.0});
  Tensor batch({4, 3});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(cache.act_in[0].at(i, 0) == 0.5);
    CHECK(cache.act_in[0].at(i, 1) == -1.5);
    CHECK(cache.act_in[0].at(i, 2) == 2.0);
  }
}

TEST_CASE("BN normalizes the batch {2,4} to hand-computed values") {
  const ModelSpec spec = one_bn_layer_spec(1);
  Rng rng(3);
  ParamSet params = init_params(spec, rng);
  make_identity(params, 1);
  const Tensor batch({2, 1}, {2.0, 4.0});
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  // mean 3, biased variance 1: (x - 3) / sqrt(1 + 1e-5)
  CHECK(cache.act_in[0].at(0, 0) == doctest::Approx(-0.999995).epsilon(1e-6));
  CHECK(cache.act_in[0].at(1, 0) == doctest::Approx(0.999995).epsilon(1e-6));
  // Running stats moved toward the batch statistics by the momentum.
  CHECK(params.at("h0.running_mean")[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(params.at("h0.running_var")[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("BN train-mode output is centered with variance 1/(1+eps)") {
  const std::size_t dim = 3;
  const std::size_t b = 16;
  const ModelSpec spec = one_bn_layer_spec(dim);
  Rng rng(4);
  ParamSet params = init_params(spec, rng);
  make_identity(params, dim);
  // z-score the batch per channel so the BN input has exactly unit variance
  Tensor batch({b, dim});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  for (std::size_t j = 0; j < dim; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      m += batch.at(i, j);
    }
    m /= b;
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      var += (batch.at(i, j) - m) * (batch.at(i, j) - m);
    }
    var /= b;
    for (std::size_t i = 0; i < b; ++i) {
      batch.at(i, j) = (batch.at(i, j) - m) / std::sqrt(var);
    }
  }
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  for (std::size_t j = 0; j < dim; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      m += cache.act_in[0].at(i, j);
    }
    m /= b;
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      var += (cache.act_in[0].at(i, j) - m) * (cache.act_in[0].at(i, j) - m);
    }
    var /= b;
    CHECK(std::abs(m) < 1e-9);
    CHECK(var == doctest::Approx(1.0 / (1.0 + spec.bn_epsilon)).epsilon(1e-6));
  }
}

TEST_CASE("train mode rejects single-sample batches") {
  const ModelSpec spec = one_bn_layer_spec(2);
  Rng rng(5);
  ParamSet params = init_params(spec, rng);
  const Tensor batch({1, 2}, {1.0, 2.0});
  CHECK_THROWS_AS(forward(spec, params, batch, Mode::train), TrainingError);
  CHECK_NOTHROW(forward(spec, params, batch, Mode::eval));
}

TEST_CASE("forward rejects shape mismatches") {
  const ModelSpec spec = one_bn_layer_spec(2);
  Rng rng(6);
  ParamSet params = init_params(spec, rng);
  const Tensor batch({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(forward(spec, params, batch, Mode::train), ConfigError);
}

TEST_CASE("eval-mode forward is pure and repeatable") {
  ModelSpec spec;
  spec.input_dim = 4;
  spec.hidden = {{6, true}, {5, false}};
  spec.num_classes = 3;
  Rng rng(7);
  ParamSet params = init_params(spec, rng);
  Tensor batch({3, 4});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  const ParamSet before = params;
  const ForwardCache a = forward(spec, params, batch, Mode::eval);
  const ForwardCache b = forward(spec, params, batch, Mode::eval);
  CHECK(bitwise_equal(a.logits, b.logits));
  for (std::size_t e = 0; e < params.size(); ++e) {
    CHECK(bitwise_equal(params.entries()[e].value, before.entries()[e].value));
  }
}

TEST_CASE("cross entropy matches closed forms") {
  SUBCASE("uniform logits over 4 classes") {
    const Tensor logits({2, 4}, {0, 0, 0, 0, 7, 7, 7, 7});
    const std::vector<std::size_t> labels{1, 3};
    CHECK(cross_entropy(logits, labels) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("hand-evaluated example") {
    const Tensor logits({1, 3}, {1.0, 2.0, 3.0});
    const std::vector<std::size_t> labels{2};
    CHECK(cross_entropy(logits, labels) ==
          doctest::Approx(0.40760596444438104).epsilon(1e-12));
  }
  SUBCASE("loss vanishes as the true-class margin grows") {
    double prev = 1e300;
    for (double margin : {5.0, 20.0, 50.0}) {
      const Tensor logits({1, 3}, {0.0, margin, 0.0});
      const std::vector<std::size_t> labels{1};
      const double loss = cross_entropy(logits, labels);
      CHECK(loss < prev);
      prev = loss;
    }
    CHECK(prev < 1e-12);
  }
  SUBCASE("label out of range") {
    const Tensor logits({1, 3}, {0.0, 0.0, 0.0});
    const std::vector<std::size_t> labels{3};
    CHECK_THROWS_AS(cross_entropy(logits, labels), InputError);
  }
}

TEST_CASE("softmax gradient is (1/K - onehot)/B for equal logits") {
  ModelSpec spec;
  spec.input_dim = 3;
  spec.hidden = {{4, false}};
  spec.num_classes = 5;
  Rng rng(8);
  ParamSet params = init_params(spec, rng);
  // Zero output layer makes every logit zero.
  for (auto& v : params.at("out.weight").data()) {
    v = 0.0;
  }
  const std::size_t b = 4;
  Tensor batch({b, 3});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  const std::vector<std::size_t> labels{0, 2, 2, 4};
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  const Gradients grads = backward(spec, params, cache, labels);
  // d(out.bias)_j = sum_b (1/K - onehot)/B = 1/K - count_j/B
  const Tensor* db = grads.find("out.bias");
  REQUIRE(db != nullptr);
  const std::vector<double> counts{1, 0, 2, 0, 1};
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK((*db)[j] ==
          doctest::Approx(1.0 / 5.0 - counts[j] / static_cast<double>(b))
              .epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  ModelSpec spec;
  spec.input_dim = 5;
  spec.hidden = {{6, true}, {5, true}, {4, false}};
  spec.num_classes = 3;
  const GradCheckReport report = finite_difference_check(spec, 0, 8);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.per_param.size() > 6);
}

TEST_CASE("independent spot finite-difference check on one weight") {
  // Hand-rolled probe, separate from the gradcheck module.
  ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {{3, true}};
  spec.num_classes = 2;
  Rng rng(11);
  ParamSet params = init_params(spec, rng);
  Tensor batch({4, 2});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  const std::vector<std::size_t> labels{0, 1, 1, 0};
  ParamSet work = params;
  const ForwardCache cache = forward(spec, work, batch, Mode::train);
  const Gradients grads = backward(spec, work, cache, labels);
  const double analytic = (*grads.find("h0.weight"))[3];

  const double h = 1e-6;
  auto loss_with = [&](double delta) {
    ParamSet probe = params;
    probe.at("h0.weight")[3] += delta;
    const ForwardCache c = forward(spec, probe, batch, Mode::train);
    return cross_entropy(c.logits, labels);
  };
  const double numeric = (loss_with(h) - loss_with(-h)) / (2.0 * h);
  CHECK(analytic == doctest::Approx(numeric).epsilon(1e-5));
}

TEST_CASE("duplicating every sample leaves gradients unchanged") {
  ModelSpec spec;
  spec.input_dim = 3;
  spec.hidden = {{4, true}};
  spec.num_classes = 2;
  Rng rng(12);
  ParamSet params = init_params(spec, rng);
  const std::size_t b = 5;
  Tensor batch({b, 3});
  for (auto& v : batch.data()) {
    v = rng.normal();
  }
  std::vector<std::size_t> labels{0, 1, 0, 1, 1};
  Tensor doubled({2 * b, 3});
  for (std::size_t i = 0; i < 2 * b; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      doubled.at(i, j) = batch.at(i % b, j);
    }
  }
  std::vector<std::size_t> doubled_labels = labels;
  doubled_labels.insert(doubled_labels.end(), labels.begin(), labels.end());

  ParamSet p1 = params;
  const ForwardCache c1 = forward(spec, p1, batch, Mode::train);
  const Gradients g1 = backward(spec, p1, c1, labels);
  ParamSet p2 = params;
  const ForwardCache c2 = forward(spec, p2, doubled, Mode::train);
  const Gradients g2 = backward(spec, p2, c2, doubled_labels);

  for (const auto& [name, g] : g1.items) {
    const Tensor* other = g2.find(name);
    REQUIRE(other != nullptr);
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(g[i] == doctest::Approx((*other)[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("sgd_step arithmetic") {
  ModelSpec spec;
  spec.input_dim = 1;
  spec.hidden = {{1, false}};
  spec.num_classes = 2;
  Rng rng(13);

  SUBCASE("zero learning rate is a no-op") {
    ParamSet params = init_params(spec, rng);
    const ParamSet before = params;
    Gradients grads;
    grads.items.emplace_back("h0.weight", Tensor({1, 1}, {3.0}));
    sgd_step(params, grads, 0.0);
    CHECK(bitwise_equal(params.at("h0.weight"), before.at("h0.weight")));
  }
  SUBCASE("one step") {
    ParamSet params = init_params(spec, rng);
    params.at("h0.weight") = Tensor({1, 1}, {1.0});
    Gradients grads;
    grads.items.emplace_back("h0.weight", Tensor({1, 1}, {0.5}));
    sgd_step(params, grads, 0.01);
    CHECK(params.at("h0.weight")[0] == doctest::Approx(0.995).epsilon(1e-15));
  }
  SUBCASE("two steps with frozen gradients equal one summed step") {
    ParamSet a = init_params(spec, rng);
    ParamSet b = a;
    Gradients g1;
    g1.items.emplace_back("h0.weight", Tensor({1, 1}, {0.25}));
    Gradients g2;
    g2.items.emplace_back("h0.weight", Tensor({1, 1}, {-0.75}));
    Gradients sum;
    sum.items.emplace_back("h0.weight", Tensor({1, 1}, {0.25 - 0.75}));
    sgd_step(a, g1, 0.1);
    sgd_step(a, g2, 0.1);
    sgd_step(b, sum, 0.1);
    CHECK(a.at("h0.weight")[0] ==
          doctest::Approx(b.at("h0.weight")[0]).epsilon(1e-15));
  }
  SUBCASE("non-finite gradients abort") {
    ParamSet params = init_params(spec, rng);
    Gradients grads;
    Tensor g({1, 1});
    g[0] = std::numeric_limits<double>::infinity();
    grads.items.emplace_back("h0.weight", std::move(g));
    CHECK_THROWS_AS(sgd_step(params, grads, 0.01), TrainingError);
  }
}

TEST_CASE("loss decreases over 50 SGD steps on a separable problem") {
  ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {{8, false}};
  spec.num_classes = 2;
  Rng rng(derive_seed(0, "separable"));
  ParamSet params = init_params(spec, rng);
  const std::size_t n = 40;
  Tensor features({n, 2});
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double sign = i % 2 == 0 ? 1.0 : -1.0;
    labels[i] = i % 2;
    features.at(i, 0) = 2.0 * sign + 0.3 * rng.normal();
    features.at(i, 1) = -1.5 * sign + 0.3 * rng.normal();
  }
  double first = 0.0;
  double last = 0.0;
  for (int step = 0; step < 50; ++step) {
    const ForwardCache cache = forward(spec, params, features, Mode::train);
    const double loss = cross_entropy(cache.logits, labels);
    if (step == 0) {
      first = loss;
    }
    last = loss;
    sgd_step(params, backward(spec, params, cache, labels), 0.05);
  }
  CHECK(last < first);
  CHECK(last < 0.75 * first);
}

TEST_CASE("BN-owned entries are exactly the private set") {
  ModelSpec spec;
  spec.input_dim = 4;
  spec.hidden = {{5, true}, {6, false}, {3, true}};
  spec.num_classes = 2;
  Rng rng(14);
  const ParamSet params = init_params(spec, rng);
  std::size_t private_count = 0;
  for (const auto& e : params.entries()) {
    const bool is_bn_name = e.name.find(".gamma") != std::string::npos ||
                            e.name.find(".beta") != std::string::npos ||
                            e.name.find(".running_mean") != std::string::npos ||
                            e.name.find(".running_var") != std::string::npos;
    CHECK(e.bn_private == is_bn_name);
    private_count += e.bn_private ? 1 : 0;
  }
  CHECK(private_count == 8);      // 4 entries per BN layer, 2 BN layers
  CHECK(params.size() == 8 + 8);  // plus weight/bias for 3 hidden + output
}

TEST_CASE("zero model on zero input keeps both gradient routes finite") {
  ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {{3, true}};
  spec.num_classes = 2;
  Rng rng(15);
  ParamSet params = init_params(spec, rng);
  for (auto& e : params.entries()) {
    if (e.name.find("running_var") != std::string::npos) {
      continue;  // keep variances valid
    }
    for (auto& v : e.value.data()) {
      v = 0.0;
    }
  }
  const Tensor batch({2, 2}, {0.0, 0.0, 0.0, 0.0});
  const std::vector<std::size_t> labels{0, 1};
  const ForwardCache cache = forward(spec, params, batch, Mode::train);
  CHECK(cache.logits.all_finite());
  const Gradients grads = backward(spec, params, cache, labels);
  CHECK(grads.all_finite());
  const double h = 1e-6;
  ParamSet probe = params;
  probe.at("h0.weight")[0] += h;
  const ForwardCache c = forward(spec, probe, batch, Mode::train);
  CHECK(std::isfinite(cross_entropy(c.logits, labels)));
}

TEST_CASE("finite_difference_check is deterministic in its seed") {
  const ModelSpec spec = gradcheck_default_spec();
  const GradCheckReport a = finite_difference_check(spec, 7);
  const GradCheckReport b = finite_difference_check(spec, 7);
  REQUIRE(a.per_param.size() == b.per_param.size());
  for (std::size_t i = 0; i < a.per_param.size(); ++i) {
    CHECK(a.per_param[i].name == b.per_param[i].name);
    CHECK(a.per_param[i].max_rel_err == b.per_param[i].max_rel_err);
  }
}

TEST_CASE("param_group covers every entry exactly once") {
  ModelSpec spec;
  spec.input_dim = 3;
  spec.hidden = {{4, true}, {5, false}};
  spec.num_classes = 2;
  Rng rng(16);
  const ParamSet params = init_params(spec, rng);
  std::size_t covered = 0;
  for (std::size_t g = 0; g < spec.param_group_count(); ++g) {
    for (const auto& name : param_group(spec, g)) {
      CHECK(params.has(name));
      ++covered;
    }
  }
  CHECK(covered == params.size());
  CHECK_THROWS_AS(param_group(spec, 3), InputError);
}
