#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <json.hpp>

#include "fedsim/datagen.hpp"
#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"

using namespace fedsim;

namespace {

std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t k,
                                         std::uint64_t seed) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i % k;
  }
  Rng rng(seed);
  rng.shuffle(labels);
  return labels;
}

std::vector<std::vector<std::size_t>> per_client_histograms(
    std::span<const std::size_t> labels, const std::vector<int>& assignment,
    std::size_t n_clients, std::size_t k) {
  std::vector<std::vector<std::size_t>> hist(n_clients,
                                             std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++hist[static_cast<std::size_t>(assignment[i])][labels[i]];
  }
  return hist;
}

double mean_label_entropy(const std::vector<std::vector<std::size_t>>& hist) {
  double total = 0.0;
  for (const auto& h : hist) {
    std::size_t n = 0;
    for (std::size_t c : h) {
      n += c;
    }
    double e = 0.0;
    for (std::size_t c : h) {
      if (c > 0) {
        const double p = static_cast<double>(c) / static_cast<double>(n);
        e -= p * std::log(p);
      }
    }
    total += e;
  }
  return total / static_cast<double>(hist.size());
}

}  // namespace

TEST_CASE("single client receives every sample") {
  const auto labels = balanced_labels(100, 4, 1);
  Rng rng(2);
  const auto assignment = dirichlet_partition(labels, 1, 0.5, rng);
  for (int a : assignment) {
    CHECK(a == 0);
  }
}

TEST_CASE("partition is exhaustive and disjoint, histograms add up") {
  const auto labels = balanced_labels(1200, 6, 3);
  Rng rng(4);
  const auto assignment = dirichlet_partition(labels, 8, 0.3, rng);
  REQUIRE(assignment.size() == labels.size());
  const auto hist = per_client_histograms(labels, assignment, 8, 6);
  std::vector<std::size_t> total(6, 0);
  for (const auto& h : hist) {
    for (std::size_t k = 0; k < 6; ++k) {
      total[k] += h[k];
    }
  }
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(total[k] == 200);  // balanced input: 1200 / 6 per class
  }
}

TEST_CASE("huge alpha yields near-uniform client histograms") {
  const std::size_t n = 2000;
  const std::size_t k = 4;
  const std::size_t clients = 4;
  const auto labels = balanced_labels(n, k, 5);
  Rng rng(6);
  const auto assignment = dirichlet_partition(labels, clients, 1e6, rng);
  const auto hist = per_client_histograms(labels, assignment, clients, k);
  const double expect =
      static_cast<double>(n) / static_cast<double>(clients * k);
  for (const auto& h : hist) {
    for (std::size_t c = 0; c < k; ++c) {
      CHECK(std::abs(static_cast<double>(h[c]) - expect) <= 0.1 * expect);
    }
  }
}

TEST_CASE("partition is deterministic in the rng seed") {
  const auto labels = balanced_labels(500, 5, 7);
  Rng a(42);
  Rng b(42);
  CHECK(dirichlet_partition(labels, 6, 0.2, a) ==
        dirichlet_partition(labels, 6, 0.2, b));
  Rng c(43);
  CHECK(dirichlet_partition(labels, 6, 0.2, c) !=
        dirichlet_partition(labels, 6, 0.2, b));
}

TEST_CASE("partition rejects impossible minimum sizes") {
  const auto labels = balanced_labels(30, 3, 8);
  Rng rng(9);
  // 30 samples cannot give 16 clients 10 samples each.
  CHECK_THROWS_AS(dirichlet_partition(labels, 16, 0.1, rng, 10, 5), DataError);
}

TEST_CASE("benchmark partition matches the frozen fixture and is concentrated") {
  // Same labels and partition stream as the bundled benchmark config.
  ExperimentConfig cfg =
      load_config_file(std::string(FEDSIM_CONFIG_DIR) + "/benchmark.json");
  SynthConfig synth = cfg.data.synth;
  synth.seed = derive_seed(cfg.master_seed, "data");
  const SynthResult gen = synth_generate(synth);
  Rng rng(derive_seed(cfg.master_seed, "partition"));
  const auto assignment = dirichlet_partition(gen.data.labels,
                                              cfg.data.n_clients,
                                              cfg.data.alpha, rng);
  const auto hist = per_client_histograms(gen.data.labels, assignment,
                                          cfg.data.n_clients, 10);

  std::ifstream in(std::string(FEDSIM_GOLDEN_DIR) +
                   "/partition_benchmark.json");
  REQUIRE(in.good());
  nlohmann::json golden;
  in >> golden;
  REQUIRE(golden["histograms"].size() == hist.size());
  for (std::size_t c = 0; c < hist.size(); ++c) {
    const auto expected =
        golden["histograms"][c].get<std::vector<std::size_t>>();
    CHECK(hist[c] == expected);
  }

  // Label skew at alpha = 0.1: most of a client's mass sits in its two
  // dominant classes. On this seed the per-client floor is 0.54 and the
  // mean is far above 0.6.
  double mean_top2 = 0.0;
  for (const auto& h : hist) {
    std::vector<std::size_t> sorted = h;
    std::sort(sorted.rbegin(), sorted.rend());
    std::size_t total = 0;
    for (std::size_t v : h) {
      total += v;
    }
    const double top2 = static_cast<double>(sorted[0] + sorted[1]) /
                        static_cast<double>(total);
    CHECK(top2 >= 0.5);
    mean_top2 += top2;
  }
  CHECK(mean_top2 / static_cast<double>(hist.size()) >= 0.6);
}

TEST_CASE("synthetic generation is deterministic and balanced") {
  SynthConfig cfg;
  cfg.n_clients = 3;
  cfg.classes = 5;
  cfg.samples_per_client = 40;
  cfg.feature_dim = 6;
  cfg.noise_scale = 0.5;
  cfg.feature_shift_scale = 0.7;
  cfg.seed = 11;
  const SynthResult a = synth_generate(cfg);
  const SynthResult b = synth_generate(cfg);
  CHECK(a.data.labels == b.data.labels);
  CHECK(std::equal(a.data.features.data().begin(),
                   a.data.features.data().end(),
                   b.data.features.data().begin()));
  CHECK(a.client_offsets == b.client_offsets);

  const auto hist = label_histogram(a.data);
  for (std::size_t c : hist) {
    CHECK(c == 24);  // 120 samples over 5 classes
  }
  for (const auto& off : a.client_offsets) {
    double norm = 0.0;
    for (double v : off) {
      norm += v * v;
    }
    CHECK(std::sqrt(norm) == doctest::Approx(0.7).epsilon(1e-12));
  }
}

TEST_CASE("class centers respect the minimum separation") {
  SynthConfig cfg;
  cfg.n_clients = 2;
  cfg.classes = 6;
  cfg.samples_per_client = 300;
  cfg.feature_dim = 3;  // tight space forces the rejection loop to work
  cfg.noise_scale = 1.0;
  cfg.seed = 25;
  const SynthResult gen = synth_generate(cfg);
  // Recover per-class sample means; they sit near the true centers.
  std::vector<std::vector<double>> mean(6, std::vector<double>(3, 0.0));
  std::vector<std::size_t> count(6, 0);
  for (std::size_t i = 0; i < gen.data.size(); ++i) {
    ++count[gen.data.labels[i]];
    for (std::size_t j = 0; j < 3; ++j) {
      mean[gen.data.labels[i]][j] += gen.data.features.at(i, j);
    }
  }
  for (std::size_t c = 0; c < 6; ++c) {
    for (auto& v : mean[c]) {
      v /= static_cast<double>(count[c]);
    }
  }
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t b = a + 1; b < 6; ++b) {
      double d = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        d += (mean[a][j] - mean[b][j]) * (mean[a][j] - mean[b][j]);
      }
      CHECK(std::sqrt(d) > 4.0 - 1.0);  // 4*noise minus sampling slack
    }
  }
}

TEST_CASE("zero feature shift leaves client distributions aligned") {
  SynthConfig cfg;
  cfg.n_clients = 2;
  cfg.classes = 3;
  cfg.samples_per_client = 400;
  cfg.feature_dim = 4;
  cfg.noise_scale = 0.5;
  cfg.feature_shift_scale = 0.0;
  cfg.seed = 12;
  const SynthResult gen = synth_generate(cfg);
  for (const auto& off : gen.client_offsets) {
    for (double v : off) {
      CHECK(v == 0.0);
    }
  }
  // Balanced assignment: the two clients' sample means agree up to sampling
  // error.
  Rng rng(13);
  const auto assignment = dirichlet_partition(gen.data.labels, 2, 1e6, rng);
  std::vector<std::vector<double>> mean(2, std::vector<double>(4, 0.0));
  std::vector<std::size_t> count(2, 0);
  for (std::size_t i = 0; i < gen.data.size(); ++i) {
    const auto c = static_cast<std::size_t>(assignment[i]);
    ++count[c];
    for (std::size_t j = 0; j < 4; ++j) {
      mean[c][j] += gen.data.features.at(i, j);
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (auto& v : mean[c]) {
      v /= static_cast<double>(count[c]);
    }
  }
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(std::abs(mean[0][j] - mean[1][j]) < 0.25);
  }
}

TEST_CASE("a linear classifier separates the unshifted synthetic data") {
  SynthConfig cfg;
  cfg.n_clients = 2;
  cfg.classes = 4;
  cfg.samples_per_client = 200;
  cfg.feature_dim = 8;
  cfg.noise_scale = 0.5;
  cfg.feature_shift_scale = 0.0;
  cfg.seed = 14;
  const SynthResult gen = synth_generate(cfg);
  const Dataset& ds = gen.data;

  // Test-local softmax regression, full-batch gradient descent.
  const std::size_t n = ds.size();
  const std::size_t d = ds.dim();
  const std::size_t k = ds.num_classes;
  std::vector<double> w(d * k, 0.0);
  std::vector<double> bias(k, 0.0);
  for (int step = 0; step < 150; ++step) {
    std::vector<double> gw(d * k, 0.0);
    std::vector<double> gb(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        z[c] = bias[c];
        for (std::size_t j = 0; j < d; ++j) {
          z[c] += ds.features.at(i, j) * w[j * k + c];
        }
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double& v : z) {
        v = std::exp(v - mx);
        sum += v;
      }
      for (std::size_t c = 0; c < k; ++c) {
        const double p = z[c] / sum - (ds.labels[i] == c ? 1.0 : 0.0);
        gb[c] += p / static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) {
          gw[j * k + c] += p * ds.features.at(i, j) / static_cast<double>(n);
        }
      }
    }
    for (std::size_t x = 0; x < w.size(); ++x) {
      w[x] -= 0.5 * gw[x];
    }
    for (std::size_t c = 0; c < k; ++c) {
      bias[c] -= 0.5 * gb[c];
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_z = -1e300;
    for (std::size_t c = 0; c < k; ++c) {
      double z = bias[c];
      for (std::size_t j = 0; j < d; ++j) {
        z += ds.features.at(i, j) * w[j * k + c];
      }
      if (z > best_z) {
        best_z = z;
        best = c;
      }
    }
    correct += best == ds.labels[i] ? 1 : 0;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(n) > 0.95);
}

TEST_CASE("train/test split arithmetic and stratification") {
  SUBCASE("10 samples at ratio 0.5 split 5/5") {
    Dataset ds;
    ds.features = Tensor({10, 1});
    for (std::size_t i = 0; i < 10; ++i) {
      ds.features.at(i, 0) = static_cast<double>(i);
    }
    ds.labels = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    ds.num_classes = 2;
    Rng rng(15);
    const auto [train, test] = split_train_test(ds, 0.5, rng);
    CHECK(train.size() == 5);
    CHECK(test.size() == 5);
  }
  SUBCASE("singleton classes land in train") {
    Dataset ds;
    ds.features = Tensor({5, 1});
    ds.labels = {0, 0, 0, 0, 1};
    ds.num_classes = 2;
    Rng rng(16);
    const auto [train, test] = split_train_test(ds, 0.5, rng);
    CHECK(std::count(train.labels.begin(), train.labels.end(), 1u) == 1);
    CHECK(std::count(test.labels.begin(), test.labels.end(), 1u) == 0);
  }
  SUBCASE("union of the outputs is the input, as multisets") {
    Dataset ds;
    ds.features = Tensor({21, 2});
    ds.labels.resize(21);
    Rng fill(17);
    for (std::size_t i = 0; i < 21; ++i) {
      ds.labels[i] = i % 3;
      ds.features.at(i, 0) = fill.normal();
      ds.features.at(i, 1) = fill.normal();
    }
    ds.num_classes = 3;
    Rng rng(18);
    const auto [train, test] = split_train_test(ds, 0.5, rng);
    CHECK(train.size() + test.size() == ds.size());
    std::multiset<std::pair<double, std::size_t>> all;
    std::multiset<std::pair<double, std::size_t>> got;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      all.insert({ds.features.at(i, 0), ds.labels[i]});
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
      got.insert({train.features.at(i, 0), train.labels[i]});
    }
    for (std::size_t i = 0; i < test.size(); ++i) {
      got.insert({test.features.at(i, 0), test.labels[i]});
    }
    CHECK(all == got);
  }
  SUBCASE("shards of fewer than 2 samples cannot be split") {
    Dataset ds;
    ds.features = Tensor({1, 1});
    ds.labels = {0};
    ds.num_classes = 1;
    Rng rng(19);
    CHECK_THROWS_AS(split_train_test(ds, 0.5, rng), DataError);
  }
  SUBCASE("ratio bounds") {
    Dataset ds;
    ds.features = Tensor({4, 1});
    ds.labels = {0, 0, 1, 1};
    ds.num_classes = 2;
    Rng rng(20);
    CHECK_THROWS_AS(split_train_test(ds, 0.0, rng), InputError);
    CHECK_THROWS_AS(split_train_test(ds, 1.0, rng), InputError);
  }
}

TEST_CASE("csv load and save") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fedsim_csv_test";
  fs::create_directories(dir);

  SUBCASE("reads a small file") {
    const fs::path p = dir / "small.csv";
    std::ofstream out(p);
    out << "f0,f1,label\n1.5,-2.25,0\n3.125,4.0,2\n";
    out.close();
    const Dataset ds = load_csv(p.string());
    CHECK(ds.size() == 2);
    CHECK(ds.dim() == 2);
    CHECK(ds.num_classes == 3);
    CHECK(ds.features.at(0, 0) == 1.5);
    CHECK(ds.features.at(1, 1) == 4.0);
    CHECK(ds.labels[1] == 2);
  }
  SUBCASE("rejects an empty data section") {
    const fs::path p = dir / "empty.csv";
    std::ofstream out(p);
    out << "f0,f1,label\n";
    out.close();
    CHECK_THROWS_AS(load_csv(p.string()), DataError);
  }
  SUBCASE("names the offending line") {
    const fs::path p = dir / "bad.csv";
    std::ofstream out(p);
    out << "f0,label\n1.0,0\nx,1\n";
    out.close();
    CHECK_THROWS_WITH_AS(load_csv(p.string()), doctest::Contains(":3:"),
                         DataError);
  }
  SUBCASE("rejects fractional labels") {
    const fs::path p = dir / "fraclabel.csv";
    std::ofstream out(p);
    out << "f0,label\n1.0,0.5\n2.0,1\n";
    out.close();
    CHECK_THROWS_AS(load_csv(p.string()), DataError);
  }
  SUBCASE("write-then-load round-trips exactly") {
    SynthConfig cfg;
    cfg.n_clients = 2;
    cfg.classes = 3;
    cfg.samples_per_client = 25;
    cfg.feature_dim = 5;
    cfg.noise_scale = 1.0;
    cfg.seed = 21;
    const Dataset ds = synth_generate(cfg).data;
    const fs::path p = dir / "roundtrip.csv";
    save_csv(ds, p.string());
    const Dataset back = load_csv(p.string());
    REQUIRE(back.size() == ds.size());
    CHECK(back.labels == ds.labels);
    for (std::size_t i = 0; i < ds.features.size(); ++i) {
      CHECK(back.features[i] == ds.features[i]);
    }
  }
}

TEST_CASE("standardization centers and scales every dimension") {
  SynthConfig cfg;
  cfg.n_clients = 2;
  cfg.classes = 3;
  cfg.samples_per_client = 100;
  cfg.feature_dim = 4;
  cfg.noise_scale = 2.0;
  cfg.seed = 22;
  Dataset ds = synth_generate(cfg).data;
  standardize_features(ds);
  for (std::size_t j = 0; j < ds.dim(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      m += ds.features.at(i, j);
    }
    m /= static_cast<double>(ds.size());
    double var = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      var += (ds.features.at(i, j) - m) * (ds.features.at(i, j) - m);
    }
    var /= static_cast<double>(ds.size());
    CHECK(std::abs(m) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("build_shards applies offsets and keeps sides disjoint") {
  SynthConfig cfg;
  cfg.n_clients = 3;
  cfg.classes = 4;
  cfg.samples_per_client = 60;
  cfg.feature_dim = 3;
  cfg.noise_scale = 0.5;
  cfg.feature_shift_scale = 2.0;
  cfg.seed = 23;
  const SynthResult gen = synth_generate(cfg);
  Rng rng(24);
  const auto assignment = dirichlet_partition(gen.data.labels, 3, 5.0, rng);
  const auto shards =
      build_shards(gen.data, assignment, 3, gen.client_offsets, 0.5, 99);
  REQUIRE(shards.size() == 3);
  std::size_t total = 0;
  for (const auto& s : shards) {
    total += s.train.size() + s.test.size();
    std::size_t hist_sum = 0;
    for (std::size_t c : s.label_histogram) {
      hist_sum += c;
    }
    CHECK(hist_sum == s.train.size() + s.test.size());
  }
  CHECK(total == gen.data.size());
}

TEST_CASE("label entropy falls as alpha shrinks") {
  const std::size_t n = 4000;
  const std::size_t k = 10;
  const std::size_t clients = 10;
  double entropy_005 = 0.0;
  double entropy_01 = 0.0;
  double entropy_10 = 0.0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    const auto labels = balanced_labels(n, k, derive_seed(100, "entropy", s));
    auto run = [&](double alpha) {
      Rng rng(derive_seed(200, "entropy-part", s));
      const auto assignment = dirichlet_partition(labels, clients, alpha, rng);
      return mean_label_entropy(
          per_client_histograms(labels, assignment, clients, k));
    };
    entropy_005 += run(0.05);
    entropy_01 += run(0.1);
    entropy_10 += run(10.0);
  }
  entropy_005 /= seeds;
  entropy_01 /= seeds;
  entropy_10 /= seeds;
  CHECK(entropy_005 < entropy_01);
  CHECK(entropy_01 + 0.5 < entropy_10);
}
