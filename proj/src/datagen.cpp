#include "fedsim/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedsim/error.hpp"

namespace fedsim {

void Dataset::validate() const {
  if (size() == 0) {
    throw DataError("dataset is empty");
  }
  if (features.rank() != 2 || features.rows() != size()) {
    throw DataError("dataset features must be one row per label");
  }
  if (num_classes == 0) {
    throw DataError("dataset num_classes must be positive");
  }
  for (std::size_t y : labels) {
    if (y >= num_classes) {
      throw DataError("dataset label out of range");
    }
  }
  if (!features.all_finite()) {
    throw DataError("dataset features contain non-finite values");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset out;
  out.features = gather_rows(features, idx);
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) {
    out.labels.push_back(labels[i]);
  }
  out.num_classes = num_classes;
  return out;
}

void SynthConfig::validate() const {
  if (n_clients == 0 || classes == 0 || samples_per_client == 0 ||
      feature_dim == 0) {
    throw ConfigError("synthetic data counts must be positive");
  }
  if (!(label_skew_alpha > 0.0)) {
    throw ConfigError("label_skew_alpha must be positive");
  }
  if (feature_shift_scale < 0.0) {
    throw ConfigError("feature_shift_scale must be nonnegative");
  }
  if (noise_scale < 0.0) {
    throw ConfigError("noise_scale must be nonnegative");
  }
  if (!(center_spread > 0.0)) {
    throw ConfigError("center_spread must be positive");
  }
}

std::vector<std::size_t> label_histogram(const Dataset& ds) {
  std::vector<std::size_t> hist(ds.num_classes, 0);
  for (std::size_t y : ds.labels) {
    ++hist[y];
  }
  return hist;
}

namespace {

// Largest-remainder apportionment of m items by proportions p.
std::vector<std::size_t> largest_remainder(const std::vector<double>& p,
                                           std::size_t m) {
  const std::size_t n = p.size();
  std::vector<std::size_t> counts(n);
  std::vector<std::pair<double, std::size_t>> rema(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = p[i] * static_cast<double>(m);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rema[i] = {exact - std::floor(exact), i};
    assigned += counts[i];
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) {
      return a.first > b.first;
    }
    return a.second < b.second;
  });
  for (std::size_t r = 0; assigned < m; ++r, ++assigned) {
    ++counts[rema[r % n].second];
  }
  return counts;
}

}  // namespace

std::vector<int> dirichlet_partition(std::span<const std::size_t> labels,
                                     std::size_t n_clients, double alpha,
                                     Rng& rng, std::size_t min_samples,
                                     int max_retries) {
  if (n_clients == 0) {
    throw InputError("dirichlet_partition: need at least one client");
  }
  if (!(alpha > 0.0)) {
    throw InputError("dirichlet_partition: alpha must be positive");
  }
  const std::size_t n = labels.size();
  if (n == 0) {
    throw InputError("dirichlet_partition: no samples");
  }
  if (n_clients == 1) {
    return std::vector<int>(n, 0);
  }

  std::size_t num_classes = 0;
  for (std::size_t y : labels) {
    num_classes = std::max(num_classes, y + 1);
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    by_class[labels[i]].push_back(i);
  }

  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    std::vector<int> assignment(n, -1);
    std::vector<std::size_t> totals(n_clients, 0);
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (by_class[k].empty()) {
        continue;
      }
      std::vector<std::size_t> order = by_class[k];
      const std::vector<double> p = rng.dirichlet(alpha, n_clients);
      const std::vector<std::size_t> counts =
          largest_remainder(p, order.size());
      rng.shuffle(order);
      std::size_t pos = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        for (std::size_t t = 0; t < counts[c]; ++t) {
          assignment[order[pos++]] = static_cast<int>(c);
        }
        totals[c] += counts[c];
      }
    }
    const std::size_t smallest =
        *std::min_element(totals.begin(), totals.end());
    if (smallest >= min_samples) {
      return assignment;
    }
  }
  throw DataError("dirichlet_partition: could not give every client " +
                  std::to_string(min_samples) + " samples after " +
                  std::to_string(max_retries) + " retries (alpha=" +
                  std::to_string(alpha) + ", clients=" +
                  std::to_string(n_clients) + ")");
}

SynthResult synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.n_clients * cfg.samples_per_client;
  const std::size_t k = cfg.classes;
  const std::size_t d = cfg.feature_dim;

  // Balanced global labels, shuffled.
  std::vector<std::size_t> labels;
  labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(i % k);
  }
  rng.shuffle(labels);

  // Class centers at pairwise distance >= 4 * noise_scale.
  const double min_dist = 4.0 * cfg.noise_scale;
  std::vector<std::vector<double>> centers;
  double spread = cfg.center_spread * std::max(cfg.noise_scale, 1e-12);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> cand(d);
    for (int tries = 0;; ++tries) {
      for (auto& v : cand) {
        v = rng.uniform(-spread, spread);
      }
      bool ok = true;
      for (const auto& prev : centers) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = cand[j] - prev[j];
          s += diff * diff;
        }
        if (s < min_dist * min_dist) {
          ok = false;
          break;
        }
      }
      if (ok) {
        break;
      }
      if (tries > 0 && tries % 200 == 0) {
        spread *= 1.5;  // widen until placement succeeds
      }
    }
    centers.push_back(cand);
  }

  Tensor features({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ctr = centers[labels[i]];
    for (std::size_t j = 0; j < d; ++j) {
      features.at(i, j) = ctr[j] + cfg.noise_scale * rng.normal();
    }
  }

  std::vector<std::vector<double>> offsets(cfg.n_clients,
                                           std::vector<double>(d, 0.0));
  if (cfg.feature_shift_scale > 0.0) {
    for (auto& off : offsets) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (auto& v : off) {
          v = rng.normal();
          norm += v * v;
        }
      } while (norm <= 0.0);
      const double scale = cfg.feature_shift_scale / std::sqrt(norm);
      for (auto& v : off) {
        v *= scale;
      }
    }
  }

  SynthResult out;
  out.data = Dataset{std::move(features), std::move(labels), k};
  out.client_offsets = std::move(offsets);
  return out;
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& shard,
                                             double ratio, Rng& rng) {
  if (!(ratio > 0.0) || !(ratio < 1.0)) {
    throw InputError("split ratio must lie in (0, 1)");
  }
  if (shard.size() < 2) {
    throw DataError("cannot split a shard with fewer than 2 samples");
  }
  std::vector<std::vector<std::size_t>> by_class(shard.num_classes);
  for (std::size_t i = 0; i < shard.size(); ++i) {
    by_class[shard.labels[i]].push_back(i);
  }
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  // Carry-corrected rounding: per-class train counts stay within one sample
  // of proportional while their total lands on round(ratio * n).
  double carry = 0.0;
  for (auto& idx : by_class) {
    if (idx.empty()) {
      continue;
    }
    const double want = ratio * static_cast<double>(idx.size()) + carry;
    if (idx.size() == 1) {
      train_idx.push_back(idx[0]);  // singleton classes stay trainable
      carry = want - 1.0;
      continue;
    }
    rng.shuffle(idx);
    const std::size_t n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(std::max(0.0, want))), 1,
        idx.size() - 1);
    carry = want - static_cast<double>(n_train);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + n_train);
    test_idx.insert(test_idx.end(), idx.begin() + n_train, idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  if (test_idx.empty()) {
    throw DataError("train/test split left the test side empty");
  }
  return {shard.subset(train_idx), shard.subset(test_idx)};
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError(path + ": empty file");
  }
  if (!line.empty() && line.back() == '\r') {
    line.pop_back();
  }
  // Header f0,...,f{D-1},label fixes the dimensionality.
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      header.push_back(cell);
    }
  }
  if (header.size() < 2 || header.back() != "label") {
    throw DataError(path + ":1: header must be f0,...,f{D-1},label");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw DataError(path + ":1: unexpected header column '" + header[j] +
                      "'");
    }
  }

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    const std::string where = path + ":" + std::to_string(lineno);
    while (std::getline(ss, cell, ',')) {
      if (col > d) {
        break;
      }
      std::size_t used = 0;
      if (col < d) {
        double v = 0.0;
        try {
          v = std::stod(cell, &used);
        } catch (const std::exception&) {
          throw DataError(where + ": cannot parse '" + cell + "' as a number");
        }
        if (used != cell.size()) {
          throw DataError(where + ": cannot parse '" + cell + "' as a number");
        }
        values.push_back(v);
      } else {
        long long y = 0;
        try {
          y = std::stoll(cell, &used);
        } catch (const std::exception&) {
          throw DataError(where + ": cannot parse label '" + cell + "'");
        }
        if (used != cell.size() || y < 0) {
          throw DataError(where + ": label must be a nonnegative integer");
        }
        labels.push_back(static_cast<std::size_t>(y));
      }
      ++col;
    }
    if (col != d + 1) {
      throw DataError(where + ": expected " + std::to_string(d + 1) +
                      " columns, found " + std::to_string(col));
    }
  }
  if (labels.empty()) {
    throw DataError(path + ": no data rows");
  }
  Dataset ds;
  ds.features = Tensor({labels.size(), d}, std::move(values));
  ds.num_classes =
      *std::max_element(labels.begin(), labels.end()) + 1;
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path);
  }
  const std::size_t d = ds.dim();
  for (std::size_t j = 0; j < d; ++j) {
    out << 'f' << j << ',';
  }
  out << "label\n";
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features.at(i, j));
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

void standardize_features(Dataset& ds) {
  ds.validate();
  const std::size_t n = ds.size();
  const std::size_t d = ds.dim();
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean += ds.features.at(i, j);
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = ds.features.at(i, j) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(n);
    const double std_dev = std::sqrt(var);
    const double inv = std_dev > 1e-12 ? 1.0 / std_dev : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      ds.features.at(i, j) = (ds.features.at(i, j) - mean) * inv;
    }
  }
}

std::vector<ClientShard> build_shards(
    const Dataset& ds, const std::vector<int>& assignment,
    std::size_t n_clients, std::span<const std::vector<double>> offsets,
    double train_ratio, std::uint64_t master_seed) {
  ds.validate();
  if (assignment.size() != ds.size()) {
    throw InputError("build_shards: one assignment per sample required");
  }
  if (!offsets.empty() && offsets.size() != n_clients) {
    throw InputError("build_shards: one offset per client required");
  }
  std::vector<std::vector<std::size_t>> members(n_clients);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const int c = assignment[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n_clients) {
      throw InputError("build_shards: assignment out of range");
    }
    members[static_cast<std::size_t>(c)].push_back(i);
  }
  std::vector<ClientShard> shards;
  shards.reserve(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) {
    Dataset local = ds.subset(members[c]);
    if (!offsets.empty()) {
      const auto& off = offsets[c];
      if (off.size() != local.dim()) {
        throw InputError("build_shards: offset dimensionality mismatch");
      }
      for (std::size_t i = 0; i < local.size(); ++i) {
        for (std::size_t j = 0; j < off.size(); ++j) {
          local.features.at(i, j) += off[j];
        }
      }
    }
    ClientShard shard;
    shard.client_id = static_cast<int>(c);
    shard.label_histogram = label_histogram(local);
    Rng split_rng(derive_seed(master_seed, "split", c));
    auto [train, test] = split_train_test(local, train_ratio, split_rng);
    shard.train = std::move(train);
    shard.test = std::move(test);
    shards.push_back(std::move(shard));
  }
  return shards;
}

}  // namespace fedsim
