#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

struct ParamEntry {
  std::string name;
  Tensor value;
  /// True for batch-norm-owned entries (scale, offset, running statistics),
  /// which personalized strategies keep local to each client.
  bool bn_private = false;
};

/// Ordered, name-addressable collection of model parameters. Entry order is
/// insertion order and is identical for every model built from the same
/// architecture, which is what aggregation relies on.
class ParamSet {
 public:
  void add(std::string name, Tensor value, bool bn_private);

  bool has(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool bn_private(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  /// Same names, shapes, privacy flags, and order.
  bool same_architecture(const ParamSet& other) const;

 private:
  std::size_t index_of(const std::string& name) const;

  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fedsim
