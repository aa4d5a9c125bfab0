#include "fedsim/param_set.hpp"

#include <utility>

#include "fedsim/error.hpp"

namespace fedsim {

void ParamSet::add(std::string name, Tensor value, bool bn_private) {
  if (index_.count(name) != 0) {
    throw InputError("duplicate parameter name: " + name);
  }
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), bn_private});
}

bool ParamSet::has(const std::string& name) const {
  return index_.count(name) != 0;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw InputError("unknown parameter: " + name);
  }
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  return entries_[index_of(name)].value;
}

const Tensor& ParamSet::at(const std::string& name) const {
  return entries_[index_of(name)].value;
}

bool ParamSet::bn_private(const std::string& name) const {
  return entries_[index_of(name)].bn_private;
}

bool ParamSet::same_architecture(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.bn_private != b.bn_private ||
        !a.value.same_shape(b.value)) {
      return false;
    }
  }
  return true;
}

}  // namespace fedsim
