#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "semiseg/autograd.hpp"

namespace semiseg {

// Ordered, named collection of parameter leaves. The same model code runs on
// a trainable set (student) or a constant set (teacher).
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Var<T>>;

  Var<T>& add(std::string name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), trainable ? parameter(std::move(init)) : constant(std::move(init)));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Var<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Var<T>& at(const std::string& name) {
    return const_cast<Var<T>&>(static_cast<const ParamSet&>(*this).at(name));
  }
  // Undefined Var when absent; used for optional biases.
  Var<T> get(const std::string& name) const { return contains(name) ? at(name) : Var<T>(); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.second.requires_grad()) e.second.zero_grad();
  }

  // Deep copy of the values whose names start with `prefix` (all when empty).
  template <typename U = T>
  ParamSet<U> copy(bool trainable, const std::string& prefix = "") const {
    ParamSet<U> out;
    for (const auto& [name, v] : entries_)
      if (name.rfind(prefix, 0) == 0) out.add(name, v.value().template cast<U>(), trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// He-normal initialiser for a weight tensor with the given fan-in.
template <typename T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  for (auto& x : t.storage()) x = static_cast<T>(nd(rng));
  return t;
}

}  // namespace semiseg
