#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fedmm/errors.hpp"
#include "fedmm/tensor.hpp"

namespace fedmm {

// Named, ordered collection of tensors: one model's learnable state plus its
// normalization buffers. Entry order is the model definition order; it is the
// canonical order for serialization and aggregation.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;  // buffers (running stats) are carried but not optimized
  };

  void add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name)) throw InvalidSpec("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t), trainable});
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidSpec("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidSpec("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }

  void set(const std::string& name, Tensor<T> t) { at(name) = std::move(t); }

  size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  // Deep copy: fresh storage for every tensor, so mutating the copy can never
  // touch the original (broadcast isolation depends on this).
  ParameterSet deep_copy() const {
    ParameterSet out;
    for (const auto& e : entries_) {
      Tensor<T> t(e.tensor.shape(), e.tensor.data(), e.tensor.requires_grad());
      out.add(e.name, std::move(t), e.trainable);
    }
    return out;
  }

  // Deep copy with gradient tracking stripped everywhere: the form in which
  // other-modality trunks are handed to clients, so no gradient can ever be
  // injected into them.
  ParameterSet frozen_copy() const {
    ParameterSet out;
    for (const auto& e : entries_)
      out.add(e.name, Tensor<T>(e.tensor.shape(), e.tensor.data(), false), e.trainable);
    return out;
  }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  bool bitwise_equal(const ParameterSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
      const auto& av = a.tensor.data();
      const auto& bv = b.tensor.data();
      for (size_t k = 0; k < av.size(); ++k)
        if (av[k] != bv[k]) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Gradient map extracted after backward(): name -> gradient tensor. Leaves the
// sweep never reached get explicit zeros.
template <typename T>
using GradMap = std::unordered_map<std::string, std::vector<T>>;

template <typename T>
GradMap<T> collect_grads(const ParameterSet<T>& params) {
  GradMap<T> out;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    if (e.tensor.has_grad())
      out[e.name] = e.tensor.grad();
    else
      out[e.name] = std::vector<T>(e.tensor.data().size(), T(0));
  }
  return out;
}

}  // namespace fedmm
