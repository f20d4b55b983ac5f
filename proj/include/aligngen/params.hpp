#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aligngen/diffcore/tape.hpp"
#include "aligngen/diffcore/tensor.hpp"
#include "aligngen/errors.hpp"

namespace aligngen {

// Parameter groups; codes are the on-disk group byte of checkpoints.
enum class Group : std::uint8_t { kBase = 0, kLora = 1, kDem = 2, kStar = 3 };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::kBase: return "base";
    case Group::kLora: return "lora";
    case Group::kDem: return "dem";
    case Group::kStar: return "s_star";
  }
  return "base";
}

enum class Phase { kPretrain, kAdapt };

template <typename T>
struct ParamEntry {
  std::string name;
  ad::Tensor<T> value;
  Group group = Group::kBase;
  bool trainable = true;
  bool decay = false;  // weight decay applies (matrix weights only)
};

// Named tensors in insertion order. Order is part of the checkpoint format.
template <typename T>
class ParamStore {
 public:
  void add(std::string name, ad::Tensor<T> value, Group group, bool decay) {
    if (index_.contains(name)) throw ArgumentError("ParamStore: duplicate tensor " + name);
    index_[name] = entries_.size();
    entries_.push_back(ParamEntry<T>{std::move(name), std::move(value), group, true, decay});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return entries_.size(); }

  ParamEntry<T>& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("ParamStore: unknown tensor " + name);
    return entries_[it->second];
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("ParamStore: unknown tensor " + name);
    return entries_[it->second];
  }

  ad::Tensor<T>& get(const std::string& name) { return entry(name).value; }
  const ad::Tensor<T>& get(const std::string& name) const { return entry(name).value; }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  bool has_group(Group g) const {
    for (const auto& e : entries_)
      if (e.group == g) return true;
    return false;
  }

  // Pretrain trains only base; adapt trains everything except base.
  void set_phase(Phase phase) {
    for (auto& e : entries_) {
      e.trainable = phase == Phase::kPretrain ? e.group == Group::kBase : e.group != Group::kBase;
    }
  }

  void freeze_all() {
    for (auto& e : entries_) e.trainable = false;
  }

  std::size_t scalar_count(Group g) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == g) n += e.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.value.template cast<U>(), e.group, e.decay);
      out.entry(e.name).trainable = e.trainable;
    }
    return out;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a tape for one forward pass. Trainable tensors become
// gradient-tracking leaves, the rest constants.
template <typename T>
class Bound {
 public:
  Bound(ad::Tape<T>& tape, const ParamStore<T>& store) : tape_(&tape), store_(&store) {}

  ad::Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const auto& e = store_->entry(name);
    auto v = tape_->leaf(e.value, e.trainable);
    vars_.emplace(name, v);
    return v;
  }

  // Uses an existing tape variable for `name` (e.g. a gradcheck leaf).
  void bind(const std::string& name, ad::Var<T> v) {
    if (store_->entry(name).value.dims() != v.dims()) throw ShapeError("Bound: dims mismatch for " + name);
    vars_[name] = v;
  }

  bool has(const std::string& name) const { return store_->contains(name); }
  ad::Tape<T>& tape() { return *tape_; }
  const ParamStore<T>& store() const { return *store_; }

  // Gradients of every bound trainable tensor after backward().
  std::vector<std::pair<std::string, ad::Tensor<T>>> gradients() const {
    std::vector<std::pair<std::string, ad::Tensor<T>>> out;
    for (const auto& e : store_->entries()) {
      if (!e.trainable) continue;
      auto it = vars_.find(e.name);
      out.emplace_back(e.name, it == vars_.end() ? ad::Tensor<T>(e.value.dims()) : it->second.grad());
    }
    return out;
  }

 private:
  ad::Tape<T>* tape_;
  const ParamStore<T>* store_;
  std::unordered_map<std::string, ad::Var<T>> vars_;
};

}  // namespace aligngen
