// Copyright (c) 2026 The svpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode differentiation over dense tensors.
//
// A Var is a shared handle to a graph node. Operations (see ops.hpp) build
// new nodes that keep their parents alive and carry a backward closure which
// accumulates into the parents' gradients. Var::backward() on a scalar runs
// the closures in reverse topological order.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/tensor.hpp"

namespace svpool {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_mode_enabled = true;
// Non-null while a BranchTrace is active.
inline thread_local std::uint64_t* branch_trace = nullptr;

inline void MixBranch(std::uint64_t& h, std::uint64_t v) {
  h = (h ^ (v + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
}

// Records which side of each kink a piecewise op took, for elements [0, n).
template <typename Pred>
void TraceBranches(std::size_t n, Pred&& branch_of) {
  if (branch_trace == nullptr) return;
  std::uint64_t& h = *branch_trace;
  MixBranch(h, n);
  for (std::size_t i = 0; i < n; ++i) MixBranch(h, static_cast<std::uint64_t>(branch_of(i)));
}
}  // namespace detail

inline bool GradEnabled() { return detail::grad_mode_enabled; }

// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_enabled) {
    detail::grad_mode_enabled = false;
  }
  ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Fingerprint of the branches taken by piecewise ops (relu, clamp, max, ...)
// while the trace is alive. Two evaluations with equal fingerprints ran on the
// same smooth piece.
class BranchTrace {
 public:
  BranchTrace() : prev_(detail::branch_trace) { detail::branch_trace = &hash_; }
  ~BranchTrace() { detail::branch_trace = prev_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t hash() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t* prev_;
};

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Zero-filled when nothing has flowed into this node yet.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  T item() const {
    SVPOOL_CHECK_SHAPE(node_->value.numel() == 1, "item() on non-scalar ",
                       node_->value.shape().str());
    return node_->value[0];
  }

  void backward() const {
    SVPOOL_CHECK_SHAPE(node_->value.numel() == 1,
                       "backward() requires a scalar output, got ",
                       node_->value.shape().str());
    auto order = TopologicalOrder();
    auto& g = node_->grad_buffer();
    g[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> TopologicalOrder() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    // Iterative post-order DFS; graphs can be deep (hundreds of ops).
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) {
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  NodePtr node_;
};

// Builds the result node of an operation. When no parent needs a gradient (or
// grad mode is off) the parents and closure are dropped.
template <typename T>
Var<T> MakeResult(const char* op, Tensor<T> value,
                  std::vector<Var<T>> parents,
                  std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (GradEnabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// Named parameters and buffers with deterministic (insertion) order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool learnable;
  };

  Var<T> add(const std::string& name, Tensor<T> init, bool learnable = true) {
    SVPOOL_CHECK_SHAPE(!index_.contains(name), "duplicate parameter name '",
                       name, "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, Var<T>(std::move(init), learnable), learnable});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    SVPOOL_CHECK_SHAPE(it != index_.end(), "unknown parameter '", name, "'");
    return entries_[it->second].var;
  }
  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    SVPOOL_CHECK_SHAPE(it != index_.end(), "unknown parameter '", name, "'");
    return entries_[it->second].var;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t learnable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.learnable) n += e.var.value().numel();
    }
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace svpool
