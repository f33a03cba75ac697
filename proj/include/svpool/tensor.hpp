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

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "svpool/error.hpp"

namespace svpool {

/// Ordered list of positive extents. Row-major: the last axis is contiguous.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { Validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    Validate();
  }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  std::size_t numel() const noexcept {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                           std::multiplies<>());
  }

  // Product of extents in [begin, end).
  std::size_t span_size(std::size_t begin, std::size_t end) const {
    std::size_t n = 1;
    for (std::size_t i = begin; i < end; ++i) n *= dims_[i];
    return n;
  }

  // Copy of this shape with `axis` set to `extent`.
  Shape with(std::size_t axis, std::size_t extent) const {
    auto d = dims_;
    d.at(axis) = extent;
    return Shape(std::move(d));
  }

  Shape without(std::size_t axis) const {
    auto d = dims_;
    d.erase(d.begin() + static_cast<std::ptrdiff_t>(axis));
    return Shape(std::move(d));
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void Validate() const {
    for (auto d : dims_) {
      SVPOOL_CHECK_SHAPE(d >= 1, "shape extents must be >= 1, got ", str());
    }
  }

  std::vector<std::size_t> dims_;
};

// 64-byte aligned buffers. Eigen picks its vectorised summation order from the
// pointer alignment, so unaligned heap blocks make results depend on where
// malloc happened to put them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  // Default-initialises on resize, so sized construction of trivial types
  // leaves memory untouched. Tensor fills explicitly where zeros are needed.
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), Storage<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, const std::vector<T>& data)
      : Tensor(std::move(shape), Storage<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, Storage<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    SVPOOL_CHECK_SHAPE(data_.size() == shape_.numel(), "tensor data size ",
                       data_.size(), " does not match shape ", shape_.str());
  }

  // Contents unspecified; for outputs that are written in full.
  static Tensor Uninitialized(Shape shape) {
    Tensor t;
    t.data_ = Storage<T>(shape.numel());
    t.shape_ = std::move(shape);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  Storage<T>& storage() noexcept { return data_; }
  const Storage<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[Offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[Offset({static_cast<std::size_t>(idx)...})];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  // Same storage, new extents.
  Tensor reshaped(Shape shape) const& {
    return Tensor(std::move(shape), data_);
  }
  Tensor reshaped(Shape shape) && {
    return Tensor(std::move(shape), std::move(data_));
  }

  template <typename U>
  Tensor<U> cast() const {
    Storage<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  std::size_t Offset(std::initializer_list<std::size_t> idx) const {
    SVPOOL_CHECK_SHAPE(idx.size() == shape_.rank(), "index rank ", idx.size(),
                       " vs tensor rank ", shape_.rank());
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      SVPOOL_CHECK_SHAPE(i < shape_[axis], "index ", i, " out of range on axis ",
                         axis, " of ", shape_.str());
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Storage<T> data_;
};

}  // namespace svpool
