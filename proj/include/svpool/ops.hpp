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

// Differentiable primitives. Every function returns a new Var whose node
// carries the matching backward rule.
//
// Layout conventions: channel-first, batch-leading. Convolutions take
// B x C x H x W (or C x H x W); pointwise ops take B x C x ... .

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "svpool/autodiff.hpp"

namespace svpool {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// (outer, n, inner) factorisation of a shape around one axis.
struct AxisView {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

inline AxisView ViewAround(const Shape& s, std::size_t axis) {
  SVPOOL_CHECK_SHAPE(axis < s.rank(), "axis ", axis,
                     " does not exist for shape ", s.str());
  return {s.span_size(0, axis), s[axis], s.span_size(axis + 1, s.rank())};
}

// Broadcast iteration plan for two operands. Dimensions are right-aligned
// (numpy style) and adjacent dimensions are coalesced where both operands
// stay contiguous, so the inner loop is as long as possible.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> extent;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline BroadcastPlan PlanBroadcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.rank(), b.rank());
  std::vector<std::size_t> da(rank, 1), db(rank, 1), dout(rank, 1);
  for (std::size_t i = 0; i < a.rank(); ++i) da[rank - a.rank() + i] = a[i];
  for (std::size_t i = 0; i < b.rank(); ++i) db[rank - b.rank() + i] = b[i];
  for (std::size_t i = 0; i < rank; ++i) {
    SVPOOL_CHECK_SHAPE(da[i] == db[i] || da[i] == 1 || db[i] == 1,
                       "shapes ", a.str(), " and ", b.str(),
                       " are not broadcast-compatible");
    dout[i] = std::max(da[i], db[i]);
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = da[i] == 1 ? 0 : acc_a;
    sb[i] = db[i] == 1 ? 0 : acc_b;
    acc_a *= da[i];
    acc_b *= db[i];
  }
  BroadcastPlan plan;
  plan.out = Shape(dout);
  for (std::size_t i = 0; i < rank; ++i) {
    if (dout[i] == 1) continue;
    if (!plan.extent.empty()) {
      const std::size_t e = dout[i];
      const bool merge_a = plan.stride_a.back() == sa[i] * e;
      const bool merge_b = plan.stride_b.back() == sb[i] * e;
      if (merge_a && merge_b) {
        plan.extent.back() *= e;
        plan.stride_a.back() = sa[i];
        plan.stride_b.back() = sb[i];
        continue;
      }
    }
    plan.extent.push_back(dout[i]);
    plan.stride_a.push_back(sa[i]);
    plan.stride_b.push_back(sb[i]);
  }
  if (plan.extent.empty()) {
    plan.extent = {1};
    plan.stride_a = {0};
    plan.stride_b = {0};
  }
  return plan;
}

// Calls fn(out_offset, a_offset, b_offset, count, a_stride, b_stride) for
// each contiguous run along the innermost coalesced dimension.
template <typename Fn>
void ForEachRun(const BroadcastPlan& p, Fn&& fn) {
  const std::size_t d = p.extent.size();
  const std::size_t n_inner = p.extent[d - 1];
  const std::size_t sa_inner = p.stride_a[d - 1];
  const std::size_t sb_inner = p.stride_b[d - 1];
  std::size_t outer = 1;
  for (std::size_t i = 0; i + 1 < d; ++i) outer *= p.extent[i];
  std::vector<std::size_t> idx(d, 0);
  std::size_t off_a = 0, off_b = 0, off_o = 0;
  for (std::size_t r = 0; r < outer; ++r) {
    fn(off_o, off_a, off_b, n_inner, sa_inner, sb_inner);
    off_o += n_inner;
    for (std::size_t k = d - 1; k-- > 0;) {
      ++idx[k];
      off_a += p.stride_a[k];
      off_b += p.stride_b[k];
      if (idx[k] < p.extent[k]) break;
      off_a -= p.stride_a[k] * idx[k];
      off_b -= p.stride_b[k] * idx[k];
      idx[k] = 0;
    }
  }
}

template <typename T>
void Accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* __restrict d = dst.data();
  const T* __restrict s = src.data();
  const std::size_t n = dst.numel();
  for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

template <typename T, typename F>
Var<T> Unary(const char* op, const Var<T>& x, F&& f,
             std::function<void(Node<T>&)> bw) {
  auto out = Tensor<T>::Uninitialized(x.shape());
  const T* __restrict in = x.value().data();
  T* __restrict o = out.data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) o[i] = f(in[i]);
  return MakeResult<T>(op, std::move(out), {x}, std::move(bw));
}

// Backward for y = f(x) given a derivative expressed through (x, y).
template <typename T, typename D>
std::function<void(Node<T>&)> UnaryBackward(D&& deriv) {
  return [deriv](Node<T>& self) {
    auto& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = px.grad_buffer();
    const T* __restrict g = self.grad.data();
    const T* __restrict x = px.value.data();
    const T* __restrict y = self.value.data();
    T* __restrict dx = gx.data();
    const std::size_t n = gx.numel();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * deriv(x[i], y[i]);
  };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.

enum class BinaryOp { kAdd, kSub, kMul, kDiv };

namespace detail {

// dst[i * sd] += sign * g[i] for one run; stride 0 collapses to a sum.
template <typename T>
void AccumulateRun(T* dst, std::size_t sd, const T* __restrict g, T sign,
                   std::size_t n) {
  if (sd == 1) {
    T* __restrict d = dst;
    for (std::size_t i = 0; i < n; ++i) d[i] += sign * g[i];
  } else if (sd == 0) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += g[i];
    dst[0] += sign * acc;
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i * sd] += sign * g[i];
  }
}

// dst[i * sd] += g[i] * v[i * sv] for one run.
template <typename T>
void AccumulateProductRun(T* dst, std::size_t sd, const T* __restrict g,
                          const T* __restrict v, std::size_t sv, std::size_t n) {
  if (sd == 1 && sv == 1) {
    T* __restrict d = dst;
    for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * v[i];
  } else if (sd == 1 && sv == 0) {
    T* __restrict d = dst;
    const T s = v[0];
    for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * s;
  } else if (sd == 0) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += g[i] * v[i * sv];
    dst[0] += acc;
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i * sd] += g[i] * v[i * sv];
  }
}

template <typename T>
Var<T> Binary(BinaryOp kind, const Var<T>& a, const Var<T>& b) {
  auto plan = std::make_shared<BroadcastPlan>(PlanBroadcast(a.shape(), b.shape()));
  auto out = Tensor<T>::Uninitialized(plan->out);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  ForEachRun(*plan, [&](std::size_t oo, std::size_t oa, std::size_t ob,
                        std::size_t n, std::size_t sa, std::size_t sb) {
    const T* __restrict x = pa + oa;
    const T* __restrict y = pb + ob;
    T* __restrict o = po + oo;
    switch (kind) {
      case BinaryOp::kAdd:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i * sa] + y[i * sb];
        break;
      case BinaryOp::kSub:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i * sa] - y[i * sb];
        break;
      case BinaryOp::kMul:
        if (sa == 1 && sb == 1) {
          for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
        } else if (sa == 1 && sb == 0) {
          const T s = y[0];
          for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * s;
        } else {
          for (std::size_t i = 0; i < n; ++i) o[i] = x[i * sa] * y[i * sb];
        }
        break;
      case BinaryOp::kDiv:
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i * sa] / y[i * sb];
        break;
    }
  });
  static constexpr const char* kNames[] = {"add", "sub", "mul", "div"};
  return MakeResult<T>(
      kNames[static_cast<int>(kind)], std::move(out), {a, b},
      [plan, kind](Node<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const T* g = self.grad.data();
        const T* va = na.value.data();
        const T* vb = nb.value.data();
        T* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
        T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
        ForEachRun(*plan, [&](std::size_t oo, std::size_t oa, std::size_t ob,
                              std::size_t n, std::size_t sa, std::size_t sb) {
          const T* gg = g + oo;
          switch (kind) {
            case BinaryOp::kAdd:
              if (ga) AccumulateRun(ga + oa, sa, gg, T(1), n);
              if (gb) AccumulateRun(gb + ob, sb, gg, T(1), n);
              break;
            case BinaryOp::kSub:
              if (ga) AccumulateRun(ga + oa, sa, gg, T(1), n);
              if (gb) AccumulateRun(gb + ob, sb, gg, T(-1), n);
              break;
            case BinaryOp::kMul:
              if (ga) AccumulateProductRun(ga + oa, sa, gg, vb + ob, sb, n);
              if (gb) AccumulateProductRun(gb + ob, sb, gg, va + oa, sa, n);
              break;
            case BinaryOp::kDiv:
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = oa + i * sa;
                const std::size_t ib = ob + i * sb;
                if (ga) ga[ia] += gg[i] / vb[ib];
                if (gb) gb[ib] -= gg[i] * va[ia] / (vb[ib] * vb[ib]);
              }
              break;
          }
        });
      });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::Binary(BinaryOp::kAdd, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::Binary(BinaryOp::kSub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::Binary(BinaryOp::kMul, a, b);
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::Binary(BinaryOp::kDiv, a, b);
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::Unary<T>(
      "scale", x, [s](T v) { return v * s; },
      detail::UnaryBackward<T>([s](T, T) { return s; }));
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::Unary<T>(
      "add_scalar", x, [s](T v) { return v + s; },
      detail::UnaryBackward<T>([](T, T) { return T(1); }));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <typename T>
Var<T> relu(const Var<T>& x) {
  const T* in = x.value().data();
  detail::TraceBranches(x.value().numel(), [in](std::size_t i) { return in[i] > T(0); });
  return detail::Unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      detail::UnaryBackward<T>([](T v, T) { return v > T(0) ? T(1) : T(0); }));
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::Unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); },
      detail::UnaryBackward<T>([](T, T y) { return T(1) - y * y; }));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::Unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      detail::UnaryBackward<T>([](T, T y) { return y * (T(1) - y); }));
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::Unary<T>(
      "exp", x, [](T v) { return std::exp(v); },
      detail::UnaryBackward<T>([](T, T y) { return y; }));
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::Unary<T>(
      "log", x, [](T v) { return std::log(v); },
      detail::UnaryBackward<T>([](T v, T) { return T(1) / v; }));
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return detail::Unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      detail::UnaryBackward<T>(
          [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); }));
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::Unary<T>(
      "square", x, [](T v) { return v * v; },
      detail::UnaryBackward<T>([](T v, T) { return T(2) * v; }));
}

// max(x, lo); gradient passes only where x > lo.
template <typename T>
Var<T> clamp_min(const Var<T>& x, T lo) {
  const T* in = x.value().data();
  detail::TraceBranches(x.value().numel(), [in, lo](std::size_t i) { return in[i] > lo; });
  return detail::Unary<T>(
      "clamp_min", x, [lo](T v) { return v > lo ? v : lo; },
      detail::UnaryBackward<T>([lo](T v, T) { return v > lo ? T(1) : T(0); }));
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  const T* in = x.value().data();
  detail::TraceBranches(x.value().numel(), [in, lo, hi](std::size_t i) {
    return in[i] <= lo ? 0 : (in[i] >= hi ? 2 : 1);
  });
  return detail::Unary<T>(
      "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      detail::UnaryBackward<T>(
          [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); }));
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  SVPOOL_CHECK_SHAPE(shape.numel() == x.value().numel(), "cannot reshape ",
                     x.shape().str(), " to ", shape.str());
  return MakeResult<T>("reshape", x.value().reshaped(std::move(shape)), {x},
                       [](Node<T>& self) {
                         auto& px = *self.parents[0];
                         detail::Accumulate(px.grad_buffer(), self.grad);
                       });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  SVPOOL_CHECK_SHAPE(!xs.empty(), "concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  SVPOOL_CHECK_SHAPE(axis < s0.rank(), "concat axis ", axis,
                     " does not exist for shape ", s0.str());
  std::size_t total = 0;
  for (const auto& x : xs) {
    SVPOOL_CHECK_SHAPE(x.shape().rank() == s0.rank(), "concat rank mismatch");
    for (std::size_t i = 0; i < s0.rank(); ++i) {
      SVPOOL_CHECK_SHAPE(i == axis || x.shape()[i] == s0[i],
                         "concat extent mismatch on axis ", i, ": ",
                         x.shape().str(), " vs ", s0.str());
    }
    total += x.shape()[axis];
  }
  Shape out_shape = s0.with(axis, total);
  auto out = Tensor<T>::Uninitialized(out_shape);
  const auto ov = detail::ViewAround(out_shape, axis);
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const auto& x : xs) {
    starts.push_back(start);
    const std::size_t n = x.shape()[axis];
    const T* src = x.value().data();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(src + o * n * ov.inner, n * ov.inner,
                  out.data() + (o * ov.n + start) * ov.inner);
    }
    start += n;
  }
  return MakeResult<T>("concat", std::move(out), xs,
                       [ov, starts](Node<T>& self) {
                         for (std::size_t k = 0; k < self.parents.size(); ++k) {
                           auto& p = *self.parents[k];
                           if (!p.requires_grad) continue;
                           auto& gp = p.grad_buffer();
                           const std::size_t n = gp.numel() / (ov.outer * ov.inner);
                           for (std::size_t o = 0; o < ov.outer; ++o) {
                             const T* src = self.grad.data() +
                                            (o * ov.n + starts[k]) * ov.inner;
                             T* dst = gp.data() + o * n * ov.inner;
                             for (std::size_t i = 0; i < n * ov.inner; ++i) {
                               dst[i] += src[i];
                             }
                           }
                         }
                       });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  const auto v = detail::ViewAround(x.shape(), axis);
  SVPOOL_CHECK_SHAPE(length >= 1 && start + length <= v.n, "slice [", start,
                     ", ", start + length, ") out of range for axis ", axis,
                     " of ", x.shape().str());
  auto out = Tensor<T>::Uninitialized(x.shape().with(axis, length));
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(x.value().data() + (o * v.n + start) * v.inner,
                length * v.inner, out.data() + o * length * v.inner);
  }
  return MakeResult<T>("slice", std::move(out), {x},
                       [v, start, length](Node<T>& self) {
                         auto& gx = self.parents[0]->grad_buffer();
                         for (std::size_t o = 0; o < v.outer; ++o) {
                           const T* src = self.grad.data() + o * length * v.inner;
                           T* dst = gx.data() + (o * v.n + start) * v.inner;
                           for (std::size_t i = 0; i < length * v.inner; ++i) {
                             dst[i] += src[i];
                           }
                         }
                       });
}

// ---------------------------------------------------------------------------
// Reductions over one axis. keepdim keeps the reduced axis with extent 1.

namespace detail {

inline Shape ReducedShape(const Shape& s, std::size_t axis, bool keepdim) {
  if (keepdim || s.rank() == 1) return s.with(axis, 1);
  return s.without(axis);
}

}  // namespace detail

template <typename T>
Var<T> sum(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  const auto v = detail::ViewAround(x.shape(), axis);
  Tensor<T> out(detail::ReducedShape(x.shape(), axis, keepdim));
  const T* in = x.value().data();
  T* o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t k = 0; k < v.n; ++k) {
      const T* row = in + (a * v.n + k) * v.inner;
      T* dst = o + a * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += row[i];
    }
  }
  return MakeResult<T>("sum", std::move(out), {x}, [v](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t a = 0; a < v.outer; ++a) {
      const T* g = self.grad.data() + a * v.inner;
      for (std::size_t k = 0; k < v.n; ++k) {
        T* dst = gx.data() + (a * v.n + k) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  const auto v = detail::ViewAround(x.shape(), axis);
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(v.n));
}

// Ties route the gradient to the lowest index.
template <typename T>
Var<T> max(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  const auto v = detail::ViewAround(x.shape(), axis);
  auto out = Tensor<T>::Uninitialized(detail::ReducedShape(x.shape(), axis, keepdim));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(v.outer * v.inner, 0);
  const T* in = x.value().data();
  T* o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    std::copy_n(in + a * v.n * v.inner, v.inner, o + a * v.inner);
    for (std::size_t k = 1; k < v.n; ++k) {
      const T* row = in + (a * v.n + k) * v.inner;
      T* dst = o + a * v.inner;
      std::uint32_t* am = argmax->data() + a * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) {
        if (row[i] > dst[i]) {
          dst[i] = row[i];
          am[i] = static_cast<std::uint32_t>(k);
        }
      }
    }
  }
  detail::TraceBranches(argmax->size(), [&am = *argmax](std::size_t i) { return am[i]; });
  return MakeResult<T>("max", std::move(out), {x}, [v, argmax](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t a = 0; a < v.outer; ++a) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t k = (*argmax)[a * v.inner + i];
        gx[(a * v.n + k) * v.inner + i] += self.grad[a * v.inner + i];
      }
    }
  });
}

// Population standard deviation.
template <typename T>
Var<T> std_dev(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  const auto v = detail::ViewAround(x.shape(), axis);
  Tensor<T> out(detail::ReducedShape(x.shape(), axis, keepdim));
  auto mu = std::make_shared<std::vector<T>>(v.outer * v.inner, T(0));
  const T* in = x.value().data();
  const T inv_n = T(1) / static_cast<T>(v.n);
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      T m = 0;
      for (std::size_t k = 0; k < v.n; ++k) m += in[(a * v.n + k) * v.inner + i];
      m *= inv_n;
      T s = 0;
      for (std::size_t k = 0; k < v.n; ++k) {
        const T d = in[(a * v.n + k) * v.inner + i] - m;
        s += d * d;
      }
      (*mu)[a * v.inner + i] = m;
      out[a * v.inner + i] = std::sqrt(s * inv_n);
    }
  }
  return MakeResult<T>("std", std::move(out), {x}, [v, mu, inv_n](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    for (std::size_t a = 0; a < v.outer; ++a) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const T sd = self.value[a * v.inner + i];
        if (sd <= T(0)) continue;
        const T g = self.grad[a * v.inner + i] * inv_n / sd;
        const T m = (*mu)[a * v.inner + i];
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t idx = (a * v.n + k) * v.inner + i;
          gx[idx] += g * (px.value[idx] - m);
        }
      }
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto v = detail::ViewAround(x.shape(), axis);
  auto out = Tensor<T>::Uninitialized(x.shape());
  const T* in = x.value().data();
  T* o = out.data();
  std::vector<T> mx(v.inner), den(v.inner);
  for (std::size_t a = 0; a < v.outer; ++a) {
    const T* base = in + a * v.n * v.inner;
    T* obase = o + a * v.n * v.inner;
    std::copy_n(base, v.inner, mx.begin());
    for (std::size_t k = 1; k < v.n; ++k) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        mx[i] = std::max(mx[i], base[k * v.inner + i]);
      }
    }
    std::fill(den.begin(), den.end(), T(0));
    for (std::size_t k = 0; k < v.n; ++k) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const T e = std::exp(base[k * v.inner + i] - mx[i]);
        obase[k * v.inner + i] = e;
        den[i] += e;
      }
    }
    for (std::size_t k = 0; k < v.n; ++k) {
      for (std::size_t i = 0; i < v.inner; ++i) obase[k * v.inner + i] /= den[i];
    }
  }
  return MakeResult<T>("softmax", std::move(out), {x}, [v](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    std::vector<T> dot(v.inner);
    for (std::size_t a = 0; a < v.outer; ++a) {
      const std::size_t base = a * v.n * v.inner;
      std::fill(dot.begin(), dot.end(), T(0));
      for (std::size_t k = 0; k < v.n; ++k) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t idx = base + k * v.inner + i;
          dot[i] += self.grad[idx] * self.value[idx];
        }
      }
      for (std::size_t k = 0; k < v.n; ++k) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t idx = base + k * v.inner + i;
          gx[idx] += self.value[idx] * (self.grad[idx] - dot[i]);
        }
      }
    }
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  return sum(reshape(x, Shape{n}), 0);
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  return mean(reshape(x, Shape{n}), 0);
}

// ---------------------------------------------------------------------------
// Linear algebra.

// a: M x K, b: K x N.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  SVPOOL_CHECK_SHAPE(a.shape().rank() == 2 && b.shape().rank() == 2 &&
                         a.dim(1) == b.dim(0),
                     "matmul shape mismatch: ", a.shape().str(), " x ",
                     b.shape().str());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<T>::Uninitialized(Shape{m, n});
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.value().data(), m, k) * ConstMatMap<T>(b.value().data(), k, n);
  return MakeResult<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (na.requires_grad) {
      MatMap<T>(na.grad_buffer().data(), m, k).noalias() +=
          g * ConstMatMap<T>(nb.value.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MatMap<T>(nb.grad_buffer().data(), k, n).noalias() +=
          ConstMatMap<T>(na.value.data(), m, k).transpose() * g;
    }
  });
}

// y = x W^T + b for x: N x in, W: out x in, b: out (optional).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() == 2 && w.shape().rank() == 2 &&
                         x.dim(1) == w.dim(1),
                     "linear shape mismatch: x ", x.shape().str(), ", W ",
                     w.shape().str());
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (b.defined()) {
    SVPOOL_CHECK_SHAPE(b.value().numel() == out_dim, "linear bias size ",
                       b.value().numel(), " vs ", out_dim);
  }
  auto out = Tensor<T>::Uninitialized(Shape{n, out_dim});
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap<T> y(out.data(), n, out_dim);
  y.noalias() = ConstMatMap<T>(x.value().data(), n, in) *
                ConstMatMap<T>(w.value().data(), out_dim, in).transpose();
  if (b.defined()) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) y(r, c) += b.value()[c];
    }
  }
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = b.defined();
  if (has_bias) parents.push_back(b);
  return MakeResult<T>(
      "linear", std::move(out), std::move(parents),
      [n, in, out_dim, has_bias](Node<T>& self) {
        auto& nx = *self.parents[0];
        auto& nw = *self.parents[1];
        ConstMatMap<T> g(self.grad.data(), n, out_dim);
        if (nx.requires_grad) {
          MatMap<T>(nx.grad_buffer().data(), n, in).noalias() +=
              g * ConstMatMap<T>(nw.value.data(), out_dim, in);
        }
        if (nw.requires_grad) {
          MatMap<T>(nw.grad_buffer().data(), out_dim, in).noalias() +=
              g.transpose() * ConstMatMap<T>(nx.value.data(), n, in);
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
          }
        }
      });
}

// 1x1 convolution over axis 1: x is B x Cin x (rest), w is Cout x Cin,
// bias optional (Cout).
template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w,
                      const Var<T>& bias = Var<T>()) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() >= 2, "pointwise_conv input must be at "
                     "least rank 2, got ", x.shape().str());
  SVPOOL_CHECK_SHAPE(w.shape().rank() == 2 && w.dim(1) == x.dim(1),
                     "pointwise_conv channel mismatch: input ", x.shape().str(),
                     ", kernel ", w.shape().str());
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  const std::size_t positions = x.shape().span_size(2, x.shape().rank());
  if (bias.defined()) {
    SVPOOL_CHECK_SHAPE(bias.value().numel() == cout, "pointwise_conv bias size ",
                       bias.value().numel(), " vs ", cout);
  }
  auto out = Tensor<T>::Uninitialized(x.shape().with(1, cout));
  using detail::ConstMatMap;
  using detail::MatMap;
  ConstMatMap<T> wm(w.value().data(), cout, cin);
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T> y(out.data() + b * cout * positions, cout, positions);
    y.noalias() = wm * ConstMatMap<T>(x.value().data() + b * cin * positions,
                                      cin, positions);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += bias.value()[c];
    }
  }
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return MakeResult<T>(
      "pointwise_conv", std::move(out), std::move(parents),
      [batch, cin, cout, positions, has_bias](Node<T>& self) {
        auto& nx = *self.parents[0];
        auto& nw = *self.parents[1];
        ConstMatMap<T> wm(nw.value.data(), cout, cin);
        T* gw = nw.requires_grad ? nw.grad_buffer().data() : nullptr;
        T* gx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
        T* gb = (has_bias && self.parents[2]->requires_grad)
                    ? self.parents[2]->grad_buffer().data()
                    : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMatMap<T> g(self.grad.data() + b * cout * positions, cout, positions);
          if (gw) {
            MatMap<T>(gw, cout, cin).noalias() +=
                g * ConstMatMap<T>(nx.value.data() + b * cin * positions, cin,
                                   positions)
                        .transpose();
          }
          if (gx) {
            MatMap<T>(gx + b * cin * positions, cin, positions).noalias() +=
                wm.transpose() * g;
          }
          if (gb) {
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g.row(c).sum();
          }
        }
      });
}

namespace detail {

// Geometry of one same-padded dilated convolution input group.
struct ConvGroup {
  std::size_t cin, kh, kw, dil_h, dil_w;
  std::size_t rows() const { return cin * kh * kw; }
};

// col[(c*kh + a)*kw + b][i*W + j] = x[c, i + dh*(a - kh/2), j + dw*(b - kw/2)]
template <typename T>
void Im2Col(const ConvGroup& g, std::size_t h, std::size_t wd, const T* x, T* col) {
  const std::size_t hw = h * wd;
  const auto ph = static_cast<std::ptrdiff_t>(g.kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  const auto sh = static_cast<std::ptrdiff_t>(h);
  const auto sw = static_cast<std::ptrdiff_t>(wd);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      const std::ptrdiff_t oi =
          static_cast<std::ptrdiff_t>(g.dil_h) * (static_cast<std::ptrdiff_t>(a) - ph);
      for (std::size_t b = 0; b < g.kw; ++b) {
        const std::ptrdiff_t oj =
            static_cast<std::ptrdiff_t>(g.dil_w) * (static_cast<std::ptrdiff_t>(b) - pw);
        T* row = col + ((c * g.kh + a) * g.kw + b) * hw;
        const std::ptrdiff_t j0 = std::clamp<std::ptrdiff_t>(-oj, 0, sw);
        const std::ptrdiff_t j1 = std::clamp<std::ptrdiff_t>(sw - oj, j0, sw);
        for (std::ptrdiff_t i = 0; i < sh; ++i) {
          T* dst = row + i * sw;
          const std::ptrdiff_t si = i + oi;
          if (si < 0 || si >= sh) {
            std::fill_n(dst, wd, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::ptrdiff_t>(c) * sh + si) * sw;
          std::fill(dst, dst + j0, T(0));
          std::copy(src + j0 + oj, src + j1 + oj, dst + j0);
          std::fill(dst + j1, dst + sw, T(0));
        }
      }
    }
  }
}

template <typename T>
void Col2Im(const ConvGroup& g, std::size_t h, std::size_t wd, const T* col, T* gx) {
  const std::size_t hw = h * wd;
  const auto ph = static_cast<std::ptrdiff_t>(g.kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  const auto sh = static_cast<std::ptrdiff_t>(h);
  const auto sw = static_cast<std::ptrdiff_t>(wd);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      const std::ptrdiff_t oi =
          static_cast<std::ptrdiff_t>(g.dil_h) * (static_cast<std::ptrdiff_t>(a) - ph);
      for (std::size_t b = 0; b < g.kw; ++b) {
        const std::ptrdiff_t oj =
            static_cast<std::ptrdiff_t>(g.dil_w) * (static_cast<std::ptrdiff_t>(b) - pw);
        const T* row = col + ((c * g.kh + a) * g.kw + b) * hw;
        const std::ptrdiff_t j0 = std::clamp<std::ptrdiff_t>(-oj, 0, sw);
        const std::ptrdiff_t j1 = std::clamp<std::ptrdiff_t>(sw - oj, j0, sw);
        for (std::ptrdiff_t i = 0; i < sh; ++i) {
          const std::ptrdiff_t si = i + oi;
          if (si < 0 || si >= sh) continue;
          const T* __restrict src = row + i * sw;
          T* __restrict dst = gx + (static_cast<std::ptrdiff_t>(c) * sh + si) * sw + oj;
          for (std::ptrdiff_t j = j0; j < j1; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

}  // namespace detail

// Sum of same-padded dilated 2-D convolutions over several input groups that
// share the output: out = sum_j conv2d(xs[j], kernels[j], dilations[j]).
// All groups are lowered into one stacked column matrix so each batch item
// costs a single GEMM. Inputs are B x Cin_j x H x W (or Cin_j x H x W).
template <typename T>
Var<T> conv2d_sum(const std::vector<Var<T>>& xs, const std::vector<Var<T>>& kernels,
                  const std::vector<std::pair<std::size_t, std::size_t>>& dilations) {
  SVPOOL_CHECK_SHAPE(!xs.empty() && xs.size() == kernels.size() &&
                         xs.size() == dilations.size(),
                     "conv2d_sum needs matching, non-empty input/kernel/dilation lists");
  const bool batched = xs[0].shape().rank() == 4;
  SVPOOL_CHECK_SHAPE(batched || xs[0].shape().rank() == 3,
                     "conv2d input must be C x H x W or B x C x H x W, got ",
                     xs[0].shape().str());
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? xs[0].dim(0) : 1;
  const std::size_t h = xs[0].dim(off + 1), wd = xs[0].dim(off + 2);
  const std::size_t cout = kernels[0].shape().rank() == 4 ? kernels[0].dim(0) : 0;
  std::vector<detail::ConvGroup> groups;
  std::vector<std::size_t> row_off;
  std::size_t rows = 0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const auto& x = xs[j];
    const auto& k = kernels[j];
    SVPOOL_CHECK_SHAPE(x.shape().rank() == off + 3 && (!batched || x.dim(0) == batch) &&
                           x.dim(off + 1) == h && x.dim(off + 2) == wd,
                       "conv2d_sum input ", j, " has shape ", x.shape().str(),
                       ", expected spatial ", h, "x", wd);
    SVPOOL_CHECK_SHAPE(k.shape().rank() == 4,
                       "conv2d kernel must be Cout x Cin x kh x kw, got ", k.shape().str());
    SVPOOL_CHECK_SHAPE(k.dim(1) == x.dim(off), "conv2d channel mismatch: input has ",
                       x.dim(off), " channels, kernel expects ", k.dim(1));
    SVPOOL_CHECK_SHAPE(k.dim(0) == cout, "conv2d_sum kernels disagree on Cout");
    SVPOOL_CHECK_SHAPE(dilations[j].first >= 1 && dilations[j].second >= 1,
                       "conv2d dilation must be >= 1");
    groups.push_back({x.dim(off), k.dim(2), k.dim(3), dilations[j].first,
                      dilations[j].second});
    row_off.push_back(rows);
    rows += groups.back().rows();
  }
  const std::size_t hw = h * wd;
  using detail::ConstMatMap;
  using detail::MatMap;

  // Stacked kernel: cout x rows, group j occupying columns [row_off_j, +rows_j).
  auto stack_kernels = [groups, row_off, cout, rows](const std::vector<const T*>& ks) {
    detail::RowMat<T> km(cout, rows);
    for (std::size_t j = 0; j < groups.size(); ++j) {
      km.middleCols(row_off[j], groups[j].rows()) =
          ConstMatMap<T>(ks[j], cout, groups[j].rows());
    }
    return km;
  };
  auto im2col = [groups, row_off, h, wd, hw](const std::vector<const T*>& x_items,
                                             T* col) {
    for (std::size_t j = 0; j < groups.size(); ++j) {
      detail::Im2Col(groups[j], h, wd, x_items[j], col + row_off[j] * hw);
    }
  };

  std::vector<const T*> kptr;
  for (const auto& k : kernels) kptr.push_back(k.value().data());
  const auto km = stack_kernels(kptr);
  auto out = Tensor<T>::Uninitialized(batched ? Shape{batch, cout, h, wd} : Shape{cout, h, wd});
  Storage<T> col(rows * hw);
  std::vector<const T*> items(xs.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < xs.size(); ++j) {
      items[j] = xs[j].value().data() + b * groups[j].cin * hw;
    }
    im2col(items, col.data());
    MatMap<T>(out.data() + b * cout * hw, cout, hw).noalias() =
        km * ConstMatMap<T>(col.data(), rows, hw);
  }

  std::vector<Var<T>> parents(xs.begin(), xs.end());
  parents.insert(parents.end(), kernels.begin(), kernels.end());
  const std::size_t n_groups = xs.size();
  return MakeResult<T>(
      "conv2d", std::move(out), std::move(parents),
      [=](Node<T>& self) {
        std::vector<const T*> kp(n_groups);
        bool any_k = false, any_x = false;
        for (std::size_t j = 0; j < n_groups; ++j) {
          kp[j] = self.parents[n_groups + j]->value.data();
          any_k = any_k || self.parents[n_groups + j]->requires_grad;
          any_x = any_x || self.parents[j]->requires_grad;
        }
        const auto km = stack_kernels(kp);
        detail::RowMat<T> gk;
        if (any_k) gk = detail::RowMat<T>::Zero(cout, rows);
        Storage<T> col(rows * hw);
        std::vector<const T*> items(n_groups);
        // Odd kernels: the input gradient is a same-padded convolution of the
        // output gradient with the spatially flipped, transposed kernel.
        bool odd = true;
        for (const auto& gr : groups) odd = odd && gr.kh % 2 == 1 && gr.kw % 2 == 1;
        std::size_t max_taps = 0;
        std::vector<detail::RowMat<T>> flipped(n_groups);
        Storage<T> gcol;
        if (odd && any_x) {
          for (std::size_t j = 0; j < n_groups; ++j) {
            const auto& gr = groups[j];
            if (!self.parents[j]->requires_grad) continue;
            max_taps = std::max(max_taps, cout * gr.kh * gr.kw);
            auto& f = flipped[j];
            f.resize(gr.cin, cout * gr.kh * gr.kw);
            const T* k = kp[j];
            for (std::size_t o = 0; o < cout; ++o) {
              for (std::size_t c = 0; c < gr.cin; ++c) {
                for (std::size_t a = 0; a < gr.kh; ++a) {
                  for (std::size_t bb = 0; bb < gr.kw; ++bb) {
                    f(c, (o * gr.kh + a) * gr.kw + bb) =
                        k[((o * gr.cin + c) * gr.kh + (gr.kh - 1 - a)) * gr.kw +
                          (gr.kw - 1 - bb)];
                  }
                }
              }
            }
          }
          gcol.resize(max_taps * hw);
        }
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMatMap<T> g(self.grad.data() + b * cout * hw, cout, hw);
          if (any_k) {
            for (std::size_t j = 0; j < n_groups; ++j) {
              items[j] = self.parents[j]->value.data() + b * groups[j].cin * hw;
            }
            im2col(items, col.data());
            gk.noalias() += g * ConstMatMap<T>(col.data(), rows, hw).transpose();
          }
          if (!any_x) continue;
          if (odd) {
            for (std::size_t j = 0; j < n_groups; ++j) {
              auto& nx = *self.parents[j];
              if (!nx.requires_grad) continue;
              const auto& gr = groups[j];
              detail::Im2Col(detail::ConvGroup{cout, gr.kh, gr.kw, gr.dil_h, gr.dil_w}, h,
                             wd, self.grad.data() + b * cout * hw, gcol.data());
              MatMap<T>(nx.grad_buffer().data() + b * gr.cin * hw, gr.cin, hw).noalias() +=
                  flipped[j] * ConstMatMap<T>(gcol.data(), flipped[j].cols(), hw);
            }
            continue;
          }
          MatMap<T>(col.data(), rows, hw).noalias() = km.transpose() * g;
          for (std::size_t j = 0; j < n_groups; ++j) {
            auto& nx = *self.parents[j];
            if (!nx.requires_grad) continue;
            detail::Col2Im(groups[j], h, wd, col.data() + row_off[j] * hw,
                           nx.grad_buffer().data() + b * groups[j].cin * hw);
          }
        }
        for (std::size_t j = 0; j < n_groups; ++j) {
          auto& nk = *self.parents[n_groups + j];
          if (!nk.requires_grad) continue;
          MatMap<T>(nk.grad_buffer().data(), cout, groups[j].rows()) +=
              gk.middleCols(row_off[j], groups[j].rows());
        }
      });
}

// Same-padded 2-D convolution with dilation, no bias.
//   out[o,i,j] = sum_{c,a,b} k[o,c,a,b] * x[c, i + dh*(a - kh/2), j + dw*(b - kw/2)]
// with zeros outside the input. Accepts B x Cin x H x W or Cin x H x W.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t dil_h = 1,
              std::size_t dil_w = 1) {
  return conv2d_sum<T>({x}, {kernel}, {{dil_h, dil_w}});
}

// ---------------------------------------------------------------------------
// Batch normalisation over axis 1 (statistics over every other axis).

template <typename T>
struct BatchNormBuffers {
  Tensor<T>* running_mean;
  Tensor<T>* running_var;
};

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormBuffers<T> buffers, bool training,
                  T momentum = T(0.9), T eps = T(1e-5)) {
  SVPOOL_CHECK_SHAPE(x.shape().rank() >= 2, "batch_norm input must be rank >= 2");
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t rest = x.shape().span_size(2, x.shape().rank());
  SVPOOL_CHECK_SHAPE(gamma.value().numel() == ch && beta.value().numel() == ch &&
                         buffers.running_mean->numel() == ch &&
                         buffers.running_var->numel() == ch,
                     "batch_norm parameter size mismatch for ", x.shape().str());
  const std::size_t count = batch * rest;
  auto inv_std = std::make_shared<std::vector<T>>(ch);
  auto mean_v = std::make_shared<std::vector<T>>(ch);
  const T* in = x.value().data();
  if (training) {
    for (std::size_t c = 0; c < ch; ++c) {
      T m = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = in + (b * ch + c) * rest;
        for (std::size_t r = 0; r < rest; ++r) m += p[r];
      }
      m /= static_cast<T>(count);
      T var = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = in + (b * ch + c) * rest;
        for (std::size_t r = 0; r < rest; ++r) var += (p[r] - m) * (p[r] - m);
      }
      var /= static_cast<T>(count);
      (*mean_v)[c] = m;
      (*inv_std)[c] = T(1) / std::sqrt(var + eps);
      const T unbiased =
          count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      (*buffers.running_mean)[c] =
          momentum * (*buffers.running_mean)[c] + (T(1) - momentum) * m;
      (*buffers.running_var)[c] =
          momentum * (*buffers.running_var)[c] + (T(1) - momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      (*mean_v)[c] = (*buffers.running_mean)[c];
      (*inv_std)[c] = T(1) / std::sqrt((*buffers.running_var)[c] + eps);
    }
  }
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T s = gamma.value()[c] * (*inv_std)[c];
      const T t = beta.value()[c] - (*mean_v)[c] * s;
      const T* p = in + (b * ch + c) * rest;
      T* o = out.data() + (b * ch + c) * rest;
      for (std::size_t r = 0; r < rest; ++r) o[r] = p[r] * s + t;
    }
  }
  return MakeResult<T>(
      "batch_norm", std::move(out), {x, gamma, beta},
      [=](Node<T>& self) {
        auto& nx = *self.parents[0];
        auto& ng = *self.parents[1];
        auto& nb = *self.parents[2];
        const T* g = self.grad.data();
        const T* xv = nx.value.data();
        for (std::size_t c = 0; c < ch; ++c) {
          const T m = (*mean_v)[c];
          const T is = (*inv_std)[c];
          T sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * ch + c) * rest;
            for (std::size_t r = 0; r < rest; ++r) {
              sum_g += g[base + r];
              sum_gx += g[base + r] * (xv[base + r] - m) * is;
            }
          }
          if (ng.requires_grad) ng.grad_buffer()[c] += sum_gx;
          if (nb.requires_grad) nb.grad_buffer()[c] += sum_g;
          if (!nx.requires_grad) continue;
          T* gx = nx.grad_buffer().data();
          const T gam = ng.value[c];
          if (training) {
            const T mg = sum_g / static_cast<T>(count);
            const T mgx = sum_gx / static_cast<T>(count);
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * ch + c) * rest;
              for (std::size_t r = 0; r < rest; ++r) {
                const T xh = (xv[base + r] - m) * is;
                gx[base + r] += gam * is * (g[base + r] - mg - xh * mgx);
              }
            }
          } else {
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * ch + c) * rest;
              for (std::size_t r = 0; r < rest; ++r) {
                gx[base + r] += gam * is * g[base + r];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification heads.

// Mean softmax cross-entropy of logits (N x S) against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  SVPOOL_CHECK_SHAPE(logits.shape().rank() == 2 && logits.dim(0) == labels.size(),
                     "cross_entropy expects N x S logits with N labels, got ",
                     logits.shape().str(), " and ", labels.size(), " labels");
  const std::size_t n = logits.dim(0), s = logits.dim(1);
  for (int y : labels) {
    SVPOOL_CHECK_SHAPE(y >= 0 && static_cast<std::size_t>(y) < s, "label ", y,
                       " out of range [0, ", s, ")");
  }
  auto probs = std::make_shared<std::vector<T>>(n * s);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.value().data() + i * s;
    const T mx = *std::max_element(z, z + s);
    T den = 0;
    for (std::size_t j = 0; j < s; ++j) den += std::exp(z[j] - mx);
    const T lse = mx + std::log(den);
    for (std::size_t j = 0; j < s; ++j) (*probs)[i * s + j] = std::exp(z[j] - lse);
    loss += lse - z[(*lab)[i]];
  }
  loss /= static_cast<T>(n);
  return MakeResult<T>("cross_entropy", Tensor<T>(Shape{1}, {loss}), {logits},
                       [n, s, probs, lab](Node<T>& self) {
                         auto& gz = self.parents[0]->grad_buffer();
                         const T g = self.grad[0] / static_cast<T>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < s; ++j) {
                             T d = (*probs)[i * s + j];
                             if (static_cast<int>(j) == (*lab)[i]) d -= T(1);
                             gz[i * s + j] += g * d;
                           }
                         }
                       });
}

// Replaces the target entry of each row of a cosine matrix with
// cos(acos(c) + margin); c is clamped to [-1 + 1e-7, 1 - 1e-7] first.
template <typename T>
Var<T> angular_margin(const Var<T>& cosine, std::span<const int> labels,
                      T margin) {
  SVPOOL_CHECK_SHAPE(cosine.shape().rank() == 2 && cosine.dim(0) == labels.size(),
                     "angular_margin expects N x S cosines with N labels");
  const std::size_t n = cosine.dim(0), s = cosine.dim(1);
  for (int y : labels) {
    SVPOOL_CHECK_SHAPE(y >= 0 && static_cast<std::size_t>(y) < s, "label ", y,
                       " out of range [0, ", s, ")");
  }
  constexpr T kGuard = T(1e-7);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  Tensor<T> out = cosine.value();
  for (std::size_t i = 0; i < n; ++i) {
    T& c = out[i * s + static_cast<std::size_t>((*lab)[i])];
    const T cc = std::clamp(c, T(-1) + kGuard, T(1) - kGuard);
    detail::TraceBranches(1, [&](std::size_t) { return cc == c; });
    c = std::cos(std::acos(cc) + margin);
  }
  return MakeResult<T>(
      "angular_margin", std::move(out), {cosine},
      [n, s, lab, margin](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& gc = p.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < s; ++j) {
            const std::size_t idx = i * s + j;
            if (static_cast<int>(j) != (*lab)[i]) {
              gc[idx] += self.grad[idx];
              continue;
            }
            const T c = p.value[idx];
            if (c <= T(-1) + kGuard || c >= T(1) - kGuard) continue;
            const T theta = std::acos(c);
            gc[idx] += self.grad[idx] * std::sin(theta + margin) /
                       std::sqrt(T(1) - c * c);
          }
        }
      });
}

// x / ||x|| along `axis`.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, std::size_t axis) {
  return div(x, sqrt(sum(square(x), axis, true)));
}

}  // namespace svpool
