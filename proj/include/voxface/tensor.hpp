// Copyright 2026 Voxface Authors
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

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "voxface/common.hpp"

namespace voxface {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated only while requires_grad
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major double tensor. Value-semantics handle to shared storage;
/// tensors that never require gradients are treated as immutable once built.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

  static Tensor filled(Shape shape, double fill) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->values.assign(shape_numel(shape), fill);
    t.node_->shape = std::move(shape);
    if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeError(cat("tensor: shape ", shape, " does not match ", values.size(), " values"));
    if (!all_finite(values)) throw NumericError("tensor: non-finite input values");
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->values.size(); }

  const std::vector<double>& values() const { return node_->values; }

  /// Mutable access for leaf initialization and optimizer updates. Mutating a
  /// tensor that already participated in a recorded op invalidates the tape;
  /// callers only do this between forward passes.
  std::vector<double>& raw_values() { return node_->values; }

  double value() const {
    if (size() != 1) throw ShapeError(cat("value(): tensor has ", size(), " elements, expected scalar"));
    return node_->values[0];
  }

  double at(std::size_t i) const { return node_->values.at(i); }
  double at2(std::size_t r, std::size_t c) const {
    return node_->values.at(r * node_->shape.at(1) + c);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (rg)
      node_->grad.assign(node_->values.size(), 0.0);
    else
      node_->grad.clear();
    return *this;
  }

  const std::vector<double>& grad() const {
    if (!requires_grad()) throw Error("grad(): tensor does not require gradients");
    return node_->grad;
  }

  void zero_grad() {
    if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace detail {

/// Adjoint buffers for a single backward sweep.
struct BackwardCtx {
  std::unordered_map<TensorNode*, std::vector<double>> adjoints;

  std::vector<double>* find(TensorNode* n) {
    auto it = adjoints.find(n);
    return it == adjoints.end() ? nullptr : &it->second;
  }
  std::vector<double>& at_or_create(TensorNode* n) {
    auto it = adjoints.find(n);
    if (it == adjoints.end())
      it = adjoints.emplace(n, std::vector<double>(n->values.size(), 0.0)).first;
    return it->second;
  }
};

struct TapeEntry {
  const char* op;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::shared_ptr<TensorNode> output;
  // Receives the adjoint of `output` and accumulates into input adjoints.
  std::function<void(BackwardCtx&, const std::vector<double>&)> backward;
};

}  // namespace detail

/// Single-owner record of recorded operations, replayed once by backward().
/// One tape per thread; one forward/backward sequence at a time.
class Tape {
 public:
  bool recording() const { return enabled_ && depth_ == 0; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(detail::TapeEntry e) { entries_.push_back(std::move(e)); }
  const std::vector<detail::TapeEntry>& entries() const { return entries_; }

 private:
  friend class NoGradGuard;
  friend void backward(const Tensor&);
  std::vector<detail::TapeEntry> entries_;
  bool enabled_ = true;
  int depth_ = 0;  // NoGradGuard nesting
};

inline Tape& tape() {
  thread_local Tape t;
  return t;
}

/// Disables tape recording for its scope (frozen-model evaluation, oracles).
class NoGradGuard {
 public:
  NoGradGuard() { ++tape().depth_; }
  ~NoGradGuard() { --tape().depth_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

inline void check_finite_out(const char* op, const std::vector<double>& v) {
  if (!all_finite(v)) throw NumericError(cat(op, ": produced non-finite values"));
}

/// Builds the output tensor, runs the finiteness check, and records the entry
/// when any input participates in the tape.
inline Tensor make_op_output(const char* op, Shape out_shape, std::vector<double> out_values,
                             std::vector<Tensor> inputs,
                             std::function<void(BackwardCtx&, const std::vector<double>&)> bw) {
  check_finite_out(op, out_values);
  Tensor out = Tensor::from(std::move(out_shape), std::move(out_values));
  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.node()->requires_grad;
  // Intermediate results carry the propagated flag so chained ops keep recording,
  // but only leaves ever own a .grad buffer.
  if (tape().recording() && any_grad) {
    out.node()->requires_grad = true;
    detail::TapeEntry e;
    e.op = op;
    for (const Tensor& t : inputs) e.inputs.push_back(t.node_ptr());
    e.output = out.node_ptr();
    e.backward = std::move(bw);
    tape().record(std::move(e));
  }
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(cat(op, ": shape mismatch ", a.shape(), " vs ", b.shape()));
}

inline void require_rank(const char* op, const Tensor& t, std::size_t r) {
  if (t.rank() != r)
    throw ShapeError(cat(op, ": expected rank ", r, " tensor, got shape ", t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op_output(
      "add", a.shape(), std::move(out), {a, b},
      [an, bn](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& db = ctx.at_or_create(bn);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i];
          db[i] += g[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op_output(
      "sub", a.shape(), std::move(out), {a, b},
      [an, bn](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& db = ctx.at_or_create(bn);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i];
          db[i] -= g[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op_output(
      "mul", a.shape(), std::move(out), {a, b},
      [an, bn](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& db = ctx.at_or_create(bn);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i] * bn->values[i];
          db[i] += g[i] * an->values[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("scale: non-finite scalar");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto an = a.node();
  return detail::make_op_output("scale", a.shape(), std::move(out), {a},
                                [an, c](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
                                });
}

/// Multiply every element by a one-element tensor (the scalar participates in
/// gradients, unlike scale()).
inline Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError(cat("mul_scalar_tensor: scalar operand has shape ", s.shape()));
  const double sv = s.values()[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * sv;
  auto an = a.node(), sn = s.node();
  return detail::make_op_output(
      "mul_scalar_tensor", a.shape(), std::move(out), {a, s},
      [an, sn, sv](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& ds = ctx.at_or_create(sn);
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i] * sv;
          acc += g[i] * an->values[i];
        }
        ds[0] += acc;
      });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  auto an = a.node();
  return detail::make_op_output("relu", a.shape(), std::move(out), {a},
                                [an](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (an->values[i] > 0.0) da[i] += g[i];
                                });
}

namespace detail {
inline constexpr double inv_sqrt2 = 0.7071067811865475244;
inline constexpr double inv_sqrt2pi = 0.3989422804014326779;
}  // namespace detail

inline Tensor gelu(const Tensor& a) {
  // Exact erf form: x * Phi(x).
  using detail::inv_sqrt2;
  using detail::inv_sqrt2pi;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto an = a.node();
  return detail::make_op_output(
      "gelu", a.shape(), std::move(out), {a},
      [an](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = an->values[i];
          const double phi_cdf = 0.5 * (1.0 + std::erf(x * detail::inv_sqrt2));
          const double phi_pdf = detail::inv_sqrt2pi * std::exp(-0.5 * x * x);
          da[i] += g[i] * (phi_cdf + x * phi_pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw ShapeError(cat("matmul: shape mismatch ", a.shape(), " vs ", b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op_output(
      "matmul", {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& db = ctx.at_or_create(bn);
        // dA = G B^T ; dB = A^T G
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = g.data() + i * n;
            const double* brow = bn->values.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + p] += acc;
          }
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double aip = an->values[i * k + p];
            const double* grow = g.data() + i * n;
            double* drow = db.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
          }
      });
}

inline Tensor transpose2d(const Tensor& a) {
  detail::require_rank("transpose2d", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node();
  return detail::make_op_output("transpose2d", {n, m}, std::move(out), {a},
                                [an, m, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t j = 0; j < n; ++j)
                                    for (std::size_t i = 0; i < m; ++i)
                                      da[i * n + j] += g[j * m + i];
                                });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    throw ShapeError(cat("reshape: ", a.shape(), " has ", a.size(), " elements, target ", new_shape,
                         " needs ", shape_numel(new_shape)));
  auto an = a.node();
  std::vector<double> out = a.values();
  return detail::make_op_output("reshape", std::move(new_shape), std::move(out), {a},
                                [an](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                                });
}

// ---------------------------------------------------------------------------
// Slicing / gathering / concatenation
// ---------------------------------------------------------------------------

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank("slice_rows", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (start + len > m)
    throw ShapeError(cat("slice_rows: [", start, ",", start + len, ") out of range for ", a.shape()));
  std::vector<double> out(a.values().begin() + start * n, a.values().begin() + (start + len) * n);
  auto an = a.node();
  return detail::make_op_output("slice_rows", {len, n}, std::move(out), {a},
                                [an, start, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    da[start * n + i] += g[i];
                                });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank("slice_cols", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (start + len > n)
    throw ShapeError(cat("slice_cols: [", start, ",", start + len, ") out of range for ", a.shape()));
  std::vector<double> out(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a.values()[i * n + start + j];
  auto an = a.node();
  return detail::make_op_output(
      "slice_cols", {m, len}, std::move(out), {a},
      [an, start, len, m, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < len; ++j) da[i * n + start + j] += g[i * len + j];
      });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  detail::require_rank("gather_rows", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  for (std::size_t r : idx)
    if (r >= m) throw ShapeError(cat("gather_rows: index ", r, " out of range for ", a.shape()));
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(a.values().data() + idx[i] * n, n, out.data() + i * n);
  auto an = a.node();
  auto idx_copy = idx;
  return detail::make_op_output(
      "gather_rows", {idx.size(), n}, std::move(out), {a},
      [an, idx_copy, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        for (std::size_t i = 0; i < idx_copy.size(); ++i)
          for (std::size_t j = 0; j < n; ++j) da[idx_copy[i] * n + j] += g[i * n + j];
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError(cat("concat: axis ", axis, " out of range for ", s0));
  Shape out_shape = s0;
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != s0.size())
      throw ShapeError(cat("concat: rank mismatch ", p.shape(), " vs ", s0));
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.shape()[d] != s0[d])
        throw ShapeError(cat("concat: shape mismatch ", p.shape(), " vs ", s0));
    axis_total += p.shape()[axis];
  }
  out_shape[axis] = axis_total;

  // outer = product of dims before axis, inner = product after.
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;  // in axis units
  struct Piece {
    detail::TensorNode* node;
    std::size_t axis_len, offset;
  };
  std::vector<Piece> pieces;
  for (const Tensor& p : parts) {
    const std::size_t alen = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().data() + o * alen * inner, alen * inner,
                  out.data() + (o * axis_total + offset) * inner);
    pieces.push_back({p.node(), alen, offset});
    offset += alen;
  }
  return detail::make_op_output(
      "concat", std::move(out_shape), std::move(out), parts,
      [pieces, outer, inner, axis_total](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        for (const Piece& p : pieces) {
          auto& dp = ctx.at_or_create(p.node);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * axis_total + p.offset) * inner;
            double* dst = dp.data() + o * p.axis_len * inner;
            for (std::size_t i = 0; i < p.axis_len * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Stacks rank-1 tensors of equal length into a matrix, one per row.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no operands");
  const std::size_t d = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (const Tensor& r : rows) {
    if (r.rank() != 1 || r.size() != d)
      throw ShapeError(cat("stack_rows: expected rank-1 length ", d, ", got ", r.shape()));
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  std::vector<detail::TensorNode*> nodes;
  for (const Tensor& r : rows) nodes.push_back(r.node());
  return detail::make_op_output("stack_rows", {rows.size(), d}, std::move(out), rows,
                                [nodes, d](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  for (std::size_t i = 0; i < nodes.size(); ++i) {
                                    auto& dr = ctx.at_or_create(nodes[i]);
                                    for (std::size_t j = 0; j < d; ++j) dr[j] += g[i * d + j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Row/column broadcasts
// ---------------------------------------------------------------------------

/// out[i,:] = a[i,:] * w[i]
inline Tensor scale_rows(const Tensor& a, const Tensor& w) {
  detail::require_rank("scale_rows", a, 2);
  if (w.rank() != 1 || w.size() != a.dim(0))
    throw ShapeError(cat("scale_rows: weights ", w.shape(), " do not match rows of ", a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] * w.values()[i];
  auto an = a.node(), wn = w.node();
  return detail::make_op_output(
      "scale_rows", a.shape(), std::move(out), {a, w},
      [an, wn, m, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& dw = ctx.at_or_create(wn);
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            da[i * n + j] += g[i * n + j] * wn->values[i];
            acc += g[i * n + j] * an->values[i * n + j];
          }
          dw[i] += acc;
        }
      });
}

/// out[i,:] = a[i,:] + v
inline Tensor add_rowwise(const Tensor& a, const Tensor& v) {
  detail::require_rank("add_rowwise", a, 2);
  if (v.rank() != 1 || v.size() != a.dim(1))
    throw ShapeError(cat("add_rowwise: vector ", v.shape(), " does not match cols of ", a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] + v.values()[j];
  auto an = a.node(), vn = v.node();
  return detail::make_op_output("add_rowwise", a.shape(), std::move(out), {a, v},
                                [an, vn, m, n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  auto& dv = ctx.at_or_create(vn);
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j) {
                                      da[i * n + j] += g[i * n + j];
                                      dv[j] += g[i * n + j];
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= denom;
  }
  auto an = a.node();
  std::vector<double> yvals = out;  // dy/dx needs the outputs
  return detail::make_op_output(
      "softmax", a.shape(), std::move(out), {a},
      [an, yvals = std::move(yvals), rows, n](detail::BackwardCtx& ctx,
                                              const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = yvals.data() + r * n;
          const double* gr = g.data() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) da[r * n + j] += y[j] * (gr[j] - dot);
        }
      });
}

/// Layer normalization over the last axis with affine gain/bias.
/// Pass gain = ones, bias = zeros for the plain normalization.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (a.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t n = a.shape().back();
  if (gain.rank() != 1 || gain.size() != n || bias.rank() != 1 || bias.size() != n)
    throw ShapeError(cat("layer_norm: affine params ", gain.shape(), "/", bias.shape(),
                         " do not match last dim of ", a.shape()));
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  std::vector<double> xhat(a.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(n);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (x[j] - mean) * istd;
      out[r * n + j] = gain.values()[j] * xhat[r * n + j] + bias.values()[j];
    }
  }
  auto an = a.node(), gn = gain.node(), bn = bias.node();
  return detail::make_op_output(
      "layer_norm", a.shape(), std::move(out), {a, gain, bias},
      [an, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       n](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& dg = ctx.at_or_create(gn);
        auto& db = ctx.at_or_create(bn);
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* xh = xhat.data() + r * n;
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dg[j] += gr[j] * xh[j];
            db[j] += gr[j];
            const double dxhat = gr[j] * gn->values[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double dxhat = gr[j] * gn->values[j];
            da[r * n + j] +=
                inv_std[r] * (dxhat - sum_dxhat / dn - xh[j] * sum_dxhat_xhat / dn);
          }
        }
      });
}

/// Where mask != 0, replaces the entry with `fill`. The mask is a constant.
inline Tensor masked_fill(const Tensor& a, const Tensor& mask, double fill) {
  detail::require_same_shape("masked_fill", a, mask);
  if (!std::isfinite(fill)) throw NumericError("masked_fill: non-finite fill");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mask.values()[i] != 0.0 ? fill : a.values()[i];
  auto an = a.node(), mn = mask.node();
  return detail::make_op_output("masked_fill", a.shape(), std::move(out), {a, mask},
                                [an, mn](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (mn->values[i] == 0.0) da[i] += g[i];
                                });
}

// ---------------------------------------------------------------------------
// Convolution and temporal resampling
// ---------------------------------------------------------------------------

/// 1-D strided convolution: x [Cin, L], w [Cout, Cin, K], b [Cout] -> [Cout, Lout].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride) {
  detail::require_rank("conv1d", x, 2);
  if (w.rank() != 3) throw ShapeError(cat("conv1d: weights must be rank 3, got ", w.shape()));
  if (stride < 1) throw ShapeError("conv1d: stride must be >= 1");
  const std::size_t cin = x.dim(0), len = x.dim(1);
  const std::size_t cout = w.dim(0), wcin = w.dim(1), k = w.dim(2);
  if (cin != wcin)
    throw ShapeError(cat("conv1d: input channels ", x.shape(), " vs weights ", w.shape()));
  if (b.rank() != 1 || b.size() != cout)
    throw ShapeError(cat("conv1d: bias ", b.shape(), " does not match ", cout, " out channels"));
  if (len < k)
    throw ShapeError(cat("conv1d: input length ", len, " shorter than kernel ", k));
  const std::size_t lout = (len - k) / stride + 1;
  std::vector<double> out(cout * lout);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t t = 0; t < lout; ++t) {
      double acc = b.values()[o];
      const std::size_t base = t * stride;
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xr = x.values().data() + c * len + base;
        const double* wr = w.values().data() + (o * cin + c) * k;
        for (std::size_t j = 0; j < k; ++j) acc += xr[j] * wr[j];
      }
      out[o * lout + t] = acc;
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return detail::make_op_output(
      "conv1d", {cout, lout}, std::move(out), {x, w, b},
      [xn, wn, bn, cin, len, cout, k, stride, lout](detail::BackwardCtx& ctx,
                                                    const std::vector<double>& g) {
        auto& dx = ctx.at_or_create(xn);
        auto& dw = ctx.at_or_create(wn);
        auto& db = ctx.at_or_create(bn);
        for (std::size_t o = 0; o < cout; ++o) {
          for (std::size_t t = 0; t < lout; ++t) {
            const double go = g[o * lout + t];
            db[o] += go;
            const std::size_t base = t * stride;
            for (std::size_t c = 0; c < cin; ++c) {
              double* dxr = dx.data() + c * len + base;
              const double* xr = xn->values.data() + c * len + base;
              double* dwr = dw.data() + (o * cin + c) * k;
              const double* wr = wn->values.data() + (o * cin + c) * k;
              for (std::size_t j = 0; j < k; ++j) {
                dxr[j] += go * wr[j];
                dwr[j] += go * xr[j];
              }
            }
          }
        }
      });
}

/// Linear-interpolation resampling along time (rows). Endpoints map to
/// endpoints; a single input row is replicated.
inline Tensor interp_time(const Tensor& a, std::size_t t_out) {
  detail::require_rank("interp_time", a, 2);
  if (t_out < 1) throw ShapeError("interp_time: target length must be >= 1");
  const std::size_t t_in = a.dim(0), d = a.dim(1);
  std::vector<double> out(t_out * d);
  struct Mix {
    std::size_t i0, i1;
    double w0, w1;
  };
  std::vector<Mix> mixes(t_out);
  for (std::size_t t = 0; t < t_out; ++t) {
    double pos = 0.0;
    if (t_out > 1 && t_in > 1)
      pos = static_cast<double>(t) * static_cast<double>(t_in - 1) / static_cast<double>(t_out - 1);
    const std::size_t i0 = std::min(static_cast<std::size_t>(pos), t_in - 1);
    const std::size_t i1 = std::min(i0 + 1, t_in - 1);
    const double f = pos - static_cast<double>(i0);
    mixes[t] = {i0, i1, 1.0 - f, f};
    for (std::size_t j = 0; j < d; ++j)
      out[t * d + j] = mixes[t].w0 * a.values()[i0 * d + j] + mixes[t].w1 * a.values()[i1 * d + j];
  }
  auto an = a.node();
  return detail::make_op_output(
      "interp_time", {t_out, d}, std::move(out), {a},
      [an, mixes = std::move(mixes), d](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        for (std::size_t t = 0; t < mixes.size(); ++t)
          for (std::size_t j = 0; j < d; ++j) {
            da[mixes[t].i0 * d + j] += mixes[t].w0 * g[t * d + j];
            da[mixes[t].i1 * d + j] += mixes[t].w1 * g[t * d + j];
          }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  auto an = a.node();
  return detail::make_op_output("sum", {}, {acc}, {a},
                                [an](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (double& v : da) v += g[0];
                                });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  auto an = a.node();
  return detail::make_op_output("mean", {}, {acc * inv}, {a},
                                [an, inv](detail::BackwardCtx& ctx, const std::vector<double>& g) {
                                  auto& da = ctx.at_or_create(an);
                                  for (double& v : da) v += g[0] * inv;
                                });
}

/// Mean squared error over all elements: mean((a - b)^2).
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mse", a, b);
  if (a.size() == 0) throw ShapeError("mse: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  const double inv = 1.0 / static_cast<double>(a.size());
  auto an = a.node(), bn = b.node();
  return detail::make_op_output(
      "mse", {}, {acc * inv}, {a, b},
      [an, bn, inv](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& da = ctx.at_or_create(an);
        auto& db = ctx.at_or_create(bn);
        for (std::size_t i = 0; i < da.size(); ++i) {
          const double d = 2.0 * inv * (an->values[i] - bn->values[i]) * g[0];
          da[i] += d;
          db[i] -= d;
        }
      });
}

// ---------------------------------------------------------------------------
// Rodrigues rotation
// ---------------------------------------------------------------------------

namespace detail {

inline void rodrigues_forward(const double* t, double* R) {
  const double angle2 = t[0] * t[0] + t[1] * t[1] + t[2] * t[2];
  const double angle = std::sqrt(angle2);
  // K = skew(t)
  const double K[9] = {0, -t[2], t[1], t[2], 0, -t[0], -t[1], t[0], 0};
  double K2[9];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 3; ++p) acc += K[i * 3 + p] * K[p * 3 + j];
      K2[i * 3 + j] = acc;
    }
  double c1, c2;
  if (angle < 1e-8) {
    // 2nd-order Taylor keeps the map and its gradient finite at zero.
    c1 = 1.0 - angle2 / 6.0;
    c2 = 0.5 - angle2 / 24.0;
  } else {
    c1 = std::sin(angle) / angle;
    c2 = (1.0 - std::cos(angle)) / angle2;
  }
  for (int i = 0; i < 9; ++i) R[i] = c1 * K[i] + c2 * K2[i];
  R[0] += 1.0;
  R[4] += 1.0;
  R[8] += 1.0;
}

}  // namespace detail

/// Axis-angle (3-vector) to rotation matrix (3x3) via Rodrigues' formula.
inline Tensor rodrigues(const Tensor& theta) {
  if (theta.size() != 3)
    throw ShapeError(cat("rodrigues: expected 3 elements, got shape ", theta.shape()));
  std::vector<double> R(9);
  detail::rodrigues_forward(theta.values().data(), R.data());
  auto tn = theta.node();
  std::vector<double> Rcopy = R;
  return detail::make_op_output(
      "rodrigues", {3, 3}, std::move(R), {theta},
      [tn, Rcopy = std::move(Rcopy)](detail::BackwardCtx& ctx, const std::vector<double>& g) {
        auto& dt = ctx.at_or_create(tn);
        const double* t = tn->values.data();
        const double angle2 = t[0] * t[0] + t[1] * t[1] + t[2] * t[2];
        // dR/dtheta_i contracted with the upstream gradient. Near zero the
        // derivative of the exponential map is the skew generator.
        if (angle2 < 1e-16) {
          // dR/dt_i = [e_i]_x
          dt[0] += g[7] - g[5];
          dt[1] += g[2] - g[6];
          dt[2] += g[3] - g[1];
          return;
        }
        const double* R = Rcopy.data();
        for (int i = 0; i < 3; ++i) {
          // v = t x ((I - R) e_i)
          const double col[3] = {(i == 0 ? 1.0 : 0.0) - R[i], (i == 1 ? 1.0 : 0.0) - R[3 + i],
                                 (i == 2 ? 1.0 : 0.0) - R[6 + i]};
          const double v[3] = {t[1] * col[2] - t[2] * col[1], t[2] * col[0] - t[0] * col[2],
                               t[0] * col[1] - t[1] * col[0]};
          // A = (t_i * skew(t) + skew(v)) / |t|^2
          const double ti = t[i];
          const double A[9] = {0.0,
                               (-ti * t[2] - v[2]) / angle2,
                               (ti * t[1] + v[1]) / angle2,
                               (ti * t[2] + v[2]) / angle2,
                               0.0,
                               (-ti * t[0] - v[0]) / angle2,
                               (-ti * t[1] - v[1]) / angle2,
                               (ti * t[0] + v[0]) / angle2,
                               0.0};
          // dR/dt_i = A * R ; accumulate <g, A R>
          double acc = 0.0;
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
              double ar = 0.0;
              for (int p = 0; p < 3; ++p) ar += A[r * 3 + p] * R[p * 3 + c];
              acc += g[r * 3 + c] * ar;
            }
          dt[i] += acc;
        }
      });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep: seeds d(loss)/d(loss) = 1, replays the tape once in
/// reverse, writes d(loss)/d(leaf) into every recorded leaf that requires
/// gradients, and clears the tape.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError(cat("backward: loss must be scalar, got shape ", loss.shape()));
  Tape& tp = tape();
  if (tp.empty()) throw Error("backward: tape is empty (no forward pass recorded)");

  std::unordered_set<detail::TensorNode*> produced;
  for (const auto& e : tp.entries_) produced.insert(e.output.get());
  if (!produced.count(loss.node()))
    throw Error("backward: loss is not an output of the recorded tape");

  detail::BackwardCtx ctx;
  ctx.adjoints.emplace(loss.node(), std::vector<double>{1.0});

  for (auto it = tp.entries_.rbegin(); it != tp.entries_.rend(); ++it) {
    auto* adj = ctx.find(it->output.get());
    if (!adj) continue;  // this entry does not influence the loss
    it->backward(ctx, *adj);
  }

  // Publish adjoints to leaves. Leaves that took part in the graph but do not
  // influence the loss get an exact zero.
  for (const auto& e : tp.entries_) {
    for (const auto& in : e.inputs) {
      detail::TensorNode* n = in.get();
      if (!n->requires_grad || produced.count(n)) continue;
      if (n->grad.size() != n->values.size()) n->grad.assign(n->values.size(), 0.0);
      auto* adj = ctx.find(n);
      if (adj) {
        if (!all_finite(*adj)) throw NumericError("backward: non-finite gradient produced");
        n->grad = *adj;
      } else {
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
      }
    }
  }
  tp.clear();
}

}  // namespace voxface
