// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode automatic differentiation over a closed op set.
//
// A Tape owns every intermediate value. Ops are free functions on Var handles;
// each pushes one node whose backward closure reads its parents' values from
// the tape and accumulates into their gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cascade4d/error.hpp"
#include "cascade4d/tensor.hpp"

namespace c4d {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  Shape shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor v) { return push("constant", std::move(v), {}, nullptr); }

  /// A named leaf that receives a gradient from backward().
  Var parameter(std::string name, Tensor v) {
    check_finite(v, "parameter " + name);
    Node n;
    n.op = "parameter";
    n.value = std::move(v);
    n.requires_grad = record_;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    if (record_) params_.push_back(nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.released) throw ConfigError("value of node " + std::to_string(id) + " (" + n.op + ") was released");
    return n.value;
  }

  /// Protects a node from release(); used for bound parameters.
  void pin(std::size_t id) { nodes_.at(id).pinned = true; }

  /// Inference tapes only: frees the values of nodes created at or after
  /// `from`, except pinned ones and `keep`.
  void release(std::size_t from, std::initializer_list<Var> keep) {
    if (record_) throw ConfigError("release on a recording tape");
    for (std::size_t i = from; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.pinned || n.released) continue;
      if (std::any_of(keep.begin(), keep.end(), [&](const Var& v) { return v.id == i; })) continue;
      n.value = Tensor();
      n.released = true;
    }
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of `id`; zeros when nothing flowed into it.
  Tensor grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad ? *n.grad : Tensor(n.value.shape());
  }

  /// Adds `g` into the gradient of `id`. Used by backward closures.
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g;
      return;
    }
    auto dst = n.grad->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  Tensor* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = Tensor(n.value.shape());
    return &*n.grad;
  }

  const Tensor* out_grad(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.grad ? &*n.grad : nullptr;
  }

  /// Reverse sweep from a scalar loss. Returns parameter name -> gradient.
  std::map<std::string, Tensor> backward(Var loss) {
    if (loss.tape != this) throw ConfigError("backward: loss belongs to another tape");
    Node& root = nodes_.at(loss.id);
    if (!record_ || !root.requires_grad)
      throw ConfigError("backward on an untracked graph");
    if (root.value.size() != 1) throw ShapeError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.reset();
    root.grad = Tensor(root.value.shape(), 1.0);
    trace_.clear();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.grad || !n.backward) continue;
      trace_.push_back(i);
      n.backward(*this, i);
    }
    std::map<std::string, Tensor> out;
    for (std::size_t id : params_) out[nodes_[id].name] = grad(id);
    return out;
  }

  /// Node ids visited by the last backward(), in visit order.
  const std::vector<std::size_t>& backward_trace() const { return trace_; }

  Var push(std::string_view op, Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    check_finite(value, op);
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    if (record_) {
      for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
      if (n.requires_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

 private:
  static void check_finite(const Tensor& t, std::string_view what) {
    if (!t.all_finite()) throw NumericalError("non-finite values produced by " + std::string(what));
  }

  struct Node {
    std::string op;
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string name;
    bool pinned = false;
    bool released = false;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
  std::vector<std::size_t> trace_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ConfigError("operands live on different tapes");
  return *a.tape;
}

inline std::size_t norm_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ShapeError("axis out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// Splits a shape around `axis` into (outer, n, inner).
inline std::array<std::size_t, 3> split_at(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

/// For each element of a tensor of shape `to`, the offset of its source in a
/// tensor of shape `from` broadcast (numpy rules) to `to`.
inline std::vector<std::size_t> broadcast_offsets(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
  const std::size_t lead = to.size() - from.size();
  std::vector<std::size_t> src_stride(to.size(), 0);
  auto fs = strides_of(from);
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] == to[lead + i])
      src_stride[lead + i] = fs[i];
    else if (from[i] == 1)
      src_stride[lead + i] = 0;
    else
      throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
  }
  std::vector<std::size_t> offs(numel(to));
  std::vector<std::size_t> idx(to.size(), 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < offs.size(); ++k) {
    offs[k] = off;
    for (std::size_t d = to.size(); d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < to[d]) break;
      off -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offs;
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var broadcast_to(Var a, const Shape& target) {
  if (a.shape() == target) return a;
  auto offs = detail::broadcast_offsets(a.shape(), target);
  const Tensor& av = a.value();
  Tensor out(target);
  for (std::size_t k = 0; k < offs.size(); ++k) out[k] = av[offs[k]];
  const std::size_t pa = a.id;
  return a.tape->push("broadcast", std::move(out), {pa},
                      [pa, offs = std::move(offs)](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        for (std::size_t k = 0; k < offs.size(); ++k) (*ga)[offs[k]] += g[k];
                      });
}

inline Var reshape(Var a, Shape s) {
  if (numel(s) != a.value().size())
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(s));
  const std::size_t pa = a.id;
  return a.tape->push("reshape", a.value().reshaped(std::move(s)), {pa}, [pa](Tape& t, std::size_t self) {
    const Tensor& g = *t.out_grad(self);
    t.accumulate(pa, g.reshaped(t.value(pa).shape()));
  });
}

/// Axis permutation: out.shape[i] = in.shape[perm[i]].
inline Var transpose(Var a, const std::vector<std::size_t>& perm) {
  const Shape s = a.shape();
  if (perm.size() != s.size()) throw ShapeError("transpose: permutation rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape os(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || seen[perm[i]]) throw ShapeError("transpose: invalid permutation");
    seen[perm[i]] = true;
    os[i] = s[perm[i]];
  }
  auto in_st = strides_of(s);
  std::vector<std::size_t> st(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) st[i] = in_st[perm[i]];
  std::vector<std::size_t> offs(numel(os));
  {
    std::vector<std::size_t> idx(os.size(), 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < offs.size(); ++k) {
      offs[k] = off;
      for (std::size_t d = os.size(); d-- > 0;) {
        ++idx[d];
        off += st[d];
        if (idx[d] < os[d]) break;
        off -= st[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const Tensor& av = a.value();
  Tensor out(os);
  for (std::size_t k = 0; k < offs.size(); ++k) out[k] = av[offs[k]];
  const std::size_t pa = a.id;
  return a.tape->push("transpose", std::move(out), {pa},
                      [pa, offs = std::move(offs)](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        for (std::size_t k = 0; k < offs.size(); ++k) (*ga)[offs[k]] += g[k];
                      });
}

/// Contiguous slice [start, start+len) along `axis`.
inline Var slice(Var a, long axis_in, std::size_t start, std::size_t len) {
  const Shape s = a.shape();
  const std::size_t axis = detail::norm_axis(axis_in, s.size());
  if (start + len > s[axis]) throw ShapeError("slice out of range");
  auto [outer, n, inner] = detail::split_at(s, axis);
  Shape os = s;
  os[axis] = len;
  Tensor out(os);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data().begin() + (o * n + start) * inner, len * inner,
                out.data().begin() + o * len * inner);
  const std::size_t pa = a.id;
  return a.tape->push("split", std::move(out), {pa},
                      [pa, outer, n, inner, start, len](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t k = 0; k < len * inner; ++k)
                            (*ga)[(o * n + start) * inner + k] += g[o * len * inner + k];
                      });
}

inline std::vector<Var> split(Var a, long axis, const std::vector<std::size_t>& sizes) {
  const std::size_t ax = detail::norm_axis(axis, a.shape().size());
  std::size_t total = 0;
  for (auto z : sizes) total += z;
  if (total != a.shape()[ax]) throw ShapeError("split sizes do not cover the axis");
  std::vector<Var> out;
  std::size_t start = 0;
  for (auto z : sizes) {
    out.push_back(slice(a, static_cast<long>(ax), start, z));
    start += z;
  }
  return out;
}

inline Var concat(const std::vector<Var>& parts, long axis_in) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape& tape = *parts[0].tape;
  const Shape s0 = parts[0].shape();
  const std::size_t axis = detail::norm_axis(axis_in, s0.size());
  Shape os = s0;
  os[axis] = 0;
  for (const Var& p : parts) {
    if (p.tape != &tape) throw ConfigError("concat across tapes");
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat extent mismatch " + shape_str(s) + " vs " + shape_str(s0));
    os[axis] += s[axis];
  }
  auto [outer, total, inner] = detail::split_at(os, axis);
  Tensor out(os);
  std::vector<std::size_t> ids, lens;
  std::size_t start = 0;
  for (const Var& p : parts) {
    const std::size_t len = p.shape()[axis];
    const Tensor& pv = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data().begin() + o * len * inner, len * inner,
                  out.data().begin() + (o * total + start) * inner);
    ids.push_back(p.id);
    lens.push_back(len);
    start += len;
  }
  return tape.push("concat", std::move(out), ids,
                   [ids, lens, outer = outer, total = total, inner = inner](Tape& t, std::size_t self) {
                     const Tensor& g = *t.out_grad(self);
                     std::size_t start = 0;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       Tensor* gp = t.grad_buffer(ids[k]);
                       const std::size_t len = lens[k];
                       if (gp)
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < len * inner; ++j)
                             (*gp)[o * len * inner + j] += g[(o * total + start) * inner + j];
                       start += len;
                     }
                   });
}

/// Selects entries `indices` along `axis` (repeats allowed).
inline Var gather(Var a, long axis_in, const std::vector<std::size_t>& indices) {
  const Shape s = a.shape();
  const std::size_t axis = detail::norm_axis(axis_in, s.size());
  auto [outer, n, inner] = detail::split_at(s, axis);
  for (auto i : indices)
    if (i >= n) throw ShapeError("gather index out of range");
  Shape os = s;
  os[axis] = indices.size();
  const std::size_t m = indices.size();
  Tensor out(os);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(av.data().begin() + (o * n + indices[k]) * inner, inner,
                  out.data().begin() + (o * m + k) * inner);
  const std::size_t pa = a.id;
  return a.tape->push("gather", std::move(out), {pa},
                      [pa, indices, outer = outer, n = n, inner = inner](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        const std::size_t m = indices.size();
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t k = 0; k < m; ++k)
                            for (std::size_t j = 0; j < inner; ++j)
                              (*ga)[(o * n + indices[k]) * inner + j] += g[(o * m + k) * inner + j];
                      });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

inline Var add_same(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t pa = a.id, pb = b.id;
  return tape.push("add", std::move(out), {pa, pb}, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = *t.out_grad(self);
    t.accumulate(pa, g);
    t.accumulate(pb, g);
  });
}

inline Var mul_same(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t pa = a.id, pb = b.id;
  return tape.push("mul", std::move(out), {pa, pb}, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = *t.out_grad(self);
    if (Tensor* ga = t.grad_buffer(pa)) {
      const Tensor& bv = t.value(pb);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_buffer(pb)) {
      const Tensor& av = t.value(pa);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

}  // namespace detail

/// Elementwise sum with numpy broadcasting (broadcasts are materialized).
inline Var add(Var a, Var b) {
  if (a.shape() == b.shape()) return detail::add_same(a, b);
  Shape s = broadcast_shape(a.shape(), b.shape());
  return detail::add_same(broadcast_to(a, s), broadcast_to(b, s));
}

inline Var mul(Var a, Var b) {
  if (a.shape() == b.shape()) return detail::mul_same(a, b);
  Shape s = broadcast_shape(a.shape(), b.shape());
  return detail::mul_same(broadcast_to(a, s), broadcast_to(b, s));
}

inline Var scale(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  const std::size_t pa = a.id;
  return a.tape->push("scale", std::move(out), {pa}, [pa, c](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = *t.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  });
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

inline Var silu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
  const std::size_t pa = a.id;
  return a.tape->push("silu", std::move(out), {pa}, [pa](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = *t.out_grad(self);
    const Tensor& x = t.value(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      (*ga)[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum over one axis (dropped), or over everything when axis is nullopt.
inline Var sum(Var a, std::optional<long> axis = std::nullopt) {
  const Tensor& av = a.value();
  const std::size_t pa = a.id;
  if (!axis) {
    double s = 0.0;
    for (double v : av.data()) s += v;
    return a.tape->push("sum", Tensor::scalar(s), {pa}, [pa](Tape& t, std::size_t self) {
      Tensor* ga = t.grad_buffer(pa);
      if (!ga) return;
      const double g = (*t.out_grad(self))[0];
      for (double& v : ga->data()) v += g;
    });
  }
  const std::size_t ax = detail::norm_axis(*axis, av.rank());
  auto [outer, n, inner] = detail::split_at(av.shape(), ax);
  Shape os = av.shape();
  os.erase(os.begin() + static_cast<long>(ax));
  Tensor out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += av[(o * n + k) * inner + j];
  return a.tape->push("sum", std::move(out), {pa},
                      [pa, outer = outer, n = n, inner = inner](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t k = 0; k < n; ++k)
                            for (std::size_t j = 0; j < inner; ++j)
                              (*ga)[(o * n + k) * inner + j] += g[o * inner + j];
                      });
}

inline Var mean(Var a, std::optional<long> axis = std::nullopt) {
  const double count = axis ? static_cast<double>(a.shape()[detail::norm_axis(*axis, a.shape().size())])
                            : static_cast<double>(a.value().size());
  return scale(sum(a, axis), 1.0 / count);
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a: [..., m, k] times b: [..., k, n] (same batch dims) or b: [k, n].
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) throw ShapeError("matmul inner mismatch " + shape_str(as) + " x " + shape_str(bs));
  const bool shared_b = bs.size() == 2;
  if (!shared_b && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2))
    throw ShapeError("matmul batch mismatch " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t batch = numel(Shape(as.begin(), as.end() - 2));
  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor out(os);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  double* C = out.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* Ab = A + bi * m * k;
    const double* Bb = shared_b ? B : B + bi * k * n;
    double* Cb = C + bi * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = Ab[i * k + p];
        const double* brow = Bb + p * n;
        double* crow = Cb + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape.push("matmul", std::move(out), {pa, pb},
                   [pa, pb, batch, m, k, n, shared_b](Tape& t, std::size_t self) {
                     const double* G = t.out_grad(self)->data().data();
                     const double* A = t.value(pa).data().data();
                     const double* B = t.value(pb).data().data();
                     if (Tensor* ga = t.grad_buffer(pa)) {
                       double* GA = ga->data().data();
                       for (std::size_t bi = 0; bi < batch; ++bi) {
                         const double* Bb = shared_b ? B : B + bi * k * n;
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double* grow = G + bi * m * n + i * n;
                             const double* brow = Bb + p * n;
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                             GA[bi * m * k + i * k + p] += s;
                           }
                       }
                     }
                     if (Tensor* gb = t.grad_buffer(pb)) {
                       double* GB = gb->data().data();
                       for (std::size_t bi = 0; bi < batch; ++bi) {
                         double* GBb = shared_b ? GB : GB + bi * k * n;
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double aip = A[bi * m * k + i * k + p];
                             const double* grow = G + bi * m * n + i * n;
                             double* gbrow = GBb + p * n;
                             for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                           }
                       }
                     }
                   });
}

/// x: [N, C, H, W], w: [O, C, KH, KW]. No bias; add one with broadcasting.
inline Var conv2d(Var x, Var w, std::size_t stride = 1, std::size_t pad = 0) {
  Tape& tape = detail::same_tape(x, w);
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d expects rank-4 input and filters");
  if (xs[1] != ws[1])
    throw ShapeError("conv2d channel mismatch " + shape_str(xs) + " vs filters " + shape_str(ws));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[0], KH = ws[2], KW = ws[3];
  if (H + 2 * pad < KH || W + 2 * pad < KW) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - KH) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - KW) / stride + 1;
  const std::size_t R = C * KH * KW, P = Ho * Wo;

  // im2col for one sample: cols[r, p]
  auto im2col = [=](const double* xin, std::vector<double>& cols) {
    cols.assign(R * P, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < KH; ++ky)
        for (std::size_t kx = 0; kx < KW; ++kx) {
          double* crow = cols.data() + ((c * KH + ky) * KW + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              crow[oy * Wo + ox] = xin[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
            }
          }
        }
  };

  Tensor out(Shape{N, O, Ho, Wo});
  const double* X = x.value().data().data();
  const double* Wt = w.value().data().data();
  std::vector<double> cols;
  for (std::size_t nb = 0; nb < N; ++nb) {
    im2col(X + nb * C * H * W, cols);
    double* Y = out.data().data() + nb * O * P;
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t r = 0; r < R; ++r) {
        const double wv = Wt[o * R + r];
        const double* crow = cols.data() + r * P;
        double* yrow = Y + o * P;
        for (std::size_t p = 0; p < P; ++p) yrow[p] += wv * crow[p];
      }
  }
  const std::size_t px = x.id, pw = w.id;
  return tape.push("conv2d", std::move(out), {px, pw},
                   [=](Tape& t, std::size_t self) {
                     const double* G = t.out_grad(self)->data().data();
                     const double* X = t.value(px).data().data();
                     const double* Wt = t.value(pw).data().data();
                     Tensor* gx = t.grad_buffer(px);
                     Tensor* gw = t.grad_buffer(pw);
                     std::vector<double> cols, gcols;
                     for (std::size_t nb = 0; nb < N; ++nb) {
                       const double* Gn = G + nb * O * P;
                       if (gw) {
                         im2col(X + nb * C * H * W, cols);
                         double* GW = gw->data().data();
                         for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t r = 0; r < R; ++r) {
                             const double* crow = cols.data() + r * P;
                             const double* grow = Gn + o * P;
                             double s = 0.0;
                             for (std::size_t p = 0; p < P; ++p) s += grow[p] * crow[p];
                             GW[o * R + r] += s;
                           }
                       }
                       if (gx) {
                         gcols.assign(R * P, 0.0);
                         for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t r = 0; r < R; ++r) {
                             const double wv = Wt[o * R + r];
                             const double* grow = Gn + o * P;
                             double* gc = gcols.data() + r * P;
                             for (std::size_t p = 0; p < P; ++p) gc[p] += wv * grow[p];
                           }
                         double* GX = gx->data().data() + nb * C * H * W;
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t ky = 0; ky < KH; ++ky)
                             for (std::size_t kx = 0; kx < KW; ++kx) {
                               const double* gc = gcols.data() + ((c * KH + ky) * KW + kx) * P;
                               for (std::size_t oy = 0; oy < Ho; ++oy) {
                                 const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                 if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                 for (std::size_t ox = 0; ox < Wo; ++ox) {
                                   const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                   if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                   GX[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] +=
                                       gc[oy * Wo + ox];
                                 }
                               }
                             }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Normalization

inline Var softmax(Var a, long axis_in = -1) {
  const Tensor& av = a.value();
  const std::size_t axis = detail::norm_axis(axis_in, av.rank());
  auto [outer, n, inner] = detail::split_at(av.shape(), axis);
  Tensor out(av.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = av[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, av[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(av[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  const std::size_t pa = a.id;
  return a.tape->push("softmax", std::move(out), {pa},
                      [pa, outer = outer, n = n, inner = inner](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        const Tensor& y = t.value(self);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t j = 0; j < inner; ++j) {
                            const std::size_t base = o * n * inner + j;
                            double dot = 0.0;
                            for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                            for (std::size_t k = 0; k < n; ++k)
                              (*ga)[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
                          }
                      });
}

namespace detail {

/// Standardizes each contiguous run of `len` elements. Shared by layer and
/// group normalization.
inline Var normalize_runs(Var a, std::size_t len, double eps, std::string_view name) {
  const Tensor& av = a.value();
  const std::size_t runs = av.size() / len;
  Tensor out(av.shape());
  std::vector<double> inv_std(runs);
  for (std::size_t r = 0; r < runs; ++r) {
    const double* x = av.data().data() + r * len;
    double mu = 0.0;
    for (std::size_t i = 0; i < len; ++i) mu += x[i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = (x[i] - mu) * is;
  }
  const std::size_t pa = a.id;
  return a.tape->push(name, std::move(out), {pa},
                      [pa, runs, len, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                        Tensor* ga = t.grad_buffer(pa);
                        if (!ga) return;
                        const Tensor& g = *t.out_grad(self);
                        const Tensor& y = t.value(self);
                        const double inv_n = 1.0 / static_cast<double>(len);
                        for (std::size_t r = 0; r < runs; ++r) {
                          double gm = 0.0, gy = 0.0;
                          for (std::size_t i = 0; i < len; ++i) {
                            gm += g[r * len + i];
                            gy += g[r * len + i] * y[r * len + i];
                          }
                          gm *= inv_n;
                          gy *= inv_n;
                          for (std::size_t i = 0; i < len; ++i)
                            (*ga)[r * len + i] += inv_std[r] * (g[r * len + i] - gm - y[r * len + i] * gy);
                        }
                      });
}

}  // namespace detail

/// Normalizes over the last axis (no affine; compose with mul/add for one).
inline Var layernorm(Var a, double eps = 1e-5) {
  if (a.shape().empty()) throw ShapeError("layernorm of a scalar");
  return detail::normalize_runs(a, a.shape().back(), eps, "layernorm");
}

/// a: [N, C, ...]; normalizes over each group of C/groups channels.
inline Var groupnorm(Var a, std::size_t groups, double eps = 1e-5) {
  const Shape s = a.shape();
  if (s.size() < 2 || groups == 0 || s[1] % groups != 0)
    throw ShapeError("groupnorm: channels " + shape_str(s) + " not divisible into " + std::to_string(groups));
  const std::size_t per = numel(s) / (s[0] * groups);
  return detail::normalize_runs(a, per, eps, "groupnorm");
}

// ---------------------------------------------------------------------------
// Composites built only from the primitives above

/// 2x2 average pooling of [N, C, H, W].
inline Var avgpool2(Var x) {
  const Shape s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avgpool2 needs even spatial extents");
  Var r = reshape(x, {s[0], s[1], s[2] / 2, 2, s[3] / 2, 2});
  r = transpose(r, {0, 1, 2, 4, 3, 5});
  r = reshape(r, {s[0], s[1], s[2] / 2, s[3] / 2, 4});
  return mean(r, -1);
}

/// Nearest-neighbour 2x upsampling of [N, C, H, W].
inline Var upsample2(Var x) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample2 expects rank 4");
  Var r = reshape(x, {s[0], s[1], s[2], 1, s[3], 1});
  r = broadcast_to(r, {s[0], s[1], s[2], 2, s[3], 2});
  return reshape(r, {s[0], s[1], s[2] * 2, s[3] * 2});
}

/// softmax(q k^T * s) v with q: [B, n, d], k: [B, m, d], v: [B, m, e].
/// Scores are recomputed in the backward pass instead of being stored.
inline Var attention(Var q, Var k, Var v, double s) {
  Tape& tape = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Shape qs = q.shape(), ks = k.shape(), vs = v.shape();
  if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3 || qs[0] != ks[0] || qs[0] != vs[0] || qs[2] != ks[2] ||
      ks[1] != vs[1])
    throw ShapeError("attention operands " + shape_str(qs) + " " + shape_str(ks) + " " + shape_str(vs));
  const std::size_t B = qs[0], n = qs[1], d = qs[2], m = ks[1], e = vs[2];
  // row-wise softmax of scores for batch b into P [n, m]
  auto probs = [=](const double* Q, const double* K, std::vector<double>& P) {
    P.assign(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = P.data() + i * m;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += Q[i * d + c] * K[j * d + c];
        row[j] = acc * s;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < m; ++j) row[j] /= z;
    }
  };
  Tensor out({B, n, e});
  {
    const double* Q = q.value().data().data();
    const double* K = k.value().data().data();
    const double* Vv = v.value().data().data();
    std::vector<double> P;
    for (std::size_t b = 0; b < B; ++b) {
      probs(Q + b * n * d, K + b * m * d, P);
      double* O = out.data().data() + b * n * e;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double pij = P[i * m + j];
          const double* vrow = Vv + (b * m + j) * e;
          for (std::size_t c = 0; c < e; ++c) O[i * e + c] += pij * vrow[c];
        }
    }
  }
  const std::size_t pq = q.id, pk = k.id, pv = v.id;
  return tape.push("attention", std::move(out), {pq, pk, pv}, [=](Tape& t, std::size_t self) {
    const double* G = t.out_grad(self)->data().data();
    const double* Q = t.value(pq).data().data();
    const double* K = t.value(pk).data().data();
    const double* Vv = t.value(pv).data().data();
    Tensor* gq = t.grad_buffer(pq);
    Tensor* gk = t.grad_buffer(pk);
    Tensor* gv = t.grad_buffer(pv);
    std::vector<double> P, dS(n * m);
    for (std::size_t b = 0; b < B; ++b) {
      probs(Q + b * n * d, K + b * m * d, P);
      const double* Gb = G + b * n * e;
      if (gv) {
        double* GV = gv->data().data() + b * m * e;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double pij = P[i * m + j];
            for (std::size_t c = 0; c < e; ++c) GV[j * e + c] += pij * Gb[i * e + c];
          }
      }
      if (!gq && !gk) continue;
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          double dp = 0.0;
          const double* vrow = Vv + (b * m + j) * e;
          for (std::size_t c = 0; c < e; ++c) dp += Gb[i * e + c] * vrow[c];
          dS[i * m + j] = dp;
          dot += dp * P[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) dS[i * m + j] = P[i * m + j] * (dS[i * m + j] - dot) * s;
      }
      if (gq) {
        double* GQ = gq->data().data() + b * n * d;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double ds = dS[i * m + j];
            const double* krow = K + (b * m + j) * d;
            for (std::size_t c = 0; c < d; ++c) GQ[i * d + c] += ds * krow[c];
          }
      }
      if (gk) {
        double* GK = gk->data().data() + b * m * d;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double ds = dS[i * m + j];
            const double* qrow = Q + (b * n + i) * d;
            for (std::size_t c = 0; c < d; ++c) GK[j * d + c] += ds * qrow[c];
          }
      }
    }
  });
}

inline Var mse(Var pred, Var target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  Var d = sub(pred, target);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Name-dispatched entry point

struct OpAttrs {
  long axis = -1;
  std::optional<long> reduce_axis;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
  double eps = 1e-5;
  double factor = 1.0;
  Shape shape;
  std::vector<std::size_t> perm;
  std::vector<std::size_t> indices;
  std::vector<std::size_t> sizes;
};

/// Applies a primitive by name. `split` returns its first part; use split()
/// directly for all of them.
inline Var forward_op(std::string_view op, std::span<const Var> in, const OpAttrs& at = {}) {
  auto need = [&](std::size_t k) {
    if (in.size() != k)
      throw ShapeError(std::string(op) + " expects " + std::to_string(k) + " inputs, got " +
                       std::to_string(in.size()));
  };
  if (op == "add") return need(2), add(in[0], in[1]);
  if (op == "mul") return need(2), mul(in[0], in[1]);
  if (op == "matmul") return need(2), matmul(in[0], in[1]);
  if (op == "conv2d") return need(2), conv2d(in[0], in[1], at.stride, at.pad);
  if (op == "transpose") return need(1), transpose(in[0], at.perm);
  if (op == "reshape") return need(1), reshape(in[0], at.shape);
  if (op == "concat") return concat(std::vector<Var>(in.begin(), in.end()), at.axis);
  if (op == "split") return need(1), split(in[0], at.axis, at.sizes).front();
  if (op == "softmax") return need(1), softmax(in[0], at.axis);
  if (op == "layernorm") return need(1), layernorm(in[0], at.eps);
  if (op == "groupnorm") return need(1), groupnorm(in[0], at.groups, at.eps);
  if (op == "silu") return need(1), silu(in[0]);
  if (op == "mean") return need(1), mean(in[0], at.reduce_axis);
  if (op == "sum") return need(1), sum(in[0], at.reduce_axis);
  if (op == "broadcast") return need(1), broadcast_to(in[0], at.shape);
  if (op == "scale") return need(1), scale(in[0], at.factor);
  if (op == "gather") return need(1), gather(in[0], at.axis, at.indices);
  if (op == "attention") return need(3), attention(in[0], in[1], in[2], at.factor);
  throw ConfigError("unsupported op '" + std::string(op) + "'");
}

}  // namespace c4d
