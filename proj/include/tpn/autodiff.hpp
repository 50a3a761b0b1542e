#pragma once

// Define-by-run reverse-mode differentiation over BasicTensor.
//
// A BasicTape records every op applied to its variables. `backward` walks the
// recorded nodes once, newest first, and returns gradients for every leaf
// that was marked as requiring them. The tape is rebuilt for each step.

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tpn/error.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

template <std::floating_point T>
class BasicTape;

template <std::floating_point T>
class BasicVar {
 public:
  BasicVar() = default;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  BasicTape<T>& tape() const {
    assert(tape_ != nullptr);
    return *tape_;
  }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class BasicTape<T>;
  BasicVar(BasicTape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  BasicTape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient of a scalar loss with respect to the leaves of a tape.
template <std::floating_point T>
class BasicGradients {
 public:
  /// Gradient of a named leaf (parameter), or nullptr when the name is unknown.
  const BasicTensor<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &it->second;
  }

  const BasicTensor<T>& at(const std::string& name) const {
    if (auto* g = find(name)) return *g;
    throw ShapeError("gradients: no gradient recorded for '" + name + "'");
  }

  const BasicTensor<T>& of(const BasicVar<T>& leaf) const {
    auto it = by_node_.find(leaf.id());
    if (it == by_node_.end()) throw ShapeError("gradients: variable is not a grad-requiring leaf");
    return it->second;
  }

  const std::map<std::string, BasicTensor<T>>& named() const noexcept { return by_name_; }

 private:
  friend class BasicTape<T>;
  std::map<std::string, BasicTensor<T>> by_name_;
  std::unordered_map<std::size_t, BasicTensor<T>> by_node_;
};

template <std::floating_point T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using Var = BasicVar<T>;
  /// Accumulates into `input_grads[i]` (nullptr when input i needs no gradient).
  using BackwardFn = std::function<void(const TensorT& out_grad, const TensorT& out_value,
                                        std::span<const TensorT* const> inputs,
                                        std::span<TensorT* const> input_grads)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// Leaf that gradients are tracked for. Named leaves are reported by name.
  Var variable(TensorT value, std::string name = {}) {
    nodes_.push_back(Node{std::move(value), {}, {}, true, true, std::move(name)});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(TensorT value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an op node. The backward closure is dropped when no input
  /// requires a gradient.
  Var record(TensorT value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs, false, {}});
    return Var(this, nodes_.size() - 1);
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse sweep from a scalar loss. Consumes the tape.
  BasicGradients<T> backward(const Var& loss) {
    if (&loss.tape() != this) throw ShapeError("backward: loss belongs to another tape");
    const TensorT& loss_value = nodes_[loss.id()].value;
    if (loss_value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_string(loss_value.shape()));
    }

    std::vector<std::optional<TensorT>> grads(loss.id() + 1);
    grads[loss.id()] = TensorT(loss_value.shape(), T{1});

    std::vector<const TensorT*> in_values;
    std::vector<TensorT*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!grads[i] || !node.requires_grad || node.is_leaf || !node.backward) continue;
      in_values.clear();
      in_grads.clear();
      for (std::size_t in : node.inputs) {
        in_values.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!grads[in]) grads[in] = TensorT(nodes_[in].value.shape(), T{0});
          in_grads.push_back(&*grads[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      node.backward(*grads[i], node.value, in_values, in_grads);
    }

    BasicGradients<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& node = nodes_[i];
      if (!node.is_leaf || !node.requires_grad) continue;
      TensorT g = (i < grads.size() && grads[i]) ? std::move(*grads[i]) : TensorT(node.value.shape(), T{0});
      if (!node.name.empty()) {
        auto [it, inserted] = out.by_name_.try_emplace(node.name, g);
        if (!inserted) {
          for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
        }
      }
      out.by_node_.emplace(i, std::move(g));
    }
    nodes_.clear();
    return out;
  }

 private:
  struct Node {
    TensorT value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
  };

  std::vector<Node> nodes_;
};

template <std::floating_point T>
const BasicTensor<T>& BasicVar<T>::value() const {
  return tape().value(id_);
}

template <std::floating_point T>
bool BasicVar<T>::requires_grad() const {
  return tape().requires_grad(id_);
}

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using Gradients = BasicGradients<double>;

namespace detail {

template <std::floating_point T>
void require_same_tape(const char* op, const BasicVar<T>& a, const BasicVar<T>& b) {
  if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": operands live on different tapes");
}

template <std::floating_point T>
void require_same_shape(const char* op, const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same_tape(op, a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <std::floating_point T>
void require_rank(const char* op, const BasicVar<T>& a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

// Per-thread scratch that only ever grows.
template <class U, int Slot>
U* scratch(std::size_t n) {
  thread_local std::vector<U> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// C[n x p] += A[n x k] * B[k x p], blocked so one panel of B stays in
// cache while every row of A passes over it. Zeros in A are skipped; the
// remaining rows of a panel are applied four at a time.
template <std::floating_point T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t p) {
  const std::size_t jb = std::min<std::size_t>(p, 256);
  const std::size_t kb = std::max<std::size_t>(4, 32768 / (sizeof(T) * std::max<std::size_t>(jb, 1)) / 4 * 4);
  std::size_t* nz = scratch<std::size_t, 0>(std::min(k, kb));
  for (std::size_t j0 = 0; j0 < p; j0 += jb) {
    const std::size_t j1 = std::min(p, j0 + jb);
    for (std::size_t l0 = 0; l0 < k; l0 += kb) {
      const std::size_t l1 = std::min(k, l0 + kb);
      for (std::size_t i = 0; i < n; ++i) {
        T* ci = c + i * p;
        const T* ai = a + i * k;
        std::size_t count = 0;
        for (std::size_t l = l0; l < l1; ++l)
          if (ai[l] != T{0}) nz[count++] = l;
        std::size_t q = 0;
        for (; q + 4 <= count; q += 4) {
          const T a0 = ai[nz[q]], a1 = ai[nz[q + 1]], a2 = ai[nz[q + 2]], a3 = ai[nz[q + 3]];
          const T *b0 = b + nz[q] * p, *b1 = b + nz[q + 1] * p, *b2 = b + nz[q + 2] * p, *b3 = b + nz[q + 3] * p;
          for (std::size_t j = j0; j < j1; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; q < count; ++q) {
          const T av = ai[nz[q]];
          const T* bl = b + nz[q] * p;
          for (std::size_t j = j0; j < j1; ++j) ci[j] += av * bl[j];
        }
      }
    }
  }
}

// C[n x k] += G[n x p] * B[k x p]^T
template <std::floating_point T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t n, std::size_t p, std::size_t k) {
  T* bt = scratch<T, 1>(p * k);
  for (std::size_t l = 0; l < k; ++l)
    for (std::size_t j = 0; j < p; ++j) bt[j * k + l] = b[l * p + j];
  gemm_nn(g, bt, c, n, p, k);
}

// C[k x p] += A[n x k]^T * G[n x p]. Rows of G that are all zero are dropped
// first, so they leave C bitwise untouched.
template <std::floating_point T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t n, std::size_t k, std::size_t p) {
  std::size_t* rows = scratch<std::size_t, 2>(n);
  std::size_t r = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (std::any_of(g + i * p, g + (i + 1) * p, [](T v) { return v != T{0}; })) rows[r++] = i;
  if (r == 0) return;
  T* at = scratch<T, 3>(k * r);
  T* gr = scratch<T, 4>(r * p);
  for (std::size_t q = 0; q < r; ++q) {
    const T* ai = a + rows[q] * k;
    for (std::size_t l = 0; l < k; ++l) at[l * r + q] = ai[l];
    std::copy(g + rows[q] * p, g + (rows[q] + 1) * p, gr + q * p);
  }
  gemm_nn(at, gr, c, k, r, p);
}

template <std::floating_point T, class Fwd, class Deriv>
BasicVar<T> unary_elementwise(const BasicVar<T>& a, Fwd fwd, Deriv deriv) {
  const BasicTensor<T>& x = a.value();
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return a.tape().record(std::move(out), {a.id()},
                         [deriv](const BasicTensor<T>& g, const BasicTensor<T>& y,
                                 std::span<const BasicTensor<T>* const> in,
                                 std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           const BasicTensor<T>& xv = *in[0];
                           for (std::size_t i = 0; i < g.size(); ++i) (*dg[0])[i] += g[i] * deriv(xv[i], y[i]);
                         });
}

}  // namespace detail

/// Matrix product [n x k] * [k x p].
template <std::floating_point T>
BasicVar<T> matmul(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_tape("matmul", a, b);
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  BasicTensor<T> out(Shape{n, p});
  detail::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), n, k, p);
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [n, k, p](const BasicTensor<T>& g, const BasicTensor<T>&,
                                   std::span<const BasicTensor<T>* const> in,
                                   std::span<BasicTensor<T>* const> dg) {
                           if (dg[0]) detail::gemm_nt(g.data().data(), in[1]->data().data(), dg[0]->data().data(), n, p, k);
                           if (dg[1]) detail::gemm_tn(in[0]->data().data(), g.data().data(), dg[1]->data().data(), n, k, p);
                         });
}

template <std::floating_point T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape("add", a, b);
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                            std::span<BasicTensor<T>* const> dg) {
                           for (auto* d : dg) {
                             if (!d) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                           }
                         });
}

template <std::floating_point T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape("sub", a, b);
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                            std::span<BasicTensor<T>* const> dg) {
                           if (dg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*dg[0])[i] += g[i];
                           if (dg[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*dg[1])[i] -= g[i];
                         });
}

/// Elementwise product.
template <std::floating_point T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape("mul", a, b);
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const> in,
                            std::span<BasicTensor<T>* const> dg) {
                           if (dg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*dg[0])[i] += g[i] * (*in[1])[i];
                           if (dg[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*dg[1])[i] += g[i] * (*in[0])[i];
                         });
}

/// x[n x p] + bias[p], the only broadcasting op.
template <std::floating_point T>
BasicVar<T> add_bias(const BasicVar<T>& x, const BasicVar<T>& bias) {
  detail::require_same_tape("add_bias", x, bias);
  detail::require_rank("add_bias", x, 2);
  detail::require_rank("add_bias", bias, 1);
  const std::size_t n = x.shape()[0], p = x.shape()[1];
  if (bias.shape()[0] != p) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
  }
  BasicTensor<T> out = x.value();
  const auto& b = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] += b[j];
  return x.tape().record(std::move(out), {x.id(), bias.id()},
                         [n, p](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                                std::span<BasicTensor<T>* const> dg) {
                           if (dg[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*dg[0])[i] += g[i];
                           if (dg[1])
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < p; ++j) (*dg[1])[j] += g[i * p + j];
                         });
}

/// factor * a + offset
template <std::floating_point T>
BasicVar<T> affine(const BasicVar<T>& a, T factor, T offset) {
  return detail::unary_elementwise(
      a, [factor, offset](T x) { return factor * x + offset; }, [factor](T, T) { return factor; });
}

template <std::floating_point T>
BasicVar<T> scale(const BasicVar<T>& a, T factor) {
  return detail::unary_elementwise(a, [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

template <std::floating_point T>
BasicVar<T> negate(const BasicVar<T>& a) {
  return detail::unary_elementwise(a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

template <std::floating_point T>
BasicVar<T> relu(const BasicVar<T>& a) {
  return detail::unary_elementwise(
      a, [](T x) { return x > T{0} || std::isnan(x) ? x : T{0}; },
      [](T x, T) { return x > T{0} || std::isnan(x) ? T{1} : T{0}; });
}

template <std::floating_point T>
BasicVar<T> exp(const BasicVar<T>& a) {
  return detail::unary_elementwise(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <std::floating_point T>
BasicVar<T> log(const BasicVar<T>& a) {
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= T{0}) {
      throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(x[i])) + " at index " +
                        std::to_string(i));
    }
  }
  return detail::unary_elementwise(a, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <std::floating_point T>
BasicVar<T> square(const BasicVar<T>& a) {
  return detail::unary_elementwise(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

/// Clamp into [lo, hi]; the gradient is zero where the input was clipped.
template <std::floating_point T>
BasicVar<T> clamp(const BasicVar<T>& a, T lo, T hi) {
  return detail::unary_elementwise(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

template <std::floating_point T>
BasicVar<T> reduce_sum(const BasicVar<T>& a) {
  const auto& x = a.value();
  T total{0};
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i];
  return a.tape().record(BasicTensor<T>::scalar(total), {a.id()},
                         [](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                            std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < dg[0]->size(); ++i) (*dg[0])[i] += g[0];
                         });
}

template <std::floating_point T>
BasicVar<T> reduce_mean(const BasicVar<T>& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("reduce_mean: empty input " + shape_string(a.shape()));
  return scale(reduce_sum(a), T{1} / static_cast<T>(n));
}

/// Per-row sum: [n x p] -> [n].
template <std::floating_point T>
BasicVar<T> row_sum(const BasicVar<T>& a) {
  detail::require_rank("row_sum", a, 2);
  const std::size_t n = a.shape()[0], p = a.shape()[1];
  const auto& x = a.value();
  BasicTensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < p; ++j) s += x[i * p + j];
    out[i] = s;
  }
  return a.tape().record(std::move(out), {a.id()},
                         [n, p](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                                std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < p; ++j) (*dg[0])[i * p + j] += g[i];
                         });
}

/// Squared Euclidean distance. Two vectors give a scalar; matrices
/// A[n x m], B[k x m] give the pairwise table [n x k].
template <std::floating_point T>
BasicVar<T> squared_euclidean_distance(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_tape("squared_euclidean_distance", a, b);
  const bool vectors = a.shape().size() == 1 && b.shape().size() == 1;
  if (!vectors && (a.shape().size() != 2 || b.shape().size() != 2)) {
    throw ShapeError("squared_euclidean_distance: expected two vectors or two matrices, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t n = a.value().rows(), k = b.value().rows();
  const std::size_t m = a.value().cols();
  if (b.value().cols() != m) {
    throw ShapeError("squared_euclidean_distance: dimension mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  BasicTensor<T> out(vectors ? Shape{} : Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      T s{0};
      for (std::size_t d = 0; d < m; ++d) {
        const T diff = av[i * m + d] - bv[j * m + d];
        s += diff * diff;
      }
      out[i * k + j] = s;
    }
  }
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [n, k, m](const BasicTensor<T>& g, const BasicTensor<T>&,
                                   std::span<const BasicTensor<T>* const> in, std::span<BasicTensor<T>* const> dg) {
                           const T* x = in[0]->data().data();
                           const T* y = in[1]->data().data();
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < k; ++j) {
                               const T gij = T{2} * g[i * k + j];
                               if (gij == T{0}) continue;
                               for (std::size_t d = 0; d < m; ++d) {
                                 const T diff = x[i * m + d] - y[j * m + d];
                                 if (dg[0]) (*dg[0])[i * m + d] += gij * diff;
                                 if (dg[1]) (*dg[1])[j * m + d] -= gij * diff;
                               }
                             }
                           }
                         });
}

/// Softmax over the last axis (a vector is one row).
template <std::floating_point T>
BasicVar<T> softmax(const BasicVar<T>& a) {
  const auto& x = a.value();
  if (x.rank() != 1 && x.rank() != 2) throw ShapeError("softmax: expected rank 1 or 2, got " + shape_string(x.shape()));
  const std::size_t n = x.rows(), p = x.cols();
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = x.data().data() + i * p;
    T* yi = out.data().data() + i * p;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < p; ++j) mx = std::max(mx, xi[j]);
    T s{0};
    for (std::size_t j = 0; j < p; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    for (std::size_t j = 0; j < p; ++j) yi[j] /= s;
  }
  return a.tape().record(std::move(out), {a.id()},
                         [n, p](const BasicTensor<T>& g, const BasicTensor<T>& y, std::span<const BasicTensor<T>* const>,
                                std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot{0};
                             for (std::size_t j = 0; j < p; ++j) dot += g[i * p + j] * y[i * p + j];
                             for (std::size_t j = 0; j < p; ++j)
                               (*dg[0])[i * p + j] += y[i * p + j] * (g[i * p + j] - dot);
                           }
                         });
}

/// Divides every row by its sum.
template <std::floating_point T>
BasicVar<T> normalize_rows(const BasicVar<T>& a) {
  const auto& x = a.value();
  if (x.rank() != 1 && x.rank() != 2) throw ShapeError("normalize_rows: expected rank 1 or 2");
  const std::size_t n = x.rows(), p = x.cols();
  BasicTensor<T> out(x.shape());
  std::vector<T> sums(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < p; ++j) s += x[i * p + j];
    if (!(s > T{0})) throw DomainError("normalize_rows: non-positive row sum at row " + std::to_string(i));
    sums[i] = s;
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = x[i * p + j] / s;
  }
  return a.tape().record(std::move(out), {a.id()},
                         [n, p, sums = std::move(sums)](const BasicTensor<T>& g, const BasicTensor<T>& y,
                                                        std::span<const BasicTensor<T>* const>,
                                                        std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot{0};
                             for (std::size_t j = 0; j < p; ++j) dot += g[i * p + j] * y[i * p + j];
                             for (std::size_t j = 0; j < p; ++j)
                               (*dg[0])[i * p + j] += (g[i * p + j] - dot) / sums[i];
                           }
                         });
}

/// Rows of a matrix by index (repeats allowed): [n x p] -> [len x p].
template <std::floating_point T>
BasicVar<T> gather_rows(const BasicVar<T>& a, std::vector<std::size_t> indices) {
  detail::require_rank("gather_rows", a, 2);
  const std::size_t n = a.shape()[0], p = a.shape()[1];
  for (std::size_t idx : indices) {
    if (idx >= n) throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range for " + shape_string(a.shape()));
  }
  BasicTensor<T> out = take_rows(a.value(), indices);
  return a.tape().record(std::move(out), {a.id()},
                         [p, indices = std::move(indices)](const BasicTensor<T>& g, const BasicTensor<T>&,
                                                           std::span<const BasicTensor<T>* const>,
                                                           std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t r = 0; r < indices.size(); ++r)
                             for (std::size_t j = 0; j < p; ++j) (*dg[0])[indices[r] * p + j] += g[r * p + j];
                         });
}

/// Rows [begin, end).
template <std::floating_point T>
BasicVar<T> slice_rows(const BasicVar<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end) throw ShapeError("slice_rows: begin > end");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(a, std::move(idx));
}

/// out[i] = a[i, columns[i]]: one entry per row.
template <std::floating_point T>
BasicVar<T> pick(const BasicVar<T>& a, std::vector<std::size_t> columns) {
  detail::require_rank("pick", a, 2);
  const std::size_t n = a.shape()[0], p = a.shape()[1];
  if (columns.size() != n) {
    throw ShapeError("pick: " + std::to_string(columns.size()) + " indices for " + shape_string(a.shape()));
  }
  BasicTensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (columns[i] >= p) throw ShapeError("pick: column " + std::to_string(columns[i]) + " out of range");
    out[i] = a.value()[i * p + columns[i]];
  }
  return a.tape().record(std::move(out), {a.id()},
                         [p, columns = std::move(columns)](const BasicTensor<T>& g, const BasicTensor<T>&,
                                                           std::span<const BasicTensor<T>* const>,
                                                           std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < columns.size(); ++i) (*dg[0])[i * p + columns[i]] += g[i];
                         });
}

/// Vertical stack of two matrices with equal column counts.
template <std::floating_point T>
BasicVar<T> concat_rows(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_tape("concat_rows", a, b);
  detail::require_rank("concat_rows", a, 2);
  detail::require_rank("concat_rows", b, 2);
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t na = a.value().size();
  std::vector<T> data(a.value().storage());
  data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
  BasicTensor<T> out(Shape{a.shape()[0] + b.shape()[0], a.shape()[1]}, std::move(data));
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [na](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                              std::span<BasicTensor<T>* const> dg) {
                           if (dg[0])
                             for (std::size_t i = 0; i < na; ++i) (*dg[0])[i] += g[i];
                           if (dg[1])
                             for (std::size_t i = na; i < g.size(); ++i) (*dg[1])[i - na] += g[i];
                         });
}

template <std::floating_point T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a.id()},
                         [](const BasicTensor<T>& g, const BasicTensor<T>&, std::span<const BasicTensor<T>* const>,
                            std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*dg[0])[i] += g[i];
                         });
}

/// Geometry of a valid, stride-1 2D convolution over channel-major images
/// stored one per row.
struct Conv2dGeometry {
  std::size_t in_channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;

  std::size_t out_height() const { return height - kernel + 1; }
  std::size_t out_width() const { return width - kernel + 1; }
  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t in_features() const { return in_channels * height * width; }
  std::size_t out_features() const { return out_channels * out_height() * out_width(); }
};

namespace detail {

// col[(oy*ow+ox) x (c*k*k + ky*k + kx)] from one image.
template <std::floating_point T>
void im2col(const T* img, const Conv2dGeometry& g, T* col) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* dst = col + (oy * ow + ox) * patch;
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const T* src = img + c * g.height * g.width + (oy + ky) * g.width + ox;
          for (std::size_t kx = 0; kx < k; ++kx) *dst++ = src[kx];
        }
    }
}

template <std::floating_point T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* img) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* src = col + (oy * ow + ox) * patch;
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky) {
          T* dst = img + c * g.height * g.width + (oy + ky) * g.width + ox;
          for (std::size_t kx = 0; kx < k; ++kx) dst[kx] += *src++;
        }
    }
}

}  // namespace detail

/// x[n x (C*H*W)], weight[(C*k*k) x out_channels], bias[out_channels]
/// -> [n x (out_channels*oh*ow)].
template <std::floating_point T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& weight, const BasicVar<T>& bias, Conv2dGeometry geo) {
  detail::require_same_tape("conv2d", x, weight);
  detail::require_same_tape("conv2d", x, bias);
  detail::require_rank("conv2d", x, 2);
  if (geo.kernel == 0 || geo.kernel > geo.height || geo.kernel > geo.width) {
    throw ShapeError("conv2d: kernel does not fit the image");
  }
  if (x.shape()[1] != geo.in_features() || weight.shape() != Shape{geo.patch(), geo.out_channels} ||
      bias.shape() != Shape{geo.out_channels}) {
    throw ShapeError("conv2d: shapes " + shape_string(x.shape()) + ", " + shape_string(weight.shape()) + ", " +
                     shape_string(bias.shape()) + " do not match geometry");
  }
  const std::size_t n = x.shape()[0];
  const std::size_t spatial = geo.out_height() * geo.out_width();
  const std::size_t patch = geo.patch(), oc = geo.out_channels;
  BasicTensor<T> out(Shape{n, geo.out_features()});
  std::vector<T> col(spatial * patch), res(spatial * oc);
  const T* w = weight.value().data().data();
  const T* b = bias.value().data().data();
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(x.value().data().data() + s * geo.in_features(), geo, col.data());
    std::fill(res.begin(), res.end(), T{0});
    detail::gemm_nn(col.data(), w, res.data(), spatial, patch, oc);
    T* o = out.data().data() + s * geo.out_features();
    for (std::size_t c = 0; c < oc; ++c)
      for (std::size_t q = 0; q < spatial; ++q) o[c * spatial + q] = res[q * oc + c] + b[c];
  }
  return x.tape().record(
      std::move(out), {x.id(), weight.id(), bias.id()},
      [geo, n, spatial, patch, oc](const BasicTensor<T>& g, const BasicTensor<T>&,
                                   std::span<const BasicTensor<T>* const> in, std::span<BasicTensor<T>* const> dg) {
        std::vector<T> col(spatial * patch), gres(spatial * oc), gcol(spatial * patch);
        const T* w = in[1]->data().data();
        for (std::size_t s = 0; s < n; ++s) {
          const T* gs = g.data().data() + s * geo.out_features();
          for (std::size_t c = 0; c < oc; ++c)
            for (std::size_t q = 0; q < spatial; ++q) gres[q * oc + c] = gs[c * spatial + q];
          if (dg[2])
            for (std::size_t q = 0; q < spatial; ++q)
              for (std::size_t c = 0; c < oc; ++c) (*dg[2])[c] += gres[q * oc + c];
          if (dg[1]) {
            detail::im2col(in[0]->data().data() + s * geo.in_features(), geo, col.data());
            detail::gemm_tn(col.data(), gres.data(), dg[1]->data().data(), spatial, patch, oc);
          }
          if (dg[0]) {
            std::fill(gcol.begin(), gcol.end(), T{0});
            detail::gemm_nt(gres.data(), w, gcol.data(), spatial, oc, patch);
            detail::col2im_add(gcol.data(), geo, dg[0]->data().data() + s * geo.in_features());
          }
        }
      });
}

/// 2x2 / stride-2 max pooling over channel-major images stored one per row.
template <std::floating_point T>
BasicVar<T> maxpool2x2(const BasicVar<T>& x, std::size_t channels, std::size_t height, std::size_t width) {
  detail::require_rank("maxpool2x2", x, 2);
  if (x.shape()[1] != channels * height * width || height % 2 || width % 2) {
    throw ShapeError("maxpool2x2: " + shape_string(x.shape()) + " does not match " + std::to_string(channels) + "x" +
                     std::to_string(height) + "x" + std::to_string(width) + " with even extents");
  }
  const std::size_t n = x.shape()[0], oh = height / 2, ow = width / 2;
  const std::size_t in_f = channels * height * width, out_f = channels * oh * ow;
  BasicTensor<T> out(Shape{n, out_f});
  std::vector<std::size_t> argmax(n * out_f);
  const T* xv = x.value().data().data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = s * in_f + c * height * width + (2 * oy) * width + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = s * in_f + c * height * width + (2 * oy + dy) * width + 2 * ox + dx;
              if (xv[idx] > xv[best] || std::isnan(xv[idx])) best = idx;
            }
          const std::size_t o = s * out_f + c * oh * ow + oy * ow + ox;
          out[o] = xv[best];
          argmax[o] = best;
        }
  return x.tape().record(std::move(out), {x.id()},
                         [argmax = std::move(argmax)](const BasicTensor<T>& g, const BasicTensor<T>&,
                                                      std::span<const BasicTensor<T>* const>,
                                                      std::span<BasicTensor<T>* const> dg) {
                           if (!dg[0]) return;
                           for (std::size_t o = 0; o < argmax.size(); ++o) (*dg[0])[argmax[o]] += g[o];
                         });
}

template <std::floating_point T>
BasicVar<T> operator+(const BasicVar<T>& a, const BasicVar<T>& b) { return add(a, b); }
template <std::floating_point T>
BasicVar<T> operator-(const BasicVar<T>& a, const BasicVar<T>& b) { return sub(a, b); }
template <std::floating_point T>
BasicVar<T> operator-(const BasicVar<T>& a) { return negate(a); }
template <std::floating_point T>
BasicVar<T> operator*(const BasicVar<T>& a, T factor) { return scale(a, factor); }
template <std::floating_point T>
BasicVar<T> operator*(T factor, const BasicVar<T>& a) { return scale(a, factor); }

/// Largest coordinate-wise |analytic - central difference| / max(1, |analytic|)
/// for a scalar function built on a tape.
///
/// `f` is called as `f(tape, x_var)` and must return a scalar variable on
/// that tape. It is evaluated 2 * x.size() + 1 times.
template <std::floating_point T, class F>
T grad_check(F&& f, const BasicTensor<T>& x, T h) {
  BasicTensor<T> analytic;
  {
    BasicTape<T> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    if (!std::isfinite(static_cast<double>(y.value().item()))) throw DomainError("grad_check: f(x) is not finite");
    analytic = tape.backward(y).of(xv);
  }
  auto eval = [&](const BasicTensor<T>& at) {
    BasicTape<T> tape;
    auto xv = tape.constant(at);
    const T v = f(tape, xv).value().item();
    if (!std::isfinite(static_cast<double>(v))) throw DomainError("grad_check: f is not finite near x");
    return v;
  };
  T worst{0};
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T up = eval(probe);
    probe[i] = orig - h;
    const T down = eval(probe);
    probe[i] = orig;
    const T numeric = (up - down) / (T{2} * h);
    const T err = std::abs(analytic[i] - numeric) / std::max(T{1}, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tpn
