#pragma once

// Reverse-mode autodiff over dense row-major tensors.
//
// Design: define-by-run. Ops compute values eagerly and, when a Tape is
// active and an input is on the graph, push a node holding a backward
// closure. Tape::backward seeds the output gradient and runs the closures in
// reverse recording order; gradients accumulate into the shared TensorImpl
// buffers, so weight tying (the same parameter tensor used by many ops) works
// with no extra bookkeeping.
//
// checkpoint_segment trades compute for memory: the wrapped function runs
// without recording during the forward pass, and the backward closure replays
// it on a private sub-tape. The replay is asserted bit-identical to the saved
// output, which the deterministic kernels guarantee.

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "eqdistill/common.hpp"

namespace eqdistill {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
  out << ']';
  return out.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Toggle for the slow debug mode that scans every op output for NaN/Inf.
inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until backward first touches this tensor
  bool requires_grad = false;
};

template <typename S>
void ensure_grad(TensorImpl<S>& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), S(0));
}

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    impl_->shape = std::move(shape);
    impl_->value.assign(shape_numel(impl_->shape), S(0));
  }
  Tensor(Shape shape, std::vector<S> value)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    if (value.size() != shape_numel(shape))
      throw shape_error("tensor: " + std::to_string(value.size()) + " values for shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->value = std::move(value);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }
  // Leaf with requires_grad set: a trainable parameter.
  static Tensor param(Shape shape, std::vector<S> value) {
    Tensor t(std::move(shape), std::move(value));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->value.size(); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.size() < 2 ? impl_->shape.at(0) : impl_->shape.at(1); }

  const std::vector<S>& value() const { return impl_->value; }
  std::vector<S>& mutable_value() { return impl_->value; }
  S* data() { return impl_->value.data(); }
  const S* data() const { return impl_->value.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (impl_->grad.empty()) throw config_error("tensor has no gradient; run backward first");
    return impl_->grad;
  }
  std::vector<S>& mutable_grad() {
    ensure_grad(*impl_);
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) impl_->grad.clear();
  }

  S item() const {
    if (numel() != 1) throw shape_error("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->value[0];
  }

  // Copy of the value with no graph membership.
  Tensor detach() const {
    Tensor t(impl_->shape, impl_->value);
    return t;
  }

  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

template <typename S>
S l2_norm(const Tensor<S>& t) {
  long double acc = 0;
  for (S v : t.value()) acc += (long double)(v) * v;
  return S(std::sqrt(double(acc)));
}

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class Tape {
 public:
  Tape() { stack().push_back(this); }
  ~Tape() { stack().pop_back(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return stack().empty() ? nullptr : stack().back(); }

  struct Node {
    std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
    std::shared_ptr<TensorImpl<S>> output;
    std::function<void()> backprop;
    std::size_t retained;
  };

  void push_node(Node n) { nodes_.push_back(std::move(n)); }

  std::size_t node_count() const { return nodes_.size(); }

  // Activation elements this tape keeps alive for the backward pass: the sum
  // over nodes of input and output buffer sizes. Shared buffers count once
  // per referencing node; the metric is for relative comparisons (it is what
  // the O(1)-memory checkpointing contract is stated against).
  std::size_t retained_elems() const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.retained;
    return n;
  }

  void backward(const Tensor<S>& output) {
    if (output.numel() != 1)
      throw shape_error("backward: output has " + std::to_string(output.numel()) +
                        " elements; pass an explicit seed for non-scalars");
    backward(output, std::vector<S>{S(1)});
  }

  void backward(const Tensor<S>& output, const std::vector<S>& seed) {
    if (!output.defined()) throw config_error("backward: undefined output tensor");
    if (seed.size() != output.numel())
      throw shape_error("backward: seed has " + std::to_string(seed.size()) + " elements, output has " +
                        std::to_string(output.numel()));
    auto& impl = *output.impl();
    ensure_grad(impl);
    for (std::size_t i = 0; i < seed.size(); ++i) impl.grad[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output->grad.empty()) it->backprop();
    }
  }

  // Drops every gradient buffer this tape's nodes reference, leaves included.
  // Needed between repeated backward sweeps over one recorded graph (the
  // implicit-gradient solver does this).
  void clear_grads() {
    for (auto& node : nodes_) {
      node.output->grad.clear();
      for (auto& in : node.inputs) in->grad.clear();
    }
  }

  // Internal: NoGradGuard pushes a null entry so active() reports "off".
  static void push_raw(Tape* t) { stack().push_back(t); }
  static void pop_raw() { stack().pop_back(); }

 private:
  static std::vector<Tape*>& stack() {
    static thread_local std::vector<Tape*> s;
    return s;
  }
  std::vector<Node> nodes_;
};

template <typename S>
class NoGradGuard {
 public:
  NoGradGuard() { Tape<S>::push_raw(nullptr); }
  ~NoGradGuard() { Tape<S>::pop_raw(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Shared by every op: pushes a node if a tape is active and some input is on
// the graph. The backprop closure must check each input's requires_grad flag
// before accumulating into it.
template <typename S>
void record_node(std::vector<std::shared_ptr<TensorImpl<S>>> inputs, const Tensor<S>& out,
                 std::size_t retained, std::function<void()> backprop) {
  Tape<S>* tape = Tape<S>::active();
  if (!tape) return;
  bool tracked = false;
  for (const auto& in : inputs)
    if (in->requires_grad) tracked = true;
  if (!tracked) return;
  out.impl()->requires_grad = true;
  tape->push_node({std::move(inputs), out.impl(), std::move(backprop), retained});
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!finite_checks()) return;
  for (S v : t.value())
    if (!std::isfinite(double(v)))
      throw divergence_error(std::string(op) + " produced a non-finite value");
}

namespace detail {

template <typename S>
void require_rank2(const Tensor<S>& t, const char* op) {
  if (t.rank() != 2) throw shape_error(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename S>
void accumulate(TensorImpl<S>& t, const S* g, std::size_t n) {
  ensure_grad(t);
  S* dst = t.grad.data();
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  record_node<S>({a.impl(), b.impl()}, out, a.numel() + b.numel() + out.numel(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                   const auto& g = oi->grad;
                   if (ai->requires_grad) detail::accumulate(*ai, g.data(), g.size());
                   if (bi->requires_grad) detail::accumulate(*bi, g.data(), g.size());
                 });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw shape_error("sub: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  record_node<S>({a.impl(), b.impl()}, out, a.numel() + b.numel() + out.numel(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                   const auto& g = oi->grad;
                   if (ai->requires_grad) detail::accumulate(*ai, g.data(), g.size());
                   if (bi->requires_grad) {
                     ensure_grad(*bi);
                     for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
                   }
                 });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  record_node<S>({a.impl(), b.impl()}, out, a.numel() + b.numel() + out.numel(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                   const auto& g = oi->grad;
                   if (ai->requires_grad) {
                     ensure_grad(*ai);
                     for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->value[i];
                   }
                   if (bi->requires_grad) {
                     ensure_grad(*bi);
                     for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->value[i];
                   }
                 });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
  check_finite(out, "scale");
  record_node<S>({a.impl()}, out, a.numel() + out.numel(), [ai = a.impl(), oi = out.impl(), c] {
    if (!ai->requires_grad) return;
    ensure_grad(*ai);
    const auto& g = oi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * c;
  });
  return out;
}

// Adds a length-C (or 1xC) row vector to every row of a RxC matrix.
template <typename S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank2(a, "add_row");
  std::size_t c = a.shape()[1];
  if (b.numel() != c)
    throw shape_error("add_row: row has " + std::to_string(b.numel()) + " elements, matrix is " +
                      shape_str(a.shape()));
  Tensor<S> out(a.shape());
  std::size_t r = a.shape()[0];
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) po[i * c + j] = pa[i * c + j] + pb[j];
  check_finite(out, "add_row");
  record_node<S>({a.impl(), b.impl()}, out, a.numel() + b.numel() + out.numel(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), r, c] {
                   const auto& g = oi->grad;
                   if (ai->requires_grad) detail::accumulate(*ai, g.data(), g.size());
                   if (bi->requires_grad) {
                     ensure_grad(*bi);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) bi->grad[j] += g[i * c + j];
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw shape_error("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " @ " +
                      shape_str(b.shape()));
  Tensor<S> out({m, n});
  ECMap<S> A(a.data(), m, k), B(b.data(), k, n);
  EMap<S>(out.data(), m, n).noalias() = A * B;
  check_finite(out, "matmul");
  record_node<S>({a.impl(), b.impl()}, out, a.numel() + b.numel() + out.numel(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
                   ECMap<S> A(ai->value.data(), m, k), B(bi->value.data(), k, n), G(oi->grad.data(), m, n);
                   if (ai->requires_grad) {
                     ensure_grad(*ai);
                     EMap<S>(ai->grad.data(), m, k).noalias() += G * B.transpose();
                   }
                   if (bi->requires_grad) {
                     ensure_grad(*bi);
                     EMap<S>(bi->grad.data(), k, n).noalias() += A.transpose() * G;
                   }
                 });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank2(a, "transpose");
  std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<S> out({n, m});
  ECMap<S> A(a.data(), m, n);
  EMap<S>(out.data(), n, m) = A.transpose();
  record_node<S>({a.impl()}, out, a.numel() + out.numel(), [ai = a.impl(), oi = out.impl(), m, n] {
    if (!ai->requires_grad) return;
    ensure_grad(*ai);
    ECMap<S> G(oi->grad.data(), n, m);
    EMap<S>(ai->grad.data(), m, n) += G.transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row/column slicing and concatenation

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t r0, std::size_t r1) {
  detail::require_rank2(a, "slice_rows");
  std::size_t r = a.shape()[0], c = a.shape()[1];
  if (r0 >= r1 || r1 > r)
    throw shape_error("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) + ") on " +
                      shape_str(a.shape()));
  Tensor<S> out({r1 - r0, c});
  std::memcpy(out.data(), a.data() + r0 * c, (r1 - r0) * c * sizeof(S));
  record_node<S>({a.impl()}, out, a.numel() + out.numel(), [ai = a.impl(), oi = out.impl(), r0, c] {
    if (!ai->requires_grad) return;
    ensure_grad(*ai);
    const auto& g = oi->grad;
    S* dst = ai->grad.data() + r0 * c;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t c0, std::size_t c1) {
  detail::require_rank2(a, "slice_cols");
  std::size_t r = a.shape()[0], c = a.shape()[1];
  if (c0 >= c1 || c1 > c)
    throw shape_error("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) + ") on " +
                      shape_str(a.shape()));
  std::size_t w = c1 - c0;
  Tensor<S> out({r, w});
  const S* pa = a.data();
  S* po = out.data();
  for (std::size_t i = 0; i < r; ++i) std::memcpy(po + i * w, pa + i * c + c0, w * sizeof(S));
  record_node<S>({a.impl()}, out, a.numel() + out.numel(), [ai = a.impl(), oi = out.impl(), r, c, c0, w] {
    if (!ai->requires_grad) return;
    ensure_grad(*ai);
    const auto& g = oi->grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ai->grad[i * c + c0 + j] += g[i * w + j];
  });
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: no inputs");
  std::size_t r = parts[0].shape().at(0), c = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.shape()[0] != r)
      throw shape_error("concat_cols: row counts disagree: " + shape_str(parts[0].shape()) + " vs " +
                        shape_str(p.shape()));
    c += p.shape()[1];
  }
  Tensor<S> out({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * c + off, p.data() + i * w, w * sizeof(S));
    off += w;
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> impls;
  std::size_t retained = out.numel();
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    retained += p.numel();
  }
  record_node<S>(impls, out, retained, [impls, oi = out.impl(), r, c] {
    const auto& g = oi->grad;
    std::size_t off = 0;
    for (const auto& in : impls) {
      std::size_t w = in->value.size() / r;
      if (in->requires_grad) {
        ensure_grad(*in);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) in->grad[i * w + j] += g[i * c + off + j];
      }
      off += w;
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw shape_error("concat_rows: no inputs");
  std::size_t c = parts[0].shape().size() < 2 ? parts[0].numel() : parts[0].shape()[1];
  std::size_t r = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.shape()[1] != c)
      throw shape_error("concat_rows: column counts disagree: " + shape_str(parts[0].shape()) + " vs " +
                        shape_str(p.shape()));
    r += p.shape()[0];
  }
  Tensor<S> out({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.data(), p.numel() * sizeof(S));
    off += p.numel();
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> impls;
  std::size_t retained = out.numel();
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    retained += p.numel();
  }
  record_node<S>(impls, out, retained, [impls, oi = out.impl()] {
    const auto& g = oi->grad;
    std::size_t off = 0;
    for (const auto& in : impls) {
      if (in->requires_grad) {
        ensure_grad(*in);
        for (std::size_t i = 0; i < in->value.size(); ++i) in->grad[i] += g[off + i];
      }
      off += in->value.size();
    }
  });
  return out;
}

// Row gather: out row i is table row ids[i]. Used for per-sample class
// embeddings, where an id repeats once per token.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<std::uint32_t>& ids) {
  detail::require_rank2(table, "gather_rows");
  std::size_t v = table.shape()[0], c = table.shape()[1];
  for (auto id : ids)
    if (id >= v) throw shape_error("gather_rows: id " + std::to_string(id) + " out of range for " +
                                   shape_str(table.shape()));
  Tensor<S> out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * c, table.data() + ids[i] * c, c * sizeof(S));
  record_node<S>({table.impl()}, out, table.numel() + out.numel(),
                 [ti = table.impl(), oi = out.impl(), ids, c] {
                   if (!ti->requires_grad) return;
                   ensure_grad(*ti);
                   const auto& g = oi->grad;
                   for (std::size_t i = 0; i < ids.size(); ++i)
                     for (std::size_t j = 0; j < c; ++j) ti->grad[ids[i] * c + j] += g[i * c + j];
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalisation

// Row-wise layer norm with population variance (divide by D, not D-1).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  detail::require_rank2(x, "layer_norm");
  std::size_t r = x.shape()[0], d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d)
    throw shape_error("layer_norm: gamma/beta size " + std::to_string(gamma.numel()) + "/" +
                      std::to_string(beta.numel()) + " for " + shape_str(x.shape()));
  Tensor<S> out({r, d});
  auto xhat = std::make_shared<std::vector<S>>(r * d);
  auto inv_std = std::make_shared<std::vector<S>>(r);
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = px + i * d;
    S mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= S(d);
    S var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      S c = row[j] - mean;
      var += c * c;
    }
    var /= S(d);
    S istd = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = istd;
    for (std::size_t j = 0; j < d; ++j) {
      S h = (row[j] - mean) * istd;
      (*xhat)[i * d + j] = h;
      po[i * d + j] = pg[j] * h + pb[j];
    }
  }
  check_finite(out, "layer_norm");
  record_node<S>({x.impl(), gamma.impl(), beta.impl()}, out,
                 x.numel() + gamma.numel() + beta.numel() + out.numel() + xhat->size() + inv_std->size(),
                 [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(), xhat, inv_std, r, d] {
                   const auto& g = oi->grad;
                   if (gi->requires_grad) ensure_grad(*gi);
                   if (bi->requires_grad) ensure_grad(*bi);
                   if (xi->requires_grad) ensure_grad(*xi);
                   for (std::size_t i = 0; i < r; ++i) {
                     const S* grow = g.data() + i * d;
                     const S* hrow = xhat->data() + i * d;
                     if (gi->requires_grad || bi->requires_grad) {
                       for (std::size_t j = 0; j < d; ++j) {
                         if (gi->requires_grad) gi->grad[j] += grow[j] * hrow[j];
                         if (bi->requires_grad) bi->grad[j] += grow[j];
                       }
                     }
                     if (xi->requires_grad) {
                       // dx = istd * (dh - mean(dh) - xhat * mean(dh * xhat)),  dh = g * gamma
                       S mean_dh = 0, mean_dh_h = 0;
                       for (std::size_t j = 0; j < d; ++j) {
                         S dh = grow[j] * gi->value[j];
                         mean_dh += dh;
                         mean_dh_h += dh * hrow[j];
                       }
                       mean_dh /= S(d);
                       mean_dh_h /= S(d);
                       S istd = (*inv_std)[i];
                       S* xg = xi->grad.data() + i * d;
                       for (std::size_t j = 0; j < d; ++j) {
                         S dh = grow[j] * gi->value[j];
                         xg[j] += istd * (dh - mean_dh - hrow[j] * mean_dh_h);
                       }
                     }
                   }
                 });
  return out;
}

// Row-wise softmax with max subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  detail::require_rank2(x, "softmax");
  std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor<S> out({r, c});
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = px + i * c;
    S m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      S e = std::exp(row[j] - m);
      po[i * c + j] = e;
      z += e;
    }
    S inv = S(1) / z;
    for (std::size_t j = 0; j < c; ++j) po[i * c + j] *= inv;
  }
  check_finite(out, "softmax");
  record_node<S>({x.impl()}, out, x.numel() + out.numel(), [xi = x.impl(), oi = out.impl(), r, c] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    const auto& g = oi->grad;
    const auto& p = oi->value;
    for (std::size_t i = 0; i < r; ++i) {
      S dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
    }
  });
  return out;
}

// Exact GELU: x * Phi(x) with the Gaussian CDF, not the tanh approximation.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    S v = px[i];
    po[i] = v * S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
  }
  check_finite(out, "gelu");
  record_node<S>({x.impl()}, out, x.numel() + out.numel(), [xi = x.impl(), oi = out.impl()] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    const auto& g = oi->grad;
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
    for (std::size_t i = 0; i < g.size(); ++i) {
      S v = xi->value[i];
      S phi = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
      S pdf = std::exp(S(-0.5) * v * v) * inv_sqrt2pi;
      xi->grad[i] += g[i] * (phi + v * pdf);
    }
  });
  return out;
}

// |x| with subgradient 0 at x = 0.
template <typename S>
Tensor<S> abs_t(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = std::abs(px[i]);
  record_node<S>({x.impl()}, out, x.numel() + out.numel(), [xi = x.impl(), oi = out.impl()] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    const auto& g = oi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      S v = xi->value[i];
      S s = v > 0 ? S(1) : (v < 0 ? S(-1) : S(0));
      xi->grad[i] += g[i] * s;
    }
  });
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out({std::size_t(1)});
  S acc = 0;
  for (S v : x.value()) acc += v;
  out.data()[0] = acc;
  record_node<S>({x.impl()}, out, x.numel() + 1, [xi = x.impl(), oi = out.impl()] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    S g = oi->grad[0];
    for (auto& v : xi->grad) v += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  if (x.numel() == 0) throw shape_error("mean_all: empty tensor");
  Tensor<S> out({std::size_t(1)});
  S acc = 0;
  for (S v : x.value()) acc += v;
  out.data()[0] = acc / S(x.numel());
  record_node<S>({x.impl()}, out, x.numel() + 1, [xi = x.impl(), oi = out.impl()] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    S g = oi->grad[0] / S(xi->value.size());
    for (auto& v : xi->grad) v += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Patch layout. Images are row-major {H, W, C}; patchify yields one row per
// patch, patches in raster order, each row laid out (py, px, c) row-major so
// unpatchify is the exact inverse permutation.

template <typename S>
Tensor<S> patchify(const Tensor<S>& img, std::size_t patch) {
  if (img.rank() != 3)
    throw shape_error("patchify: expected {H,W,C}, got " + shape_str(img.shape()));
  std::size_t h = img.shape()[0], w = img.shape()[1], c = img.shape()[2];
  if (patch == 0 || h % patch || w % patch)
    throw shape_error("patchify: patch " + std::to_string(patch) + " does not tile " + shape_str(img.shape()));
  std::size_t gy = h / patch, gx = w / patch;
  Tensor<S> out({gy * gx, patch * patch * c});
  const S* src = img.data();
  S* dst = out.data();
  std::size_t row_len = patch * patch * c;
  for (std::size_t py = 0; py < gy; ++py)
    for (std::size_t px = 0; px < gx; ++px) {
      S* row = dst + (py * gx + px) * row_len;
      for (std::size_t iy = 0; iy < patch; ++iy)
        std::memcpy(row + iy * patch * c, src + ((py * patch + iy) * w + px * patch) * c,
                    patch * c * sizeof(S));
    }
  record_node<S>({img.impl()}, out, img.numel() + out.numel(),
                 [ii = img.impl(), oi = out.impl(), h, w, c, patch, gy, gx] {
                   if (!ii->requires_grad) return;
                   ensure_grad(*ii);
                   std::size_t row_len = patch * patch * c;
                   const auto& g = oi->grad;
                   for (std::size_t py = 0; py < gy; ++py)
                     for (std::size_t px = 0; px < gx; ++px) {
                       const S* row = g.data() + (py * gx + px) * row_len;
                       for (std::size_t iy = 0; iy < patch; ++iy) {
                         S* dst = ii->grad.data() + ((py * patch + iy) * w + px * patch) * c;
                         const S* srow = row + iy * patch * c;
                         for (std::size_t k = 0; k < patch * c; ++k) dst[k] += srow[k];
                       }
                     }
                   (void)h;
                 });
  return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& rows, std::size_t h, std::size_t w, std::size_t c,
                     std::size_t patch) {
  detail::require_rank2(rows, "unpatchify");
  if (patch == 0 || h % patch || w % patch)
    throw shape_error("unpatchify: patch " + std::to_string(patch) + " does not tile " +
                      std::to_string(h) + "x" + std::to_string(w));
  std::size_t gy = h / patch, gx = w / patch, row_len = patch * patch * c;
  if (rows.shape()[0] != gy * gx || rows.shape()[1] != row_len)
    throw shape_error("unpatchify: got " + shape_str(rows.shape()) + ", wanted [" +
                      std::to_string(gy * gx) + "x" + std::to_string(row_len) + "]");
  Tensor<S> out({h, w, c});
  const S* src = rows.data();
  S* dst = out.data();
  for (std::size_t py = 0; py < gy; ++py)
    for (std::size_t px = 0; px < gx; ++px) {
      const S* row = src + (py * gx + px) * row_len;
      for (std::size_t iy = 0; iy < patch; ++iy)
        std::memcpy(dst + ((py * patch + iy) * w + px * patch) * c, row + iy * patch * c,
                    patch * c * sizeof(S));
    }
  record_node<S>({rows.impl()}, out, rows.numel() + out.numel(),
                 [ri = rows.impl(), oi = out.impl(), w, c, patch, gy, gx, row_len] {
                   if (!ri->requires_grad) return;
                   ensure_grad(*ri);
                   const auto& g = oi->grad;
                   for (std::size_t py = 0; py < gy; ++py)
                     for (std::size_t px = 0; px < gx; ++px) {
                       S* row = ri->grad.data() + (py * gx + px) * row_len;
                       for (std::size_t iy = 0; iy < patch; ++iy) {
                         const S* srow = g.data() + ((py * patch + iy) * w + px * patch) * c;
                         for (std::size_t k = 0; k < patch * c; ++k) row[iy * patch * c + k] += srow[k];
                       }
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checkpointing

// Runs fn without recording and registers a single node whose backward
// replays fn on a private sub-tape, seeds it with the upstream gradient, and
// lets the replayed graph push gradients into the shared parameter/input
// buffers. The replayed output must match the saved output bit for bit;
// anything else means a kernel is nondeterministic and the gradients could
// not be trusted.
//
// declared_inputs is an accounting and liveness list (what this node keeps
// alive besides the output); gradients also flow to any graph tensor fn
// captures, declared or not.
template <typename S>
Tensor<S> checkpoint_segment(const std::function<Tensor<S>()>& fn,
                             const std::vector<Tensor<S>>& declared_inputs) {
  Tensor<S> out;
  {
    NoGradGuard<S> guard;
    out = fn();
  }
  check_finite(out, "checkpoint_segment");
  Tape<S>* tape = Tape<S>::active();
  if (!tape) return out;
  std::vector<std::shared_ptr<TensorImpl<S>>> impls;
  std::size_t retained = out.numel();
  for (const auto& t : declared_inputs) {
    impls.push_back(t.impl());
    retained += t.numel();
  }
  out.impl()->requires_grad = true;
  tape->push_node({impls, out.impl(), [fn, oi = out.impl()] {
                     Tape<S> sub;
                     Tensor<S> replay = fn();
                     if (replay.numel() != oi->value.size() ||
                         std::memcmp(replay.data(), oi->value.data(), oi->value.size() * sizeof(S)) != 0)
                       throw config_error("checkpoint replay does not match the recorded forward output");
                     sub.backward(replay, oi->grad);
                   },
                   retained});
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

// Central-difference gradient of loss_fn with respect to each tensor in wrt,
// perturbing one element at a time. loss_fn sees the mutated values through
// the shared impls and runs with recording off.
template <typename S>
std::vector<std::vector<S>> finite_difference_grad(const std::function<S()>& loss_fn,
                                                   const std::vector<Tensor<S>>& wrt, S eps) {
  if (eps <= S(0)) throw config_error("finite_difference_grad: eps must be positive");
  NoGradGuard<S> guard;
  std::vector<std::vector<S>> grads;
  for (const auto& t : wrt) {
    std::vector<S> g(t.numel());
    auto& v = const_cast<Tensor<S>&>(t).mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      S saved = v[i];
      v[i] = saved + eps;
      S up = loss_fn();
      v[i] = saved - eps;
      S down = loss_fn();
      v[i] = saved;
      g[i] = (up - down) / (S(2) * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace eqdistill
