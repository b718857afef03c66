#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "ot/common.hpp"
#include "ot/gemm.hpp"

namespace ot {

// Reverse-mode autodiff over dense row-major tensors.
//
// A Tensor is a handle to a graph node holding the value buffer, an optional
// gradient buffer and the backprop closure that pulls this node's gradient
// into its parents. Determinism rules: every reduction runs in a fixed
// left-to-right order (strict ascending-k inside GEMM) and graph traversal
// order is a function of construction order only.

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // null for leaves

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S fill, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value.assign(static_cast<size_t>(ot::numel(shape)), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_vector(Shape shape, std::vector<S> data,
                            bool requires_grad = false) {
    OT_CHECK(static_cast<int64_t>(data.size()) == ot::numel(shape),
             DimensionError,
             "data length " << data.size() << " != numel of " << shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t rank() const { return n_->shape.size(); }
  int64_t numel() const { return n_->numel(); }

  std::span<const S> data() const { return {n_->value.data(), n_->value.size()}; }
  std::span<S> data() { return {n_->value.data(), n_->value.size()}; }
  const std::vector<S>& vec() const { return n_->value; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const S> grad() const { return {n_->grad.data(), n_->grad.size()}; }
  std::span<S> grad_mut() {
    n_->ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  void zero_grad() { n_->grad.clear(); }

  bool is_leaf() const { return n_->is_leaf(); }

  // Value copy with no lineage; cuts the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node<S>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(std::move(n));
  }

  // Deep copy keeping the requires_grad flag; no lineage.
  Tensor clone() const {
    Tensor t = detach();
    t.set_requires_grad(n_->requires_grad);
    return t;
  }

  std::shared_ptr<Node<S>> node() const { return n_; }

  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <class S>
std::shared_ptr<Node<S>> make_op(Shape shape,
                                 std::vector<std::shared_ptr<Node<S>>> parents) {
  auto n = std::make_shared<Node<S>>();
  n->value.assign(static_cast<size_t>(ot::numel(shape)), S(0));
  n->shape = std::move(shape);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

// Leading-dimension product (all but the last `tail` dims).
inline int64_t lead(const Shape& s, size_t tail) {
  int64_t n = 1;
  for (size_t i = 0; i + tail < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  OT_CHECK(a.shape() == b.shape(), DimensionError,
           "add: shape mismatch " << shape_str(a.shape()) << " vs "
                                  << shape_str(b.shape()));
  auto n = detail::make_op<S>(a.shape(), {a.node(), b.node()});
  const S* av = a.data().data();
  const S* bv = b.data().data();
  S* out = n->value.data();
  const int64_t count = n->numel();
  for (int64_t i = 0; i < count; ++i) out[i] = av[i] + bv[i];
  n->backprop = [](Node<S>& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
    }
  };
  return Tensor<S>(n);
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto n = detail::make_op<S>(a.shape(), {a.node()});
  const S* av = a.data().data();
  S* out = n->value.data();
  for (int64_t i = 0; i < n->numel(); ++i) out[i] = av[i] * c;
  n->backprop = [c](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += c * self.grad[i];
  };
  return Tensor<S>(n);
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  OT_CHECK(a.shape() == b.shape(), DimensionError,
           "mul: shape mismatch " << shape_str(a.shape()) << " vs "
                                  << shape_str(b.shape()));
  auto n = detail::make_op<S>(a.shape(), {a.node(), b.node()});
  const S* av = a.data().data();
  const S* bv = b.data().data();
  S* out = n->value.data();
  for (int64_t i = 0; i < n->numel(); ++i) out[i] = av[i] * bv[i];
  n->backprop = [](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        pb.grad[i] += self.grad[i] * pa.value[i];
    }
  };
  return Tensor<S>(n);
}

// x[...,d] + bias[d], bias broadcast over leading dims.
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  OT_CHECK(bias.rank() == 1 && x.rank() >= 1 &&
               x.shape().back() == bias.dim(0),
           DimensionError,
           "add_bias: " << shape_str(x.shape()) << " vs "
                        << shape_str(bias.shape()));
  const int64_t d = bias.dim(0);
  const int64_t rows = detail::lead(x.shape(), 1);
  auto n = detail::make_op<S>(x.shape(), {x.node(), bias.node()});
  const S* xv = x.data().data();
  const S* bv = bias.data().data();
  S* out = n->value.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
  n->backprop = [d, rows](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) px.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) pb.grad[j] += self.grad[r * d + j];
    }
  };
  return Tensor<S>(n);
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  OT_CHECK(ot::numel(shape) == x.numel(), DimensionError,
           "reshape: numel mismatch " << shape_str(x.shape()) << " -> "
                                      << shape_str(shape));
  auto n = detail::make_op<S>(std::move(shape), {x.node()});
  n->value = x.node()->value;
  n->backprop = [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
  };
  return Tensor<S>(n);
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <class S>
void permute_copy(const S* src, S* dst, const Shape& in_shape,
                  const std::vector<int>& axes, bool accumulate) {
  const size_t r = in_shape.size();
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  auto in_strides = strides_of(in_shape);
  const int64_t total = ot::numel(in_shape);
  std::vector<int64_t> idx(r, 0);
  for (int64_t flat = 0; flat < total; ++flat) {
    int64_t src_off = 0;
    for (size_t i = 0; i < r; ++i) src_off += idx[i] * in_strides[axes[i]];
    if (accumulate)
      dst[src_off] += src[flat];
    else
      dst[flat] = src[src_off];
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

// General axis permutation (copying).
template <class S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> axes) {
  OT_CHECK(axes.size() == x.rank(), DimensionError,
           "permute: axes size " << axes.size() << " vs rank " << x.rank());
  Shape out_shape(x.rank());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = x.dim(axes[i]);
  auto n = detail::make_op<S>(out_shape, {x.node()});
  detail::permute_copy(x.data().data(), n->value.data(), x.shape(), axes, false);
  Shape in_shape = x.shape();
  n->backprop = [axes, in_shape](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    // Walking the output in order and scattering keeps accumulation
    // order fixed.
    detail::permute_copy(self.grad.data(), p.grad.data(), in_shape, axes, true);
  };
  return Tensor<S>(n);
}

// Columns [start, start+len) of the last dimension.
template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, int64_t start, int64_t len) {
  const int64_t d = x.shape().back();
  OT_CHECK(start >= 0 && len > 0 && start + len <= d, DimensionError,
           "slice_cols: [" << start << "," << start + len << ") of " << d);
  Shape out_shape = x.shape();
  out_shape.back() = len;
  const int64_t rows = detail::lead(x.shape(), 1);
  auto n = detail::make_op<S>(out_shape, {x.node()});
  const S* xv = x.data().data();
  S* out = n->value.data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out + r * len, xv + r * d + start,
                sizeof(S) * static_cast<size_t>(len));
  n->backprop = [rows, d, start, len](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < len; ++j)
        p.grad[r * d + start + j] += self.grad[r * len + j];
  };
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  OT_CHECK(a.rank() == 2 && b.rank() == 2, DimensionError,
           "matmul: expects rank-2, got " << shape_str(a.shape()) << " and "
                                          << shape_str(b.shape()));
  OT_CHECK(a.dim(1) == b.dim(0), DimensionError,
           "matmul: inner dims disagree " << shape_str(a.shape()) << " x "
                                          << shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto n = detail::make_op<S>({m, nn}, {a.node(), b.node()});
  gemm_acc(n->value.data(), a.data().data(), b.data().data(), m, k, nn);
  n->backprop = [m, k, nn](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA += dC * B^T
      gemm_acc_nt(pa.grad.data(), self.grad.data(), pb.value.data(), m, nn, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB += A^T * dC
      gemm_acc_tn(pb.grad.data(), pa.value.data(), self.grad.data(), m, k, nn);
    }
  };
  return Tensor<S>(n);
}

// a[m,k] * b[n,k]^T -> [m,n]. Used for the tied LM head (logits = h * E^T).
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  OT_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
           DimensionError,
           "matmul_nt: " << shape_str(a.shape()) << " x "
                         << shape_str(b.shape()) << "^T");
  const int64_t m = a.dim(0), k = a.dim(1), nn = b.dim(0);
  auto n = detail::make_op<S>({m, nn}, {a.node(), b.node()});
  gemm_acc_nt(n->value.data(), a.data().data(), b.data().data(), m, k, nn);
  n->backprop = [m, k, nn](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA += dC * B
      gemm_acc(pa.grad.data(), self.grad.data(), pb.value.data(), m, nn, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB += dC^T * A
      gemm_acc_tn(pb.grad.data(), self.grad.data(), pa.value.data(), m, nn, k);
    }
  };
  return Tensor<S>(n);
}

namespace detail {

template <class S>
void check_bmm(const Tensor<S>& a, const Tensor<S>& b, const char* who) {
  OT_CHECK(a.rank() == b.rank() && a.rank() >= 3, DimensionError,
           who << ": expects equal rank >= 3, got " << shape_str(a.shape())
               << " and " << shape_str(b.shape()));
  for (size_t i = 0; i + 2 < a.rank(); ++i)
    OT_CHECK(a.dim(i) == b.dim(i), DimensionError,
             who << ": batch dims disagree " << shape_str(a.shape()) << " vs "
                 << shape_str(b.shape()));
}

}  // namespace detail

// Batched a[..,m,k] * b[..,k,n].
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_bmm(a, b, "bmm");
  const size_t r = a.rank();
  const int64_t m = a.dim(r - 2), k = a.dim(r - 1);
  OT_CHECK(b.dim(r - 2) == k, DimensionError,
           "bmm: inner dims disagree " << shape_str(a.shape()) << " x "
                                       << shape_str(b.shape()));
  const int64_t nn = b.dim(r - 1);
  const int64_t batch = detail::lead(a.shape(), 2);
  Shape out_shape = a.shape();
  out_shape[r - 1] = nn;
  auto n = detail::make_op<S>(out_shape, {a.node(), b.node()});
  for (int64_t s = 0; s < batch; ++s)
    gemm_acc(n->value.data() + s * m * nn, a.data().data() + s * m * k,
             b.data().data() + s * k * nn, m, k, nn);
  n->backprop = [batch, m, k, nn](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t s = 0; s < batch; ++s)
        gemm_acc_nt(pa.grad.data() + s * m * k, self.grad.data() + s * m * nn,
                    pb.value.data() + s * k * nn, m, nn, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t s = 0; s < batch; ++s)
        gemm_acc_tn(pb.grad.data() + s * k * nn, pa.value.data() + s * m * k,
                    self.grad.data() + s * m * nn, m, k, nn);
    }
  };
  return Tensor<S>(n);
}

// Batched a[..,m,k] * b[..,n,k]^T (attention scores q*k^T).
template <class S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_bmm(a, b, "bmm_nt");
  const size_t r = a.rank();
  const int64_t m = a.dim(r - 2), k = a.dim(r - 1);
  OT_CHECK(b.dim(r - 1) == k, DimensionError,
           "bmm_nt: inner dims disagree " << shape_str(a.shape()) << " x "
                                          << shape_str(b.shape()) << "^T");
  const int64_t nn = b.dim(r - 2);
  const int64_t batch = detail::lead(a.shape(), 2);
  Shape out_shape = a.shape();
  out_shape[r - 1] = nn;
  auto n = detail::make_op<S>(out_shape, {a.node(), b.node()});
  for (int64_t s = 0; s < batch; ++s)
    gemm_acc_nt(n->value.data() + s * m * nn, a.data().data() + s * m * k,
                b.data().data() + s * nn * k, m, k, nn);
  n->backprop = [batch, m, k, nn](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t s = 0; s < batch; ++s)
        gemm_acc(pa.grad.data() + s * m * k, self.grad.data() + s * m * nn,
                 pb.value.data() + s * nn * k, m, nn, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t s = 0; s < batch; ++s)
        gemm_acc_tn(pb.grad.data() + s * nn * k, self.grad.data() + s * m * nn,
                    pa.value.data() + s * m * k, m, nn, k);
    }
  };
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Nonlinearities / normalization
// ---------------------------------------------------------------------------

// GELU, tanh approximation. This is the single normative formula used
// everywhere; no erf-based variant exists in this codebase.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  auto n = detail::make_op<S>(x.shape(), {x.node()});
  const S* xv = x.data().data();
  S* out = n->value.data();
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  const S a = static_cast<S>(0.044715);
  for (int64_t i = 0; i < n->numel(); ++i) {
    const S v = xv[i];
    const S u = c * (v + a * v * v * v);
    out[i] = S(0.5) * v * (S(1) + std::tanh(u));
  }
  n->backprop = [c, a](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      const S v = p.value[i];
      const S u = c * (v + a * v * v * v);
      const S t = std::tanh(u);
      const S d = S(0.5) * (S(1) + t) +
                  S(0.5) * v * (S(1) - t * t) * c * (S(1) + S(3) * a * v * v);
      p.grad[i] += self.grad[i] * d;
    }
  };
  return Tensor<S>(n);
}

// Per-row zero-mean unit-variance normalization over the last dim, then
// affine. Population variance (divide by d).
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
  OT_CHECK(gain.rank() == 1 && bias.rank() == 1 && x.rank() >= 1, DimensionError,
           "layer_norm: gain/bias must be rank-1");
  const int64_t d = x.shape().back();
  OT_CHECK(gain.dim(0) == d && bias.dim(0) == d, DimensionError,
           "layer_norm: feature dim mismatch, x " << shape_str(x.shape())
               << " gain " << shape_str(gain.shape()) << " bias "
               << shape_str(bias.shape()));
  OT_CHECK(eps >= S(0), ContractError, "layer_norm: eps must be >= 0");
  const int64_t rows = detail::lead(x.shape(), 1);
  auto n = detail::make_op<S>(x.shape(), {x.node(), gain.node(), bias.node()});
  const S* xv = x.data().data();
  const S* gv = gain.data().data();
  const S* bv = bias.data().data();
  S* out = n->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = xv + r * d;
    S mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<S>(d);
    S var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j)
      out[r * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
  }
  n->backprop = [rows, d, eps](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    std::vector<S> xhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const S* row = px.value.data() + r * d;
      const S* go = self.grad.data() + r * d;
      S mean = 0;
      for (int64_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<S>(d);
      S var = 0;
      for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<S>(d);
      const S inv = S(1) / std::sqrt(var + eps);
      for (int64_t j = 0; j < d; ++j) xhat[j] = (row[j] - mean) * inv;
      if (pg.requires_grad)
        for (int64_t j = 0; j < d; ++j) pg.grad[j] += go[j] * xhat[j];
      if (pb.requires_grad)
        for (int64_t j = 0; j < d; ++j) pb.grad[j] += go[j];
      if (px.requires_grad) {
        // dxhat = go * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        S s1 = 0, s2 = 0;
        const S* gv = pg.value.data();
        for (int64_t j = 0; j < d; ++j) s1 += go[j] * gv[j];
        for (int64_t j = 0; j < d; ++j) s2 += go[j] * gv[j] * xhat[j];
        s1 /= static_cast<S>(d);
        s2 /= static_cast<S>(d);
        for (int64_t j = 0; j < d; ++j)
          px.grad[r * d + j] += inv * (go[j] * gv[j] - s1 - xhat[j] * s2);
      }
    }
  };
  return Tensor<S>(n);
}

// Softmax over the last dim of [..., S, S] scores with a causal mask: row i
// attends to columns j <= i; masked entries produce exact zeros.
template <class S>
Tensor<S> causal_softmax(const Tensor<S>& scores) {
  OT_CHECK(scores.rank() >= 2, DimensionError, "causal_softmax: rank >= 2");
  const size_t r = scores.rank();
  const int64_t sq = scores.dim(r - 2);
  OT_CHECK(scores.dim(r - 1) == sq, DimensionError,
           "causal_softmax: last two dims must be square, got "
               << shape_str(scores.shape()));
  const int64_t mats = detail::lead(scores.shape(), 2);
  auto n = detail::make_op<S>(scores.shape(), {scores.node()});
  const S* xv = scores.data().data();
  S* out = n->value.data();
  for (int64_t m = 0; m < mats; ++m) {
    for (int64_t i = 0; i < sq; ++i) {
      const S* row = xv + (m * sq + i) * sq;
      S* orow = out + (m * sq + i) * sq;
      S mx = row[0];
      for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
      S denom = 0;
      for (int64_t j = 0; j <= i; ++j) {
        orow[j] = std::exp(row[j] - mx);
        denom += orow[j];
      }
      const S inv = S(1) / denom;
      for (int64_t j = 0; j <= i; ++j) orow[j] *= inv;
      for (int64_t j = i + 1; j < sq; ++j) orow[j] = S(0);
    }
  }
  n->backprop = [mats, sq](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t m = 0; m < mats; ++m) {
      for (int64_t i = 0; i < sq; ++i) {
        const S* prow = self.value.data() + (m * sq + i) * sq;
        const S* grow = self.grad.data() + (m * sq + i) * sq;
        S* drow = p.grad.data() + (m * sq + i) * sq;
        S dot = 0;
        for (int64_t j = 0; j <= i; ++j) dot += grow[j] * prow[j];
        for (int64_t j = 0; j <= i; ++j) drow[j] += prow[j] * (grow[j] - dot);
      }
    }
  };
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Embedding / losses / reductions
// ---------------------------------------------------------------------------

// Row gather: out[r,:] = table[ids[r],:]. Backward scatter-adds in row order.
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int32_t>& ids) {
  OT_CHECK(table.rank() == 2, DimensionError, "embedding: table must be rank-2");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t rows = static_cast<int64_t>(ids.size());
  for (int64_t r = 0; r < rows; ++r)
    OT_CHECK(ids[r] >= 0 && ids[r] < v, IndexError,
             "embedding: id " << ids[r] << " out of range [0," << v << ") at row "
                              << r);
  auto n = detail::make_op<S>({rows, d}, {table.node()});
  const S* tv = table.data().data();
  S* out = n->value.data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out + r * d, tv + static_cast<int64_t>(ids[r]) * d,
                sizeof(S) * static_cast<size_t>(d));
  n->backprop = [ids, d](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < ids.size(); ++r) {
      S* dst = p.grad.data() + static_cast<int64_t>(ids[r]) * d;
      const S* src = self.grad.data() + static_cast<int64_t>(r) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return Tensor<S>(n);
}

// Mean negative log-likelihood over the batch. Backward emits
// (softmax - onehot) / B.
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits,
                                const std::vector<int32_t>& targets) {
  OT_CHECK(logits.rank() == 2, DimensionError,
           "softmax_cross_entropy: logits must be rank-2, got "
               << shape_str(logits.shape()));
  const int64_t b = logits.dim(0), v = logits.dim(1);
  OT_CHECK(b > 0 && v > 0, DimensionError,
           "softmax_cross_entropy: empty logits " << shape_str(logits.shape()));
  OT_CHECK(static_cast<int64_t>(targets.size()) == b, DimensionError,
           "softmax_cross_entropy: batch " << b << " vs targets "
                                           << targets.size());
  for (int64_t r = 0; r < b; ++r)
    OT_CHECK(targets[r] >= 0 && targets[r] < v, IndexError,
             "softmax_cross_entropy: target " << targets[r]
                 << " out of range [0," << v << ") at row " << r);
  auto n = detail::make_op<S>({}, {logits.node()});
  const S* lv = logits.data().data();
  S total = 0;
  for (int64_t r = 0; r < b; ++r) {
    const S* row = lv + r * v;
    S mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S denom = 0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    total += mx + std::log(denom) - row[targets[r]];
  }
  n->value[0] = total / static_cast<S>(b);
  n->backprop = [targets, b, v](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const S g = self.grad[0] / static_cast<S>(b);
    for (int64_t r = 0; r < b; ++r) {
      const S* row = p.value.data() + r * v;
      S* drow = p.grad.data() + r * v;
      S mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      S denom = 0;
      for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      const S inv = S(1) / denom;
      for (int64_t j = 0; j < v; ++j) {
        S soft = std::exp(row[j] - mx) * inv;
        drow[j] += g * (soft - (j == targets[r] ? S(1) : S(0)));
      }
    }
  };
  return Tensor<S>(n);
}

// Sum of all elements -> scalar.
template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  auto n = detail::make_op<S>(Shape{}, {x.node()});
  const S* xv = x.data().data();
  S total = 0;
  for (int64_t i = 0; i < x.numel(); ++i) total += xv[i];
  n->value[0] = total;
  n->backprop = [](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const S g = self.grad[0];
    for (auto& gi : p.grad) gi += g;
  };
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls; interior node gradients are
// transient per call.
template <class S>
void backward(const Tensor<S>& loss) {
  OT_CHECK(loss.defined() && loss.rank() == 0 && loss.numel() == 1,
           ContractError, "backward: loss must be a scalar tensor");
  OT_CHECK(loss.requires_grad(), ContractError,
           "backward: loss does not require grad (no trainable inputs)");

  // Iterative post-order DFS; child visit order = parent list order, so the
  // resulting topological order is deterministic.
  std::vector<Node<S>*> topo;
  std::unordered_set<Node<S>*> visited;
  struct Frame {
    Node<S>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<S>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  // Every node gets a fresh working buffer; prior leaf grads are folded back
  // in with one rounded add per element at the end. That makes "backward
  // twice without reset" equal exactly twice "backward once" bit-for-bit.
  std::vector<std::pair<Node<S>*, std::vector<S>>> saved;
  for (Node<S>* n : topo) {
    if (n->is_leaf() && !n->grad.empty()) saved.emplace_back(n, std::move(n->grad));
    n->grad.assign(n->value.size(), S(0));
  }

  loss.node()->grad[0] = S(1);

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backprop) n->backprop(*n);
  }

  for (auto& [n, prior] : saved)
    for (size_t i = 0; i < prior.size(); ++i) n->grad[i] += prior[i];
}

}  // namespace ot
