#pragma once

// Reverse-mode autodiff over Tensor. Small tape of shared Nodes; every op
// builds the backward closure eagerly. Matrix products go through Eigen,
// everything else is plain loops. Double precision throughout so analytic
// gradients can be checked against central finite differences.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "loagen/core/tensor.hpp"

namespace loagen::ag {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
  }
};

using NodePtr = std::shared_ptr<Node>;

inline void accum(const NodePtr& p, const Tensor& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
}

class Var {
public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  static Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(n);
  }

  static Var param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var(n);
  }

  const Tensor& value() const { return n_->value; }
  Tensor& value_mut() { return n_->value; }
  const Tensor& grad() const { return n_->grad; }
  NodePtr node() const { return n_; }
  bool defined() const { return n_ != nullptr; }
  bool requires_grad() const { return n_->requires_grad; }

  double scalar() const { return n_->value[0]; }

  void zero_grad() {
    if (n_->grad.numel()) n_->grad.fill(0.0);
  }

private:
  NodePtr n_;
};

namespace detail {

inline Var make(Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(n);
}

}  // namespace detail

// Runs the tape backwards from a scalar root.
inline void backward(const Var& root) {
  if (root.value().numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // iterative topo sort
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i == 0 && seen.count(n)) {
      stack.pop_back();
      continue;
    }
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (!seen.count(p) && p->requires_grad) stack.push_back({p, 0});
    } else {
      if (!seen.count(n)) {
        seen.insert(n);
        order.push_back(n);
      }
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.numel()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument("add: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {pa, pb}, [pa, pb](Node& n) {
    accum(pa, n.grad);
    accum(pb, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {pa, pb}, [pa, pb](Node& n) {
    accum(pa, n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pa->grad[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  auto pa = a.node();
  return detail::make(std::move(out), {pa}, [pa, s](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += s * n.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s;
  auto pa = a.node();
  return detail::make(std::move(out), {pa},
                      [pa](Node& n) { accum(pa, n.grad); });
}

// multiply every element of x by a single-element Var (learnable scalar)
inline Var scale_by(const Var& x, const Var& s) {
  if (s.value().numel() != 1) throw std::invalid_argument("scale_by: scalar expected");
  double sv = s.value()[0];
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= sv;
  auto px = x.node(), ps = s.node();
  return detail::make(std::move(out), {px, ps}, [px, ps, sv](Node& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        px->grad[i] += sv * n.grad[i];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        acc += n.grad[i] * px->value[i];
      ps->grad[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// nonlinearities

inline Var tanh_(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  auto pa = a.node();
  auto val = out;  // copy kept by closure
  return detail::make(std::move(out), {pa}, [pa, val](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      pa->grad[i] += n.grad[i] * (1.0 - val[i] * val[i]);
  });
}

inline Var exp_(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  auto pa = a.node();
  auto val = out;
  return detail::make(std::move(out), {pa}, [pa, val](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      pa->grad[i] += n.grad[i] * val[i];
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  auto pa = a.node();
  auto val = out;
  return detail::make(std::move(out), {pa}, [pa, val](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      pa->grad[i] += n.grad[i] * val[i] * (1.0 - val[i]);
  });
}

// exact GELU, x·Φ(x)
inline Var gelu(const Var& a) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto pa = a.node();
  return detail::make(std::move(out), {pa}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      double x = pa->value[i];
      double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      pa->grad[i] += n.grad[i] * (phi + x * pdf);
    }
  });
}

inline Var silu(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x / (1.0 + std::exp(-x));
  }
  auto pa = a.node();
  return detail::make(std::move(out), {pa}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      double x = pa->value[i];
      double s = 1.0 / (1.0 + std::exp(-x));
      pa->grad[i] += n.grad[i] * (s + x * s * (1.0 - s));
    }
  });
}

// clamp to [lo,hi]; gradient passes only strictly inside the interval
inline Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::min(hi, std::max(lo, out[i]));
  auto pa = a.node();
  return detail::make(std::move(out), {pa}, [pa, lo, hi](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      double v = pa->value[i];
      if (v > lo && v < hi) pa->grad[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  auto pa = a.node();
  return detail::make(Tensor::scalar(acc), {pa}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < pa->grad.numel(); ++i)
      pa->grad[i] += n.grad[0];
  });
}

inline Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

// mean squared error over all elements
inline Var mse(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument("mse: shape mismatch");
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  auto pa = a.node(), pb = b.node();
  return detail::make(
      Tensor::scalar(acc / static_cast<double>(n)), {pa, pb},
      [pa, pb, n](Node& nd) {
        double g = nd.grad[0] * 2.0 / static_cast<double>(n);
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            pa->grad[i] += g * (pa->value[i] - pb->value[i]);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            pb->grad[i] -= g * (pa->value[i] - pb->value[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// matrix ops (2-d)

inline Var matmul(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.ndim() != 2 || B.ndim() != 2 || A.cols() != B.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                Tensor::shape_str(A.shape()) + " x " +
                                Tensor::shape_str(B.shape()));
  Tensor out({A.rows(), B.cols()});
  ECMap ma(A.data(), A.rows(), A.cols());
  ECMap mb(B.data(), B.rows(), B.cols());
  EMap mo(out.data(), out.rows(), out.cols());
  mo.noalias() = ma * mb;
  auto pa = a.node(), pb = b.node();
  return detail::make(std::move(out), {pa, pb}, [pa, pb](Node& n) {
    ECMap g(n.grad.data(), n.value.rows(), n.value.cols());
    if (pa->requires_grad) {
      pa->ensure_grad();
      ECMap mb2(pb->value.data(), pb->value.rows(), pb->value.cols());
      EMap ga(pa->grad.data(), pa->value.rows(), pa->value.cols());
      ga.noalias() += g * mb2.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      ECMap ma2(pa->value.data(), pa->value.rows(), pa->value.cols());
      EMap gb(pb->grad.data(), pb->value.rows(), pb->value.cols());
      gb.noalias() += ma2.transpose() * g;
    }
  });
}

inline Var transpose2d(const Var& a) {
  const auto& A = a.value();
  if (A.ndim() != 2) throw std::invalid_argument("transpose2d: 2-d expected");
  Tensor out({A.cols(), A.rows()});
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) out.at(c, r) = A.at(r, c);
  auto pa = a.node();
  return detail::make(std::move(out), {pa}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t r = 0; r < n.value.rows(); ++r)
      for (std::size_t c = 0; c < n.value.cols(); ++c)
        pa->grad[c * n.value.rows() + r] += n.grad[r * n.value.cols() + c];
  });
}

inline Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor out = a.value().reshaped(shape);
  auto pa = a.node();
  return detail::make(std::move(out), {pa},
                      [pa](Node& n) { accum(pa, n.grad); });
}

// X (L,D) + b (D), broadcast over rows
inline Var add_row_bias(const Var& x, const Var& b) {
  const auto& X = x.value();
  if (X.ndim() != 2 || b.value().numel() != X.cols())
    throw std::invalid_argument("add_row_bias: shape mismatch");
  Tensor out = X;
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, c) += b.value()[c];
  auto px = x.node(), pb = b.node();
  return detail::make(std::move(out), {px, pb}, [px, pb](Node& n) {
    accum(px, n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t r = 0; r < n.value.rows(); ++r)
        for (std::size_t c = 0; c < n.value.cols(); ++c)
          pb->grad[c] += n.grad[r * n.value.cols() + c];
    }
  });
}

// X (C,H,W) + b (C), broadcast over spatial dims
inline Var add_channel_bias(const Var& x, const Var& b) {
  const auto& X = x.value();
  if (X.ndim() != 3 || b.value().numel() != X.dim(0))
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  Tensor out = X;
  const std::size_t hw = X.dim(1) * X.dim(2);
  for (std::size_t c = 0; c < X.dim(0); ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] += b.value()[c];
  auto px = x.node(), pb = b.node();
  return detail::make(std::move(out), {px, pb}, [px, pb, hw](Node& n) {
    accum(px, n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t c = 0; c < pb->value.numel(); ++c)
        for (std::size_t i = 0; i < hw; ++i)
          pb->grad[c] += n.grad[c * hw + i];
    }
  });
}

inline Var slice_rows(const Var& x, std::size_t r0, std::size_t nr) {
  const auto& X = x.value();
  if (X.ndim() != 2 || r0 + nr > X.rows())
    throw std::invalid_argument("slice_rows: out of range");
  const std::size_t D = X.cols();
  Tensor out({nr, D});
  std::copy(X.data() + r0 * D, X.data() + (r0 + nr) * D, out.data());
  auto px = x.node();
  return detail::make(std::move(out), {px}, [px, r0, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      px->grad[r0 * D + i] += n.grad[i];
  });
}

inline Var slice_cols(const Var& x, std::size_t c0, std::size_t nc) {
  const auto& X = x.value();
  if (X.ndim() != 2 || c0 + nc > X.cols())
    throw std::invalid_argument("slice_cols: out of range");
  Tensor out({X.rows(), nc});
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < nc; ++c) out.at(r, c) = X.at(r, c0 + c);
  auto px = x.node();
  const std::size_t D = X.cols();
  return detail::make(std::move(out), {px}, [px, c0, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t r = 0; r < n.value.rows(); ++r)
      for (std::size_t c = 0; c < n.value.cols(); ++c)
        px->grad[r * D + c0 + c] += n.grad[r * n.value.cols() + c];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::size_t D = parts[0].value().cols();
  std::size_t L = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != 2 || p.value().cols() != D)
      throw std::invalid_argument("concat_rows: column mismatch");
    L += p.value().rows();
  }
  Tensor out({L, D});
  std::vector<NodePtr> parents;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().numel(),
              out.data() + off);
    parents.push_back(p.node());
    offsets.push_back(off);
    off += p.value().numel();
  }
  return detail::make(std::move(out), parents, [parents, offsets](Node& n) {
    for (std::size_t k = 0; k < parents.size(); ++k) {
      auto& p = parents[k];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < p->value.numel(); ++i)
        p->grad[i] += n.grad[offsets[k] + i];
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::size_t L = parts[0].value().rows();
  std::size_t D = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != 2 || p.value().rows() != L)
      throw std::invalid_argument("concat_cols: row mismatch");
    D += p.value().cols();
  }
  Tensor out({L, D});
  std::vector<NodePtr> parents;
  std::vector<std::size_t> col_off;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.value().cols();
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < pc; ++c)
        out.at(r, off + c) = p.value().at(r, c);
    parents.push_back(p.node());
    col_off.push_back(off);
    off += pc;
  }
  return detail::make(std::move(out), parents, [parents, col_off, L, D](Node& n) {
    for (std::size_t k = 0; k < parents.size(); ++k) {
      auto& p = parents[k];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      const std::size_t pc = p->value.cols();
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < pc; ++c)
          p->grad[r * pc + c] += n.grad[r * D + col_off[k] + c];
    }
  });
}

// gather rows by index; gradient scatter-adds (also the embedding lookup)
inline Var select_rows(const Var& x, std::vector<std::size_t> idx) {
  const auto& X = x.value();
  if (X.ndim() != 2) throw std::invalid_argument("select_rows: 2-d expected");
  const std::size_t D = X.cols();
  Tensor out({idx.size(), D});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= X.rows()) throw std::out_of_range("select_rows: index");
    std::copy(X.data() + idx[i] * D, X.data() + (idx[i] + 1) * D,
              out.data() + i * D);
  }
  auto px = x.node();
  return detail::make(std::move(out), {px}, [px, idx, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < D; ++c)
        px->grad[idx[i] * D + c] += n.grad[i * D + c];
  });
}

inline Var mean_rows(const Var& x) {
  const auto& X = x.value();
  if (X.ndim() != 2) throw std::invalid_argument("mean_rows: 2-d expected");
  const std::size_t L = X.rows(), D = X.cols();
  Tensor out({1, D});
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t c = 0; c < D; ++c) out[c] += X.at(r, c);
  for (std::size_t c = 0; c < D; ++c) out[c] /= static_cast<double>(L);
  auto px = x.node();
  return detail::make(std::move(out), {px}, [px, L, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < D; ++c)
        px->grad[r * D + c] += n.grad[c] / static_cast<double>(L);
  });
}

// ---------------------------------------------------------------------------
// row-wise softmax family

inline Var softmax_rows(const Var& x) {
  const auto& X = x.value();
  if (X.ndim() != 2) throw std::invalid_argument("softmax_rows: 2-d expected");
  const std::size_t L = X.rows(), D = X.cols();
  Tensor out = X;
  for (std::size_t r = 0; r < L; ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < D; ++c) m = std::max(m, out.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      out.at(r, c) = std::exp(out.at(r, c) - m);
      z += out.at(r, c);
    }
    for (std::size_t c = 0; c < D; ++c) out.at(r, c) /= z;
  }
  auto px = x.node();
  auto val = out;
  return detail::make(std::move(out), {px}, [px, val, L, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t r = 0; r < L; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < D; ++c)
        dot += n.grad[r * D + c] * val[r * D + c];
      for (std::size_t c = 0; c < D; ++c)
        px->grad[r * D + c] += val[r * D + c] * (n.grad[r * D + c] - dot);
    }
  });
}

// mean cross entropy of row-wise logits against integer labels
inline Var cross_entropy_rows(const Var& logits, const std::vector<std::size_t>& labels) {
  const auto& X = logits.value();
  if (X.ndim() != 2 || labels.size() != X.rows())
    throw std::invalid_argument("cross_entropy_rows: shape mismatch");
  const std::size_t L = X.rows(), C = X.cols();
  Tensor probs = X;
  double loss = 0.0;
  for (std::size_t r = 0; r < L; ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, probs.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      probs.at(r, c) = std::exp(probs.at(r, c) - m);
      z += probs.at(r, c);
    }
    for (std::size_t c = 0; c < C; ++c) probs.at(r, c) /= z;
    loss -= std::log(std::max(probs.at(r, labels[r]), 1e-300));
  }
  loss /= static_cast<double>(L);
  auto px = logits.node();
  return detail::make(Tensor::scalar(loss), {px},
                      [px, probs, labels, L, C](Node& n) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        double g = n.grad[0] / static_cast<double>(L);
                        for (std::size_t r = 0; r < L; ++r)
                          for (std::size_t c = 0; c < C; ++c) {
                            double p = probs[r * C + c];
                            double y = (c == labels[r]) ? 1.0 : 0.0;
                            px->grad[r * C + c] += g * (p - y);
                          }
                      });
}

// ---------------------------------------------------------------------------
// normalization

inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                           double eps = 1e-5) {
  const auto& X = x.value();
  if (X.ndim() != 2) throw std::invalid_argument("layer_norm_rows: 2-d expected");
  const std::size_t L = X.rows(), D = X.cols();
  if (gamma.value().numel() != D || beta.value().numel() != D)
    throw std::invalid_argument("layer_norm_rows: affine size mismatch");
  Tensor out({L, D});
  Tensor xhat({L, D});
  std::vector<double> inv_std(L);
  for (std::size_t r = 0; r < L; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < D; ++c) mu += X.at(r, c);
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      double d = X.at(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < D; ++c) {
      xhat.at(r, c) = (X.at(r, c) - mu) * inv_std[r];
      out.at(r, c) = gamma.value()[c] * xhat.at(r, c) + beta.value()[c];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make(
      std::move(out), {px, pg, pb}, [px, pg, pb, xhat, inv_std, L, D](Node& n) {
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t r = 0; r < L; ++r)
            for (std::size_t c = 0; c < D; ++c)
              pg->grad[c] += n.grad[r * D + c] * xhat[r * D + c];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < L; ++r)
            for (std::size_t c = 0; c < D; ++c) pb->grad[c] += n.grad[r * D + c];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          for (std::size_t r = 0; r < L; ++r) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t c = 0; c < D; ++c) {
              double gh = n.grad[r * D + c] * pg->value[c];
              sum_g += gh;
              sum_gx += gh * xhat[r * D + c];
            }
            for (std::size_t c = 0; c < D; ++c) {
              double gh = n.grad[r * D + c] * pg->value[c];
              px->grad[r * D + c] +=
                  inv_std[r] * (gh - (sum_g + xhat[r * D + c] * sum_gx) /
                                          static_cast<double>(D));
            }
          }
        }
      });
}

inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
  const auto& X = x.value();
  if (X.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: 2-d expected");
  const std::size_t L = X.rows(), D = X.cols();
  Tensor out({L, D});
  std::vector<double> inv_norm(L);
  for (std::size_t r = 0; r < L; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < D; ++c) s += X.at(r, c) * X.at(r, c);
    inv_norm[r] = 1.0 / std::sqrt(s + eps);
    for (std::size_t c = 0; c < D; ++c) out.at(r, c) = X.at(r, c) * inv_norm[r];
  }
  auto px = x.node();
  auto val = out;
  return detail::make(std::move(out), {px}, [px, val, inv_norm, L, D](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t r = 0; r < L; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < D; ++c)
        dot += n.grad[r * D + c] * val[r * D + c];
      for (std::size_t c = 0; c < D; ++c)
        px->grad[r * D + c] +=
            inv_norm[r] * (n.grad[r * D + c] - val[r * D + c] * dot);
    }
  });
}

// ---------------------------------------------------------------------------
// convolution (single item, NCHW without the N)

namespace detail {

inline void im2col(const Tensor& x, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t ho,
                   std::size_t wo, Tensor& col) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  // col: (C*kh*kw) x (ho*wo)
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t row = (c * kh + i) * kw + j;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + i) -
              static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + j) -
                static_cast<std::ptrdiff_t>(pad);
            double v = 0.0;
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(W))
              v = x.at3(c, static_cast<std::size_t>(iy),
                        static_cast<std::size_t>(ix));
            col.at(row, oy * wo + ox) = v;
          }
        }
      }
}

inline void col2im_add(const Tensor& col, std::size_t C, std::size_t H,
                       std::size_t W, std::size_t kh, std::size_t kw,
                       std::size_t stride, std::size_t pad, std::size_t ho,
                       std::size_t wo, Tensor& x_grad) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t row = (c * kh + i) * kw + j;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + i) -
              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + j) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            x_grad.at3(c, static_cast<std::size_t>(iy),
                       static_cast<std::size_t>(ix)) +=
                col.at(row, oy * wo + ox);
          }
        }
      }
}

}  // namespace detail

// x: (Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout)
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride,
                  std::size_t pad) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.ndim() != 3 || W.ndim() != 4 || X.dim(0) != W.dim(1))
    throw std::invalid_argument("conv2d: shape mismatch, x " +
                                Tensor::shape_str(X.shape()) + " w " +
                                Tensor::shape_str(W.shape()));
  const std::size_t Cin = X.dim(0), H = X.dim(1), Wd = X.dim(2);
  const std::size_t Cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  if (H + 2 * pad < kh || Wd + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const std::size_t ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (Wd + 2 * pad - kw) / stride + 1;

  auto col = std::make_shared<Tensor>(
      std::vector<std::size_t>{Cin * kh * kw, ho * wo});
  detail::im2col(X, kh, kw, stride, pad, ho, wo, *col);

  Tensor out({Cout, ho, wo});
  ECMap wm(W.data(), Cout, Cin * kh * kw);
  ECMap cm(col->data(), col->rows(), col->cols());
  EMap om(out.data(), Cout, ho * wo);
  om.noalias() = wm * cm;
  for (std::size_t c = 0; c < Cout; ++c)
    for (std::size_t i = 0; i < ho * wo; ++i)
      out[c * ho * wo + i] += b.value()[c];

  auto px = x.node(), pw = w.node(), pb = b.node();
  return detail::make(
      std::move(out), {px, pw, pb},
      [px, pw, pb, col, Cin, H, Wd, Cout, kh, kw, stride, pad, ho, wo](Node& n) {
        ECMap g(n.grad.data(), Cout, ho * wo);
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t c = 0; c < Cout; ++c)
            for (std::size_t i = 0; i < ho * wo; ++i)
              pb->grad[c] += n.grad[c * ho * wo + i];
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          ECMap cm2(col->data(), col->rows(), col->cols());
          EMap gw(pw->grad.data(), Cout, Cin * kh * kw);
          gw.noalias() += g * cm2.transpose();
        }
        if (px->requires_grad) {
          px->ensure_grad();
          Tensor dcol({Cin * kh * kw, ho * wo});
          ECMap wm2(pw->value.data(), Cout, Cin * kh * kw);
          EMap dcm(dcol.data(), dcol.rows(), dcol.cols());
          dcm.noalias() = wm2.transpose() * g;
          detail::col2im_add(dcol, Cin, H, Wd, kh, kw, stride, pad, ho, wo,
                             px->grad);
        }
      });
}

inline Var upsample_nearest2(const Var& x) {
  const auto& X = x.value();
  if (X.ndim() != 3) throw std::invalid_argument("upsample_nearest2: 3-d expected");
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w)
        out.at3(c, h, w) = X.at3(c, h / 2, w / 2);
  auto px = x.node();
  return detail::make(std::move(out), {px}, [px, C, H, W](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w)
          px->grad[(c * H + h / 2) * W + w / 2] +=
              n.grad[(c * 2 * H + h) * 2 * W + w];
  });
}

}  // namespace loagen::ag
