#pragma once

// Tape-based reverse-mode differentiation over Tensor.
//
// A Graph owns every node created during one forward pass. Nodes are appended
// in creation order, which is already a topological order, so backward() is a
// single reverse sweep that visits each node once and accumulates gradients
// additively into its parents.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgzero/tensor.hpp"

namespace sgz {

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var variable(Tensor value) { return push(std::move(value), true, {}); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient of the last backward() target with respect to node `id`; a zero
  /// tensor when the node is unreachable from it.
  const Tensor& grad(std::size_t id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var loss) {
    check_owner(loss);
    if (nodes_[loss.id].value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " +
                       nodes_[loss.id].value.shape_string());
    }
    for (auto& n : nodes_) {
      n.grad = Tensor();
    }
    ensure_grad(loss.id);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  /// Records an op result. Throws NumericError on a non-finite value.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn,
             const char* op_name) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op_name) + ": non-finite result");
    }
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  /// Mutable gradient buffer for `id`, allocated as zeros on first access.
  Tensor& grad_buffer(std::size_t id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }

  void check_owner(Var v) const {
    if (v.graph != this) throw std::invalid_argument("graph: variable belongs to another graph");
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  void ensure_grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros_like(n.value);
  }

  std::deque<Node> nodes_;  // deque: values stay addressable while the graph grows
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline const Tensor& Var::grad() const { return graph->grad(id); }

namespace detail {

inline Graph& common_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw std::invalid_argument("ops: operands belong to different graphs");
  }
  return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_matrix_shape(a, b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

inline Tensor mat(std::size_t r, std::size_t c) { return Tensor({r, c}, 0.0); }

// C += A * B  (A: m x k, B: k x n)
inline void gemm_acc(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  const double* a = A.values().data();
  const double* b = B.values().data();
  double* c = C.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T  (A: m x k, B: n x k)
inline void gemm_nt_acc(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  const double* a = A.values().data();
  const double* b = B.values().data();
  double* c = C.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
  }
}

// C += A^T * B  (A: k x m, B: k x n)
inline void gemm_tn_acc(const Tensor& A, const Tensor& B, Tensor& C) {
  const std::size_t k = A.rows(), m = A.cols(), n = B.cols();
  const double* a = A.values().data();
  const double* b = B.values().data();
  double* c = C.values().data();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class F>
Var unary(Var a, const char* name, F&& fwd_bwd_deriv) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  Tensor y = mat(x.rows(), x.cols());
  Tensor d = mat(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [yv, dv] = fwd_bwd_deriv(x[i]);
    y[i] = yv;
    d[i] = dv;
  }
  const std::size_t pa = a.id;
  return g.record(
      std::move(y), {pa},
      [pa, d = std::move(d)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * d[i];
      },
      name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic

inline Var matmul(Var a, Var b) {
  Graph& g = detail::common_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: inner dimension mismatch " + A.shape_string() + " x " +
                     B.shape_string());
  }
  Tensor C = detail::mat(A.rows(), B.cols());
  detail::gemm_acc(A, B, C);
  const std::size_t pa = a.id, pb = b.id;
  return g.record(
      std::move(C), {pa, pb},
      [pa, pb](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        if (gr.requires_grad(pa)) detail::gemm_nt_acc(go, gr.value(pb), gr.grad_buffer(pa));
        if (gr.requires_grad(pb)) detail::gemm_tn_acc(gr.value(pa), go, gr.grad_buffer(pb));
      },
      "matmul");
}

inline Var transpose(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  Tensor T = detail::mat(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) T(j, i) = A(i, j);
  const std::size_t pa = a.id;
  return g.record(
      std::move(T), {pa},
      [pa](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < go.rows(); ++i)
          for (std::size_t j = 0; j < go.cols(); ++j) ga(j, i) += go(i, j);
      },
      "transpose");
}

namespace detail {
template <class Combine, class DA, class DB>
Var binary(Var a, Var b, const char* name, Combine comb, DA da, DB db) {
  Graph& g = common_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, name);
  Tensor C = mat(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = comb(A[i], B[i]);
  const std::size_t pa = a.id, pb = b.id;
  return g.record(
      std::move(C), {pa, pb},
      [pa, pb, da, db](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const Tensor& av = gr.value(pa);
        const Tensor& bv = gr.value(pb);
        if (gr.requires_grad(pa)) {
          Tensor& ga = gr.grad_buffer(pa);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * da(av[i], bv[i]);
        }
        if (gr.requires_grad(pb)) {
          Tensor& gb = gr.grad_buffer(pb);
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * db(av[i], bv[i]);
        }
      },
      name);
}
}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var hadamard(Var a, Var b) {
  return detail::binary(
      a, b, "hadamard", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

/// Adds a 1 x n row to every row of an m x n matrix.
inline Var add_row(Var a, Var row) {
  Graph& g = detail::common_graph(a, row);
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) {
    throw ShapeError("add_row: row " + R.shape_string() + " incompatible with " +
                     A.shape_string());
  }
  Tensor C = detail::mat(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) C(i, j) = A(i, j) + R[j];
  const std::size_t pa = a.id, pr = row.id;
  return g.record(
      std::move(C), {pa, pr},
      [pa, pr](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        if (gr.requires_grad(pa)) {
          Tensor& ga = gr.grad_buffer(pa);
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (gr.requires_grad(pr)) {
          Tensor& gb = gr.grad_buffer(pr);
          for (std::size_t i = 0; i < go.rows(); ++i)
            for (std::size_t j = 0; j < go.cols(); ++j) gb[j] += go(i, j);
        }
      },
      "add_row");
}

inline Var scale(Var a, double c) {
  return detail::unary(a, "scale", [c](double x) { return std::pair{c * x, c}; });
}

// ---------------------------------------------------------------------------
// Activations

inline Var relu(Var a) {
  return detail::unary(a, "relu", [](double x) {
    return x > 0.0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0};
  });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  return detail::unary(a, "leaky_relu", [slope](double x) {
    return x > 0.0 ? std::pair{x, 1.0} : std::pair{slope * x, slope};
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// ln(1 + e^x), evaluated without overflow.
inline double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Var sigmoid(Var a) {
  return detail::unary(a, "sigmoid", [](double x) {
    const double s = sigmoid_value(x);
    return std::pair{s, s * (1.0 - s)};
  });
}

inline Var softplus(Var a) {
  return detail::unary(a, "softplus", [](double x) {
    return std::pair{softplus_value(x), sigmoid_value(x)};
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

/// Row-wise log-sum-exp over the entries whose mask is nonzero. `mask` has the
/// shape of `a`. Returns an m x 1 column. Every row needs at least one entry.
inline Var masked_log_sum_exp(Var a, const Tensor& mask) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  detail::require_same_shape(A, mask, "masked_log_sum_exp");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out = detail::mat(m, 1);
  Tensor weights = detail::mat(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, A(i, j));
    if (!std::isfinite(mx)) throw ShapeError("masked_log_sum_exp: empty mask row");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (mask(i, j) != 0.0) s += std::exp(A(i, j) - mx);
    out[i] = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j)
      weights(i, j) = mask(i, j) != 0.0 ? std::exp(A(i, j) - out[i]) : 0.0;
  }
  const std::size_t pa = a.id;
  return g.record(
      std::move(out), {pa},
      [pa, w = std::move(weights)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < w.rows(); ++i)
          for (std::size_t j = 0; j < w.cols(); ++j) ga(i, j) += go[i] * w(i, j);
      },
      "log_sum_exp");
}

/// Row-wise log-sum-exp, m x n -> m x 1, computed with max subtraction.
inline Var log_sum_exp(Var a) {
  return masked_log_sum_exp(a, Tensor({a.rows(), a.cols()}, 1.0));
}

inline Tensor softmax_rows(const Tensor& A) {
  Tensor S({A.rows(), A.cols()}, 0.0);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) s += (S(i, j) = std::exp(A(i, j) - mx));
    for (std::size_t j = 0; j < A.cols(); ++j) S(i, j) /= s;
  }
  return S;
}

inline Var softmax(Var a) {
  Graph& g = *a.graph;
  Tensor S = softmax_rows(a.value());
  const std::size_t pa = a.id;
  return g.record(
      S, {pa},
      [pa](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const Tensor& s = gr.value(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < s.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < s.cols(); ++j) dot += go(i, j) * s(i, j);
          for (std::size_t j = 0; j < s.cols(); ++j) ga(i, j) += s(i, j) * (go(i, j) - dot);
        }
      },
      "softmax");
}

inline Var log_softmax(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  Tensor S = softmax_rows(A);
  Tensor out = detail::mat(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) s += std::exp(A(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) = A(i, j) - lse;
  }
  const std::size_t pa = a.id;
  return g.record(
      std::move(out), {pa},
      [pa, S = std::move(S)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < S.rows(); ++i) {
          double sum = 0.0;
          for (std::size_t j = 0; j < S.cols(); ++j) sum += go(i, j);
          for (std::size_t j = 0; j < S.cols(); ++j) ga(i, j) += go(i, j) - S(i, j) * sum;
        }
      },
      "log_softmax");
}

/// Row-wise layer normalization with a learned 1 x n gain and bias.
inline Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
  Graph& g = detail::common_graph(a, gain);
  detail::common_graph(a, bias);
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(n));
  }
  Tensor xhat = detail::mat(m, n);
  Tensor inv_std = detail::mat(m, 1);
  Tensor out = detail::mat(m, n);
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += A(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (A(i, j) - mean) * (A(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (A(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * G[j] + B[j];
    }
  }
  const std::size_t pa = a.id, pg = gain.id, pb = bias.id;
  return g.record(
      std::move(out), {pa, pg, pb},
      [pa, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr,
                                                                        std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const Tensor& G = gr.value(pg);
        const std::size_t m = xhat.rows(), n = xhat.cols();
        if (gr.requires_grad(pg)) {
          Tensor& gg = gr.grad_buffer(pg);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += go(i, j) * xhat(i, j);
        }
        if (gr.requires_grad(pb)) {
          Tensor& gb = gr.grad_buffer(pb);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += go(i, j);
        }
        if (gr.requires_grad(pa)) {
          Tensor& ga = gr.grad_buffer(pa);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = go(i, j) * G[j];
              sum_d += d;
              sum_dx += d * xhat(i, j);
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = go(i, j) * G[j];
              ga(i, j) += inv_std[i] * (d - inv_n * sum_d - xhat(i, j) * inv_n * sum_dx);
            }
          }
        }
      },
      "layer_norm");
}

/// softmax(Q K^T / sqrt(d)) V for one attention head.
inline Var scaled_dot_attention(Var q, Var k, Var v) {
  Graph& g = detail::common_graph(q, k);
  detail::common_graph(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (Q.cols() != K.cols() || K.rows() != V.rows()) {
    throw ShapeError("scaled_dot_attention: incompatible shapes " + Q.shape_string() + ", " +
                     K.shape_string() + ", " + V.shape_string());
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  Tensor S = detail::mat(Q.rows(), K.rows());
  detail::gemm_nt_acc(Q, K, S);
  for (auto& x : S.values()) x *= inv_scale;
  Tensor P = softmax_rows(S);
  Tensor O = detail::mat(Q.rows(), V.cols());
  detail::gemm_acc(P, V, O);
  const std::size_t pq = q.id, pk = k.id, pv = v.id;
  return g.record(
      std::move(O), {pq, pk, pv},
      [pq, pk, pv, P = std::move(P), inv_scale](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const Tensor& Qv = gr.value(pq);
        const Tensor& Kv = gr.value(pk);
        const Tensor& Vv = gr.value(pv);
        if (gr.requires_grad(pv)) detail::gemm_tn_acc(P, go, gr.grad_buffer(pv));
        if (!gr.requires_grad(pq) && !gr.requires_grad(pk)) return;
        Tensor dP = detail::mat(P.rows(), P.cols());
        detail::gemm_nt_acc(go, Vv, dP);
        Tensor dS = detail::mat(P.rows(), P.cols());
        for (std::size_t i = 0; i < P.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < P.cols(); ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < P.cols(); ++j)
            dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_scale;
        }
        if (gr.requires_grad(pq)) detail::gemm_acc(dS, Kv, gr.grad_buffer(pq));
        if (gr.requires_grad(pk)) detail::gemm_tn_acc(dS, Qv, gr.grad_buffer(pk));
      },
      "scaled_dot_attention");
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Graph& g = *parts[0].graph;
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    g.check_owner(p);
    if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    offsets.push_back(n);
    n += p.cols();
  }
  Tensor out = detail::mat(m, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out(i, offsets[k] + j) = P(i, j);
  }
  return g.record(
      std::move(out), ids,
      [ids, offsets](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!gr.requires_grad(ids[k])) continue;
          Tensor& gp = gr.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < gp.rows(); ++i)
            for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += go(i, offsets[k] + j);
        }
      },
      "concat_cols");
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = *parts[0].graph;
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    g.check_owner(p);
    if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch");
    ids.push_back(p.id);
    offsets.push_back(m);
    m += p.rows();
  }
  Tensor out = detail::mat(m, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    std::copy(P.values().begin(), P.values().end(), out.values().begin() + offsets[k] * n);
  }
  return g.record(
      std::move(out), ids,
      [ids, offsets](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const std::size_t n = go.cols();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!gr.requires_grad(ids[k])) continue;
          Tensor& gp = gr.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offsets[k] * n + i];
        }
      },
      "concat_rows");
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  if (begin >= end || end > A.cols()) throw ShapeError("slice_cols: range out of bounds");
  Tensor out = detail::mat(A.rows(), end - begin);
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = A(i, j);
  const std::size_t pa = a.id;
  return g.record(
      std::move(out), {pa},
      [pa, begin](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < go.rows(); ++i)
          for (std::size_t j = 0; j < go.cols(); ++j) ga(i, begin + j) += go(i, j);
      },
      "slice_cols");
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  if (begin >= end || end > A.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t n = A.cols();
  std::vector<double> vals(A.values().begin() + begin * n, A.values().begin() + end * n);
  const std::size_t pa = a.id;
  return g.record(
      Tensor({end - begin, n}, std::move(vals)), {pa},
      [pa, begin](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        const std::size_t off = begin * go.cols();
        for (std::size_t i = 0; i < go.size(); ++i) ga[off + i] += go[i];
      },
      "slice_rows");
}

/// Row gather: out[i] = a[index[i]]. Backward scatter-adds.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  Tensor out = detail::mat(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) out(i, j) = A(index[i], j);
  }
  const std::size_t pa = a.id;
  return g.record(
      std::move(out), {pa},
      [pa, index = std::move(index)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < index.size(); ++i)
          for (std::size_t j = 0; j < go.cols(); ++j) ga(index[i], j) += go(i, j);
      },
      "gather_rows");
}

/// out[i] = a[i, column[i]], an m x 1 column.
inline Var select_per_row(Var a, std::vector<std::size_t> column) {
  Graph& g = *a.graph;
  const Tensor& A = a.value();
  if (column.size() != A.rows()) throw ShapeError("select_per_row: one column per row required");
  Tensor out = detail::mat(A.rows(), 1);
  for (std::size_t i = 0; i < column.size(); ++i) {
    if (column[i] >= A.cols()) throw ShapeError("select_per_row: column out of range");
    out[i] = A(i, column[i]);
  }
  const std::size_t pa = a.id;
  return g.record(
      std::move(out), {pa},
      [pa, column = std::move(column)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        Tensor& ga = gr.grad_buffer(pa);
        for (std::size_t i = 0; i < column.size(); ++i) ga(i, column[i]) += go[i];
      },
      "select_per_row");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t pa = a.id;
  return g.record(
      Tensor::scalar(s), {pa},
      [pa](Graph& gr, std::size_t self) {
        const double go = gr.out_grad(self)[0];
        Tensor& ga = gr.grad_buffer(pa);
        for (auto& x : ga.values()) x += go;
      },
      "sum");
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

/// Inverted dropout. rate 0 returns the input unchanged (no node recorded).
template <class Rng>
Var dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Tensor mask({a.rows(), a.cols()}, 0.0);
  for (auto& m : mask.values()) m = keep(rng) ? s : 0.0;
  Graph& g = *a.graph;
  Var mv = g.constant(std::move(mask));
  return hadamard(a, mv);
}

}  // namespace sgz
