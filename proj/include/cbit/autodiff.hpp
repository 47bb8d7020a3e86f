#pragma once

// Tape-based reverse-mode automatic differentiation over dense Tensors.
//
// A Graph records every primitive in execution order, so the node list is
// already topologically sorted and backward() is a single reverse sweep.
// Values are immutable once recorded. Parameters enter the tape as borrowed
// leaves (no copy); their gradients are read back with Graph::grad().

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cbit/error.hpp"
#include "cbit/random.hpp"
#include "cbit/tensor.hpp"

namespace cbit {

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

namespace kernel {

// C (m x n) = A (m x k) * B (k x n), with either operand optionally stored
// transposed. Accumulates into C when `accumulate` is set.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        if (aip == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] += s;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double api = ap[i];
        if (api == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
  }
}

}  // namespace kernel

class Graph {
 public:
  // Called during the reverse sweep with the id of the node being processed.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    std::string op;
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return leaf("constant", std::move(t), false); }
  Var variable(Tensor t) { return leaf("variable", std::move(t), true); }

  // Borrowed leaf. `t` must outlive the graph and stay unmodified until
  // backward() has run.
  Var param(const Tensor& t) {
    check_finite("param", t);
    Node n;
    n.op = "param";
    n.external = &t;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Appends a primitive. Any op, including ones defined outside this header,
  // goes through here.
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    check_finite(op, value);
    Node n;
    n.op = std::move(op);
    n.owned = std::move(value);
    for (const Var& v : inputs) {
      if (v.graph != this) throw UsageError("operand of '" + n.op + "' belongs to another graph");
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer for accumulation inside backward functions; created as
  // zeros on first access.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros(value(id).shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Upstream gradient of the node currently being processed.
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  // Gradient of `v` after backward(); nullptr if nothing flowed into it.
  const Tensor* grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.has_grad ? &n.grad : nullptr;
  }

  // Gradient of `v`, or zeros of its shape if nothing flowed into it.
  Tensor grad_or_zeros(Var v) const {
    const Tensor* g = grad(v);
    return g ? *g : Tensor::zeros(value(v.id).shape);
  }

  // Total gradient reaching a borrowed parameter, summed over every param()
  // leaf that refers to it.
  Tensor param_grad(const Tensor& t) const {
    Tensor total = Tensor::zeros(t.shape);
    for (const Node& n : nodes_)
      if (n.external == &t && n.has_grad)
        for (std::size_t i = 0; i < total.size(); ++i) total.data[i] += n.grad.data[i];
    return total;
  }

  void backward(Var loss) {
    if (loss.graph != this) throw UsageError("backward() on a foreign node");
    if (value(loss.id).size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_str(value(loss.id).shape));
    }
    grad_buffer(loss.id).data[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  Var leaf(const char* op, Tensor t, bool requires_grad) {
    check_finite(op, t);
    t.requires_grad = requires_grad;
    Node n;
    n.op = op;
    n.owned = std::move(t);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  static void check_finite(const std::string& op, const Tensor& t) {
    if (!t.all_finite()) throw NumericError("non-finite value produced by '" + op + "'");
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) throw UsageError("operands from different graphs");
  return *a.graph;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

// Adds `g * scale` into the gradient buffer of `id` if it needs one.
inline void accumulate(Graph& g, std::size_t id, const Tensor& grad, double scale = 1.0) {
  if (!g.needs_grad(id)) return;
  Tensor& buf = g.grad_buffer(id);
  for (std::size_t i = 0; i < buf.size(); ++i) buf.data[i] += scale * grad.data[i];
}

}  // namespace detail

// a (p x q) * b (q x r), or a * b^T when `transpose_b` (b is r x q).
inline Var matmul(Var a, Var b, bool transpose_b = false) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) throw DimensionError("matmul: operands must be rank 2");
  const std::size_t p = A.dim(0), q = A.dim(1);
  const std::size_t bq = transpose_b ? B.dim(1) : B.dim(0);
  const std::size_t r = transpose_b ? B.dim(0) : B.dim(1);
  if (q != bq) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(A.shape) + " * " +
                         shape_str(B.shape) + (transpose_b ? "^T" : ""));
  }
  Tensor out({p, r});
  kernel::gemm(A.data.data(), B.data.data(), out.data.data(), p, q, r, false, transpose_b, false);
  return g.record("matmul", std::move(out), {a, b},
                  [ai = a.id, bi = b.id, p, q, r, transpose_b](Graph& gr, std::size_t self) {
                    const Tensor& up = gr.upstream(self);
                    const Tensor& A = gr.value(ai);
                    const Tensor& B = gr.value(bi);
                    if (gr.needs_grad(ai)) {
                      // dA = dC * op(B)^T
                      kernel::gemm(up.data.data(), B.data.data(), gr.grad_buffer(ai).data.data(),
                                   p, r, q, false, !transpose_b, true);
                    }
                    if (gr.needs_grad(bi)) {
                      if (transpose_b)  // dB = dC^T * A
                        kernel::gemm(up.data.data(), A.data.data(),
                                     gr.grad_buffer(bi).data.data(), r, p, q, true, false, true);
                      else  // dB = A^T * dC
                        kernel::gemm(A.data.data(), up.data.data(),
                                     gr.grad_buffer(bi).data.data(), q, p, r, true, false, true);
                    }
                  });
}

// Batched matmul over rank-3 operands: out[i] = a[i] * b[i] (or b[i]^T).
inline Var bmm(Var a, Var b, bool transpose_b = false) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0))
    throw DimensionError("bmm: operands must be rank 3 with equal batch, got " +
                         shape_str(A.shape) + " and " + shape_str(B.shape));
  const std::size_t batch = A.dim(0), p = A.dim(1), q = A.dim(2);
  const std::size_t bq = transpose_b ? B.dim(2) : B.dim(1);
  const std::size_t r = transpose_b ? B.dim(1) : B.dim(2);
  if (q != bq) throw DimensionError("bmm: inner dimensions disagree");
  Tensor out({batch, p, r});
  for (std::size_t i = 0; i < batch; ++i)
    kernel::gemm(A.data.data() + i * p * q, B.data.data() + i * q * r,
                 out.data.data() + i * p * r, p, q, r, false, transpose_b, false);
  return g.record(
      "bmm", std::move(out), {a, b},
      [ai = a.id, bi = b.id, batch, p, q, r, transpose_b](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        const Tensor& A = gr.value(ai);
        const Tensor& B = gr.value(bi);
        for (std::size_t i = 0; i < batch; ++i) {
          const double* dc = up.data.data() + i * p * r;
          const double* a_i = A.data.data() + i * p * q;
          const double* b_i = B.data.data() + i * q * r;
          if (gr.needs_grad(ai))
            kernel::gemm(dc, b_i, gr.grad_buffer(ai).data.data() + i * p * q, p, r, q, false,
                         !transpose_b, true);
          if (gr.needs_grad(bi)) {
            double* db = gr.grad_buffer(bi).data.data() + i * q * r;
            if (transpose_b)
              kernel::gemm(dc, a_i, db, r, p, q, true, false, true);
            else
              kernel::gemm(a_i, dc, db, q, p, r, true, false, true);
          }
        }
      });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return g.record("add", std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& gr, std::size_t s) {
    detail::accumulate(gr, ai, gr.upstream(s));
    detail::accumulate(gr, bi, gr.upstream(s));
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return g.record("mul", std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& gr, std::size_t s) {
    const Tensor& up = gr.upstream(s);
    if (gr.needs_grad(ai)) {
      Tensor& ga = gr.grad_buffer(ai);
      const Tensor& B = gr.value(bi);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += up.data[i] * B.data[i];
    }
    if (gr.needs_grad(bi)) {
      Tensor& gb = gr.grad_buffer(bi);
      const Tensor& A = gr.value(ai);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += up.data[i] * A.data[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data) v *= factor;
  return a.graph->record("scale", std::move(out), {a}, [ai = a.id, factor](Graph& gr, std::size_t s) {
    detail::accumulate(gr, ai, gr.upstream(s), factor);
  });
}

// x (.. x d) + bias (d), broadcast over rows.
inline Var add_row(Var x, Var bias) {
  Graph& g = detail::same_graph(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (b.size() != X.cols())
    throw DimensionError("add_row: bias " + shape_str(b.shape) + " vs rows of " + shape_str(X.shape));
  Tensor out = X;
  const std::size_t d = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] += b.data[c];
  return g.record("add_row", std::move(out), {x, bias},
                  [xi = x.id, bi = bias.id, d](Graph& gr, std::size_t s) {
                    const Tensor& up = gr.upstream(s);
                    detail::accumulate(gr, xi, up);
                    if (gr.needs_grad(bi)) {
                      Tensor& gb = gr.grad_buffer(bi);
                      for (std::size_t i = 0; i < up.size(); ++i) gb.data[i % d] += up.data[i];
                    }
                  });
}

inline Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), x.value().data);
  return x.graph->record("reshape", std::move(out), {x}, [xi = x.id](Graph& gr, std::size_t s) {
    detail::accumulate(gr, xi, gr.upstream(s));
  });
}

// Concatenates rank-2 operands with equal row counts along the columns.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no operands");
  Graph& g = *parts.front().graph;
  const std::size_t rows = parts.front().value().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    if (p.graph != &g) throw UsageError("concat_cols: operands from different graphs");
    if (p.value().rank() != 2 || p.value().dim(0) != rows)
      throw DimensionError("concat_cols: row counts disagree");
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(P.data.data() + r * widths[k], widths[k], out.data.data() + r * total + offset);
    offset += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return g.record("concat_cols", std::move(out), parts,
                  [ids, widths, rows, total](Graph& gr, std::size_t s) {
                    const Tensor& up = gr.upstream(s);
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (gr.needs_grad(ids[k])) {
                        Tensor& gk = gr.grad_buffer(ids[k]);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[k]; ++c)
                            gk.data[r * widths[k] + c] += up.data[r * total + offset + c];
                      }
                      offset += widths[k];
                    }
                  });
}

// Row lookup: out[i] = table[ids[i]]. Repeated ids accumulate in backward.
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& W = table.value();
  if (W.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const std::size_t n = W.dim(0), d = W.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n)
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                       std::to_string(n) + " rows");
    std::copy_n(W.data.data() + ids[i] * d, d, out.data.data() + i * d);
  }
  return table.graph->record("gather_rows", std::move(out), {table},
                             [ti = table.id, ids = std::move(ids), d](Graph& gr, std::size_t s) {
                               if (!gr.needs_grad(ti)) return;
                               const Tensor& up = gr.upstream(s);
                               Tensor& gt = gr.grad_buffer(ti);
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t c = 0; c < d; ++c)
                                   gt.data[ids[i] * d + c] += up.data[i * d + c];
                             });
}

// Row-wise softmax of `scale * x` over the last axis, stabilized by max
// subtraction. `key_mask`, when non-empty, marks usable columns (nonzero =
// keep) per group of rows: its size must be a multiple g of the row length,
// and the rows are split into g consecutive equal groups. Masked columns get
// probability exactly 0.
inline Var softmax_rows(Var x, double scale = 1.0, std::span<const unsigned char> key_mask = {}) {
  const Tensor& X = x.value();
  if (!(scale > 0.0)) throw ConfigError("softmax_rows: scale must be positive");
  const std::size_t n = X.cols(), rows = X.rows();
  if (n == 0) throw DimensionError("softmax_rows: empty rows");
  std::size_t groups = 1;
  if (!key_mask.empty()) {
    if (key_mask.size() % n != 0 || rows % (key_mask.size() / n) != 0)
      throw DimensionError("softmax_rows: key mask size does not match input");
    groups = key_mask.size() / n;
  }
  const std::size_t rows_per_group = rows / groups;
  Tensor out(X.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const unsigned char* mask = key_mask.empty() ? nullptr : key_mask.data() + (r / rows_per_group) * n;
    const double* in = X.data.data() + r * n;
    double* o = out.data.data() + r * n;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < n; ++c)
      if (!mask || mask[c]) mx = std::max(mx, scale * in[c]);
    if (mx == -INFINITY) throw NumericError("softmax_rows: every column of a row is masked");
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = (!mask || mask[c]) ? std::exp(scale * in[c] - mx) : 0.0;
      sum += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= sum;
  }
  return x.graph->record("softmax_rows", std::move(out), {x},
                         [xi = x.id, scale, n, rows](Graph& gr, std::size_t s) {
                           if (!gr.needs_grad(xi)) return;
                           const Tensor& up = gr.upstream(s);
                           const Tensor& y = gr.value(s);
                           Tensor& gx = gr.grad_buffer(xi);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = y.data.data() + r * n;
                             const double* ur = up.data.data() + r * n;
                             double dot = 0.0;
                             for (std::size_t c = 0; c < n; ++c) dot += yr[c] * ur[c];
                             for (std::size_t c = 0; c < n; ++c)
                               gx.data[r * n + c] += scale * yr[c] * (ur[c] - dot);
                           }
                         });
}

// Normalizes each row over the last axis to zero mean and unit variance
// (biased variance, eps inside the square root), then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  Graph& g = detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const Tensor& X = x.value();
  const std::size_t d = X.cols(), rows = X.rows();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: gain/bias size does not match last axis " + std::to_string(d));
  Tensor out(X.shape);
  Tensor xhat(X.shape);
  std::vector<double> inv_std(rows);
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.data[r * d + c] = (in[c] - mean) * inv_std[r];
      out.data[r * d + c] = G.data[c] * xhat.data[r * d + c] + B.data[c];
    }
  }
  return g.record(
      "layer_norm", std::move(out), {x, gain, bias},
      [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std),
       d, rows](Graph& gr, std::size_t s) {
        const Tensor& up = gr.upstream(s);
        const Tensor& G = gr.value(gi);
        if (gr.needs_grad(gi) || gr.needs_grad(bi)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              const double u = up.data[r * d + c];
              if (gr.needs_grad(gi)) gr.grad_buffer(gi).data[c] += u * xhat.data[r * d + c];
              if (gr.needs_grad(bi)) gr.grad_buffer(bi).data[c] += u;
            }
        }
        if (!gr.needs_grad(xi)) return;
        Tensor& gx = gr.grad_buffer(xi);
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = up.data[r * d + c] * G.data[c];
            sum_g += gh;
            sum_gx += gh * xhat.data[r * d + c];
          }
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = up.data[r * d + c] * G.data[c];
            gx.data[r * d + c] +=
                inv_std[r] * (gh - sum_g / dd - xhat.data[r * d + c] * sum_gx / dd);
          }
        }
      });
}

// Exact GeLU: x * Phi(x) with Phi the standard normal CDF via erf.
inline Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return x.graph->record("gelu", std::move(out), {x}, [xi = x.id](Graph& gr, std::size_t s) {
    if (!gr.needs_grad(xi)) return;
    const Tensor& up = gr.upstream(s);
    const Tensor& X = gr.value(xi);
    Tensor& gx = gr.grad_buffer(xi);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx.data[i] += up.data[i] * (cdf + v * pdf);
    }
  });
}

// Inverted dropout: zeroes each element with probability `ratio` and scales
// survivors by 1/(1-ratio). Identity when not training or ratio == 0; in that
// case no random numbers are drawn.
inline Var dropout(Var x, double ratio, Rng& rng, bool training) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ConfigError("dropout ratio must lie in [0, 1), got " + std::to_string(ratio));
  if (!training || ratio == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - ratio);
  std::vector<double> mask(x.value().size());
  for (double& m : mask) m = rng.bernoulli(ratio) ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask[i];
  return x.graph->record("dropout", std::move(out), {x},
                         [xi = x.id, mask = std::move(mask)](Graph& gr, std::size_t s) {
                           if (!gr.needs_grad(xi)) return;
                           const Tensor& up = gr.upstream(s);
                           Tensor& gx = gr.grad_buffer(xi);
                           for (std::size_t i = 0; i < mask.size(); ++i)
                             gx.data[i] += up.data[i] * mask[i];
                         });
}

// log(sigmoid(x)), computed without overflow for either sign.
inline Var log_sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.data) v = v >= 0.0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  return x.graph->record("log_sigmoid", std::move(out), {x}, [xi = x.id](Graph& gr, std::size_t s) {
    if (!gr.needs_grad(xi)) return;
    const Tensor& up = gr.upstream(s);
    const Tensor& X = gr.value(xi);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X.data[i];
      // d/dx log sigmoid(x) = sigmoid(-x)
      const double sig_neg = v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      gx.data[i] += up.data[i] * sig_neg;
    }
  });
}

inline Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data) total += v;
  return x.graph->record("sum", Tensor::scalar(total), {x}, [xi = x.id](Graph& gr, std::size_t s) {
    if (!gr.needs_grad(xi)) return;
    const double u = gr.upstream(s).data[0];
    for (double& g : gr.grad_buffer(xi).data) g += u;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// Per-row dot product of two equally shaped tensors: out[r] = <a[r], b[r]>.
inline Var rowwise_dot(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("rowwise_dot", a.value(), b.value());
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t rows = A.rows(), d = A.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += A.data[r * d + c] * B.data[r * d + c];
    out.data[r] = s;
  }
  return g.record("rowwise_dot", std::move(out), {a, b},
                  [ai = a.id, bi = b.id, rows, d](Graph& gr, std::size_t s) {
                    const Tensor& up = gr.upstream(s);
                    const Tensor& A = gr.value(ai);
                    const Tensor& B = gr.value(bi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < d; ++c) {
                        if (gr.needs_grad(ai)) gr.grad_buffer(ai).data[r * d + c] += up.data[r] * B.data[r * d + c];
                        if (gr.needs_grad(bi)) gr.grad_buffer(bi).data[r * d + c] += up.data[r] * A.data[r * d + c];
                      }
                  });
}

// Scales each row to unit L2 norm. A zero row is a numeric error.
inline Var l2_normalize_rows(Var x) {
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  Tensor out(X.shape);
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += X.data[r * d + c] * X.data[r * d + c];
    norms[r] = std::sqrt(s);
    if (norms[r] == 0.0) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
    for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = X.data[r * d + c] / norms[r];
  }
  return x.graph->record("l2_normalize_rows", std::move(out), {x},
                         [xi = x.id, norms = std::move(norms), rows, d](Graph& gr, std::size_t s) {
                           if (!gr.needs_grad(xi)) return;
                           const Tensor& up = gr.upstream(s);
                           const Tensor& y = gr.value(s);
                           Tensor& gx = gr.grad_buffer(xi);
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < d; ++c) dot += y.data[r * d + c] * up.data[r * d + c];
                             for (std::size_t c = 0; c < d; ++c)
                               gx.data[r * d + c] += (up.data[r * d + c] - y.data[r * d + c] * dot) / norms[r];
                           }
                         });
}

// Cosine similarity of two tensors viewed as flat vectors.
inline Var cosine_sim(Var a, Var b) {
  if (a.value().size() != b.value().size()) throw DimensionError("cosine_sim: sizes differ");
  const std::size_t n = a.value().size();
  Var fa = l2_normalize_rows(reshape(a, {1, n}));
  Var fb = l2_normalize_rows(reshape(b, {1, n}));
  return reshape(rowwise_dot(fa, fb), {1});
}

// Averages consecutive groups of `segment` rows: (k*segment x d) -> (k x d).
inline Var segment_mean(Var x, std::size_t segment) {
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  if (segment == 0 || rows % segment != 0)
    throw DimensionError("segment_mean: rows not divisible by segment length");
  const std::size_t k = rows / segment;
  Tensor out({k, d});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out.data[(r / segment) * d + c] += X.data[r * d + c];
  for (double& v : out.data) v /= static_cast<double>(segment);
  return x.graph->record("segment_mean", std::move(out), {x},
                         [xi = x.id, segment, rows, d](Graph& gr, std::size_t s) {
                           if (!gr.needs_grad(xi)) return;
                           const Tensor& up = gr.upstream(s);
                           Tensor& gx = gr.grad_buffer(xi);
                           const double w = 1.0 / static_cast<double>(segment);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < d; ++c)
                               gx.data[r * d + c] += w * up.data[(r / segment) * d + c];
                         });
}

}  // namespace cbit
