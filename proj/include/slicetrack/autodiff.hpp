#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

#include "slicetrack/tensor.hpp"

namespace slicetrack::ad {

// Reverse-mode tape. Nodes are created in topological order (creation
// sequence), so the backward pass is a simple sort by descending sequence.
// Each batch element builds its own graph, which makes elements safe to run
// on separate threads.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily
  bool requires_grad = false;
  std::int64_t seq = 0;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  double scalar() const { return val.data[0]; }
};

namespace detail {
inline thread_local std::int64_t g_seq = 0;
inline thread_local bool g_no_grad = false;
}  // namespace detail

// Disables tape recording within a scope (inference mode).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::g_no_grad) { detail::g_no_grad = true; }
  ~NoGradGuard() { detail::g_no_grad = prev; }
};

inline bool grad_enabled() { return !detail::g_no_grad; }

inline NodePtr make_node(Tensor val) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->seq = ++detail::g_seq;
  return n;
}

inline NodePtr leaf(Tensor val, bool requires_grad = false) {
  auto n = make_node(std::move(val));
  n->requires_grad = requires_grad && grad_enabled();
  return n;
}

inline NodePtr constant(double v) { return leaf(Tensor::scalar(v)); }

inline void ensure_grad(Node& n) {
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.val.shape);
}

namespace detail {

inline bool any_requires(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

inline NodePtr record(Tensor val, std::vector<NodePtr> parents,
                      std::function<void(Node&)> backward_fn) {
  auto n = make_node(std::move(val));
  if (!g_no_grad && any_requires(parents)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

}  // namespace detail

inline void backward(const NodePtr& root) {
  if (root->val.numel() != 1) throw NumericError("backward: root must be a scalar");
  if (!root->requires_grad) return;
  // Collect the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  ensure_grad(*root);
  root->grad.data[0] = 1.0;
  for (Node* n : order) {
    if (!n->backward_fn) continue;
    ensure_grad(*n);  // a consumer may have skipped this node entirely
    n->backward_fn(*n);
  }
}

// ---- elementwise / bias ops -------------------------------------------------

inline void check_same(const NodePtr& a, const NodePtr& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw NumericError(std::string(op) + ": shape mismatch " + a->val.shape_str() + " vs " +
                       b->val.shape_str());
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "add");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b->val.data[i];
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i];
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (std::size_t i = 0; i < n.grad.numel(); ++i) b->grad.data[i] += n.grad.data[i];
    }
  });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "sub");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b->val.data[i];
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i];
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (std::size_t i = 0; i < n.grad.numel(); ++i) b->grad.data[i] -= n.grad.data[i];
    }
  });
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "mul");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b->val.data[i];
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        a->grad.data[i] += n.grad.data[i] * b->val.data[i];
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        b->grad.data[i] += n.grad.data[i] * a->val.data[i];
    }
  });
}

inline NodePtr div(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "div");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= b->val.data[i];
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        a->grad.data[i] += n.grad.data[i] / b->val.data[i];
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (std::size_t i = 0; i < n.grad.numel(); ++i) {
        const double bv = b->val.data[i];
        b->grad.data[i] -= n.grad.data[i] * a->val.data[i] / (bv * bv);
      }
    }
  });
}

inline NodePtr scale(const NodePtr& a, double s) {
  Tensor out = a->val;
  for (double& x : out.data) x *= s;
  return detail::record(std::move(out), {a}, [a, s](Node& n) {
    ensure_grad(*a);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += s * n.grad.data[i];
  });
}

inline NodePtr add_scalar(const NodePtr& a, double s) {
  Tensor out = a->val;
  for (double& x : out.data) x += s;
  return detail::record(std::move(out), {a}, [a](Node& n) {
    ensure_grad(*a);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i];
  });
}

inline NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

// a[m,n] + b[n] broadcast over rows
inline NodePtr add_bias(const NodePtr& a, const NodePtr& b) {
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out = a->val;
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.at(r, c) += b->val.data[c];
  return detail::record(std::move(out), {a, b}, [a, b, m, n](Node& nd) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (std::size_t i = 0; i < nd.grad.numel(); ++i) a->grad.data[i] += nd.grad.data[i];
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) b->grad.data[c] += nd.grad.at(r, c);
    }
  });
}

// a[m,n] * v[n] broadcast over rows
inline NodePtr mul_cols(const NodePtr& a, const NodePtr& v) {
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out = a->val;
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.at(r, c) *= v->val.data[c];
  return detail::record(std::move(out), {a, v}, [a, v, m, n](Node& nd) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) a->grad.at(r, c) += nd.grad.at(r, c) * v->val.data[c];
    }
    if (v->requires_grad) {
      ensure_grad(*v);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) v->grad.data[c] += nd.grad.at(r, c) * a->val.at(r, c);
    }
  });
}

// a[m,n] * v[m] broadcast over columns (per-row scaling)
inline NodePtr mul_rows(const NodePtr& a, const NodePtr& v) {
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out = a->val;
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.at(r, c) *= v->val.data[r];
  return detail::record(std::move(out), {a, v}, [a, v, m, n](Node& nd) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) a->grad.at(r, c) += nd.grad.at(r, c) * v->val.data[r];
    }
    if (v->requires_grad) {
      ensure_grad(*v);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) v->grad.data[r] += nd.grad.at(r, c) * a->val.at(r, c);
    }
  });
}

// ---- unary functions --------------------------------------------------------

namespace detail {
template <class F, class DF>
inline NodePtr unary(const NodePtr& a, F f, DF df) {
  Tensor out = a->val;
  for (double& x : out.data) x = f(x);
  return record(std::move(out), {a}, [a, df](Node& n) {
    ensure_grad(*a);
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad.data[i] += n.grad.data[i] * df(a->val.data[i], n.val.data[i]);
  });
}
}  // namespace detail

inline NodePtr sigmoid(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

// tanh-form GELU; smooth activation keeps finite-difference checks clean
inline NodePtr gelu(const NodePtr& a) {
  constexpr double c = 0.7978845608028653963;  // sqrt(2/pi)
  return detail::unary(
      a,
      [](double x) {
        const double t = std::tanh(c * (x + 0.044715 * x * x * x));
        return 0.5 * x * (1.0 + t);
      },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

inline NodePtr relu(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline NodePtr log(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline NodePtr abs(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

inline NodePtr sin(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

inline NodePtr cos(const NodePtr& a) {
  return detail::unary(
      a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

inline NodePtr pow_const(const NodePtr& a, double p) {
  return detail::unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

inline NodePtr clamp(const NodePtr& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline NodePtr inverse_sigmoid(const NodePtr& a, double eps = 1e-6) {
  return detail::unary(
      a,
      [eps](double x) {
        const double c = std::clamp(x, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](double x, double) {
        if (x <= eps || x >= 1.0 - eps) return 0.0;
        return 1.0 / (x * (1.0 - x));
      });
}

inline NodePtr min_elt(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "min_elt");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::min(out.data[i], b->val.data[i]);
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      const bool pick_a = a->val.data[i] <= b->val.data[i];
      if (pick_a && a->requires_grad) {
        ensure_grad(*a);
        a->grad.data[i] += n.grad.data[i];
      } else if (!pick_a && b->requires_grad) {
        ensure_grad(*b);
        b->grad.data[i] += n.grad.data[i];
      }
    }
  });
}

inline NodePtr max_elt(const NodePtr& a, const NodePtr& b) {
  check_same(a, b, "max_elt");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::max(out.data[i], b->val.data[i]);
  return detail::record(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      const bool pick_a = a->val.data[i] >= b->val.data[i];
      if (pick_a && a->requires_grad) {
        ensure_grad(*a);
        a->grad.data[i] += n.grad.data[i];
      } else if (!pick_a && b->requires_grad) {
        ensure_grad(*b);
        b->grad.data[i] += n.grad.data[i];
      }
    }
  });
}

// ---- matrix ops -------------------------------------------------------------

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  if (b->val.dim(0) != k) throw NumericError("matmul: inner dimension mismatch");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &a->val.data[static_cast<std::size_t>(i) * k];
    double* crow = &out.data[static_cast<std::size_t>(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = &b->val.data[static_cast<std::size_t>(kk) * n];
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return detail::record(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
    if (a->requires_grad) {
      ensure_grad(*a);
      // dA = dC @ B^T
      for (int i = 0; i < m; ++i) {
        const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
        double* garow = &a->grad.data[static_cast<std::size_t>(i) * k];
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = &b->val.data[static_cast<std::size_t>(kk) * n];
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          garow[kk] += acc;
        }
      }
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      // dB = A^T @ dC
      for (int i = 0; i < m; ++i) {
        const double* arow = &a->val.data[static_cast<std::size_t>(i) * k];
        const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
        for (int kk = 0; kk < k; ++kk) {
          const double av = arow[kk];
          if (av == 0.0) continue;
          double* gbrow = &b->grad.data[static_cast<std::size_t>(kk) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

// a[m,k] @ b[n,k]^T -> [m,n]
inline NodePtr matmul_nt(const NodePtr& a, const NodePtr& b) {
  const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(0);
  if (b->val.dim(1) != k) throw NumericError("matmul_nt: inner dimension mismatch");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &a->val.data[static_cast<std::size_t>(i) * k];
    double* crow = &out.data[static_cast<std::size_t>(i) * n];
    for (int j = 0; j < n; ++j) {
      const double* brow = &b->val.data[static_cast<std::size_t>(j) * k];
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
  return detail::record(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
    if (a->requires_grad) {
      ensure_grad(*a);
      for (int i = 0; i < m; ++i) {
        const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
        double* garow = &a->grad.data[static_cast<std::size_t>(i) * k];
        for (int j = 0; j < n; ++j) {
          const double g = grow[j];
          if (g == 0.0) continue;
          const double* brow = &b->val.data[static_cast<std::size_t>(j) * k];
          for (int kk = 0; kk < k; ++kk) garow[kk] += g * brow[kk];
        }
      }
    }
    if (b->requires_grad) {
      ensure_grad(*b);
      for (int i = 0; i < m; ++i) {
        const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
        const double* arow = &a->val.data[static_cast<std::size_t>(i) * k];
        for (int j = 0; j < n; ++j) {
          const double g = grow[j];
          if (g == 0.0) continue;
          double* gbrow = &b->grad.data[static_cast<std::size_t>(j) * k];
          for (int kk = 0; kk < k; ++kk) gbrow[kk] += g * arow[kk];
        }
      }
    }
  });
}

inline NodePtr transpose(const NodePtr& a) {
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a->val.at(i, j);
  return detail::record(std::move(out), {a}, [a, m, n](Node& nd) {
    ensure_grad(*a);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a->grad.at(i, j) += nd.grad.at(j, i);
  });
}

inline NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a->val.numel()) throw NumericError("reshape: element count mismatch");
  Tensor out(std::move(shape), a->val.data);
  return detail::record(std::move(out), {a}, [a](Node& nd) {
    ensure_grad(*a);
    for (std::size_t i = 0; i < nd.grad.numel(); ++i) a->grad.data[i] += nd.grad.data[i];
  });
}

// ---- structural ops ---------------------------------------------------------

inline NodePtr slice_rows(const NodePtr& a, int r0, int r1) {
  const int n = a->val.dim(1);
  Tensor out({r1 - r0, n});
  std::copy(a->val.data.begin() + static_cast<std::ptrdiff_t>(r0) * n,
            a->val.data.begin() + static_cast<std::ptrdiff_t>(r1) * n, out.data.begin());
  return detail::record(std::move(out), {a}, [a, r0, n](Node& nd) {
    ensure_grad(*a);
    const std::size_t base = static_cast<std::size_t>(r0) * n;
    for (std::size_t i = 0; i < nd.grad.numel(); ++i) a->grad.data[base + i] += nd.grad.data[i];
  });
}

inline NodePtr slice_cols(const NodePtr& a, int c0, int c1) {
  const int m = a->val.dim(0), w = c1 - c0;
  Tensor out({m, w});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < w; ++c) out.at(r, c) = a->val.at(r, c0 + c);
  return detail::record(std::move(out), {a}, [a, c0, w, m](Node& nd) {
    ensure_grad(*a);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < w; ++c) a->grad.at(r, c0 + c) += nd.grad.at(r, c);
  });
}

inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw NumericError("concat_rows: empty input");
  const int n = parts[0]->val.dim(1);
  int m = 0;
  for (const auto& p : parts) {
    if (p->val.dim(1) != n) throw NumericError("concat_rows: column mismatch");
    m += p->val.dim(0);
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.data.begin(), p->val.data.end(), out.data.begin() + off);
    off += p->val.numel();
  }
  return detail::record(std::move(out), parts, [parts](Node& nd) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) {
        ensure_grad(*p);
        for (std::size_t i = 0; i < p->val.numel(); ++i) p->grad.data[i] += nd.grad.data[off + i];
      }
      off += p->val.numel();
    }
  });
}

inline NodePtr concat_cols(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw NumericError("concat_cols: empty input");
  const int m = parts[0]->val.dim(0);
  int n = 0;
  for (const auto& p : parts) {
    if (p->val.dim(0) != m) throw NumericError("concat_cols: row mismatch");
    n += p->val.dim(1);
  }
  Tensor out({m, n});
  int c_off = 0;
  for (const auto& p : parts) {
    const int w = p->val.dim(1);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < w; ++c) out.at(r, c_off + c) = p->val.at(r, c);
    c_off += w;
  }
  return detail::record(std::move(out), parts, [parts, m](Node& nd) {
    int c_off = 0;
    for (const auto& p : parts) {
      const int w = p->val.dim(1);
      if (p->requires_grad) {
        ensure_grad(*p);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < w; ++c) p->grad.at(r, c) += nd.grad.at(r, c_off + c);
      }
      c_off += w;
    }
  });
}

inline NodePtr gather_rows(const NodePtr& a, std::vector<int> idx) {
  const int n = a->val.dim(1);
  Tensor out({static_cast<int>(idx.size()), n});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < n; ++c) out.at(static_cast<int>(r), c) = a->val.at(idx[r], c);
  return detail::record(std::move(out), {a}, [a, idx = std::move(idx), n](Node& nd) {
    ensure_grad(*a);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < n; ++c) a->grad.at(idx[r], c) += nd.grad.at(static_cast<int>(r), c);
  });
}

// ---- reductions -------------------------------------------------------------

inline NodePtr sum(const NodePtr& a) {
  double s = 0.0;
  for (double x : a->val.data) s += x;
  return detail::record(Tensor::scalar(s), {a}, [a](Node& nd) {
    ensure_grad(*a);
    const double g = nd.grad.data[0];
    for (double& gx : a->grad.data) gx += g;
  });
}

inline NodePtr mean(const NodePtr& a) {
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  return scale(sum(a), inv);
}

// Standardizes the whole tensor to zero mean and unit variance; used to bring
// raw raster intensities onto the residual-stream scale. Fully differentiable
// (the mean and variance are part of the graph).
inline NodePtr standardize(const NodePtr& a, double eps = 1e-6) {
  const std::size_t n = a->val.numel();
  double mu = 0.0;
  for (double x : a->val.data) mu += x;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double x : a->val.data) var += (x - mu) * (x - mu);
  var /= static_cast<double>(n);
  const double inv_sd = 1.0 / std::sqrt(var + eps);
  Tensor out = a->val;
  for (double& x : out.data) x = (x - mu) * inv_sd;
  return detail::record(std::move(out), {a}, [a, inv_sd, n](Node& nd) {
    ensure_grad(*a);
    double g_mean = 0.0, gz_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      g_mean += nd.grad.data[i];
      gz_mean += nd.grad.data[i] * nd.val.data[i];
    }
    g_mean /= static_cast<double>(n);
    gz_mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      a->grad.data[i] += inv_sd * (nd.grad.data[i] - g_mean - nd.val.data[i] * gz_mean);
  });
}

// ---- softmax / layernorm ----------------------------------------------------

// Row-wise softmax over visible entries; blocked[i*n+j] != 0 hides key j from
// query i. Blocked entries get exactly zero weight. Fully-blocked rows yield
// an all-zero row.
inline NodePtr masked_softmax_rows(const NodePtr& scores, std::vector<std::uint8_t> blocked) {
  const int m = scores->val.dim(0), n = scores->val.dim(1);
  if (!blocked.empty() && blocked.size() != static_cast<std::size_t>(m) * n)
    throw NumericError("masked_softmax_rows: mask size mismatch");
  Tensor out({m, n});
  auto is_blocked = [&](int r, int c) {
    return !blocked.empty() && blocked[static_cast<std::size_t>(r) * n + c] != 0;
  };
  for (int r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n; ++c)
      if (!is_blocked(r, c)) mx = std::max(mx, scores->val.at(r, c));
    if (!std::isfinite(mx)) continue;  // fully blocked row -> zeros
    double denom = 0.0;
    for (int c = 0; c < n; ++c) {
      if (is_blocked(r, c)) continue;
      const double e = std::exp(scores->val.at(r, c) - mx);
      out.at(r, c) = e;
      denom += e;
    }
    for (int c = 0; c < n; ++c)
      if (!is_blocked(r, c)) out.at(r, c) /= denom;
  }
  return detail::record(std::move(out), {scores},
                        [scores, blocked = std::move(blocked), m, n](Node& nd) {
    ensure_grad(*scores);
    auto is_blocked = [&](int r, int c) {
      return !blocked.empty() && blocked[static_cast<std::size_t>(r) * n + c] != 0;
    };
    for (int r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int c = 0; c < n; ++c)
        if (!is_blocked(r, c)) dot += nd.grad.at(r, c) * nd.val.at(r, c);
      for (int c = 0; c < n; ++c) {
        if (is_blocked(r, c)) continue;
        scores->grad.at(r, c) += nd.val.at(r, c) * (nd.grad.at(r, c) - dot);
      }
    }
  });
}

inline NodePtr layernorm_rows(const NodePtr& a, const NodePtr& gain, const NodePtr& bias,
                              double eps = 1e-5) {
  const int m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({m, n});
  std::vector<double> mu(m), inv_sd(m);
  for (int r = 0; r < m; ++r) {
    double s = 0.0;
    for (int c = 0; c < n; ++c) s += a->val.at(r, c);
    mu[r] = s / n;
    double v = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = a->val.at(r, c) - mu[r];
      v += d * d;
    }
    inv_sd[r] = 1.0 / std::sqrt(v / n + eps);
    for (int c = 0; c < n; ++c)
      out.at(r, c) = (a->val.at(r, c) - mu[r]) * inv_sd[r] * gain->val.data[c] + bias->val.data[c];
  }
  return detail::record(
      std::move(out), {a, gain, bias},
      [a, gain, bias, mu = std::move(mu), inv_sd = std::move(inv_sd), m, n](Node& nd) {
        for (int r = 0; r < m; ++r) {
          // xhat_c = (x_c - mu) * inv_sd
          double g_dot_xhat = 0.0, g_sum = 0.0;
          for (int c = 0; c < n; ++c) {
            const double xhat = (a->val.at(r, c) - mu[r]) * inv_sd[r];
            const double gl = nd.grad.at(r, c) * gain->val.data[c];
            g_dot_xhat += gl * xhat;
            g_sum += gl;
          }
          if (a->requires_grad) {
            ensure_grad(*a);
            for (int c = 0; c < n; ++c) {
              const double xhat = (a->val.at(r, c) - mu[r]) * inv_sd[r];
              const double gl = nd.grad.at(r, c) * gain->val.data[c];
              a->grad.at(r, c) += inv_sd[r] * (gl - g_sum / n - xhat * g_dot_xhat / n);
            }
          }
          if (gain->requires_grad) {
            ensure_grad(*gain);
            for (int c = 0; c < n; ++c) {
              const double xhat = (a->val.at(r, c) - mu[r]) * inv_sd[r];
              gain->grad.data[c] += nd.grad.at(r, c) * xhat;
            }
          }
          if (bias->requires_grad) {
            ensure_grad(*bias);
            for (int c = 0; c < n; ++c) bias->grad.data[c] += nd.grad.at(r, c);
          }
        }
      });
}

// ---- convolution as gather (im2col) -----------------------------------------

// x[C,H,W] -> patches[(H'*W'), C*kh*kw]; out-of-bounds taps read zero.
inline NodePtr im2col(const NodePtr& x, int kh, int kw, int stride, int pad) {
  const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int cols = C * kh * kw;
  std::vector<std::int64_t> src(static_cast<std::size_t>(Ho) * Wo * cols, -1);
  Tensor out({Ho * Wo, cols});
  std::size_t p = 0;
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx, ++p) {
            const int iy = oy * stride - pad + ky;
            const int ix = ox * stride - pad + kx;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            const std::int64_t s =
                (static_cast<std::int64_t>(c) * H + iy) * W + ix;
            src[p] = s;
            out.data[p] = x->val.data[static_cast<std::size_t>(s)];
          }
        }
      }
    }
  }
  return detail::record(std::move(out), {x}, [x, src = std::move(src)](Node& nd) {
    ensure_grad(*x);
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] >= 0) x->grad.data[static_cast<std::size_t>(src[i])] += nd.grad.data[i];
  });
}

}  // namespace slicetrack::ad
