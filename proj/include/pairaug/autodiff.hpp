#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "pairaug/tensor.hpp"

namespace pairaug::nn {

/// Thread-local autograd switch. Sampling and evaluation run with grads
/// disabled, which also lets intermediate tensors free themselves as the
/// graph is never retained.
struct GradMode {
  static bool& flag() {
    thread_local bool enabled = true;
    return enabled;
  }
  static bool enabled() { return flag(); }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<S>::zeros(value.shape);
  }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
Var<S> make_leaf(Tensor<S> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad && GradMode::enabled();
  return n;
}

template <typename S>
Var<S> constant(Tensor<S> value) {
  return make_leaf<S>(std::move(value), false);
}

namespace detail {

template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> parents,
               std::function<void(Node<S>&)> backward) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  bool need = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) need = need || p->requires_grad;
  }
  n->requires_grad = need;
  if (need) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
ECMap<S> as_mat(const Tensor<S>& t, int64_t rows, int64_t cols) {
  return ECMap<S>(t.data.data(), rows, cols);
}
template <typename S>
EMap<S> as_mat_mut(Tensor<S>& t, int64_t rows, int64_t cols) {
  return EMap<S>(t.data.data(), rows, cols);
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root.
template <typename S>
void backward(const Var<S>& root) {
  PAIRAUG_CHECK(root->value.numel() == 1, NumericError,
                "backward() expects a scalar root, got shape ", shape_str(root->value.shape));
  PAIRAUG_CHECK(root->requires_grad, StateError, "backward() on a graph built without grad");

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  PAIRAUG_CHECK(a->value.same_shape(b->value), NumericError, "add: shape mismatch ",
                shape_str(a->value.shape), " vs ", shape_str(b->value.shape));
  Tensor<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
  return detail::make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += self.grad.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) b->grad.data[i] += self.grad.data[i];
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  PAIRAUG_CHECK(a->value.same_shape(b->value), NumericError, "sub: shape mismatch");
  Tensor<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b->value.data[i];
  return detail::make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += self.grad.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) b->grad.data[i] -= self.grad.data[i];
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  PAIRAUG_CHECK(a->value.same_shape(b->value), NumericError, "mul: shape mismatch");
  Tensor<S> out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
  return detail::make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        a->grad.data[i] += self.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        b->grad.data[i] += self.grad.data[i] * a->value.data[i];
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a->value;
  for (auto& v : out.data) v *= c;
  return detail::make_op<S>(std::move(out), {a}, [a, c](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += self.grad.data[i] * c;
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  Tensor<S> out = a->value;
  for (auto& v : out.data) v += c;
  return detail::make_op<S>(std::move(out), {a}, [a](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += self.grad.data[i];
  });
}

/// Elementwise multiply by a single-element variable (broadcast scalar).
template <typename S>
Var<S> broadcast_scale(const Var<S>& x, const Var<S>& s) {
  PAIRAUG_CHECK(s->value.numel() == 1, NumericError, "broadcast_scale: scalar expected");
  const S c = s->value.data[0];
  Tensor<S> out = x->value;
  for (auto& v : out.data) v *= c;
  return detail::make_op<S>(std::move(out), {x, s}, [x, s, c](Node<S>& self) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) x->grad.data[i] += self.grad.data[i] * c;
    }
    if (s->requires_grad) {
      s->ensure_grad();
      S acc = S(0);
      for (int64_t i = 0; i < self.grad.numel(); ++i) acc += self.grad.data[i] * x->value.data[i];
      s->grad.data[0] += acc;
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  Tensor<S> out = a->value;
  for (auto& v : out.data) {
    const S sig = S(1) / (S(1) + std::exp(-v));
    v = v * sig;
  }
  return detail::make_op<S>(std::move(out), {a}, [a](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const S x = a->value.data[i];
      const S sig = S(1) / (S(1) + std::exp(-x));
      a->grad.data[i] += self.grad.data[i] * sig * (S(1) + x * (S(1) - sig));
    }
  });
}

template <typename S>
Var<S> exp_op(const Var<S>& a) {
  Tensor<S> out = a->value;
  for (auto& v : out.data) v = std::exp(v);
  return detail::make_op<S>(std::move(out), {a}, [a](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      a->grad.data[i] += self.grad.data[i] * self.value.data[i];
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  PAIRAUG_CHECK(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(0),
                NumericError, "matmul: incompatible shapes ", shape_str(a->value.shape), " x ",
                shape_str(b->value.shape));
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor<S> out({m, n});
  detail::as_mat_mut(out, m, n).noalias() =
      detail::as_mat(a->value, m, k) * detail::as_mat(b->value, k, n);
  return detail::make_op<S>(std::move(out), {a, b}, [a, b, m, k, n](Node<S>& self) {
    auto dY = detail::as_mat(self.grad, m, n);
    if (a->requires_grad) {
      a->ensure_grad();
      detail::as_mat_mut(a->grad, m, k).noalias() += dY * detail::as_mat(b->value, k, n).transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      detail::as_mat_mut(b->grad, k, n).noalias() += detail::as_mat(a->value, m, k).transpose() * dY;
    }
  });
}

template <typename S>
Var<S> transpose2d(const Var<S>& a) {
  PAIRAUG_CHECK(a->value.rank() == 2, NumericError, "transpose2d expects rank 2");
  const int64_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor<S> out({n, m});
  detail::as_mat_mut(out, n, m) = detail::as_mat(a->value, m, n).transpose();
  return detail::make_op<S>(std::move(out), {a}, [a, m, n](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    detail::as_mat_mut(a->grad, m, n) += detail::as_mat(self.grad, n, m).transpose();
  });
}

/// Adds a row vector [d] to every row of x [n, d].
template <typename S>
Var<S> add_row(const Var<S>& x, const Var<S>& row) {
  PAIRAUG_CHECK(x->value.rank() == 2 && row->value.numel() == x->value.dim(1), NumericError,
                "add_row: bias length must match column count");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor<S> out = x->value;
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out.data[static_cast<size_t>(r * d + c)] += row->value.data[static_cast<size_t>(c)];
  return detail::make_op<S>(std::move(out), {x, row}, [x, row, n, d](Node<S>& self) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) x->grad.data[i] += self.grad.data[i];
    }
    if (row->requires_grad) {
      row->ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c)
          row->grad.data[static_cast<size_t>(c)] += self.grad.data[static_cast<size_t>(r * d + c)];
    }
  });
}

/// Adds a [rows, d] block to x [repeat*rows, d], tiling over the leading
/// axis (used for positional embeddings over a packed batch).
template <typename S>
Var<S> add_tiled(const Var<S>& x, const Var<S>& block, int64_t repeat) {
  const int64_t rows = block->value.dim(0), d = block->value.dim(1);
  PAIRAUG_CHECK(x->value.rank() == 2 && x->value.dim(0) == repeat * rows && x->value.dim(1) == d,
                NumericError, "add_tiled: shape mismatch");
  Tensor<S> out = x->value;
  for (int64_t t = 0; t < repeat; ++t)
    for (int64_t i = 0; i < rows * d; ++i)
      out.data[static_cast<size_t>(t * rows * d + i)] += block->value.data[static_cast<size_t>(i)];
  return detail::make_op<S>(std::move(out), {x, block}, [x, block, repeat, rows, d](Node<S>& self) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) x->grad.data[i] += self.grad.data[i];
    }
    if (block->requires_grad) {
      block->ensure_grad();
      for (int64_t t = 0; t < repeat; ++t)
        for (int64_t i = 0; i < rows * d; ++i)
          block->grad.data[static_cast<size_t>(i)] += self.grad.data[static_cast<size_t>(t * rows * d + i)];
    }
  });
}

template <typename S>
Var<S> reshape(const Var<S>& a, std::vector<int64_t> shp) {
  PAIRAUG_CHECK(Tensor<S>::numel_of(shp) == a->value.numel(), NumericError,
                "reshape: element count mismatch");
  Tensor<S> out(std::move(shp), a->value.data);
  return detail::make_op<S>(std::move(out), {a}, [a](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += self.grad.data[i];
  });
}

/// Rows [start, start+len) of a [n, d] matrix.
template <typename S>
Var<S> slice_rows(const Var<S>& a, int64_t start, int64_t len) {
  PAIRAUG_CHECK(a->value.rank() == 2, NumericError, "slice_rows expects rank 2");
  const int64_t d = a->value.dim(1);
  PAIRAUG_CHECK(start >= 0 && start + len <= a->value.dim(0), NumericError,
                "slice_rows: range out of bounds");
  Tensor<S> out({len, d});
  std::copy(a->value.data.begin() + start * d, a->value.data.begin() + (start + len) * d,
            out.data.begin());
  return detail::make_op<S>(std::move(out), {a}, [a, start, d](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    const int64_t len = self.value.dim(0);
    for (int64_t i = 0; i < len * d; ++i)
      a->grad.data[static_cast<size_t>(start * d + i)] += self.grad.data[static_cast<size_t>(i)];
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  PAIRAUG_CHECK(!parts.empty(), NumericError, "concat_rows: no inputs");
  const int64_t d = parts[0]->value.dim(1);
  int64_t n = 0;
  for (const auto& p : parts) {
    PAIRAUG_CHECK(p->value.rank() == 2 && p->value.dim(1) == d, NumericError,
                  "concat_rows: column mismatch");
    n += p->value.dim(0);
  }
  Tensor<S> out({n, d});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
    off += p->value.numel();
  }
  std::vector<Var<S>> parents(parts.begin(), parts.end());
  return detail::make_op<S>(std::move(out), std::move(parents), [parts](Node<S>& self) {
    int64_t off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (int64_t i = 0; i < p->value.numel(); ++i)
          p->grad.data[static_cast<size_t>(i)] += self.grad.data[static_cast<size_t>(off + i)];
      }
      off += p->value.numel();
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and row ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const int64_t n = a->value.numel();
  S acc = S(0);
  for (S v : a->value.data) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  return detail::make_op<S>(std::move(out), {a}, [a, n](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    const S g = self.grad.data[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) a->grad.data[i] += g;
  });
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  S acc = S(0);
  for (S v : a->value.data) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  return detail::make_op<S>(std::move(out), {a}, [a](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    const S g = self.grad.data[0];
    for (int64_t i = 0; i < a->value.numel(); ++i) a->grad.data[i] += g;
  });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  PAIRAUG_CHECK(a->value.rank() == 2, NumericError, "softmax_rows expects rank 2");
  const int64_t n = a->value.dim(0), d = a->value.dim(1);
  Tensor<S> out = a->value;
  for (int64_t r = 0; r < n; ++r) {
    S* row = out.data.data() + r * d;
    S mx = row[0];
    for (int64_t c = 1; c < d; ++c) mx = std::max(mx, row[c]);
    S sum = S(0);
    for (int64_t c = 0; c < d; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (int64_t c = 0; c < d; ++c) row[c] /= sum;
  }
  return detail::make_op<S>(std::move(out), {a}, [a, n, d](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const S* p = self.value.data.data() + r * d;
      const S* dy = self.grad.data.data() + r * d;
      S dot = S(0);
      for (int64_t c = 0; c < d; ++c) dot += p[c] * dy[c];
      S* dx = a->grad.data.data() + r * d;
      for (int64_t c = 0; c < d; ++c) dx[c] += p[c] * (dy[c] - dot);
    }
  });
}

template <typename S>
Var<S> logsumexp_rows(const Var<S>& a) {
  PAIRAUG_CHECK(a->value.rank() == 2, NumericError, "logsumexp_rows expects rank 2");
  const int64_t n = a->value.dim(0), d = a->value.dim(1);
  Tensor<S> out({n});
  for (int64_t r = 0; r < n; ++r) {
    const S* row = a->value.data.data() + r * d;
    S mx = row[0];
    for (int64_t c = 1; c < d; ++c) mx = std::max(mx, row[c]);
    S sum = S(0);
    for (int64_t c = 0; c < d; ++c) sum += std::exp(row[c] - mx);
    out.data[static_cast<size_t>(r)] = mx + std::log(sum);
  }
  return detail::make_op<S>(std::move(out), {a}, [a, n, d](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const S* row = a->value.data.data() + r * d;
      const S lse = self.value.data[static_cast<size_t>(r)];
      const S dy = self.grad.data[static_cast<size_t>(r)];
      S* dx = a->grad.data.data() + r * d;
      for (int64_t c = 0; c < d; ++c) dx[c] += dy * std::exp(row[c] - lse);
    }
  });
}

template <typename S>
Var<S> diag(const Var<S>& a) {
  PAIRAUG_CHECK(a->value.rank() == 2 && a->value.dim(0) == a->value.dim(1), NumericError,
                "diag expects a square matrix");
  const int64_t n = a->value.dim(0);
  Tensor<S> out({n});
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = a->value.at2(i, i);
  return detail::make_op<S>(std::move(out), {a}, [a, n](Node<S>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      a->grad.data[static_cast<size_t>(i * n + i)] += self.grad.data[static_cast<size_t>(i)];
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  PAIRAUG_CHECK(x->value.rank() == 2, NumericError, "layer_norm expects rank 2");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  PAIRAUG_CHECK(gamma->value.numel() == d && beta->value.numel() == d, NumericError,
                "layer_norm: affine shape mismatch");
  Tensor<S> out({n, d});
  Tensor<S> xhat({n, d});
  std::vector<S> inv_sigma(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    const S* row = x->value.data.data() + r * d;
    S mu = S(0);
    for (int64_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int64_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < d; ++c) {
      const S xh = (row[c] - mu) * is;
      xhat.data[static_cast<size_t>(r * d + c)] = xh;
      out.data[static_cast<size_t>(r * d + c)] =
          xh * gamma->value.data[static_cast<size_t>(c)] + beta->value.data[static_cast<size_t>(c)];
    }
  }
  return detail::make_op<S>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node<S>& self) {
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        for (int64_t r = 0; r < n; ++r) {
          const S* dy = self.grad.data.data() + r * d;
          const S* xh = xhat.data.data() + r * d;
          if (gamma->requires_grad || beta->requires_grad) {
            for (int64_t c = 0; c < d; ++c) {
              if (gamma->requires_grad) gamma->grad.data[static_cast<size_t>(c)] += dy[c] * xh[c];
              if (beta->requires_grad) beta->grad.data[static_cast<size_t>(c)] += dy[c];
            }
          }
          if (x->requires_grad) {
            S mean_a = S(0), mean_ax = S(0);
            for (int64_t c = 0; c < d; ++c) {
              const S a = dy[c] * gamma->value.data[static_cast<size_t>(c)];
              mean_a += a;
              mean_ax += a * xh[c];
            }
            mean_a /= static_cast<S>(d);
            mean_ax /= static_cast<S>(d);
            const S is = inv_sigma[static_cast<size_t>(r)];
            S* dx = x->grad.data.data() + r * d;
            for (int64_t c = 0; c < d; ++c) {
              const S a = dy[c] * gamma->value.data[static_cast<size_t>(c)];
              dx[c] += is * (a - mean_a - xh[c] * mean_ax);
            }
          }
        }
      });
}

/// Unit-normalizes each row of x [n, d]; rows with norm below `floor`
/// are scaled by 1/floor instead so the op stays differentiable.
template <typename S>
Var<S> normalize_rows(const Var<S>& x, S floor = S(1e-12)) {
  PAIRAUG_CHECK(x->value.rank() == 2, NumericError, "normalize_rows expects rank 2");
  const int64_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor<S> out({n, d});
  std::vector<S> inv_norm(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    const S* row = x->value.data.data() + r * d;
    S s = S(0);
    for (int64_t c = 0; c < d; ++c) s += row[c] * row[c];
    const S nr = std::max(std::sqrt(s), floor);
    inv_norm[static_cast<size_t>(r)] = S(1) / nr;
    for (int64_t c = 0; c < d; ++c) out.data[static_cast<size_t>(r * d + c)] = row[c] / nr;
  }
  return detail::make_op<S>(std::move(out), {x},
                            [x, n, d, inv_norm = std::move(inv_norm)](Node<S>& self) {
                              if (!x->requires_grad) return;
                              x->ensure_grad();
                              for (int64_t r = 0; r < n; ++r) {
                                const S* y = self.value.data.data() + r * d;
                                const S* dy = self.grad.data.data() + r * d;
                                S dot = S(0);
                                for (int64_t c = 0; c < d; ++c) dot += y[c] * dy[c];
                                const S in = inv_norm[static_cast<size_t>(r)];
                                S* dx = x->grad.data.data() + r * d;
                                for (int64_t c = 0; c < d; ++c)
                                  dx[c] += in * (dy[c] - y[c] * dot);
                              }
                            });
}

/// Embedding lookup: rows of `table` [V, d] gathered by `ids`.
template <typename S>
Var<S> embedding(const Var<S>& table, const std::vector<int32_t>& ids) {
  PAIRAUG_CHECK(table->value.rank() == 2, NumericError, "embedding table must be rank 2");
  const int64_t v = table->value.dim(0), d = table->value.dim(1);
  Tensor<S> out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    PAIRAUG_CHECK(ids[i] >= 0 && ids[i] < v, NumericError, "embedding id out of range: ", ids[i]);
    std::copy(table->value.data.begin() + ids[i] * d, table->value.data.begin() + (ids[i] + 1) * d,
              out.data.begin() + static_cast<int64_t>(i) * d);
  }
  return detail::make_op<S>(std::move(out), {table}, [table, ids, d](Node<S>& self) {
    if (!table->requires_grad) return;
    table->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const S* g = self.grad.data.data() + static_cast<int64_t>(i) * d;
      S* dst = table->grad.data.data() + ids[i] * d;
      for (int64_t c = 0; c < d; ++c) dst[c] += g[c];
    }
  });
}

/// Mean over valid rows per sample: x is [n_samples*rows, d] packed, mask
/// is one byte per packed row. A sample with no valid rows falls back to
/// the mean over all of its rows (mirrors the all-masked softmax policy).
template <typename S>
Var<S> masked_meanpool(const Var<S>& x, const std::vector<uint8_t>& mask, int64_t n_samples,
                       int64_t rows) {
  const int64_t d = x->value.dim(1);
  PAIRAUG_CHECK(x->value.dim(0) == n_samples * rows &&
                    static_cast<int64_t>(mask.size()) == n_samples * rows,
                NumericError, "masked_meanpool: shape mismatch");
  Tensor<S> out({n_samples, d});
  std::vector<int64_t> counts(static_cast<size_t>(n_samples), 0);
  for (int64_t s = 0; s < n_samples; ++s) {
    int64_t cnt = 0;
    for (int64_t r = 0; r < rows; ++r) cnt += mask[static_cast<size_t>(s * rows + r)] ? 1 : 0;
    const bool all_masked = cnt == 0;
    if (all_masked) cnt = rows;
    counts[static_cast<size_t>(s)] = cnt;
    for (int64_t r = 0; r < rows; ++r) {
      if (!all_masked && !mask[static_cast<size_t>(s * rows + r)]) continue;
      const S* src = x->value.data.data() + (s * rows + r) * d;
      S* dst = out.data.data() + s * d;
      for (int64_t c = 0; c < d; ++c) dst[c] += src[c] / static_cast<S>(cnt);
    }
  }
  return detail::make_op<S>(std::move(out), {x},
                            [x, mask, n_samples, rows, d, counts = std::move(counts)](Node<S>& self) {
                              if (!x->requires_grad) return;
                              x->ensure_grad();
                              for (int64_t s = 0; s < n_samples; ++s) {
                                int64_t cnt = counts[static_cast<size_t>(s)];
                                bool all_masked = true;
                                for (int64_t r = 0; r < rows; ++r)
                                  if (mask[static_cast<size_t>(s * rows + r)]) all_masked = false;
                                const S* dy = self.grad.data.data() + s * d;
                                for (int64_t r = 0; r < rows; ++r) {
                                  if (!all_masked && !mask[static_cast<size_t>(s * rows + r)]) continue;
                                  S* dx = x->grad.data.data() + (s * rows + r) * d;
                                  for (int64_t c = 0; c < d; ++c) dx[c] += dy[c] / static_cast<S>(cnt);
                                }
                              }
                            });
}

/// Mean squared error against a constant target.
template <typename S>
Var<S> mse_loss(const Var<S>& pred, const Tensor<S>& target) {
  PAIRAUG_CHECK(pred->value.same_shape(target), NumericError, "mse_loss: shape mismatch");
  const int64_t n = pred->value.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred->value.data[i]) - target.data[i];
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  return detail::make_op<S>(std::move(out), {pred}, [pred, target, n](Node<S>& self) {
    if (!pred->requires_grad) return;
    pred->ensure_grad();
    const S g = self.grad.data[0] * S(2) / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i)
      pred->grad.data[i] += g * (pred->value.data[i] - target.data[i]);
  });
}

/// Numerically stable binary cross-entropy with logits, mean-reduced.
template <typename S>
Var<S> bce_with_logits(const Var<S>& logits, const Tensor<S>& targets) {
  PAIRAUG_CHECK(logits->value.same_shape(targets), NumericError, "bce_with_logits: shape mismatch");
  const int64_t n = logits->value.numel();
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) {
    const S z = logits->value.data[i], y = targets.data[i];
    acc += std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  return detail::make_op<S>(std::move(out), {logits}, [logits, targets, n](Node<S>& self) {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    const S g = self.grad.data[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) {
      const S z = logits->value.data[i];
      const S sig = S(1) / (S(1) + std::exp(-z));
      logits->grad.data[i] += g * (sig - targets.data[i]);
    }
  });
}

}  // namespace pairaug::nn
