#include "univa/autograd.h"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace univa::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Tensor make_leaf(int rows, int cols, Vec values, bool requires_grad) {
  if (values.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols)) {
    throw Error("tensor: value count does not match shape");
  }
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

// Records `fn` only when some input participates in differentiation.
Tensor make_op(int rows, int cols, Vec values, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (any) {
      n->requires_grad = true;
      n->inputs = std::move(inputs);
      n->backward = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor Tensor::constant(int rows, int cols, Vec values) { return make_leaf(rows, cols, std::move(values), false); }
Tensor Tensor::zeros(int rows, int cols) {
  return make_leaf(rows, cols, Vec(static_cast<size_t>(rows) * cols, 0.0), false);
}
Tensor Tensor::parameter(int rows, int cols, Vec values) { return make_leaf(rows, cols, std::move(values), true); }
Tensor Tensor::row(Vec values) {
  const int n = static_cast<int>(values.size());
  return make_leaf(1, n, std::move(values), false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.requires_grad()) return;
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
    else n->ensure_grad();
  }
  loss.node()->grad.assign(loss.node()->value.size(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      for (auto& in : n->inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
      n->backward(*n);
    }
  }
  // Release interior buffers; leaf grads persist until zeroed.
  for (Node* n : order) {
    if (n->backward) Vec().swap(n->grad);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  const int n = a.rows(), k = a.cols(), m = b.cols();
  Vec out(static_cast<size_t>(n) * m, 0.0);
  const Vec& av = a.value();
  const Vec& bv = b.value();
  for (int i = 0; i < n; ++i) {
    double* orow = out.data() + static_cast<size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double x = av[static_cast<size_t>(i) * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  NodePtr an = a.shared(), bn = b.shared();
  return make_op(n, m, std::move(out), {an, bn}, [an, bn, n, k, m](Node& self) {
    const Vec& g = self.grad;
    if (an->requires_grad) {
      for (int i = 0; i < n; ++i) {
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = g.data() + static_cast<size_t>(i) * m;
          const double* brow = bn->value.data() + static_cast<size_t>(p) * m;
          for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
          an->grad[static_cast<size_t>(i) * k + p] += s;
        }
      }
    }
    if (bn->requires_grad) {
      for (int i = 0; i < n; ++i) {
        const double* grow = g.data() + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
          const double x = an->value[static_cast<size_t>(i) * k + p];
          if (x == 0.0) continue;
          double* bg = bn->grad.data() + static_cast<size_t>(p) * m;
          for (int j = 0; j < m; ++j) bg[j] += x * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  const int n = a.rows(), m = a.cols();
  Vec out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = a.value()[static_cast<size_t>(i) * m + j];
  NodePtr an = a.shared();
  return make_op(m, n, std::move(out), {an}, [an, n, m](Node& self) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) an->grad[static_cast<size_t>(i) * m + j] += self.grad[static_cast<size_t>(j) * n + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Vec out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  NodePtr an = a.shared(), bn = b.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an, bn}, [an, bn](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i];
      if (bn->requires_grad) bn->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Vec out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  NodePtr an = a.shared(), bn = b.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an, bn}, [an, bn](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i];
      if (bn->requires_grad) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Vec out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  NodePtr an = a.shared(), bn = b.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an, bn}, [an, bn](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
      if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: shape mismatch");
  const int n = a.rows(), m = a.cols();
  Vec out(a.value());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(i) * m + j] += row.value()[j];
  NodePtr an = a.shared(), rn = row.shared();
  return make_op(n, m, std::move(out), {an, rn}, [an, rn, n, m](Node& self) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        const double g = self.grad[static_cast<size_t>(i) * m + j];
        if (an->requires_grad) an->grad[static_cast<size_t>(i) * m + j] += g;
        if (rn->requires_grad) rn->grad[j] += g;
      }
    }
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw Error("mul_scalar: expected 1x1");
  const double sv = s.item();
  Vec out(a.value());
  for (double& v : out) v *= sv;
  NodePtr an = a.shared(), sn = s.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an, sn}, [an, sn](Node& self) {
    const double sv = sn->value[0];
    double acc = 0.0;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i] * sv;
      acc += self.grad[i] * an->value[i];
    }
    if (sn->requires_grad) sn->grad[0] += acc;
  });
}

Tensor scale(const Tensor& a, double s) {
  Vec out(a.value());
  for (double& v : out) v *= s;
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an, s](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
  });
}

Tensor add_const(const Tensor& a, double c) {
  Vec out(a.value());
  for (double& v : out) v += c;
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

Tensor silu(const Tensor& a) {
  Vec out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sigmoid(a.value()[i]);
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      const double s = sigmoid(x);
      an->grad[i] += self.grad[i] * (s + x * s * (1.0 - s));
    }
  });
}

Tensor exp(const Tensor& a) {
  Vec out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
  });
}

Tensor square(const Tensor& a) {
  Vec out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += 2.0 * an->value[i] * self.grad[i];
  });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  Vec out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.value()[i], lo, hi);
  NodePtr an = a.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an}, [an, lo, hi](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      if (x > lo && x < hi) an->grad[i] += self.grad[i];
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  Vec out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  NodePtr an = a.shared(), bn = b.shared();
  return make_op(a.rows(), a.cols(), std::move(out), {an, bn}, [an, bn](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (an->value[i] <= bn->value[i]) {
        if (an->requires_grad) an->grad[i] += self.grad[i];
      } else if (bn->requires_grad) {
        bn->grad[i] += self.grad[i];
      }
    }
  });
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  const int n = a.rows(), m = a.cols();
  Vec out(a.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const int limit = causal ? std::min(m, i + 1) : m;
    const double* x = a.value().data() + static_cast<size_t>(i) * m;
    double* y = out.data() + static_cast<size_t>(i) * m;
    double mx = x[0];
    for (int j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < limit; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < limit; ++j) y[j] /= z;
  }
  NodePtr an = a.shared();
  return make_op(n, m, std::move(out), {an}, [an, n, m](Node& self) {
    for (int i = 0; i < n; ++i) {
      const double* y = self.value.data() + static_cast<size_t>(i) * m;
      const double* g = self.grad.data() + static_cast<size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += y[j] * g[j];
      for (int j = 0; j < m; ++j) an->grad[static_cast<size_t>(i) * m + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const int n = a.rows(), m = a.cols();
  Vec out(a.size());
  for (int i = 0; i < n; ++i) {
    const double* x = a.value().data() + static_cast<size_t>(i) * m;
    double mx = x[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(i) * m + j] = x[j] - lse;
  }
  NodePtr an = a.shared();
  return make_op(n, m, std::move(out), {an}, [an, n, m](Node& self) {
    for (int i = 0; i < n; ++i) {
      double gs = 0.0;
      for (int j = 0; j < m; ++j) gs += self.grad[static_cast<size_t>(i) * m + j];
      for (int j = 0; j < m; ++j) {
        const size_t idx = static_cast<size_t>(i) * m + j;
        an->grad[idx] += self.grad[idx] - std::exp(self.value[idx]) * gs;
      }
    }
  });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  const int n = a.rows(), m = a.cols();
  Vec out(a.size());
  Vec inv_std(n);
  for (int i = 0; i < n; ++i) {
    const double* x = a.value().data() + static_cast<size_t>(i) * m;
    double mean = 0.0;
    for (int j = 0; j < m; ++j) mean += x[j];
    mean /= m;
    double var = 0.0;
    for (int j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= m;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(i) * m + j] = (x[j] - mean) * inv_std[i];
  }
  NodePtr an = a.shared();
  return make_op(n, m, std::move(out), {an}, [an, n, m, inv_std](Node& self) {
    for (int i = 0; i < n; ++i) {
      const double* y = self.value.data() + static_cast<size_t>(i) * m;
      const double* g = self.grad.data() + static_cast<size_t>(i) * m;
      double g_mean = 0.0, gy_mean = 0.0;
      for (int j = 0; j < m; ++j) {
        g_mean += g[j];
        gy_mean += g[j] * y[j];
      }
      g_mean /= m;
      gy_mean /= m;
      for (int j = 0; j < m; ++j) {
        an->grad[static_cast<size_t>(i) * m + j] += inv_std[i] * (g[j] - g_mean - y[j] * gy_mean);
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const int m = table.cols();
  const int n = static_cast<int>(ids.size());
  Vec out(static_cast<size_t>(n) * m);
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw Error("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(table.rows()));
    }
    std::copy_n(table.value().data() + static_cast<size_t>(ids[i]) * m, m, out.data() + static_cast<size_t>(i) * m);
  }
  NodePtr tn = table.shared();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op(n, m, std::move(out), {tn}, [tn, idv, m](Node& self) {
    for (size_t i = 0; i < idv.size(); ++i)
      for (int j = 0; j < m; ++j) tn->grad[static_cast<size_t>(idv[i]) * m + j] += self.grad[i * m + j];
  });
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw Error("slice_rows: out of range");
  const int m = a.cols();
  Vec out(a.value().begin() + static_cast<ptrdiff_t>(start) * m,
          a.value().begin() + static_cast<ptrdiff_t>(start + count) * m);
  NodePtr an = a.shared();
  return make_op(count, m, std::move(out), {an}, [an, start, m](Node& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[static_cast<size_t>(start) * m + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: out of range");
  const int n = a.rows(), m = a.cols();
  Vec out(static_cast<size_t>(n) * count);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < count; ++j) out[static_cast<size_t>(i) * count + j] = a.value()[static_cast<size_t>(i) * m + start + j];
  NodePtr an = a.shared();
  return make_op(n, count, std::move(out), {an}, [an, n, m, start, count](Node& self) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < count; ++j)
        an->grad[static_cast<size_t>(i) * m + start + j] += self.grad[static_cast<size_t>(i) * count + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error("concat_rows: no parts");
  const int m = parts[0].cols();
  int n = 0;
  Vec out;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    if (p.cols() != m) throw Error("concat_rows: column mismatch");
    n += p.rows();
    out.insert(out.end(), p.value().begin(), p.value().end());
    inputs.push_back(p.shared());
  }
  return make_op(n, m, std::move(out), inputs, [inputs](Node& self) {
    size_t offset = 0;
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        for (size_t i = 0; i < in->value.size(); ++i) in->grad[i] += self.grad[offset + i];
      }
      offset += in->value.size();
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error("concat_cols: no parts");
  const int n = parts[0].rows();
  int m = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    if (p.rows() != n) throw Error("concat_cols: row mismatch");
    m += p.cols();
    inputs.push_back(p.shared());
  }
  Vec out(static_cast<size_t>(n) * m);
  int offset = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < p.cols(); ++j) out[static_cast<size_t>(i) * m + offset + j] = p.at(i, j);
    offset += p.cols();
  }
  return make_op(n, m, std::move(out), inputs, [inputs, n, m](Node& self) {
    int off = 0;
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < in->cols; ++j)
            in->grad[static_cast<size_t>(i) * in->cols + j] += self.grad[static_cast<size_t>(i) * m + off + j];
      }
      off += in->cols;
    }
  });
}

Tensor pick(const Tensor& a, int r, int c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw Error("pick: index out of range");
  const size_t idx = static_cast<size_t>(r) * a.cols() + c;
  NodePtr an = a.shared();
  return make_op(1, 1, {a.value()[idx]}, {an}, [an, idx](Node& self) { an->grad[idx] += self.grad[0]; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  NodePtr an = a.shared();
  return make_op(1, 1, {s}, {an}, [an](Node& self) {
    for (double& g : an->grad) g += self.grad[0];
  });
}

Tensor sum_scalars(std::span<const Tensor> scalars) {
  double s = 0.0;
  std::vector<NodePtr> inputs;
  for (const auto& t : scalars) {
    if (t.size() != 1) throw Error("sum_scalars: expected 1x1 tensors");
    s += t.item();
    inputs.push_back(t.shared());
  }
  return make_op(1, 1, {s}, inputs, [inputs](Node& self) {
    for (const auto& in : inputs) {
      if (in->requires_grad) in->grad[0] += self.grad[0];
    }
  });
}

}  // namespace univa::ag
