#include "dsvpr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

thread_local bool g_recording = true;

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive");
    n *= d;
  }
  return n;
}

std::shared_ptr<TensorNode> make_node(std::vector<std::int64_t> shape) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  return node;
}

// Registers parents and the backward closure on `out` when recording is on
// and at least one parent participates in differentiation.
void attach(const std::shared_ptr<TensorNode>& out,
            std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> fn) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (g_recording && needs) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": operand shapes differ");
}

}  // namespace

bool grad_recording_enabled() { return g_recording; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

// ----- Tensor basics -----

Tensor Tensor::zeros(const std::vector<std::int64_t>& shape, bool requires_grad) {
  auto node = make_node(shape);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::full(const std::vector<std::int64_t>& shape, double value, bool requires_grad) {
  auto node = make_node(shape);
  std::fill(node->data.begin(), node->data.end(), value);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::from_data(const std::vector<std::int64_t>& shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("from_data: value count does not match shape");
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<std::int64_t>& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
std::int64_t Tensor::dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
std::int64_t Tensor::numel() const { return node_->numel(); }

std::vector<double>& Tensor::data() { return node_->data; }
const std::vector<double>& Tensor::data() const { return node_->data; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
bool Tensor::has_grad() const { return !node_->grad.empty(); }
void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

double Tensor::value() const {
  if (numel() != 1) throw DimensionError("value(): tensor is not a single element");
  return node_->data[0];
}

double Tensor::at(std::int64_t i) const { return node_->data.at(static_cast<size_t>(i)); }
double Tensor::at(std::int64_t i, std::int64_t j) const {
  if (rank() != 2) throw DimensionError("at(i,j): tensor is not 2-D");
  return node_->data[static_cast<size_t>(i * dim(1) + j)];
}
double& Tensor::mut(std::int64_t i) { return node_->data.at(static_cast<size_t>(i)); }
double& Tensor::mut(std::int64_t i, std::int64_t j) {
  if (rank() != 2) throw DimensionError("mut(i,j): tensor is not 2-D");
  return node_->data[static_cast<size_t>(i * dim(1) + j)];
}

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward(): root must be a single element");
  if (!node_->requires_grad) return;

  // Post-order DFS; children of the DAG are visited before the nodes that
  // consume them, so the reversed order is a valid reverse-topological walk.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode* parent = node->parents[next_child].get();
      ++next_child;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) n->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ----- elementwise / structural -----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] + bd[i];
  auto pa = a.node(), pb = b.node();
  attach(out, {pa, pb}, [pa, pb](TensorNode& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    }
  });
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] - bd[i];
  auto pa = a.node(), pb = b.node();
  attach(out, {pa, pb}, [pa, pb](TensorNode& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] * bd[i];
  auto pa = a.node(), pb = b.node();
  attach(out, {pa, pb}, [pa, pb](TensorNode& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
  return Tensor(out);
}

Tensor scalar_mul(const Tensor& a, double c) {
  auto out = make_node(a.shape());
  const auto& ad = a.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] * c;
  auto pa = a.node();
  attach(out, {pa}, [pa, c](TensorNode& self) {
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
  });
  return Tensor(out);
}

Tensor add_rows(const Tensor& m, const Tensor& row) {
  if (m.rank() != 2 || row.rank() != 1 || m.dim(1) != row.dim(0))
    throw DimensionError("add_rows: expected [N x C] plus [C]");
  const std::int64_t rows = m.dim(0), cols = m.dim(1);
  auto out = make_node(m.shape());
  const auto& md = m.data();
  const auto& rd = row.data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      out->data[static_cast<size_t>(i * cols + j)] =
          md[static_cast<size_t>(i * cols + j)] + rd[static_cast<size_t>(j)];
  auto pm = m.node(), pr = row.node();
  attach(out, {pm, pr}, [pm, pr, rows, cols](TensorNode& self) {
    if (pm->requires_grad) {
      pm->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pm->grad[i] += self.grad[i];
    }
    if (pr->requires_grad) {
      pr->ensure_grad();
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j)
          pr->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * cols + j)];
    }
  });
  return Tensor(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: operands must be 2-D");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner extents differ (" + std::to_string(a.dim(1)) + " vs " +
                         std::to_string(b.dim(0)) + ")");
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node({m, n});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = out->data.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double aik = ad[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bd + kk * n;
      double* crow = cd + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  auto pa = a.node(), pb = b.node();
  attach(out, {pa, pb}, [pa, pb, m, k, n](TensorNode& self) {
    const double* g = self.grad.data();
    if (pa->requires_grad) {
      pa->ensure_grad();
      double* da = pa->grad.data();
      const double* bd2 = pb->data.data();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* grow = g + i * n;
          const double* brow = bd2 + kk * n;
          for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[i * k + kk] += acc;
        }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      double* db = pb->grad.data();
      const double* ad2 = pa->data.data();
      for (std::int64_t kk = 0; kk < k; ++kk)
        for (std::int64_t i = 0; i < m; ++i) {
          const double aik = ad2[i * k + kk];
          if (aik == 0.0) continue;
          const double* grow = g + i * n;
          double* dbrow = db + kk * n;
          for (std::int64_t j = 0; j < n; ++j) dbrow[j] += aik * grow[j];
        }
    }
  });
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: tensor must be 2-D");
  const std::int64_t r = a.dim(0), c = a.dim(1);
  auto out = make_node({c, r});
  const auto& ad = a.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out->data[static_cast<size_t>(j * r + i)] = ad[static_cast<size_t>(i * c + j)];
  auto pa = a.node();
  attach(out, {pa}, [pa, r, c](TensorNode& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        pa->grad[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j * r + i)];
  });
  return Tensor(out);
}

Tensor reshape(const Tensor& a, const std::vector<std::int64_t>& shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: element count mismatch");
  auto out = std::make_shared<TensorNode>();
  out->shape = shape;
  out->data = a.data();  // row-major layout, same linear order
  auto pa = a.node();
  attach(out, {pa}, [pa](TensorNode& self) {
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  });
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count) {
  if (a.rank() != 2) throw DimensionError("slice_cols: tensor must be 2-D");
  if (start < 0 || count <= 0 || start + count > a.dim(1))
    throw DimensionError("slice_cols: column range out of bounds");
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  auto out = make_node({rows, count});
  const auto& ad = a.data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < count; ++j)
      out->data[static_cast<size_t>(i * count + j)] =
          ad[static_cast<size_t>(i * cols + start + j)];
  auto pa = a.node();
  attach(out, {pa}, [pa, rows, cols, start, count](TensorNode& self) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < count; ++j)
        pa->grad[static_cast<size_t>(i * cols + start + j)] +=
            self.grad[static_cast<size_t>(i * count + j)];
  });
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::int64_t rows = parts[0].dim(0);
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw DimensionError("concat_cols: row counts differ");
    cols += p.dim(1);
  }
  auto out = make_node({rows, cols});
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.dim(1);
    const auto& pd = p.data();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < pc; ++j)
        out->data[static_cast<size_t>(i * cols + offset + j)] =
            pd[static_cast<size_t>(i * pc + j)];
    offset += pc;
  }
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) parents.push_back(p.node());
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  attach(out, parents, [parents, widths, rows, cols](TensorNode& self) {
    std::int64_t offset2 = 0;
    for (size_t pi = 0; pi < parents.size(); ++pi) {
      const std::int64_t pc = widths[pi];
      auto& parent = parents[pi];
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < pc; ++j)
            parent->grad[static_cast<size_t>(i * pc + j)] +=
                self.grad[static_cast<size_t>(i * cols + offset2 + j)];
      }
      offset2 += pc;
    }
  });
  return Tensor(out);
}

Tensor concat_vec(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1)
    throw DimensionError("concat_vec: operands must be 1-D");
  const std::int64_t n = a.dim(0), m = b.dim(0);
  auto out = make_node({n + m});
  std::copy(a.data().begin(), a.data().end(), out->data.begin());
  std::copy(b.data().begin(), b.data().end(), out->data.begin() + n);
  auto pa = a.node(), pb = b.node();
  attach(out, {pa, pb}, [pa, pb, n, m](TensorNode& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) pa->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) pb->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(n + i)];
    }
  });
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_node({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out->data[0] = acc;
  auto pa = a.node();
  attach(out, {pa}, [pa](TensorNode& self) {
    pa->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : pa->grad) gv += g;
  });
  return Tensor(out);
}

Tensor silu(const Tensor& a) {
  auto out = make_node(a.shape());
  const auto& ad = a.data();
  for (size_t i = 0; i < ad.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-ad[i]));
    out->data[i] = ad[i] * s;
  }
  auto pa = a.node();
  attach(out, {pa}, [pa](TensorNode& self) {
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = pa->data[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      pa->grad[i] += self.grad[i] * (s * (1.0 + x * (1.0 - s)));
    }
  });
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: tensor must have at least one axis");
  const std::int64_t n = x.shape().back();
  const std::int64_t rows = x.numel() / n;
  auto out = make_node(x.shape());
  const auto& xd = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double* orow = out->data.data() + r * n;
    double mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (std::int64_t j = 0; j < n; ++j) orow[j] /= denom;
  }
  auto px = x.node();
  auto y = out->data;  // saved output for the backward pass
  attach(out, {px}, [px, y = std::move(y), rows, n](TensorNode& self) {
    px->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yrow = y.data() + r * n;
      const double* grow = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
      double* drow = px->grad.data() + r * n;
      for (std::int64_t j = 0; j < n; ++j) drow[j] += yrow[j] * (grow[j] - dot);
    }
  });
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: tensor must have at least one axis");
  const std::int64_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: affine parameter length must equal trailing extent");
  if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive");
  const std::int64_t rows = x.numel() / c;
  auto out = make_node(x.shape());
  std::vector<double> xhat(static_cast<size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (std::int64_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[static_cast<size_t>(r * c + j)] = h;
      out->data[static_cast<size_t>(r * c + j)] = gd[static_cast<size_t>(j)] * h + bd[static_cast<size_t>(j)];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  attach(out, {px, pg, pb},
         [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](TensorNode& self) {
           if (pg->requires_grad) pg->ensure_grad();
           if (pb->requires_grad) pb->ensure_grad();
           if (px->requires_grad) px->ensure_grad();
           for (std::int64_t r = 0; r < rows; ++r) {
             const double* grow = self.grad.data() + r * c;
             const double* hrow = xhat.data() + r * c;
             if (pg->requires_grad)
               for (std::int64_t j = 0; j < c; ++j)
                 pg->grad[static_cast<size_t>(j)] += grow[j] * hrow[j];
             if (pb->requires_grad)
               for (std::int64_t j = 0; j < c; ++j) pb->grad[static_cast<size_t>(j)] += grow[j];
             if (px->requires_grad) {
               // dL/dxhat_j = g_j * gamma_j; then the standard standardization
               // backward per row.
               double mean_dh = 0.0, mean_dh_h = 0.0;
               for (std::int64_t j = 0; j < c; ++j) {
                 const double dh = grow[j] * pg->data[static_cast<size_t>(j)];
                 mean_dh += dh;
                 mean_dh_h += dh * hrow[j];
               }
               mean_dh /= static_cast<double>(c);
               mean_dh_h /= static_cast<double>(c);
               const double is = inv_std[static_cast<size_t>(r)];
               double* drow = px->grad.data() + r * c;
               for (std::int64_t j = 0; j < c; ++j) {
                 const double dh = grow[j] * pg->data[static_cast<size_t>(j)];
                 drow[j] += is * (dh - mean_dh - hrow[j] * mean_dh_h);
               }
             }
           }
         });
  return Tensor(out);
}

Tensor l2_normalize(const Tensor& x, double eps) {
  if (x.rank() != 1) throw DimensionError("l2_normalize: tensor must be 1-D");
  const std::int64_t n = x.dim(0);
  auto out = make_node(x.shape());
  const auto& xd = x.data();
  double norm_sq = 0.0;
  for (double v : xd) norm_sq += v * v;
  const double norm = std::sqrt(norm_sq);
  const bool degenerate = !(norm > eps);
  const double scale = degenerate ? 1.0 / eps : 1.0 / norm;
  for (std::int64_t i = 0; i < n; ++i)
    out->data[static_cast<size_t>(i)] = xd[static_cast<size_t>(i)] * scale;
  auto px = x.node();
  auto y = out->data;
  attach(out, {px}, [px, y = std::move(y), degenerate, scale, n](TensorNode& self) {
    px->ensure_grad();
    if (degenerate) {
      for (std::int64_t i = 0; i < n; ++i)
        px->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * scale;
      return;
    }
    double dot = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      dot += self.grad[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
    for (std::int64_t i = 0; i < n; ++i)
      px->grad[static_cast<size_t>(i)] +=
          (self.grad[static_cast<size_t>(i)] - y[static_cast<size_t>(i)] * dot) * scale;
  });
  return Tensor(out);
}

Tensor gem_pool(const Tensor& tokens, const Tensor& p) {
  if (tokens.rank() != 2) throw DimensionError("gem_pool: tokens must be [N x C]");
  if (p.numel() != 1) throw DimensionError("gem_pool: exponent must be a single element");
  const double pv = p.value();
  if (!(pv > 0.0)) throw ParameterError("gem_pool: exponent must be positive");
  const std::int64_t n = tokens.dim(0), c = tokens.dim(1);
  auto out = make_node({c});
  const auto& td = tokens.data();
  std::vector<double> mean_up(static_cast<size_t>(c), 0.0);  // (1/N) sum u^p per channel
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t j = 0; j < c; ++j) {
      const double u = std::max(td[static_cast<size_t>(a * c + j)], kGemClamp);
      mean_up[static_cast<size_t>(j)] += std::pow(u, pv);
    }
  for (std::int64_t j = 0; j < c; ++j) {
    mean_up[static_cast<size_t>(j)] /= static_cast<double>(n);
    out->data[static_cast<size_t>(j)] = std::pow(mean_up[static_cast<size_t>(j)], 1.0 / pv);
  }
  auto pt = tokens.node(), pp = p.node();
  auto y = out->data;
  attach(out, {pt, pp},
         [pt, pp, y = std::move(y), mean_up = std::move(mean_up), pv, n, c](TensorNode& self) {
           if (pt->requires_grad) {
             pt->ensure_grad();
             for (std::int64_t a = 0; a < n; ++a)
               for (std::int64_t j = 0; j < c; ++j) {
                 const double t = pt->data[static_cast<size_t>(a * c + j)];
                 if (t < kGemClamp) continue;  // clamp region, zero slope
                 const double ratio = t / y[static_cast<size_t>(j)];
                 pt->grad[static_cast<size_t>(a * c + j)] +=
                     self.grad[static_cast<size_t>(j)] * std::pow(ratio, pv - 1.0) /
                     static_cast<double>(n);
               }
           }
           if (pp->requires_grad) {
             pp->ensure_grad();
             double dp = 0.0;
             for (std::int64_t j = 0; j < c; ++j) {
               // y = exp(log(mean_up)/p); d/dp needs the u^p log u moment.
               double moment = 0.0;
               for (std::int64_t a = 0; a < n; ++a) {
                 const double u =
                     std::max(pt->data[static_cast<size_t>(a * c + j)], kGemClamp);
                 moment += std::pow(u, pv) * std::log(u);
               }
               moment /= static_cast<double>(n);
               const double m = mean_up[static_cast<size_t>(j)];
               const double dy_dp =
                   y[static_cast<size_t>(j)] * (-std::log(m) / (pv * pv) + moment / (pv * m));
               dp += self.grad[static_cast<size_t>(j)] * dy_dp;
             }
             pp->grad[0] += dp;
           }
         });
  return Tensor(out);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  if (input.rank() != 3) throw DimensionError("conv2d: input must be [C x H x W]");
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be [Cout x Cin x kh x kw]");
  const std::int64_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) throw DimensionError("conv2d: channel counts differ");
  if (bias.numel() != cout) throw DimensionError("conv2d: bias length must equal Cout");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: output would be empty");
  auto out = make_node({cout, oh, ow});
  const double* in = input.data().data();
  const double* wt = weight.data().data();
  const double* bs = bias.data().data();
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double acc = bs[co];
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              acc += in[(ci * h + iy) * w + ix] * wt[((co * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        out->data[static_cast<size_t>((co * oh + oy) * ow + ox)] = acc;
      }
    }
  }
  auto pi = input.node(), pw = weight.node(), pb = bias.node();
  attach(out, {pi, pw, pb},
         [pi, pw, pb, cin, h, w, cout, kh, kw, oh, ow, stride, padding](TensorNode& self) {
           const double* g = self.grad.data();
           if (pb->requires_grad) {
             pb->ensure_grad();
             for (std::int64_t co = 0; co < cout; ++co) {
               double acc = 0.0;
               for (std::int64_t i = 0; i < oh * ow; ++i) acc += g[co * oh * ow + i];
               pb->grad[static_cast<size_t>(co)] += acc;
             }
           }
           if (pi->requires_grad) pi->ensure_grad();
           if (pw->requires_grad) pw->ensure_grad();
           if (!pi->requires_grad && !pw->requires_grad) return;
           for (std::int64_t co = 0; co < cout; ++co) {
             for (std::int64_t oy = 0; oy < oh; ++oy) {
               for (std::int64_t ox = 0; ox < ow; ++ox) {
                 const double gv = g[(co * oh + oy) * ow + ox];
                 if (gv == 0.0) continue;
                 for (std::int64_t ci = 0; ci < cin; ++ci) {
                   for (std::int64_t ky = 0; ky < kh; ++ky) {
                     const std::int64_t iy = oy * stride - padding + ky;
                     if (iy < 0 || iy >= h) continue;
                     for (std::int64_t kx = 0; kx < kw; ++kx) {
                       const std::int64_t ix = ox * stride - padding + kx;
                       if (ix < 0 || ix >= w) continue;
                       const size_t in_idx = static_cast<size_t>((ci * h + iy) * w + ix);
                       const size_t wt_idx =
                           static_cast<size_t>(((co * cin + ci) * kh + ky) * kw + kx);
                       if (pi->requires_grad) pi->grad[in_idx] += gv * pw->data[wt_idx];
                       if (pw->requires_grad) pw->grad[wt_idx] += gv * pi->data[in_idx];
                     }
                   }
                 }
               }
             }
           }
         });
  return Tensor(out);
}

Tensor cross_entropy_logits(const Tensor& logits, std::int64_t label) {
  const std::int64_t k = logits.numel();
  if (label < 0 || label >= k)
    throw IndexError("cross_entropy_logits: label " + std::to_string(label) +
                     " out of range for " + std::to_string(k) + " classes");
  const auto& zd = logits.data();
  double mx = zd[0];
  for (double v : zd) mx = std::max(mx, v);
  double denom = 0.0;
  for (double v : zd) denom += std::exp(v - mx);
  const double lse = mx + std::log(denom);
  auto out = make_node({1});
  out->data[0] = lse - zd[static_cast<size_t>(label)];
  auto pz = logits.node();
  attach(out, {pz}, [pz, label, mx, denom](TensorNode& self) {
    pz->ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < pz->data.size(); ++i) {
      const double soft = std::exp(pz->data[i] - mx) / denom;
      pz->grad[i] += g * (soft - (static_cast<std::int64_t>(i) == label ? 1.0 : 0.0));
    }
  });
  return Tensor(out);
}

namespace {

void check_rpe_args(const Tensor& mat, const Tensor& table, const std::vector<int>& buckets,
                    std::int64_t n, const char* op) {
  if (mat.rank() != 2 || table.rank() != 2)
    throw DimensionError(std::string(op) + ": operands must be 2-D");
  if (buckets.size() != static_cast<size_t>(n * n))
    throw DimensionError(std::string(op) + ": bucket table must be N x N");
  for (int b : buckets)
    if (b < 0 || b >= table.dim(0))
      throw IndexError(std::string(op) + ": bucket index out of table range");
}

}  // namespace

Tensor rpe_logits_q(const Tensor& q, const Tensor& table, const std::vector<int>& buckets) {
  const std::int64_t n = q.dim(0), d = q.dim(1);
  check_rpe_args(q, table, buckets, n, "rpe_logits_q");
  if (table.dim(1) != d) throw DimensionError("rpe_logits_q: head widths differ");
  auto out = make_node({n, n});
  const auto& qd = q.data();
  const auto& td = table.data();
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t b = 0; b < n; ++b) {
      const double* trow = td.data() + buckets[static_cast<size_t>(a * n + b)] * d;
      const double* qrow = qd.data() + a * d;
      double acc = 0.0;
      for (std::int64_t j = 0; j < d; ++j) acc += qrow[j] * trow[j];
      out->data[static_cast<size_t>(a * n + b)] = acc;
    }
  auto pq = q.node(), pt = table.node();
  attach(out, {pq, pt}, [pq, pt, buckets, n, d](TensorNode& self) {
    if (pq->requires_grad) pq->ensure_grad();
    if (pt->requires_grad) pt->ensure_grad();
    for (std::int64_t a = 0; a < n; ++a)
      for (std::int64_t b = 0; b < n; ++b) {
        const double g = self.grad[static_cast<size_t>(a * n + b)];
        if (g == 0.0) continue;
        const std::int64_t u = buckets[static_cast<size_t>(a * n + b)];
        for (std::int64_t j = 0; j < d; ++j) {
          if (pq->requires_grad)
            pq->grad[static_cast<size_t>(a * d + j)] += g * pt->data[static_cast<size_t>(u * d + j)];
          if (pt->requires_grad)
            pt->grad[static_cast<size_t>(u * d + j)] += g * pq->data[static_cast<size_t>(a * d + j)];
        }
      }
  });
  return Tensor(out);
}

Tensor rpe_logits_k(const Tensor& k, const Tensor& table, const std::vector<int>& buckets) {
  const std::int64_t n = k.dim(0), d = k.dim(1);
  check_rpe_args(k, table, buckets, n, "rpe_logits_k");
  if (table.dim(1) != d) throw DimensionError("rpe_logits_k: head widths differ");
  auto out = make_node({n, n});
  const auto& kd = k.data();
  const auto& td = table.data();
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t b = 0; b < n; ++b) {
      const double* trow = td.data() + buckets[static_cast<size_t>(a * n + b)] * d;
      const double* krow = kd.data() + b * d;
      double acc = 0.0;
      for (std::int64_t j = 0; j < d; ++j) acc += krow[j] * trow[j];
      out->data[static_cast<size_t>(a * n + b)] = acc;
    }
  auto pk = k.node(), pt = table.node();
  attach(out, {pk, pt}, [pk, pt, buckets, n, d](TensorNode& self) {
    if (pk->requires_grad) pk->ensure_grad();
    if (pt->requires_grad) pt->ensure_grad();
    for (std::int64_t a = 0; a < n; ++a)
      for (std::int64_t b = 0; b < n; ++b) {
        const double g = self.grad[static_cast<size_t>(a * n + b)];
        if (g == 0.0) continue;
        const std::int64_t u = buckets[static_cast<size_t>(a * n + b)];
        for (std::int64_t j = 0; j < d; ++j) {
          if (pk->requires_grad)
            pk->grad[static_cast<size_t>(b * d + j)] += g * pt->data[static_cast<size_t>(u * d + j)];
          if (pt->requires_grad)
            pt->grad[static_cast<size_t>(u * d + j)] += g * pk->data[static_cast<size_t>(b * d + j)];
        }
      }
  });
  return Tensor(out);
}

Tensor rpe_values(const Tensor& attn, const Tensor& table, const std::vector<int>& buckets) {
  if (attn.rank() != 2 || attn.dim(0) != attn.dim(1))
    throw DimensionError("rpe_values: attention must be N x N");
  const std::int64_t n = attn.dim(0);
  const std::int64_t d = table.dim(1);
  check_rpe_args(attn, table, buckets, n, "rpe_values");
  auto out = make_node({n, d});
  const auto& ad = attn.data();
  const auto& td = table.data();
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t b = 0; b < n; ++b) {
      const double w = ad[static_cast<size_t>(a * n + b)];
      const double* trow = td.data() + buckets[static_cast<size_t>(a * n + b)] * d;
      double* orow = out->data.data() + a * d;
      for (std::int64_t j = 0; j < d; ++j) orow[j] += w * trow[j];
    }
  auto pa = attn.node(), pt = table.node();
  attach(out, {pa, pt}, [pa, pt, buckets, n, d](TensorNode& self) {
    if (pa->requires_grad) pa->ensure_grad();
    if (pt->requires_grad) pt->ensure_grad();
    for (std::int64_t a = 0; a < n; ++a)
      for (std::int64_t b = 0; b < n; ++b) {
        const std::int64_t u = buckets[static_cast<size_t>(a * n + b)];
        const double* grow = self.grad.data() + a * d;
        if (pa->requires_grad) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < d; ++j) acc += grow[j] * pt->data[static_cast<size_t>(u * d + j)];
          pa->grad[static_cast<size_t>(a * n + b)] += acc;
        }
        if (pt->requires_grad) {
          const double w = pa->data[static_cast<size_t>(a * n + b)];
          for (std::int64_t j = 0; j < d; ++j)
            pt->grad[static_cast<size_t>(u * d + j)] += w * grow[j];
        }
      }
  });
  return Tensor(out);
}

}  // namespace dsvpr
