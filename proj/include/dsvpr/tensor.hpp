#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dsvpr {

struct TensorNode;

/// Dense row-major tensor of doubles with reverse-mode differentiation.
///
/// A Tensor is a cheap handle onto a graph node. Operations on tensors record
/// their inputs and a backward closure; calling backward() on a scalar result
/// walks the recorded graph in reverse topological order and accumulates
/// gradients into every node with requires_grad set. Recording can be
/// suspended with NoGradGuard (finite-difference probes, inference).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const std::vector<std::int64_t>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<std::int64_t>& shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(const std::vector<std::int64_t>& shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const;
  std::int64_t rank() const;
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  bool requires_grad() const;
  void set_requires_grad(bool v);

  /// Gradient accumulator; empty until backward() has touched this node.
  const std::vector<double>& grad() const;
  bool has_grad() const;
  void zero_grad();

  double value() const;  // single-element tensors only
  double at(std::int64_t i) const;
  double at(std::int64_t i, std::int64_t j) const;
  double& mut(std::int64_t i);
  double& mut(std::int64_t i, std::int64_t j);

  /// Reverse pass from a single-element tensor; seeds d(this)/d(this) = 1.
  void backward() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // reads this->grad, writes parents' grads

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Suspends graph recording for its lifetime (current thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

// ----- elementwise and structural ops -----

Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor sub(const Tensor& a, const Tensor& b);            // same shape
Tensor mul(const Tensor& a, const Tensor& b);            // same shape
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_rows(const Tensor& m, const Tensor& row);     // [N x C] + [C] broadcast
Tensor matmul(const Tensor& a, const Tensor& b);         // [m x k] . [k x n]
Tensor transpose(const Tensor& a);                       // 2-D
Tensor reshape(const Tensor& a, const std::vector<std::int64_t>& shape);
Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count);  // 2-D
Tensor concat_cols(const std::vector<Tensor>& parts);    // 2-D, equal row counts
Tensor concat_vec(const Tensor& a, const Tensor& b);     // 1-D
Tensor sum(const Tensor& a);                             // -> [1]
Tensor silu(const Tensor& a);

/// Numerically stable softmax over the trailing axis.
Tensor softmax_rows(const Tensor& x);

/// Row-wise standardization over the trailing axis, then gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Scales a vector to unit L2 norm; below eps the vector is divided by eps
/// instead, so the zero vector maps to itself.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

/// Generalized mean over rows: out[c] = ((1/N) sum_a max(t[a,c], kGemClamp)^p)^(1/p).
/// p is a learnable single-element tensor, p > 0.
Tensor gem_pool(const Tensor& tokens, const Tensor& p);
inline constexpr double kGemClamp = 1e-6;

/// Strided 2-D convolution: input [Cin x H x W], weight [Cout x Cin x kh x kw],
/// bias [Cout], zero padding.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

/// -log softmax(logits)[label] with a stable log-sum-exp. logits is [K] or [K x 1].
Tensor cross_entropy_logits(const Tensor& logits, std::int64_t label);

// Relative-position terms for attention. `buckets` is an N x N index table
// (row-major) into the rows of the corresponding table tensor.
//   rpe_logits_q: out[a,b] = <q[a,:], table[buckets[a,b],:]>
//   rpe_logits_k: out[a,b] = <k[b,:], table[buckets[a,b],:]>
//   rpe_values:   out[a,:] = sum_b attn[a,b] * table[buckets[a,b],:]
Tensor rpe_logits_q(const Tensor& q, const Tensor& table, const std::vector<int>& buckets);
Tensor rpe_logits_k(const Tensor& k, const Tensor& table, const std::vector<int>& buckets);
Tensor rpe_values(const Tensor& attn, const Tensor& table, const std::vector<int>& buckets);

}  // namespace dsvpr
