#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
// Every op builds a node holding its value and, when any input requires a
// gradient, a closure that pushes the node's gradient back to its inputs.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fcl/tensor.hpp"

namespace fcl::ad {

struct Node {
  Tensor value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  /// Gradient buffer, zero-initialised on first use.
  std::vector<double>& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizer updates; never use inside a live graph.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient as a tensor (zeros when nothing has been accumulated).
  Tensor grad() const;
  std::span<const double> grad_data() const { return node_->grad; }
  std::span<double> mutable_grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  bool same_storage(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
void backward(const Var& loss);

// ---- elementwise and structural ------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// x[r x c] + bias[c] broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
/// x + constant tensor of identical shape.
Var add_const(const Var& x, const Tensor& c);
Var relu(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
/// Scalar sum(x * c) for a constant c of identical shape.
Var dot_const(const Var& x, const Tensor& c);

Var matmul(const Var& a, const Var& b);
/// a[m x k] * b[n x k]^T -> [m x n].
Var matmul_nt(const Var& a, const Var& b);

/// Rows of table selected by ids; gradient scatter-adds into the table.
Var embedding(const Var& table, std::span<const int> ids);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var concat_cols(const Var& a, const Var& b);

// ---- normalisation / probability -----------------------------------------

Var row_softmax(const Var& x);
Var log_softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);

/// Inverted dropout. The mask is drawn from `stream`; rate 0 is identity.
Var dropout(const Var& x, double rate, RngStream& stream);

// ---- similarity ------------------------------------------------------------

/// Rows scaled to unit L2 norm. Throws ZeroNormRow with the row index.
Var normalize_rows(const Var& x);
Var cosine_sim_matrix(const Var& s, const Var& t);
/// Per-row dot product of two equally shaped matrices -> [rows].
Var row_dot(const Var& a, const Var& b);
/// out_i = log(sum_j w_ij * exp(x_ij)); w constant, nonnegative, with at
/// least one positive weight per row.
Var weighted_logsumexp(const Var& x, const Tensor& weights);

// ---- attention -------------------------------------------------------------

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  /// Valid key count per batch row; keys at or beyond it are masked.
  std::vector<std::size_t> key_lengths;
};

/// Scaled dot-product multi-head attention on row-stacked sequences:
/// q is [batch*q_len x d], k and v are [batch*k_len x d].
Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout);

// ---- losses ----------------------------------------------------------------

/// Mean label-smoothed cross entropy over probability rows. The gold token
/// receives 1-eps, every other column eps/(V-1). When `ignore_column` is set
/// that column receives no mass and the rest share eps/(V-2).
Var label_smoothed_ce(const Var& probs, std::span<const int> gold, double eps,
                      std::optional<int> ignore_column = std::nullopt);
/// Same objective evaluated from logits through a fused log-softmax.
Var label_smoothed_ce_logits(const Var& logits, std::span<const int> gold, double eps,
                             std::optional<int> ignore_column = std::nullopt);

// ---- verification ----------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the analytic gradient of scalar-valued f at `point` against
/// central differences, componentwise.
GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& point,
                           double eps = 1e-5);

/// Same comparison for a closure over existing parameter leaves: each
/// component of each parameter is perturbed in place and restored.
GradCheckReport grad_check(const std::function<Var()>& f, const std::vector<Var>& params,
                           double eps = 1e-5);

}  // namespace fcl::ad
