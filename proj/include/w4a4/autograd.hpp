#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "w4a4/tensor.hpp"

namespace w4a4 {

/// One recorded operation on the tape. `backward_fn` reads `grad` and
/// accumulates into the grads of `inputs`.
struct TapeNode {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  std::function<void(TapeNode&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer();
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<TapeNode> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.numel() > 0; }
  /// Gradient (zeros of the value's shape if none has been accumulated).
  Tensor grad() const;
  void zero_grad();
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<TapeNode>& node() const { return node_; }

 private:
  std::shared_ptr<TapeNode> node_;
};

/// Leaf that accumulates gradients.
Var parameter(Tensor value);
/// Leaf without gradient.
Var constant(Tensor value);

/// Records an op. `backward_fn` is only kept when gradient recording is
/// enabled and at least one input requires a gradient, or `always_record` is
/// set (ops that own parameters outside the tape, such as clip values).
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(TapeNode&)> backward_fn,
            bool always_record = false);

/// Adds `delta` into `node`'s gradient if it requires one.
void accumulate_grad(TapeNode& node, const Tensor& delta);

/// Reverse-mode sweep from a scalar root, seeding d(root) = 1. Each node is
/// visited once, in reverse topological order.
void backward(const Var& root);

/// Disables tape recording in the current thread for its lifetime.
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

namespace ops {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// x[r x c] + bias[c] broadcast over rows.
Var add_row(const Var& x, const Var& bias);
/// x * w + b, with b broadcast over rows.
Var linear(const Var& x, const Var& w, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);

inline constexpr double kLayerNormEps = 1e-5;
Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps);

/// tanh-approximation GELU.
Var gelu(const Var& x);
float gelu_value(float x);

/// Row softmax of a square score matrix; with `causal`, entries j > i get
/// probability exactly 0 (additive -inf mask).
Var softmax_masked(const Var& scores, bool causal);

/// Multi-head causal self-attention over a packed qkv activation.
/// qkv is [batch*seq_len x 3d] laid out as [Q | K | V]; output is [batch*seq_len x d].
/// Scores are multiplied by `score_scale` before masking.
Var causal_attention(const Var& qkv, std::size_t seq_len, std::size_t n_heads, double score_scale);

/// Rows of `table` selected by `ids`.
Var embedding(const Var& table, std::span<const std::int32_t> ids);

/// Mean negative log-likelihood (nats) of `targets` under row-softmax(logits).
Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets);

}  // namespace ops
}  // namespace w4a4
