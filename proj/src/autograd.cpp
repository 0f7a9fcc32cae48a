#include "w4a4/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "w4a4/errors.hpp"

namespace w4a4 {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& TapeNode::grad_buffer() {
  if (grad.numel() != value.numel()) grad = Tensor(value.shape());
  return grad;
}

Tensor Var::grad() const {
  if (node_->grad.numel() == node_->value.numel()) return node_->grad;
  return Tensor(node_->value.shape());
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var parameter(Tensor value) {
  auto node = std::make_shared<TapeNode>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var constant(Tensor value) {
  auto node = std::make_shared<TapeNode>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(TapeNode&)> backward_fn,
            bool always_record) {
  auto node = std::make_shared<TapeNode>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = always_record;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

void accumulate_grad(TapeNode& node, const Tensor& delta) {
  if (!node.requires_grad) return;
  Tensor& g = node.grad_buffer();
  require_same_shape(g, delta, "accumulate_grad");
  auto gd = g.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += dd[i];
}

void backward(const Var& root) {
  if (!root.defined()) throw ContractError("backward on undefined variable");
  if (root.value().numel() != 1) throw DimensionError("backward root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order; inputs are visited in
  // their recorded order so the sweep is deterministic.
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TapeNode* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* node = *it;
    if (node->backward_fn && node->grad.numel() > 0) node->backward_fn(*node);
  }
}

namespace ops {

Var matmul(const Var& a, const Var& b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return make_op(std::move(out), {a, b}, [](TapeNode& self) {
    TapeNode& an = *self.inputs[0];
    TapeNode& bn = *self.inputs[1];
    if (an.requires_grad) accumulate_grad(an, kernels::matmul_nt(self.grad, bn.value));
    if (bn.requires_grad) accumulate_grad(bn, kernels::matmul_tn(an.value, self.grad));
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return make_op(std::move(out), {a, b}, [](TapeNode& self) {
    accumulate_grad(*self.inputs[0], self.grad);
    accumulate_grad(*self.inputs[1], self.grad);
  });
}

namespace {

Tensor column_sums(const Tensor& g) {
  const std::size_t r = g.rows(), c = g.cols();
  std::vector<double> acc(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = g.row(i);
    for (std::size_t j = 0; j < c; ++j) acc[j] += row[j];
  }
  Tensor out({c});
  for (std::size_t j = 0; j < c; ++j) out[j] = static_cast<float>(acc[j]);
  return out;
}

void check_bias(const Tensor& x, const Tensor& bias, const char* what) {
  if (bias.rank() != 1 || bias.dim(0) != x.cols()) {
    throw DimensionError(std::string(what) + ": bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
}

}  // namespace

Var add_row(const Var& x, const Var& bias) {
  require_rank2(x.value(), "add_row");
  check_bias(x.value(), bias.value(), "add_row");
  Tensor out = x.value();
  const std::size_t r = out.rows(), c = out.cols();
  auto bd = bias.value().data();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < c; ++j) row[j] += bd[j];
  }
  return make_op(std::move(out), {x, bias}, [](TapeNode& self) {
    accumulate_grad(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) accumulate_grad(*self.inputs[1], column_sums(self.grad));
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Tensor out = kernels::matmul(x.value(), w.value());
  check_bias(out, b.value(), "linear");
  const std::size_t r = out.rows(), c = out.cols();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < c; ++j) row[j] += bd[j];
  }
  return make_op(std::move(out), {x, w, b}, [](TapeNode& self) {
    TapeNode& xn = *self.inputs[0];
    TapeNode& wn = *self.inputs[1];
    TapeNode& bn = *self.inputs[2];
    if (xn.requires_grad) accumulate_grad(xn, kernels::matmul_nt(self.grad, wn.value));
    if (wn.requires_grad) accumulate_grad(wn, kernels::matmul_tn(xn.value, self.grad));
    if (bn.requires_grad) accumulate_grad(bn, column_sums(self.grad));
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = static_cast<float>(v * factor);
  return make_op(std::move(out), {x}, [factor](TapeNode& self) {
    Tensor g = self.grad;
    for (auto& v : g.data()) v = static_cast<float>(v * factor);
    accumulate_grad(*self.inputs[0], g);
  });
}

Var sum(const Var& x) {
  Tensor out = Tensor::scalar(static_cast<float>(kernels::sum(x.value().data())));
  return make_op(std::move(out), {x}, [](TapeNode& self) {
    Tensor g(self.inputs[0]->value.shape(), self.grad[0]);
    accumulate_grad(*self.inputs[0], g);
  });
}

Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_rank2(x.value(), "layernorm");
  check_bias(x.value(), gain.value(), "layernorm gain");
  check_bias(x.value(), bias.value(), "layernorm bias");
  const std::size_t r = x.value().rows(), c = x.value().cols();
  Tensor out({r, c});
  Tensor xhat({r, c});
  std::vector<double> rstd(r);
  auto gd = gain.value().data();
  auto bd = bias.value().data();
  for (std::size_t i = 0; i < r; ++i) {
    auto in = x.value().row(i);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    auto xr = xhat.row(i);
    auto orow = out.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (in[j] - mean) * rstd[i];
      xr[j] = static_cast<float>(h);
      orow[j] = static_cast<float>(h * gd[j] + bd[j]);
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [xhat = std::move(xhat), rstd = std::move(rstd)](TapeNode& self) {
                   TapeNode& xn = *self.inputs[0];
                   TapeNode& gn = *self.inputs[1];
                   TapeNode& bn = *self.inputs[2];
                   const std::size_t r = xhat.rows(), c = xhat.cols();
                   auto gdat = gn.value.data();
                   if (xn.requires_grad) {
                     Tensor dx({r, c});
                     std::vector<double> dh(c);
                     for (std::size_t i = 0; i < r; ++i) {
                       auto go = self.grad.row(i);
                       auto xr = xhat.row(i);
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                         dh[j] = static_cast<double>(go[j]) * gdat[j];
                         m1 += dh[j];
                         m2 += dh[j] * xr[j];
                       }
                       m1 /= static_cast<double>(c);
                       m2 /= static_cast<double>(c);
                       auto dr = dx.row(i);
                       for (std::size_t j = 0; j < c; ++j) {
                         dr[j] = static_cast<float>(rstd[i] * (dh[j] - m1 - xr[j] * m2));
                       }
                     }
                     accumulate_grad(xn, dx);
                   }
                   if (gn.requires_grad || bn.requires_grad) {
                     std::vector<double> dg(c, 0.0), db(c, 0.0);
                     for (std::size_t i = 0; i < r; ++i) {
                       auto go = self.grad.row(i);
                       auto xr = xhat.row(i);
                       for (std::size_t j = 0; j < c; ++j) {
                         dg[j] += static_cast<double>(go[j]) * xr[j];
                         db[j] += go[j];
                       }
                     }
                     Tensor tg({c}), tb({c});
                     for (std::size_t j = 0; j < c; ++j) {
                       tg[j] = static_cast<float>(dg[j]);
                       tb[j] = static_cast<float>(db[j]);
                     }
                     accumulate_grad(gn, tg);
                     accumulate_grad(bn, tb);
                   }
                 });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

float gelu_value(float xf) {
  const double x = xf;
  return static_cast<float>(0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))));
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = gelu_value(v);
  return make_op(std::move(out), {x}, [](TapeNode& self) {
    TapeNode& xn = *self.inputs[0];
    Tensor g = self.grad;
    auto xd = xn.value.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) {
      const double v = xd[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      gd[i] = static_cast<float>(gd[i] * d);
    }
    accumulate_grad(xn, g);
  });
}

namespace {

// dS = P * (dP - sum_k P_k dP_k) for one row of length n.
void softmax_row_backward(std::span<const float> p, std::span<const float> dp, std::span<float> ds) {
  double dot = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) dot += static_cast<double>(p[j]) * dp[j];
  for (std::size_t j = 0; j < p.size(); ++j) ds[j] = static_cast<float>(p[j] * (dp[j] - dot));
}

}  // namespace

Var softmax_masked(const Var& scores, bool causal) {
  require_rank2(scores.value(), "softmax_masked");
  const std::size_t n = scores.value().rows();
  if (scores.value().cols() != n) {
    throw DimensionError("softmax_masked: score matrix must be square, got " + shape_str(scores.shape()));
  }
  Tensor out = scores.value();
  for (std::size_t i = 0; i < n; ++i) kernels::softmax_prefix(out.row(i), causal ? i + 1 : n);
  Tensor probs = out;
  return make_op(std::move(out), {scores}, [probs = std::move(probs)](TapeNode& self) {
    const std::size_t n = probs.rows();
    Tensor ds({n, n});
    for (std::size_t i = 0; i < n; ++i) softmax_row_backward(probs.row(i), self.grad.row(i), ds.row(i));
    accumulate_grad(*self.inputs[0], ds);
  });
}

Var causal_attention(const Var& qkv, std::size_t seq_len, std::size_t n_heads, double score_scale) {
  const Tensor& in = qkv.value();
  require_rank2(in, "causal_attention");
  const std::size_t rows = in.rows();
  if (in.cols() % 3 != 0) throw DimensionError("causal_attention: qkv width must be 3*d");
  const std::size_t d = in.cols() / 3;
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: d not divisible by n_heads");
  const std::size_t batch = rows / seq_len;
  const std::size_t dh = d / n_heads;
  const std::size_t w = 3 * d;

  Tensor out({rows, d});
  // probabilities per (batch, head), lower-triangular L x L blocks
  auto probs = std::make_shared<std::vector<float>>(batch * n_heads * seq_len * seq_len, 0.0f);
  const float* x = in.data().data();
  std::vector<double> acc(dh);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      float* pblock = probs->data() + (b * n_heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const float* q = x + (b * seq_len + i) * w + h * dh;
        std::span<float> prow(pblock + i * seq_len, seq_len);
        for (std::size_t j = 0; j <= i; ++j) {
          const float* k = x + (b * seq_len + j) * w + d + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += static_cast<double>(q[t]) * k[t];
          prow[j] = static_cast<float>(s * score_scale);
        }
        kernels::softmax_prefix(prow, i + 1);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const float* v = x + (b * seq_len + j) * w + 2 * d + h * dh;
          const double pj = prow[j];
          for (std::size_t t = 0; t < dh; ++t) acc[t] += pj * v[t];
        }
        float* o = out.data().data() + (b * seq_len + i) * d + h * dh;
        for (std::size_t t = 0; t < dh; ++t) o[t] = static_cast<float>(acc[t]);
      }
    }
  }

  return make_op(std::move(out), {qkv}, [probs, seq_len, n_heads, score_scale](TapeNode& self) {
    TapeNode& qn = *self.inputs[0];
    const Tensor& in = qn.value;
    const std::size_t rows = in.rows();
    const std::size_t d = in.cols() / 3;
    const std::size_t dh = d / n_heads;
    const std::size_t w = 3 * d;
    const std::size_t batch = rows / seq_len;
    const float* x = in.data().data();
    const float* go = self.grad.data().data();
    std::vector<double> dx(rows * w, 0.0);
    std::vector<float> dp(seq_len), ds(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const float* pblock = probs->data() + (b * n_heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          const float* gi = go + (b * seq_len + i) * d + h * dh;
          const float* prow = pblock + i * seq_len;
          for (std::size_t j = 0; j <= i; ++j) {
            const float* v = x + (b * seq_len + j) * w + 2 * d + h * dh;
            double s = 0.0;
            for (std::size_t t = 0; t < dh; ++t) s += static_cast<double>(gi[t]) * v[t];
            dp[j] = static_cast<float>(s);
            double* dv = dx.data() + (b * seq_len + j) * w + 2 * d + h * dh;
            for (std::size_t t = 0; t < dh; ++t) dv[t] += static_cast<double>(prow[j]) * gi[t];
          }
          softmax_row_backward(std::span<const float>(prow, i + 1), std::span<const float>(dp.data(), i + 1),
                               std::span<float>(ds.data(), i + 1));
          const float* q = x + (b * seq_len + i) * w + h * dh;
          double* dq = dx.data() + (b * seq_len + i) * w + h * dh;
          for (std::size_t j = 0; j <= i; ++j) {
            const double c = static_cast<double>(ds[j]) * score_scale;
            const float* k = x + (b * seq_len + j) * w + d + h * dh;
            double* dk = dx.data() + (b * seq_len + j) * w + d + h * dh;
            for (std::size_t t = 0; t < dh; ++t) {
              dq[t] += c * k[t];
              dk[t] += c * q[t];
            }
          }
        }
      }
    }
    Tensor g(in.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) g[i] = static_cast<float>(dx[i]);
    accumulate_grad(qn, g);
  });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids) {
  const Tensor& t = table.value();
  require_rank2(t, "embedding");
  const std::size_t vocab = t.rows(), d = t.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(vocab) + ")");
    }
    auto src = t.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_op(std::move(out), {table}, [saved = std::move(saved)](TapeNode& self) {
    TapeNode& tn = *self.inputs[0];
    const std::size_t d = tn.value.cols();
    std::vector<double> acc(tn.value.numel(), 0.0);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      auto g = self.grad.row(i);
      double* dst = acc.data() + static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
    }
    Tensor g(tn.value.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) g[i] = static_cast<float>(acc[i]);
    accumulate_grad(tn, g);
  });
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets) {
  const Tensor& lg = logits.value();
  require_rank2(lg, "cross_entropy");
  const std::size_t n = lg.rows(), v = lg.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per logit row required");
  if (n == 0) throw InputError("cross_entropy: empty batch");
  Tensor probs({n, v});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw InputError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0, " + std::to_string(v) +
                       ")");
    }
    auto row = lg.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (float x : row) mx = std::max(mx, static_cast<double>(x));
    double z = 0.0;
    for (float x : row) z += std::exp(x - mx);
    const double logz = mx + std::log(z);
    total += logz - row[static_cast<std::size_t>(targets[i])];
    auto pr = probs.row(i);
    for (std::size_t j = 0; j < v; ++j) pr[j] = static_cast<float>(std::exp(row[j] - logz));
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return make_op(std::move(out), {logits},
                 [probs = std::move(probs), saved = std::move(saved)](TapeNode& self) {
                   const std::size_t n = probs.rows();
                   const double g = static_cast<double>(self.grad[0]) / static_cast<double>(n);
                   Tensor d = probs;
                   for (std::size_t i = 0; i < n; ++i) {
                     auto row = d.row(i);
                     row[static_cast<std::size_t>(saved[i])] -= 1.0f;
                     for (auto& x : row) x = static_cast<float>(x * g);
                   }
                   accumulate_grad(*self.inputs[0], d);
                 });
}

}  // namespace ops
}  // namespace w4a4
