#include "fcl/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "fcl/error.hpp"

namespace fcl::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

CMatMap as_matrix(const Tensor& t) {
  return CMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

MatMap as_matrix(std::vector<double>& buf, std::size_t rows, std::size_t cols) {
  return MatMap(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) +
                                              " vs " + shape_string(b.shape()));
  }
}

void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
  }
}

/// Builds the result node; attaches inputs and the backward closure only
/// when some input participates in differentiation.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

/// Gradient buffer of input `i`, or nullptr when it takes no gradient.
std::vector<double>* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return &in.grad_buffer();
}

}  // namespace

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(shape());
  return Tensor(shape(), node_->grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
  if (loss.size() != 1) {
    throw Error(ErrorCode::NonScalarLoss,
                "backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  if (loss.node()->is_leaf()) {
    loss.node()->grad_buffer()[0] += 1.0;
    return;
  }

  // iterative post-order DFS gives a topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf() && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad.clear();
  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return make_result(std::move(out), {a}, [factor](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  require(bias.size() == x.cols(), ErrorCode::ShapeMismatch,
          "add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  Tensor out = x.value();
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias.value()[j];
  }
  return make_result(std::move(out), {x, bias}, [r, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += self.grad[i * c + j];
      }
    }
  });
}

Var add_const(const Var& x, const Tensor& c) {
  require(x.shape() == c.shape(), ErrorCode::ShapeMismatch,
          "add_const: " + shape_string(x.shape()) + " vs " + shape_string(c.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return make_result(std::move(out), {x}, [](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (xv[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor::scalar(s), {x}, [](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const double up = self.grad[0];
      for (auto& v : *g) v += up;
    }
  });
}

Var mean(const Var& x) {
  require(x.size() > 0, ErrorCode::ShapeMismatch, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var dot_const(const Var& x, const Tensor& c) {
  require(x.shape() == c.shape(), ErrorCode::ShapeMismatch,
          "dot_const: " + shape_string(x.shape()) + " vs " + shape_string(c.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += x.value()[i] * c[i];
  return make_result(Tensor::scalar(s), {x}, [c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += up * c[i];
    }
  });
}

// ---- matrix products ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: inner dimensions " +
                                              shape_string(a.shape()) + " x " +
                                              shape_string(b.shape()));
  }
  Tensor out({m, n});
  as_matrix(out.storage(), m, n).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    CMatMap up(self.grad.data(), m, n);
    if (auto* g = input_grad(self, 0)) {
      as_matrix(*g, m, k).noalias() += up * as_matrix(self.inputs[1]->value).transpose();
    }
    if (auto* g = input_grad(self, 1)) {
      as_matrix(*g, k, n).noalias() += as_matrix(self.inputs[0]->value).transpose() * up;
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw Error(ErrorCode::ShapeMismatch, "matmul_nt: inner dimensions " +
                                              shape_string(a.shape()) + " x " +
                                              shape_string(b.shape()) + "^T");
  }
  Tensor out({m, n});
  as_matrix(out.storage(), m, n).noalias() =
      as_matrix(a.value()) * as_matrix(b.value()).transpose();
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    CMatMap up(self.grad.data(), m, n);
    if (auto* g = input_grad(self, 0)) {
      as_matrix(*g, m, k).noalias() += up * as_matrix(self.inputs[1]->value);
    }
    if (auto* g = input_grad(self, 1)) {
      as_matrix(*g, n, k).noalias() += up.transpose() * as_matrix(self.inputs[0]->value);
    }
  });
}

// ---- gathers -------------------------------------------------------------------

Var embedding(const Var& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw Error(ErrorCode::ShapeMismatch,
                  "embedding: id " + std::to_string(idx[i]) + " outside table of " +
                      std::to_string(vocab),
                  i);
    }
    std::copy_n(table.value().data().data() + static_cast<std::size_t>(idx[i]) * d, d,
                out.storage().data() + i * d);
  }
  return make_result(std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = g->data() + static_cast<std::size_t>(idx[i]) * d;
        const double* src = self.grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) {
      throw Error(ErrorCode::ShapeMismatch, "gather_rows: row " + std::to_string(idx[i]) +
                                                " outside " + std::to_string(r) + " rows");
    }
    std::copy_n(x.value().data().data() + idx[i] * c, c, out.storage().data() + i * c);
  }
  return make_result(std::move(out), {x}, [idx = std::move(idx), c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = g->data() + idx[i] * c;
        const double* src = self.grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  require(a.rows() == b.rows(), ErrorCode::ShapeMismatch,
          "concat_cols: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.value().data().data() + i * ca, ca, out.storage().data() + i * c);
    std::copy_n(b.value().data().data() + i * cb, cb, out.storage().data() + i * c + ca);
  }
  return make_result(std::move(out), {a, b}, [r, ca, cb, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < ca; ++j) (*g)[i * ca + j] += self.grad[i * c + j];
      }
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < cb; ++j) (*g)[i * cb + j] += self.grad[i * c + ca + j];
      }
    }
  });
}

// ---- normalisation / probability -------------------------------------------------

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw Error(ErrorCode::NonFinite, std::string(op) + ": non-finite input", i);
    }
  }
}

}  // namespace

Var row_softmax(const Var& x) {
  check_finite(x.value(), "row_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.storage().data() + i * c;
    double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return make_result(std::move(out), {x}, [r, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& p = self.value;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * p[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += p[i * c + j] * (self.grad[i * c + j] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& x) {
  check_finite(x.value(), "log_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.storage().data() + i * c;
    double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return make_result(std::move(out), {x}, [r, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& lp = self.value;
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += self.grad[i * c + j] - std::exp(lp[i * c + j]) * s;
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t d = x.cols(), r = x.rows();
  require(gain.size() == d && bias.size() == d, ErrorCode::ShapeMismatch,
          "layer_norm: gain/bias " + shape_string(gain.shape()) + " vs width " +
              std::to_string(d));
  Tensor out(x.shape());
  // normalised values and inverse std are kept for the backward pass
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(r);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return make_result(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), r, d](Node& self) {
        const auto& gv = self.inputs[1]->value;
        if (auto* g = input_grad(self, 0)) {
          std::vector<double> dh(d);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = self.grad[i * d + j] * gv[j];
              m1 += dh[j];
              m2 += dh[j] * xhat[i * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              (*g)[i * d + j] += inv_std[i] * (dh[j] - m1 - xhat[i * d + j] * m2);
            }
          }
        }
        if (auto* g = input_grad(self, 1)) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j] * xhat[i * d + j];
          }
        }
        if (auto* g = input_grad(self, 2)) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
          }
        }
      });
}

Var dropout(const Var& x, double rate, RngStream& stream) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorCode::InvalidRate, "dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = stream.uniform() >= rate ? keep_scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    }
  });
}

// ---- similarity -------------------------------------------------------------------

Var normalize_rows(const Var& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> inv_norm(r);
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] * out[i * c + j];
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw Error(ErrorCode::ZeroNormRow, "row " + std::to_string(i) + " has zero norm", i);
    }
    inv_norm[i] = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= inv_norm[i];
  }
  return make_result(std::move(out), {x}, [inv_norm = std::move(inv_norm), r, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& u = self.value;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * u[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += inv_norm[i] * (self.grad[i * c + j] - u[i * c + j] * dot);
        }
      }
    }
  });
}

Var cosine_sim_matrix(const Var& s, const Var& t) {
  require_matrix(s, "cosine_sim_matrix");
  require_matrix(t, "cosine_sim_matrix");
  require(s.cols() == t.cols(), ErrorCode::ShapeMismatch,
          "cosine_sim_matrix: " + shape_string(s.shape()) + " vs " + shape_string(t.shape()));
  Var sn = normalize_rows(s);
  Var tn = s.same_storage(t) ? sn : normalize_rows(t);
  return matmul_nt(sn, tn);
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_dot");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.value()[i * c + j] * b.value()[i * c + j];
    out[i] = s;
  }
  return make_result(std::move(out), {a, b}, [r, c](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i] * bv[i * c + j];
      }
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i] * av[i * c + j];
      }
    }
  });
}

Var weighted_logsumexp(const Var& x, const Tensor& weights) {
  require(x.shape() == weights.shape(), ErrorCode::WeightShapeMismatch,
          "weighted_logsumexp: " + shape_string(x.shape()) + " vs weights " +
              shape_string(weights.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r});
  // softmax-like responsibilities w_ij e^{x_ij} / sum, kept for backward
  std::vector<double> resp(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.value().data().data() + i * c;
    const double* wr = weights.data().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (wr[j] > 0.0) mx = std::max(mx, xr[j]);
    }
    if (!std::isfinite(mx)) {
      throw Error(ErrorCode::WeightShapeMismatch,
                  "weighted_logsumexp: row " + std::to_string(i) + " has no positive weight", i);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = wr[j] * std::exp(xr[j] - mx);
      resp[i * c + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < c; ++j) resp[i * c + j] /= s;
    out[i] = mx + std::log(s);
  }
  return make_result(std::move(out), {x}, [resp = std::move(resp), r, c](Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i] * resp[i * c + j];
      }
    }
  });
}

// ---- attention -------------------------------------------------------------------

Var attention(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t B = layout.batch, Lq = layout.q_len, Lk = layout.k_len, H = layout.heads;
  const std::size_t d = q.cols();
  require(H > 0 && d % H == 0, ErrorCode::ShapeMismatch, "attention: width not divisible by heads");
  require(q.rows() == B * Lq && k.rows() == B * Lk && v.rows() == B * Lk && k.cols() == d &&
              v.cols() == d,
          ErrorCode::ShapeMismatch, "attention: operand shapes disagree with layout");
  require(layout.key_lengths.size() == B, ErrorCode::ShapeMismatch,
          "attention: key_lengths size differs from batch");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const double* Q = q.value().data().data();
  const double* K = k.value().data().data();
  const double* V = v.value().data().data();
  Tensor out({B * Lq, d});
  double* O = out.storage().data();
  // probabilities per (batch, head, query, key); masked keys hold zero
  std::vector<double> probs(B * H * Lq * Lk, 0.0);

  auto allowed = [&](std::size_t b, std::size_t t) {
    std::size_t n = std::min(layout.key_lengths[b], Lk);
    if (layout.causal) n = std::min(n, t + 1);
    return n;
  };

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < Lq; ++t) {
        const std::size_t n = allowed(b, t);
        if (n == 0) continue;
        double* P = probs.data() + ((b * H + h) * Lq + t) * Lk;
        const double* qr = Q + (b * Lq + t) * d + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u < n; ++u) {
          const double* kr = K + (b * Lk + u) * d + off;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qr[e] * kr[e];
          P[u] = s * inv_sqrt;
          mx = std::max(mx, P[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u < n; ++u) {
          P[u] = std::exp(P[u] - mx);
          z += P[u];
        }
        double* orow = O + (b * Lq + t) * d + off;
        for (std::size_t u = 0; u < n; ++u) {
          P[u] /= z;
          const double* vr = V + (b * Lk + u) * d + off;
          for (std::size_t e = 0; e < dh; ++e) orow[e] += P[u] * vr[e];
        }
      }
    }
  }

  return make_result(
      std::move(out), {q, k, v},
      [probs = std::move(probs), layout, B, Lq, Lk, H, d, dh, inv_sqrt](Node& self) {
        auto* gq = input_grad(self, 0);
        auto* gk = input_grad(self, 1);
        auto* gv = input_grad(self, 2);
        const double* Q = self.inputs[0]->value.data().data();
        const double* K = self.inputs[1]->value.data().data();
        const double* V = self.inputs[2]->value.data().data();
        const double* G = self.grad.data();
        std::vector<double> dp(Lk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t t = 0; t < Lq; ++t) {
              std::size_t n = std::min(layout.key_lengths[b], Lk);
              if (layout.causal) n = std::min(n, t + 1);
              if (n == 0) continue;
              const double* P = probs.data() + ((b * H + h) * Lq + t) * Lk;
              const double* grow = G + (b * Lq + t) * d + off;
              double dot = 0.0;
              for (std::size_t u = 0; u < n; ++u) {
                const double* vr = V + (b * Lk + u) * d + off;
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += grow[e] * vr[e];
                dp[u] = s;
                dot += s * P[u];
                if (gv) {
                  double* gvr = gv->data() + (b * Lk + u) * d + off;
                  for (std::size_t e = 0; e < dh; ++e) gvr[e] += P[u] * grow[e];
                }
              }
              const double* qr = Q + (b * Lq + t) * d + off;
              double* gqr = gq ? gq->data() + (b * Lq + t) * d + off : nullptr;
              for (std::size_t u = 0; u < n; ++u) {
                const double ds = P[u] * (dp[u] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kr = K + (b * Lk + u) * d + off;
                if (gqr) {
                  for (std::size_t e = 0; e < dh; ++e) gqr[e] += ds * kr[e];
                }
                if (gk) {
                  double* gkr = gk->data() + (b * Lk + u) * d + off;
                  for (std::size_t e = 0; e < dh; ++e) gkr[e] += ds * qr[e];
                }
              }
            }
          }
        }
      });
}

// ---- losses ------------------------------------------------------------------------

namespace {

struct SmoothingTarget {
  double gold_mass;
  double other_mass;
  std::optional<int> ignore;
};

SmoothingTarget smoothing_target(std::size_t vocab, double eps, std::optional<int> ignore) {
  if (!(eps >= 0.0 && eps < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "label smoothing must be in [0,1)");
  }
  std::size_t others = vocab - 1 - (ignore ? 1 : 0);
  double other = others > 0 ? eps / static_cast<double>(others) : 0.0;
  return {1.0 - eps, other, ignore};
}

void check_gold(std::span<const int> gold, std::size_t n, std::size_t vocab,
                std::optional<int> ignore) {
  if (gold.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "gold ids: " + std::to_string(gold.size()) +
                                              " for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || static_cast<std::size_t>(gold[i]) >= vocab ||
        (ignore && gold[i] == *ignore)) {
      throw Error(ErrorCode::InvalidGoldId, "gold id " + std::to_string(gold[i]), i);
    }
  }
}

double target_mass(const SmoothingTarget& st, int gold, std::size_t j) {
  if (static_cast<int>(j) == gold) return st.gold_mass;
  if (st.ignore && static_cast<int>(j) == *st.ignore) return 0.0;
  return st.other_mass;
}

}  // namespace

Var label_smoothed_ce(const Var& probs, std::span<const int> gold, double eps,
                      std::optional<int> ignore_column) {
  require_matrix(probs, "label_smoothed_ce");
  const std::size_t n = probs.rows(), V = probs.cols();
  check_gold(gold, n, V, ignore_column);
  const SmoothingTarget st = smoothing_target(V, eps, ignore_column);
  std::vector<int> g(gold.begin(), gold.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < V; ++j) {
      const double q = target_mass(st, g[i], j);
      if (q == 0.0) continue;
      loss -= q * std::log(probs.value()[i * V + j]);
    }
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "label_smoothed_ce");
  return make_result(Tensor::scalar(loss), {probs}, [g = std::move(g), st, n, V](Node& self) {
    if (auto* gr = input_grad(self, 0)) {
      const double up = self.grad[0] / static_cast<double>(n);
      const auto& p = self.inputs[0]->value;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < V; ++j) {
          const double q = target_mass(st, g[i], j);
          if (q != 0.0) (*gr)[i * V + j] -= up * q / p[i * V + j];
        }
      }
    }
  });
}

Var label_smoothed_ce_logits(const Var& logits, std::span<const int> gold, double eps,
                             std::optional<int> ignore_column) {
  require_matrix(logits, "label_smoothed_ce_logits");
  check_finite(logits.value(), "label_smoothed_ce_logits");
  const std::size_t n = logits.rows(), V = logits.cols();
  check_gold(gold, n, V, ignore_column);
  const SmoothingTarget st = smoothing_target(V, eps, ignore_column);
  std::vector<int> g(gold.begin(), gold.end());
  std::vector<double> p(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.value().data().data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < V; ++j) {
      const double lp = row[j] - lse;
      p[i * V + j] = std::exp(lp);
      const double q = target_mass(st, g[i], j);
      if (q != 0.0) loss -= q * lp;
    }
  }
  loss /= static_cast<double>(n);
  return make_result(Tensor::scalar(loss), {logits},
                     [g = std::move(g), p = std::move(p), st, n, V](Node& self) {
                       if (auto* gr = input_grad(self, 0)) {
                         const double up = self.grad[0] / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < V; ++j) {
                             (*gr)[i * V + j] += up * (p[i * V + j] - target_mass(st, g[i], j));
                           }
                         }
                       }
                     });
}

// ---- verification -------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& point,
                           double eps) {
  Var x = Var::parameter(point);
  Var y = f(x);
  backward(y);
  const Tensor analytic = x.grad();

  GradCheckReport report;
  Tensor probe = point;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(Var::constant(probe)).item();
    probe[i] = orig - eps;
    const double fm = f(Var::constant(probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > report.max_rel_error || i == 0) {
      report.max_rel_error = std::max(report.max_rel_error, rel);
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  return report;
}

GradCheckReport grad_check(const std::function<Var()>& f, const std::vector<Var>& params,
                           double eps) {
  for (auto p : params) p.zero_grad();
  backward(f());
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  std::size_t flat = 0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var p = params[k];
    auto& data = p.mutable_value().storage();
    for (std::size_t i = 0; i < data.size(); ++i, ++flat) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = f().item();
      data[i] = orig - eps;
      const double fm = f().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > report.max_rel_error || flat == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_index = flat;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace fcl::ad
