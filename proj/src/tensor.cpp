#include "spm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace spm {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  if (data.size() != element_count(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->data.size(), 0.0);
  return node;
}

template <typename... Ts>
bool any_requires_grad(const Ts&... ts) {
  return Tape::active().recording() && (ts.requires_grad() || ...);
}

// Builds the op output and, if any input needs gradients, registers
// `backward_fn(out_node)` on the active tape.
template <typename Fn, typename... Ts>
Tensor finish(Shape shape, std::vector<double> data, Fn&& backward_fn, const Ts&... inputs) {
  const bool track = any_requires_grad(inputs...);
  auto node = new_node(std::move(shape), std::move(data), track);
  if (track) {
    TensorNode* out = node.get();
    Tape::active().record(node, [fn = std::forward<Fn>(backward_fn), out]() { fn(*out); });
  }
  return make_tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

// out[m×n] += a[m×k] * b[k×n]
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor make_tensor(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(element_count(shape), value);
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const { return shape().size() == 1 ? 1 : shape()[0]; }

std::size_t Tensor::cols() const { return shape().back(); }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  return Tensor(new_node(node_->shape, node_->data, node_->requires_grad));
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const std::shared_ptr<TensorNode>& output, std::function<void()> backward) {
  entries_.push_back({output, std::move(backward)});
}

void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward: root must be a scalar, got " +
                        (root.defined() ? shape_string(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) throw ContractError("backward: root is not on the gradient tape");

  auto& tape = Tape::active();
  auto it = std::find_if(tape.entries_.rbegin(), tape.entries_.rend(),
                         [&](const Tape::Entry& e) { return e.output == root.node(); });
  if (it == tape.entries_.rend()) throw ContractError("backward: root is not on the gradient tape");

  root.node()->grad[0] += 1.0;
  for (; it != tape.entries_.rend(); ++it) {
    const auto& g = it->output->grad;
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
    it->backward();
  }
  tape.clear();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish(
      {m, n}, std::move(out),
      [an, bn, m, k, n](TensorNode& o) {
        if (an->requires_grad) {
          // dA += dO * B^T
          for (std::size_t i = 0; i < m; ++i) {
            const double* go = &o.grad[i * n];
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = &bn->data[p * n];
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += go[j] * brow[j];
              an->grad[i * k + p] += acc;
            }
          }
        }
        if (bn->requires_grad) {
          // dB += A^T * dO
          for (std::size_t i = 0; i < m; ++i) {
            const double* go = &o.grad[i * n];
            for (std::size_t p = 0; p < k; ++p) {
              const double av = an->data[i * k + p];
              if (av == 0.0) continue;
              double* gb = &bn->grad[p * n];
              for (std::size_t j = 0; j < n; ++j) gb[j] += av * go[j];
            }
          }
        }
      },
      a, b);
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto an = a.node();
  return finish(
      {n, m}, std::move(out),
      [an, m, n](TensorNode& o) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o.grad[j * m + i];
      },
      a);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish(
      a.shape(), std::move(out),
      [an, bn](TensorNode& o) {
        if (an->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
      },
      a, b);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish(
      a.shape(), std::move(out),
      [an, bn](TensorNode& o) {
        if (an->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
      },
      a, b);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return finish(
      a.shape(), std::move(out),
      [an, bn](TensorNode& o) {
        if (an->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
      },
      a, b);
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an, factor](TensorNode& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * factor;
      },
      a);
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                         shape_string(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  auto an = a.node(), bn = bias.node();
  return finish(
      a.shape(), std::move(out),
      [an, bn, m, n](TensorNode& o) {
        if (an->requires_grad)
          for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) bn->grad[j] += o.grad[i * n + j];
      },
      a, bias);
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an](TensorNode& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          an->grad[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
      },
      a);
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an](TensorNode& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          an->grad[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
      },
      a);
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.data()[i], kLogClamp));
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an](TensorNode& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const double x = an->data[i];
          if (x >= kLogClamp) an->grad[i] += o.grad[i] / x;
        }
      },
      a);
}

Tensor softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw DimensionError("softmax over an empty dimension: " + shape_string(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &a.data()[i * n];
    double* y = &out[i * n];
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an, m, n](TensorNode& o) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* y = &o.data[i * n];
          const double* gy = &o.grad[i * n];
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += y[j] * (gy[j] - dot);
        }
      },
      a);
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rows() != m || p.shape().size() != parts[0].shape().size()) {
      throw DimensionError("concat: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    offsets.push_back(n);
    n += p.cols();
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&parts[k].data()[i * w], w, &out[i * n + offsets[k]]);
  }
  Shape shape = parts[0].shape();
  shape.back() = n;

  const bool track = Tape::active().recording() &&
                     std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  auto node = new_node(std::move(shape), std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    TensorNode* o = node.get();
    Tape::active().record(node, [inputs, offsets, o, m, n]() {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& in = *inputs[k];
        if (!in.requires_grad) continue;
        const std::size_t w = in.shape.back();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) in.grad[i * w + j] += o->grad[i * n + offsets[k] + j];
      }
    });
  }
  return make_tensor(std::move(node));
}

Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_string(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&a.data()[i * n + begin], w, &out[i * w]);
  Shape shape = a.shape();
  shape.back() = w;
  auto an = a.node();
  return finish(
      std::move(shape), std::move(out),
      [an, m, n, w, begin](TensorNode& o) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) an->grad[i * n + begin + j] += o.grad[i * w + j];
      },
      a);
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto an = a.node();
  return finish(
      {1}, {total},
      [an](TensorNode& o) {
        for (auto& g : an->grad) g += o.grad[0];
      },
      a);
}

Tensor dropout(const Tensor& a, double p, bool train, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!train || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const double factor = 1.0 / (1.0 - p);
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = keep(rng) ? factor : 0.0;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  auto an = a.node();
  return finish(
      a.shape(), std::move(out),
      [an, mask = std::move(mask)](TensorNode& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * mask[i];
      },
      a);
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding");
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: no ids");
  std::vector<double> out(ids.size() * dim);
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b] < 0 || static_cast<std::size_t>(ids[b]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[b]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(&table.data()[ids[b] * dim], dim, &out[b * dim]);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return finish(
      {ids.size(), dim}, std::move(out),
      [tn, idv = std::move(idv), dim](TensorNode& o) {
        for (std::size_t b = 0; b < idv.size(); ++b)
          for (std::size_t j = 0; j < dim; ++j) tn->grad[idv[b] * dim + j] += o.grad[b * dim + j];
      },
      table);
}

Tensor gather(const Tensor& a, std::span<const int> ids) {
  const std::size_t m = a.rows(), n = a.cols();
  if (ids.size() != m) {
    throw DimensionError("gather: " + std::to_string(ids.size()) + " ids for " + shape_string(a.shape()));
  }
  std::vector<double> out(m);
  for (std::size_t b = 0; b < m; ++b) {
    if (ids[b] < 0 || static_cast<std::size_t>(ids[b]) >= n) {
      throw std::out_of_range("gather: id " + std::to_string(ids[b]) + " outside " + std::to_string(n));
    }
    out[b] = a.data()[b * n + ids[b]];
  }
  auto an = a.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return finish(
      {m, 1}, std::move(out),
      [an, idv = std::move(idv), n](TensorNode& o) {
        for (std::size_t b = 0; b < idv.size(); ++b) an->grad[b * n + idv[b]] += o.grad[b];
      },
      a);
}

Tensor rowdot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "rowdot");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j] * b.data()[i * n + j];
  auto an = a.node(), bn = b.node();
  return finish(
      {m, 1}, std::move(out),
      [an, bn, m, n](TensorNode& o) {
        for (std::size_t i = 0; i < m; ++i) {
          const double g = o.grad[i];
          for (std::size_t j = 0; j < n; ++j) {
            if (an->requires_grad) an->grad[i * n + j] += g * bn->data[i * n + j];
            if (bn->requires_grad) bn->grad[i * n + j] += g * an->data[i * n + j];
          }
        }
      },
      a, b);
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  const std::size_t m = a.rows(), n = a.cols();
  if (s.size() != m) {
    throw DimensionError("scale_rows: scale " + shape_string(s.shape()) + " does not match rows of " +
                         shape_string(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] * s.data()[i];
  auto an = a.node(), sn = s.node();
  return finish(
      a.shape(), std::move(out),
      [an, sn, m, n](TensorNode& o) {
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (an->requires_grad) an->grad[i * n + j] += o.grad[i * n + j] * sn->data[i];
            acc += o.grad[i * n + j] * an->data[i * n + j];
          }
          if (sn->requires_grad) sn->grad[i] += acc;
        }
      },
      a, s);
}

}  // namespace spm
